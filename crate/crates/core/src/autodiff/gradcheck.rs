//! Numerical derivatives for checking tape gradients.

/// Central difference `(f(h) - f(-h)) / 2h` of a function of the offset.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Ridders' extrapolated central difference of `f` at offset 0, starting from
/// step `h0` and shrinking by 1.4 per row. Returns the estimate and its error
/// bound.
pub fn ridders(mut f: impl FnMut(f64) -> f64, h0: f64) -> (f64, f64) {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    let s2 = SHRINK * SHRINK;
    let mut table = [[0.0f64; ROWS]; ROWS];
    let mut h = h0;
    table[0][0] = central_difference(&mut f, h);
    let mut best = (table[0][0], f64::INFINITY);
    for i in 1..ROWS {
        h /= SHRINK;
        table[0][i] = central_difference(&mut f, h);
        let mut fac = s2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= s2;
            let err = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if err <= best.1 {
                best = (table[j][i], err);
            }
        }
        // stop once higher order makes things worse
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * best.1 {
            break;
        }
    }
    best
}

/// Ridders' estimate restricted to one smooth piece of a piecewise-smooth
/// function. `f` returns the value and the branch signature at an offset;
/// the starting step is divided by ten until both `+h` and `-h` share the
/// signature of the base point. `None` when no step down to `min_h` does.
pub fn ridders_piecewise(mut f: impl FnMut(f64) -> (f64, Vec<bool>), h0: f64, min_h: f64) -> Option<(f64, f64)> {
    let base = f(0.0).1;
    let mut h = h0;
    while h >= min_h {
        if f(h).1 == base && f(-h).1 == base {
            return Some(ridders(|d| f(d).0, h));
        }
        h /= 10.0;
    }
    None
}
