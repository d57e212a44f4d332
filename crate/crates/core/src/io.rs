//! File formats: SPH1 histogram cubes, PFM depth maps, depth/uncertainty
//! CSV, ASCII PLY and the JSON scene sidecar.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, HistogramCube, SceneSpec, TARGETS};
use crate::simulate::DepthMap;

const SPH_MAGIC: &[u8; 4] = b"SPH1";

pub fn write_sph<W: Write>(mut w: W, hist: &HistogramCube) -> Result<()> {
    let d = hist.dims;
    let mut buf = Vec::with_capacity(16 + hist.counts.len() * 4);
    buf.extend_from_slice(SPH_MAGIC);
    for v in [d.n_rows, d.n_cols, d.bins] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in &hist.counts {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_sph<R: Read>(mut r: R) -> Result<HistogramCube> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != SPH_MAGIC {
        return Err(Error::Format("not an SPH1 file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let dims = Dims::new(word(1), word(2), word(3));
    dims.validate().map_err(|e| Error::Format(format!("bad SPH1 header: {e}")))?;
    let expected = dims
        .pixels()
        .checked_mul(dims.bins)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("SPH1 header overflows".into()))?;
    if bytes.len() - 16 != expected {
        return Err(Error::Format(format!(
            "SPH1 payload has {} bytes, header implies {expected}",
            bytes.len() - 16
        )));
    }
    let counts = bytes[16..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    HistogramCube::from_counts(dims, counts)
}

pub fn save_sph(path: &Path, hist: &HistogramCube) -> Result<()> {
    write_sph(BufWriter::new(fs::File::create(path)?), hist)
}

pub fn load_sph(path: &Path) -> Result<HistogramCube> {
    read_sph(fs::File::open(path)?)
}

/// Single-channel PFM, little-endian, rows stored bottom to top.
pub fn write_pfm<W: Write>(mut w: W, map: &DepthMap) -> Result<()> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", map.n_cols, map.n_rows).into_bytes();
    for r in (0..map.n_rows).rev() {
        for c in 0..map.n_cols {
            buf.extend_from_slice(&(map.values[r * map.n_cols + c] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm<R: Read>(mut r: R) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    // header is three whitespace-separated tokens and a single separator byte
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens.len() < 4 {
        return Err(Error::Format("truncated PFM header".into()));
    }
    if tokens[0] != "Pf" {
        return Err(Error::Format(format!("unsupported PFM type {:?}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM size {s:?}")));
    let (n_cols, n_rows) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {:?}", tokens[3])))?;
    let little = scale < 0.0;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != n_rows * n_cols * 4 {
        return Err(Error::Format(format!("PFM payload has {} bytes, expected {}", data.len(), n_rows * n_cols * 4)));
    }
    let mut values = vec![0.0; n_rows * n_cols];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (r, c) = (n_rows - 1 - i / n_cols, i % n_cols);
        values[r * n_cols + c] = v as f64;
    }
    Ok(DepthMap { n_rows, n_cols, values })
}

pub fn load_pfm(path: &Path) -> Result<DepthMap> {
    read_pfm(fs::File::open(path)?)
}

pub fn save_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    write_pfm(BufWriter::new(fs::File::create(path)?), map)
}

/// Per-pixel dual depths with their uncertainty, in bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    pub dims: Dims,
    pub depth: Vec<[f64; TARGETS]>,
    pub eps: Vec<[f64; TARGETS]>,
}

impl DepthField {
    const HEADER: &'static str = "row,col,depth1,depth2,eps1,eps2";

    pub fn to_csv(&self) -> String {
        let mut s = format!("# rows={} cols={} bins={}\n{}\n", self.dims.n_rows, self.dims.n_cols, self.dims.bins, Self::HEADER);
        for (n, (d, e)) in self.depth.iter().zip(&self.eps).enumerate() {
            let (r, c) = self.dims.row_col(n);
            s.push_str(&format!("{r},{c},{:?},{:?},{:?},{:?}\n", d[0], d[1], e[0], e[1]));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| Error::Format("empty depth CSV".into()))?;
        let mut size = [None; 3];
        for tok in meta.trim_start_matches('#').split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Format(format!("bad depth CSV header {meta:?}")))?;
            let v: usize = v.parse().map_err(|_| Error::Format(format!("bad value in {tok:?}")))?;
            match k {
                "rows" => size[0] = Some(v),
                "cols" => size[1] = Some(v),
                "bins" => size[2] = Some(v),
                _ => return Err(Error::Format(format!("unknown key {k:?}"))),
            }
        }
        let [Some(rows), Some(cols), Some(bins)] = size else {
            return Err(Error::Format("depth CSV header lacks rows/cols/bins".into()));
        };
        let dims = Dims::new(rows, cols, bins);
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Format("unexpected depth CSV columns".into()));
        }
        let mut depth = vec![[0.0; TARGETS]; dims.pixels()];
        let mut eps = vec![[0.0; TARGETS]; dims.pixels()];
        let mut seen = vec![false; dims.pixels()];
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("depth CSV row {line:?}")));
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad index {s:?}")));
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
            let (r, c) = (idx(f[0])?, idx(f[1])?);
            if r >= rows || c >= cols {
                return Err(Error::Format(format!("pixel ({r}, {c}) out of range")));
            }
            let n = dims.pixel_index(r, c);
            depth[n] = [num(f[2])?, num(f[3])?];
            eps[n] = [num(f[4])?, num(f[5])?];
            seen[n] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("depth CSV is missing pixels".into()));
        }
        Ok(Self { dims, depth, eps })
    }

    /// One surface as a depth map.
    pub fn surface(&self, k: usize) -> DepthMap {
        DepthMap {
            n_rows: self.dims.n_rows,
            n_cols: self.dims.n_cols,
            values: self.depth.iter().map(|d| d[k]).collect(),
        }
    }

    /// ASCII PLY with one vertex per (pixel, surface). `x` runs along the
    /// columns, `y` up the image and `z` is the range in meters, so larger
    /// range is farther along +z. The uncertainty property is in squared bins.
    pub fn to_ply(&self, pitch_m: f64) -> String {
        let n = self.depth.len() * TARGETS;
        let mut s = format!(
            "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nproperty float uncertainty\nend_header\n"
        );
        for (i, (d, e)) in self.depth.iter().zip(&self.eps).enumerate() {
            let (r, c) = self.dims.row_col(i);
            let x = c as f64 * pitch_m;
            let y = (self.dims.n_rows - 1 - r) as f64 * pitch_m;
            for k in 0..TARGETS {
                s.push_str(&format!("{x:.6} {y:.6} {:.6} {:.6}\n", d[k] * self.dims.bin_width_m, e[k]));
            }
        }
        s
    }
}

/// Scene description stored next to a simulated cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub format: String,
    pub kind: String,
    pub ppp: f64,
    pub sbr: f64,
    pub seed: u64,
    pub irf_sigma: f64,
    pub scene: SceneSpec,
}

impl SceneSidecar {
    pub const FORMAT: &'static str = "photon-unroll-scene-1";

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("scene sidecar: {e}")))?;
        if s.format != Self::FORMAT {
            return Err(Error::Format(format!("scene sidecar version {:?}, expected {:?}", s.format, Self::FORMAT)));
        }
        s.scene.validate().map_err(|e| Error::Format(format!("scene sidecar: {e}")))?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
