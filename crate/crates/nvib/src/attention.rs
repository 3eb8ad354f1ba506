//! Attention-matrix files and heatmaps.
//!
//! A matrix file is the line `NVATTN1`, a little-endian `u32` header length,
//! a JSON header (shape, dtype, layer, input text, retained flags) and the
//! row-major `f32` weights.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nvib_core::model::LayerTrace;
use nvib_core::Real;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NVATTN1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub layer: usize,
    /// Whether the last column is the NVIB prior component.
    pub nvib: bool,
    pub input: String,
    /// Retained flags of the data columns (empty for standard layers).
    pub retained: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub header: Header,
    pub data: Vec<f32>,
}

impl AttentionMap {
    pub fn from_trace<T: Real>(trace: &LayerTrace<T>, input: &str) -> Self {
        let w = &trace.weights;
        Self {
            header: Header {
                rows: w.rows(),
                cols: w.cols(),
                dtype: "f32".into(),
                layer: trace.layer,
                nvib: trace.nvib,
                input: input.to_string(),
                retained: if trace.nvib { trace.retained.clone() } else { Vec::new() },
            },
            data: w.as_slice().iter().map(|v| v.f64() as f32).collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.header.cols + c]
    }

    /// Whether column `c` is a data column that was pruned.
    pub fn dropped(&self, c: usize) -> bool {
        self.header.nvib && c < self.header.retained.len() && !self.header.retained[c]
    }

    pub fn matrix(&self) -> nvib_core::Matrix<f64> {
        nvib_core::Matrix::from_vec(
            self.header.rows,
            self.header.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Retained flags for segment extraction: every data column for standard layers.
    pub fn retained_mask(&self) -> Vec<bool> {
        if self.header.nvib {
            self.header.retained.clone()
        } else {
            vec![true; self.header.cols]
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.header).expect("header serialises");
        let mut buf = Vec::with_capacity(12 + json.len() + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not an attention matrix file"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(bad("only f32 matrices are supported"));
        }
        let data: Vec<f32> = bytes[12 + len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.len() != header.rows * header.cols || (bytes.len() - 12 - len) % 4 != 0 {
            return Err(bad("data size does not match the header shape"));
        }
        Ok(Self { header, data })
    }
}

/// Colour for a weight in `[0, 1]`: dark purple at 0 through teal and green
/// to light yellow at 1. Values outside the range are clamped.
pub fn colour(v: f32) -> Rgb<u8> {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let i = STOPS.iter().rposition(|s| s.0 <= v).unwrap().min(STOPS.len() - 2);
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let t = (v - a.0) / (b.0 - a.0);
    Rgb(core::array::from_fn(|k| (a.1[k] + t * (b.1[k] - a.1[k])).round() as u8))
}

/// Colour of pruned columns.
pub const DROPPED: Rgb<u8> = Rgb([0, 0, 0]);

/// Heatmap with `cell x cell` pixels per weight, on a fixed `[0, 1]` scale.
/// Pruned columns are drawn fully dark.
pub fn heatmap(map: &AttentionMap, cell: u32) -> RgbImage {
    let (rows, cols) = (map.header.rows as u32, map.header.cols as u32);
    RgbImage::from_fn(cols * cell, rows * cell, |x, y| {
        let (r, c) = ((y / cell) as usize, (x / cell) as usize);
        if map.dropped(c) {
            DROPPED
        } else {
            colour(map.get(r, c))
        }
    })
}

/// Writes `layer{l}.attn` and `layer{l}.png` for every trace into `dir`.
pub fn export<T: Real>(traces: &[LayerTrace<T>], input: &str, dir: &Path, cell: u32) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for t in traces {
        let map = AttentionMap::from_trace(t, input);
        let bin = dir.join(format!("layer{}.attn", t.layer));
        map.write(&bin)?;
        let png = dir.join(format!("layer{}.png", t.layer));
        heatmap(&map, cell)
            .save(&png)
            .map_err(|e| Error::format(&png, e.to_string()))?;
        written.push(bin);
        written.push(png);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_scale_ends() {
        assert_eq!(colour(0.0), Rgb([68, 1, 84]));
        assert_eq!(colour(1.0), Rgb([253, 231, 37]));
        assert_eq!(colour(2.0), colour(1.0));
        assert_eq!(colour(-1.0), colour(0.0));
    }
}
