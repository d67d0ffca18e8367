//! `T × H × W` rasters and their file format.
//!
//! A field on disk is a JSON sidecar
//! `{"shape":[T,H,W],"dtype":"f32","order":"row-major","meta":{...}}` next to a
//! raw little-endian `f32` file with the same stem and a `.bin` extension.
//! Values are widened back to `f64` on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    steps: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(steps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if steps * height * width != data.len() {
            return Err(Error::shape(
                "Field::new",
                format!("({steps}, {height}, {width}) needs {} values, got {}", steps * height * width, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Field::new" });
        }
        Ok(Self {
            steps,
            height,
            width,
            data,
        })
    }

    /// Stacks equally sized frames.
    pub fn from_frames(height: usize, width: usize, frames: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * height * width);
        for f in frames {
            if f.len() != height * width {
                return Err(Error::shape("Field::from_frames", "frame size differs from height*width"));
            }
            data.extend_from_slice(f);
        }
        Self::new(frames.len(), height, width, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.steps, self.height, self.width)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.cells();
        &self.data[k * n..(k + 1) * n]
    }

    /// Frame `k` as a `[cells, 1]` column, the layout the lattice consumes.
    pub fn frame_column(&self, k: usize) -> Tensor {
        Tensor::from_parts(vec![self.cells(), 1], self.frame(k).to_vec())
    }

    pub fn value(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[(k * self.height + row) * self.width + col]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy with every value rounded through `f32`, i.e. what a save/load round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    /// Writes `<stem>.json` and `<stem>.bin`. `path` may carry either extension or none.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let (json_path, bin_path) = sidecar_paths(path);
        let header = FieldHeader {
            shape: [self.steps, self.height, self.width],
            dtype: "f32".into(),
            order: "row-major".into(),
            meta,
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (json_path, bin_path) = sidecar_paths(path);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: FieldHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
        if header.dtype != "f32" || header.order != "row-major" {
            return Err(Error::format(
                &json_path,
                format!("unsupported dtype/order {}/{}", header.dtype, header.order),
            ));
        }
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let [t, h, w] = header.shape;
        if bytes.len() != t * h * w * 4 {
            return Err(Error::format(
                &bin_path,
                format!("expected {} bytes for shape {:?}, found {}", t * h * w * 4, header.shape, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let field = Self::new(t, h, w, data).map_err(|e| Error::format(&bin_path, e.to_string()))?;
        Ok((field, header.meta))
    }

    /// One CSV per frame (`<prefix>_0000.csv`, ...), `H` lines of `W` values.
    pub fn write_csv_frames(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::with_capacity(self.steps);
        for k in 0..self.steps {
            let path = dir.join(format!("{prefix}_{k:04}.csv"));
            let mut out = Vec::new();
            for row in 0..self.height {
                let line: Vec<String> = (0..self.width).map(|c| self.value(k, row, c).to_string()).collect();
                writeln!(out, "{}", line.join(",")).expect("write to vec");
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    shape: [usize; 3],
    dtype: String,
    order: String,
    #[serde(default)]
    meta: serde_json::Value,
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}
