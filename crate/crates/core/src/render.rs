//! Binary PGM output for image grids and heatmaps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::{IMAGE_PIXELS, IMAGE_SIDE};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("malformed PGM: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maps an intensity in `[0, 1]` to a byte, rounding halves up.
pub fn quantize(intensity: f64) -> u8 {
    (intensity * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major bytes.
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Ignores coordinates outside the image.
    pub fn put(&mut self, x: i64, y: i64, value: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = value;
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, RenderError> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RenderError::Parse("header ends early".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(RenderError::Parse(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| RenderError::Parse(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(RenderError::Parse(format!("maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let data = bytes
            .get(pos + 1..)
            .ok_or_else(|| RenderError::Parse("no raster".into()))?;
        if data.len() != width * height {
            return Err(RenderError::Parse(format!(
                "raster has {} bytes, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data: data.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), RenderError> {
        write_bytes(path, &self.to_pgm())
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RenderError> {
    std::fs::write(path, bytes).map_err(|source| RenderError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `rows × cols` tiles of 28×28 intensities, optionally separated by 1-pixel lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    rows: usize,
    cols: usize,
    tiles: Vec<Vec<f64>>,
    separator: Option<f64>,
}

impl ImageGrid {
    /// Tiles are given row-major.
    pub fn new(
        rows: usize,
        cols: usize,
        tiles: Vec<Vec<f64>>,
        separator: Option<f64>,
    ) -> Result<Self, RenderError> {
        if rows == 0 || cols == 0 {
            return Err(RenderError::InvalidGrid("rows and cols must be positive".into()));
        }
        if tiles.len() != rows * cols {
            return Err(RenderError::InvalidGrid(format!(
                "{} tiles for a {rows}x{cols} grid",
                tiles.len()
            )));
        }
        if let Some(t) = tiles.iter().position(|t| t.len() != IMAGE_PIXELS) {
            return Err(RenderError::InvalidGrid(format!(
                "tile {t} has {} pixels",
                tiles[t].len()
            )));
        }
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if tiles.iter().flatten().any(|&v| !in_range(v)) || separator.is_some_and(|s| !in_range(s)) {
            return Err(RenderError::InvalidGrid("intensity outside [0, 1]".into()));
        }
        Ok(Self {
            rows,
            cols,
            tiles,
            separator,
        })
    }

    fn gap(&self) -> usize {
        usize::from(self.separator.is_some())
    }

    pub fn width(&self) -> usize {
        self.cols * IMAGE_SIDE + (self.cols - 1) * self.gap()
    }

    pub fn height(&self) -> usize {
        self.rows * IMAGE_SIDE + (self.rows - 1) * self.gap()
    }

    pub fn to_image(&self) -> GrayImage {
        let mut img = GrayImage::filled(self.width(), self.height(), quantize(self.separator.unwrap_or(0.0)));
        let step = IMAGE_SIDE + self.gap();
        for (t, tile) in self.tiles.iter().enumerate() {
            let (r, c) = (t / self.cols, t % self.cols);
            for y in 0..IMAGE_SIDE {
                let row_start = (r * step + y) * img.width + c * step;
                for x in 0..IMAGE_SIDE {
                    img.data[row_start + x] = quantize(tile[y * IMAGE_SIDE + x]);
                }
            }
        }
        img
    }
}

pub fn write_pgm(grid: &ImageGrid, path: &Path) -> Result<(), RenderError> {
    grid.to_image().write(path)
}

/// Scale recorded next to a heatmap so byte values can be mapped back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
    pub note: Option<String>,
}

impl HeatmapMeta {
    /// Value represented by a heatmap byte.
    pub fn value_of(&self, byte: u8) -> f64 {
        if self.max > self.min {
            self.min + f64::from(byte) / 255.0 * (self.max - self.min)
        } else {
            self.min
        }
    }
}

/// Linear `[min, max] → [0, 255]` map of row-major values; a constant grid renders as 128.
pub fn heatmap(values: &[f64], rows: usize, cols: usize) -> Result<(GrayImage, HeatmapMeta), RenderError> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(RenderError::InvalidGrid(format!(
            "{} values for a {rows}x{cols} heatmap",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RenderError::InvalidGrid("heatmap values must be finite".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (data, note) = if max > min {
        let span = max - min;
        (values.iter().map(|&v| quantize((v - min) / span)).collect(), None)
    } else {
        (vec![128u8; values.len()], Some("constant grid rendered as mid-gray".to_string()))
    };
    Ok((
        GrayImage {
            width: cols,
            height: rows,
            data,
        },
        HeatmapMeta {
            rows,
            cols,
            min,
            max,
            note,
        },
    ))
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the heatmap PGM and its JSON sidecar; returns the sidecar path.
pub fn write_heatmap(values: &[f64], rows: usize, cols: usize, path: &Path) -> Result<PathBuf, RenderError> {
    let (img, meta) = heatmap(values, rows, cols)?;
    img.write(path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&meta).expect("heatmap metadata serializes");
    write_bytes(&side, &json)?;
    Ok(side)
}
