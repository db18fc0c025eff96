//! Two-dimensional latent pictures: posterior scatter with ellipses, the
//! max-weight colormap over a grid, and stratified decodes.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::IMAGE_PIXELS;
use crate::oracle::{OracleError, PosteriorCache, WeightProfile};
use crate::render::{heatmap, GrayImage, ImageGrid, RenderError};
use crate::seeds::derive_seed;
use crate::vae::{VaeError, VaeModel};

pub const DEFAULT_GRID: usize = 200;
pub const DEFAULT_MARGIN: f64 = 0.25;
/// Half-width given to an axis whose points all share one coordinate.
pub const MIN_HALF_WIDTH: f64 = 1.0;
/// Ellipses are drawn at this many posterior standard deviations.
pub const ELLIPSE_STDS: f64 = 2.0;
pub const DEFAULT_PER_STRATUM: usize = 4;

#[derive(Debug, Error)]
pub enum LatentMapError {
    #[error("latent maps need a 2-dimensional latent space, model has {latent_dim}")]
    Dimensionality { latent_dim: usize },
    #[error("no posterior points")]
    Empty,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid strata: {0}")]
    InvalidStrata(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPoint {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub label: u8,
}

/// Posterior means and standard deviations of every cached training image.
pub fn posterior_points(cache: &PosteriorCache) -> Result<Vec<PosteriorPoint>, LatentMapError> {
    if cache.latent_dim() != 2 {
        return Err(LatentMapError::Dimensionality {
            latent_dim: cache.latent_dim(),
        });
    }
    Ok(cache
        .posteriors()
        .iter()
        .zip(cache.images())
        .map(|(p, im)| {
            let s = p.std_dev();
            PosteriorPoint {
                mean: [p.mean[0], p.mean[1]],
                std: [s[0], s[1]],
                label: im.label(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn validate(&self) -> Result<(), LatentMapError> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if ok {
            Ok(())
        } else {
            Err(LatentMapError::InvalidGrid(format!("bad bounds {self:?}")))
        }
    }
}

fn expand_axis(lo: f64, hi: f64, margin: f64) -> (f64, f64) {
    let extent = hi - lo;
    if extent == 0.0 {
        (lo - MIN_HALF_WIDTH, hi + MIN_HALF_WIDTH)
    } else {
        (lo - margin * extent, hi + margin * extent)
    }
}

/// Bounding box of the means, widened by `margin` times its size on every side.
pub fn fit_bounds(points: &[PosteriorPoint], margin: f64) -> Result<Bounds, LatentMapError> {
    if points.is_empty() {
        return Err(LatentMapError::Empty);
    }
    let fold = |axis: usize| {
        points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.mean[axis]), hi.max(p.mean[axis]))
        })
    };
    let (x0, x1) = fold(0);
    let (y0, y1) = fold(1);
    let (x_min, x_max) = expand_axis(x0, x1, margin);
    let (y_min, y_max) = expand_axis(y0, y1, margin);
    let b = Bounds {
        x_min,
        x_max,
        y_min,
        y_max,
    };
    b.validate()?;
    Ok(b)
}

/// Cell-centred sample points over `bounds`; row 0 is the top (largest y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Bounds,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(bounds: Bounds, rows: usize, cols: usize) -> Result<Self, LatentMapError> {
        bounds.validate()?;
        if rows == 0 || cols == 0 {
            return Err(LatentMapError::InvalidGrid("rows and cols must be positive".into()));
        }
        Ok(Self { bounds, rows, cols })
    }

    pub fn point(&self, row: usize, col: usize) -> [f64; 2] {
        let b = &self.bounds;
        let x = b.x_min + (col as f64 + 0.5) * (b.x_max - b.x_min) / self.cols as f64;
        let y = b.y_max - (row as f64 + 0.5) * (b.y_max - b.y_min) / self.rows as f64;
        [x, y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub spec: GridSpec,
    /// Row-major `max_i w_i(z)`.
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.spec.cols + col]
    }

    /// Share of grid points whose max weight exceeds `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        self.values.iter().filter(|&&v| v > threshold).count() as f64 / self.values.len() as f64
    }
}

pub fn max_weight_at(cache: &PosteriorCache, z: [f64; 2]) -> Result<f64, LatentMapError> {
    Ok(cache.weights(&z)?.max_weight())
}

/// Evaluates the max weight at every grid point, in parallel.
pub fn grid_max_weight(
    model: &VaeModel,
    cache: &PosteriorCache,
    spec: GridSpec,
) -> Result<LatentGrid, LatentMapError> {
    if model.latent_dim() != 2 {
        return Err(LatentMapError::Dimensionality {
            latent_dim: model.latent_dim(),
        });
    }
    cache.check_model(model)?;
    let values = (0..spec.rows * spec.cols)
        .into_par_iter()
        .map(|i| max_weight_at(cache, spec.point(i / spec.cols, i % spec.cols)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LatentGrid { spec, values })
}

/// Max-weight band `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub lo: f64,
    pub hi: f64,
}

impl Stratum {
    pub fn contains(&self, v: f64) -> bool {
        v > self.lo && v <= self.hi
    }
}

pub fn default_strata() -> Vec<Stratum> {
    vec![
        Stratum { lo: 0.0, hi: 0.5 },
        Stratum { lo: 0.5, hi: 0.9 },
        Stratum { lo: 0.9, hi: 1.0 },
    ]
}

/// Strata must be contiguous, increasing and span exactly `(0, 1]`.
pub fn validate_strata(strata: &[Stratum]) -> Result<(), LatentMapError> {
    let err = |m: &str| Err(LatentMapError::InvalidStrata(m.into()));
    let (Some(first), Some(last)) = (strata.first(), strata.last()) else {
        return err("no strata");
    };
    if first.lo != 0.0 || last.hi != 1.0 {
        return err("strata must span (0, 1]");
    }
    if strata.iter().any(|s| !(s.lo < s.hi)) {
        return err("each stratum needs lo < hi");
    }
    if strata.windows(2).any(|w| w[0].hi != w[1].lo) {
        return err("strata must be contiguous");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedSample {
    pub stratum: usize,
    pub row: usize,
    pub col: usize,
    pub z: [f64; 2],
    /// Decoder Bernoulli means.
    pub image: Vec<f64>,
    pub profile: WeightProfile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedDecode {
    pub samples: Vec<StratifiedSample>,
    /// Indices of strata that contained no grid point.
    pub empty_strata: Vec<usize>,
}

/// Draws up to `per_stratum` grid points from each max-weight band and decodes them.
///
/// Stratum `s` samples with `derive_seed(seed, s)`; samples come out grouped by
/// stratum, grid order within a stratum.
pub fn stratified_decode(
    model: &VaeModel,
    cache: &PosteriorCache,
    grid: &LatentGrid,
    strata: &[Stratum],
    per_stratum: usize,
    seed: u64,
) -> Result<StratifiedDecode, LatentMapError> {
    validate_strata(strata)?;
    cache.check_model(model)?;
    let mut out = StratifiedDecode {
        samples: Vec::new(),
        empty_strata: Vec::new(),
    };
    for (s, stratum) in strata.iter().enumerate() {
        let members: Vec<usize> = (0..grid.values.len())
            .filter(|&i| stratum.contains(grid.values[i]))
            .collect();
        if members.is_empty() {
            out.empty_strata.push(s);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let take = per_stratum.min(members.len());
        let mut picks: Vec<usize> = index::sample(&mut rng, members.len(), take)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picks.sort_unstable();
        for i in picks {
            let (row, col) = (i / grid.spec.cols, i % grid.spec.cols);
            let z = grid.spec.point(row, col);
            out.samples.push(StratifiedSample {
                stratum: s,
                row,
                col,
                z,
                image: model.decode(&z)?,
                profile: cache.weights(&z)?,
            });
        }
    }
    Ok(out)
}

/// One row per stratum, `per_stratum` columns; unfilled slots are black.
pub fn stratified_gallery(
    decode: &StratifiedDecode,
    strata: usize,
    per_stratum: usize,
) -> Result<ImageGrid, LatentMapError> {
    let mut tiles = vec![vec![0.0; IMAGE_PIXELS]; strata * per_stratum.max(1)];
    let mut filled = vec![0usize; strata];
    for s in &decode.samples {
        let slot = s.stratum * per_stratum.max(1) + filled[s.stratum];
        tiles[slot] = s.image.clone();
        filled[s.stratum] += 1;
    }
    Ok(ImageGrid::new(strata, per_stratum.max(1), tiles, Some(1.0))?)
}

/// Latent ↔ pixel map for a canvas covering `bounds`; pixel y grows downward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTransform {
    pub bounds: Bounds,
    pub width: usize,
    pub height: usize,
}

impl PixelTransform {
    pub fn to_pixel(&self, z: [f64; 2]) -> [f64; 2] {
        let b = &self.bounds;
        [
            (z[0] - b.x_min) / (b.x_max - b.x_min) * self.width as f64,
            (b.y_max - z[1]) / (b.y_max - b.y_min) * self.height as f64,
        ]
    }

    pub fn to_latent(&self, p: [f64; 2]) -> [f64; 2] {
        let b = &self.bounds;
        [
            b.x_min + p[0] / self.width as f64 * (b.x_max - b.x_min),
            b.y_max - p[1] / self.height as f64 * (b.y_max - b.y_min),
        ]
    }
}

/// Axis-aligned ellipse in latent coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
}

impl Ellipse {
    pub fn for_posterior(p: &PosteriorPoint) -> Self {
        Self {
            center: p.mean,
            semi_axes: [ELLIPSE_STDS * p.std[0], ELLIPSE_STDS * p.std[1]],
        }
    }

    pub fn point_at(&self, angle: f64) -> [f64; 2] {
        [
            self.center[0] + self.semi_axes[0] * angle.cos(),
            self.center[1] + self.semi_axes[1] * angle.sin(),
        ]
    }
}

fn plot(img: &mut GrayImage, p: [f64; 2], value: u8) {
    img.put(p[0].floor() as i64, p[1].floor() as i64, value);
}

/// The max-weight heatmap with posterior ellipses traced in black and means
/// marked in white.
pub fn overlay(grid: &LatentGrid, points: &[PosteriorPoint]) -> Result<GrayImage, LatentMapError> {
    let (mut img, _) = heatmap(&grid.values, grid.spec.rows, grid.spec.cols)?;
    let t = PixelTransform {
        bounds: grid.spec.bounds,
        width: grid.spec.cols,
        height: grid.spec.rows,
    };
    for p in points {
        let e = Ellipse::for_posterior(p);
        let rx = e.semi_axes[0] / (t.bounds.x_max - t.bounds.x_min) * t.width as f64;
        let ry = e.semi_axes[1] / (t.bounds.y_max - t.bounds.y_min) * t.height as f64;
        let steps = ((rx + ry) * 8.0).ceil().clamp(16.0, 4096.0) as usize;
        for k in 0..steps {
            let angle = k as f64 / steps as f64 * std::f64::consts::TAU;
            plot(&mut img, t.to_pixel(e.point_at(angle)), 0);
        }
    }
    for p in points {
        plot(&mut img, t.to_pixel(p.mean), 255);
    }
    Ok(img)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct GridRow {
    pub row: usize,
    pub col: usize,
    pub z_x: f64,
    pub z_y: f64,
    pub max_weight: f64,
}

pub fn write_grid_csv<W: Write>(grid: &LatentGrid, out: W) -> Result<(), LatentMapError> {
    let mut w = csv::Writer::from_writer(out);
    for row in 0..grid.spec.rows {
        for col in 0..grid.spec.cols {
            let [z_x, z_y] = grid.spec.point(row, col);
            w.serialize(GridRow {
                row,
                col,
                z_x,
                z_y,
                max_weight: grid.value(row, col),
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PosteriorRow {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub label: u8,
}

pub fn write_posterior_csv<W: Write>(points: &[PosteriorPoint], out: W) -> Result<(), LatentMapError> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(PosteriorRow {
            mean_x: p.mean[0],
            mean_y: p.mean[1],
            std_x: p.std[0],
            std_y: p.std[1],
            label: p.label,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
