//! Optimal-decoder oracle for a Bernoulli VAE.
//!
//! With the encoder held fixed, the best possible decoder maps a latent `z`
//! to `μ(z) = Σ_i w_i(z) x_i`, where `w_i(z) = q(z|x_i) / Σ_j q(z|x_j)` over
//! the training images `x_i`. This module computes those weights, the
//! weighted-average image, the weights' perplexity and the top-k neighbours.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::Image;
use crate::vae::{GaussianPosterior, VaeError, VaeModel};

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normalized weights below this are reported as exactly zero.
pub const FLUSH_THRESHOLD: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no training posteriors to weigh")]
    Empty,
    #[error("latent dimension mismatch: z has {z}, posterior has {posterior}")]
    Dimension { z: usize, posterior: usize },
    #[error("log densities are not finite (max {0})")]
    NonFinite(f64),
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("profile has {profile} weights but {images} images were given")]
    LengthMismatch { profile: usize, images: usize },
    #[error("posterior cache was built for model {cached}, not {model}")]
    CacheMismatch { cached: String, model: String },
    #[error(transparent)]
    Vae(#[from] VaeError),
}

#[inline]
fn density_term(z: f64, mean: f64, log_var: f64, inv_var: f64) -> f64 {
    let d = z - mean;
    LN_2PI + log_var + d * d * inv_var
}

/// `ln N(z; mean, diag(exp(log_variance)))`.
pub fn gaussian_log_density(z: &[f64], post: &GaussianPosterior) -> Result<f64, OracleError> {
    if z.len() != post.dim() {
        return Err(OracleError::Dimension {
            z: z.len(),
            posterior: post.dim(),
        });
    }
    let mut acc = 0.0;
    for ((&zd, &m), &lv) in z.iter().zip(&post.mean).zip(&post.log_variance) {
        acc += density_term(zd, m, lv, (-lv).exp());
    }
    Ok(-0.5 * acc)
}

/// `w_i(z)` over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    /// Normalized weights, with values under [`FLUSH_THRESHOLD`] set to 0.
    pub weights: Vec<f64>,
    /// Unflushed `ln w_i`.
    pub log_weights: Vec<f64>,
    pub source_z: Vec<f64>,
    pub train_set_id: String,
}

impl WeightProfile {
    /// Softmax of `log_densities` via a max-shifted log-sum-exp.
    pub fn from_log_densities(
        log_densities: &[f64],
        source_z: Vec<f64>,
        train_set_id: impl Into<String>,
    ) -> Result<Self, OracleError> {
        if log_densities.is_empty() {
            return Err(OracleError::Empty);
        }
        let max = log_densities
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || log_densities.iter().any(|v| v.is_nan()) {
            return Err(OracleError::NonFinite(max));
        }
        let sum: f64 = log_densities.iter().map(|&l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        let log_weights: Vec<f64> = log_densities.iter().map(|&l| l - log_norm).collect();
        let weights = log_weights
            .iter()
            .map(|&lw| {
                let w = lw.exp();
                if w < FLUSH_THRESHOLD {
                    0.0
                } else {
                    w
                }
            })
            .collect();
        Ok(Self {
            weights,
            log_weights,
            source_z,
            train_set_id: train_set_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

pub fn compute_weights(z: &[f64], posteriors: &[GaussianPosterior]) -> Result<WeightProfile, OracleError> {
    let log_densities = posteriors
        .iter()
        .map(|p| gaussian_log_density(z, p))
        .collect::<Result<Vec<_>, _>>()?;
    WeightProfile::from_log_densities(&log_densities, z.to_vec(), "")
}

/// `μ = Σ_i w_i x_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedAverage {
    pub mu: Vec<f64>,
}

pub fn weighted_average(profile: &WeightProfile, train_images: &[Image]) -> Result<WeightedAverage, OracleError> {
    if profile.len() != train_images.len() {
        return Err(OracleError::LengthMismatch {
            profile: profile.len(),
            images: train_images.len(),
        });
    }
    let width = train_images.first().map_or(0, |im| im.pixels().len());
    let mut mu = vec![0.0; width];
    for (&w, im) in profile.weights.iter().zip(train_images) {
        if w == 0.0 {
            continue;
        }
        for (m, &p) in mu.iter_mut().zip(im.pixels()) {
            *m += w * p;
        }
    }
    Ok(WeightedAverage { mu })
}

/// `exp(−Σ w_i ln w_i)`, clamped to `[1, N]`.
pub fn perplexity(profile: &WeightProfile) -> f64 {
    let entropy: f64 = profile
        .weights
        .iter()
        .zip(&profile.log_weights)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &lw)| -w * lw)
        .sum();
    entropy.exp().clamp(1.0, profile.len() as f64)
}

/// The `k` heaviest training indices, heaviest first; ties go to the lower index.
pub fn top_k(profile: &WeightProfile, k: usize) -> Result<Vec<(usize, f64)>, OracleError> {
    let n = profile.len();
    if k == 0 || k > n {
        return Err(OracleError::KOutOfRange { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let by_weight = |&a: &usize, &b: &usize| {
        profile.log_weights[b]
            .total_cmp(&profile.log_weights[a])
            .then(a.cmp(&b))
    };
    if k < n {
        idx.select_nth_unstable_by(k - 1, by_weight);
        idx.truncate(k);
    }
    idx.sort_by(by_weight);
    Ok(idx.into_iter().map(|i| (i, profile.weights[i])).collect())
}

/// Encodings of a model's training set, computed once and reused for every
/// query point.
#[derive(Clone, Debug)]
pub struct PosteriorCache {
    model_id: String,
    train_set_id: String,
    latent_dim: usize,
    images: Vec<Image>,
    posteriors: Vec<GaussianPosterior>,
    means: Array2<f64>,
    log_vars: Array2<f64>,
    inv_vars: Array2<f64>,
}

const ENCODE_CHUNK: usize = 512;

impl PosteriorCache {
    pub fn build(model: &VaeModel, images: Vec<Image>) -> Result<Self, OracleError> {
        if images.is_empty() {
            return Err(OracleError::Empty);
        }
        let latent_dim = model.latent_dim();
        let mut posteriors = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let m = crate::vae::images_to_matrix(chunk);
            posteriors.extend(model.encode_batch(m.view())?);
        }
        let n = images.len();
        let mut means = Array2::zeros((n, latent_dim));
        let mut log_vars = Array2::zeros((n, latent_dim));
        for (i, p) in posteriors.iter().enumerate() {
            for d in 0..latent_dim {
                means[[i, d]] = p.mean[d];
                log_vars[[i, d]] = p.log_variance[d];
            }
        }
        let inv_vars = log_vars.mapv(|lv: f64| (-lv).exp());
        Ok(Self {
            model_id: model.fingerprint(),
            train_set_id: crate::mnist::dataset_id(&images),
            latent_dim,
            images,
            posteriors,
            means,
            log_vars,
            inv_vars,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn train_set_id(&self) -> &str {
        &self.train_set_id
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn posteriors(&self) -> &[GaussianPosterior] {
        &self.posteriors
    }

    pub fn check_model(&self, model: &VaeModel) -> Result<(), OracleError> {
        let id = model.fingerprint();
        if id == self.model_id {
            Ok(())
        } else {
            Err(OracleError::CacheMismatch {
                cached: self.model_id.clone(),
                model: id,
            })
        }
    }

    /// Bit-identical to mapping [`gaussian_log_density`] over the posteriors.
    pub fn log_densities(&self, z: &[f64]) -> Result<Vec<f64>, OracleError> {
        if z.len() != self.latent_dim {
            return Err(OracleError::Dimension {
                z: z.len(),
                posterior: self.latent_dim,
            });
        }
        Ok(self
            .means
            .axis_iter(Axis(0))
            .zip(self.log_vars.axis_iter(Axis(0)))
            .zip(self.inv_vars.axis_iter(Axis(0)))
            .map(|((m, lv), iv)| {
                let mut acc = 0.0;
                for d in 0..z.len() {
                    acc += density_term(z[d], m[d], lv[d], iv[d]);
                }
                -0.5 * acc
            })
            .collect())
    }

    pub fn weights(&self, z: &[f64]) -> Result<WeightProfile, OracleError> {
        WeightProfile::from_log_densities(&self.log_densities(z)?, z.to_vec(), self.train_set_id.clone())
    }

    pub fn weighted_average(&self, profile: &WeightProfile) -> Result<WeightedAverage, OracleError> {
        weighted_average(profile, &self.images)
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.total_cmp(b).then_with(|| j.cmp(i)))
        .map(|(i, _)| i)
}
