use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BatchSums, VaeError, VaeGradients, VaeModel, VaeSpec};
use crate::mnist::Image;
use crate::nn::{AdamState, NnError};

/// Rows per work item in parallel batch mode.
pub const PARALLEL_CHUNK_ROWS: usize = 16;

/// RNG stream used for shuffling and reparameterization noise; stream 0
/// initializes the parameters.
const TRAINING_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Split each minibatch across the rayon pool. Results agree with the
    /// sequential path to within rounding but are not bit-identical to it.
    pub parallel: bool,
}

/// Epoch-mean ELBO terms, per example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon_bce: f64,
    pub kl: f64,
    pub neg_elbo: f64,
}

/// Per-example mean terms for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerms {
    pub recon_bce: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeOptimizer {
    pub encoder: AdamState,
    pub decoder: AdamState,
}

impl VaeOptimizer {
    pub fn new(model: &VaeModel) -> Result<Self, VaeError> {
        let config = model.spec().optimizer;
        Ok(Self {
            encoder: AdamState::new(config, model.encoder())?,
            decoder: AdamState::new(config, model.decoder())?,
        })
    }
}

fn batch_gradients_parallel(
    model: &VaeModel,
    xs: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    scale: f64,
) -> Result<(BatchSums, VaeGradients), VaeError> {
    let n = xs.nrows();
    let starts: Vec<usize> = (0..n).step_by(PARALLEL_CHUNK_ROWS).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let end = (start + PARALLEL_CHUNK_ROWS).min(n);
            model.batch_gradients(
                xs.slice(s![start..end, ..]),
                noise.slice(s![start..end, ..]),
                scale,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    // Fixed-order reduction.
    let mut iter = parts.into_iter();
    let (mut sums, mut grads) = iter.next().expect("non-empty batch");
    for (s, g) in iter {
        sums.reconstruction_bce += s.reconstruction_bce;
        sums.kl += s.kl;
        grads.encoder.add_assign(&g.encoder)?;
        grads.decoder.add_assign(&g.decoder)?;
    }
    Ok((sums, grads))
}

/// One Adam step on the mean negative ELBO of `xs` under fixed `noise`.
pub fn train_step(
    model: &mut VaeModel,
    optimizer: &mut VaeOptimizer,
    xs: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    options: TrainOptions,
) -> Result<StepTerms, VaeError> {
    let n = xs.nrows();
    if n == 0 {
        return Err(VaeError::EmptyTrainingSet);
    }
    let scale = 1.0 / n as f64;
    let (sums, grads) = if options.parallel {
        batch_gradients_parallel(model, xs, noise, scale)?
    } else {
        model.batch_gradients(xs, noise, scale)?
    };
    let terms = StepTerms {
        recon_bce: sums.reconstruction_bce * scale,
        kl: sums.kl * scale,
    };
    if !(terms.recon_bce + terms.kl).is_finite() {
        return Err(VaeError::Nn(NnError::NonFiniteGradient { layer: 0 }));
    }
    let (enc, dec) = model.nets_mut();
    optimizer.encoder.step(enc, &grads.encoder)?;
    optimizer.decoder.step(dec, &grads.decoder)?;
    Ok(terms)
}

fn cmp_rows(a: ArrayView2<f64>, i: usize, j: usize) -> Ordering {
    a.row(i)
        .iter()
        .zip(a.row(j).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Trains on the rows of `data`.
///
/// Rows are first put in a canonical (lexicographic) order so the result
/// depends only on the multiset of rows and the seed.
pub fn train_matrix(
    spec: &VaeSpec,
    data: ArrayView2<f64>,
    options: TrainOptions,
) -> Result<(VaeModel, Vec<EpochRecord>), VaeError> {
    let mut model = VaeModel::new(spec.clone())?;
    let n = data.nrows();
    if n == 0 {
        return Err(VaeError::EmptyTrainingSet);
    }
    if data.ncols() != spec.input_dim {
        return Err(VaeError::Nn(NnError::Shape(format!(
            "training rows have {} values, spec input_dim is {}",
            data.ncols(),
            spec.input_dim
        ))));
    }
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&i, &j| cmp_rows(data, i, j));
    let data = data.select(Axis(0), &canonical);

    let mut optimizer = VaeOptimizer::new(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(TRAINING_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    let latent = spec.latent_dim;

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut recon = 0.0;
        let mut kl = 0.0;
        for (batch, rows) in order.chunks(spec.batch_size).enumerate() {
            let xs = data.select(Axis(0), rows);
            let noise = Array2::from_shape_simple_fn((rows.len(), latent), || {
                rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)
            });
            let terms = train_step(&mut model, &mut optimizer, xs.view(), noise.view(), options)
                .map_err(|e| match e {
                    VaeError::Nn(NnError::NonFiniteGradient { .. }) => {
                        VaeError::NonFinite { epoch, batch }
                    }
                    other => other,
                })?;
            recon += terms.recon_bce * rows.len() as f64;
            kl += terms.kl * rows.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            recon_bce: recon / n as f64,
            kl: kl / n as f64,
            neg_elbo: recon / n as f64 + kl / n as f64,
        };
        log::info!(
            "epoch {epoch}/{}: recon {:.4} kl {:.4} -elbo {:.4}",
            spec.epochs,
            record.recon_bce,
            record.kl,
            record.neg_elbo
        );
        history.push(record);
    }
    Ok((model, history))
}

pub fn images_to_matrix(images: &[Image]) -> Array2<f64> {
    let width = images.first().map_or(0, |im| im.pixels().len());
    let mut m = Array2::zeros((images.len(), width));
    for (mut row, im) in m.outer_iter_mut().zip(images) {
        row.as_slice_mut()
            .expect("fresh array is contiguous")
            .copy_from_slice(im.pixels());
    }
    m
}

/// Minimizes the mean negative ELBO over `train_set` with minibatch Adam.
pub fn train(spec: &VaeSpec, train_set: &[Image]) -> Result<(VaeModel, Vec<EpochRecord>), VaeError> {
    train_with_options(spec, train_set, TrainOptions::default())
}

pub fn train_with_options(
    spec: &VaeSpec,
    train_set: &[Image],
    options: TrainOptions,
) -> Result<(VaeModel, Vec<EpochRecord>), VaeError> {
    if train_set.is_empty() {
        return Err(VaeError::EmptyTrainingSet);
    }
    train_matrix(spec, images_to_matrix(train_set).view(), options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;

    fn tiny_spec(epochs: usize) -> VaeSpec {
        VaeSpec {
            input_dim: 8,
            latent_dim: 2,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            seed: 42,
            optimizer: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            epochs,
            batch_size: 5,
        }
    }

    fn toy_data() -> Array2<f64> {
        Array2::from_shape_fn((23, 8), |(i, j)| if (i + j) % 3 == 0 { 0.9 } else { 0.1 * (j as f64 / 8.0) })
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let spec = tiny_spec(0);
        let (model, history) = train_matrix(&spec, toy_data().view(), TrainOptions::default()).unwrap();
        assert!(history.is_empty());
        assert_eq!(model, VaeModel::new(spec).unwrap());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let spec = tiny_spec(5);
        let (a, ha) = train_matrix(&spec, toy_data().view(), TrainOptions::default()).unwrap();
        let (b, hb) = train_matrix(&spec, toy_data().view(), TrainOptions::default()).unwrap();
        assert_eq!(ha, hb);
        assert!(a.to_flat().iter().zip(b.to_flat()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn training_ignores_storage_order() {
        let spec = tiny_spec(4);
        let data = toy_data();
        let mut reversed = data.clone();
        reversed.invert_axis(Axis(0));
        let (a, ha) = train_matrix(&spec, data.view(), TrainOptions::default()).unwrap();
        let (b, hb) = train_matrix(&spec, reversed.view(), TrainOptions::default()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let (_, history) = train_matrix(&tiny_spec(60), toy_data().view(), TrainOptions::default()).unwrap();
        assert!(history.last().unwrap().neg_elbo < history[0].neg_elbo);
        for r in &history {
            assert_eq!(r.neg_elbo, r.recon_bce + r.kl);
        }
    }

    #[test]
    fn parallel_steps_match_sequential() {
        let mut spec = tiny_spec(1);
        spec.batch_size = 40;
        let data = Array2::from_shape_fn((40, 8), |(i, j)| ((i * 8 + j) as f64 * 0.618).fract());
        let mut seq = VaeModel::new(spec.clone()).unwrap();
        let mut par = seq.clone();
        let mut opt_seq = VaeOptimizer::new(&seq).unwrap();
        let mut opt_par = opt_seq.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let noise = Array2::from_shape_simple_fn((40, 2), || {
                rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)
            });
            train_step(&mut seq, &mut opt_seq, data.view(), noise.view(), TrainOptions { parallel: false }).unwrap();
            train_step(&mut par, &mut opt_par, data.view(), noise.view(), TrainOptions { parallel: true }).unwrap();
            for (a, b) in seq.to_flat().iter().zip(par.to_flat()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_training_set_rejected() {
        let spec = VaeSpec::shallow(2);
        assert!(matches!(train(&spec, &[]), Err(VaeError::EmptyTrainingSet)));
    }

    #[test]
    fn diverging_training_reports_coordinates() {
        let mut spec = tiny_spec(3);
        spec.optimizer.learning_rate = 1e6;
        let data = toy_data().mapv(|_| f64::INFINITY);
        match train_matrix(&spec, data.view(), TrainOptions::default()) {
            Err(VaeError::NonFinite { epoch, batch }) => {
                assert_eq!((epoch, batch), (1, 0));
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}
