//! Gaussian-encoder / Bernoulli-decoder VAE with a reparameterized ELBO.

mod checkpoint;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, CheckpointMeta, TrainingData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{
    images_to_matrix, train, train_matrix, train_step, train_with_options, EpochRecord,
    StepTerms, TrainOptions, VaeOptimizer, PARALLEL_CHUNK_ROWS,
};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mnist::IMAGE_PIXELS;
use crate::nn::{mlp_layers, Activation, AdamConfig, DenseNet, Gradients, LayerSpec, NnError};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid VAE spec: {0}")]
    InvalidSpec(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
}

fn default_input_dim() -> usize {
    IMAGE_PIXELS
}

/// Architecture plus training hyperparameters for one VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl VaeSpec {
    /// MNIST-sized VAE whose decoder mirrors the encoder's hidden widths.
    pub fn mirrored(latent_dim: usize, encoder_hidden: &[usize]) -> Self {
        let mut decoder_hidden = encoder_hidden.to_vec();
        decoder_hidden.reverse();
        Self {
            input_dim: IMAGE_PIXELS,
            latent_dim,
            encoder_hidden: encoder_hidden.to_vec(),
            decoder_hidden,
            seed: 0,
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 100,
        }
    }

    /// One hidden layer of 400 units on each side.
    pub fn shallow(latent_dim: usize) -> Self {
        Self::mirrored(latent_dim, &[400])
    }

    /// Encoder 400-200-100, decoder 100-200-400.
    pub fn deep(latent_dim: usize) -> Self {
        Self::mirrored(latent_dim, &[400, 200, 100])
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let bad = |m: &str| Err(VaeError::InvalidSpec(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return bad("hidden widths must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        self.optimizer
            .validate()
            .map_err(|e| VaeError::InvalidSpec(e.to_string()))
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        mlp_layers(
            self.input_dim,
            &self.encoder_hidden,
            2 * self.latent_dim,
            Activation::Identity,
        )
    }

    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        mlp_layers(
            self.latent_dim,
            &self.decoder_hidden,
            self.input_dim,
            Activation::Identity,
        )
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.encoder_layers().iter().map(LayerSpec::parameter_count).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder_parameter_count()
            + self
                .decoder_layers()
                .iter()
                .map(LayerSpec::parameter_count)
                .sum::<usize>()
    }

    /// Number of hidden layers in the encoder.
    pub fn layer_count(&self) -> usize {
        self.encoder_hidden.len()
    }
}

/// Diagonal Gaussian `q(z|x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `z = mean + exp(log_variance / 2) ⊙ noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>, VaeError> {
    if noise.len() != post.dim() {
        return Err(VaeError::Nn(NnError::Shape(format!(
            "noise has {} entries, latent_dim is {}",
            noise.len(),
            post.dim()
        ))));
    }
    Ok(post
        .mean
        .iter()
        .zip(&post.log_variance)
        .zip(noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy in nats, with the prediction given as logits.
pub fn bce_with_logits(target: &[f64], logits: &[f64]) -> f64 {
    assert_eq!(target.len(), logits.len(), "bce operands differ in length");
    target
        .iter()
        .zip(logits)
        .map(|(&t, &l)| softplus(l) - t * l)
        .sum()
}

/// Binary cross-entropy in nats, with the prediction given as probabilities.
///
/// Terms whose target weight is zero are skipped, so `p = 0` or `p = 1` only
/// costs something when the target disagrees with it.
pub fn bce(target: &[f64], probs: &[f64]) -> f64 {
    assert_eq!(target.len(), probs.len(), "bce operands differ in length");
    let tiny = f64::MIN_POSITIVE;
    target
        .iter()
        .zip(probs)
        .map(|(&t, &p)| {
            let mut loss = 0.0;
            if t > 0.0 {
                loss -= t * p.max(tiny).ln();
            }
            if t < 1.0 {
                loss -= (1.0 - t) * (1.0 - p).max(tiny).ln();
            }
            loss
        })
        .sum()
}

/// `KL(q || N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_to_prior(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.log_variance)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Decoder means clamped away from 0 and 1 for display and CSV output.
pub fn display_clamp(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| p.clamp(1e-7, 1.0 - 1e-7)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub reconstruction_bce: f64,
    pub kl: f64,
    pub negative_elbo: f64,
}

impl ElboTerms {
    pub fn new(reconstruction_bce: f64, kl: f64) -> Self {
        Self {
            reconstruction_bce,
            kl,
            negative_elbo: reconstruction_bce + kl,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl VaeGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v
    }
}

/// Sums over a batch of the per-example ELBO terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchSums {
    pub reconstruction_bce: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    spec: VaeSpec,
    encoder: DenseNet,
    decoder: DenseNet,
}

impl VaeModel {
    /// Glorot-initialized model; the encoder draws from the seeded stream first.
    pub fn new(spec: VaeSpec) -> Result<Self, VaeError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let encoder = DenseNet::xavier(&spec.encoder_layers(), &mut rng)?;
        let decoder = DenseNet::xavier(&spec.decoder_layers(), &mut rng)?;
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn zeros(spec: VaeSpec) -> Result<Self, VaeError> {
        spec.validate()?;
        let encoder = DenseNet::zeros(&spec.encoder_layers())?;
        let decoder = DenseNet::zeros(&spec.decoder_layers())?;
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn from_parts(spec: VaeSpec, encoder: DenseNet, decoder: DenseNet) -> Result<Self, VaeError> {
        spec.validate()?;
        if encoder.layer_specs() != spec.encoder_layers() || decoder.layer_specs() != spec.decoder_layers() {
            return Err(VaeError::InvalidSpec(
                "network shapes do not match the VaeSpec".into(),
            ));
        }
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub(crate) fn nets_mut(&mut self) -> (&mut DenseNet, &mut DenseNet) {
        (&mut self.encoder, &mut self.decoder)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.decoder.parameter_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<(), VaeError> {
        if params.len() != self.parameter_count() {
            return Err(VaeError::Nn(NnError::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            ))));
        }
        let (enc, dec) = params.split_at(self.encoder.parameter_count());
        self.encoder.set_flat(enc)?;
        self.decoder.set_flat(dec)?;
        Ok(())
    }

    /// SHA-256 of the spec and every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for p in self.to_flat() {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn encode(&self, x: &[f64]) -> Result<GaussianPosterior, VaeError> {
        let (out, _) = self.encoder.forward(x)?;
        let l = self.spec.latent_dim;
        Ok(GaussianPosterior {
            mean: out[..l].to_vec(),
            log_variance: out[l..].to_vec(),
        })
    }

    pub fn encode_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<GaussianPosterior>, VaeError> {
        let out = self.encoder.predict_batch(xs)?;
        let l = self.spec.latent_dim;
        Ok(out
            .outer_iter()
            .map(|row| GaussianPosterior {
                mean: row.slice(s![..l]).to_vec(),
                log_variance: row.slice(s![l..]).to_vec(),
            })
            .collect())
    }

    pub fn decode_logits(&self, z: &[f64]) -> Result<Vec<f64>, VaeError> {
        Ok(self.decoder.forward(z)?.0)
    }

    /// Bernoulli means `sigmoid(decoder(z))`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, VaeError> {
        Ok(self.decode_logits(z)?.into_iter().map(sigmoid).collect())
    }

    pub fn decode_batch_logits(&self, zs: ArrayView2<f64>) -> Result<Array2<f64>, VaeError> {
        Ok(self.decoder.predict_batch(zs)?)
    }

    /// Single-sample ELBO terms for `x` with fixed reparameterization noise.
    pub fn elbo_terms(&self, x: &[f64], noise: &[f64]) -> Result<ElboTerms, VaeError> {
        let post = self.encode(x)?;
        let z = reparameterize(&post, noise)?;
        let logits = self.decode_logits(&z)?;
        Ok(ElboTerms::new(bce_with_logits(x, &logits), kl_to_prior(&post)))
    }

    /// Loss sums over the batch and gradients of `scale · Σ_b negative_elbo_b`.
    pub fn batch_gradients(
        &self,
        xs: ArrayView2<f64>,
        noise: ArrayView2<f64>,
        scale: f64,
    ) -> Result<(BatchSums, VaeGradients), VaeError> {
        let l = self.spec.latent_dim;
        let batch = xs.nrows();
        if noise.dim() != (batch, l) {
            return Err(VaeError::Nn(NnError::Shape(format!(
                "noise is {:?}, expected ({batch}, {l})",
                noise.dim()
            ))));
        }
        let enc_tape = self.encoder.forward_batch(xs)?;
        let enc_out = enc_tape.output();
        let mean = enc_out.slice(s![.., ..l]);
        let log_var = enc_out.slice(s![.., l..]);
        let std = log_var.mapv(|v| (0.5 * v).exp());
        let z = &mean + &(&std * &noise);

        let dec_tape = self.decoder.forward_batch(z.view())?;
        let logits = dec_tape.output();

        let mut sums = BatchSums::default();
        let mut d_logits = Array2::zeros(logits.raw_dim());
        for ((t_row, l_row), mut d_row) in xs
            .outer_iter()
            .zip(logits.outer_iter())
            .zip(d_logits.outer_iter_mut())
        {
            for ((&t, &lg), d) in t_row.iter().zip(l_row.iter()).zip(d_row.iter_mut()) {
                sums.reconstruction_bce += softplus(lg) - t * lg;
                *d = scale * (sigmoid(lg) - t);
            }
        }
        for (m_row, lv_row) in mean.outer_iter().zip(log_var.outer_iter()) {
            sums.kl += 0.5
                * m_row
                    .iter()
                    .zip(lv_row.iter())
                    .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
                    .sum::<f64>();
        }

        let (dec_grads, d_z) = self.decoder.backward_with_input(&dec_tape, d_logits.view())?;

        let mut d_enc = Array2::zeros((batch, 2 * l));
        {
            let (mut d_mean, mut d_lv) = d_enc.view_mut().split_at(Axis(1), l);
            d_mean.assign(&(&d_z + &(&mean * scale)));
            ndarray::Zip::from(&mut d_lv)
                .and(&d_z)
                .and(&noise)
                .and(&std)
                .and(&log_var)
                .for_each(|d, &dz, &n, &sd, &lv| {
                    *d = dz * n * 0.5 * sd + scale * 0.5 * (lv.exp() - 1.0);
                });
        }
        let enc_grads = self.encoder.backward(&enc_tape, d_enc.view())?;
        Ok((
            sums,
            VaeGradients {
                encoder: enc_grads,
                decoder: dec_grads,
            },
        ))
    }
}
