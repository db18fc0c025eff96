//! Capacity sweep: one architecture family trained on a holdout split and
//! probed on the held-out digit.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::{dataset_id, DatasetSplit, IMAGE_PIXELS};
use crate::nn::AdamConfig;
use crate::oracle::PosteriorCache;
use crate::probe::{probe_example, ZMode};
use crate::render::{ImageGrid, RenderError};
use crate::seeds::derive_seed;
use crate::vae::{save_checkpoint, train_with_options, TrainOptions, TrainingData, VaeSpec};

pub const PAPER17_VERSION: &str = "paper17-v1";
pub const SINGLE_VERSION: &str = "single-v1";
pub const SWEEP_LATENT_DIM: usize = 50;
/// Index passed to [`derive_seed`] when choosing probe inputs; cells use 0, 1, ...
const PROBE_SELECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown preset {0:?} (known: paper17, single)")]
    UnknownPreset(String),
    #[error("invalid sweep: {0}")]
    InvalidConfig(String),
    #[error("held-out digit {0} has no test images")]
    NoProbeInputs(u8),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub version: String,
    pub specs: Vec<VaeSpec>,
}

pub fn enumerate_configs(preset: &str) -> Result<Preset, SweepError> {
    let (version, hidden): (&str, Vec<Vec<usize>>) = match preset {
        "paper17" => {
            let mut h: Vec<Vec<usize>> = [25, 50, 100, 200, 400, 800, 1600, 3200]
                .iter()
                .map(|&w| vec![w])
                .collect();
            h.extend([100, 200, 400, 800, 1600, 3200].iter().map(|&w| vec![w, w / 2, w / 4]));
            h.extend([400, 800, 1600].iter().map(|&w| vec![w, w, w]));
            (PAPER17_VERSION, h)
        }
        "single" => (SINGLE_VERSION, vec![vec![400]]),
        other => return Err(SweepError::UnknownPreset(other.to_string())),
    };
    Ok(Preset {
        name: preset.to_string(),
        version: version.to_string(),
        specs: hidden
            .iter()
            .map(|h| VaeSpec::mirrored(SWEEP_LATENT_DIM, h))
            .collect(),
    })
}

/// `h400-200-100`
pub fn spec_id(spec: &VaeSpec) -> String {
    format!("h{}", widths(&spec.encoder_hidden))
}

fn widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub preset: String,
    pub preset_version: String,
    /// Only the architectures are used; seeds and hyperparameters come from below.
    pub architectures: Vec<VaeSpec>,
    pub held_out: u8,
    pub probe_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Provenance of the training images, stored in every checkpoint.
    pub subset: Option<usize>,
    pub subset_seed: u64,
    /// Cells trained concurrently; 1 is fully sequential.
    pub jobs: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.architectures.is_empty() {
            return Err(SweepError::InvalidConfig("no architectures".into()));
        }
        if self.probe_count == 0 {
            return Err(SweepError::InvalidConfig("probe_count must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(SweepError::InvalidConfig("jobs must be at least 1".into()));
        }
        if self.held_out > 9 {
            return Err(SweepError::InvalidConfig(format!("{} is not a digit", self.held_out)));
        }
        Ok(())
    }

    /// Spec `index` with the shared hyperparameters and its derived seed.
    pub fn cell_spec(&self, index: usize) -> VaeSpec {
        let mut spec = self.architectures[index].clone();
        spec.seed = derive_seed(self.seed, index as u64);
        spec.epochs = self.epochs;
        spec.batch_size = self.batch_size;
        spec.optimizer = self.optimizer;
        spec
    }
}

/// Indices into `data.test` of the probe inputs, increasing.
pub fn select_probe_inputs(config: &SweepConfig, data: &DatasetSplit) -> Result<Vec<usize>, SweepError> {
    let pool: Vec<usize> = (0..data.test.len())
        .filter(|&i| data.test[i].label() == config.held_out)
        .collect();
    if pool.is_empty() {
        return Err(SweepError::NoProbeInputs(config.held_out));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, PROBE_SELECTION_STREAM));
    let take = config.probe_count.min(pool.len());
    let mut picks: Vec<usize> = index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picks.sort_unstable();
    Ok(picks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub test_index: usize,
    pub bce_input_recon: f64,
    pub bce_avg_recon: f64,
    pub perplexity: f64,
    pub max_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub spec_id: String,
    pub spec: VaeSpec,
    pub parameter_count: usize,
    pub layer_count: usize,
    /// Training or probing failure; the metrics below are empty when set.
    pub error: Option<String>,
    pub final_neg_elbo: Option<f64>,
    pub reconstructions: Vec<Vec<f64>>,
    pub weighted_averages: Vec<Vec<f64>>,
    pub probes: Vec<ProbeOutcome>,
    pub checkpoint: Option<PathBuf>,
}

impl SweepCell {
    fn mean_of(&self, f: impl Fn(&ProbeOutcome) -> f64) -> Option<f64> {
        if self.probes.is_empty() {
            None
        } else {
            Some(self.probes.iter().map(f).sum::<f64>() / self.probes.len() as f64)
        }
    }

    pub fn mean_bce_input_recon(&self) -> Option<f64> {
        self.mean_of(|p| p.bce_input_recon)
    }

    pub fn mean_bce_avg_recon(&self) -> Option<f64> {
        self.mean_of(|p| p.bce_avg_recon)
    }

    pub fn mean_perplexity(&self) -> Option<f64> {
        self.mean_of(|p| p.perplexity)
    }

    pub fn fraction_recon_closer_to_input(&self) -> Option<f64> {
        self.mean_of(|p| f64::from(u8::from(p.bce_input_recon < p.bce_avg_recon)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub probe_indices: Vec<usize>,
    pub probe_inputs: Vec<Vec<f64>>,
    pub cells: Vec<SweepCell>,
}

fn run_cell(
    config: &SweepConfig,
    data: &DatasetSplit,
    probe_indices: &[usize],
    training_data: &TrainingData,
    checkpoint_dir: Option<&Path>,
    index: usize,
) -> SweepCell {
    let spec = config.cell_spec(index);
    let mut cell = SweepCell {
        index,
        spec_id: spec_id(&spec),
        parameter_count: spec.parameter_count(),
        layer_count: spec.layer_count(),
        spec: spec.clone(),
        error: None,
        final_neg_elbo: None,
        reconstructions: Vec::new(),
        weighted_averages: Vec::new(),
        probes: Vec::new(),
        checkpoint: None,
    };
    log::info!("sweep cell {index} ({}) training", cell.spec_id);
    let outcome = (|| -> Result<(), String> {
        let (model, history) =
            train_with_options(&spec, &data.train, TrainOptions::default()).map_err(|e| e.to_string())?;
        cell.final_neg_elbo = history.last().map(|r| r.neg_elbo);
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("cell-{index:02}-{}.vaec", cell.spec_id));
            save_checkpoint(&model, Some(training_data), &path).map_err(|e| e.to_string())?;
            cell.checkpoint = Some(path);
        }
        let cache = PosteriorCache::build(&model, data.train.clone()).map_err(|e| e.to_string())?;
        for &t in probe_indices {
            let r = probe_example(&model, &cache, &data.test[t], ZMode::Mean).map_err(|e| e.to_string())?;
            cell.probes.push(ProbeOutcome {
                test_index: t,
                bce_input_recon: r.bce_input_recon,
                bce_avg_recon: r.bce_avg_recon,
                perplexity: r.perplexity,
                max_weight: r.max_weight,
            });
            cell.reconstructions.push(r.reconstruction);
            cell.weighted_averages.push(r.weighted_avg.mu);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("sweep cell {index} ({}) failed: {e}", cell.spec_id);
        cell.error = Some(e);
        cell.probes.clear();
        cell.reconstructions.clear();
        cell.weighted_averages.clear();
    }
    cell
}

/// Trains and probes every architecture; `data` must already exclude the held-out digit.
///
/// Cells are independent, so the result does not depend on `jobs`. A failed
/// cell is recorded and the sweep carries on.
pub fn run_sweep(
    config: &SweepConfig,
    data: &DatasetSplit,
    checkpoint_dir: Option<&Path>,
) -> Result<SweepResult, SweepError> {
    config.validate()?;
    if data.descriptor.held_out != Some(config.held_out) {
        return Err(SweepError::InvalidConfig(format!(
            "data split holds out {:?}, sweep expects {}",
            data.descriptor.held_out, config.held_out
        )));
    }
    let probe_indices = select_probe_inputs(config, data)?;
    let training_data = TrainingData {
        held_out: Some(config.held_out),
        subset: config.subset,
        subset_seed: config.subset_seed,
        image_count: data.train.len(),
        dataset_id: dataset_id(&data.train),
    };
    let n = config.architectures.len();
    let job = |i: usize| run_cell(config, data, &probe_indices, &training_data, checkpoint_dir, i);
    let cells: Vec<SweepCell> = if config.jobs == 1 {
        (0..n).map(job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| SweepError::InvalidConfig(e.to_string()))?;
        pool.install(|| (0..n).into_par_iter().map(job).collect())
    };
    Ok(SweepResult {
        config: config.clone(),
        probe_inputs: probe_indices
            .iter()
            .map(|&i| data.test[i].pixels().to_vec())
            .collect(),
        probe_indices,
        cells,
    })
}

/// Rows: probe inputs, then `x̂` for each cell, then `μ` for each cell.
/// Failed cells render as black rows.
pub fn montage(result: &SweepResult) -> Result<ImageGrid, SweepError> {
    let cols = result.probe_inputs.len();
    let blank = vec![0.0; IMAGE_PIXELS];
    let mut tiles: Vec<Vec<f64>> = result.probe_inputs.clone();
    for recon in [true, false] {
        for cell in &result.cells {
            let row = if recon { &cell.reconstructions } else { &cell.weighted_averages };
            for k in 0..cols {
                tiles.push(row.get(k).cloned().unwrap_or_else(|| blank.clone()));
            }
        }
    }
    let rows = 1 + 2 * result.cells.len();
    Ok(ImageGrid::new(rows, cols, tiles, Some(1.0))?)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub preset: String,
    pub preset_version: String,
    pub spec_index: usize,
    pub spec_id: String,
    pub encoder_hidden: String,
    pub decoder_hidden: String,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub parameter_count: usize,
    pub layer_count: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub held_out: u8,
    pub probe_count: usize,
    pub status: String,
    pub final_neg_elbo: Option<f64>,
    pub mean_bce_input_recon: Option<f64>,
    pub mean_bce_avg_recon: Option<f64>,
    pub mean_perplexity: Option<f64>,
    pub fraction_recon_closer_to_input: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_rows(result: &SweepResult) -> Vec<SweepRow> {
    let c = &result.config;
    result
        .cells
        .iter()
        .map(|cell| SweepRow {
            preset: c.preset.clone(),
            preset_version: c.preset_version.clone(),
            spec_index: cell.index,
            spec_id: cell.spec_id.clone(),
            encoder_hidden: widths(&cell.spec.encoder_hidden),
            decoder_hidden: widths(&cell.spec.decoder_hidden),
            input_dim: cell.spec.input_dim,
            latent_dim: cell.spec.latent_dim,
            parameter_count: cell.parameter_count,
            layer_count: cell.layer_count,
            seed: cell.spec.seed,
            epochs: cell.spec.epochs,
            batch_size: cell.spec.batch_size,
            learning_rate: cell.spec.optimizer.learning_rate,
            beta1: cell.spec.optimizer.beta1,
            beta2: cell.spec.optimizer.beta2,
            epsilon: cell.spec.optimizer.epsilon,
            held_out: c.held_out,
            probe_count: result.probe_indices.len(),
            status: if cell.error.is_some() { "failed" } else { "ok" }.to_string(),
            final_neg_elbo: cell.final_neg_elbo,
            mean_bce_input_recon: cell.mean_bce_input_recon(),
            mean_bce_avg_recon: cell.mean_bce_avg_recon(),
            mean_perplexity: cell.mean_perplexity(),
            fraction_recon_closer_to_input: cell.fraction_recon_closer_to_input(),
            error: cell.error.clone(),
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(result: &SweepResult, out: W) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    for row in sweep_rows(result) {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(input: R) -> Result<Vec<SweepRow>, SweepError> {
    Ok(csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()?)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepProbeRow {
    pub spec_index: usize,
    pub spec_id: String,
    pub probe: usize,
    pub test_index: usize,
    pub bce_input_recon: f64,
    pub bce_avg_recon: f64,
    pub perplexity: f64,
    pub max_weight: f64,
}

pub fn write_probe_rows_csv<W: Write>(result: &SweepResult, out: W) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    for cell in &result.cells {
        for (k, p) in cell.probes.iter().enumerate() {
            w.serialize(SweepProbeRow {
                spec_index: cell.index,
                spec_id: cell.spec_id.clone(),
                probe: k,
                test_index: p.test_index,
                bce_input_recon: p.bce_input_recon,
                bce_avg_recon: p.bce_avg_recon,
                perplexity: p.perplexity,
                max_weight: p.max_weight,
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CellLink {
    pub spec_index: usize,
    pub spec_id: String,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepManifest {
    pub config: SweepConfig,
    pub probe_indices: Vec<usize>,
    pub cells: Vec<CellLink>,
}

/// Writes `<prefix>.csv`, `<prefix>-probes.csv`, `<prefix>.pgm` and
/// `<prefix>-cells.json` into `dir`; returns the paths written.
pub fn write_sweep_outputs(result: &SweepResult, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, SweepError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| SweepError::Io { path: p, source }
    };
    let csv_path = dir.join(format!("{prefix}.csv"));
    let mut buf = Vec::new();
    write_sweep_csv(result, &mut buf)?;
    std::fs::write(&csv_path, buf).map_err(io(&csv_path))?;

    let probes_path = dir.join(format!("{prefix}-probes.csv"));
    let mut buf = Vec::new();
    write_probe_rows_csv(result, &mut buf)?;
    std::fs::write(&probes_path, buf).map_err(io(&probes_path))?;

    let pgm_path = dir.join(format!("{prefix}.pgm"));
    crate::render::write_pgm(&montage(result)?, &pgm_path)?;

    let manifest_path = dir.join(format!("{prefix}-cells.json"));
    let manifest = SweepManifest {
        config: result.config.clone(),
        probe_indices: result.probe_indices.clone(),
        cells: result
            .cells
            .iter()
            .map(|c| CellLink {
                spec_index: c.index,
                spec_id: c.spec_id.clone(),
                checkpoint: c.checkpoint.as_ref().map(|p| p.display().to_string()),
                error: c.error.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(io(&manifest_path))?;
    Ok(vec![csv_path, probes_path, pgm_path, manifest_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::{partition, Image};

    #[test]
    fn paper17_preset() {
        let p = enumerate_configs("paper17").unwrap();
        assert_eq!(p.specs.len(), 17);
        assert_eq!(p.version, PAPER17_VERSION);
        assert_eq!(p.specs.iter().filter(|s| s.layer_count() == 1).count(), 8);
        assert_eq!(p.specs.iter().filter(|s| s.layer_count() == 3).count(), 9);
        assert!(p.specs.iter().all(|s| s.latent_dim == 50));
        let ids: Vec<String> = p.specs.iter().map(spec_id).collect();
        assert!(ids.contains(&"h3200-1600-800".to_string()));
        assert!(ids.contains(&"h1600-1600-1600".to_string()));
        let mut unique = ids.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 17);
    }

    #[test]
    fn single_and_unknown_presets() {
        let p = enumerate_configs("single").unwrap();
        assert_eq!(p.specs, vec![VaeSpec::shallow(50)]);
        assert_eq!(p.specs[0].encoder_parameter_count(), 354_100);
        assert!(matches!(enumerate_configs("paper18"), Err(SweepError::UnknownPreset(_))));
    }

    fn toy_split() -> DatasetSplit {
        let make = |n: usize, salt: usize| -> Vec<Image> {
            (0..n)
                .map(|i| {
                    let px = (0..IMAGE_PIXELS)
                        .map(|p| ((p * (i + 3) + salt) % 11) as f64 / 10.0)
                        .collect();
                    Image::new(px, (i % 10) as u8).unwrap()
                })
                .collect()
        };
        partition(make(40, 1), make(30, 5), Some(9))
    }

    fn toy_config(archs: Vec<VaeSpec>, jobs: usize) -> SweepConfig {
        SweepConfig {
            preset: "test".into(),
            preset_version: "t".into(),
            architectures: archs,
            held_out: 9,
            probe_count: 2,
            epochs: 2,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            seed: 5,
            subset: None,
            subset_seed: 0,
            jobs,
        }
    }

    #[test]
    fn tiny_sweep_is_reproducible_and_parallel_safe() {
        let data = toy_split();
        let archs = vec![VaeSpec::mirrored(2, &[6]), VaeSpec::mirrored(2, &[6, 4, 3])];
        let a = run_sweep(&toy_config(archs.clone(), 1), &data, None).unwrap();
        let b = run_sweep(&toy_config(archs.clone(), 1), &data, None).unwrap();
        let c = run_sweep(&toy_config(archs, 2), &data, None).unwrap();
        let csv = |r: &SweepResult| {
            let mut buf = Vec::new();
            write_sweep_csv(r, &mut buf).unwrap();
            buf
        };
        assert_eq!(csv(&a), csv(&b));
        assert_eq!(csv(&a), csv(&c));
        assert_eq!(a.probe_indices.len(), 2);
        assert!(a.probe_indices.iter().all(|&i| data.test[i].label() == 9));
        assert!(a.cells.iter().all(|cell| cell.probes.iter().map(|p| p.test_index).eq(a.probe_indices.iter().copied())));
        assert_ne!(a.cells[0].spec.seed, a.cells[1].spec.seed);
        let rows = read_sweep_csv(csv(&a).as_slice()).unwrap();
        assert_eq!(rows[1].encoder_hidden, "6-4-3");
        assert_eq!(rows[1].layer_count, 3);
        assert_eq!(rows[0].parameter_count, archs_count(&a, 0));
        let grid = montage(&a).unwrap();
        assert_eq!(grid.height(), 5 * 28 + 4);
    }

    fn archs_count(r: &SweepResult, i: usize) -> usize {
        r.cells[i].spec.parameter_count()
    }

    #[test]
    fn failed_cell_is_recorded() {
        let data = toy_split();
        let cfg = toy_config(vec![VaeSpec::mirrored(0, &[4]), VaeSpec::mirrored(2, &[4])], 1);
        let r = run_sweep(&cfg, &data, None).unwrap();
        assert!(r.cells[0].error.is_some());
        assert!(r.cells[0].probes.is_empty());
        assert!(r.cells[1].error.is_none());
        assert_eq!(r.cells[1].probes.len(), 2);
        let rows = sweep_rows(&r);
        assert_eq!(rows[0].status, "failed");
        assert_eq!(rows[1].status, "ok");
        assert_eq!(montage(&r).unwrap().height(), 5 * 28 + 4);
    }

    #[test]
    fn split_must_match_holdout() {
        let data = partition(toy_split().train, toy_split().test, Some(3));
        assert!(run_sweep(&toy_config(vec![VaeSpec::mirrored(2, &[4])], 1), &data, None).is_err());
    }
}
