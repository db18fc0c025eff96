//! Per-example comparison of decoder output against the optimal-decoder
//! weighted average, aggregated over a test set.

use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::{Image, IMAGE_PIXELS};
use crate::oracle::{perplexity, top_k, OracleError, PosteriorCache, WeightedAverage};
use crate::render::{ImageGrid, RenderError};
use crate::seeds::derive_seed;
use crate::vae::{bce_with_logits, reparameterize, sigmoid, VaeError, VaeModel};

/// Histogram bins `[1,2), [2,3), …, [19,20)` plus an overflow bin.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// How the latent point for a probe is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZMode {
    /// The posterior mean.
    Mean,
    /// One reparameterized draw, seeded.
    Sample(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub input: Image,
    pub z: Vec<f64>,
    /// Decoder Bernoulli means `x̂`.
    pub reconstruction: Vec<f64>,
    pub weighted_avg: WeightedAverage,
    /// `BCE(x, x̂)`
    pub bce_input_recon: f64,
    /// `BCE(μ, x̂)`
    pub bce_avg_recon: f64,
    pub perplexity: f64,
    pub max_weight: f64,
    pub top3: Vec<(usize, f64)>,
}

impl ProbeResult {
    pub fn recon_closer_to_input(&self) -> bool {
        self.bce_input_recon < self.bce_avg_recon
    }
}

pub fn probe_example(
    model: &VaeModel,
    cache: &PosteriorCache,
    x: &Image,
    z_mode: ZMode,
) -> Result<ProbeResult, ProbeError> {
    cache.check_model(model)?;
    let post = model.encode(x.pixels())?;
    let z = match z_mode {
        ZMode::Mean => post.mean.clone(),
        ZMode::Sample(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..post.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            reparameterize(&post, &noise)?
        }
    };
    let logits = model.decode_logits(&z)?;
    let reconstruction: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let profile = cache.weights(&z)?;
    let weighted_avg = cache.weighted_average(&profile)?;
    let k = cache.len().min(3);
    Ok(ProbeResult {
        input: x.clone(),
        bce_input_recon: bce_with_logits(x.pixels(), &logits),
        bce_avg_recon: bce_with_logits(&weighted_avg.mu, &logits),
        perplexity: perplexity(&profile),
        max_weight: profile.max_weight(),
        top3: top_k(&profile, k)?,
        z,
        reconstruction,
        weighted_avg,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerplexityHistogram {
    pub counts: [usize; HISTOGRAM_BINS],
}

impl PerplexityHistogram {
    pub fn bin_of(perplexity: f64) -> usize {
        // Perplexities are ≥ 1; anything below is clamped into the first bin.
        let b = (perplexity.max(1.0) - 1.0).floor();
        if b >= (HISTOGRAM_BINS - 1) as f64 {
            HISTOGRAM_BINS - 1
        } else {
            b as usize
        }
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = [0; HISTOGRAM_BINS];
        for v in values {
            counts[Self::bin_of(v)] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Bin with the largest count; the lower bin wins ties.
    pub fn modal_bin(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    pub fn bin_label(bin: usize) -> String {
        if bin + 1 == HISTOGRAM_BINS {
            format!("[{},inf)", bin + 1)
        } else {
            format!("[{},{})", bin + 1, bin + 2)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSummary {
    /// Index of each probed example within the test set passed in.
    pub test_indices: Vec<usize>,
    pub results: Vec<ProbeResult>,
    pub histogram: PerplexityHistogram,
    /// Share of examples with `BCE(x, x̂) < BCE(μ, x̂)`.
    pub fraction_recon_closer_to_input: f64,
}

impl ProbeSummary {
    fn from_results(test_indices: Vec<usize>, results: Vec<ProbeResult>) -> Self {
        let histogram = PerplexityHistogram::from_values(results.iter().map(|r| r.perplexity));
        let closer = results.iter().filter(|r| r.recon_closer_to_input()).count();
        let fraction_recon_closer_to_input = closer as f64 / results.len() as f64;
        Self {
            test_indices,
            results,
            histogram,
            fraction_recon_closer_to_input,
        }
    }

    pub fn median_max_weight(&self) -> f64 {
        median(self.results.iter().map(|r| r.max_weight).collect())
    }
}

pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Probes every image in `test_set`, in parallel; results keep input order.
///
/// In sampled mode example `i` draws its noise from `derive_seed(seed, i)`.
pub fn probe_dataset(
    model: &VaeModel,
    cache: &PosteriorCache,
    test_set: &[Image],
    z_mode: ZMode,
) -> Result<ProbeSummary, ProbeError> {
    if test_set.is_empty() {
        return Err(ProbeError::EmptyTestSet);
    }
    cache.check_model(model)?;
    let results = test_set
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mode = match z_mode {
                ZMode::Mean => ZMode::Mean,
                ZMode::Sample(seed) => ZMode::Sample(derive_seed(seed, i as u64)),
            };
            probe_example(model, cache, x, mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProbeSummary::from_results((0..test_set.len()).collect(), results))
}

/// One row of the per-example probe CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub test_index: usize,
    pub label: u8,
    pub bce_input_recon: f64,
    pub bce_avg_recon: f64,
    pub perplexity: f64,
    pub top1_index: Option<usize>,
    pub top1_weight: Option<f64>,
    pub top2_index: Option<usize>,
    pub top2_weight: Option<f64>,
    pub top3_index: Option<usize>,
    pub top3_weight: Option<f64>,
}

impl ProbeRow {
    pub fn from_result(test_index: usize, r: &ProbeResult) -> Self {
        let at = |k: usize| r.top3.get(k).copied();
        Self {
            test_index,
            label: r.input.label(),
            bce_input_recon: r.bce_input_recon,
            bce_avg_recon: r.bce_avg_recon,
            perplexity: r.perplexity,
            top1_index: at(0).map(|t| t.0),
            top1_weight: at(0).map(|t| t.1),
            top2_index: at(1).map(|t| t.0),
            top2_weight: at(1).map(|t| t.1),
            top3_index: at(2).map(|t| t.0),
            top3_weight: at(2).map(|t| t.1),
        }
    }
}

pub fn write_probe_csv<W: Write>(summary: &ProbeSummary, out: W) -> Result<(), ProbeError> {
    let mut w = csv::Writer::from_writer(out);
    for (&i, r) in summary.test_indices.iter().zip(&summary.results) {
        w.serialize(ProbeRow::from_result(i, r))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_probe_csv<R: Read>(input: R) -> Result<Vec<ProbeRow>, ProbeError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<ProbeRow>, _>>()?)
}

/// Aggregates recomputed from CSV rows alone.
#[derive(Clone, Debug, PartialEq)]
pub struct RowAggregates {
    pub histogram: PerplexityHistogram,
    pub fraction_recon_closer_to_input: f64,
}

pub fn aggregate_rows(rows: &[ProbeRow]) -> RowAggregates {
    let closer = rows.iter().filter(|r| r.bce_input_recon < r.bce_avg_recon).count();
    RowAggregates {
        histogram: PerplexityHistogram::from_values(rows.iter().map(|r| r.perplexity)),
        fraction_recon_closer_to_input: closer as f64 / rows.len() as f64,
    }
}

#[derive(Serialize)]
struct HistogramRow {
    bin: String,
    lower: f64,
    upper: f64,
    count: usize,
}

pub fn write_histogram_csv<W: Write>(hist: &PerplexityHistogram, out: W) -> Result<(), ProbeError> {
    let mut w = csv::Writer::from_writer(out);
    for (i, &count) in hist.counts.iter().enumerate() {
        w.serialize(HistogramRow {
            bin: PerplexityHistogram::bin_label(i),
            lower: (i + 1) as f64,
            upper: if i + 1 == HISTOGRAM_BINS {
                f64::INFINITY
            } else {
                (i + 2) as f64
            },
            count,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Gallery of up to `columns` probed examples chosen by a seeded draw.
///
/// Rows: input, `x̂`, `μ`, then the top-3 training neighbours (black when
/// the training set has fewer than three images). Returns the chosen
/// positions within `summary.results` alongside the grid.
pub fn gallery(
    summary: &ProbeSummary,
    cache: &PosteriorCache,
    columns: usize,
    seed: u64,
) -> Result<(Vec<usize>, ImageGrid), ProbeError> {
    let n = summary.results.len();
    if n == 0 || columns == 0 {
        return Err(ProbeError::EmptyTestSet);
    }
    let mut picks = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, columns.min(n)).into_vec();
    picks.sort_unstable();
    let blank = vec![0.0; IMAGE_PIXELS];
    let mut tiles = Vec::with_capacity(6 * picks.len());
    let mut push_row = |f: &dyn Fn(&ProbeResult) -> Vec<f64>| {
        for &p in &picks {
            tiles.push(f(&summary.results[p]));
        }
    };
    push_row(&|r| r.input.pixels().to_vec());
    push_row(&|r| r.reconstruction.clone());
    push_row(&|r| r.weighted_avg.mu.clone());
    for k in 0..3 {
        push_row(&|r| {
            r.top3
                .get(k)
                .map_or_else(|| blank.clone(), |&(i, _)| cache.images()[i].pixels().to_vec())
        });
    }
    let cols = picks.len();
    Ok((picks, ImageGrid::new(6, cols, tiles, Some(1.0))?))
}
