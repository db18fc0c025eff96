//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 4-8 read MNIST from `$VAEPROBE_MNIST_DIR`, falling back to
//! `data/mnist` at the workspace root (`scripts/fetch_mnist.sh` fills it).
//! Pass criterion numbers as arguments to run a subset: `cargo test --test
//! acceptance -- 2 3`.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use vaeprobe::latent_map::{fit_bounds, grid_max_weight, posterior_points, GridSpec};
use vaeprobe::mnist::{holdout_subset, load_idx, mini_mnist, parse_idx, select_digit, to_idx, Image, IMAGE_PIXELS};
use vaeprobe::nn::{central_differences, compare_gradients, AdamConfig, FINITE_DIFF_STEP};
use vaeprobe::oracle::{compute_weights, perplexity, weighted_average, PosteriorCache, WeightProfile, LN_2PI};
use vaeprobe::probe::{probe_dataset, write_histogram_csv, write_probe_csv, PerplexityHistogram, ProbeSummary, ZMode};
use vaeprobe::render::{heatmap, ImageGrid};
use vaeprobe::sweep::{enumerate_configs, run_sweep, write_sweep_outputs, SweepConfig};
use vaeprobe::vae::{
    decode_checkpoint, encode_checkpoint, kl_to_prior, train, GaussianPosterior, VaeModel, VaeSpec,
};

/// Epochs for the 10k-image holdout models (criteria 5 and 6).
const HOLDOUT_EPOCHS: usize = 50;
/// Epochs per architecture in the capacity sweep (criterion 7).
const SWEEP_EPOCHS: usize = 50;
/// Held-out test images scored per sweep architecture.
const SWEEP_PROBES: usize = 100;

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("VAEPROBE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct Mnist {
    train: Vec<Image>,
    test: Vec<Image>,
}

fn mnist() -> Result<&'static Mnist, String> {
    static DATA: OnceLock<Result<Mnist, String>> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = mnist_dir();
        let load = |images: &str, labels: &str| {
            load_idx(&dir.join(images), &dir.join(labels)).map_err(|e| {
                format!("{e} (set VAEPROBE_MNIST_DIR or run scripts/fetch_mnist.sh)")
            })
        };
        Ok(Mnist {
            train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
            test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

// ---------------------------------------------------------------- criterion 1

fn mean_negative_elbo(model: &VaeModel, xs: &Array2<f64>, noise: &Array2<f64>) -> f64 {
    let n = xs.nrows();
    (0..n)
        .map(|b| {
            let x = xs.row(b).to_vec();
            let e = noise.row(b).to_vec();
            model.elbo_terms(&x, &e).expect("shapes agree").negative_elbo
        })
        .sum::<f64>()
        / n as f64
}

fn gradient_suite() -> Outcome {
    let spec = VaeSpec {
        input_dim: 8,
        latent_dim: 2,
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        seed: 0,
        optimizer: AdamConfig::default(),
        epochs: 0,
        batch_size: 4,
    };
    // N(0, 0.01): variance 0.01.
    let draw = Normal::new(0.0, 0.1).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for d in 0..100 {
        let mut model = VaeModel::zeros(spec.clone()).map_err(|e| e.to_string())?;
        let params: Vec<f64> = (0..model.parameter_count()).map(|_| draw.sample(&mut rng)).collect();
        model.set_flat(&params).map_err(|e| e.to_string())?;
        let xs = Array2::from_shape_simple_fn((4, 8), || rng.random::<f64>());
        let noise = Array2::from_shape_simple_fn((4, 2), || StandardNormal.sample(&mut rng));
        let (_, grads) = model
            .batch_gradients(xs.view(), noise.view(), 0.25)
            .map_err(|e| e.to_string())?;
        let mut scratch = model.clone();
        let numeric = central_differences(&params, FINITE_DIFF_STEP, |p| {
            scratch.set_flat(p).expect("same parameter count");
            mean_negative_elbo(&scratch, &xs, &noise)
        });
        let report = compare_gradients(&grads.to_flat(), &numeric, 1e-6);
        worst = worst.max(report.max_discrepancy);
        checked += report.checked;
        if !report.passed {
            return Err(format!(
                "draw {d}: discrepancy {:.3e} at parameter {:?}",
                report.max_discrepancy, report.worst_index
            ));
        }
    }
    Ok(format!("100 draws, {checked} partials, worst relative error {worst:.2e} (tol 1e-6)"))
}

// ---------------------------------------------------------------- criterion 2

/// `mantissa · 2^exponent`, mantissa in [1, 2) or exactly 0.
#[derive(Clone, Copy, Debug)]
struct Ext {
    m: f64,
    e: i64,
}

impl Ext {
    fn new(v: f64) -> Self {
        assert!(v >= 0.0 && v.is_finite());
        let mut x = Ext { m: v, e: 0 };
        x.normalize();
        x
    }

    fn normalize(&mut self) {
        if self.m == 0.0 {
            self.e = 0;
            return;
        }
        while self.m >= 2.0 {
            self.m /= 2.0;
            self.e += 1;
        }
        while self.m < 1.0 {
            self.m *= 2.0;
            self.e -= 1;
        }
    }

    fn mul(self, other: Ext) -> Ext {
        if self.m == 0.0 || other.m == 0.0 {
            return Ext { m: 0.0, e: 0 };
        }
        let mut x = Ext {
            m: self.m * other.m,
            e: self.e + other.e,
        };
        x.normalize();
        x
    }

    /// `exp(-a)` for `a ≥ 0` as a product of representable factors.
    fn exp_neg(a: f64) -> Ext {
        let mut out = Ext::new(1.0);
        let mut left = a;
        while left > 0.0 {
            let chunk = left.min(500.0);
            out = out.mul(Ext::new((-chunk).exp()));
            left -= chunk;
        }
        out
    }
}

/// Gaussian density evaluated directly, factor by factor, in extended range.
fn direct_density(z: &[f64], p: &GaussianPosterior) -> Ext {
    let mut d = Ext::new(1.0);
    for k in 0..z.len() {
        let var = p.log_variance[k].exp();
        let norm = Ext::new(1.0 / (2.0 * std::f64::consts::PI * var).sqrt());
        let diff = z[k] - p.mean[k];
        d = d.mul(norm).mul(Ext::exp_neg(diff * diff / (2.0 * var)));
    }
    d
}

fn brute_force_weights(z: &[f64], posts: &[GaussianPosterior]) -> Vec<f64> {
    let dens: Vec<Ext> = posts.iter().map(|p| direct_density(z, p)).collect();
    let top = dens.iter().filter(|d| d.m > 0.0).map(|d| d.e).max().expect("some density");
    let scaled: Vec<f64> = dens
        .iter()
        .map(|d| if d.m == 0.0 { 0.0 } else { d.m * 2f64.powi((d.e - top).max(-1100) as i32) })
        .collect();
    let total: f64 = scaled.iter().sum();
    scaled.iter().map(|s| s / total).collect()
}

/// Plain f64 densities, no shifting; only valid when nothing underflows.
fn naive_weights(z: &[f64], posts: &[GaussianPosterior]) -> Vec<f64> {
    let dens: Vec<f64> = posts
        .iter()
        .map(|p| {
            (0..z.len())
                .map(|k| {
                    let var = p.log_variance[k].exp();
                    let diff = z[k] - p.mean[k];
                    (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
                })
                .product()
        })
        .collect();
    let total: f64 = dens.iter().sum();
    dens.iter().map(|d| d / total).collect()
}

fn log_density(z: &[f64], p: &GaussianPosterior) -> f64 {
    (0..z.len())
        .map(|k| {
            let lv = p.log_variance[k];
            let diff = z[k] - p.mean[k];
            -0.5 * (LN_2PI + lv + diff * diff / lv.exp())
        })
        .sum()
}

fn random_posteriors(rng: &mut ChaCha8Rng, n: usize, dim: usize, mean_scale: f64, lv: (f64, f64)) -> Vec<GaussianPosterior> {
    (0..n)
        .map(|_| GaussianPosterior {
            mean: (0..dim).map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal)).collect(),
            log_variance: (0..dim).map(|_| rng.random_range(lv.0..lv.1)).collect(),
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_plain = 0.0_f64;
    let mut worst_adv = 0.0_f64;
    let mut widest = 0.0_f64;
    for case in 0..400 {
        let n = rng.random_range(1..=10);
        let dim = rng.random_range(1..=6);
        let posts = random_posteriors(&mut rng, n, dim, 1.0, (-2.0, 1.0));
        let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let got = compute_weights(&z, &posts).map_err(|e| e.to_string())?.weights;
        let d1 = max_abs_diff(&got, &naive_weights(&z, &posts));
        let d2 = max_abs_diff(&got, &brute_force_weights(&z, &posts));
        worst_plain = worst_plain.max(d1).max(d2);
        if !(d1 <= 1e-10 && d2 <= 1e-10) {
            return Err(format!("ordinary case {case}: deviation {:.3e}", d1.max(d2)));
        }
    }
    for case in 0..200 {
        let n = rng.random_range(2..=10);
        let dim = rng.random_range(1..=6);
        // Far-apart means or narrow posteriors put the log densities
        // hundreds to thousands of nats apart; redraw until they do.
        let (posts, z, spread) = loop {
            let posts = if case % 2 == 0 {
                random_posteriors(&mut rng, n, dim, 60.0, (-1.0, 1.0))
            } else {
                random_posteriors(&mut rng, n, dim, 3.0, (-9.0, -6.0))
            };
            let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let logs: Vec<f64> = posts.iter().map(|p| log_density(&z, p)).collect();
            let spread = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - logs.iter().copied().fold(f64::INFINITY, f64::min);
            if spread > 700.0 {
                break (posts, z, spread);
            }
        };
        widest = widest.max(spread);
        let got = compute_weights(&z, &posts).map_err(|e| e.to_string())?.weights;
        let d = max_abs_diff(&got, &brute_force_weights(&z, &posts));
        worst_adv = worst_adv.max(d);
        if !(d <= 1e-10) {
            return Err(format!("adversarial case {case} (spread {spread:.0}): deviation {d:.3e}"));
        }
    }
    let mut worst_avg = 0.0_f64;
    for case in 0..200 {
        let n = rng.random_range(1..=10);
        let posts = random_posteriors(&mut rng, n, 3, 1.0, (-2.0, 1.0));
        let z: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let images: Vec<Image> = (0..n)
            .map(|_| Image::new((0..IMAGE_PIXELS).map(|_| rng.random::<f64>()).collect(), 0).expect("valid"))
            .collect();
        let profile = compute_weights(&z, &posts).map_err(|e| e.to_string())?;
        let mu = weighted_average(&profile, &images).map_err(|e| e.to_string())?.mu;
        let mut naive = vec![0.0; IMAGE_PIXELS];
        for (j, slot) in naive.iter_mut().enumerate() {
            for i in 0..n {
                *slot += profile.weights[i] * images[i].pixels()[j];
            }
        }
        let d = max_abs_diff(&mu, &naive);
        worst_avg = worst_avg.max(d);
        if !(d <= 1e-12) {
            return Err(format!("weighted average case {case}: deviation {d:.3e}"));
        }
    }
    Ok(format!(
        "weights max dev {worst_plain:.1e} (ordinary), {worst_adv:.1e} (spreads to {widest:.0} nats); weighted average max dev {worst_avg:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 3

fn profile(logs: &[f64]) -> WeightProfile {
    WeightProfile::from_log_densities(logs, vec![0.0], "test").expect("finite")
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..1000 {
        let n = rng.random_range(1..=50);
        let scale = [1.0, 10.0, 1000.0][case % 3];
        let logs: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let p = profile(&logs);
        let sum: f64 = p.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || p.weights.iter().any(|&w| w < 0.0) {
            return Err(format!("case {case}: weights sum to {sum} or go negative"));
        }
        let perp = perplexity(&p);
        if !(1.0..=n as f64).contains(&perp) {
            return Err(format!("case {case}: perplexity {perp} outside [1, {n}]"));
        }
    }
    for n in 1..=10usize {
        let mut logs = vec![-1e6; n];
        logs[n / 2] = 0.0;
        let one_hot = perplexity(&profile(&logs));
        let uniform = perplexity(&profile(&vec![-3.5; n]));
        if (one_hot - 1.0).abs() > 1e-12 || (uniform - n as f64).abs() > 1e-12 {
            return Err(format!("N={n}: one-hot perplexity {one_hot}, uniform {uniform}"));
        }
    }

    const SAMPLES: usize = 100_000;
    let mut worst_z = 0.0_f64;
    for k in 0..20 {
        let dim = rng.random_range(1..=5);
        let post = GaussianPosterior {
            mean: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            log_variance: (0..dim).map(|_| rng.random_range(-2.0..1.0)).collect(),
        };
        let closed = kl_to_prior(&post);
        let std = post.std_dev();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..SAMPLES {
            // log q(z) - log p(z) at z = mean + std·ε
            let mut v = 0.0;
            for d in 0..dim {
                let eps: f64 = rng.sample(StandardNormal);
                let z = post.mean[d] + std[d] * eps;
                v += -0.5 * post.log_variance[d] - 0.5 * eps * eps + 0.5 * z * z;
            }
            s += v;
            s2 += v * v;
        }
        let mean = s / SAMPLES as f64;
        let var = (s2 / SAMPLES as f64 - mean * mean) * SAMPLES as f64 / (SAMPLES - 1) as f64;
        let se = (var / SAMPLES as f64).sqrt();
        let z = (closed - mean).abs() / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            return Err(format!("posterior {k}: closed-form KL {closed:.5} vs Monte Carlo {mean:.5} ({z:.2} SE)"));
        }
    }
    Ok(format!("normalization, bounds and limits hold; KL vs Monte Carlo worst {worst_z:.2} SE over 20 posteriors"))
}

// ---------------------------------------------------------------- criterion 4

fn mini_mnist_replication() -> Outcome {
    let data = mnist()?;
    let mini = mini_mnist(&data.train, 10, 0).map_err(|e| e.to_string())?;
    let mut spec = VaeSpec::shallow(2);
    spec.epochs = 2000;
    spec.batch_size = 100;
    spec.seed = 0;
    let (model, history) = train(&spec, &mini).map_err(|e| e.to_string())?;
    let first = history.first().expect("epochs").neg_elbo;
    let last = history.last().expect("epochs").neg_elbo;
    let cache = PosteriorCache::build(&model, mini.clone()).map_err(|e| e.to_string())?;
    let summary = probe_dataset(&model, &cache, &mini, ZMode::Mean).map_err(|e| e.to_string())?;
    let median_top1 = summary.median_max_weight();
    let points = posterior_points(&cache).map_err(|e| e.to_string())?;
    let bounds = fit_bounds(&points, 0.25).map_err(|e| e.to_string())?;
    let grid = grid_max_weight(&model, &cache, GridSpec::new(bounds, 200, 200).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let area = grid.fraction_above(0.99);
    ensure(
        last < first && median_top1 > 0.9 && area > 0.5,
        format!(
            "-ELBO {first:.1} -> {last:.1}; median top-1 weight {median_top1:.3} (> 0.9); grid fraction with max weight > 0.99 {area:.3} (> 0.5)"
        ),
    )
}

// ---------------------------------------------------------- criteria 5 and 6

struct HoldoutRun {
    shallow: ProbeSummary,
    deep: ProbeSummary,
}

fn holdout_runs() -> Result<&'static HoldoutRun, String> {
    static RUN: OnceLock<Result<HoldoutRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = mnist()?;
        let split = holdout_subset(data.train.clone(), data.test.clone(), Some(9), Some(10_000), 0);
        let nines = select_digit(&split.test, 9);
        let run = |mut spec: VaeSpec, name: &str| -> Result<ProbeSummary, String> {
            spec.epochs = HOLDOUT_EPOCHS;
            spec.batch_size = 100;
            spec.seed = 0;
            let (model, _) = train(&spec, &split.train).map_err(|e| e.to_string())?;
            let cache = PosteriorCache::build(&model, split.train.clone()).map_err(|e| e.to_string())?;
            let summary = probe_dataset(&model, &cache, &nines, ZMode::Mean).map_err(|e| e.to_string())?;
            let dir = artifact_dir();
            let file = |suffix: &str| std::fs::File::create(dir.join(format!("holdout9-{name}-{suffix}.csv")));
            if let (Ok(a), Ok(b)) = (file("probe"), file("histogram")) {
                let _ = write_probe_csv(&summary, a);
                let _ = write_histogram_csv(&summary.histogram, b);
            }
            Ok(summary)
        };
        Ok(HoldoutRun {
            shallow: run(VaeSpec::shallow(50), "shallow")?,
            deep: run(VaeSpec::deep(50), "deep")?,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn holdout_direction() -> Outcome {
    let run = holdout_runs()?;
    let s = run.shallow.fraction_recon_closer_to_input;
    let d = run.deep.fraction_recon_closer_to_input;
    let sides = if s > 0.5 && d < 0.5 {
        "both sides of 0.5 as expected"
    } else {
        "straddles 0.5; ordering decides"
    };
    ensure(
        s > d,
        format!("fraction recon closer to input: shallow {s:.3}, deep {d:.3} ({sides}; {} nines)", run.shallow.results.len()),
    )
}

fn perplexity_peak() -> Outcome {
    let run = holdout_runs()?;
    let label = |s: &ProbeSummary| PerplexityHistogram::bin_label(s.histogram.modal_bin());
    let share = |s: &ProbeSummary| s.histogram.counts[0] as f64 / s.histogram.total() as f64;
    ensure(
        run.shallow.histogram.modal_bin() == 0 && run.deep.histogram.modal_bin() == 0,
        format!(
            "modal bins: shallow {} ({:.2} of mass in [1,2)), deep {} ({:.2})",
            label(&run.shallow),
            share(&run.shallow),
            label(&run.deep),
            share(&run.deep)
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn sweep_direction() -> Outcome {
    let data = mnist()?;
    let preset = enumerate_configs("paper17").map_err(|e| e.to_string())?;
    let split = holdout_subset(data.train.clone(), data.test.clone(), Some(9), Some(10_000), 0);
    let jobs = std::env::var("VAEPROBE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let config = SweepConfig {
        preset: preset.name,
        preset_version: preset.version,
        architectures: preset.specs,
        held_out: 9,
        probe_count: SWEEP_PROBES,
        epochs: SWEEP_EPOCHS,
        batch_size: 100,
        optimizer: AdamConfig::default(),
        seed: 0,
        subset: Some(10_000),
        subset_seed: 0,
        jobs,
    };
    let result = run_sweep(&config, &split, None).map_err(|e| e.to_string())?;
    let _ = write_sweep_outputs(&result, &artifact_dir(), "sweep-paper17-holdout9");
    if let Some(c) = result.cells.iter().find(|c| c.error.is_some()) {
        return Err(format!("cell {} failed: {}", c.spec_id, c.error.as_deref().unwrap_or("")));
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let by_depth = |depth: usize| result.cells.iter().filter(move |c| c.layer_count == depth);
    let avg1 = mean(by_depth(1).filter_map(|c| c.mean_bce_avg_recon()).collect());
    let avg3 = mean(by_depth(3).filter_map(|c| c.mean_bce_avg_recon()).collect());
    let max_in1 = by_depth(1)
        .filter_map(|c| c.mean_bce_input_recon())
        .fold(f64::NEG_INFINITY, f64::max);
    let shallow400 = result
        .cells
        .iter()
        .find(|c| c.spec_id == "h400")
        .and_then(|c| c.mean_bce_input_recon())
        .ok_or("no h400 cell")?;
    ensure(
        avg3 < avg1 && max_in1 <= 2.0 * shallow400,
        format!(
            "mean BCE(mu, x^): 3-layer {avg3:.2} vs 1-layer {avg1:.2}; max 1-layer BCE(x, x^) {max_in1:.2} vs 2 x h400 {:.2}",
            2.0 * shallow400
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn golden(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn golden_tiles(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..n).map(|t| (0..IMAGE_PIXELS).map(|p| f(t, p)).collect()).collect()
}

fn formats() -> Outcome {
    let data = mnist()?;
    let dir = mnist_dir();
    for (images, labels) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let ib = std::fs::read(dir.join(images)).map_err(|e| e.to_string())?;
        let lb = std::fs::read(dir.join(labels)).map_err(|e| e.to_string())?;
        let parsed = parse_idx(&ib, &lb).map_err(|e| e.to_string())?;
        if to_idx(&parsed) != (ib, lb) {
            return Err(format!("{images}: IDX round trip changed bytes"));
        }
    }

    let mini = mini_mnist(&data.train, 5, 1).map_err(|e| e.to_string())?;
    let mut spec = VaeSpec::mirrored(2, &[64]);
    spec.epochs = 15;
    spec.batch_size = 10;
    spec.seed = 11;
    let (a, hist_a) = train(&spec, &mini).map_err(|e| e.to_string())?;
    let (b, hist_b) = train(&spec, &mini).map_err(|e| e.to_string())?;
    let same_bits = |x: &VaeModel, y: &VaeModel| {
        x.to_flat().iter().zip(y.to_flat()).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    if !same_bits(&a, &b) || hist_a != hist_b {
        return Err("same-seed training runs differ".into());
    }

    let bytes = encode_checkpoint(&a, None);
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    if !same_bits(&a, &back.model) || encode_checkpoint(&back.model, None) != bytes {
        return Err("checkpoint round trip is not bit-exact".into());
    }

    let grids = [
        ("zero_tile.pgm", ImageGrid::new(1, 1, golden_tiles(1, |_, _| 0.0), None)),
        (
            "grid_2x3_sep.pgm",
            ImageGrid::new(2, 3, golden_tiles(6, |t, p| ((p * 37 + t * 101) % 511) as f64 / 510.0), Some(1.0)),
        ),
        (
            "grid_3x2_plain.pgm",
            ImageGrid::new(3, 2, golden_tiles(6, |t, p| (p % 28) as f64 / 27.0 * (t + 1) as f64 / 6.0), None),
        ),
    ];
    for (name, grid) in grids {
        if grid.map_err(|e| e.to_string())?.to_image().to_pgm() != golden(name) {
            return Err(format!("{name} differs from golden file"));
        }
    }
    let values: Vec<f64> = (0..20).map(|k| 0.2 + 0.8 * ((k * 7) % 20) as f64 / 19.0).collect();
    let heat = heatmap(&values, 4, 5).map_err(|e| e.to_string())?.0.to_pgm();
    let flat = heatmap(&[0.37; 9], 3, 3).map_err(|e| e.to_string())?.0.to_pgm();
    if heat != golden("heatmap_4x5.pgm") || flat != golden("heatmap_const.pgm") {
        return Err("heatmap differs from golden file".into());
    }
    Ok("IDX byte-exact (60k + 10k), checkpoint bit-exact, 5 PGM goldens byte-exact, same-seed training bit-identical".into())
}

// ---------------------------------------------------------------- runner

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient suite", budget: Duration::from_secs(10), run: gradient_suite },
        Criterion { id: 2, name: "oracle equivalence", budget: Duration::from_secs(5), run: oracle_equivalence },
        Criterion { id: 3, name: "metric properties", budget: Duration::from_secs(30), run: metric_properties },
        Criterion { id: 4, name: "mini-MNIST replication", budget: Duration::from_secs(600), run: mini_mnist_replication },
        Criterion { id: 5, name: "holdout direction", budget: Duration::from_secs(45 * 60), run: holdout_direction },
        Criterion { id: 6, name: "perplexity peak", budget: Duration::from_secs(45 * 60), run: perplexity_peak },
        Criterion { id: 7, name: "sweep direction", budget: Duration::from_secs(6 * 3600), run: sweep_direction },
        Criterion { id: 8, name: "formats", budget: Duration::from_secs(60), run: formats },
    ];
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.budget => Err(format!("{d}; over the {:?} budget", c.budget)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("criterion {} {tag} {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
