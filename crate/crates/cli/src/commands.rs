use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vaeprobe::latent_map::{
    default_strata, fit_bounds, grid_max_weight, overlay, posterior_points, stratified_decode,
    stratified_gallery, write_grid_csv, write_posterior_csv, GridSpec,
};
use vaeprobe::mnist::{dataset_id, holdout_subset, load_idx, mini_mnist, select_digit, write_idx, Image};
use vaeprobe::nn::AdamConfig;
use vaeprobe::oracle::{perplexity, top_k, PosteriorCache};
use vaeprobe::probe::{gallery, probe_dataset, write_histogram_csv, write_probe_csv, PerplexityHistogram, ZMode};
use vaeprobe::render::{sidecar_path, write_heatmap, write_pgm};
use vaeprobe::sweep::{enumerate_configs, run_sweep, write_sweep_outputs, SweepConfig};
use vaeprobe::vae::{
    load_checkpoint, save_checkpoint, train_with_options, Checkpoint, TrainOptions, TrainingData, VaeSpec,
};

use crate::args::{LatentMapArgs, MiniMnistArgs, ProbeArgs, SweepArgs, TrainArgs, TrainData, ZModeArg};
use crate::manifest::ManifestBuilder;

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn load_train(data: &TrainData, manifest: &mut ManifestBuilder) -> Result<Vec<Image>> {
    manifest.input(&data.train_images);
    manifest.input(&data.train_labels);
    Ok(load_idx(&data.train_images, &data.train_labels)?)
}

/// The training images a checkpoint was fitted on, checked against its recorded id.
fn checkpoint_training_set(
    checkpoint: &Checkpoint,
    data: &TrainData,
    manifest: &mut ManifestBuilder,
) -> Result<Vec<Image>> {
    let all = load_train(data, manifest)?;
    let Some(td) = &checkpoint.training_data else {
        log::warn!("checkpoint does not record its training data; using every training image");
        return Ok(all);
    };
    let split = holdout_subset(all, Vec::new(), td.held_out, td.subset, td.subset_seed);
    let id = dataset_id(&split.train);
    if id != td.dataset_id {
        bail!(
            "training images do not match the checkpoint (expected dataset {}, rebuilt {id})",
            td.dataset_id
        );
    }
    Ok(split.train)
}

pub fn train(args: &TrainArgs, mut manifest: ManifestBuilder) -> Result<()> {
    create_out_dir(&args.out)?;
    manifest.seed("seed", args.seed);
    manifest.seed("subset_seed", args.subset_seed);
    let all = load_train(&args.data, &mut manifest)?;
    let split = holdout_subset(all, Vec::new(), args.holdout, args.subset, args.subset_seed);
    let mut spec = VaeSpec::mirrored(args.latent_dim as usize, &args.arch.hidden());
    spec.epochs = args.epochs;
    spec.batch_size = args.batch as usize;
    spec.seed = args.seed;
    spec.optimizer = AdamConfig {
        learning_rate: args.lr,
        ..AdamConfig::default()
    };
    log::info!(
        "training {} parameters on {} images",
        spec.parameter_count(),
        split.train.len()
    );
    let (model, history) = train_with_options(&spec, &split.train, TrainOptions { parallel: args.parallel })?;

    let training_data = TrainingData {
        held_out: args.holdout,
        subset: args.subset,
        subset_seed: args.subset_seed,
        image_count: split.train.len(),
        dataset_id: dataset_id(&split.train),
    };
    let ckpt = args.out.join("model.vaec");
    save_checkpoint(&model, Some(&training_data), &ckpt)?;
    manifest.output(&ckpt);

    let hist = args.out.join("history.csv");
    let mut w = csv::Writer::from_writer(create(&hist)?);
    for r in &history {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    manifest.output(&hist);
    manifest.finish(&args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeReport {
    examples: usize,
    train_images: usize,
    fraction_recon_closer_to_input: f64,
    median_max_weight: f64,
    modal_perplexity_bin: String,
    histogram: Vec<usize>,
    gallery_test_indices: Vec<usize>,
}

pub fn probe(args: &ProbeArgs, mut manifest: ManifestBuilder) -> Result<()> {
    create_out_dir(&args.out)?;
    manifest.seed("seed", args.seed);
    manifest.input(&args.checkpoint);
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let train = checkpoint_training_set(&checkpoint, &args.train, &mut manifest)?;
    manifest.input(&args.test.test_images);
    manifest.input(&args.test.test_labels);
    let test = load_idx(&args.test.test_images, &args.test.test_labels)?;
    let file_indices: Vec<usize> = (0..test.len())
        .filter(|&i| args.test_digit.is_none_or(|d| test[i].label() == d))
        .collect();
    let probe_set: Vec<Image> = match args.test_digit {
        Some(d) => select_digit(&test, d),
        None => test,
    };
    if probe_set.is_empty() {
        bail!("no test images match --test-digit");
    }
    let model = checkpoint.model;
    let cache = PosteriorCache::build(&model, train)?;
    let z_mode = match args.z_mode {
        ZModeArg::Mean => ZMode::Mean,
        ZModeArg::Sample => ZMode::Sample(args.seed),
    };
    let mut summary = probe_dataset(&model, &cache, &probe_set, z_mode)?;
    summary.test_indices = summary.test_indices.iter().map(|&i| file_indices[i]).collect();

    let csv_path = args.out.join("probe.csv");
    write_probe_csv(&summary, create(&csv_path)?)?;
    manifest.output(&csv_path);
    let hist_path = args.out.join("histogram.csv");
    write_histogram_csv(&summary.histogram, create(&hist_path)?)?;
    manifest.output(&hist_path);

    let mut gallery_indices = Vec::new();
    if args.gallery > 0 {
        let (picks, grid) = gallery(&summary, &cache, args.gallery, args.seed)?;
        gallery_indices = picks.iter().map(|&p| summary.test_indices[p]).collect();
        let path = args.out.join("gallery.pgm");
        write_pgm(&grid, &path)?;
        manifest.output(&path);
    }

    let report = ProbeReport {
        examples: summary.results.len(),
        train_images: cache.len(),
        fraction_recon_closer_to_input: summary.fraction_recon_closer_to_input,
        median_max_weight: summary.median_max_weight(),
        modal_perplexity_bin: PerplexityHistogram::bin_label(summary.histogram.modal_bin()),
        histogram: summary.histogram.counts.to_vec(),
        gallery_test_indices: gallery_indices,
    };
    log::info!(
        "{} examples: recon closer to input for {:.3}, modal perplexity bin {}",
        report.examples,
        report.fraction_recon_closer_to_input,
        report.modal_perplexity_bin
    );
    let path = args.out.join("summary.json");
    write_json(&path, &report)?;
    manifest.output(&path);
    manifest.finish(&args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct StratumRow {
    stratum: usize,
    lo: f64,
    hi: f64,
    row: usize,
    col: usize,
    z_x: f64,
    z_y: f64,
    max_weight: f64,
    perplexity: f64,
    top1_index: usize,
}

#[derive(Serialize)]
struct LatentMapReport {
    bounds: vaeprobe::latent_map::Bounds,
    rows: usize,
    cols: usize,
    margin: f64,
    train_images: usize,
    fraction_above_0_99: f64,
    empty_strata: Vec<usize>,
}

pub fn latent_map(args: &LatentMapArgs, mut manifest: ManifestBuilder) -> Result<()> {
    manifest.seed("seed", args.seed);
    manifest.input(&args.checkpoint);
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    if checkpoint.model.latent_dim() != 2 {
        bail!(vaeprobe::latent_map::LatentMapError::Dimensionality {
            latent_dim: checkpoint.model.latent_dim()
        });
    }
    create_out_dir(&args.out)?;
    let train = checkpoint_training_set(&checkpoint, &args.train, &mut manifest)?;
    let model = checkpoint.model;
    let cache = PosteriorCache::build(&model, train)?;
    let points = posterior_points(&cache)?;
    let bounds = fit_bounds(&points, args.margin)?;
    let (rows, cols) = args.grid;
    let grid = grid_max_weight(&model, &cache, GridSpec::new(bounds, rows, cols)?)?;

    let path = args.out.join("grid.csv");
    write_grid_csv(&grid, create(&path)?)?;
    manifest.output(&path);
    let path = args.out.join("heatmap.pgm");
    let sidecar = write_heatmap(&grid.values, rows, cols, &path)?;
    debug_assert_eq!(sidecar, sidecar_path(&path));
    manifest.output(&path);
    manifest.output(&sidecar);
    let path = args.out.join("overlay.pgm");
    overlay(&grid, &points)?.write(&path)?;
    manifest.output(&path);
    let path = args.out.join("posteriors.csv");
    write_posterior_csv(&points, create(&path)?)?;
    manifest.output(&path);

    let strata = default_strata();
    let decoded = stratified_decode(&model, &cache, &grid, &strata, args.per_stratum, args.seed)?;
    for &s in &decoded.empty_strata {
        log::warn!("max-weight band ({}, {}] has no grid points", strata[s].lo, strata[s].hi);
    }
    let path = args.out.join("strata.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for s in &decoded.samples {
        w.serialize(StratumRow {
            stratum: s.stratum,
            lo: strata[s.stratum].lo,
            hi: strata[s.stratum].hi,
            row: s.row,
            col: s.col,
            z_x: s.z[0],
            z_y: s.z[1],
            max_weight: s.profile.max_weight(),
            perplexity: perplexity(&s.profile),
            top1_index: top_k(&s.profile, 1)?[0].0,
        })?;
    }
    w.flush()?;
    drop(w);
    manifest.output(&path);
    if args.per_stratum > 0 {
        let path = args.out.join("strata.pgm");
        write_pgm(&stratified_gallery(&decoded, strata.len(), args.per_stratum)?, &path)?;
        manifest.output(&path);
    }

    let report = LatentMapReport {
        bounds,
        rows,
        cols,
        margin: args.margin,
        train_images: cache.len(),
        fraction_above_0_99: grid.fraction_above(0.99),
        empty_strata: decoded.empty_strata.clone(),
    };
    log::info!("grid fraction with max weight > 0.99: {:.3}", report.fraction_above_0_99);
    let path = args.out.join("summary.json");
    write_json(&path, &report)?;
    manifest.output(&path);
    manifest.finish(&args.out)?;
    Ok(())
}

pub fn sweep(args: &SweepArgs, mut manifest: ManifestBuilder) -> Result<()> {
    create_out_dir(&args.out)?;
    manifest.seed("seed", args.seed);
    manifest.seed("subset_seed", args.subset_seed);
    let preset = enumerate_configs(&args.preset)?;
    let all_train = load_train(&args.train, &mut manifest)?;
    manifest.input(&args.test.test_images);
    manifest.input(&args.test.test_labels);
    let all_test = load_idx(&args.test.test_images, &args.test.test_labels)?;
    let digits: Vec<u8> = if args.all_digits { (0..=8).collect() } else { vec![args.holdout] };
    for d in digits {
        let split = holdout_subset(all_train.clone(), all_test.clone(), Some(d), args.subset, args.subset_seed);
        let config = SweepConfig {
            preset: preset.name.clone(),
            preset_version: preset.version.clone(),
            architectures: preset.specs.clone(),
            held_out: d,
            probe_count: args.probe_count as usize,
            epochs: args.epochs,
            batch_size: args.batch as usize,
            optimizer: AdamConfig {
                learning_rate: args.lr,
                ..AdamConfig::default()
            },
            seed: args.seed,
            subset: args.subset,
            subset_seed: args.subset_seed,
            jobs: args.jobs as usize,
        };
        let ckpt_dir: PathBuf = args.out.join(format!("checkpoints-holdout{d}"));
        create_out_dir(&ckpt_dir)?;
        log::info!("sweep {} holding out {d}: {} architectures", preset.name, config.architectures.len());
        let result = run_sweep(&config, &split, Some(&ckpt_dir))?;
        for cell in &result.cells {
            if let Some(p) = &cell.checkpoint {
                manifest.output(p);
            }
        }
        manifest.outputs(write_sweep_outputs(&result, &args.out, &format!("sweep-holdout{d}"))?);
    }
    manifest.finish(&args.out)?;
    Ok(())
}

pub fn mini_mnist_cmd(args: &MiniMnistArgs, mut manifest: ManifestBuilder) -> Result<()> {
    create_out_dir(&args.out)?;
    manifest.seed("seed", args.seed);
    let all = load_train(&args.data, &mut manifest)?;
    let mini = mini_mnist(&all, args.per_digit as usize, args.seed)?;
    let images = args.out.join("mini-train-images-idx3-ubyte");
    let labels = args.out.join("mini-train-labels-idx1-ubyte");
    write_idx(&mini, &images, &labels)?;
    manifest.output(&images);
    manifest.output(&labels);
    manifest.finish(&args.out)?;
    Ok(())
}
