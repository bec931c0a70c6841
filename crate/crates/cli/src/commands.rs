use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use srma_core::config::RunConfig;
use srma_core::data::{generate_domain, load_dataset, save_dataset, Dataset, DomainSpec, MiouReport};
use srma_core::invariance::{analyze as run_analysis, format_table, AnalyzeConfig, InvarianceReport};
use srma_core::net::{evaluate, gradcheck as run_gradcheck, load_checkpoint, save_checkpoint, GradLoss, TrainSummary};
use srma_core::srm::{rearrange, MixWeights};
use srma_core::stats::{gap, region_moments, sap};
use srma_core::{RegionStats, SegNet};

use crate::{
    AnalyzeArgs, EvalArgs, ExportArgs, ExportLevel, GenerateArgs, GradcheckArgs, Preset, PreviewArgs, TrainArgs,
};

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.ndjson";
pub const SUMMARY: &str = "summary.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_nonempty(dir: &Path) -> Result<Dataset> {
    let data = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    ensure!(!data.samples.is_empty(), "dataset {} is empty", dir.display());
    Ok(data)
}

fn check_compatible(net: &SegNet, data: &Dataset, dir: &Path) -> Result<()> {
    ensure!(
        data.num_categories <= net.config.num_classes,
        "dataset {} has {} categories but the checkpoint predicts {}",
        dir.display(),
        data.num_categories,
        net.config.num_classes
    );
    let channels = data.samples[0].image.channels();
    ensure!(
        channels == net.config.in_channels,
        "dataset {} has {channels}-channel images but the checkpoint expects {}",
        dir.display(),
        net.config.in_channels
    );
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<SegNet> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let spec = match a.preset {
        Preset::Source => DomainSpec::source(a.categories, a.size, a.layout_seed),
        Preset::TargetA | Preset::TargetB => {
            let mut t = DomainSpec::targets(a.categories, a.size, a.layout_seed);
            t.swap_remove(if matches!(a.preset, Preset::TargetA) { 0 } else { 1 })
        }
    };
    let samples = generate_domain(&spec, a.count, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    save_dataset(&samples, &a.out, a.categories, Some(&spec))?;
    println!("wrote {} {} samples to {}", samples.len(), spec.name, a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.resolve_seeds();
    }
    if let Some(steps) = a.steps {
        cfg.train.max_steps = steps;
    }
    if a.no_srm {
        cfg.train.srm = false;
    }
    if a.no_mla_global {
        cfg.train.mla.global = false;
    }
    if a.no_mla_regional {
        cfg.train.mla.regional = false;
    }
    if a.no_mla_local {
        cfg.train.mla.local = false;
    }
    if a.no_pc {
        cfg.train.pc = false;
    }
    if a.no_style_elim {
        cfg.network.style_elim = false;
    }
    if a.unfreeze_layer0 {
        cfg.network.frozen_layer0 = false;
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    #[serde(flatten)]
    train: &'a TrainSummary,
    checkpoint_sha256: String,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("reading config {}", a.config.display()))?;
    apply_overrides(&mut cfg, &a);
    cfg.validate()?;
    let samples = match &cfg.data.dataset {
        Some(dir) => {
            let data = load_nonempty(dir)?;
            ensure!(
                data.num_categories <= cfg.network.num_classes,
                "dataset has {} categories but network.num_classes is {}",
                data.num_categories,
                cfg.network.num_classes
            );
            data.samples
        }
        None => {
            let spec = cfg.source_spec();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
            generate_domain(&spec, cfg.data.train_samples, &mut rng)?
        }
    };

    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join(CONFIG_ECHO))?;
    let mut net = SegNet::new(cfg.network.clone())?;
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS))?);
    let mut log_err = None;
    let summary = srma_core::net::train(&mut net, &samples, &cfg.train, |record| {
        if log_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut metrics, record)
                .map_err(anyhow::Error::from)
                .and_then(|_| metrics.write_all(b"\n").map_err(anyhow::Error::from))
            {
                log_err = Some(e);
            }
        }
    });
    metrics.flush()?;
    if let Some(e) = log_err {
        return Err(e.context("writing metrics"));
    }
    let summary = summary?;
    let hash = save_checkpoint(&net, &dir.join(CHECKPOINT))?;
    write_json(
        &dir.join(SUMMARY),
        &RunSummary {
            train: &summary,
            checkpoint_sha256: hash.clone(),
        },
    )?;
    println!(
        "trained {} steps, final loss {:.4}; checkpoint {} sha256 {hash}",
        summary.steps,
        summary.final_loss.total,
        dir.join(CHECKPOINT).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    dataset: String,
    samples: usize,
    #[serde(flatten)]
    miou: MiouReport,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let net = open_checkpoint(&a.checkpoint)?;
    let data = load_nonempty(&a.dataset)?;
    check_compatible(&net, &data, &a.dataset)?;
    let report = evaluate(&net, &data.samples)?;
    println!("{report}");
    if let Some(out) = &a.out {
        write_json(
            out,
            &EvalReport {
                checkpoint: a.checkpoint.display().to_string(),
                dataset: a.dataset.display().to_string(),
                samples: data.samples.len(),
                miou: report,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeRow {
    target: String,
    report: InvarianceReport,
}

#[derive(Serialize)]
struct AnalyzeOutput {
    checkpoint: String,
    source: String,
    table: String,
    rows: Vec<AnalyzeRow>,
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = AnalyzeConfig {
        trials: a.trials,
        samples_per_trial: a.samples,
        gamma: a.gamma,
        seed: a.seed,
        layer: a.layer,
    };
    cfg.validate()?;
    let net = open_checkpoint(&a.checkpoint)?;
    let source = load_nonempty(&a.source)?;
    check_compatible(&net, &source, &a.source)?;
    let mut rows = Vec::with_capacity(a.target.len());
    for dir in &a.target {
        let target = load_nonempty(dir)?;
        check_compatible(&net, &target, dir)?;
        let report = run_analysis(&net, &source.samples, &target.samples, &cfg)?;
        rows.push((dataset_name(dir), report));
    }
    let table = format_table(&rows);
    print!("{table}");
    write_json(
        &a.out,
        &AnalyzeOutput {
            checkpoint: a.checkpoint.display().to_string(),
            source: a.source.display().to_string(),
            table,
            rows: rows
                .into_iter()
                .map(|(target, report)| AnalyzeRow { target, report })
                .collect(),
        },
    )
}

#[derive(Serialize)]
struct PreviewRegion {
    category: u8,
    pixels: usize,
    original: RegionStats,
    /// Mixing weights over `categories`.
    weights: Vec<f64>,
    synthesized: RegionStats,
    achieved: RegionStats,
    /// Channels constant inside the region; their std cannot be moved.
    degenerate_channels: Vec<usize>,
    /// Largest moment mismatch over the other channels.
    max_abs_error: f64,
}

#[derive(Serialize)]
struct PreviewReport {
    sample: String,
    alpha: f64,
    seed: u64,
    categories: Vec<u8>,
    regions: Vec<PreviewRegion>,
}

pub fn preview(a: PreviewArgs) -> Result<()> {
    let data = load_nonempty(&a.dataset)?;
    let net = match &a.checkpoint {
        Some(path) => open_checkpoint(path)?,
        None => SegNet::new(srma_core::NetworkConfig {
            seed: a.net_seed,
            num_classes: data.num_categories.max(1),
            ..Default::default()
        })?,
    };
    check_compatible(&net, &data, &a.dataset)?;
    let Some(sample) = data.samples.get(a.index) else {
        bail!("index {} out of range for {} samples", a.index, data.samples.len());
    };
    let shallow = net.shallow(&sample.image)?;
    let gt = srma_core::stats::resize_labels(&sample.labels, shallow.height(), shallow.width());
    let r = rearrange(&shallow, &gt, &mut ChaCha8Rng::seed_from_u64(a.seed), a.alpha)?;
    let MixWeights {
        categories, weights, ..
    } = &r.weights;
    let mut regions = Vec::with_capacity(categories.len());
    for (i, &c) in categories.iter().enumerate() {
        let achieved = region_moments(&r.output, &gt, c)?;
        let synthesized = &r.synthesized[i];
        let original = &r.original[i];
        let degenerate_channels: Vec<usize> = (0..original.std.len())
            .filter(|&d| original.std[d] <= srma_core::EPS_STD)
            .collect();
        let max_abs_error = (0..achieved.mean.len())
            .filter(|d| !degenerate_channels.contains(d))
            .map(|d| {
                (achieved.mean[d] - synthesized.mean[d])
                    .abs()
                    .max((achieved.std[d] - synthesized.std[d]).abs())
            })
            .fold(0.0, f64::max);
        regions.push(PreviewRegion {
            category: c,
            pixels: achieved.pixel_count,
            original: original.clone(),
            weights: weights[i].clone(),
            synthesized: synthesized.clone(),
            achieved,
            degenerate_channels,
            max_abs_error,
        });
    }
    let report = PreviewReport {
        sample: sample.id.clone(),
        alpha: a.alpha,
        seed: a.seed,
        categories: categories.clone(),
        regions,
    };
    for region in &report.regions {
        println!(
            "category {}: {} pixels, weights {:?}, max |achieved - synthesized| {:.2e}, {} constant channels",
            region.category,
            region.pixels,
            region.weights.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>(),
            region.max_abs_error,
            region.degenerate_channels.len()
        );
    }
    write_json(&a.out, &report)
}

pub fn export(a: ExportArgs) -> Result<()> {
    ensure!(a.layer <= 4, "layer must be in 0..=4, got {}", a.layer);
    let net = open_checkpoint(&a.checkpoint)?;
    let data = load_nonempty(&a.dataset)?;
    check_compatible(&net, &data, &a.dataset)?;
    let domain = a.domain.clone().unwrap_or_else(|| dataset_name(&a.dataset));
    let mut samples: Vec<_> = data.samples.iter().collect();
    samples.sort_by(|x, y| x.id.cmp(&y.id));

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut header_written = false;
    let mut rows = 0usize;
    let mut emit = |w: &mut BufWriter<File>, sample: &str, category: &str, v: &[f64]| -> Result<()> {
        if !header_written {
            let dims: Vec<String> = (0..v.len()).map(|d| format!("f{d}")).collect();
            writeln!(w, "sample,domain,category,{}", dims.join(","))?;
            header_written = true;
        }
        let values: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{sample},{domain},{category},{}", values.join(","))?;
        rows += 1;
        Ok(())
    };
    for s in samples {
        let f = net.features_at(&s.image, a.layer)?;
        let gt = srma_core::stats::resize_labels(&s.labels, f.height(), f.width());
        match a.level {
            ExportLevel::Global => emit(&mut w, &s.id, "all", &gap(&f))?,
            ExportLevel::Regional => {
                for c in gt.present_categories() {
                    emit(&mut w, &s.id, &c.to_string(), &sap(&f, &gt, c)?)?;
                }
            }
            ExportLevel::Local => {
                let regions = gt.region_indices();
                for c in gt.present_categories() {
                    for &p in &regions[c as usize] {
                        emit(&mut w, &s.id, &c.to_string(), &f.pixel(p))?;
                    }
                }
            }
        }
    }
    if !header_written {
        let dims: Vec<String> = (0..net.config.channels[a.layer]).map(|d| format!("f{d}")).collect();
        writeln!(w, "sample,domain,category,{}", dims.join(","))?;
    }
    w.flush()?;
    println!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let losses: Vec<GradLoss> = if a.loss == "all" {
        GradLoss::ALL.to_vec()
    } else {
        a.loss
            .split(',')
            .map(|s| s.trim().parse().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?
    };
    ensure!(a.trials > 0, "trials must be positive");
    let mut worst_overall = 0.0f64;
    for loss in losses {
        let mut worst = 0.0f64;
        for t in 0..a.trials {
            let r = run_gradcheck(loss, a.channels, a.size, a.seed.wrapping_add(t))?;
            worst = worst.max(r.relative_error);
        }
        let verdict = if worst < a.tolerance { "ok" } else { "FAIL" };
        println!("{loss:?}\tmax relative error {worst:.3e}\t{verdict}");
        worst_overall = worst_overall.max(worst);
    }
    ensure!(
        worst_overall < a.tolerance,
        "relative error {worst_overall:.3e} exceeds tolerance {:.1e}",
        a.tolerance
    );
    Ok(())
}
