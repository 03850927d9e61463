//! Subcommand implementations behind the `uda` binary.

pub mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use uda_core::config::{TrainConfig, Variant};
use uda_core::pseudolabel;
use uda_core::synthdata::{self, Domain};
use uda_core::trainer::{self, Datasets};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Maps an error chain to the exit-code contract.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<uda_core::Error>() {
            return match e {
                uda_core::Error::NonFinite(_) => EXIT_NUMERIC,
                uda_core::Error::Shape { .. } => EXIT_FAILURE,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_FAILURE
}

/// Bad input detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    Ok(TrainConfig::load(path, overrides)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes train and held-out scenes of both domains under `out`.
pub fn dataset_gen(cfg: &TrainConfig, out: &Path) -> Result<String> {
    let data = Datasets::generate(cfg)?;
    synthdata::export_domain(out, Domain::Source, &data.source)?;
    synthdata::export_domain(out, Domain::Target, &data.target)?;
    let eval = out.join("eval");
    synthdata::export_domain(&eval, Domain::Source, &data.source_eval)?;
    synthdata::export_domain(&eval, Domain::Target, &data.target_eval)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let freq = synthdata::class_frequency_skew(&cfg.data, cfg.scenes)?;
    let mut csv = String::from("class,source,target\n");
    let (fs, ft) = (
        synthdata::FrequencyReport::fractions(&freq.source),
        synthdata::FrequencyReport::fractions(&freq.target),
    );
    let mut rows = Vec::new();
    for k in 0..cfg.data.classes {
        let _ = writeln!(csv, "{k},{},{}", freq.source[k], freq.target[k]);
        rows.push(vec![
            k.to_string(),
            format!("{:.3}", fs[k]),
            format!("{:.3}", ft[k]),
        ]);
    }
    write(&out.join("frequencies.csv"), &csv)?;
    let header: Vec<String> = ["class", "source", "target"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Ok(format!(
        "{} scenes per domain ({} held out) in {}\nclass pixel fractions\n{}",
        cfg.scenes,
        cfg.eval_scenes,
        out.display(),
        report::render_table(&header, &rows)
    ))
}

/// Runs one training job; returns the printed report.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<String> {
    trainer::run(cfg, out)?;
    let table = report::MetricsTable::load(&out.join("metrics.csv"))?;
    report::run_report(&table)
}

/// Trains every variant for each seed on shared data; writes
/// `<out>/seed-<s>/<slug>/` runs and `<out>/ablation.csv`.
pub fn ablate(cfg: &TrainConfig, seeds: &[u64], out: &Path) -> Result<String> {
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    for &seed in seeds {
        let base = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let data = Datasets::generate(&base)?;
        for v in Variant::ALL {
            let vc = v.apply(&base);
            log::info!("seed {seed}: training {}", v.name());
            trainer::run_with_data(&vc, &data, &out.join(format!("seed-{seed}")).join(v.slug()))?;
        }
    }
    let rows = report::collect_ablation(out)?;
    write(&out.join("ablation.csv"), &report::ablation_csv(&rows))?;
    Ok(report::ablation_report(&rows))
}

/// Summary of a standalone labeling pass.
#[derive(Clone, Debug)]
pub struct LabelSummary {
    pub scenes: usize,
    pub delta: Vec<f64>,
    pub selection: Vec<f64>,
    pub selected_pixels: usize,
    pub mean_entropy: Option<f64>,
}

impl LabelSummary {
    pub fn render(&self) -> String {
        let header: Vec<String> = ["class", "delta", "selected"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = self
            .delta
            .iter()
            .zip(&self.selection)
            .enumerate()
            .map(|(k, (d, s))| vec![k.to_string(), format!("{d:.4}"), format!("{s:.4}")])
            .collect();
        format!(
            "{}{} scenes, {} labeled pixels, mean label entropy {}\n",
            report::render_table(&header, &rows),
            self.scenes,
            self.selected_pixels,
            self.mean_entropy
                .map_or_else(|| "-".into(), |e| format!("{e:.6}"))
        )
    }
}

/// Config next to a checkpoint inside a run directory (`<run>/checkpoints/x.ckpt`).
pub fn run_config_for(checkpoint: &Path) -> Option<PathBuf> {
    let run = checkpoint.parent()?.parent()?;
    let p = run.join("config.toml");
    p.exists().then_some(p)
}

/// Labels every scene image found in `target_dir` with a saved model.
pub fn label(
    cfg: &TrainConfig,
    checkpoint: &Path,
    target_dir: &Path,
    gamma: f64,
    selection_amount: f64,
    out: &Path,
) -> Result<LabelSummary> {
    if !checkpoint.is_file() {
        return Err(usage(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(usage("gamma must be > 0"));
    }
    if !(selection_amount > 0.0 && selection_amount <= 1.0) {
        return Err(usage("selection amount must lie in (0, 1]"));
    }
    let model = trainer::load_model(cfg, checkpoint)?;
    let scenes = if target_dir.is_dir() {
        synthdata::load_scenes(target_dir)?
    } else {
        return Err(usage(format!(
            "target directory {} not found",
            target_dir.display()
        )));
    };
    if scenes.is_empty() {
        return Err(usage(format!("no scenes in {}", target_dir.display())));
    }
    let images: Vec<&uda_core::nn::Tensor> = scenes.iter().map(|(img, _)| img).collect();
    let el = trainer::generate_labels(&model, &images, gamma, selection_amount)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut entropy = (0.0, 0usize);
    for (i, l) in el.labels.iter().enumerate() {
        pseudolabel::write_labels(&out.join(format!("scene-{i:04}.lbl")), l)?;
        if let Some(e) = l.mean_entropy() {
            entropy.0 += e * l.selected_count() as f64;
            entropy.1 += l.selected_count();
        }
    }
    let summary = LabelSummary {
        scenes: el.labels.len(),
        delta: el.thresholds.delta.clone(),
        selection: el.selection.clone(),
        selected_pixels: entropy.1,
        mean_entropy: (entropy.1 > 0).then(|| entropy.0 / entropy.1 as f64),
    };
    let mut csv = String::from("class,delta,selected_fraction\n");
    for (k, (d, s)) in summary.delta.iter().zip(&summary.selection).enumerate() {
        let _ = writeln!(csv, "{k},{d},{s}");
    }
    write(&out.join("selection.csv"), &csv)?;
    Ok(summary)
}

/// Tables for a run directory, a `metrics.csv`, or an ablation directory.
pub fn report(path: &Path) -> Result<String> {
    if path.is_file() {
        return report::run_report(&report::MetricsTable::load(path)?);
    }
    if path.join("metrics.csv").is_file() {
        return report::run_report(&report::MetricsTable::load(&path.join("metrics.csv"))?);
    }
    if path.is_dir() {
        let rows = report::collect_ablation(path)?;
        return Ok(report::ablation_report(&rows));
    }
    bail!(UsageError(format!(
        "{} is neither a metrics file nor a run directory",
        path.display()
    )))
}
