//! Command-line front end: dataset generation, training, evaluation and the
//! analysis experiments, all driven by one TOML run configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use layer_ensembles::checkpoint;
use layer_ensembles::config::RunConfig;
use layer_ensembles::data;
use layer_ensembles::error::{LeError, Result};
use layer_ensembles::experiments::{
    self, FusionKind, GaussianCorruption, ImageEval, QC_GRID_POINTS,
};
use layer_ensembles::model::{derive_seed, Network};
use layer_ensembles::runner;

#[derive(Parser)]
#[command(name = "le", about = "Layer-ensemble segmentation toolkit", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Trained parameter checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (tensors, PGM previews, manifest) to disk.
    Generate,
    /// Train the model; writes the best-validation checkpoint and a loss log.
    Train,
    /// Per-image metrics and a summary table on the test split.
    Eval,
    /// Quality-control curves and the uncertainty/metric correlation table.
    Qc,
    /// Prediction-depth histograms under increasing corruption fractions.
    Pd,
    /// Calibration sweep over skip values (skip = N-1 is the plain baseline).
    SweepSkip,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| LeError::InvalidArgument("--config is required".into()))?;
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.data.seed = seed;
    }
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.out_dir));
    config.validate()?;

    match cli.command {
        Command::Generate => cmd_generate(&config, &out_dir),
        Command::Train => cmd_train(&config, &out_dir),
        Command::Eval => cmd_eval(&config, &out_dir, cli),
        Command::Qc => cmd_qc(&config, &out_dir, cli),
        Command::Pd => cmd_pd(&config, &out_dir, cli),
        Command::SweepSkip => cmd_sweep_skip(&config, &out_dir, cli),
    }
}

/// Loads the checkpoint into a freshly built network, surfacing shape
/// mismatches by tensor name.
fn load_model(config: &RunConfig, cli: &Cli) -> Result<Network> {
    let path = cli.checkpoint.as_deref().ok_or_else(|| {
        LeError::InvalidArgument("--checkpoint is required for this command".into())
    })?;
    let mut net = Network::build(config.model.clone(), config.seed)?;
    checkpoint::load_into(path, net.params_mut())?;
    Ok(net)
}

fn csv_writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Every command drops a summary with the seed and the full config echo so a
/// run can be audited and replayed. No timestamps: reruns are byte-identical.
fn write_run_summary(dir: &Path, command: &str, config: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        command: &'a str,
        seed: u64,
        config: &'a RunConfig,
        results: std::collections::BTreeMap<&'a str, String>,
    }
    let summary = Summary {
        command,
        seed: config.seed,
        config,
        results: extra.iter().map(|(k, v)| (*k, v.clone())).collect(),
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| LeError::InvalidArgument(format!("serializing summary: {e}")))?;
    std::fs::write(dir.join(format!("{command}-summary.json")), text)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

fn cmd_generate(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let dataset = data::generate(&config.data)?;
    let dataset_dir = out_dir.join("dataset");
    let manifest = data::save_dataset(&dataset_dir, &dataset)?;
    write_run_summary(
        out_dir,
        "generate",
        config,
        &[
            ("manifest", manifest.display().to_string()),
            ("train", dataset.train.len().to_string()),
            ("val", dataset.val.len().to_string()),
            ("test", dataset.test.len().to_string()),
        ],
    )?;
    println!("wrote {} samples to {}",
        dataset.train.len() + dataset.val.len() + dataset.test.len(),
        dataset_dir.display());
    Ok(())
}

fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let dataset = data::generate(&config.data)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let mut net = Network::build(config.model.clone(), config.seed)?;
    let outcome = runner::train(&mut net, &dataset.train, &dataset.val, config, Some(&ckpt_path))?;

    let mut log = csv_writer(out_dir, "training-log.csv")?;
    writeln!(log, "epoch,train_loss,val_loss,learning_rate")?;
    for e in &outcome.log {
        writeln!(log, "{},{:.6},{:.6},{:.6e}", e.epoch, e.train_loss, e.val_loss, e.learning_rate)?;
    }
    log.flush()?;

    write_run_summary(
        out_dir,
        "train",
        config,
        &[
            ("checkpoint", ckpt_path.display().to_string()),
            ("best_epoch", outcome.best_epoch.to_string()),
            ("best_val_loss", format!("{:.6}", outcome.best_val_loss)),
        ],
    )?;
    println!(
        "trained {} epochs; best val loss {:.4} at epoch {}; checkpoint {}",
        outcome.log.len(),
        outcome.best_val_loss,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn test_evals(config: &RunConfig, cli: &Cli, fusion_kind: FusionKind) -> Result<(Vec<ImageEval>, Network)> {
    let net = load_model(config, cli)?;
    let dataset = data::generate(&config.data)?;
    let evals = experiments::evaluate_split(
        &net,
        &dataset.test,
        config.eval.skip,
        config.eval.pd_threshold,
        fusion_kind,
        cli.threads,
    )?;
    Ok((evals, net))
}

fn write_per_image_csv(dir: &Path, evals: &[ImageEval]) -> Result<()> {
    let mut out = csv_writer(dir, "per-image.csv")?;
    writeln!(
        out,
        "id,dsc,mhd,nll,variance_sum,entropy_sum,mi_sum,aula,prediction_depth"
    )?;
    for e in evals {
        writeln!(
            out,
            "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            e.id,
            e.metrics.dsc,
            fmt_opt(e.metrics.mhd),
            e.metrics.nll,
            e.report.variance_sum,
            e.report.entropy_sum,
            e.report.mi_sum,
            e.report.aula,
            e.report.prediction_depth
        )?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_eval(config: &RunConfig, out_dir: &Path, cli: &Cli) -> Result<()> {
    let (evals, _net) = test_evals(config, cli, config.eval.fusion)?;
    std::fs::create_dir_all(out_dir)?;
    write_per_image_csv(out_dir, &evals)?;

    let records: Vec<_> = evals.iter().map(|e| e.metrics.clone()).collect();
    let table = experiments::summary_table(&records)?;
    let mut out = csv_writer(out_dir, "summary.csv")?;
    writeln!(out, "scope,images,dsc_mean,dsc_std,mhd_mean,mhd_std,undefined_mhd,nll_mean,nll_std")?;
    writeln!(
        out,
        "all,{},{:.6},{:.6},{},{},{},{:.6},{:.6}",
        table.images,
        table.dsc_mean,
        table.dsc_std,
        fmt_opt((table.undefined_mhd < table.images).then_some(table.mhd_mean)),
        fmt_opt((table.undefined_mhd < table.images).then_some(table.mhd_std)),
        table.undefined_mhd,
        table.nll_mean,
        table.nll_std
    )?;
    for c in &table.per_class {
        writeln!(
            out,
            "class-{},{},{:.6},{:.6},{:.6},{:.6},{},,",
            c.class, table.images, c.dsc_mean, c.dsc_std, c.mhd_mean, c.mhd_std, c.undefined_mhd
        )?;
    }
    out.flush()?;

    write_run_summary(
        out_dir,
        "eval",
        config,
        &[
            ("dsc_mean", format!("{:.6}", table.dsc_mean)),
            ("nll_mean", format!("{:.6}", table.nll_mean)),
            ("images", table.images.to_string()),
        ],
    )?;
    println!("evaluated {} images: DSC {:.4} +/- {:.4}, NLL {:.4}",
        table.images, table.dsc_mean, table.dsc_std, table.nll_mean);
    Ok(())
}

fn cmd_qc(config: &RunConfig, out_dir: &Path, cli: &Cli) -> Result<()> {
    let (evals, _net) = test_evals(config, cli, config.eval.fusion)?;
    std::fs::create_dir_all(out_dir)?;
    write_per_image_csv(out_dir, &evals)?;

    // High AULA means low uncertainty, so QC flags by negated AULA.
    let ids: Vec<String> = evals.iter().map(|e| e.id.clone()).collect();
    let unc: Vec<f64> = evals.iter().map(|e| -e.report.aula).collect();
    let dscs: Vec<f64> = evals.iter().map(|e| e.metrics.dsc).collect();
    let curve = experiments::qc_curve(&ids, &unc, &dscs, config.eval.poor_threshold, QC_GRID_POINTS)?;

    let mut out = csv_writer(out_dir, "qc-curve.csv")?;
    writeln!(out, "flag_fraction,remaining_poor,ideal,random_baseline")?;
    for i in 0..curve.flag_fractions.len() {
        writeln!(
            out,
            "{:.2},{:.6},{:.6},{:.6}",
            curve.flag_fractions[i], curve.remaining_poor[i], curve.ideal[i], curve.random_baseline[i]
        )?;
    }
    out.flush()?;

    let table = experiments::correlation_table(&evals)?;
    let mut out = csv_writer(out_dir, "correlation-table.csv")?;
    writeln!(out, "uncertainty_metric,segmentation_metric,spearman_rho,pairs")?;
    for row in &table {
        writeln!(
            out,
            "{},{},{},{}",
            row.uncertainty_metric,
            row.segmentation_metric,
            fmt_opt(row.rho),
            row.pairs
        )?;
    }
    out.flush()?;

    write_run_summary(
        out_dir,
        "qc",
        config,
        &[
            ("qc_auc", format!("{:.6}", curve.auc)),
            ("qc_ideal_auc", format!("{:.6}", curve.ideal_auc)),
            ("no_poor_cases", curve.no_poor_cases.to_string()),
        ],
    )?;
    if curve.no_poor_cases {
        println!("warning: no poor segmentations below DSC {}; QC curve is all zeros", config.eval.poor_threshold);
    }
    println!("QC AUC {:.4} (ideal {:.4})", curve.auc, curve.ideal_auc);
    Ok(())
}

fn cmd_pd(config: &RunConfig, out_dir: &Path, cli: &Cli) -> Result<()> {
    let net = load_model(config, cli)?;
    let dataset = data::generate(&config.data)?;
    let corruption = GaussianCorruption {
        mean: config.eval.corruption_mean,
        std: config.eval.corruption_std,
        seed: derive_seed(config.seed, 7777),
    };
    let histograms = experiments::pd_shift(
        &net,
        &dataset.test,
        corruption,
        &[0.0, 0.5, 1.0],
        config.eval.skip,
        config.eval.pd_threshold,
    )?;
    std::fs::create_dir_all(out_dir)?;
    let mut out = csv_writer(out_dir, "pd-histograms.csv")?;
    writeln!(out, "corruption_fraction,prediction_depth,count")?;
    for h in &histograms {
        for (pd, &count) in h.counts.iter().enumerate() {
            writeln!(out, "{:.1},{},{}", h.corruption_fraction, pd, count)?;
        }
    }
    out.flush()?;

    let means: Vec<String> = histograms
        .iter()
        .map(|h| format!("{:.1}:{:.4}", h.corruption_fraction, h.mean_pd))
        .collect();
    write_run_summary(out_dir, "pd", config, &[("mean_pd_per_fraction", means.join(" "))])?;
    println!("mean PD per corruption fraction: {}", means.join(", "));
    Ok(())
}

fn cmd_sweep_skip(config: &RunConfig, out_dir: &Path, cli: &Cli) -> Result<()> {
    let net = load_model(config, cli)?;
    let dataset = data::generate(&config.data)?;
    let skips: Vec<usize> = (0..config.model.num_heads()).collect();
    let rows = experiments::calibration_sweep(&net, &dataset.test, &skips)?;
    std::fs::create_dir_all(out_dir)?;
    let mut out = csv_writer(out_dir, "skip-sweep.csv")?;
    writeln!(out, "skip,dsc_mean,dsc_std,nll_mean,nll_std,is_plain")?;
    for r in &rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.skip, r.dsc_mean, r.dsc_std, r.nll_mean, r.nll_std, r.is_plain
        )?;
    }
    out.flush()?;

    let best = rows
        .iter()
        .min_by(|a, b| a.nll_mean.partial_cmp(&b.nll_mean).unwrap())
        .expect("at least one skip row");
    write_run_summary(
        out_dir,
        "sweep-skip",
        config,
        &[
            ("best_nll_skip", best.skip.to_string()),
            ("best_nll", format!("{:.6}", best.nll_mean)),
        ],
    )?;
    println!("best NLL {:.4} at skip {}", best.nll_mean, best.skip);
    Ok(())
}
