use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use causalfsfg::ablation::{prepare_data, run_ablation, test_plan};
use causalfsfg::checkpoint::{config_fingerprint, Checkpoint};
use causalfsfg::config::RunConfig;
use causalfsfg::cost::count_params_flops;
use causalfsfg::data::{sample_episode, AugmentMode, DatasetManifest, EpisodeBatch};
use causalfsfg::eval::evaluate;
use causalfsfg::frontdoor::{compare_effects, random_scm, DiscreteScm, EffectComparison};
use causalfsfg::heatmap::export_heatmaps;
use causalfsfg::report::{self, ReportRow};
use causalfsfg::rng::stream_rng;
use causalfsfg::train::{train, EpisodeLog, TrainOptions};
use causalfsfg::{Error, Execution, Result, Tensor};
use clap::{Args, Parser, Subcommand};

/// Few-shot fine-grained classification with causal interventions.
#[derive(Parser)]
#[command(name = "causalfsfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and keep the best-validation checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on test episodes.
    Eval {
        #[command(flatten)]
        run: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep per-episode accuracies in the JSON report.
        #[arg(long)]
        retain: bool,
    },
    /// Train and test the four module combinations.
    Ablate(ConfigArgs),
    /// Compare interventional truth, frontdoor and naive estimates on a
    /// discrete causal model.
    Oracle {
        /// SCM definition file; a random model is drawn when omitted.
        #[arg(long)]
        scm: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lower bound on CPT entries of random models.
        #[arg(long, default_value_t = 0.05)]
        floor: f64,
        /// Write the model that was used to this path.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Cost accounting and activation heatmaps.
    #[command(subcommand)]
    Inspect(Inspect),
    /// Write a dataset manifest for the configured data source.
    GenData {
        #[command(flatten)]
        run: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Parameter count, FLOPs and working set of one training episode.
    Cost(ConfigArgs),
    /// Heatmaps of every scale and of the fused feature for test samples.
    Heatmaps {
        #[command(flatten)]
        run: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Defaults to `<output dir>/heatmaps`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { run, checkpoint, retain } => cmd_eval(&run, &checkpoint, retain),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Oracle { scm, seed, floor, save } => cmd_oracle(scm.as_deref(), seed, floor, save.as_deref()),
        Command::Inspect(Inspect::Cost(args)) => {
            let cfg = args.load()?;
            print!("{}", count_params_flops(&cfg.model, cfg.train.train_episode).render());
            Ok(())
        }
        Command::Inspect(Inspect::Heatmaps { run, checkpoint, samples, out }) => {
            cmd_heatmaps(&run, &checkpoint, samples, out)
        }
        Command::GenData { run, out } => {
            let cfg = run.load()?;
            let data = cfg.data.source.load()?;
            DatasetManifest::describe(&data).write(&out)?;
            println!("{} images, {} classes -> {}", data.len(), data.classes().len(), out.display());
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn json_line(out: &mut impl Write, path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Parse {
        context: "log".into(),
        message: e.to_string(),
    })?;
    writeln!(out, "{line}").map_err(|e| io_error(path, e))
}

fn progress(every: usize) -> impl FnMut(&str, &EpisodeLog) {
    let mut sum = (0.0, 0.0, 0usize);
    move |label, e| {
        sum = (sum.0 + e.loss, sum.1 + e.accuracy, sum.2 + 1);
        if (e.episode + 1) % every == 0 {
            eprintln!(
                "{label} epoch {:>4}  lr {:.4}  loss {:.4}  acc {:.3}",
                e.epoch,
                e.lr,
                sum.0 / sum.2 as f64,
                sum.1 / sum.2 as f64
            );
            sum = (0.0, 0.0, 0);
        }
    }
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let dir = cfg.output_dir();
    cfg.echo()?;
    let (data, split) = prepare_data(&cfg)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let mut show = progress(cfg.train.episodes_per_epoch);
    let mut write_err = None;
    let opts = TrainOptions {
        exec: args.exec(),
        dump_dir: Some(dir.clone()),
    };
    let outcome = train(&cfg.model, &cfg.train, &data, &split, &opts, |e| {
        show("train", e);
        if write_err.is_none() {
            write_err = json_line(&mut log, &log_path, e).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.flush().map_err(|e| io_error(&log_path, e))?;

    let val_path = dir.join("validation.jsonl");
    let mut val = create(&val_path)?;
    for v in &outcome.validations {
        json_line(&mut val, &val_path, v)?;
    }
    val.flush().map_err(|e| io_error(&val_path, e))?;
    Checkpoint::from_model(&outcome.best, None, Some(outcome.best_epoch)).save(&dir.join("best.ckpt.json"))?;
    Checkpoint::from_model(&outcome.last, Some(&outcome.velocity), Some(cfg.train.epochs - 1))
        .save(&dir.join("last.ckpt.json"))?;
    println!("best epoch {} -> {}", outcome.best_epoch, dir.join("best.ckpt.json").display());
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, retain: bool) -> Result<()> {
    let cfg = args.load()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.ensure_compatible(&ckpt.model)?;
    let model = ckpt.to_model()?;
    let (data, split) = prepare_data(&cfg)?;
    let report = evaluate(
        &model,
        &data,
        &test_plan(&cfg, &split),
        args.exec(),
        &config_fingerprint(&ckpt.model),
        retain,
    )?;
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let path = dir.join("eval_report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse {
        context: "report".into(),
        message: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    let rows = [ReportRow::new(ckpt.model.ablation().label(), &report)];
    report::export(&rows, &dir, "eval", &cfg.output.formats)?;
    print!("{}", report::pretty(&rows));
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let dir = cfg.output_dir();
    cfg.echo()?;
    let (data, split) = prepare_data(&cfg)?;
    let opts = TrainOptions {
        exec: args.exec(),
        dump_dir: Some(dir.clone()),
    };
    let mut show = progress(cfg.train.episodes_per_epoch);
    let rows = run_ablation(&cfg, &data, &split, &opts, |a, e| show(a.label(), e))?;
    let table: Vec<ReportRow> = rows.iter().map(|r| r.to_report_row()).collect();
    report::export(&table, &dir, "ablation", &cfg.output.formats)?;
    print!("{}", report::pretty(&table));
    Ok(())
}

fn print_comparison(rows: &[EffectComparison]) {
    let fmt = |p: &[f64]| p.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ");
    for r in rows {
        println!("do(X={})", r.x0);
        println!("  truth      {}", fmt(r.truth.probs()));
        println!("  frontdoor  {}   max |diff| {:.3e}", fmt(r.frontdoor.probs()), r.frontdoor_error());
        println!("  naive      {}   TV {:.4}", fmt(r.naive.probs()), r.naive_bias());
    }
}

fn cmd_oracle(scm: Option<&Path>, seed: u64, floor: f64, save: Option<&Path>) -> Result<()> {
    let scm = match scm {
        Some(p) => DiscreteScm::load(p)?,
        None => random_scm(&mut stream_rng(seed, 0, 0), floor)?,
    };
    if let Some(p) = save {
        std::fs::write(p, scm.to_toml()?).map_err(|e| io_error(p, e))?;
    }
    let d = scm.domains();
    println!("domains C={} X={} M={} Y={}", d.c, d.x, d.m, d.y);
    print_comparison(&compare_effects(&scm)?);
    Ok(())
}

fn cmd_heatmaps(args: &ConfigArgs, checkpoint: &Path, samples: usize, out: Option<PathBuf>) -> Result<()> {
    let cfg = args.load()?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let (data, split) = prepare_data(&cfg)?;
    let way = samples.clamp(1, split.test.len());
    let mut rng = stream_rng(cfg.train.seed, 0, 0);
    let ep = sample_episode(&data, &split.test, way, 1, 1, &mut rng)?;
    let batch = EpisodeBatch::materialize(&ep, &data, &cfg.train.augment, AugmentMode::Test, &mut rng);
    let images: Tensor = batch.support;
    let dir = out.unwrap_or_else(|| cfg.output_dir().join("heatmaps"));
    let manifest = export_heatmaps(&model, &images, &dir)?;
    println!("{} files -> {}", manifest.entries.len(), dir.display());
    Ok(())
}
