use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semiovs::config::{ExperimentConfig, TeacherKind};
use semiovs::data_synth::load_manifest;
use semiovs::evalkit::{evaluate, render_report, run_sweep, LinePlot, Series};
use semiovs::experiment::{init_model, DatasetDir};
use semiovs::ovs_teacher::{generate_offline, OfflineSource, PseudoLabelStore};
use semiovs::trainer::{train, Checkpoint, MetricHistory, TeacherSource};
use semiovs::{Error, Result};

/// Semi-supervised segmentation with open-vocabulary pseudo-labels for
/// out-of-distribution images.
#[derive(Parser)]
#[command(name = "semiovs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, labels, the OOD corpus manifest and split files.
    Generate(Common),
    /// Pseudo-label the OOD corpus with the open-vocabulary teacher.
    Pseudolabel(Common),
    /// Train the student and write a checkpoint plus metric history.
    Train(Common),
    /// Score the trained checkpoint.
    Eval(EvalArgs),
    /// Retrain across a grid of settings and seeds, then write a report.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed; overrides `train.seed` (and `sweep.seeds` for sweeps).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to `output_dir` in the config, then `runs`.
    #[arg(long, env = "SEMIOVS_OUT")]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Held-out in-distribution scenes.
    Test,
    /// The labeled training scenes, scored against their training labels.
    Labeled,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

struct Context {
    cfg: ExperimentConfig,
    root: PathBuf,
    force: bool,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
            cfg.sweep.seeds = vec![seed];
        }
        let root = common
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Context {
            cfg,
            root,
            force: common.force,
        })
    }

    fn dataset(&self) -> DatasetDir {
        DatasetDir::new(self.root.join("dataset"))
    }

    fn pseudo_dir(&self) -> PathBuf {
        self.root.join("pseudolabels")
    }

    fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    /// Create a fresh output directory, refusing to touch a non-empty one
    /// unless `--force` was given.
    fn fresh_dir(&self, dir: &Path) -> Result<()> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            if !self.force {
                return Err(Error::Run(format!(
                    "{} already has outputs; pass --force to replace them",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        Ok(())
    }

    fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("config.resolved.toml"), self.cfg.to_toml())?;
        Ok(())
    }
}

fn cmd_generate(ctx: &Context) -> Result<()> {
    let dd = ctx.dataset();
    // validate before touching the filesystem
    ctx.cfg.validate()?;
    ctx.fresh_dir(&dd.root)?;
    let summary = dd.write(&ctx.cfg)?;
    ctx.snapshot(&dd.root)?;
    println!(
        "dataset: {} scenes, {} OOD, {} test, {} classes -> {}",
        summary.n_scenes,
        summary.n_ood,
        summary.n_test,
        summary.class_names.len(),
        dd.root.display()
    );
    for p in &summary.protocols {
        println!(
            "  {:<8} labeled {} (fine {}, coarse {}), unlabeled {}",
            p.protocol.name(),
            p.labeled,
            p.fine,
            p.coarse,
            p.unlabeled_in
        );
    }
    Ok(())
}

fn cmd_pseudolabel(ctx: &Context) -> Result<()> {
    let dd = ctx.dataset();
    let manifest_path = dd.manifest_path();
    if !manifest_path.exists() {
        return Err(Error::Run(format!(
            "no OOD manifest at {} (run `generate` first)",
            manifest_path.display()
        )));
    }
    let manifest = load_manifest(&manifest_path, ctx.cfg.data.max_pixels)?;
    let prompt_set = ctx.cfg.prompt_set()?;
    let embedder = ctx.cfg.embedder()?;
    let out = ctx.pseudo_dir();
    ctx.fresh_dir(&out)?;
    let summary = generate_offline(
        OfflineSource::Manifest(&manifest),
        &prompt_set,
        embedder.as_ref(),
        ctx.cfg.teacher.temperature,
        &out,
    )?;
    ctx.snapshot(&out)?;
    println!(
        "pseudo-labels: {} written, {} skipped, {} dropped by size filter, mean confidence {:.4} -> {}",
        summary.written,
        summary.skipped.len(),
        manifest.dropped,
        summary.mean_confidence,
        out.display()
    );
    for s in &summary.skipped {
        println!("  skipped {}: {}", s.id, s.reason);
    }
    Ok(())
}

fn cmd_train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = ctx.dataset().read(cfg)?;
    let needs_store = cfg.teacher.source == TeacherKind::Ovs && cfg.train.n_unlabeled_out > 0;
    let store = if needs_store {
        let ids = data.ood_ids();
        PseudoLabelStore::load_dir(&ctx.pseudo_dir(), ids.iter().map(String::as_str))?
    } else {
        PseudoLabelStore::new()
    };
    let teacher = match cfg.teacher.source {
        TeacherKind::Ovs => TeacherSource::Ovs(&store),
        TeacherKind::SelfTeacher => TeacherSource::SelfTeacher,
    };
    let out = ctx.train_dir();
    ctx.fresh_dir(&out)?;
    ctx.snapshot(&out)?;
    let mut model = init_model(cfg);
    let history = train(&mut model, &data.train_data(), teacher, &cfg.train)?;
    history.write_csv(&out.join("metrics.csv"))?;
    Checkpoint::from_model(&model, &cfg.hash(), cfg.train.epochs).save(&out.join("checkpoint.sovsckpt"))?;
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs: l_s {:.4}, l_u_in {:.4}, l_u_out {:.4}, masked in/out {:.3}/{:.3} -> {}",
            history.epochs.len(),
            last.l_s,
            last.l_u_in,
            last.l_u_out,
            last.masked_frac_in,
            last.masked_frac_out,
            out.display()
        );
    }
    Ok(())
}

fn loss_curve_plot(history: &MetricHistory) -> LinePlot {
    let series = |name: &str, f: fn(&semiovs::trainer::EpochMetrics) -> f64| Series {
        name: name.to_string(),
        points: history.epochs.iter().map(|m| (m.epoch as f64, f(m))).collect(),
    };
    LinePlot {
        title: "Training losses".into(),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        series: vec![
            series("l_s", |m| m.l_s),
            series("l_u_in", |m| m.l_u_in),
            series("l_u_out", |m| m.l_u_out),
        ],
        x_ticks: None,
    }
}

fn cmd_eval(ctx: &Context, split: Split) -> Result<()> {
    let cfg = &ctx.cfg;
    let train_dir = ctx.train_dir();
    let ckpt_path = train_dir.join("checkpoint.sovsckpt");
    if !ckpt_path.exists() {
        return Err(Error::Run(format!(
            "no checkpoint at {} (run `train` first)",
            ckpt_path.display()
        )));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if ckpt.config_hash != cfg.hash() {
        eprintln!("note: checkpoint was trained under config {}, current config is {}", ckpt.config_hash, cfg.hash());
    }
    let model = ckpt.to_model()?;
    let (name, samples) = match split {
        Split::Test => ("test", ctx.dataset().read_test(cfg.data.n_test)?),
        Split::Labeled => (
            "labeled",
            ctx.dataset()
                .read(cfg)?
                .labeled
                .into_iter()
                .map(|l| (l.image, l.label))
                .collect(),
        ),
    };
    let result = evaluate(&model, &samples)?.miou()?;

    let out = ctx.root.join("eval");
    ctx.fresh_dir(&out)?;
    ctx.snapshot(&out)?;
    let mut csv = String::from("split,mIoU");
    for c in &cfg.scene.in_class_names {
        csv.push_str(&format!(",iou_{c}"));
    }
    csv.push_str(&format!("\n{name},{:.6}", result.miou));
    for v in &result.per_class {
        csv.push(',');
        if let Some(v) = v {
            csv.push_str(&format!("{v:.6}"));
        }
    }
    csv.push('\n');
    fs::write(out.join("eval.csv"), csv)?;
    let metrics = train_dir.join("metrics.csv");
    if metrics.exists() {
        let history = MetricHistory::read_csv(&metrics)?;
        fs::write(out.join("loss_curves.svg"), loss_curve_plot(&history).to_svg())?;
    }
    println!("{name} mIoU {:.4} -> {}", result.miou, out.display());
    for (c, v) in cfg.scene.in_class_names.iter().zip(&result.per_class) {
        match v {
            Some(v) => println!("  {c:<12} {v:.4}"),
            None => println!("  {c:<12} absent"),
        }
    }
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let axis = cfg
        .sweep
        .axis
        .ok_or_else(|| Error::config("sweep.axis is not set"))?;
    semiovs::evalkit::parse_grid(axis, &cfg.sweep.grid)?;
    let out = ctx.root.join("sweep");
    ctx.fresh_dir(&out)?;
    ctx.snapshot(&out)?;
    match run_sweep(axis, &cfg.sweep.grid, cfg, &cfg.sweep.seeds) {
        Ok(result) => {
            render_report(&result, &out)?;
            println!("sweep over {}: {} runs -> {}", axis.name(), result.run_count(), out.display());
            for s in &result.settings {
                println!(
                    "  {:<14} median mIoU {:.4}  mean {:.4}",
                    s.setting.label(),
                    s.median_miou(),
                    s.mean_miou()
                );
            }
            Ok(())
        }
        Err(abort) => {
            if abort.partial.run_count() > 0 {
                render_report(&abort.partial, &out)?;
                eprintln!("partial results for {} runs kept in {}", abort.partial.run_count(), out.display());
            }
            Err(abort.error)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(&Context::new(c)?),
        Command::Pseudolabel(c) => cmd_pseudolabel(&Context::new(c)?),
        Command::Train(c) => cmd_train(&Context::new(c)?),
        Command::Eval(e) => cmd_eval(&Context::new(&e.common)?, e.split),
        Command::Sweep(c) => cmd_sweep(&Context::new(c)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
