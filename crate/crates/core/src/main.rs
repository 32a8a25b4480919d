use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fig_core::checkpoint::{load_checkpoint_with_dims, save_checkpoint, CheckpointMeta, load_checkpoint};
use fig_core::datasets::{load_csv, Dataset, Split};
use fig_core::detectors::{default_odin_grid, msp_scores, odin_scores, read_scores_csv, write_scores_csv, OdinConfig};
use fig_core::discriminator::Discriminator;
use fig_core::eval::EvalBundle;
use fig_core::experiment::{build_suite, manifest, pretrain_standard, run_experiment, ExperimentConfig, Suite};
use fig_core::finetune::{finetune, k_sweep, SampleSource, TeacherMode, DEFAULT_K_VALUES};
use fig_core::metrics::{auroc, harmonic_mean, measure_throughput};
use fig_core::plots::{confidence_grid_csv, embedding_csv, samples_csv, trajectories_csv, write_confidence_energy_csv};
use fig_core::sampler::{draw_batch_recorded, LdsConfig};
use fig_core::seeding::{child_rng, derive_seed, stream};
use fig_core::Error;

#[derive(Parser, Debug)]
#[command(name = "fig", version, about = "Entropy fine-tuning of classifiers against self-generated OOD samples")]
struct Cli {
    /// Base seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier with cross-entropy on the configured ID data.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint with the entropy penalty.
    Finetune(FinetuneArgs),
    /// Run Langevin chains on a checkpoint.
    Sample {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 100)]
        chains: usize,
        #[arg(long, default_value_t = 100)]
        t_max: usize,
    },
    /// Score ID and OOD data with MSP or ODIN.
    Detect(DetectArgs),
    /// Compute AUROC from score CSVs, no model needed.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
    },
    /// Fine-tune once per K value and report AUROC and accuracy.
    SweepK {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<f64>>,
    },
    /// Full pipeline: pretrain, evaluate, fine-tune variants, evaluate.
    Run,
    /// Write plot series for a checkpoint.
    EmitPlots {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 20)]
        chains: usize,
        #[arg(long, default_value_t = 10_000)]
        t_max: usize,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
}

#[derive(Args, Debug)]
struct ModelArg {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    #[arg(long, value_enum)]
    teacher: Option<TeacherArg>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "msp")]
    detector: DetectorArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.0)]
    perturb_eps: f64,
    /// Sweep the full ODIN grid and report the table.
    #[arg(long)]
    sweep: bool,
    /// Labeled ID CSV; defaults to the configured test set.
    #[arg(long)]
    id: Option<PathBuf>,
    /// OOD CSVs; default to the configured OOD sets.
    #[arg(long, num_args = 1..)]
    ood: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SourceArg {
    Lds,
    GaussianNoise,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TeacherArg {
    Live,
    Frozen,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum DetectorArg {
    Msp,
    Odin,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    written: Vec<PathBuf>,
}

impl Ctx {
    fn write(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    fn finish(&self) -> Result<()> {
        let argv: Vec<String> = std::env::args().skip(1).collect();
        fs::write(self.out.join("manifest.toml"), manifest(&argv.join(" "), &self.cfg, &self.written))?;
        Ok(())
    }

    fn meta(&self, command: &str, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            command: command.into(),
            seed: self.cfg.seed,
            epoch: epoch as u64,
            rng_summary: derive_seed(self.cfg.seed, stream::INIT, 0),
        }
    }

    fn suite(&self) -> Result<Suite> {
        Ok(build_suite(&self.cfg)?)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Discriminator> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

fn check_input_dim(model: &Discriminator, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: vec![model.input_dim()],
            found: vec![data.dim()],
        }
        .into());
    }
    Ok(())
}

fn run(cli: Cli, cfg: ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut ctx = Ctx {
        cfg: cfg.resolved(),
        out: cli.out_dir.clone(),
        written: Vec::new(),
    };
    match cli.command {
        Command::Pretrain { epochs } => {
            if let Some(e) = epochs {
                ctx.cfg.pretrain.epochs = e;
            }
            let suite = ctx.suite()?;
            let (model, log) = pretrain_standard(&ctx.cfg, &suite)?;
            ctx.write("logs/pretrain.csv", &log.to_csv())?;
            let p = ctx.path("standard.ckpt")?;
            save_checkpoint(&model, &ctx.meta("pretrain", ctx.cfg.pretrain.epochs), &p)?;
            let ev = suite.bundle.evaluate_msp(&model)?;
            println!("test accuracy {:.4}, mean MSP AUROC {:.4}", ev.accuracy, ev.mean_auroc());
            println!("checkpoint: {}", p.display());
        }
        Command::Finetune(a) => {
            let ft = &mut ctx.cfg.finetune;
            if let Some(k) = a.k {
                ft.k = k;
            }
            if let Some(e) = a.epochs {
                ft.epochs = e;
            }
            if let Some(s) = a.source {
                ft.source = match s {
                    SourceArg::Lds => SampleSource::Lds,
                    SourceArg::GaussianNoise => SampleSource::GaussianNoise,
                };
            }
            if let Some(t) = a.teacher {
                ft.teacher = match t {
                    TeacherArg::Live => TeacherMode::Live,
                    TeacherArg::Frozen => TeacherMode::Frozen,
                };
            }
            ft.validate().map_err(|e| Error::Config(format!("finetune: {e}")))?;
            let suite = ctx.suite()?;
            let dims = suite.model_dims(&ctx.cfg.model.hidden);
            let model = load_checkpoint_with_dims(&a.model.checkpoint, &dims)
                .with_context(|| format!("loading checkpoint {}", a.model.checkpoint.display()))?
                .model;
            let before = suite.bundle.evaluate_msp(&model)?;
            let (tuned, log) = finetune(model, &suite.train, &ctx.cfg.finetune)?;
            let after = suite.bundle.evaluate_msp(&tuned)?;
            ctx.write("logs/finetune.csv", &log.to_csv())?;
            let p = ctx.path("plots/confidence_energy.csv")?;
            write_confidence_energy_csv(&log, &p)?;
            ctx.write("plots/embedding.csv", &embedding_csv(&suite.bundle.id_test, &log.final_samples)?)?;
            let p = ctx.path("finetuned.ckpt")?;
            save_checkpoint(&tuned, &ctx.meta("finetune", ctx.cfg.finetune.epochs), &p)?;
            println!(
                "mean MSP AUROC {:.4} -> {:.4}, accuracy {:.4} -> {:.4}",
                before.mean_auroc(),
                after.mean_auroc(),
                before.accuracy,
                after.accuracy
            );
        }
        Command::Sample { model, chains, t_max } => {
            let m = load_model(&model.checkpoint)?;
            let lds = LdsConfig {
                t_max,
                ..ctx.cfg.finetune.lds
            };
            lds.validate().map_err(|e| Error::Config(format!("sampler: {e}")))?;
            ctx.cfg.finetune.lds = lds;
            let mut rng = child_rng(ctx.cfg.seed, stream::SAMPLER, u64::MAX);
            let (samples, t) = measure_throughput(chains.max(1), || {
                draw_batch_recorded(&m, &lds, chains, &mut rng, true, true)
            })?;
            ctx.write("samples.csv", &samples_csv(&samples))?;
            ctx.write("trajectory.csv", &trajectories_csv(&samples))?;
            ctx.write(
                "throughput.csv",
                &format!("items,seconds,per_second\n{},{},{}\n", t.items, t.seconds, t.per_second),
            )?;
            println!("{} chains, {:.1} samples/s", samples.len(), t.per_second);
        }
        Command::Detect(a) => detect(&mut ctx, a)?,
        Command::Eval { scores } => {
            let mut out = String::from("file,auroc,n_id,n_ood\n");
            for p in &scores {
                let (id, ood) = read_scores_csv(p)?;
                let r = auroc(&id, &ood)?;
                let _ = writeln!(out, "{},{},{},{}", p.display(), r.auroc, r.n_id, r.n_ood);
                println!("{}: AUROC {:.6}", p.display(), r.auroc);
            }
            ctx.write("eval.csv", &out)?;
        }
        Command::SweepK { checkpoint, k_values } => {
            let ks = k_values.unwrap_or_else(|| DEFAULT_K_VALUES.to_vec());
            if let Some(k) = ks.iter().find(|k| !(0.0..=1.0).contains(*k)) {
                return Err(Error::Config(format!("K value {k} outside [0, 1]")).into());
            }
            let suite = ctx.suite()?;
            let model = match checkpoint {
                Some(p) => {
                    load_checkpoint_with_dims(&p, &suite.model_dims(&ctx.cfg.model.hidden))
                        .with_context(|| format!("loading checkpoint {}", p.display()))?
                        .model
                }
                None => pretrain_standard(&ctx.cfg, &suite)?.0,
            };
            let rows = k_sweep(&model, &suite.train, &ks, &ctx.cfg.finetune, &suite.bundle)?;
            let mut out = String::from("k,auroc,accuracy,harmonic_mean\n");
            for r in &rows {
                let _ = writeln!(out, "{},{},{},{}", r.k, r.auroc, r.accuracy, harmonic_mean(r.auroc, r.accuracy));
                println!("K={}: AUROC {:.4}, accuracy {:.4}", r.k, r.auroc, r.accuracy);
            }
            ctx.write("k_sweep.csv", &out)?;
        }
        Command::Run => {
            let summary = run_experiment(&ctx.cfg, &ctx.out)?;
            print!("{}", fig_core::metrics::results_markdown(&summary.rows));
            return Ok(());
        }
        Command::EmitPlots {
            model,
            chains,
            t_max,
            resolution,
        } => {
            let m = load_model(&model.checkpoint)?;
            let lds = LdsConfig {
                t_max,
                ..ctx.cfg.finetune.lds
            };
            lds.validate().map_err(|e| Error::Config(format!("sampler: {e}")))?;
            ctx.cfg.finetune.lds = lds;
            ctx.write("plots/confidence_grid.csv", &confidence_grid_csv(&m, resolution, &lds.energy)?)?;
            let mut rng = child_rng(ctx.cfg.seed, stream::SAMPLER, u64::MAX - 1);
            let samples = draw_batch_recorded(&m, &lds, chains, &mut rng, true, true)?;
            ctx.write("plots/trajectory.csv", &trajectories_csv(&samples))?;
            let suite = ctx.suite()?;
            check_input_dim(&m, &suite.bundle.id_test)?;
            let gen: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
            ctx.write("plots/embedding.csv", &embedding_csv(&suite.bundle.id_test, &gen)?)?;
        }
    }
    ctx.finish()
}

fn detect(ctx: &mut Ctx, a: DetectArgs) -> Result<()> {
    let m = load_model(&a.model.checkpoint)?;
    let bundle = match (&a.id, a.ood.is_empty()) {
        (Some(id), false) => {
            let id = load_csv(id)?.with_split(Split::IdTest);
            let oods = a
                .ood
                .iter()
                .map(|p| {
                    let mut d = load_csv(p)?.with_split(Split::Ood);
                    d.name = p.file_stem().map_or_else(|| "ood".into(), |s| s.to_string_lossy().into_owned());
                    Ok(d)
                })
                .collect::<Result<Vec<_>, Error>>()?;
            EvalBundle::new(id, oods)?
        }
        (None, true) => ctx.suite()?.bundle,
        _ => return Err(Error::Config("--id and --ood must be given together".into()).into()),
    };
    check_input_dim(&m, &bundle.id_test)?;
    if a.sweep {
        let grid = default_odin_grid();
        let mut out = String::from("ood_set,temperature,perturb_eps,auroc\n");
        for ood in &bundle.oods {
            let r = fig_core::detectors::detector_sweep(&m, &bundle.id_test, ood, &grid)?;
            for (c, au) in &r.table {
                let _ = writeln!(out, "{},{},{},{}", ood.name, c.temperature, c.perturb_eps, au);
            }
            println!(
                "{}: best T={} eps={} AUROC {:.4}",
                ood.name, r.best.temperature, r.best.perturb_eps, r.best_auroc
            );
        }
        ctx.write("odin_sweep.csv", &out)?;
        return Ok(());
    }
    let score = |x: &fig_core::autograd::Tensor| -> Result<Vec<f64>> {
        Ok(match a.detector {
            DetectorArg::Msp => msp_scores(&m, x)?,
            DetectorArg::Odin => {
                let cfg = OdinConfig::new(a.temperature, a.perturb_eps).map_err(|e| Error::Config(e.to_string()))?;
                odin_scores(&m, x, &cfg)?
            }
        })
    };
    let id = score(bundle.id_test.inputs())?;
    let name = if a.detector == DetectorArg::Msp { "msp" } else { "odin" };
    for ood in &bundle.oods {
        let s = score(ood.inputs())?;
        let p = ctx.path(&format!("scores/{name}_{}.csv", ood.name))?;
        write_scores_csv(&id, &s, &p)?;
        println!("{}: AUROC {:.6}", ood.name, auroc(&id, &s)?.auroc);
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
    });
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
