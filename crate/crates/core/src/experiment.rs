//! Experiment configuration and the end-to-end pipeline: build data,
//! pretrain, evaluate, fine-tune each variant, evaluate again, and write
//! every artifact under one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::datasets::{
    gen_gaussian_mixture, gen_moons, gen_ood_ring, gen_uniform, load_csv, load_idx, Dataset, Split,
};
use crate::detectors::{default_odin_grid, msp_scores, write_scores_csv, SweepMode};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::eval::{EvalBundle, Evaluation};
use crate::finetune::{finetune, pretrain, FinetuneConfig, LrSchedule, SampleSource, TeacherMode, TrainLog};
use crate::metrics::{measure_throughput, results_markdown, write_results_csv, ResultRow};
use crate::plots::{write_confidence_energy_csv, write_embedding_csv};
use crate::seeding::{child_rng, derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IdSource {
    #[default]
    Moons,
    GaussianMixture,
    Csv,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticOod {
    Ring,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub source: IdSource,
    pub n_train: usize,
    pub n_test: usize,
    /// Jitter of the moons, or cluster std of the mixture.
    pub noise: f64,
    pub centers: Vec<Vec<f64>>,
    /// CSV file, or IDX image file for `source = "idx"`.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train_labels_path: Option<PathBuf>,
    pub test_labels_path: Option<PathBuf>,
    pub synthetic_ood: Vec<SyntheticOod>,
    pub n_ood: usize,
    pub ring_radius: f64,
    pub ring_width: f64,
    /// Extra OOD sets as CSV files without a label column.
    pub ood_paths: Vec<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: IdSource::Moons,
            n_train: 2000,
            n_test: 1000,
            noise: 0.1,
            centers: vec![vec![-0.5, -0.5], vec![0.5, 0.5]],
            train_path: None,
            test_path: None,
            train_labels_path: None,
            test_labels_path: None,
            synthetic_ood: vec![SyntheticOod::Ring, SyntheticOod::Uniform],
            n_ood: 1000,
            ring_radius: 0.9,
            ring_width: 0.1,
            ood_paths: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: crate::discriminator::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            schedule: LrSchedule::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSpec {
    /// One live-teacher LDS fine-tune per value.
    pub k_values: Vec<f64>,
    /// Also fine-tune with Gaussian noise at the first nonzero K.
    pub gaussian_baseline: bool,
    /// Also fine-tune with a frozen teacher at the first nonzero K.
    pub frozen_teacher: bool,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self {
            k_values: vec![0.1],
            gaussian_baseline: true,
            frozen_teacher: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub odin: bool,
    pub sweep_mode: SweepMode,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            odin: true,
            sweep_mode: SweepMode::PerOodSet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub checkpoints: bool,
    pub scores: bool,
    pub plots: bool,
    /// Wall-clock measurements go to their own file so metric tables stay
    /// reproducible.
    pub throughput: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            checkpoints: true,
            scores: true,
            plots: true,
            throughput: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub pretrain: PretrainSpec,
    /// `finetune.seed` is overwritten with a value derived from `seed`.
    pub finetune: FinetuneConfig,
    pub variants: VariantSpec,
    pub detector: DetectorSpec,
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with the derived fine-tuning seed filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.finetune.seed = derive_seed(self.seed, stream::SAMPLER, 0);
        c
    }

    /// Checks every field and referenced path before any computation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        let need_path = |p: &Option<PathBuf>, key: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("data.{key} is required for source {:?}", d.source))),
                Some(p) if !p.is_file() => Err(Error::Config(format!("data.{key}: {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match d.source {
            IdSource::Moons | IdSource::GaussianMixture => {
                if d.n_train < 2 || d.n_test < 2 {
                    return bad("data.n_train and data.n_test must be at least 2".into());
                }
                if d.source == IdSource::Moons && (!d.n_train.is_multiple_of(2) || !d.n_test.is_multiple_of(2)) {
                    return bad("moons need even data.n_train and data.n_test".into());
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return bad(format!("data.noise must be nonnegative, got {}", d.noise));
                }
                if d.source == IdSource::GaussianMixture && d.centers.len() < 2 {
                    return bad("data.centers needs at least two centers".into());
                }
            }
            IdSource::Csv => {
                need_path(&d.train_path, "train_path")?;
                need_path(&d.test_path, "test_path")?;
            }
            IdSource::Idx => {
                need_path(&d.train_path, "train_path")?;
                need_path(&d.test_path, "test_path")?;
                need_path(&d.train_labels_path, "train_labels_path")?;
                need_path(&d.test_labels_path, "test_labels_path")?;
            }
        }
        for p in &d.ood_paths {
            if !p.is_file() {
                return bad(format!("data.ood_paths: {} does not exist", p.display()));
            }
        }
        if d.synthetic_ood.is_empty() && d.ood_paths.is_empty() {
            return bad("at least one OOD set is required".into());
        }
        if !d.synthetic_ood.is_empty() {
            if d.n_ood == 0 {
                return bad("data.n_ood must be positive".into());
            }
            if !(d.ring_radius > 0.0 && d.ring_radius <= 1.0) || !(d.ring_width >= 0.0) {
                return bad("data.ring_radius must lie in (0, 1] and data.ring_width be nonnegative".into());
            }
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be positive".into());
        }
        if self.pretrain.batch_size == 0 {
            return bad("pretrain.batch_size must be positive".into());
        }
        if let LrSchedule::StepDecay { initial, divisor, milestones } = &self.pretrain.schedule {
            if !(*initial > 0.0) || !(*divisor > 0.0) || milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return bad("pretrain.schedule needs positive initial and divisor and milestones in [0, 1]".into());
            }
        }
        self.finetune
            .validate()
            .map_err(|e| Error::Config(format!("finetune: {e}")))?;
        if self.variants.k_values.is_empty() {
            return bad("variants.k_values must not be empty".into());
        }
        if let Some(k) = self.variants.k_values.iter().find(|k| !(0.0..=1.0).contains(*k)) {
            return bad(format!("variants.k_values: {k} outside [0, 1]"));
        }
        Ok(())
    }
}

/// Training data and evaluation sets of one experiment.
#[derive(Debug, Clone)]
pub struct Suite {
    pub train: Dataset,
    pub bundle: EvalBundle,
    pub num_classes: usize,
}

impl Suite {
    pub fn model_dims(&self, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![self.train.dim()];
        dims.extend_from_slice(hidden);
        dims.push(self.num_classes);
        dims
    }
}

pub fn build_suite(cfg: &ExperimentConfig) -> Result<Suite> {
    let d = &cfg.data;
    let s = cfg.seed;
    let (train, test) = match d.source {
        IdSource::Moons => (
            gen_moons(d.n_train, d.noise, &mut child_rng(s, stream::DATA_TRAIN, 0))?,
            gen_moons(d.n_test, d.noise, &mut child_rng(s, stream::DATA_TEST, 0))?,
        ),
        IdSource::GaussianMixture => (
            gen_gaussian_mixture(d.n_train, &d.centers, d.noise, &mut child_rng(s, stream::DATA_TRAIN, 0))?,
            gen_gaussian_mixture(d.n_test, &d.centers, d.noise, &mut child_rng(s, stream::DATA_TEST, 0))?,
        ),
        IdSource::Csv => (
            load_csv(d.train_path.as_deref().ok_or(Error::Config("data.train_path missing".into()))?)?,
            load_csv(d.test_path.as_deref().ok_or(Error::Config("data.test_path missing".into()))?)?,
        ),
        IdSource::Idx => (
            load_idx(
                d.train_path.as_deref().ok_or(Error::Config("data.train_path missing".into()))?,
                d.train_labels_path.as_deref(),
            )?,
            load_idx(
                d.test_path.as_deref().ok_or(Error::Config("data.test_path missing".into()))?,
                d.test_labels_path.as_deref(),
            )?,
        ),
    };
    let train = train.with_split(Split::IdTrain);
    let test = test.with_split(Split::IdTest);
    let labels = train
        .labels()
        .ok_or_else(|| Error::Precondition("training data needs labels".into()))?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(Error::Precondition("training data needs at least two classes".into()));
    }
    if test.labels().is_some_and(|l| l.iter().any(|&y| y >= num_classes)) {
        return Err(Error::Precondition("test labels exceed the training classes".into()));
    }

    let mut oods = Vec::new();
    for (i, kind) in d.synthetic_ood.iter().enumerate() {
        let mut r = child_rng(s, stream::DATA_OOD, i as u64);
        oods.push(match kind {
            SyntheticOod::Ring => gen_ood_ring(d.n_ood, d.ring_radius, d.ring_width, &mut r)?,
            SyntheticOod::Uniform => gen_uniform(d.n_ood, train.dim(), &mut r)?,
        });
    }
    for p in &d.ood_paths {
        let mut ds = load_csv(p)?.with_split(Split::Ood);
        ds.name = p
            .file_stem()
            .map_or_else(|| "ood".into(), |s| s.to_string_lossy().into_owned());
        oods.push(ds);
    }
    Ok(Suite {
        train,
        bundle: EvalBundle::new(test, oods)?,
        num_classes,
    })
}

pub fn pretrain_standard(cfg: &ExperimentConfig, suite: &Suite) -> Result<(Discriminator, TrainLog)> {
    let dims = suite.model_dims(&cfg.model.hidden);
    let model = Discriminator::new(&dims, &mut child_rng(cfg.seed, stream::INIT, 0))?;
    pretrain(
        model,
        &suite.train,
        cfg.pretrain.epochs,
        cfg.pretrain.batch_size,
        &cfg.pretrain.schedule,
        derive_seed(cfg.seed, stream::SHUFFLE, 0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Fig { k: f64 },
    Gaussian { k: f64 },
    FrozenTeacher { k: f64 },
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Fig { k } => format!("fig-k{k}"),
            Variant::Gaussian { k } => format!("gs-k{k}"),
            Variant::FrozenTeacher { k } => format!("fig-frozen-k{k}"),
        }
    }

    /// Fine-tuning settings for this variant under a resolved config.
    pub fn config(&self, cfg: &ExperimentConfig) -> FinetuneConfig {
        let base = cfg.resolved().finetune;
        match *self {
            Variant::Fig { k } => FinetuneConfig {
                k,
                source: SampleSource::Lds,
                teacher: TeacherMode::Live,
                ..base
            },
            Variant::Gaussian { k } => FinetuneConfig {
                k,
                source: SampleSource::GaussianNoise,
                ..base
            },
            Variant::FrozenTeacher { k } => FinetuneConfig {
                k,
                source: SampleSource::Lds,
                teacher: TeacherMode::Frozen,
                ..base
            },
        }
    }
}

pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = cfg.variants.k_values.iter().map(|&k| Variant::Fig { k }).collect();
    if let Some(&k) = cfg.variants.k_values.iter().find(|&&k| k > 0.0) {
        if cfg.variants.frozen_teacher {
            out.push(Variant::FrozenTeacher { k });
        }
        if cfg.variants.gaussian_baseline {
            out.push(Variant::Gaussian { k });
        }
    }
    out
}

pub fn run_variant(
    cfg: &ExperimentConfig,
    standard: &Discriminator,
    suite: &Suite,
    variant: Variant,
) -> Result<(Discriminator, TrainLog)> {
    finetune(standard.clone(), &suite.train, &variant.config(cfg))
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub artifacts: Vec<PathBuf>,
}

struct Artifacts {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(p, text)?;
        Ok(())
    }
}

fn eval_rows(name: &str, ev: &Evaluation) -> Vec<ResultRow> {
    ev.per_ood
        .iter()
        .map(|(ood, auroc)| ResultRow {
            experiment: name.to_string(),
            ood_set: ood.clone(),
            detector: ev.detector.clone(),
            auroc: *auroc,
            accuracy: ev.accuracy,
        })
        .collect()
}

fn evaluate_all(
    cfg: &ExperimentConfig,
    name: &str,
    model: &Discriminator,
    suite: &Suite,
    art: &mut Artifacts,
) -> Result<Vec<ResultRow>> {
    let msp = suite.bundle.evaluate_msp(model)?;
    let mut rows = eval_rows(name, &msp);
    if cfg.output.scores {
        let id = msp_scores(model, suite.bundle.id_test.inputs())?;
        for ood in &suite.bundle.oods {
            let s = msp_scores(model, ood.inputs())?;
            let p = art.path(&format!("scores/{name}_msp_{}.csv", ood.name))?;
            write_scores_csv(&id, &s, &p)?;
        }
    }
    if cfg.detector.odin {
        let odin = suite
            .bundle
            .evaluate_odin(model, &default_odin_grid(), cfg.detector.sweep_mode)?;
        rows.extend(eval_rows(name, &odin));
    }
    Ok(rows)
}

/// One table row per OOD set and detector with one AUROC column per model.
pub fn comparison_csv(rows: &[ResultRow]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !models.contains(&r.experiment.as_str()) {
            models.push(&r.experiment);
        }
        let key = (r.ood_set.as_str(), r.detector.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = String::from("ood_set,detector");
    for m in &models {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    for (ood, det) in keys {
        let _ = write!(out, "{ood},{det}");
        for m in &models {
            let cell = rows
                .iter()
                .find(|r| r.experiment == *m && r.ood_set == ood && r.detector == det)
                .map_or_else(String::new, |r| r.auroc.to_string());
            let _ = write!(out, ",{cell}");
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    package: &'a str,
    version: &'a str,
    checkpoint_format: u32,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run: RunInfo<'a>,
    config: &'a ExperimentConfig,
}

/// TOML document with the run description and the resolved config.
pub fn manifest(command: &str, cfg: &ExperimentConfig, artifacts: &[PathBuf]) -> String {
    let m = Manifest {
        run: RunInfo {
            command,
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: crate::checkpoint::FORMAT_VERSION,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        },
        config: cfg,
    };
    toml::to_string(&m).expect("manifest serializes")
}

/// Recovers the resolved config from a manifest written by [`manifest`].
pub fn config_from_manifest(text: &str) -> Result<ExperimentConfig> {
    #[derive(Deserialize)]
    struct M {
        config: ExperimentConfig,
    }
    toml::from_str::<M>(text)
        .map(|m| m.config)
        .map_err(|e| Error::Config(format!("manifest: {e}")))
}

/// Runs the whole pipeline. Each stage's failure is tagged with the stage
/// name; files written by earlier stages stay on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    fs::create_dir_all(out_dir)?;
    let mut art = Artifacts {
        root: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    art.write("config.toml", &cfg.to_toml())?;
    let mut throughput = String::from("stage,items,seconds,per_second\n");

    let suite = build_suite(&cfg).map_err(|e| e.at_stage("data"))?;

    let ((standard, pre_log), t) =
        measure_throughput(suite.train.len() * cfg.pretrain.epochs.max(1), || pretrain_standard(&cfg, &suite))
            .map_err(|e| e.at_stage("pretrain"))?;
    let _ = writeln!(throughput, "pretrain,{},{},{}", t.items, t.seconds, t.per_second);
    art.write("logs/pretrain.csv", &pre_log.to_csv())?;
    let seed_meta = |command: &str, epoch: usize| CheckpointMeta {
        command: command.into(),
        seed: cfg.seed,
        epoch: epoch as u64,
        rng_summary: derive_seed(cfg.seed, stream::INIT, 0),
    };
    if cfg.output.checkpoints {
        let p = art.path("checkpoints/standard.ckpt")?;
        save_checkpoint(&standard, &seed_meta("run:pretrain", cfg.pretrain.epochs), &p)
            .map_err(|e| e.at_stage("pretrain"))?;
    }

    let mut rows = evaluate_all(&cfg, "standard", &standard, &suite, &mut art)
        .map_err(|e| e.at_stage("evaluate-standard"))?;

    for variant in variants(&cfg) {
        let name = variant.name();
        let vcfg = variant.config(&cfg);
        let ((tuned, log), t) = measure_throughput(suite.train.len() * vcfg.epochs.max(1), || {
            run_variant(&cfg, &standard, &suite, variant)
        })
        .map_err(|e| e.at_stage("finetune"))?;
        let _ = writeln!(throughput, "finetune:{name},{},{},{}", t.items, t.seconds, t.per_second);
        art.write(&format!("logs/{name}.csv"), &log.to_csv())?;
        if cfg.output.checkpoints {
            let p = art.path(&format!("checkpoints/{name}.ckpt"))?;
            save_checkpoint(&tuned, &seed_meta(&format!("run:{name}"), vcfg.epochs), &p)
                .map_err(|e| e.at_stage("finetune"))?;
        }
        if cfg.output.plots {
            let p = art.path(&format!("plots/confidence_energy_{name}.csv"))?;
            write_confidence_energy_csv(&log, &p)?;
            let p = art.path(&format!("plots/embedding_{name}.csv"))?;
            write_embedding_csv(&suite.bundle.id_test, &log.final_samples, &p)?;
        }
        rows.extend(
            evaluate_all(&cfg, &name, &tuned, &suite, &mut art).map_err(|e| e.at_stage("evaluate-finetuned"))?,
        );
    }

    let metrics_path = art.path("metrics.csv")?;
    write_results_csv(&rows, &metrics_path).map_err(|e| e.at_stage("report"))?;
    art.write("comparison.csv", &comparison_csv(&rows))?;
    art.write("metrics.md", &results_markdown(&rows))?;
    if cfg.output.throughput {
        art.write("throughput.csv", &throughput)?;
    }
    let listed = art.written.clone();
    fs::write(out_dir.join("manifest.toml"), manifest("run", &cfg, &listed))?;
    Ok(ExperimentSummary {
        out_dir: out_dir.to_path_buf(),
        rows,
        artifacts: listed,
    })
}
