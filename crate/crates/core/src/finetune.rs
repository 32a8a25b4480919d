//! Cross-entropy pretraining and the fine-tuning loop that penalizes
//! low-entropy samples drawn from the model's own implicit generator.
//!
//! Per mini-batch the fine-tuning loss is
//!
//! ```text
//! loss = mean_ID[-log q(y | x)] - mean_gen[H(q(. | x_gen))]
//! ```
//!
//! so minimizing it keeps ID samples classified while flattening the class
//! probabilities of the generated samples. Generated inputs are constants
//! on the tape; only the parameters receive gradients.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sgd_step, Tape, Tensor};
use crate::datasets::{gaussian_noise, Dataset};
use crate::discriminator::{
    confidence, cross_entropy, energy, softmax, softmax_entropy, Discriminator, LayerVars,
};
use crate::error::{Error, Result};
use crate::eval::EvalBundle;
use crate::sampler::{batch_seed, draw_batch, samples_to_tensor, LdsConfig};
use crate::seeding::{child_rng, stream};

/// Low-entropy percentages compared by [`k_sweep`] by default.
pub const DEFAULT_K_VALUES: [f64; 6] = [0.0, 0.01, 0.1, 0.4, 0.7, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    /// Langevin chains on the implicit generator.
    #[default]
    Lds,
    /// Clipped standard normal noise, the noise baseline.
    GaussianNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// The sampler reads the current parameters at every mini-batch.
    #[default]
    Live,
    /// The sampler reads a snapshot taken before fine-tuning starts.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Generated samples per ID sample in a mini-batch, in `[0, 1]`.
    pub k: f64,
    /// Learning rate.
    pub mu: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub source: SampleSource,
    pub teacher: TeacherMode,
    pub lds: LdsConfig,
    pub seed: u64,
    /// Run the chains of one mini-batch on the rayon pool. Results do not
    /// depend on this flag.
    pub parallel: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            k: 0.1,
            mu: 0.001,
            // Ten ID samples and, at K = 0.1, exactly one generated sample
            // per step.
            batch_size: 10,
            epochs: 30,
            source: SampleSource::Lds,
            teacher: TeacherMode::Live,
            lds: LdsConfig::default(),
            seed: 0,
            parallel: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::Precondition(format!("K must lie in [0, 1], got {}", self.k)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Precondition(format!("learning rate must be positive, got {}", self.mu)));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        self.lds.validate()
    }

    /// Generated samples per mini-batch: `round(b * K)`, at least one
    /// whenever `K > 0`.
    pub fn gen_count(&self) -> usize {
        if self.k == 0.0 {
            0
        } else {
            ((self.batch_size as f64 * self.k).round() as usize).max(1)
        }
    }
}

/// Learning rate as a function of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `initial / divisor^k` where `k` counts the milestones (fractions of
    /// the total epoch count) already reached.
    StepDecay {
        initial: f64,
        divisor: f64,
        milestones: Vec<f64>,
    },
}

impl LrSchedule {
    /// Starts at 0.1 and divides by 10 at 50% and 75% of training.
    pub fn standard() -> Self {
        LrSchedule::StepDecay {
            initial: 0.1,
            divisor: 10.0,
            milestones: vec![0.5, 0.75],
        }
    }

    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay {
                initial,
                divisor,
                milestones,
            } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch as f64 >= m * total as f64)
                    .count();
                initial / divisor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub gen_entropy: Option<f64>,
    pub gen_confidence: Option<f64>,
    pub gen_energy: Option<f64>,
    /// Accuracy on the ID mini-batches seen during the epoch, measured
    /// before each update.
    pub id_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Sampler chains executed over the whole run.
    pub chains_run: usize,
    /// Samples generated during the final epoch, for plotting.
    pub final_samples: Vec<Vec<f64>>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out = String::from("epoch,ce,gen_entropy,gen_conf,gen_energy,id_acc\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.ce,
                opt(r.gen_entropy),
                opt(r.gen_confidence),
                opt(r.gen_energy),
                r.id_accuracy
            );
        }
        out
    }
}

/// Loss nodes for one mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct FigLossNodes {
    pub loss: crate::autograd::Var,
    pub ce: crate::autograd::Var,
    pub id_logits: crate::autograd::Var,
    pub gen_logits: Option<crate::autograd::Var>,
    /// Per-sample entropies of the generated batch (`g x 1`).
    pub gen_entropy: Option<crate::autograd::Var>,
}

/// Records the fine-tuning loss. An empty or absent generated batch gives
/// plain cross-entropy.
pub fn fig_loss_nodes(
    tape: &mut Tape,
    model: &Discriminator,
    vars: &[LayerVars],
    id_x: &Tensor,
    id_y: &[usize],
    gen_x: Option<&Tensor>,
) -> Result<FigLossNodes> {
    let xv = tape.constant(id_x);
    let id_logits = model.forward_with(tape, vars, xv)?;
    let ce = cross_entropy(tape, id_logits, id_y)?;
    let gen_x = gen_x.filter(|g| g.numel() > 0);
    let Some(gen_x) = gen_x else {
        return Ok(FigLossNodes {
            loss: ce,
            ce,
            id_logits,
            gen_logits: None,
            gen_entropy: None,
        });
    };
    let gv = tape.constant(gen_x);
    let gen_logits = model.forward_with(tape, vars, gv)?;
    let h = softmax_entropy(tape, gen_logits)?;
    let mean_h = tape.mean(h);
    let loss = tape.sub(ce, mean_h)?;
    Ok(FigLossNodes {
        loss,
        ce,
        id_logits,
        gen_logits: Some(gen_logits),
        gen_entropy: Some(h),
    })
}

/// Value of the fine-tuning loss for one mini-batch.
pub fn fig_loss(model: &Discriminator, id_x: &Tensor, id_y: &[usize], gen_x: Option<&Tensor>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let nodes = fig_loss_nodes(&mut tape, model, &vars, id_x, id_y, gen_x)?;
    tape.check_finite()?;
    Ok(tape.scalar(nodes.loss))
}

#[derive(Debug, Clone, Default)]
struct StepStats {
    ce: f64,
    correct: usize,
    gen_entropy: Vec<f64>,
    gen_confidence: Vec<f64>,
    gen_energy: Vec<f64>,
}

/// One SGD step on the fine-tuning loss.
fn train_step(
    model: &mut Discriminator,
    id_x: &Tensor,
    id_y: &[usize],
    gen_x: Option<&Tensor>,
    lr: f64,
    energy_cfg: &crate::discriminator::EnergyConfig,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let nodes = fig_loss_nodes(&mut tape, model, &vars, id_x, id_y, gen_x)?;
    tape.backward(nodes.loss)?;

    let c = model.num_classes();
    let correct = tape
        .value(nodes.id_logits)
        .chunks(c)
        .zip(id_y)
        .filter(|(row, &y)| crate::autograd::argmax(row).0 == y)
        .count();
    let mut stats = StepStats {
        ce: tape.scalar(nodes.ce),
        correct,
        ..StepStats::default()
    };
    if let (Some(gl), Some(gh)) = (nodes.gen_logits, nodes.gen_entropy) {
        stats.gen_entropy = tape.value(gh).to_vec();
        for row in tape.value(gl).chunks(c) {
            stats.gen_confidence.push(confidence(&softmax(row)?));
            stats.gen_energy.push(energy(row, energy_cfg)?);
        }
    }

    model.export_grads(&tape, &vars)?;
    sgd_step(model.params_mut(), lr)?;
    Ok(stats)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn labels_of(data: &Dataset) -> Result<&[usize]> {
    data.labels()
        .ok_or_else(|| Error::Precondition(format!("dataset `{}` has no labels", data.name)))
}

/// Trains with mean cross-entropy over shuffled mini-batches. The shuffle
/// order is a function of `seed` alone.
pub fn pretrain(
    model: Discriminator,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    schedule: &LrSchedule,
    seed: u64,
) -> Result<(Discriminator, TrainLog)> {
    let cfg = FinetuneConfig {
        k: 0.0,
        batch_size,
        epochs,
        seed,
        ..FinetuneConfig::default()
    };
    run_loop(model, data, &cfg, |epoch| schedule.lr_at(epoch, epochs))
}

/// Fine-tunes a pretrained model against its own low-entropy samples.
pub fn finetune(model: Discriminator, data: &Dataset, cfg: &FinetuneConfig) -> Result<(Discriminator, TrainLog)> {
    cfg.validate()?;
    run_loop(model, data, cfg, |_| cfg.mu)
}

fn run_loop(
    mut model: Discriminator,
    data: &Dataset,
    cfg: &FinetuneConfig,
    lr_at: impl Fn(usize) -> f64,
) -> Result<(Discriminator, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Precondition("batch size must be at least 1".into()));
    }
    let labels = labels_of(data)?;
    if data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: vec![model.input_dim()],
            found: vec![data.dim()],
        });
    }
    let frozen = match cfg.teacher {
        TeacherMode::Frozen => Some(model.clone()),
        TeacherMode::Live => None,
    };
    let gen_count = cfg.gen_count();
    let dim = model.input_dim();
    let mut shuffle = child_rng(cfg.seed, stream::SHUFFLE, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch);
        order.shuffle(&mut shuffle);
        let (mut ce_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut gen_h = Vec::new();
        let mut gen_c = Vec::new();
        let mut gen_e = Vec::new();
        let last_epoch = epoch + 1 == cfg.epochs;
        if last_epoch {
            log.final_samples.clear();
        }

        for batch in order.chunks(cfg.batch_size) {
            let (bx, _) = data.batch(batch);
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let gen = if gen_count == 0 {
                None
            } else {
                Some(match cfg.source {
                    SampleSource::Lds => {
                        let teacher = frozen.as_ref().unwrap_or(&model);
                        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, step));
                        let samples = draw_batch(teacher, &cfg.lds, gen_count, &mut rng, cfg.parallel)
                            .map_err(|e| Error::Precondition(format!("epoch {epoch}: sampler failed: {e}")))?;
                        log.chains_run += samples.len();
                        samples_to_tensor(&samples, dim)?
                    }
                    SampleSource::GaussianNoise => {
                        let mut rng = child_rng(cfg.seed, stream::NOISE, step);
                        gaussian_noise(gen_count, dim, &mut rng)?
                    }
                })
            };
            if last_epoch {
                if let Some(g) = &gen {
                    log.final_samples
                        .extend((0..g.shape()[0]).map(|i| g.row(i).to_vec()));
                }
            }
            let stats = train_step(&mut model, &bx, &by, gen.as_ref(), lr, &cfg.lds.energy)
                .map_err(|e| match e {
                    Error::EnergyOverflow { .. } | Error::NonFinite { .. } => {
                        Error::Precondition(format!("epoch {epoch}: {e}"))
                    }
                    other => other,
                })?;
            ce_sum += stats.ce * by.len() as f64;
            correct += stats.correct;
            seen += by.len();
            gen_h.extend(stats.gen_entropy);
            gen_c.extend(stats.gen_confidence);
            gen_e.extend(stats.gen_energy);
            step += 1;
        }

        log.records.push(EpochRecord {
            epoch,
            ce: ce_sum / seen as f64,
            gen_entropy: mean(&gen_h),
            gen_confidence: mean(&gen_c),
            gen_energy: mean(&gen_e),
            id_accuracy: correct as f64 / seen as f64,
        });
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepRow {
    pub k: f64,
    /// Mean MSP AUROC over the bundle's OOD sets.
    pub auroc: f64,
    pub accuracy: f64,
}

/// Fine-tunes a fresh copy of `model` for every `K` and evaluates each with
/// the MSP detector.
pub fn k_sweep(
    model: &Discriminator,
    data: &Dataset,
    k_values: &[f64],
    base: &FinetuneConfig,
    bundle: &EvalBundle,
) -> Result<Vec<KSweepRow>> {
    if let Some(&bad) = k_values.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(Error::Precondition(format!("K value {bad} outside [0, 1]")));
    }
    k_values
        .iter()
        .map(|&k| {
            let cfg = FinetuneConfig { k, ..*base };
            let (tuned, _) = finetune(model.clone(), data, &cfg)?;
            let ev = bundle.evaluate_msp(&tuned)?;
            Ok(KSweepRow {
                k,
                auroc: ev.mean_auroc(),
                accuracy: ev.accuracy,
            })
        })
        .collect()
}
