//! Post-hoc OOD scores: maximum softmax probability and ODIN
//! (temperature scaling plus a small confidence-raising input perturbation).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::datasets::Dataset;
use crate::discriminator::{confidence, log_softmax, softmax, Discriminator};
use crate::error::{Error, Result};
use crate::metrics::auroc;

/// Temperatures searched by the ODIN sweep.
pub const ODIN_TEMPERATURES: [f64; 10] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
/// Number of evenly spaced perturbation magnitudes in `[0, ODIN_MAX_EPS]`.
pub const ODIN_EPS_STEPS: usize = 21;
pub const ODIN_MAX_EPS: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdinConfig {
    pub temperature: f64,
    pub perturb_eps: f64,
}

impl OdinConfig {
    pub fn new(temperature: f64, perturb_eps: f64) -> Result<Self> {
        let cfg = Self {
            temperature,
            perturb_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Precondition(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.perturb_eps >= 0.0 && self.perturb_eps.is_finite()) {
            return Err(Error::Precondition(format!(
                "perturbation magnitude must be nonnegative, got {}",
                self.perturb_eps
            )));
        }
        Ok(())
    }
}

/// The full temperature x magnitude grid, temperature-major.
pub fn default_odin_grid() -> Vec<OdinConfig> {
    ODIN_TEMPERATURES
        .iter()
        .flat_map(|&temperature| {
            (0..ODIN_EPS_STEPS).map(move |i| OdinConfig {
                temperature,
                perturb_eps: ODIN_MAX_EPS * i as f64 / (ODIN_EPS_STEPS - 1) as f64,
            })
        })
        .collect()
}

/// Maximum softmax probability per row; higher means more ID-like.
pub fn msp_scores(model: &Discriminator, x: &Tensor) -> Result<Vec<f64>> {
    let logits = model.logits(x)?;
    logits
        .data()
        .chunks(model.num_classes())
        .map(|row| softmax(row).map(|p| confidence(&p)))
        .collect()
}

pub fn msp_score(model: &Discriminator, x: &[f64]) -> Result<f64> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(msp_scores(model, &t)?[0])
}

/// Gradient of `sum_rows log max softmax(f(x) / T)` with respect to `x`.
/// Rows are independent, so row `i` of the result is the per-input gradient.
fn log_max_softmax_grad(model: &Discriminator, x: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let xv = tape.input(n, d, x.data().to_vec(), true)?;
    let logits = model.forward_with(&mut tape, &vars, xv)?;
    let scaled = tape.div_scalar(logits, temperature);
    let logp = log_softmax(&mut tape, scaled)?;
    let top = tape.max_rows(logp)?;
    let total = tape.sum(top);
    tape.backward(total)?;
    Ok(tape.grad(xv).expect("input tracks gradients").to_vec())
}

/// Max of the temperature-scaled softmax per row.
fn scaled_confidences(model: &Discriminator, x: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    let logits = model.logits(x)?;
    logits
        .data()
        .chunks(model.num_classes())
        .map(|row| {
            let scaled: Vec<f64> = row.iter().map(|f| f / temperature).collect();
            softmax(&scaled).map(|p| confidence(&p))
        })
        .collect()
}

/// `x' = clip(x - eps * sign(-grad), -1, 1)`: a step toward higher
/// confidence.
fn perturb(x: &Tensor, grad: &[f64], eps: f64) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| {
            let s = if g < 0.0 {
                1.0
            } else if g > 0.0 {
                -1.0
            } else {
                0.0
            };
            (v - eps * s).clamp(-1.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn odin_from_grad(model: &Discriminator, x: &Tensor, grad: Option<&[f64]>, cfg: &OdinConfig) -> Result<Vec<f64>> {
    match grad {
        Some(g) if cfg.perturb_eps > 0.0 => {
            let xp = perturb(x, g, cfg.perturb_eps)?;
            scaled_confidences(model, &xp, cfg.temperature)
        }
        _ => scaled_confidences(model, x, cfg.temperature),
    }
}

/// ODIN score per row of `x`.
pub fn odin_scores(model: &Discriminator, x: &Tensor, cfg: &OdinConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let grad = if cfg.perturb_eps > 0.0 {
        let g = log_max_softmax_grad(model, x, cfg.temperature)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "odin_gradient",
                node: 0,
            });
        }
        Some(g)
    } else {
        None
    };
    odin_from_grad(model, x, grad.as_deref(), cfg)
}

pub fn odin_score(model: &Discriminator, x: &[f64], cfg: &OdinConfig) -> Result<f64> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(odin_scores(model, &t, cfg)?[0])
}

/// How a sweep picks its configuration when several OOD sets are given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Best configuration chosen separately for each OOD set.
    #[default]
    PerOodSet,
    /// One configuration maximizing the mean AUROC over all OOD sets.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best: OdinConfig,
    pub best_auroc: f64,
    /// `(config, AUROC)` in grid order.
    pub table: Vec<(OdinConfig, f64)>,
}

/// Scores of `x` for every grid entry, sharing one input gradient per
/// temperature.
fn grid_scores(model: &Discriminator, x: &Tensor, grid: &[OdinConfig]) -> Result<Vec<Vec<f64>>> {
    let mut cached: Option<(u64, Vec<f64>)> = None;
    grid.iter()
        .map(|cfg| {
            cfg.validate()?;
            if cfg.perturb_eps == 0.0 {
                return odin_from_grad(model, x, None, cfg);
            }
            let key = cfg.temperature.to_bits();
            if cached.as_ref().map(|(k, _)| *k) != Some(key) {
                cached = Some((key, log_max_softmax_grad(model, x, cfg.temperature)?));
            }
            let g = &cached.as_ref().expect("just filled").1;
            odin_from_grad(model, x, Some(g), cfg)
        })
        .collect()
}

/// AUROC for every grid entry; the best entry is the first maximizer in grid
/// order.
pub fn detector_sweep(model: &Discriminator, id: &Dataset, ood: &Dataset, grid: &[OdinConfig]) -> Result<SweepResult> {
    let mut r = detector_sweep_multi(model, id, std::slice::from_ref(ood), grid, SweepMode::Global)?;
    Ok(r.remove(0))
}

/// Sweeps against several OOD sets. `PerOodSet` returns one result per set;
/// `Global` returns a single result whose table holds mean AUROCs.
pub fn detector_sweep_multi(
    model: &Discriminator,
    id: &Dataset,
    oods: &[Dataset],
    grid: &[OdinConfig],
    mode: SweepMode,
) -> Result<Vec<SweepResult>> {
    if id.is_empty() {
        return Err(Error::Empty("ID evaluation set"));
    }
    if oods.is_empty() || oods.iter().any(Dataset::is_empty) {
        return Err(Error::Empty("OOD evaluation set"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("detector grid"));
    }
    let id_scores = grid_scores(model, id.inputs(), grid)?;
    let mut per_set = Vec::with_capacity(oods.len());
    for ood in oods {
        let ood_scores = grid_scores(model, ood.inputs(), grid)?;
        let aurocs = id_scores
            .iter()
            .zip(&ood_scores)
            .map(|(a, b)| auroc(a, b).map(|r| r.auroc))
            .collect::<Result<Vec<f64>>>()?;
        per_set.push(aurocs);
    }
    let finish = |aurocs: Vec<f64>| {
        let mut best = 0;
        for (i, &a) in aurocs.iter().enumerate() {
            if a > aurocs[best] {
                best = i;
            }
        }
        SweepResult {
            best: grid[best],
            best_auroc: aurocs[best],
            table: grid.iter().copied().zip(aurocs).collect(),
        }
    };
    Ok(match mode {
        SweepMode::PerOodSet => per_set.into_iter().map(finish).collect(),
        SweepMode::Global => {
            let k = per_set.len() as f64;
            let mean = (0..grid.len())
                .map(|i| per_set.iter().map(|a| a[i]).sum::<f64>() / k)
                .collect();
            vec![finish(mean)]
        }
    })
}

/// Writes `sample_id,split,score` rows, ID first.
pub fn write_scores_csv(id_scores: &[f64], ood_scores: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,split,score\n");
    for (i, s) in id_scores.iter().enumerate() {
        let _ = writeln!(out, "{i},id,{s}");
    }
    for (i, s) in ood_scores.iter().enumerate() {
        let _ = writeln!(out, "{i},ood,{s}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a score CSV back into `(id_scores, ood_scores)`.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let err = |location: String, message: String| Error::Parse {
        path: path.to_path_buf(),
        location,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err("open".into(), e.to_string()))?;
    let header = reader.headers().map_err(|e| err("line 1".into(), e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["sample_id", "split", "score"] {
        return Err(err("line 1".into(), "expected header `sample_id,split,score`".into()));
    }
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let line = format!("line {}", i + 2);
        let rec = rec.map_err(|e| err(line.clone(), e.to_string()))?;
        let score: f64 = rec
            .get(2)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err(line.clone(), "score is not a number".into()))?;
        match rec.get(1).map(str::trim) {
            Some("id") => id.push(score),
            Some("ood") => ood.push(score),
            other => return Err(err(line, format!("split {other:?} is neither `id` nor `ood`"))),
        }
    }
    Ok((id, ood))
}
