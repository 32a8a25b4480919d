//! Langevin sampler for the implicit generator of a discriminator.
//!
//! Each step moves a chain against the sign of the energy gradient, adds
//! Gaussian noise and clips back into the input box:
//!
//! ```text
//! x_t = clip(x_{t-1} - (eps_t / 2) * sign(grad_x E(x_{t-1})) + z_t, lo, hi)
//! z_t ~ N(0, eps_t * I)
//! eps_t = eps0 * gamma ^ floor(t / L)
//! ```
//!
//! A chain stops once its confidence has settled (the last `conv_window`
//! values span less than `conv_tol`) or after `t_max` steps. The model is
//! only read; its parameters enter the tape as constants.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::discriminator::{confidence, energy, energy_node, softmax, Discriminator, EnergyConfig};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;

/// How `eps_t` in `N(0, eps_t * I)` sets the noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// `eps_t` is the variance: per-coordinate std is `sqrt(eps_t)`.
    #[default]
    Covariance,
    /// `eps_t` is the standard deviation.
    StdDev,
    /// No noise; plain sign-gradient descent.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsConfig {
    pub eps0: f64,
    pub gamma: f64,
    pub decay_period: usize,
    pub t_max: usize,
    pub conv_window: usize,
    pub conv_tol: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub energy: EnergyConfig,
    pub noise: NoiseScale,
    pub seed: u64,
}

impl Default for LdsConfig {
    fn default() -> Self {
        Self {
            eps0: 0.1,
            gamma: 0.9,
            decay_period: 100,
            t_max: 100,
            conv_window: 5,
            conv_tol: 1e-3,
            clip_lo: -1.0,
            clip_hi: 1.0,
            energy: EnergyConfig::default(),
            noise: NoiseScale::Covariance,
            seed: 0,
        }
    }
}

impl LdsConfig {
    /// Long chains for trajectory plots.
    pub fn visualization() -> Self {
        Self {
            t_max: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return bad(format!("eps0 must be positive, got {}", self.eps0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.decay_period == 0 {
            return bad("decay period must be at least 1".into());
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if self.conv_window == 0 {
            return bad("conv_window must be at least 1".into());
        }
        if !(self.conv_tol >= 0.0) {
            return bad(format!("conv_tol must be nonnegative, got {}", self.conv_tol));
        }
        if !(self.clip_lo < self.clip_hi) {
            return bad(format!("clip range [{}, {}] is empty", self.clip_lo, self.clip_hi));
        }
        self.energy.validate()
    }

    /// `eps0 * gamma ^ floor(t / L)`.
    pub fn step_size(&self, t: usize) -> f64 {
        let k = (t / self.decay_period) as i32;
        self.eps0 * self.gamma.powi(k)
    }

    fn noise_std(&self, eps: f64) -> f64 {
        match self.noise {
            NoiseScale::Covariance => eps.sqrt(),
            NoiseScale::StdDev => eps,
            NoiseScale::Off => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub confidence: f64,
    pub energy: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub x: Vec<f64>,
    pub t: usize,
    pub eps: f64,
    pub conf_history: VecDeque<f64>,
    pub converged: bool,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

/// Draws `x0 ~ U(clip_lo, clip_hi)^dim`.
pub fn init_chain<R: Rng + ?Sized>(dim: usize, cfg: &LdsConfig, rng: &mut R) -> Result<Chain> {
    if dim == 0 {
        return Err(Error::Precondition("chain dimension must be at least 1".into()));
    }
    let x = (0..dim)
        .map(|_| rng.random_range(cfg.clip_lo..=cfg.clip_hi))
        .collect();
    Ok(Chain {
        x,
        t: 0,
        eps: cfg.eps0,
        conf_history: VecDeque::with_capacity(cfg.conv_window),
        converged: false,
        trajectory: None,
    })
}

/// One Langevin move in place: `x <- clip(x - eps/2 * sign(grad) + noise)`.
pub fn langevin_update(x: &mut [f64], grad: &[f64], eps: f64, noise: &[f64], lo: f64, hi: f64) {
    for ((xi, &g), &z) in x.iter_mut().zip(grad).zip(noise) {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        *xi = (*xi - 0.5 * eps * s + z).clamp(lo, hi);
    }
}

/// Gradient of the narrowed energy with respect to a single input.
pub fn energy_input_grad(model: &Discriminator, x: &[f64], cfg: &EnergyConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let xv = tape.input(1, x.len(), x.to_vec(), true)?;
    let logits = model.forward_with(&mut tape, &vars, xv)?;
    let e = energy_node(&mut tape, logits, cfg)?;
    let total = tape.sum(e);
    if tape.check_finite().is_err() {
        // Surface the offending logit when the exponential overflowed.
        energy(tape.value(logits), cfg)?;
    }
    tape.backward(total)?;
    Ok(tape.grad(xv).expect("input tracks gradients").to_vec())
}

/// Confidence and energy of a single input.
pub fn point_stats(model: &Discriminator, x: &[f64], cfg: &EnergyConfig) -> Result<(f64, f64)> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    let logits = model.logits(&t)?;
    let p = softmax(logits.data())?;
    Ok((confidence(&p), energy(logits.data(), cfg)?))
}

/// Advances `chain` by one step.
pub fn lds_step<R: Rng + ?Sized>(
    chain: &mut Chain,
    model: &Discriminator,
    cfg: &LdsConfig,
    rng: &mut R,
) -> Result<()> {
    if chain.converged {
        return Err(Error::Precondition("chain already converged".into()));
    }
    let next_t = chain.t + 1;
    let abort = |reason: String| Error::ChainAborted {
        iteration: next_t,
        reason,
    };
    let grad = energy_input_grad(model, &chain.x, &cfg.energy).map_err(|e| abort(e.to_string()))?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(abort("non-finite energy gradient".into()));
    }

    let eps = cfg.step_size(next_t);
    let std = cfg.noise_std(eps);
    let noise: Vec<f64> = (0..chain.x.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    langevin_update(&mut chain.x, &grad, eps, &noise, cfg.clip_lo, cfg.clip_hi);
    chain.t = next_t;
    chain.eps = eps;

    let (conf, en) = point_stats(model, &chain.x, &cfg.energy).map_err(|e| abort(e.to_string()))?;
    if chain.conf_history.len() == cfg.conv_window {
        chain.conf_history.pop_front();
    }
    chain.conf_history.push_back(conf);
    if let Some(traj) = &mut chain.trajectory {
        traj.push(TrajectoryPoint {
            t: next_t,
            confidence: conf,
            energy: en,
            x: chain.x.clone(),
        });
    }
    if chain.conf_history.len() == cfg.conv_window {
        let (lo, hi) = chain
            .conf_history
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        chain.converged = hi - lo < cfg.conv_tol;
    }
    Ok(())
}

/// Output of one sampler chain.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    pub init_confidence: f64,
    pub init_energy: f64,
    pub confidence: f64,
    pub energy: f64,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

/// Runs one chain to convergence or `t_max`.
pub fn run_lds<R: Rng + ?Sized>(model: &Discriminator, cfg: &LdsConfig, rng: &mut R) -> Result<Sample> {
    run_chain(model, cfg, rng, false)
}

/// [`run_lds`] with an optional per-step trajectory (including `t = 0`).
pub fn run_chain<R: Rng + ?Sized>(
    model: &Discriminator,
    cfg: &LdsConfig,
    rng: &mut R,
    record: bool,
) -> Result<Sample> {
    cfg.validate()?;
    let mut chain = init_chain(model.input_dim(), cfg, rng)?;
    let (init_confidence, init_energy) = point_stats(model, &chain.x, &cfg.energy)
        .map_err(|e| Error::ChainAborted {
            iteration: 0,
            reason: e.to_string(),
        })?;
    if record {
        chain.trajectory = Some(vec![TrajectoryPoint {
            t: 0,
            confidence: init_confidence,
            energy: init_energy,
            x: chain.x.clone(),
        }]);
    }
    while !chain.converged && chain.t < cfg.t_max {
        lds_step(&mut chain, model, cfg, rng)?;
    }
    let (confidence, energy) = point_stats(model, &chain.x, &cfg.energy).map_err(|e| Error::ChainAborted {
        iteration: chain.t,
        reason: e.to_string(),
    })?;
    Ok(Sample {
        x: chain.x,
        steps: chain.t,
        converged: chain.converged,
        init_confidence,
        init_energy,
        confidence,
        energy,
        trajectory: chain.trajectory,
    })
}

/// Runs `count` independent chains. Chain `i` is seeded from a base value
/// drawn once from `rng` and its index, so results do not depend on
/// `parallel`.
pub fn draw_batch<R: Rng + ?Sized>(
    model: &Discriminator,
    cfg: &LdsConfig,
    count: usize,
    rng: &mut R,
    parallel: bool,
) -> Result<Vec<Sample>> {
    draw_batch_recorded(model, cfg, count, rng, parallel, false)
}

pub fn draw_batch_recorded<R: Rng + ?Sized>(
    model: &Discriminator,
    cfg: &LdsConfig,
    count: usize,
    rng: &mut R,
    parallel: bool,
    record: bool,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let base: u64 = rng.random();
    let one = |i: usize| {
        let mut r = crate::seeding::child_rng(base, crate::seeding::stream::CHAIN, i as u64);
        run_chain(model, cfg, &mut r, record)
    };
    let results: Vec<Result<Sample>> = if parallel {
        (0..count).into_par_iter().map(one).collect()
    } else {
        (0..count).map(one).collect()
    };
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.is_err().then_some(i))
        .collect();
    if let Some(&first) = failed.first() {
        let first_msg = results[first].as_ref().err().map(ToString::to_string).unwrap_or_default();
        return Err(Error::BatchFailed {
            total: count,
            failed: failed.len(),
            indices: failed,
            first: first_msg,
        });
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

/// Stacks sample coordinates into an `n x D` matrix.
pub fn samples_to_tensor(samples: &[Sample], dim: usize) -> Result<Tensor> {
    let data = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    Tensor::matrix(samples.len(), dim, data)
}

/// Seed for chain batches drawn during fine-tuning step `step`.
pub(crate) fn batch_seed(base: u64, step: u64) -> u64 {
    derive_seed(base, crate::seeding::stream::SAMPLER, step)
}
