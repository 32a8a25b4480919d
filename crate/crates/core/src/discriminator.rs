//! The MLP classifier and the scalar functionals derived from its logits:
//! softmax, Shannon entropy, confidence, and the narrowed energy that drives
//! the Langevin sampler.

use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, matmul_into, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Hidden widths used for the desk-scale experiments.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    /// Logits are divided by this before exponentiation; `1.0` gives the raw
    /// energy.
    pub c_scale: f64,
}

impl EnergyConfig {
    pub fn new(c_scale: f64) -> Result<Self> {
        let cfg = Self { c_scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_scale > 0.0 && self.c_scale.is_finite()) {
            return Err(Error::Precondition(format!(
                "c_scale must be positive, got {}",
                self.c_scale
            )));
        }
        Ok(())
    }
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { c_scale: 5.0 }
    }
}

/// One affine layer: `x . weight + bias`, with `weight` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Multilayer perceptron `D -> h1 -> ... -> C` with relu on hidden layers
/// and identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

impl Discriminator {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for
    /// weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Ok(Layer {
                    weight: Tensor::matrix(fan_in, fan_out, weight)?.requiring_grad(),
                    bias: Tensor::matrix(1, fan_out, bias)?.requiring_grad(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(vec![w[0], w[1]]).requiring_grad(),
                bias: Tensor::zeros(vec![1, w[1]]).requiring_grad(),
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        for (i, l) in layers.iter().enumerate() {
            let (fan_in, fan_out) = l.weight.dims2()?;
            if l.bias.dims2()? != (1, fan_out) {
                return Err(Error::DimensionMismatch {
                    expected: vec![1, fan_out],
                    found: l.bias.shape().to_vec(),
                });
            }
            if i == 0 {
                dims.push(fan_in);
            } else if dims[i] != fan_in {
                return Err(Error::DimensionMismatch {
                    expected: vec![dims[i]],
                    found: vec![fan_in],
                });
            }
            dims.push(fan_out);
        }
        Self::check_dims(&dims)?;
        let layers = layers
            .into_iter()
            .map(|mut l| {
                l.weight.set_requires_grad(true);
                l.bias.set_requires_grad(true);
                l
            })
            .collect();
        Ok(Self { dims, layers })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 {
            return Err(Error::Precondition("a model needs at least input and output widths".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Precondition(format!("zero width in {dims:?}")));
        }
        if *dims.last().unwrap() < 2 {
            return Err(Error::Precondition("class count must be at least 2".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::numel).sum()
    }

    /// Copies the parameters onto `tape`. With `track == false` they are
    /// recorded as constants, so no parameter gradients are computed.
    pub fn register(&self, tape: &mut Tape, track: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| {
                if track {
                    LayerVars {
                        weight: tape.leaf(&l.weight),
                        bias: tape.leaf(&l.bias),
                    }
                } else {
                    LayerVars {
                        weight: tape.constant(&l.weight),
                        bias: tape.constant(&l.bias),
                    }
                }
            })
            .collect()
    }

    /// Records the forward pass of an `n x D` batch using previously
    /// registered parameters.
    pub fn forward_with(&self, tape: &mut Tape, vars: &[LayerVars], x: Var) -> Result<Var> {
        let (_, width) = tape.dims(x);
        if width != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: vec![self.input_dim()],
                found: vec![width],
            });
        }
        let mut h = x;
        for (i, lv) in vars.iter().enumerate() {
            h = tape.matmul(h, lv.weight)?;
            h = tape.add_row(h, lv.bias)?;
            if i + 1 < vars.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass returning an `n x C` logit matrix. Produces the
    /// same bits as the recorded forward.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (n, width) = x.dims2()?;
        if width != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: vec![self.input_dim()],
                found: vec![width],
            });
        }
        let mut h = x.data().to_vec();
        let mut k = width;
        for (i, l) in self.layers.iter().enumerate() {
            let m = l.bias.numel();
            let mut out = vec![0.0; n * m];
            matmul_into(&h, l.weight.data(), &mut out, n, k, m);
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(l.bias.data()).for_each(|(v, b)| *v += b);
            }
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v = 0.0
                    }
                });
            }
            h = out;
            k = m;
        }
        Tensor::matrix(n, k, h)
    }

    /// Class probabilities for each row of `x`.
    pub fn probs(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(x)?;
        let c = self.num_classes();
        logits.data().chunks(c).map(softmax).collect()
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .data()
            .chunks(self.num_classes())
            .map(|row| argmax(row).0)
            .collect())
    }

    /// Moves gradients recorded on `tape` into the parameter tensors.
    pub fn export_grads(&mut self, tape: &Tape, vars: &[LayerVars]) -> Result<()> {
        for (l, v) in self.layers.iter_mut().zip(vars) {
            tape.export_grad(v.weight, &mut l.weight)?;
            tape.export_grad(v.bias, &mut l.bias)?;
        }
        Ok(())
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dims.hash(&mut h);
        for p in self.params() {
            for v in p.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Largest absolute parameter difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.params()
            .zip(other.params())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("non-finite {what} at index {i}")));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "logit")?;
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    let m = argmax(logits).1;
    let exps: Vec<f64> = logits.iter().map(|&f| (f - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Largest class probability.
pub fn confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `sum_y (f_y / c) * (1 - exp(f_y / c))`.
pub fn energy(logits: &[f64], cfg: &EnergyConfig) -> Result<f64> {
    cfg.validate()?;
    check_finite(logits, "logit")?;
    let mut total = 0.0;
    for (class, &f) in logits.iter().enumerate() {
        let z = f / cfg.c_scale;
        let e = z.exp();
        if !e.is_finite() {
            return Err(Error::EnergyOverflow {
                class,
                logit: f,
                c_scale: cfg.c_scale,
            });
        }
        total += z * (1.0 - e);
    }
    Ok(total)
}

/// Negative entropy lifted by `c_offset` so it is nonnegative:
/// `G = -H + c_offset` with `c_offset >= ln C`.
pub fn negative_entropy_g(logits: &[f64], c_offset: f64) -> Result<f64> {
    let log_c = (logits.len() as f64).ln();
    if c_offset < log_c {
        return Err(Error::Precondition(format!(
            "c_offset {c_offset} is below ln C = {log_c}"
        )));
    }
    let p = softmax(logits)?;
    Ok(c_offset - shannon_entropy(&p))
}

/// Row-wise log-softmax of an `n x C` logit node.
pub fn log_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let m = tape.max_rows(logits)?;
    let shifted = tape.sub_col(logits, m)?;
    let e = tape.exp(shifted);
    let z = tape.sum_rows(e);
    let lz = tape.log(z);
    tape.sub_col(shifted, lz)
}

/// Row-wise Shannon entropy of the softmax of an `n x C` logit node, as an
/// `n x 1` node.
pub fn softmax_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let logp = log_softmax(tape, logits)?;
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp)?;
    let s = tape.sum_rows(plogp);
    Ok(tape.neg(s))
}

/// Row-wise narrowed energy of an `n x C` logit node, as an `n x 1` node.
pub fn energy_node(tape: &mut Tape, logits: Var, cfg: &EnergyConfig) -> Result<Var> {
    cfg.validate()?;
    let z = tape.div_scalar(logits, cfg.c_scale);
    let e = tape.exp(z);
    let neg_e = tape.neg(e);
    let one_minus = tape.add_scalar(neg_e, 1.0);
    let terms = tape.mul(z, one_minus)?;
    Ok(tape.sum_rows(terms))
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.dims(logits);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: vec![n, c],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Precondition(format!("label {bad} outside [0, {c})")));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let mask = tape.input(n, c, onehot, false)?;
    let logp = log_softmax(tape, logits)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked);
    let ll = tape.div_scalar(total, n as f64);
    Ok(tape.neg(ll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Discriminator::zeros(&[2, 4, 3]).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -0.9, 1.0, 0.5]).unwrap();
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![1, 2]),
        };
        let m = Discriminator::from_layers(vec![layer]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(m.logits(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn duplicated_rows_give_identical_logits() {
        let m = Discriminator::new(&[2, 8, 8, 3], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.2, -0.4, 0.9, 0.1, 0.2, -0.4]).unwrap();
        let l = m.logits(&x).unwrap();
        assert_eq!(l.row(0), l.row(2));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = Discriminator::zeros(&[3, 2]).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(m.logits(&x), Err(Error::DimensionMismatch { .. })));
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, false);
        let xv = tape.constant(&x);
        assert!(m.forward_with(&mut tape, &vars, xv).is_err());
    }

    #[test]
    fn recorded_forward_matches_tape_free_forward_bitwise() {
        let m = Discriminator::new(&[2, 16, 16, 4], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.25, -0.75, 0.1, 0.6]).unwrap();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, true);
        let xv = tape.constant(&x);
        let out = m.forward_with(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out), m.logits(&x).unwrap().data());
    }

    #[test]
    fn rejects_single_class_output() {
        assert!(Discriminator::zeros(&[2, 1]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-15) && p[1] < 1e-300);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!(close(shannon_entropy(&[0.1; 10]), 10f64.ln(), 1e-12));
        assert!(close(10f64.ln(), std::f64::consts::LN_10, 1e-12));
        let mut onehot = vec![0.0; 10];
        onehot[0] = 1.0;
        assert_eq!(shannon_entropy(&onehot), 0.0);
        assert!(close(shannon_entropy(&[0.5, 0.5]), std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn energy_examples() {
        let cfg5 = EnergyConfig::new(5.0).unwrap();
        assert_eq!(energy(&[0.0; 4], &cfg5).unwrap(), 0.0);
        let mut logits = vec![0.0; 10];
        logits[0] = 5.0;
        assert!(close(energy(&logits, &cfg5).unwrap(), -1.718282, 1e-6));
        let cfg1 = EnergyConfig::new(1.0).unwrap();
        assert!(close(energy(&[1.0, 1.0], &cfg1).unwrap(), -3.436564, 1e-6));
    }

    #[test]
    fn energy_overflow_names_the_logit() {
        let cfg = EnergyConfig::new(1.0).unwrap();
        match energy(&[0.0, 800.0], &cfg) {
            Err(Error::EnergyOverflow { class, logit, .. }) => {
                assert_eq!(class, 1);
                assert_eq!(logit, 800.0);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
        assert!(EnergyConfig::new(0.0).is_err());
        assert!(EnergyConfig::new(-1.0).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert!(close(confidence(&[0.1; 10]), 0.1, 1e-15));
        assert_eq!(confidence(&[0.7, 0.2, 0.1]), 0.7);
        assert_eq!(confidence(&[0.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn negative_entropy_examples() {
        let c = 4f64.ln();
        assert!(close(negative_entropy_g(&[0.0; 4], c).unwrap(), 0.0, 1e-12));
        let g = negative_entropy_g(&[800.0, 0.0, 0.0, 0.0], c).unwrap();
        assert!(close(g, c, 1e-12));
        let g = negative_entropy_g(&[0.0, 0.0], 1.0).unwrap();
        assert!(close(g, 0.306853, 1e-6));
        assert!(negative_entropy_g(&[0.0, 0.0], 0.5).is_err());
    }

    /// Straight transcription of the raw energy, one term at a time.
    fn raw_energy_loop(logits: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &f in logits {
            acc += f * (1.0 - f.exp());
        }
        acc
    }

    #[test]
    fn unit_scale_energy_matches_raw_formula_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EnergyConfig::new(1.0).unwrap();
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
            assert_eq!(energy(&logits, &cfg).unwrap(), raw_energy_loop(&logits));
        }
    }

    #[test]
    fn tape_functionals_match_slice_versions() {
        let logits = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 4.0, 4.0, -3.0]).unwrap();
        let cfg = EnergyConfig::default();
        let mut tape = Tape::new();
        let lv = tape.constant(&logits);
        let h = softmax_entropy(&mut tape, lv).unwrap();
        let e = energy_node(&mut tape, lv, &cfg).unwrap();
        for i in 0..2 {
            let row = logits.row(i);
            let hp = shannon_entropy(&softmax(row).unwrap());
            assert!(close(tape.value(h)[i], hp, 1e-12));
            assert!(close(tape.value(e)[i], energy(row, &cfg).unwrap(), 1e-12));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let lv = tape.input(3, 4, vec![0.0; 12], false).unwrap();
        let ce = cross_entropy(&mut tape, lv, &[0, 1, 3]).unwrap();
        assert!(close(tape.scalar(ce), 4f64.ln(), 1e-12));
        let mut tape = Tape::new();
        let lv = tape.input(1, 2, vec![0.0; 2], false).unwrap();
        assert!(cross_entropy(&mut tape, lv, &[2]).is_err());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = Tensor::matrix(1, 5, x).unwrap();
            let err = grad_check(
                |t, xv| {
                    let h = softmax_entropy(t, xv)?;
                    Ok(t.sum(h))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    fn simplex_point(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn entropy_stays_within_bounds(raw in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-9);
            let p = simplex_point(&raw);
            let h = shannon_entropy(&p);
            prop_assert!(h >= -1e-15);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 2..10),
            k in -100.0f64..100.0,
        ) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + k).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        /// `ln u <= u / e` for every `u > 0`, checked at `u = exp(c) / h(x)`.
        #[test]
        fn log_bound_holds_for_exp_c_over_partition(
            logits in proptest::collection::vec(-10.0f64..10.0, 2..10),
            c in 0.0f64..5.0,
        ) {
            let h: f64 = logits.iter().map(|f| f.exp()).sum();
            let u = c.exp() / h;
            prop_assert!(u.ln() <= u / std::f64::consts::E + 1e-12);
        }
    }
}
