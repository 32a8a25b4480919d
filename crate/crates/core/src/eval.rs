//! Evaluation of a model against one ID test set and several OOD sets.

use crate::datasets::Dataset;
use crate::detectors::{detector_sweep_multi, msp_scores, OdinConfig, SweepMode};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc};

#[derive(Debug, Clone)]
pub struct EvalBundle {
    pub id_test: Dataset,
    pub oods: Vec<Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub detector: String,
    pub accuracy: f64,
    /// `(OOD set name, AUROC)`.
    pub per_ood: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn mean_auroc(&self) -> f64 {
        self.per_ood.iter().map(|(_, a)| a).sum::<f64>() / self.per_ood.len() as f64
    }
}

impl EvalBundle {
    pub fn new(id_test: Dataset, oods: Vec<Dataset>) -> Result<Self> {
        if id_test.is_empty() {
            return Err(Error::Empty("ID test set"));
        }
        if id_test.labels().is_none() {
            return Err(Error::Precondition("ID test set needs labels".into()));
        }
        if oods.is_empty() || oods.iter().any(Dataset::is_empty) {
            return Err(Error::Empty("OOD evaluation set"));
        }
        if oods.iter().any(|o| o.dim() != id_test.dim()) {
            return Err(Error::DimensionMismatch {
                expected: vec![id_test.dim()],
                found: oods.iter().map(Dataset::dim).collect(),
            });
        }
        Ok(Self { id_test, oods })
    }

    /// Accuracy and max-softmax AUROC per OOD set.
    pub fn evaluate_msp(&self, model: &Discriminator) -> Result<Evaluation> {
        let id = msp_scores(model, self.id_test.inputs())?;
        let per_ood = self
            .oods
            .iter()
            .map(|o| {
                let s = msp_scores(model, o.inputs())?;
                Ok((o.name.clone(), auroc(&id, &s)?.auroc))
            })
            .collect::<Result<_>>()?;
        Ok(Evaluation {
            detector: "msp".into(),
            accuracy: accuracy(model, &self.id_test)?,
            per_ood,
        })
    }

    /// Accuracy and the best AUROC over `grid`, chosen per OOD set or once
    /// for all sets depending on `mode`.
    pub fn evaluate_odin(&self, model: &Discriminator, grid: &[OdinConfig], mode: SweepMode) -> Result<Evaluation> {
        let sweeps = detector_sweep_multi(model, &self.id_test, &self.oods, grid, mode)?;
        let per_ood = match mode {
            SweepMode::PerOodSet => self
                .oods
                .iter()
                .zip(&sweeps)
                .map(|(o, s)| (o.name.clone(), s.best_auroc))
                .collect(),
            SweepMode::Global => {
                let best = sweeps[0].best;
                self.oods
                    .iter()
                    .map(|o| {
                        let r = detector_sweep_multi(
                            model,
                            &self.id_test,
                            std::slice::from_ref(o),
                            &[best],
                            SweepMode::PerOodSet,
                        )?;
                        Ok((o.name.clone(), r[0].best_auroc))
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Evaluation {
            detector: "odin".into(),
            accuracy: accuracy(model, &self.id_test)?,
            per_ood,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_gaussian_mixture, gen_uniform, Split};
    use crate::detectors::default_odin_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> EvalBundle {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let id = gen_gaussian_mixture(100, &[vec![-0.5, 0.0], vec![0.5, 0.0]], 0.1, &mut r).unwrap();
        let ood = gen_uniform(80, 2, &mut r).unwrap();
        EvalBundle::new(id.with_split(Split::IdTest), vec![ood]).unwrap()
    }

    #[test]
    fn odin_never_below_msp() {
        let b = bundle();
        let model = Discriminator::new(&[2, 8, 2], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let msp = b.evaluate_msp(&model).unwrap();
        let grid = default_odin_grid();
        for mode in [SweepMode::PerOodSet, SweepMode::Global] {
            let odin = b.evaluate_odin(&model, &grid, mode).unwrap();
            assert!(odin.mean_auroc() >= msp.mean_auroc() - 1e-12);
            assert_eq!(odin.accuracy, msp.accuracy);
        }
    }

    #[test]
    fn rejects_bad_bundles() {
        let b = bundle();
        assert!(EvalBundle::new(b.id_test.clone(), vec![]).is_err());
        let unlabeled = Dataset::new("u", Split::IdTest, b.id_test.inputs().clone(), None).unwrap();
        assert!(EvalBundle::new(unlabeled, b.oods.clone()).is_err());
    }
}
