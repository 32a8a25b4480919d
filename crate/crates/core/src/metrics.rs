//! AUROC, accuracy, harmonic mean and throughput.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::datasets::Dataset;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};

/// ROC analysis with in-distribution scores as the positive class (higher
/// score means more ID-like).
#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub auroc: f64,
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub curve: Vec<(f64, f64)>,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Sweeps the threshold over distinct score values from high to low and
/// integrates the ROC curve with the trapezoid rule. Tied ID/OOD pairs
/// contribute one half, which matches the Mann-Whitney statistic.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<RocResult> {
    if id_scores.is_empty() {
        return Err(Error::Empty("ID scores"));
    }
    if ood_scores.is_empty() {
        return Err(Error::Empty("OOD scores"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| !s.is_finite()) {
        return Err(Error::Precondition("scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (n_id, n_ood) = (id_scores.len() as u128, ood_scores.len() as u128);
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    // Twice the area in units of one (ID, OOD) pair.
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        curve.push((fp as f64 / n_ood as f64, tp as f64 / n_id as f64));
    }
    Ok(RocResult {
        auroc: twice_area as f64 / (2 * n_id * n_ood) as f64,
        curve,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// Fraction of rows whose argmax prediction (ties to the lowest index)
/// equals the label.
pub fn accuracy(model: &Discriminator, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let labels = data
        .labels()
        .ok_or_else(|| Error::Precondition(format!("dataset `{}` has no labels", data.name)))?;
    let c = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Precondition(format!("label {bad} outside [0, {c})")));
    }
    let pred = model.predict(data.inputs())?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`, defined as 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Items per second.
pub fn throughput(n_items: usize, elapsed: Duration) -> Result<f64> {
    if n_items == 0 {
        return Err(Error::Precondition("throughput needs at least one item".into()));
    }
    let secs = elapsed.as_secs_f64();
    if secs <= 0.0 {
        return Err(Error::Precondition("elapsed time is zero".into()));
    }
    Ok(n_items as f64 / secs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub items: usize,
    pub seconds: f64,
    pub per_second: f64,
}

/// Times `op`, which processes `n_items` items.
pub fn measure_throughput<T>(n_items: usize, op: impl FnOnce() -> Result<T>) -> Result<(T, Throughput)> {
    let start = Instant::now();
    let out = op()?;
    let elapsed = start.elapsed();
    let per_second = throughput(n_items, elapsed)?;
    Ok((
        out,
        Throughput {
            items: n_items,
            seconds: elapsed.as_secs_f64(),
            per_second,
        },
    ))
}

/// Renders a `[0, 1]` value as a percentage with one decimal.
pub fn percent(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub ood_set: String,
    pub detector: String,
    pub auroc: f64,
    pub accuracy: f64,
}

impl ResultRow {
    pub fn harmonic_mean(&self) -> f64 {
        harmonic_mean(self.auroc, self.accuracy)
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("experiment,ood_set,detector,auroc,accuracy,harmonic_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.experiment,
            r.ood_set,
            r.detector,
            r.auroc,
            r.accuracy,
            r.harmonic_mean()
        );
    }
    out
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    std::fs::write(path, results_csv(rows))?;
    Ok(())
}

/// Markdown table with percentages rounded to one decimal.
pub fn results_markdown(rows: &[ResultRow]) -> String {
    let mut out = String::from("| experiment | ood_set | detector | AUROC | accuracy | harmonic mean |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.experiment,
            r.ood_set,
            r.detector,
            percent(r.auroc),
            percent(r.accuracy),
            percent(r.harmonic_mean())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::datasets::Split;
    use crate::discriminator::Layer;
    use proptest::prelude::*;

    /// Mann-Whitney by enumerating every (ID, OOD) pair.
    fn brute_force(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &a in id {
            for &b in ood {
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
        wins / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap().auroc, 1.0);
        assert_eq!(auroc(&[0.5; 3], &[0.5; 4]).unwrap().auroc, 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.1]).unwrap().auroc, 0.75);
        assert_eq!(brute_force(&[0.9, 0.4], &[0.6, 0.1]), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
        assert!(auroc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn curve_shape() {
        let r = auroc(&[0.9, 0.4, 0.4], &[0.6, 0.1, 0.4]).unwrap();
        assert_eq!(r.curve.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.curve.last(), Some(&(1.0, 1.0)));
        for w in r.curve.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        assert_eq!((r.n_id, r.n_ood), (3, 3));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(1.0, 1.0), 1.0);
        assert_eq!(harmonic_mean(0.7, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.8, 0.4) - 0.533333).abs() < 1e-6);
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput(100, Duration::from_secs(2)).unwrap(), 50.0);
        assert_eq!(throughput(1, Duration::from_secs(1)).unwrap(), 1.0);
        assert!(throughput(1, Duration::ZERO).is_err());
        assert!(throughput(0, Duration::from_secs(1)).is_err());
    }

    fn identity_model() -> Discriminator {
        Discriminator::from_layers(vec![Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![1, 2]),
        }])
        .unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let m = identity_model();
        let x = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.7, -0.3, 0.1, 0.1]).unwrap();
        let ds = Dataset::new("t", Split::IdTest, x.clone(), Some(vec![0, 1, 0, 0])).unwrap();
        assert_eq!(accuracy(&m, &ds).unwrap(), 1.0);
        let flipped = Dataset::new("t", Split::IdTest, x.clone(), Some(vec![1, 0, 1, 1])).unwrap();
        assert_eq!(accuracy(&m, &flipped).unwrap(), 0.0);
        let partial = Dataset::new("t", Split::IdTest, x, Some(vec![0, 0, 0, 0])).unwrap();
        let flipped_partial: Vec<usize> = partial.labels().unwrap().iter().map(|y| 1 - y).collect();
        let fp = Dataset::new("t", Split::IdTest, partial.inputs().clone(), Some(flipped_partial)).unwrap();
        assert!((accuracy(&m, &partial).unwrap() + accuracy(&m, &fp).unwrap() - 1.0).abs() < 1e-15);
        let empty = Dataset::new("e", Split::IdTest, Tensor::zeros(vec![0, 2]), Some(vec![])).unwrap();
        assert!(accuracy(&m, &empty).is_err());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(percent(0.9504), "95.0");
        let rows = vec![ResultRow {
            experiment: "e".into(),
            ood_set: "ring".into(),
            detector: "msp".into(),
            auroc: 0.8,
            accuracy: 0.4,
        }];
        assert!(results_csv(&rows).lines().nth(1).unwrap().starts_with("e,ring,msp,0.8,0.4,0.5333"));
        assert!(results_markdown(&rows).contains("| 80.0 | 40.0 | 53.3 |"));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so ties are common.
        proptest::collection::vec((0u8..20).prop_map(|v| f64::from(v) / 10.0), 1..60)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn curve_integration_equals_pair_counting(id in scores(), ood in scores()) {
            let fast = auroc(&id, &ood).unwrap().auroc;
            prop_assert!((fast - brute_force(&id, &ood)).abs() <= 1e-12);
        }

        #[test]
        fn label_flip_symmetry(id in scores(), ood in scores()) {
            let a = auroc(&id, &ood).unwrap().auroc;
            let b = auroc(&ood, &id).unwrap().auroc;
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn monotone_transform_invariance(id in scores(), ood in scores()) {
            let f = |v: &f64| (3.0 * v).exp() - 7.0;
            let a = auroc(&id, &ood).unwrap().auroc;
            let t_id: Vec<f64> = id.iter().map(f).collect();
            let t_ood: Vec<f64> = ood.iter().map(f).collect();
            prop_assert!((a - auroc(&t_id, &t_ood).unwrap().auroc).abs() <= 1e-12);
        }
    }
}
