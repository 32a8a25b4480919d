//! Plot series written as CSV; rendering is left to external tools.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::datasets::Dataset;
use crate::discriminator::{confidence, energy, softmax, Discriminator, EnergyConfig};
use crate::error::{Error, Result};
use crate::finetune::TrainLog;
use crate::sampler::Sample;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Mean confidence and energy of the generated samples per epoch.
pub fn confidence_energy_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,gen_confidence,gen_energy,gen_entropy\n");
    for r in &log.records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            opt(r.gen_confidence),
            opt(r.gen_energy),
            opt(r.gen_entropy)
        );
    }
    out
}

pub fn write_confidence_energy_csv(log: &TrainLog, path: &Path) -> Result<()> {
    fs::write(path, confidence_energy_csv(log))?;
    Ok(())
}

/// Test points (`kind = id`, with labels) followed by generated samples
/// (`kind = generated`, empty label) in native input coordinates.
pub fn embedding_csv(id: &Dataset, generated: &[Vec<f64>]) -> Result<String> {
    let dim = id.dim();
    if let Some(bad) = generated.iter().find(|g| g.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: vec![dim],
            found: vec![bad.len()],
        });
    }
    let mut out = String::from("kind,label");
    for j in 0..dim {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    let row = |out: &mut String, kind: &str, label: String, x: &[f64]| {
        let _ = write!(out, "{kind},{label}");
        for v in x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    };
    for i in 0..id.len() {
        let label = id.labels().map_or_else(String::new, |l| l[i].to_string());
        row(&mut out, "id", label, id.row(i));
    }
    for g in generated {
        row(&mut out, "generated", String::new(), g);
    }
    Ok(out)
}

pub fn write_embedding_csv(id: &Dataset, generated: &[Vec<f64>], path: &Path) -> Result<()> {
    fs::write(path, embedding_csv(id, generated)?)?;
    Ok(())
}

/// Confidence and energy over a `resolution x resolution` grid spanning
/// `[-1, 1]^2`.
pub fn confidence_grid_csv(model: &Discriminator, resolution: usize, cfg: &EnergyConfig) -> Result<String> {
    if model.input_dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: vec![2],
            found: vec![model.input_dim()],
        });
    }
    if resolution < 2 {
        return Err(Error::Precondition("grid resolution must be at least 2".into()));
    }
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (resolution - 1) as f64;
    let pts: Vec<f64> = (0..resolution)
        .flat_map(|i| (0..resolution).flat_map(move |j| [coord(i), coord(j)]))
        .collect();
    let logits = model.logits(&Tensor::matrix(resolution * resolution, 2, pts.clone())?)?;
    let c = model.num_classes();
    let mut out = String::from("x0,x1,confidence,energy\n");
    for (p, row) in pts.chunks(2).zip(logits.data().chunks(c)) {
        let _ = writeln!(out, "{},{},{},{}", p[0], p[1], confidence(&softmax(row)?), energy(row, cfg)?);
    }
    Ok(out)
}

/// One row per recorded chain step: `chain,t,confidence,energy,x0..`.
pub fn trajectories_csv(samples: &[Sample]) -> String {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut out = String::from("chain,t,confidence,energy");
    for j in 0..dim {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for (c, s) in samples.iter().enumerate() {
        for p in s.trajectory.iter().flatten() {
            let _ = write!(out, "{c},{},{},{}", p.t, p.confidence, p.energy);
            for v in &p.x {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Final state of each chain: coordinates then summary columns.
pub fn samples_csv(samples: &[Sample]) -> String {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut out = String::new();
    for j in 0..dim {
        let _ = write!(out, "x{j},");
    }
    out.push_str("steps,converged,init_confidence,confidence,init_energy,energy\n");
    for s in samples {
        for v in &s.x {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.steps, s.converged, s.init_confidence, s.confidence, s.init_energy, s.energy
        );
    }
    out
}
