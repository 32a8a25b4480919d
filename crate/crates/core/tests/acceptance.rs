//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fig_core::autograd::{grad_check, Tape, Tensor, Var};
use fig_core::checkpoint::{decode, encode, CheckpointMeta};
use fig_core::detectors::{msp_scores, odin_scores, OdinConfig};
use fig_core::discriminator::{energy_node, softmax_entropy, Discriminator, EnergyConfig, LayerVars};
use fig_core::eval::Evaluation;
use fig_core::experiment::{build_suite, pretrain_standard, run_variant, ExperimentConfig, Suite, Variant};
use fig_core::finetune::{fig_loss_nodes, finetune, pretrain, FinetuneConfig, LrSchedule, TrainLog};
use fig_core::metrics::auroc;
use fig_core::sampler::{draw_batch, LdsConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let cfg = EnergyConfig::default();
    let (mut h_worst, mut e_worst, mut f_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let logits = rand_tensor(&mut r, 3, 4, 4.0);
        h_worst = h_worst.max(
            grad_check(
                |t: &mut Tape, x: Var| {
                    let h = softmax_entropy(t, x)?;
                    Ok(t.sum(h))
                },
                &logits,
                1e-6,
            )
            .unwrap(),
        );
        e_worst = e_worst.max(
            grad_check(
                |t: &mut Tape, x: Var| {
                    let e = energy_node(t, x, &cfg)?;
                    Ok(t.sum(e))
                },
                &logits,
                1e-6,
            )
            .unwrap(),
        );
    }

    let dims = [2usize, 4, 4, 2];
    let shape = Discriminator::zeros(&dims).unwrap();
    let n = shape.num_params();
    let id_x = rand_tensor(&mut r, 6, 2, 1.0);
    let id_y = [0usize, 1, 1, 0, 1, 0];
    let gen_x = rand_tensor(&mut r, 3, 2, 1.0);
    for _ in 0..20 {
        let theta = rand_tensor(&mut r, 1, n, 1.0);
        let err = grad_check(
            |t: &mut Tape, th: Var| {
                let mut vars = Vec::new();
                let mut off = 0;
                for w in dims.windows(2) {
                    let weight = t.slice(th, off, w[0], w[1])?;
                    off += w[0] * w[1];
                    let bias = t.slice(th, off, 1, w[1])?;
                    off += w[1];
                    vars.push(LayerVars { weight, bias });
                }
                Ok(fig_loss_nodes(t, &shape, &vars, &id_x, &id_y, Some(&gen_x))?.loss)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        f_worst = f_worst.max(err);
    }

    let x = Tensor::matrix(1, 4, vec![0.3, -1.2, 2.5, 0.7]).unwrap();
    let q_worst = grad_check(
        |t: &mut Tape, x: Var| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = h_worst <= 1e-4 && e_worst <= 1e-4 && f_worst <= 1e-4 && q_worst <= 1e-6 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "entropy {h_worst:.2e}, energy {e_worst:.2e}, fig_loss {f_worst:.2e} (<= 1e-4); quadratic {q_worst:.2e} (<= 1e-6); {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

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

fn criterion_2() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(202);
    let (mut oracle, mut flip, mut mono) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n_id = r.random_range(1..60);
        let n_ood = r.random_range(1..60);
        // Coarse grid so ties are common.
        let levels = r.random_range(2..12) as f64;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| (r.random::<f64>() * levels).floor() / levels).collect() };
        let id = draw(n_id);
        let ood = draw(n_ood);
        let a = auroc(&id, &ood).unwrap().auroc;
        oracle = oracle.max((a - brute_force(&id, &ood)).abs());
        flip = flip.max((a + auroc(&ood, &id).unwrap().auroc - 1.0).abs());
        let t = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (3.0 * x).exp() + x).collect() };
        mono = mono.max((a - auroc(&t(&id), &t(&ood)).unwrap().auroc).abs());
    }
    outcome(
        oracle <= 1e-12 && flip <= 1e-12 && mono <= 1e-12,
        format!("oracle diff {oracle:.1e}, label flip {flip:.1e}, monotone {mono:.1e} (all <= 1e-12, 200 sets)"),
    )
}

fn criterion_3() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(303);
    let model = Discriminator::new(&[2, 64, 64, 2], &mut r).unwrap();
    let x = rand_tensor(&mut r, 1000, 2, 1.0);
    let msp = msp_scores(&model, &x).unwrap();
    let odin = odin_scores(&model, &x, &OdinConfig::new(1.0, 0.0).unwrap()).unwrap();
    let worst = msp.iter().zip(&odin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-12, format!("max |ODIN(T=1, eps=0) - MSP| = {worst:.1e} over 1000 points"))
}

/// Standard model and data for one seed of the moons suite.
struct SeedRun {
    suite: Suite,
    standard: Discriminator,
    standard_eval: Evaluation,
}

fn suite_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    }
}

fn prepare(seed: u64) -> SeedRun {
    let cfg = suite_config(seed);
    let suite = build_suite(&cfg).unwrap();
    let (standard, _) = pretrain_standard(&cfg, &suite).unwrap();
    let standard_eval = suite.bundle.evaluate_msp(&standard).unwrap();
    SeedRun {
        suite,
        standard,
        standard_eval,
    }
}

fn criterion_4(run: &SeedRun) -> Outcome {
    let cfg = LdsConfig::default();
    let before = run.standard.fingerprint();
    let samples = draw_batch(&run.standard, &cfg, 100, &mut ChaCha8Rng::seed_from_u64(404), true).unwrap();
    let in_range = samples.iter().all(|s| s.x.iter().all(|v| (-1.0..=1.0).contains(v)));
    let schedule_ok = cfg.step_size(100) == 0.1 * 0.9
        && cfg.step_size(99) == 0.1
        && (0..1000).all(|t| cfg.step_size(t) == 0.1 * 0.9f64.powi((t / 100) as i32));
    let init = median(samples.iter().map(|s| s.init_energy).collect());
    let stop = median(samples.iter().map(|s| s.energy).collect());
    let unchanged = run.standard.fingerprint() == before;
    outcome(
        in_range && schedule_ok && stop < init && unchanged,
        format!(
            "range ok {in_range}, schedule ok {schedule_ok} (eps_100 = {}), median energy {init:.4} -> {stop:.4}, theta unchanged {unchanged}",
            cfg.step_size(100)
        ),
    )
}

struct VariantResult {
    model: Discriminator,
    eval: Evaluation,
    log: TrainLog,
}

fn variant(seed: u64, run: &SeedRun, v: Variant) -> VariantResult {
    let cfg = suite_config(seed);
    let (model, log) = run_variant(&cfg, &run.standard, &run.suite, v).unwrap();
    let eval = run.suite.bundle.evaluate_msp(&model).unwrap();
    VariantResult { model, eval, log }
}

fn criterion_6(seed: u64, run: &SeedRun) -> Outcome {
    let base = Variant::Fig { k: 0.0 }.config(&suite_config(seed));
    let mut identical = true;
    for epochs in 1..=3 {
        let cfg = FinetuneConfig { epochs, ..base };
        let (a, log) = finetune(run.standard.clone(), &run.suite.train, &cfg).unwrap();
        let (b, _) = pretrain(
            run.standard.clone(),
            &run.suite.train,
            epochs,
            cfg.batch_size,
            &LrSchedule::Constant { lr: cfg.mu },
            cfg.seed,
        )
        .unwrap();
        identical &= a.fingerprint() == b.fingerprint() && a.max_abs_diff(&b) == 0.0 && log.chains_run == 0;
    }
    outcome(identical, format!("theta after epochs 1, 2, 3 bitwise equal to CE-only: {identical}"))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    fs::write(
        &cfg_path,
        "seed = 5\n[data]\nn_train = 200\nn_test = 100\nn_ood = 100\n[model]\nhidden = [16]\n[pretrain]\nepochs = 5\n[finetune]\nepochs = 2\n",
    )
    .unwrap();
    let run_cli = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_fig"))
            .args(["--config", cfg_path.to_str().unwrap(), "--seed", "9", "--out-dir", out.to_str().unwrap(), "run"])
            .output()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ok_runs = run_cli(&a).status.success() && run_cli(&b).status.success();
    let mut csvs = Vec::new();
    for entry in walk(&a) {
        if entry.extension().is_some_and(|e| e == "csv") && !entry.ends_with("throughput.csv") {
            csvs.push(entry.strip_prefix(&a).unwrap().to_path_buf());
        }
    }
    let identical = !csvs.is_empty() && csvs.iter().all(|rel| fs::read(a.join(rel)).ok() == fs::read(b.join(rel)).ok());

    let model = Discriminator::new(&[2, 64, 64, 2], &mut ChaCha8Rng::seed_from_u64(909)).unwrap();
    let back = decode(&encode(&model, &CheckpointMeta::default())).unwrap().model;
    let bit_exact = model
        .params()
        .zip(back.params())
        .all(|(p, q)| p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    outcome(
        ok_runs && identical && bit_exact,
        format!(
            "two CLI runs succeeded {ok_runs}, {} metric CSVs byte-identical {identical}, checkpoint bit-exact {bit_exact}",
            csvs.len()
        ),
    )
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };

    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let start = Instant::now();
    let mut std_auroc = Vec::new();
    let mut fig_auroc = Vec::new();
    let mut frozen_auroc = Vec::new();
    let mut gs_auroc = Vec::new();
    let mut acc_drops = Vec::new();
    let mut conf_dropped = Vec::new();
    let mut theta_differs = Vec::new();
    let mut c4 = None;
    let mut c6 = None;
    for &seed in &SEEDS {
        let run = prepare(seed);
        if seed == SEEDS[0] {
            c4 = Some(criterion_4(&run));
            c6 = Some(criterion_6(seed, &run));
        }
        let fig = variant(seed, &run, Variant::Fig { k: 0.1 });
        let frozen = variant(seed, &run, Variant::FrozenTeacher { k: 0.1 });
        let gs = variant(seed, &run, Variant::Gaussian { k: 0.1 });
        std_auroc.push(run.standard_eval.mean_auroc());
        fig_auroc.push(fig.eval.mean_auroc());
        frozen_auroc.push(frozen.eval.mean_auroc());
        gs_auroc.push(gs.eval.mean_auroc());
        acc_drops.push(run.standard_eval.accuracy - fig.eval.accuracy);
        let first = fig.log.records.first().and_then(|r| r.gen_confidence).unwrap_or(f64::NAN);
        let last = fig.log.records.last().and_then(|r| r.gen_confidence).unwrap_or(f64::NAN);
        conf_dropped.push(last < first);
        theta_differs.push(fig.model.max_abs_diff(&frozen.model) > 1e-8);
        println!(
            "  seed {seed}: AUROC standard {:.4}, fig {:.4}, frozen {:.4}, gs {:.4}; accuracy {:.4} -> {:.4}; gen confidence {first:.4} -> {last:.4}",
            run.standard_eval.mean_auroc(),
            fig.eval.mean_auroc(),
            frozen.eval.mean_auroc(),
            gs.eval.mean_auroc(),
            run.standard_eval.accuracy,
            fig.eval.accuracy,
        );
    }
    let elapsed = start.elapsed();

    report(4, c4.expect("seed 0 ran"));

    let gain = median(fig_auroc.clone()) - median(std_auroc.clone());
    let worst_drop = acc_drops.iter().copied().fold(f64::MIN, f64::max);
    let all_conf = conf_dropped.iter().all(|&b| b);
    report(
        5,
        outcome(
            gain >= 0.02 && worst_drop <= 0.02 && all_conf && elapsed < Duration::from_secs(300),
            format!(
                "median AUROC {:.4} -> {:.4} (gain {gain:.4}, need >= 0.02); worst accuracy drop {worst_drop:.4} (<= 0.02); final-epoch gen confidence below first on all seeds {all_conf}; suite time {:.1}s (< 300s)",
                median(std_auroc.clone()),
                median(fig_auroc.clone()),
                elapsed.as_secs_f64()
            ),
        ),
    );

    report(6, c6.expect("seed 0 ran"));

    let all_differ = theta_differs.iter().all(|&b| b);
    let (live_m, frozen_m) = (median(fig_auroc.clone()), median(frozen_auroc.clone()));
    report(
        7,
        outcome(
            all_differ && live_m >= frozen_m,
            format!("final theta differs on all seeds {all_differ}; median AUROC live {live_m:.4} vs frozen {frozen_m:.4} (need live >= frozen)"),
        ),
    );

    let gs_m = median(gs_auroc.clone());
    report(
        8,
        outcome(
            live_m >= gs_m,
            format!("median AUROC FIG {live_m:.4} vs GS {gs_m:.4} (need FIG >= GS)"),
        ),
    );

    report(9, criterion_9());

    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
