use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fig_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use fig_core::experiment::{build_suite, pretrain_standard, run_experiment, run_variant, ExperimentConfig, Variant};
use fig_core::finetune::finetune;
use fig_core::sampler::{draw_batch, LdsConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn moons(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    }
}

#[test]
fn chains_on_pretrained_model_gain_confidence() {
    let cfg = moons(0);
    let suite = build_suite(&cfg).unwrap();
    let (model, _) = pretrain_standard(&cfg, &suite).unwrap();
    let samples = draw_batch(&model, &LdsConfig::default(), 100, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
    let init = median(samples.iter().map(|s| s.init_confidence).collect());
    let fin = median(samples.iter().map(|s| s.confidence).collect());
    assert!(fin > init, "{init} -> {fin}");
    let again = draw_batch(&model, &LdsConfig::default(), 100, &mut ChaCha8Rng::seed_from_u64(1), false).unwrap();
    assert!(samples.iter().zip(&again).all(|(a, b)| a.x == b.x));
}

#[test]
fn fine_tuning_resumes_identically_from_checkpoint() {
    let mut cfg = moons(3);
    cfg.data.n_train = 400;
    cfg.pretrain.epochs = 5;
    cfg.finetune.epochs = 1;
    let suite = build_suite(&cfg).unwrap();
    let (model, _) = pretrain_standard(&cfg, &suite).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&model, &CheckpointMeta::default(), &p).unwrap();
    let loaded = load_checkpoint(&p).unwrap().model;
    let ft = cfg.resolved().finetune;
    let a = finetune(model, &suite.train, &ft).unwrap().0;
    let b = finetune(loaded, &suite.train, &ft).unwrap().0;
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn k_variants_get_their_own_columns() {
    let mut cfg = moons(1);
    cfg.data.n_train = 200;
    cfg.data.n_test = 100;
    cfg.data.n_ood = 100;
    cfg.pretrain.epochs = 3;
    cfg.finetune.epochs = 1;
    cfg.variants.k_values = vec![0.0, 0.1];
    cfg.variants.gaussian_baseline = false;
    cfg.detector.odin = false;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert!(table.starts_with("ood_set,detector,standard,fig-k0,fig-k0.1\n"), "{table}");
}

#[test]
fn entropy_penalty_beats_plain_fine_tuning_on_moons() {
    let mut k0 = Vec::new();
    let mut k1 = Vec::new();
    for seed in 0..5 {
        let cfg = moons(seed);
        let suite = build_suite(&cfg).unwrap();
        let (standard, _) = pretrain_standard(&cfg, &suite).unwrap();
        for (k, out) in [(0.0, &mut k0), (0.1, &mut k1)] {
            let (m, _) = run_variant(&cfg, &standard, &suite, Variant::Fig { k }).unwrap();
            out.push(suite.bundle.evaluate_msp(&m).unwrap().mean_auroc());
        }
    }
    assert!(median(k1.clone()) >= median(k0.clone()), "{k0:?} vs {k1:?}");
}
