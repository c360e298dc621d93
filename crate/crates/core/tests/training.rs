//! Trainer behaviour on small synthetic datasets.

use pivotalign::alignment::LossConfig;
use pivotalign::projector::encode_head;
use pivotalign::synth::{generate, SynthConfig, SynthData};
use pivotalign::trainer::{init_heads, lr_at, steps_per_epoch, train, write_log, TrainConfig};

fn small_data(seed: u64) -> SynthData {
    generate(&SynthConfig {
        n_concepts: 30,
        samples_per_concept: 40,
        heldout_pairs: 60,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn run(data: &SynthData, cfg: &TrainConfig) -> pivotalign::trainer::TrainOutcome {
    train(
        &data.queries_c.bank,
        &data.queries_m.bank,
        &data.image_bank.bank,
        &data.multi_bank.bank,
        cfg,
    )
    .unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        seed,
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn epoch_mean_loss_goes_down() {
    let mut monotone = 0;
    for seed in 0..5 {
        let data = small_data(seed);
        let out = run(&data, &cfg(seed));
        let means = out.epoch_means();
        assert_eq!(means.len(), 5);
        assert!(means[4] < means[0], "seed {seed}: {means:?}");
        if means.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "only {monotone} of 5 seeds non-increasing");
}

#[test]
fn equal_seeds_give_identical_bytes() {
    let data = small_data(11);
    let dir = tempfile::tempdir().unwrap();
    let a = run(&data, &cfg(3));
    let b = run(&data, &cfg(3));
    assert_eq!(encode_head(&a.f_c), encode_head(&b.f_c));
    assert_eq!(encode_head(&a.f_m), encode_head(&b.f_m));
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_log(&a.log, &pa).unwrap();
    write_log(&b.log, &pb).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());

    let c = run(&data, &cfg(4));
    assert_ne!(encode_head(&a.f_c), encode_head(&c.f_c));
}

#[test]
fn no_loss_terms_leaves_only_weight_decay() {
    let data = small_data(2);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 100,
        loss: LossConfig {
            use_text: false,
            use_pseudo: false,
            use_intra: false,
            ..LossConfig::default()
        },
        ..cfg(6)
    };
    let out = run(&data, &cfg);
    let (mut c0, mut m0) = init_heads(&cfg, 64, 96).unwrap();
    let total = cfg.epochs * steps_per_epoch(data.queries_c.bank.rows(), cfg.batch_size);
    assert_eq!(out.log.len(), total);
    for (head, trained) in [(&mut c0, &out.f_c), (&mut m0, &out.f_m)] {
        for step in 0..total {
            let lr = lr_at(step, total, cfg.lr).unwrap();
            for t in head.params_mut() {
                t.iter_mut()
                    .for_each(|v| *v = (*v - lr * (cfg.weight_decay * *v)) as f32 as f64);
            }
        }
        let want = head.params_mut().map(|s| s.to_vec());
        let got = trained.clone().params_mut().map(|s| s.to_vec());
        assert_eq!(want, got);
    }
    assert!(out.log.iter().all(|r| r.loss == 0.0));
}

#[test]
fn zero_epochs_are_rejected() {
    let data = small_data(0);
    let bad = TrainConfig { epochs: 0, ..cfg(0) };
    let err = train(
        &data.queries_c.bank,
        &data.queries_m.bank,
        &data.image_bank.bank,
        &data.multi_bank.bank,
        &bad,
    )
    .unwrap_err();
    assert!(err.to_string().contains("epochs"));
}

#[test]
fn trainable_parameters_match_shapes() {
    let data = small_data(0);
    let out = run(&data, &TrainConfig { epochs: 1, ..cfg(0) });
    // 64 -> 128 -> 64 and 96 -> 192 -> 64, weights + biases + BN affine
    let clip = 64 * 128 + 128 + 2 * 128 + 128 * 64 + 64;
    let multi = 96 * 192 + 192 + 2 * 192 + 192 * 64 + 64;
    assert_eq!(out.f_c.param_count(), clip);
    assert_eq!(out.f_m.param_count(), multi);
    assert_eq!(out.trainable_params(), clip + multi);
}

#[test]
fn log_records_every_step_with_decaying_rate() {
    let data = small_data(1);
    let out = run(&data, &TrainConfig { epochs: 2, batch_size: 500, ..cfg(1) });
    // 1200 rows at B=500: two full batches and a partial one
    assert_eq!(out.log.len(), 6);
    assert!(out.log.windows(2).all(|w| w[1].lr < w[0].lr && w[1].step == w[0].step + 1));
    assert!(out.log.iter().all(|r| r.wall_ms == 0.0));
    assert_eq!(out.log[0].lr, 1e-3);
}
