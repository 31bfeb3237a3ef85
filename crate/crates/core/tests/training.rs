use avfusion::fusion::FusionMode;
use avfusion::model::{Model, ModelConfig, Target};
use avfusion::synthdata::{generate, GenConfig, LabeledClip};
use avfusion::training::{batch_gradients, cross_validate, fold_assignment, train, Scheduler, TrainConfig};

fn clips(n: usize, frames: usize, seed: u64) -> Vec<LabeledClip> {
    generate(&GenConfig { num_videos: n, frames, d_audio: 6, d_visual: 5, seed, ..Default::default() }).unwrap()
}

fn small_model(mode: FusionMode, m: usize) -> ModelConfig {
    ModelConfig { mode, iterations: m, head_hidden: vec![8], ..Default::default() }
}

#[test]
fn masked_frames_contribute_zero_gradient() {
    for mode in FusionMode::ALL {
        let m = if mode == FusionMode::Jca { 1 } else { 2 };
        let (model, params) = Model::init::<f64>(&small_model(mode, m), Target::Joint, 6, 5, 12, 3).unwrap();
        let mut batch = clips(3, 12, 1);
        for c in &mut batch {
            c.valid[9..].iter_mut().for_each(|v| *v = false);
        }
        let refs: Vec<&LabeledClip> = batch.iter().collect();
        let seeds = [11, 12, 13];
        let (loss, grads) = batch_gradients(&model, &params, &refs, Some(&seeds)).unwrap();
        let mut poked = batch.clone();
        for c in &mut poked {
            for t in 9..12 {
                c.audio.set(0, t, 50.0);
                c.visual.set(1, t, -30.0);
                c.valence[t] = 0.9;
                c.arousal[t] = -0.9;
            }
        }
        let refs: Vec<&LabeledClip> = poked.iter().collect();
        let (loss2, grads2) = batch_gradients(&model, &params, &refs, Some(&seeds)).unwrap();
        assert_eq!(loss, loss2, "{mode}");
        assert_eq!(grads, grads2, "{mode}");
    }
}

#[test]
fn single_clip_can_be_overfit() {
    let data = clips(1, 48, 6);
    let cfg = TrainConfig {
        init_lr: 3e-3,
        warmup_epochs: 1,
        max_epochs: 200,
        early_stop_patience: 200,
        plateau_patience: 200,
        weight_decay: 0.0,
        window_length: 48,
        window_stride: 48,
        ..Default::default()
    };
    let model = ModelConfig { dropout: 0.0, ..small_model(FusionMode::Rjca, 1) };
    let out = train(&data, &data, &model, Target::Valence, &cfg).unwrap();
    assert!(out.best_val_ccc > 0.95, "train CCC {}", out.best_val_ccc);
}

#[test]
fn best_snapshot_is_restored() {
    let data = clips(8, 24, 2);
    let cfg = TrainConfig {
        init_lr: 1e-3,
        warmup_epochs: 1,
        max_epochs: 6,
        window_length: 24,
        window_stride: 24,
        ..Default::default()
    };
    let out = train(&data[..6], &data[6..], &small_model(FusionMode::Grjca, 2), Target::Arousal, &cfg).unwrap();
    let max = out.history.iter().map(|h| h.val_ccc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_ccc, max);
    assert_eq!(out.history[out.best_epoch].val_ccc, max);
    assert_eq!(out.evaluation.score(), max);
}

#[test]
fn scripted_plateau_schedule() {
    let cfg = TrainConfig {
        init_lr: 1e-3,
        min_lr: 2e-6,
        warmup_epochs: 5,
        plateau_patience: 5,
        plateau_factor: 0.1,
        ..Default::default()
    };
    let mut s = Scheduler::new(&cfg);
    let mut lrs = Vec::new();
    for epoch in 0..20 {
        for b in 0..4 {
            let lr = s.lr(epoch, b, 4);
            assert!(lr >= cfg.min_lr && lr <= cfg.init_lr, "epoch {epoch}: {lr}");
            if epoch < cfg.warmup_epochs {
                assert!((lr - cfg.init_lr * (b + 1) as f64 / 4.0).abs() < 1e-18);
            }
        }
        lrs.push(s.end_epoch(epoch, 0.5));
    }
    assert_eq!(s.drops, 3);
    assert!((lrs[5] - 1e-4).abs() < 1e-18);
    assert!((lrs[10] - 1e-5).abs() < 1e-18);
    assert_eq!(lrs[15], 2e-6);
    assert!(lrs.iter().all(|&lr| lr >= cfg.min_lr));
}

#[test]
fn improvement_resets_the_plateau_counter() {
    let cfg = TrainConfig { init_lr: 1e-3, warmup_epochs: 2, ..Default::default() };
    let mut s = Scheduler::new(&cfg);
    let seq = [0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2];
    for (e, &v) in seq.iter().enumerate() {
        s.end_epoch(e, v);
    }
    assert_eq!(s.drops, 1);
    assert!((s.current() - 1e-4).abs() < 1e-18);
}

#[test]
fn folds_partition_clips_and_cross_validation_is_deterministic() {
    let folds = fold_assignment(13, 6, 4).unwrap();
    let mut all: Vec<usize> = folds.concat();
    all.sort_unstable();
    assert_eq!(all, (0..13).collect::<Vec<_>>());
    assert_eq!(folds, fold_assignment(13, 6, 4).unwrap());
    assert!(fold_assignment(3, 6, 0).is_err());

    let data = clips(6, 20, 5);
    let cfg = TrainConfig {
        folds: 3,
        max_epochs: 2,
        warmup_epochs: 1,
        window_length: 16,
        window_stride: 11,
        targets: vec![Target::Valence],
        ..Default::default()
    };
    let model = small_model(FusionMode::Hgrjca, 2);
    let (a, best) = cross_validate(&data, &model, &cfg).unwrap();
    let (b, best_b) = cross_validate(&data, &model, &cfg).unwrap();
    assert_eq!(best, best_b);
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report, y.report);
        assert_eq!(x.outcomes[0].history, y.outcomes[0].history);
    }
    let scores: Vec<f64> = a.iter().map(|r| r.report.score()).collect();
    assert!(scores.iter().all(|&s| s <= scores[best]));
}
