use super::*;
use crate::testutil::{random_images, tiny_arch};

const SIZE: usize = 8;

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model = tiny_arch(SIZE);
    c.train.batch_size = 4;
    c.train.max_steps = Some(6);
    c.train.checkpoint_every = 0;
    c.train.seed = 3;
    c.optim.learning_rate = 1e-3;
    c
}

fn tiny_data(cfg: &TrainConfig, n: usize) -> Vec<ImageBatch> {
    cfg.data
        .domains
        .iter()
        .enumerate()
        .map(|(i, id)| ImageBatch {
            images: random_images(n, SIZE, 100 + i as u64),
            domains: vec![id.clone(); n],
            masks: None,
            scenes: None,
        })
        .collect()
}

fn trainer(cfg: TrainConfig) -> Trainer {
    let data = tiny_data(&cfg, 12);
    Trainer::new(cfg, data).unwrap()
}

/// Plain scalar Adam, written out step by step.
fn adam_oracle(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p -= lr * mhat / (vhat.sqrt() + eps);
        out.push(p);
    }
    out
}

#[test]
fn adam_matches_ten_step_scalar_trace() {
    let grads = [0.5, -1.2, 0.3, 2.0, -0.7, 0.0, 1.1, -0.4, 0.9, -2.5];
    let hyper = AdamConfig { learning_rate: 0.01, ..Default::default() };
    let want = adam_oracle(0.75, &grads, 0.01, 0.5, 0.999, 1e-8);
    let (mut p, mut m, mut v) = ([0.75f32], [0.0f32], [0.0f32]);
    for (i, g) in grads.iter().enumerate() {
        adam_step(&mut p, &[*g as f32], &mut m, &mut v, i as u64 + 1, &hyper);
        assert!((p[0] as f64 - want[i]).abs() < 1e-6, "step {}: {} vs {}", i + 1, p[0], want[i]);
    }
    // First step of Adam moves by exactly lr against the gradient sign.
    assert!((want[0] - (0.75 - 0.01)).abs() < 1e-9);
}

#[test]
fn adam_zero_gradient_keeps_fresh_params_and_decays_moments() {
    let hyper = AdamConfig::default();
    let (mut p, mut m, mut v) = ([1.5f32, -2.0], [0.0f32; 2], [0.0f32; 2]);
    adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &hyper);
    assert_eq!(p, [1.5, -2.0]);
    let (mut m, mut v) = ([0.4f32, -0.2], [0.09f32, 0.01]);
    adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, &hyper);
    assert_eq!(m, [0.4 * 0.5, -0.2 * 0.5]);
    assert_eq!(v, [(0.09f64 * 0.999) as f32, (0.01f64 * 0.999) as f32]);
}

#[test]
fn adam_constant_gradient_steps_by_learning_rate() {
    let hyper = AdamConfig { learning_rate: 1e-3, ..Default::default() };
    for g in [3.0f32, -0.02, 150.0] {
        let (mut p, mut m, mut v) = ([0.0f32], [0.0f32], [0.0f32]);
        let mut prev = 0.0f64;
        for t in 1..=200u64 {
            adam_step(&mut p, &[g], &mut m, &mut v, t, &hyper);
            let delta = p[0] as f64 - prev;
            prev = p[0] as f64;
            if t > 50 {
                assert!((delta.abs() - 1e-3).abs() < 1e-3 * 1e-2, "g={g} t={t}: {delta}");
                assert_eq!(delta.signum(), -(g.signum() as f64));
            }
        }
    }
}

#[test]
fn non_finite_gradient_aborts_without_touching_state() {
    let mut store = crate::networks::ParamStore::new();
    store.insert("a/enc/l/w", Tensor::vector(vec![1.0f32, 2.0]));
    let before = store.clone();
    let mut st = AdamState::default();
    let grads = vec![("a/enc/l/w".to_string(), Tensor::vector(vec![0.1f32, f32::NAN]))];
    let err = st.update(&mut store, &grads, &AdamConfig::default(), 7).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 7, .. }));
    assert_eq!(store, before);
    assert_eq!(st.t, 0);
}

#[test]
fn config_round_trips_through_toml() {
    let c = tiny_config();
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    let partial = TrainConfig::from_toml("[train]\nepochs = 3\n[loss]\nadv = 0.0\n").unwrap();
    assert_eq!(partial.train.epochs, 3);
    assert_eq!(partial.loss.adv, 0.0);
    assert_eq!(partial.loss.rec, 10.0);
    assert_eq!(partial.optim, AdamConfig::default());
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "[train]\nbatch_size = 0\n",
        "[optim]\nlearning_rate = -1.0\n",
        "[loss]\nrec = -0.5\n",
        "[loss]\nsigma_x = 0.0\n",
        "[data]\ndomains = [\"ink\"]\n",
        "[data]\ndomains = [\"ink\", \"ink\"]\n",
        "[train]\nepochz = 3\n",
        "[model]\nimage_size = 24\n",
        "not toml at all [",
    ] {
        assert!(matches!(TrainConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn mismatched_datasets_are_rejected() {
    let cfg = tiny_config();
    let mut data = tiny_data(&cfg, 12);
    assert!(Trainer::new(cfg.clone(), data[..1].to_vec()).is_err());
    data[1].domains[0] = "ink".into();
    assert!(Trainer::new(cfg.clone(), data).is_err());
    assert!(Trainer::new(cfg.clone(), tiny_data(&cfg, 3)).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut cfg = tiny_config();
    cfg.optim.learning_rate = 0.0;
    let mut t = trainer(cfg);
    let before = t.bundle().params.clone();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    assert_eq!(t.bundle().params, before);
}

#[test]
fn repeated_runs_log_identical_streams() {
    let a = train(tiny_config(), tiny_data(&tiny_config(), 12), None).unwrap();
    let b = train(tiny_config(), tiny_data(&tiny_config(), 12), None).unwrap();
    assert_eq!(a.log.len(), 6);
    assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.same_run(y)));
    assert_eq!(a.bundle.params, b.bundle.params);
    let mut other = tiny_config();
    other.train.seed = 4;
    let c = train(other, tiny_data(&tiny_config(), 12), None).unwrap();
    assert!(!a.log[0].same_run(&c.log[0]));
}

#[test]
fn log_records_are_monotone_finite_and_consistent() {
    let out = train(tiny_config(), tiny_data(&tiny_config(), 12), None).unwrap();
    for (i, r) in out.log.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        assert_eq!(r.elbo.len(), 2);
        assert!(r.elbo.values().all(|e| e.elbo.is_finite()));
        let want = r.losses.recombined();
        assert!((r.losses.total_gen - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {want}", r.losses.total_gen);
        assert_eq!(r.disc_accuracy.keys().collect::<Vec<_>>(), vec!["paint"]);
        let acc = r.disc_accuracy["paint"];
        assert!((0.0..=1.0).contains(&acc.real) && (0.0..=1.0).contains(&acc.fake));
        assert!(r.losses.l_adv_disc > 0.0);
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = tiny_config();
    let full = train(cfg.clone(), tiny_data(&cfg, 12), None).unwrap();
    let mut first = cfg.clone();
    first.train.max_steps = Some(3);
    let mut t = trainer(first);
    let head = run(&mut t, None, |_| {}).unwrap();
    // Carry the full step budget through the stored config.
    let mut ckpt = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
    ckpt.config = cfg.clone();
    ckpt.config_text = cfg.to_toml();
    let mut resumed = Trainer::resume(ckpt, tiny_data(&cfg, 12)).unwrap();
    let tail = run(&mut resumed, None, |_| {}).unwrap();
    let joined: Vec<_> = head.log.iter().chain(&tail.log).collect();
    assert_eq!(joined.len(), full.log.len());
    assert!(joined.iter().zip(&full.log).all(|(a, b)| a.same_run(b)));
    assert_eq!(tail.bundle.params, full.bundle.params);
}

#[test]
fn epochs_reshuffle_and_cover_every_image() {
    let mut t = trainer(tiny_config());
    let spe = t.steps_per_epoch();
    assert_eq!(spe, 3);
    let mut seen = Vec::new();
    for _ in 0..spe {
        let x = t.minibatch(0).unwrap();
        seen.extend(x.data().chunks(SIZE * SIZE * 3).map(|c| c[0].to_bits()));
        t.step += 1;
    }
    let mut all: Vec<u32> = t.data[0].images.data().chunks(SIZE * SIZE * 3).map(|c| c[0].to_bits()).collect();
    all.sort_unstable();
    seen.sort_unstable();
    assert_eq!(seen, all);
    let e1 = t.minibatch(0).unwrap();
    t.step = 0;
    assert_ne!(t.minibatch(0).unwrap(), e1);
}

#[test]
fn generator_and_discriminator_updates_touch_only_their_own_parameters() {
    let mut t = trainer(tiny_config());
    let batches: Vec<_> = (0..2).map(|d| t.minibatch(d).unwrap()).collect();
    let disc_before = t.bundle().params.checksum(is_disc);
    let gen_before = t.bundle().params.checksum(is_gen);
    let (_, _, fakes) = t.gen_update(&batches).unwrap();
    assert_eq!(t.bundle().params.checksum(is_disc), disc_before);
    let gen_after = t.bundle().params.checksum(is_gen);
    assert_ne!(gen_after, gen_before);
    t.disc_update(&batches, &fakes, true).unwrap();
    assert_eq!(t.bundle().params.checksum(is_gen), gen_after);
    assert_ne!(t.bundle().params.checksum(is_disc), disc_before);
}

#[test]
fn vae_only_training_skips_the_discriminator() {
    let mut cfg = tiny_config();
    cfg.loss.rec = 0.0;
    cfg.loss.adv = 0.0;
    let mut t = trainer(cfg);
    let disc = t.bundle().params.checksum(is_disc);
    let r = t.train_step().unwrap();
    assert_eq!(t.bundle().params.checksum(is_disc), disc);
    assert!(r.disc_accuracy.is_empty());
    assert_eq!((r.losses.l_rec, r.losses.l_adv_gen, r.losses.l_adv_disc), (0.0, 0.0, 0.0));
    assert_eq!(r.losses.total_gen, r.losses.l_ind);
}

#[test]
fn vae_only_training_lowers_held_out_loss() {
    let mut cfg = tiny_config();
    cfg.loss.rec = 0.0;
    cfg.loss.adv = 0.0;
    cfg.optim.learning_rate = 3e-3;
    cfg.train.max_steps = Some(60);
    let held = random_images(16, SIZE, 999);
    let mut t = trainer(cfg);
    let before = held_out_neg_elbo(t.bundle(), "ink", &held, 4, 0.1, 0).unwrap();
    run(&mut t, None, |_| {}).unwrap();
    let after = held_out_neg_elbo(t.bundle(), "ink", &held, 4, 0.1, 0).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert_eq!(held_out_neg_elbo(t.bundle(), "ink", &held, 4, 0.1, 0).unwrap(), after);
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.optim.learning_rate = 1e30;
    cfg.train.checkpoint_every = 1;
    cfg.train.max_steps = Some(10);
    let rd = RunDir::create(dir.path(), "boom").unwrap();
    let err = train(cfg, tiny_data(&tiny_config(), 12), Some(&rd)).err().expect("diverges");
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let text = fs::read_to_string(rd.log_path()).unwrap();
    let last: AbortRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let ckpt = last.last_checkpoint.expect("a checkpoint preceded the failure");
    assert!(ckpt.exists());
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.step, last.step);
    assert!(loaded.params.iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn run_directory_holds_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.checkpoint_every = 4;
    let rd = RunDir::create(dir.path(), "r1").unwrap();
    let out = train(cfg, tiny_data(&tiny_config(), 12), Some(&rd)).unwrap();
    assert_eq!(out.checkpoints, vec![rd.checkpoint_path(4), rd.checkpoint_path(6)]);
    let lines: Vec<TrainLogRecord> =
        fs::read_to_string(rd.log_path()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.log);
    let last = Checkpoint::load(&rd.checkpoint_path(6)).unwrap();
    assert_eq!(last.bundle().unwrap(), out.bundle);
}
