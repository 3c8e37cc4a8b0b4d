mod common;

use std::sync::Arc;

use common::{tiny_config, tiny_dataset};
use pdm_core::checkpoint::{load_checkpoint, save_checkpoint};
use pdm_core::degrade::BlurKernel;
use pdm_core::trainer::{lr_schedule, train, PdmState, TrainConfig};

fn state(cfg: &pdm_core::config::Config) -> PdmState {
    PdmState::new(TrainConfig::from_config(cfg)).unwrap()
}

#[test]
fn schedule_halves_and_floors() {
    assert_eq!(lr_schedule(0, 2e-4, 5000, 1e-7), 2e-4);
    assert_eq!(lr_schedule(4999, 2e-4, 5000, 1e-7), 2e-4);
    assert_eq!(lr_schedule(5000, 2e-4, 5000, 1e-7), 1e-4);
    assert_eq!(lr_schedule(15000, 2e-4, 5000, 1e-7), 2.5e-5);
    assert_eq!(lr_schedule(200_000, 2e-4, 5000, 1e-7), 1e-7);
    assert_eq!(lr_schedule(10, 0.0, 5000, 1e-7), 0.0);
}

#[test]
fn disabled_noise_leaves_clean_output() {
    let cfg = tiny_config(&[("noise_enabled", "false")]);
    let st = state(&cfg);
    let b = tiny_dataset(&cfg).sample_batch(2, 0, 0).unwrap();
    let pair = st.synthesize_pair(&b.hr, 0).unwrap();
    assert_eq!(pair.y_ref, pair.y_clean_ref);
    assert!(pair.n.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zeros_latent_shares_one_kernel() {
    let cfg = tiny_config(&[("kernel_latent", "zeros")]);
    let st = state(&cfg);
    let b = tiny_dataset(&cfg).sample_batch(2, 0, 0).unwrap();
    let mut all = Vec::new();
    for step in [0, 1, 99] {
        let pair = st.synthesize_pair(&b.hr, step).unwrap();
        all.extend(BlurKernel::from_batch(&pair.k, 5).unwrap());
    }
    assert!(all.iter().all(|k| k == &all[0]));
    let stochastic = state(&tiny_config(&[]));
    let pair = stochastic.synthesize_pair(&b.hr, 0).unwrap();
    let ks = BlurKernel::from_batch(&pair.k, 5).unwrap();
    assert_ne!(ks[0], ks[1]);
}

/// Zero every discriminator weight and bias except the head bias, so its
/// scores are a constant that carries no gradient to the generators.
fn constant_discriminator(st: &mut PdmState) {
    let params = st.disc.params_mut();
    let names = params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if name != "head.bias" {
            params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn generators_see_only_their_own_gradients() {
    let cfg = tiny_config(&[("lambda", "0"), ("sr_enabled", "false")]);
    let ds = tiny_dataset(&cfg);
    let b = ds.sample_batch(2, 7, 0).unwrap();
    let mut st = state(&cfg);
    constant_discriminator(&mut st);
    let before = st.clone();
    let r = st.train_step(&b.hr, &b.lr).unwrap();
    assert_eq!(r.l_total, r.l_adv_g);
    assert_eq!(st.kernel_net, before.kernel_net);
    assert_eq!(st.noise_net, before.noise_net);

    // With latent-only noise the regularizer moves only the noise generator.
    let cfg = tiny_config(&[("sr_enabled", "false"), ("noise_conditioning", "latent_only")]);
    let mut st = state(&cfg);
    constant_discriminator(&mut st);
    let before = st.clone();
    st.train_step(&b.hr, &b.lr).unwrap();
    assert_eq!(st.kernel_net, before.kernel_net);
    assert_ne!(st.noise_net, before.noise_net);

    // With noise off the regularizer is identically zero.
    let cfg = tiny_config(&[("noise_enabled", "false"), ("sr_enabled", "false")]);
    let mut st = state(&cfg);
    let before = st.clone();
    let r = st.train_step(&b.hr, &b.lr).unwrap();
    assert_eq!(r.l_reg, 0.0);
    assert_eq!(st.noise_net, before.noise_net);
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let cfg = tiny_config(&[("lr", "0"), ("sr_adversarial", "true")]);
    let ds = tiny_dataset(&cfg);
    let mut st = state(&cfg);
    let before = st.clone();
    for step in 0..3 {
        let b = ds.sample_batch(2, 7, step).unwrap();
        st.train_step(&b.hr, &b.lr).unwrap();
    }
    assert_eq!(st.kernel_net, before.kernel_net);
    assert_eq!(st.noise_net, before.noise_net);
    assert_eq!(st.disc, before.disc);
    assert_eq!(st.sr_net, before.sr_net);
    assert_eq!(st.hr_disc, before.hr_disc);
    assert_eq!(st.step, 3);
}

#[test]
fn sr_training_does_not_touch_the_degradation_model() {
    let ds = tiny_dataset(&tiny_config(&[]));
    let mut with_sr = state(&tiny_config(&[("sr_enabled", "true")]));
    let mut without = state(&tiny_config(&[("sr_enabled", "false")]));
    for step in 0..5 {
        let b = ds.sample_batch(2, 7, step).unwrap();
        let a = with_sr.train_step(&b.hr, &b.lr).unwrap();
        let c = without.train_step(&b.hr, &b.lr).unwrap();
        assert_eq!((a.l_adv_g, a.l_adv_d, a.l_reg), (c.l_adv_g, c.l_adv_d, c.l_reg));
        assert!(a.sr_pixel_loss.is_some() && c.sr_pixel_loss.is_none());
    }
    assert_eq!(with_sr.kernel_net, without.kernel_net);
    assert_eq!(with_sr.noise_net, without.noise_net);
    assert_eq!(with_sr.disc, without.disc);
}

#[test]
fn checkpoint_round_trip_continues_identically() {
    let cfg = tiny_config(&[("sr_adversarial", "true")]);
    let ds = tiny_dataset(&cfg);
    let mut st = state(&cfg);
    for step in 0..3 {
        let b = ds.sample_batch(2, 7, step).unwrap();
        st.train_step(&b.hr, &b.lr).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&path, &cfg, &st).unwrap();
    let (cfg2, mut restored) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2.to_text(), cfg.to_text());
    assert_eq!(restored, st);
    let b = ds.sample_batch(2, 7, 3).unwrap();
    let a = st.train_step(&b.hr, &b.lr).unwrap();
    let c = restored.train_step(&b.hr, &b.lr).unwrap();
    assert_eq!(a, c);
    assert_eq!(restored, st);
}

#[test]
fn short_run_stays_healthy() {
    let cfg = tiny_config(&[("total_steps", "500"), ("log_interval", "1000"), ("checkpoint_interval", "250")]);
    let dir = tempfile::tempdir().unwrap();
    let (st, summary) = train(&cfg, state(&cfg), Arc::new(tiny_dataset(&cfg)), dir.path()).unwrap();
    assert_eq!(st.step, 500);
    assert_eq!(summary.checkpoints.len(), 2);
    let rows = pdm_core::adversarial::read_loss_log(&summary.loss_log).unwrap();
    assert_eq!(rows.len(), 500);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert!(r.is_finite());
        assert!((r.l_total - (r.l_adv_g + 100.0 * r.l_reg)).abs() <= 1e-6);
    }
    let b = tiny_dataset(&cfg).sample_batch(2, 0, 0).unwrap();
    let pair = st.synthesize_pair(&b.hr, 0).unwrap();
    for k in BlurKernel::from_batch(&pair.k, 5).unwrap() {
        k.check_simplex(1e-5).unwrap();
    }
}
