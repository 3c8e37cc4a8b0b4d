mod common;

use pdm_autograd::{Graph, Tensor};
use pdm_core::adversarial::{
    adversarial_losses, lsgan_term, total_degradation_loss, Discriminator, DiscriminatorConfig, LossReport, Side,
    DEFAULT_LAMBDA,
};
use pdm_core::ImagePlane;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::flat_lsgan;

#[test]
fn score_map_shapes() {
    let cfg = DiscriminatorConfig::default();
    let d = Discriminator::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (crop, side) in [(32, 4), (48, 6), (64, 8)] {
        assert_eq!(cfg.output_size(crop), side);
        let patch = ImagePlane::filled(3, crop, crop, 0.3).unwrap();
        assert_eq!(d.discriminate(&patch).unwrap().shape(), (1, side, side));
    }
    assert_eq!(cfg.receptive_field(), 22);
}

/// With left-right symmetric filters, flipping the input flips the score map.
#[test]
fn mirror_symmetric_weights_are_flip_equivariant() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut d = Discriminator::new(DiscriminatorConfig::default(), &mut r).unwrap();
    let params = d.params_mut();
    for i in 0..params.len() {
        let t = params.get_mut(i);
        if t.shape().len() != 4 {
            continue;
        }
        let kw = t.shape()[3];
        let data = t.data().to_vec();
        for (idx, v) in t.data_mut().iter_mut().enumerate() {
            let j = idx % kw;
            let mirror = idx - j + (kw - 1 - j);
            *v = 0.5 * (data[idx] + data[mirror]);
        }
    }
    let x = ImagePlane::from_fn(3, 32, 32, |_, _, _| r.random()).unwrap();
    let a = d.discriminate(&x.flip_horizontal()).unwrap();
    let b = d.discriminate(&x).unwrap().flip_horizontal();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
    }
}

#[test]
fn lsgan_flat_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let real = Tensor::from_fn(&[2, 1, 4, 4], |_| r.random::<f64>() * 3.0 - 1.0);
        let fake = Tensor::from_fn(&[2, 1, 4, 4], |_| r.random::<f64>() * 3.0 - 1.0);
        for side in [Side::Generator, Side::Discriminator] {
            let got = adversarial_losses(&real, &fake, side).unwrap();
            let want = flat_lsgan(real.data(), fake.data(), side);
            assert!((got - want).abs() <= 1e-7);
        }
        let mut g = Graph::new();
        let f = g.constant(fake.clone());
        let term = lsgan_term(&mut g, f, 1.0);
        let want = flat_lsgan(real.data(), fake.data(), Side::Generator);
        assert!((g.value(term).data()[0] - want).abs() <= 1e-7);
    }
}

#[test]
fn lsgan_examples() {
    let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
    let zeros = Tensor::zeros(&[1, 1, 2, 2]);
    assert_eq!(adversarial_losses(&ones, &zeros, Side::Discriminator).unwrap(), 0.0);
    assert_eq!(adversarial_losses(&ones, &zeros, Side::Generator).unwrap(), 1.0);
    assert_eq!(adversarial_losses(&ones, &ones, Side::Discriminator).unwrap(), 1.0);
    assert!(adversarial_losses(&ones, &Tensor::zeros(&[1, 1, 3, 2]), Side::Generator).is_err());
}

#[test]
fn total_loss_recomposes() {
    assert_eq!(DEFAULT_LAMBDA, 100.0);
    assert!((total_degradation_loss(0.25, 1e-4, 100.0) - 0.26).abs() <= 1e-12);
    let row = LossReport {
        step: 7,
        l_adv_g: 0.31,
        l_adv_d: 0.44,
        l_reg: 2.5e-4,
        l_total: total_degradation_loss(0.31, 2.5e-4, 100.0),
        sr_pixel_loss: Some(0.05),
    };
    let back = LossReport::parse_csv_row(&row.csv_row()).unwrap();
    assert!((back.l_total - (back.l_adv_g + 100.0 * back.l_reg)).abs() <= 1e-6);
}

proptest! {
    #[test]
    fn lsgan_is_non_negative(real in proptest::collection::vec(-5.0f64..5.0, 16), fake in proptest::collection::vec(-5.0f64..5.0, 16)) {
        let real = Tensor::new(&[1, 1, 4, 4], real).unwrap();
        let fake = Tensor::new(&[1, 1, 4, 4], fake).unwrap();
        prop_assert!(adversarial_losses(&real, &fake, Side::Generator).unwrap() >= 0.0);
        prop_assert!(adversarial_losses(&real, &fake, Side::Discriminator).unwrap() >= 0.0);
    }
}
