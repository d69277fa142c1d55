use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twingan_autograd::{avg_pool2, conv2d, upsample2, Tensor, Var};

use super::*;
use crate::normalization::RenormLimits;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        max_resolution: 32,
        channel_schedule: vec![(4, 8), (8, 8), (16, 4), (32, 4)],
        ..NetworkConfig::default()
    }
}

fn model_at(cfg: NetworkConfig, stage: &StageState, seed: u64) -> TwinGan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TwinGan::new(cfg, stage, &mut rng).unwrap()
}

/// Grows through every stage up to `stage`, as training would.
fn grown(cfg: NetworkConfig, stage: &StageState, seed: u64) -> TwinGan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TwinGan::new(cfg, &StageState::settled(4), &mut rng).unwrap();
    let mut r = 8;
    while r <= stage.resolution {
        m.grow_networks(&StageState::growing(r, 0.0), &mut rng).unwrap();
        if r < stage.resolution || stage.phase == Phase::Reinforcement {
            m.grow_networks(&StageState::settled(r), &mut rng).unwrap();
        }
        r *= 2;
    }
    m
}

fn images(n: usize, r: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Var::constant(Tensor::from_fn([n, 3, r, r], |_| rng.gen_range(-1.0..1.0)))
}

fn lrelu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.2 * v })
}

/// Renorm at initial state in inference mode: moving mean 0, variance 1, γ=1, β=0.
fn fresh_renorm(t: &Tensor) -> Tensor {
    let s = (1.0f32 + 1e-5).sqrt();
    t.map(|v| v / s)
}

#[test]
fn encoder_shapes_and_skips() {
    let stage = StageState::settled(32);
    let m = grown(small_config(), &stage, 1);
    let (z, skips) = Forward::inference(&m).encode(&images(2, 32, 0), DomainId::A, &stage).unwrap();
    assert_eq!(z.0.shape(), [2, 8, 4, 4]);
    let got: Vec<_> = skips.entries.iter().map(|e| (e.resolution, e.features.shape()[1])).collect();
    assert_eq!(got, vec![(8, 8), (16, 8), (32, 4)]);
}

#[test]
fn base_stage_has_no_skips() {
    let stage = StageState::settled(4);
    let m = model_at(small_config(), &stage, 1);
    let (z, skips) = Forward::inference(&m).encode(&images(2, 4, 0), DomainId::B, &stage).unwrap();
    assert_eq!(z.0.shape(), [2, 8, 4, 4]);
    assert!(skips.entries.is_empty());
}

#[test]
fn encoder_alpha_zero_is_low_resolution_path() {
    let m = grown(small_config(), &StageState::growing(8, 0.0), 2);
    let x = images(3, 8, 5);
    let (z, _) = Forward::inference(&m)
        .encode(&x, DomainId::A, &StageState::growing(8, 0.0))
        .unwrap();
    let w = m.params.get("encoder.from_rgb4.weight").unwrap();
    let oracle = lrelu(&fresh_renorm(&conv2d(&avg_pool2(x.value()), w, 0)));
    assert!(z.0.value().max_abs_diff(&oracle) < 1e-6);
}

#[test]
fn generator_alpha_zero_is_upsampled_low_resolution_head() {
    let stage = StageState::growing(8, 0.0);
    let m = grown(small_config(), &stage, 3);
    let f = Forward::inference(&m);
    let (z, skips) = f.encode(&images(2, 8, 6), DomainId::A, &stage).unwrap();
    let out = f.generate(&z, &skips, DomainId::B, &stage).unwrap();
    let h = lrelu(&fresh_renorm(&conv2d(z.0.value(), m.params.get("generator.b4.conv.weight").unwrap(), 1)));
    let rms = {
        let [n, c, hh, ww] = h.shape();
        Tensor::from_fn([n, 1, hh, ww], |i| {
            let (b, p) = (i / (hh * ww), i % (hh * ww));
            let ss: f32 = (0..c).map(|ch| h.data()[(b * c + ch) * hh * ww + p].powi(2)).sum();
            (ss / c as f32 + 1e-8).sqrt()
        })
    };
    let [n, c, hh, ww] = h.shape();
    let normed = Tensor::from_fn([n, c, hh, ww], |i| {
        let (b, p) = (i / (c * hh * ww), i % (hh * ww));
        h.data()[i] / rms.data()[b * hh * ww + p]
    });
    let rgb = conv2d(&normed, m.params.get("generator.to_rgb4.weight").unwrap(), 0);
    let bias = m.params.get("generator.to_rgb4.bias").unwrap();
    let rgb = Tensor::from_fn(rgb.shape(), |i| rgb.data()[i] + bias.data()[(i / 16) % 3]);
    assert!(out.value().max_abs_diff(&upsample2(&rgb)) < 1e-5);
}

#[test]
fn alpha_one_matches_reinforcement_bitwise() {
    let m = grown(small_config(), &StageState::growing(16, 0.0), 4);
    let x = images(2, 16, 7);
    let grow = StageState::growing(16, 1.0);
    let settled = StageState::settled(16);
    let f = Forward::inference(&m);
    for (from, to) in crate::domain::DIRECTIONS {
        let a = f.translate(&x, from, to, &grow).unwrap();
        let b = f.translate(&x, from, to, &settled).unwrap();
        assert_eq!(a.value(), b.value());
    }
    for d in DomainId::ALL {
        let a = f.discriminate(&x, d, &grow).unwrap();
        let b = f.discriminate(&x, d, &settled).unwrap();
        assert_eq!(a.value(), b.value());
    }
}

#[test]
fn encoder_blend_is_linear_in_alpha() {
    let m = grown(small_config(), &StageState::growing(8, 0.0), 8);
    let x = images(2, 8, 9);
    let f = Forward::inference(&m);
    let z = |a: f32| {
        f.encode(&x, DomainId::A, &StageState::growing(8, a)).unwrap().0 .0.value().clone()
    };
    let (lo, hi, mid) = (z(0.0), z(1.0), z(0.25));
    assert!(lo.max_abs_diff(&hi) > 0.0);
    let oracle = lo.zip_map(&hi, |l, h| 0.75 * l + 0.25 * h);
    assert!(mid.max_abs_diff(&oracle) < 1e-6);
}

#[test]
fn weight_sharing_and_private_renorm() {
    let stage = StageState::settled(8);
    let mut m = grown(small_config(), &stage, 10);
    let x = images(2, 8, 11);
    let enc = |m: &TwinGan, d| {
        Forward::inference(m).encode(&x, d, &stage).unwrap().0 .0.value().clone()
    };
    let (a0, b0) = (enc(&m, DomainId::A), enc(&m, DomainId::B));
    assert_eq!(a0, b0, "identical renorm init means identical outputs");

    m.params.get_mut("encoder.b8.conv1.weight").unwrap().data_mut()[0] += 0.5;
    let (a1, b1) = (enc(&m, DomainId::A), enc(&m, DomainId::B));
    assert!(a1.max_abs_diff(&a0) > 0.0);
    assert_eq!(a1, b1, "shared weight moves both domains identically");

    m.params.get_mut("encoder.b8.conv1.renorm.a.gamma").unwrap().data_mut()[0] = 3.0;
    let (a2, b2) = (enc(&m, DomainId::A), enc(&m, DomainId::B));
    assert!(a2.max_abs_diff(&a1) > 0.0);
    assert_eq!(b2, b1, "domain-B output must not see domain-A gamma");
}

#[test]
fn forward_reads_only_its_domain() {
    let stage = StageState::settled(16);
    let m = grown(small_config(), &stage, 12);
    let f = Forward::inference(&m);
    f.translate(&images(2, 16, 0), DomainId::A, DomainId::A, &stage).unwrap();
    let touched = f.accessed();
    let allowed = m.shared_net_tensor_names(DomainId::A).unwrap();
    assert_eq!(touched, allowed);
    assert!(touched.iter().all(|n| !n.contains(".renorm.b.")));
}

#[test]
fn audit_counts_private_renorm_tensors() {
    let stage = StageState::settled(32);
    let m = grown(small_config(), &stage, 13);
    let audit = m.audit_parameters();
    assert!(audit.private_names.iter().all(|n| crate::params::is_renorm_key(n)));
    // encoder: from_rgb + 2 per level above 4; generator: base conv + 2 per level
    let levels = 3;
    let convs = (1 + 2 * levels) + (1 + 2 * levels);
    assert_eq!(audit.domain_private_tensors, 2 * convs * 4);

    let shared = NetworkConfig {
        norm: NormMode::Shared,
        ..small_config()
    };
    let m = grown(shared, &stage, 13);
    assert_eq!(m.audit_parameters().domain_private_tensors, 0);
}

#[test]
fn discriminators_are_distinct() {
    let stage = StageState::settled(8);
    let m = grown(small_config(), &stage, 14);
    let x = images(4, 8, 15);
    let f = Forward::inference(&m);
    let a = f.discriminate(&x, DomainId::A, &stage).unwrap();
    let b = f.discriminate(&x, DomainId::B, &stage).unwrap();
    assert_eq!(a.shape(), [4, 1, 1, 1]);
    assert!(a.value().max_abs_diff(b.value()) > 0.0);
}

#[test]
fn singleton_batch_discriminates() {
    let stage = StageState::settled(8);
    let m = grown(small_config(), &stage, 16);
    let s = Forward::training(&m, None, RenormLimits { r_max: 3.0, d_max: 5.0 })
        .discriminate(&images(1, 8, 0), DomainId::A, &stage)
        .unwrap();
    assert!(s.value().all_finite());
}

#[test]
fn fixed_seed_is_reproducible() {
    let stage = StageState::settled(16);
    let m1 = grown(small_config(), &stage, 17);
    let m2 = grown(small_config(), &stage, 17);
    assert_eq!(m1.params, m2.params);
    let x = images(2, 16, 18);
    let t1 = Forward::inference(&m1).translate(&x, DomainId::B, DomainId::A, &stage).unwrap();
    let t2 = Forward::inference(&m2).translate(&x, DomainId::B, DomainId::A, &stage).unwrap();
    assert_eq!(t1.value(), t2.value());
}

#[test]
fn growth_adds_exactly_the_new_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cfg = small_config();
    let mut m = TwinGan::new(cfg.clone(), &StageState::settled(4), &mut rng).unwrap();
    let before = m.params.len();
    let report = m.grow_networks(&StageState::growing(8, 0.0), &mut rng).unwrap();
    assert!(report.removed.is_empty());
    // per trunk: from_rgb8 + b8.conv1 + b8.conv2, each weight + renorm sets
    let eg = 2 * 4; // two domain sets of four fields
    let encoder = 3 * (1 + eg);
    let generator = 2 * (1 + eg) + 2; // b8 convs + to_rgb8 weight and bias
    let discs = 2 * 3 * (1 + 4);
    assert_eq!(report.added.len(), encoder + generator + discs);
    assert_eq!(m.params.len(), before + report.added.len());

    let settle = m.grow_networks(&StageState::settled(8), &mut rng).unwrap();
    assert!(settle.added.is_empty());
    let mut removed = settle.removed.clone();
    removed.sort();
    assert!(removed.iter().all(|n| n.contains("from_rgb4") || n.contains("to_rgb4")));
    assert_eq!(removed.len(), (1 + eg) + 2 + 2 * (1 + 4));

    let again = m.grow_networks(&StageState::settled(8), &mut rng).unwrap();
    assert_eq!(again, GrowReport::default());
}

#[test]
fn growth_beyond_max_is_rejected() {
    let mut m = model_at(small_config(), &StageState::settled(4), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        m.grow_networks(&StageState::growing(64, 0.0), &mut rng),
        Err(Error::GrowBeyondMax { requested: 64, max: 32 })
    ));
}

#[test]
fn contract_errors() {
    let stage = StageState::settled(8);
    let m = grown(small_config(), &stage, 21);
    let f = Forward::inference(&m);
    assert!(matches!(
        f.encode(&images(1, 16, 0), DomainId::A, &stage),
        Err(Error::ResolutionMismatch { expected: 8, actual: 16 })
    ));
    let mut bad = images(1, 8, 0).value().clone();
    bad.data_mut()[3] = f32::NAN;
    assert!(matches!(
        f.encode(&Var::constant(bad), DomainId::A, &stage),
        Err(Error::NonFinite(_))
    ));
    let (z, _) = f.encode(&images(1, 8, 0), DomainId::A, &stage).unwrap();
    assert!(f.generate(&z, &SkipStack::default(), DomainId::A, &stage).is_err());
}

#[test]
fn generator_without_unet() {
    let cfg = NetworkConfig {
        use_unet: false,
        ..small_config()
    };
    let stage = StageState::settled(16);
    let m = grown(cfg, &stage, 22);
    let f = Forward::inference(&m).with_trace();
    let (z, skips) = f.encode(&images(2, 16, 0), DomainId::A, &stage).unwrap();
    assert!(skips.entries.is_empty());
    f.take_trace();
    let out = f.generate(&z, &skips, DomainId::B, &stage).unwrap();
    assert_eq!(out.shape(), [2, 3, 16, 16]);
    assert!(f.take_trace().iter().all(|r| r.label != "Concat. UNet"));
}

#[test]
fn roundtrip_translation_keeps_shape() {
    let stage = StageState::settled(4);
    let m = model_at(small_config(), &stage, 23);
    let f = Forward::inference(&m);
    let x = images(3, 4, 1);
    let ab = f.translate(&x, DomainId::A, DomainId::B, &stage).unwrap();
    let aba = f.translate(&ab, DomainId::B, DomainId::A, &stage).unwrap();
    assert_eq!(aba.shape(), x.shape());
    assert!(aba.value().all_finite());
}

#[test]
fn training_pass_collects_moving_statistics() {
    let stage = StageState::settled(8);
    let mut m = grown(small_config(), &stage, 24);
    let updates = {
        let f = Forward::training(&m, None, RenormLimits::BATCH_NORM);
        f.translate(&images(4, 8, 2), DomainId::A, DomainId::B, &stage).unwrap();
        f.take_stat_updates()
    };
    assert!(updates.iter().any(|u| u.prefix.ends_with(".renorm.a")));
    assert!(updates.iter().any(|u| u.prefix.ends_with(".renorm.b")));
    let before = m.params.get("encoder.from_rgb8.renorm.a.moving_mean").unwrap().clone();
    m.apply_stat_updates(&updates).unwrap();
    let after = m.params.get("encoder.from_rgb8.renorm.a.moving_mean").unwrap();
    assert!(after.max_abs_diff(&before) > 0.0);
    assert_eq!(
        m.params.get("encoder.from_rgb8.renorm.b.moving_mean").unwrap(),
        &before,
        "encoder ran under domain A only"
    );
}

#[test]
fn from_params_checks_layout() {
    let stage = StageState::settled(8);
    let m = grown(small_config(), &stage, 25);
    let ok = TwinGan::from_params(m.config.clone(), m.params.clone(), &stage).unwrap();
    assert_eq!(ok.resolution(), 8);
    assert!(TwinGan::from_params(m.config.clone(), m.params.clone(), &StageState::settled(16)).is_err());
}

#[test]
fn reference_batch_scores_real_like_its_own_pass() {
    let stage = StageState::settled(8);
    let m = grown(small_config(), &stage, 40);
    let f = Forward::training(&m, None, RenormLimits::BATCH_NORM);
    let real = images(4, 8, 3);
    let (own, others) = f.discriminate_against(&real, &[&real, &images(4, 8, 4)], DomainId::B, &stage).unwrap();
    assert!(own.value().max_abs_diff(others[0].value()) < 1e-5);
    assert!(own.value().max_abs_diff(others[1].value()) > 1e-3);
    let captured = f.take_stat_updates();
    let plain = Forward::training(&m, None, RenormLimits::BATCH_NORM);
    plain.discriminate(&real, DomainId::B, &stage).unwrap();
    let own_pass = plain.take_stat_updates();
    assert_eq!(captured.len(), own_pass.len(), "only the real batch records statistics");
    for (c, o) in captured.iter().zip(&own_pass) {
        assert_eq!(c.prefix, o.prefix);
        assert!(c.mean.max_abs_diff(&o.mean) < 1e-6);
    }
}

#[test]
fn per_sample_logits_ignore_other_samples() {
    let stage = StageState::settled(8);
    let m = grown(small_config(), &stage, 41);
    let f = Forward::training(&m, None, RenormLimits::BATCH_NORM);
    assert!(matches!(
        f.discriminate_per_sample(&images(4, 8, 5), DomainId::A, &stage),
        Err(Error::Contract(_))
    ));
    f.discriminate_against(&images(4, 8, 6), &[], DomainId::A, &stage).unwrap();
    let x = images(4, 8, 7).value().clone();
    let mut samples: Vec<Tensor> = (0..4).map(|i| x.select(i)).collect();
    let before = f.discriminate_per_sample(&Var::constant(x), DomainId::A, &stage).unwrap();
    samples[1] = images(1, 8, 8).value().clone();
    let after = f.discriminate_per_sample(&Var::constant(Tensor::stack(&samples)), DomainId::A, &stage).unwrap();
    let (b, a) = (before.value().data(), after.value().data());
    assert!((b[1] - a[1]).abs() > 1e-4);
    for i in [0, 2, 3] {
        assert!((b[i] - a[i]).abs() < 1e-6, "logit {i} moved");
    }
}
