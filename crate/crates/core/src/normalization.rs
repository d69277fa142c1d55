//! Domain-adaptive batch renormalization, pixelwise feature normalization and
//! the minibatch standard-deviation feature.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use twingan_autograd::{Tensor, Var};

use crate::domain::DomainId;
use crate::error::{Error, Result};

pub const PIXELNORM_EPSILON: f32 = 1e-8;

/// Clamp limits for the renorm correction terms `r` and `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenormLimits {
    pub r_max: f32,
    pub d_max: f32,
}

impl RenormLimits {
    /// Limits that reduce batch renormalization to plain batch normalization.
    pub const BATCH_NORM: RenormLimits = RenormLimits { r_max: 1.0, d_max: 0.0 };
}

/// Linear ramp of the clamp limits from `(1, 0)` to `(r_max, d_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenormConfig {
    pub r_max: f32,
    pub d_max: f32,
    /// Ramp length, in stages.
    pub ramp_stages: f64,
    pub momentum: f32,
    pub epsilon: f32,
}

impl Default for RenormConfig {
    fn default() -> Self {
        Self {
            r_max: 3.0,
            d_max: 5.0,
            ramp_stages: 2.0,
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }
}

impl RenormConfig {
    pub fn limits_at(&self, global_images_seen: u64, stage_length: u64) -> RenormLimits {
        let ramp = self.ramp_stages * stage_length as f64;
        let t = if ramp <= 0.0 {
            1.0
        } else {
            (global_images_seen as f64 / ramp).min(1.0)
        } as f32;
        RenormLimits {
            r_max: 1.0 + (self.r_max - 1.0) * t,
            d_max: self.d_max * t,
        }
    }
}

/// One domain's renorm state: trainable affine pair plus moving statistics.
#[derive(Clone, Debug)]
pub struct RenormSet {
    pub gamma: Var,
    pub beta: Var,
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
}

impl RenormSet {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Var::constant(Tensor::ones([1, channels, 1, 1])),
            beta: Var::constant(Tensor::zeros([1, channels, 1, 1])),
            moving_mean: Tensor::zeros([1, channels, 1, 1]),
            moving_var: Tensor::ones([1, channels, 1, 1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[1]
    }
}

/// Per-domain renorm parameter sets with shared hyper-parameters.
#[derive(Clone, Debug)]
pub struct RenormParams {
    pub sets: BTreeMap<DomainId, RenormSet>,
    pub limits: RenormLimits,
    pub momentum: f32,
    pub epsilon: f32,
}

#[derive(Clone, Debug)]
pub struct RenormOutput {
    pub output: Var,
    /// Updated moving statistics; unchanged in inference mode.
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
    /// Batch mean and biased variance; `None` in inference mode.
    pub batch_stats: Option<(Tensor, Tensor)>,
}

pub fn batch_renorm(
    x: &Var,
    domain: DomainId,
    training: bool,
    params: &RenormParams,
) -> Result<RenormOutput> {
    let set = params
        .sets
        .get(&domain)
        .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    renorm_with_set(x, set, training, params.limits, params.momentum, params.epsilon)
}

pub fn renorm_with_set(
    x: &Var,
    set: &RenormSet,
    training: bool,
    limits: RenormLimits,
    momentum: f32,
    epsilon: f32,
) -> Result<RenormOutput> {
    renorm_impl(x, set, training, limits, momentum, epsilon, None)
}

/// Training-mode renorm that normalizes with supplied batch statistics
/// (typically captured from a reference batch) instead of `x`'s own.
pub fn renorm_with_stats(
    x: &Var,
    set: &RenormSet,
    mean: &Var,
    var: &Var,
    limits: RenormLimits,
    epsilon: f32,
) -> Result<RenormOutput> {
    renorm_impl(x, set, true, limits, 1.0, epsilon, Some((mean, var)))
}

fn renorm_impl(
    x: &Var,
    set: &RenormSet,
    training: bool,
    limits: RenormLimits,
    momentum: f32,
    epsilon: f32,
    given: Option<(&Var, &Var)>,
) -> Result<RenormOutput> {
    let [n, c, _, _] = x.shape();
    if c != set.channels() {
        return Err(Error::ShapeMismatch {
            context: "batch_renorm channels".into(),
            expected: [n, set.channels(), x.shape()[2], x.shape()[3]],
            actual: x.shape(),
        });
    }
    let stat_shape = [1, c, 1, 1];
    let moving_sigma = set.moving_var.map(|v| (v.max(0.0) + epsilon).sqrt());

    if !training {
        let mean = Var::constant(set.moving_mean.clone());
        let sigma = Var::constant(moving_sigma);
        let normalized = x.sub(&mean).div(&sigma);
        return Ok(RenormOutput {
            output: normalized.mul(&set.gamma).add(&set.beta),
            moving_mean: set.moving_mean.clone(),
            moving_var: set.moving_var.clone(),
            batch_stats: None,
        });
    }
    if n == 0 {
        return Err(Error::Contract("batch_renorm needs a non-empty batch in training mode".into()));
    }

    let (mean, centered, var) = match given {
        Some((mean, var)) => (mean.clone(), x.sub(mean), var.clone()),
        None => {
            let mean = x.mean_to(stat_shape);
            let centered = x.sub(&mean);
            let var = centered.square().mean_to(stat_shape);
            (mean, centered, var)
        }
    };
    let sigma = var.add_scalar(epsilon).sqrt();

    // r and d are treated as constants for differentiation.
    let (r_max, d_max) = (limits.r_max.max(1.0), limits.d_max.max(0.0));
    let batch_sigma = sigma.value();
    let r = batch_sigma.zip_map(&moving_sigma, |s, m| (s / m).clamp(1.0 / r_max, r_max));
    let d = mean
        .value()
        .zip_map(&set.moving_mean, |mb, mm| mb - mm)
        .zip_map(&moving_sigma, |diff, m| (diff / m).clamp(-d_max, d_max));

    let mut normalized = centered.div(&sigma);
    if r.data().iter().any(|&v| v != 1.0) {
        normalized = normalized.mul(&Var::constant(r));
    }
    if d.data().iter().any(|&v| v != 0.0) {
        normalized = normalized.add(&Var::constant(d));
    }
    let output = normalized.mul(&set.gamma).add(&set.beta);

    let keep = momentum;
    let moving_mean = set
        .moving_mean
        .zip_map(mean.value(), |m, b| keep * m + (1.0 - keep) * b);
    let moving_var = set
        .moving_var
        .zip_map(var.value(), |m, b| keep * m + (1.0 - keep) * b);
    Ok(RenormOutput {
        output,
        moving_mean,
        moving_var,
        batch_stats: Some((mean.value().clone(), var.value().clone())),
    })
}

/// Divides each spatial position's channel vector by its RMS.
pub fn pixelnorm(x: &Var) -> Var {
    let [n, _, h, w] = x.shape();
    let rms = x
        .square()
        .mean_to([n, 1, h, w])
        .add_scalar(PIXELNORM_EPSILON)
        .sqrt();
    x.div(&rms)
}

/// Appends one channel holding the batch-wide mean of per-feature standard deviations.
pub fn minibatch_stddev(x: &Var) -> Var {
    let [n, _, h, w] = x.shape();
    x.concat_channels(&minibatch_stddev_value(x).expand([n, 1, h, w]))
}

/// The scalar that [`minibatch_stddev`] appends, shape `[1, 1, 1, 1]`.
pub fn minibatch_stddev_value(x: &Var) -> Var {
    let [_, c, h, w] = x.shape();
    let mean = x.mean_to([1, c, h, w]);
    x.sub(&mean).square().mean_to([1, c, h, w]).sqrt().mean_to([1, 1, 1, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use twingan_autograd::grad;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    /// Plain batch normalization computed in f64.
    fn batch_norm_oracle(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f64> {
        let [n, c, h, w] = x.shape();
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let mut vals = Vec::new();
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        vals.push(x.at(b, ch, i, j) as f64);
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let idx = ((b * c + ch) * h + i) * w + j;
                        out[idx] = gamma[ch] as f64 * (x.data()[idx] as f64 - m) / (v + eps).sqrt()
                            + beta[ch] as f64;
                    }
                }
            }
        }
        out
    }

    fn two_domain_params(c: usize) -> RenormParams {
        let mut sets = BTreeMap::new();
        let mut a = RenormSet::identity(c);
        a.gamma = Var::parameter(Tensor::from_fn([1, c, 1, 1], |i| 1.0 + 0.1 * i as f32));
        a.beta = Var::parameter(Tensor::from_fn([1, c, 1, 1], |i| -0.2 * i as f32));
        let mut b = RenormSet::identity(c);
        b.gamma = Var::parameter(Tensor::from_fn([1, c, 1, 1], |i| 0.5 - 0.05 * i as f32));
        b.beta = Var::parameter(Tensor::from_fn([1, c, 1, 1], |i| 0.3 + 0.1 * i as f32));
        b.moving_mean = Tensor::full([1, c, 1, 1], 0.4);
        b.moving_var = Tensor::full([1, c, 1, 1], 2.0);
        sets.insert(DomainId::A, a);
        sets.insert(DomainId::B, b);
        RenormParams {
            sets,
            limits: RenormLimits::BATCH_NORM,
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }

    #[test]
    fn identity_limits_reduce_to_batch_norm() {
        let x = random([6, 3, 4, 4], 1);
        let params = two_domain_params(3);
        let out = batch_renorm(&Var::constant(x.clone()), DomainId::B, true, &params).unwrap();
        let set = &params.sets[&DomainId::B];
        let oracle = batch_norm_oracle(
            &x,
            set.gamma.value().data(),
            set.beta.value().data(),
            1e-5,
        );
        for (a, b) in out.output.value().data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn domains_differ_by_affine_difference() {
        let x = Var::constant(random([4, 3, 2, 2], 2));
        let mut params = two_domain_params(3);
        // same moving statistics so only the affine pair differs
        params.sets.get_mut(&DomainId::B).unwrap().moving_mean = Tensor::zeros([1, 3, 1, 1]);
        params.sets.get_mut(&DomainId::B).unwrap().moving_var = Tensor::ones([1, 3, 1, 1]);
        let ya = batch_renorm(&x, DomainId::A, true, &params).unwrap().output;
        let yb = batch_renorm(&x, DomainId::B, true, &params).unwrap().output;
        let unit = RenormSet::identity(3);
        let mut p = params.clone();
        p.sets.insert(DomainId::A, unit);
        let xhat = batch_renorm(&x, DomainId::A, true, &p).unwrap().output;
        let (sa, sb) = (&params.sets[&DomainId::A], &params.sets[&DomainId::B]);
        let dg = sa.gamma.value().zip_map(sb.gamma.value(), |a, b| a - b);
        let db = sa.beta.value().zip_map(sb.beta.value(), |a, b| a - b);
        let expected = xhat
            .mul(&Var::constant(dg))
            .add(&Var::constant(db));
        let diff = ya.sub(&yb);
        assert!(diff.value().max_abs_diff(expected.value()) < 1e-5);
    }

    #[test]
    fn matching_statistics_give_same_output_in_both_modes() {
        // Build a batch whose per-channel moments equal the moving statistics.
        let c = 2;
        let raw = random([8, c, 3, 3], 3);
        let x = Var::constant(raw);
        let mean = x.mean_to([1, c, 1, 1]);
        let var = x.sub(&mean).square().mean_to([1, c, 1, 1]);
        let mut params = two_domain_params(c);
        params.limits = RenormLimits { r_max: 3.0, d_max: 5.0 };
        {
            let set = params.sets.get_mut(&DomainId::A).unwrap();
            set.moving_mean = mean.value().clone();
            set.moving_var = var.value().clone();
        }
        let train = batch_renorm(&x, DomainId::A, true, &params).unwrap().output;
        let infer = batch_renorm(&x, DomainId::A, false, &params).unwrap().output;
        assert!(train.value().max_abs_diff(infer.value()) < 1e-5);
    }

    #[test]
    fn identity_limits_standardize_large_batches() {
        let c = 3;
        let x = Var::constant(random([64, c, 4, 4], 4).map(|v| 3.0 * v + 1.0));
        let mut set = RenormSet::identity(c);
        set.moving_mean = Tensor::full([1, c, 1, 1], 1.0);
        set.moving_var = Tensor::full([1, c, 1, 1], 12.0);
        let out = renorm_with_set(&x, &set, true, RenormLimits { r_max: 3.0, d_max: 5.0 }, 0.99, 1e-5)
            .unwrap()
            .output;
        let bn = renorm_with_set(&x, &set, true, RenormLimits::BATCH_NORM, 0.99, 1e-5)
            .unwrap()
            .output;
        let m = bn.mean_to([1, c, 1, 1]);
        let v = bn.sub(&m).square().mean_to([1, c, 1, 1]);
        for ch in 0..c {
            assert!(m.value().data()[ch].abs() < 1e-4);
            assert!((v.value().data()[ch] - 1.0).abs() < 1e-4);
        }
        assert!(out.value().all_finite());
    }

    #[test]
    fn moving_statistics_follow_momentum() {
        let x = Var::constant(Tensor::from_fn([2, 1, 1, 2], |i| i as f32));
        let set = RenormSet::identity(1);
        let out = renorm_with_set(&x, &set, true, RenormLimits::BATCH_NORM, 0.9, 1e-5).unwrap();
        assert!((out.moving_mean.data()[0] - 0.15).abs() < 1e-6);
        assert!((out.moving_var.data()[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-6);
        let inf = renorm_with_set(&x, &set, false, RenormLimits::BATCH_NORM, 0.9, 1e-5).unwrap();
        assert_eq!(inf.moving_mean, set.moving_mean);
    }

    #[test]
    fn zero_variance_batch_is_finite() {
        let x = Var::constant(Tensor::full([4, 2, 2, 2], 0.7));
        let out = renorm_with_set(&x, &RenormSet::identity(2), true, RenormLimits::BATCH_NORM, 0.99, 1e-5)
            .unwrap();
        assert!(out.output.value().all_finite());
    }

    #[test]
    fn inactive_domain_gets_no_gradient() {
        let x = Var::parameter(random([4, 3, 2, 2], 5));
        let params = two_domain_params(3);
        let y = batch_renorm(&x, DomainId::A, true, &params).unwrap().output;
        let loss = y.square().sum_all();
        let (a, b) = (&params.sets[&DomainId::A], &params.sets[&DomainId::B]);
        let g = grad(&loss, &[a.gamma.clone(), a.beta.clone(), b.gamma.clone(), b.beta.clone()], false)
            .unwrap();
        assert!(g[0].is_some() && g[1].is_some());
        assert!(g[2].is_none() && g[3].is_none());
    }

    #[test]
    fn missing_domain_is_an_error() {
        let mut params = two_domain_params(2);
        params.sets.remove(&DomainId::B);
        let x = Var::constant(Tensor::ones([1, 2, 1, 1]));
        assert!(matches!(
            batch_renorm(&x, DomainId::B, false, &params),
            Err(Error::UnknownDomain(_))
        ));
    }

    #[test]
    fn limits_ramp_linearly() {
        let cfg = RenormConfig::default();
        assert_eq!(cfg.limits_at(0, 100), RenormLimits::BATCH_NORM);
        let half = cfg.limits_at(100, 100);
        assert!((half.r_max - 2.0).abs() < 1e-6 && (half.d_max - 2.5).abs() < 1e-6);
        assert_eq!(cfg.limits_at(500, 100), RenormLimits { r_max: 3.0, d_max: 5.0 });
    }

    #[test]
    fn pixelnorm_examples() {
        let ones = Var::constant(Tensor::ones([2, 5, 3, 3]));
        assert!(pixelnorm(&ones).value().max_abs_diff(ones.value()) < 1e-6);
        let zeros = Var::constant(Tensor::zeros([1, 4, 2, 2]));
        assert_eq!(pixelnorm(&zeros).value(), zeros.value());

        let x = random([3, 6, 2, 2], 6);
        let y = pixelnorm(&Var::constant(x.clone()));
        for n in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let ms: f64 = (0..6).map(|c| (y.value().at(n, c, i, j) as f64).powi(2)).sum::<f64>() / 6.0;
                    assert!((ms.sqrt() - 1.0).abs() < 1e-4);
                }
            }
        }
        let twice = pixelnorm(&y);
        let rel = twice.value().max_abs_diff(y.value()) / 2.0;
        assert!(rel < 1e-5);
    }

    #[test]
    fn minibatch_stddev_examples() {
        let x = random([3, 4, 4, 4], 7);
        let y = minibatch_stddev(&Var::constant(x));
        assert_eq!(y.shape(), [3, 5, 4, 4]);

        let same = Tensor::stack(&[random([1, 2, 2, 2], 8), random([1, 2, 2, 2], 8)]);
        let y = minibatch_stddev(&Var::constant(same));
        for n in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y.value().at(n, 2, i, j), 0.0);
                }
            }
        }

        // {v, -v}: population std per feature is |v|
        let v = random([1, 2, 2, 2], 9);
        let pair = Tensor::stack(&[v.clone(), v.map(|a| -a)]);
        let y = minibatch_stddev(&Var::constant(pair));
        let expected = v.data().iter().map(|a| a.abs() as f64).sum::<f64>() / v.len() as f64;
        assert!((y.value().at(1, 2, 1, 1) as f64 - expected).abs() < 1e-6);

        let single = minibatch_stddev(&Var::constant(random([1, 2, 4, 4], 10)));
        assert_eq!(single.value().at(0, 2, 0, 0), 0.0);
    }

    #[test]
    fn supplied_statistics_are_applied_as_given() {
        let (reference, x) = (random([6, 2, 3, 3], 11), random([4, 2, 3, 3], 12).map(|v| 3.0 * v + 1.0));
        let set = two_domain_params(2).sets[&DomainId::B].clone();
        let limits = RenormLimits { r_max: 3.0, d_max: 5.0 };
        let own = renorm_with_set(&Var::constant(reference.clone()), &set, true, limits, 0.99, 1e-5).unwrap();
        let (mean, var) = own.batch_stats.clone().unwrap();
        let (mean, var) = (Var::constant(mean), Var::constant(var));
        let again = renorm_with_stats(&Var::constant(reference), &set, &mean, &var, limits, 1e-5).unwrap();
        assert!(again.output.value().max_abs_diff(own.output.value()) < 1e-6);

        // with constant statistics each output sample depends on its own input only
        let xv = Var::parameter(x);
        let out = renorm_with_stats(&xv, &set, &mean, &var, limits, 1e-5).unwrap();
        let first = out.output.reshape([1, 72, 1, 1]).narrow_channels(0, 18).sum_all();
        let g = grad(&first, &[xv], false).unwrap()[0].clone().unwrap();
        assert!(g.value().data()[18..].iter().all(|&v| v == 0.0));
        assert!(g.value().data()[..18].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn minibatch_stddev_gradient_is_finite_for_identical_samples() {
        let x = Var::parameter(Tensor::full([2, 1, 2, 2], 0.5));
        let y = minibatch_stddev(&x).sum_all();
        let g = grad(&y, &[x], false).unwrap()[0].clone().unwrap();
        assert!(g.value().all_finite());
    }
}
