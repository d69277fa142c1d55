//! Adversarial, gradient-penalty, cycle and semantic objectives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use twingan_autograd::{grad, is_grad_enabled, AutogradError, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gan: f32,
    pub lambda_cyc: f32,
    pub lambda_sem: f32,
    pub lambda_dragan: f32,
    /// Perturbation scale, in units of the batch pixel standard deviation.
    pub dragan_c: f32,
    /// Target gradient norm.
    pub dragan_k: f32,
    /// `(‖∇‖ − k)²` when set, the plain `‖∇‖ − k` otherwise.
    pub dragan_squared: bool,
    /// Lets same-domain reconstructions train against the discriminator.
    pub cycle_gan_on_reconstruction: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_cyc: 1.0,
            lambda_sem: 0.1,
            lambda_dragan: 10.0,
            dragan_c: 10.0,
            dragan_k: 1.0,
            dragan_squared: true,
            cycle_gan_on_reconstruction: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            ("lambda_gan", self.lambda_gan),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_sem", self.lambda_sem),
            ("lambda_dragan", self.lambda_dragan),
            ("dragan_c", self.dragan_c),
            ("dragan_k", self.dragan_k),
        ];
        for (name, v) in ws {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `−E[log σ(real)] − E[log(1 − σ(fake))]`.
pub fn d_loss(d_real: &Var, d_fake: &Var) -> Var {
    d_real.neg().softplus().mean_all().add(&d_fake.softplus().mean_all())
}

/// Non-saturating generator loss `−E[log σ(fake)]`.
pub fn g_loss(d_fake: &Var) -> Var {
    d_fake.neg().softplus().mean_all()
}

/// `(g_loss, d_loss)` for one discriminator.
pub fn gan_losses(d_real: &Var, d_fake: &Var) -> (Var, Var) {
    (g_loss(d_fake), d_loss(d_real, d_fake))
}

/// Gradient of `Σ disc(x)` with respect to `x`, kept differentiable.
pub fn input_gradient<F>(disc: F, x: &Tensor) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !is_grad_enabled() {
        return Err(AutogradError::HigherOrderUnavailable.into());
    }
    let xv = Var::parameter(x.clone());
    let out = disc(&xv)?;
    let g = grad(&out.sum_all(), &[xv], true)?.pop().flatten();
    Ok(g.unwrap_or_else(|| Var::constant(Tensor::zeros(x.shape()))))
}

/// Gradient penalty at Gaussian-perturbed real samples.
pub fn dragan_penalty<F>(disc: F, real: &Tensor, weights: &LossWeights, rng: &mut impl Rng) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    let n = real.shape()[0];
    if n == 0 {
        return Err(Error::Contract("gradient penalty needs a non-empty batch".into()));
    }
    let mean = real.mean();
    let std = (real.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / real.len() as f64).sqrt();
    let scale = weights.dragan_c * std as f32;
    let noise: Vec<f32> = (0..real.len()).map(|_| StandardNormal.sample(rng)).collect();
    let perturbed = Tensor::from_fn(real.shape(), |i| real.data()[i] + scale * noise[i]);
    penalty_at(disc, &perturbed, weights)
}

/// The penalty term evaluated at given points.
pub fn penalty_at<F>(disc: F, points: &Tensor, weights: &LossWeights) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    let n = points.shape()[0];
    let g = input_gradient(disc, points)?;
    let norms = g.square().sum_to([n, 1, 1, 1]).sqrt();
    let dev = norms.add_scalar(-weights.dragan_k);
    let per_sample = if weights.dragan_squared { dev.square() } else { dev };
    Ok(per_sample.mean_all().scale(weights.lambda_dragan))
}

fn l1(a: &Var, b: &Var, what: &str) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: what.to_string(),
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(a.sub(b).abs().mean_all())
}

/// Mean absolute pixel difference between an image batch and its reconstruction.
pub fn cycle_loss(x: &Var, recon: &Var) -> Result<Var> {
    l1(x, recon, "cycle loss")
}

/// Mean absolute difference between an embedding and the embedding of its translation.
pub fn semantic_loss(z: &Var, z_cycled: &Var) -> Result<Var> {
    l1(z, z_cycled, "semantic loss")
}

/// Raw term values for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Generator adversarial terms in `A→A, A→B, B→A, B→B` order.
    pub gan_g: [f64; 4],
    pub gan_d: [f64; 2],
    /// Already weighted by `lambda_dragan`.
    pub dragan: [f64; 2],
    pub cyc: f64,
    pub sem: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: [f64; 4],
    pub gan_d: [f64; 2],
    pub dragan: [f64; 2],
    pub cyc: f64,
    pub sem: f64,
    /// Encoder/generator objective.
    pub total: f64,
    /// Discriminator objective.
    pub total_d: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 12] = [
        "gan_g_aa", "gan_g_ab", "gan_g_ba", "gan_g_bb", "gan_d_a", "gan_d_b", "dragan_a", "dragan_b",
        "cyc", "sem", "total", "total_d",
    ];

    pub fn values(&self) -> [f64; 12] {
        let g = self.gan_g;
        [
            g[0], g[1], g[2], g[3], self.gan_d[0], self.gan_d[1], self.dragan[0], self.dragan[1],
            self.cyc, self.sem, self.total, self.total_d,
        ]
    }

    pub fn from_values(v: [f64; 12]) -> Self {
        Self {
            gan_g: [v[0], v[1], v[2], v[3]],
            gan_d: [v[4], v[5]],
            dragan: [v[6], v[7]],
            cyc: v[8],
            sem: v[9],
            total: v[10],
            total_d: v[11],
        }
    }

    /// Weighted encoder/generator contributions `(gan, cyc, sem)`, summing to `total`.
    pub fn contributions(&self, w: &LossWeights) -> [f64; 3] {
        [
            w.lambda_gan as f64 * self.gan_g.iter().sum::<f64>(),
            w.lambda_cyc as f64 * self.cyc,
            w.lambda_sem as f64 * self.sem,
        ]
    }
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let named = LossReport {
        gan_g: terms.gan_g,
        gan_d: terms.gan_d,
        dragan: terms.dragan,
        cyc: terms.cyc,
        sem: terms.sem,
        total: 0.0,
        total_d: 0.0,
    };
    for (name, v) in LossReport::COLUMNS.iter().zip(named.values()).take(10) {
        if !v.is_finite() {
            return Err(Error::NonFinite((*name).to_string()));
        }
    }
    let [gan, cyc, sem] = named.contributions(weights);
    let total_d = weights.lambda_gan as f64 * terms.gan_d.iter().sum::<f64>() + terms.dragan.iter().sum::<f64>();
    Ok(LossReport {
        total: gan + cyc + sem,
        total_d,
        ..named
    })
}
