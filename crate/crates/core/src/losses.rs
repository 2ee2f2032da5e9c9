//! Adversarial, feature-matching, reconstruction and R1 objectives.
//!
//! Each loss comes in two forms: a plain function over tensors, and a
//! `*_graph` variant that records the same arithmetic on a [`Graph`].

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Mask;
use crate::math;
use crate::nets::{DiscOutput, MultiScaleDiscriminator, VideoDiscriminator};
use crate::nn::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_fm: f64,
    pub w_rec_coarse: f64,
    pub w_rec_fine: f64,
    pub w_r1: f64,
    pub w_video_adv: f64,
    pub w_video_fm: f64,
    pub gamma_discount: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_fm: 10.0,
            w_rec_coarse: 10.0,
            w_rec_fine: 10.0,
            w_r1: 10.0,
            w_video_adv: 1.0,
            w_video_fm: 10.0,
            gamma_discount: 0.99,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("w_adv", self.w_adv),
            ("w_fm", self.w_fm),
            ("w_rec_coarse", self.w_rec_coarse),
            ("w_rec_fine", self.w_rec_fine),
            ("w_r1", self.w_r1),
            ("w_video_adv", self.w_video_adv),
            ("w_video_fm", self.w_video_fm),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative number, got {w}"
                )));
            }
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma_discount must lie in (0, 1), got {}",
                self.gamma_discount
            )));
        }
        Ok(())
    }
}

fn mean_of(t: &Tensor, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|&v| f(v)).sum::<f64>() / t.len() as f64
}

/// Discriminator least-squares loss, one score map per scale, averaged over scales.
pub fn lsgan_d(real: &[&Tensor], fake: &[&Tensor]) -> f64 {
    assert_eq!(
        real.len(),
        fake.len(),
        "one real and one fake score map per scale"
    );
    assert!(!real.is_empty(), "no score maps");
    let total: f64 = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            assert_eq!(r.shape(), f.shape(), "score map shapes");
            0.5 * mean_of(r, |v| (v - 1.0) * (v - 1.0)) + 0.5 * mean_of(f, |v| v * v)
        })
        .sum();
    total / real.len() as f64
}

/// Generator least-squares loss, averaged over scales.
pub fn lsgan_g(fake: &[&Tensor]) -> f64 {
    assert!(!fake.is_empty(), "no score maps");
    fake.iter()
        .map(|f| 0.5 * mean_of(f, |v| (v - 1.0) * (v - 1.0)))
        .sum::<f64>()
        / fake.len() as f64
}

/// Mean absolute activation difference averaged over every (discriminator, layer) entry.
pub fn feature_matching(real: &[&Tensor], fake: &[&Tensor]) -> f64 {
    assert_eq!(real.len(), fake.len(), "parallel feature lists");
    if real.is_empty() {
        return 0.0;
    }
    let total: f64 = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            assert_eq!(r.shape(), f.shape(), "feature shapes");
            r.data()
                .iter()
                .zip(f.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / r.len() as f64
        })
        .sum();
    total / real.len() as f64
}

/// Chebyshev distance from every masked pixel to the nearest known pixel,
/// where pixels outside the image count as known. Unmasked pixels get 0.
pub fn chebyshev_distances(mask: &Mask) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut d: Vec<u32> = mask
        .data()
        .iter()
        .map(|&m| if m { u32::MAX } else { 0 })
        .collect();
    let at = |d: &[u32], x: isize, y: isize| -> u32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                at(&d, x - 1, y - 1),
                at(&d, x, y - 1),
                at(&d, x + 1, y - 1),
                at(&d, x - 1, y),
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(best.saturating_add(1));
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                at(&d, x + 1, y + 1),
                at(&d, x, y + 1),
                at(&d, x - 1, y + 1),
                at(&d, x + 1, y),
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(best.saturating_add(1));
        }
    }
    d
}

/// `gamma^d` on the mask, `0` elsewhere; row-major `h * w`.
pub fn discount_weights(mask: &Mask, gamma: f64) -> Vec<f64> {
    chebyshev_distances(mask)
        .into_iter()
        .zip(mask.data())
        .map(|(d, &m)| if m { math::powi(gamma, d) } else { 0.0 })
        .collect()
}

/// Stacks per-sample [`discount_weights`] into a `[N, 1, H, W]` tensor.
pub fn discount_weight_tensor(masks: &[&Mask], gamma: f64) -> Tensor {
    let first = masks.first().expect("at least one mask");
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        assert!(m.width() == w && m.height() == h, "mask sizes differ");
        data.extend(discount_weights(m, gamma));
    }
    Tensor::from_vec([masks.len(), 1, h, w], data)
}

/// `sum(w * |pred - target|) / sum(w)`, or `0` when all weights vanish.
pub fn discounted_l1(pred: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    assert!(
        pred.len() == target.len() && pred.len() == weights.len(),
        "slice lengths"
    );
    let norm: f64 = weights.iter().sum();
    if norm == 0.0 {
        return 0.0;
    }
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t).abs())
        .sum::<f64>()
        / norm
}

/// LSGAN discriminator loss on graph score maps.
pub fn lsgan_d_graph(g: &mut Graph, real: &[Var], fake: &[Var]) -> Var {
    assert!(
        !real.is_empty() && real.len() == fake.len(),
        "one real and one fake score map per scale"
    );
    let terms: Vec<Var> = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let r = g.add_scalar(r, -1.0);
            let r = g.square(r);
            let r = g.mean(r);
            let f = g.square(f);
            let f = g.mean(f);
            let s = g.add(r, f);
            g.scale(s, 0.5)
        })
        .collect();
    let total = g.add_all(&terms).unwrap();
    g.scale(total, 1.0 / real.len() as f64)
}

pub fn lsgan_g_graph(g: &mut Graph, fake: &[Var]) -> Var {
    assert!(!fake.is_empty(), "no score maps");
    let terms: Vec<Var> = fake
        .iter()
        .map(|&f| {
            let f = g.add_scalar(f, -1.0);
            let f = g.square(f);
            let f = g.mean(f);
            g.scale(f, 0.5)
        })
        .collect();
    let total = g.add_all(&terms).unwrap();
    g.scale(total, 1.0 / fake.len() as f64)
}

/// Feature matching between discriminator passes; real activations are detached.
pub fn feature_matching_graph(g: &mut Graph, real: &[DiscOutput], fake: &[DiscOutput]) -> Var {
    assert_eq!(real.len(), fake.len(), "parallel discriminator outputs");
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        assert_eq!(r.features.len(), f.features.len(), "parallel feature lists");
        for (&rf, &ff) in r.features.iter().zip(&f.features) {
            let rf = g.detach(rf);
            let d = g.sub(ff, rf);
            let d = g.abs(d);
            terms.push(g.mean(d));
        }
    }
    match g.add_all(&terms) {
        Some(total) => g.scale(total, 1.0 / terms.len() as f64),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

/// Weighted L1 with per-pixel `weights` of shape `[N, 1, H, W]` broadcast over channels.
pub fn discounted_l1_graph(g: &mut Graph, pred: Var, target: Var, weights: Var) -> Var {
    let channels = g.shape(pred)[1];
    let norm = g.value(weights).sum() * channels as f64;
    let d = g.sub(pred, target);
    let d = g.abs(d);
    let d = g.mul(d, weights);
    let s = g.sum(d);
    g.scale(s, if norm == 0.0 { 0.0 } else { 1.0 / norm })
}

/// `sum_i w_i * term_i`, leaving out zero-weight terms entirely.
pub fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Var {
    let kept: Vec<Var> = terms
        .iter()
        .filter(|(w, _)| *w != 0.0)
        .map(|&(w, t)| if w == 1.0 { t } else { g.scale(t, w) })
        .collect();
    g.add_all(&kept)
        .unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// A scalar-valued critic `S(x)` whose input gradient R1 penalizes.
pub trait Critic {
    fn score(&self, g: &mut Graph, params: &Binding, x: Var) -> Result<Var>;
}

impl<F> Critic for F
where
    F: Fn(&mut Graph, &Binding, Var) -> Result<Var>,
{
    fn score(&self, g: &mut Graph, params: &Binding, x: Var) -> Result<Var> {
        self(g, params, x)
    }
}

fn summed_scores(g: &mut Graph, outs: &[DiscOutput]) -> Var {
    let sums: Vec<Var> = outs.iter().map(|o| g.sum(o.score)).collect();
    g.add_all(&sums).expect("at least one scale")
}

/// Sum of all patch scores over all scales.
impl Critic for MultiScaleDiscriminator {
    fn score(&self, g: &mut Graph, params: &Binding, x: Var) -> Result<Var> {
        let outs = self.forward(g, params, x)?;
        Ok(summed_scores(g, &outs))
    }
}

/// One temporal stride of a [`VideoDiscriminator`] as a [`Critic`].
#[derive(Clone, Copy, Debug)]
pub struct VideoCritic<'a> {
    pub disc: &'a VideoDiscriminator,
    pub scale_index: usize,
}

impl Critic for VideoCritic<'_> {
    fn score(&self, g: &mut Graph, params: &Binding, x: Var) -> Result<Var> {
        let outs = self.disc.forward(g, params, self.scale_index, x)?;
        Ok(summed_scores(g, &outs))
    }
}

/// R1 value together with its gradient with respect to every critic parameter.
#[derive(Clone, Debug)]
pub struct R1 {
    pub value: f64,
    pub param_grads: Vec<Tensor>,
    /// `∇x S` at the real batch.
    pub input_grad: Tensor,
}

fn input_gradient<C: Critic + ?Sized>(
    critic: &C,
    params: &ParamStore,
    x: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = Binding::new(&mut g, params, false);
    let xv = g.leaf(x.clone());
    let s = critic.score(&mut g, &p, xv)?;
    let grads = g.backward(s);
    Ok(grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn param_gradient<C: Critic + ?Sized>(
    critic: &C,
    params: &ParamStore,
    x: Tensor,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = Binding::new(&mut g, params, true);
    let xv = g.constant(x);
    let s = critic.score(&mut g, &p, xv)?;
    let grads = g.backward(s);
    Ok(p.grads(&g, &grads))
}

/// R1 penalty `weight * ½ * mean_n |∇x S(x_n)|²` at the real batch `real`.
///
/// `real` must be a gradient-tracking node of `g`. The parameter gradient is
/// the Hessian-vector product `(weight / N) * ∂θ(∇x S)·∇x S`, taken as a
/// central difference of `∇θ S` along the input gradient. For critics built
/// from convolutions and (leaky) ReLUs `∇θ S` is piecewise linear in `x`, so
/// the difference is exact unless the probe crosses an activation kink.
pub fn r1_penalty<C: Critic + ?Sized>(
    g: &Graph,
    critic: &C,
    params: &ParamStore,
    real: Var,
    weight: f64,
) -> Result<R1> {
    if !g.grad_enabled() {
        return Err(Error::GradientUnavailable(
            "r1_penalty called on a graph without gradient tracking",
        ));
    }
    if !g.requires_grad(real) {
        return Err(Error::GradientUnavailable(
            "r1_penalty needs a real batch that tracks gradients",
        ));
    }
    let x = g.value(real);
    let n = x.shape()[0] as f64;
    let grad = input_gradient(critic, params, x)?;
    let sq: f64 = grad.data().iter().map(|v| v * v).sum();
    let value = weight * 0.5 * sq / n;

    let scale = grad.max_abs();
    let param_grads = if weight == 0.0 || scale == 0.0 {
        params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    } else {
        let eps = 1e-4 * x.max_abs().max(1.0) / scale;
        let probe = |sign: f64| {
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(a, d)| a + sign * eps * d)
                .collect();
            Tensor::from_vec(x.shape(), data)
        };
        let plus = param_gradient(critic, params, probe(1.0))?;
        let minus = param_gradient(critic, params, probe(-1.0))?;
        let k = weight / (n * 2.0 * eps);
        plus.into_iter()
            .zip(minus)
            .map(|(p, m)| {
                let data = p
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(a, b)| k * (a - b))
                    .collect();
                Tensor::from_vec(p.shape(), data)
            })
            .collect()
    };
    Ok(R1 {
        value,
        param_grads,
        input_grad: grad,
    })
}

/// Zero gradients for every parameter of `store`.
pub fn zero_grads(store: &ParamStore) -> Vec<Tensor> {
    store
        .values()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect()
}

/// Adds `src` into `dst` elementwise, parameter by parameter.
pub fn accumulate_grads(dst: &mut [Tensor], src: &[Tensor]) {
    assert_eq!(dst.len(), src.len(), "gradient lists");
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_assign(s);
    }
}
