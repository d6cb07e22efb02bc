//! Adversarial, identity, pose and pixel-wise losses, the equilibrium
//! controller, and the one-dimensional Wasserstein bound behind it.
//!
//! All losses are batch means. Logarithms are guarded with [`LOG_EPS`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

pub const LOG_EPS: f64 = 1e-7;

/// Weights of the four terms of one network's objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TermWeights {
    pub adversarial: f64,
    pub identity: f64,
    pub pose: f64,
    pub pixel: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { adversarial: 1.0, identity: 1.0, pose: 0.1, pixel: 10.0 }
    }
}

impl TermWeights {
    pub const ZERO: TermWeights = TermWeights { adversarial: 0.0, identity: 0.0, pose: 0.0, pixel: 0.0 };

    fn validate(&self, who: &str) -> Result<()> {
        let all = [self.adversarial, self.identity, self.pose, self.pixel];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("{who} loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// `lambda` (discriminator) and `mu` (generator) weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub discriminator: TermWeights,
    pub generator: TermWeights,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        self.discriminator.validate("discriminator")?;
        self.generator.validate("generator")
    }
}

/// The four unweighted terms of one objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<V> {
    pub adversarial: V,
    pub identity: V,
    pub pose: V,
    pub pixel: V,
}

/// `w_a L_adv + w_d L_id + w_c L_pose + w_r L_pixel` on the graph.
pub fn weighted_total<T: Real>(g: &mut Graph<T>, parts: &LossParts<Var>, w: &TermWeights) -> Result<Var> {
    let terms = [
        (parts.adversarial, w.adversarial),
        (parts.identity, w.identity),
        (parts.pose, w.pose),
        (parts.pixel, w.pixel),
    ];
    let mut total: Option<Var> = None;
    for (v, weight) in terms {
        let s = g.scale(v, T::from_f64_lossy(weight))?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.unwrap())
}

/// Scalar form of [`weighted_total`].
pub fn weighted_total_value(parts: &LossParts<f64>, w: &TermWeights) -> f64 {
    w.adversarial * parts.adversarial + w.identity * parts.identity + w.pose * parts.pose + w.pixel * parts.pixel
}

/// Controller state `k_t` with its gain, diversity ratio and norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumState {
    pub k: f64,
    pub lambda_k: f64,
    pub beta: f64,
    /// Exponent of the auto-encoder loss, 1 or 2.
    pub eta: u32,
}

impl Default for EquilibriumState {
    fn default() -> Self {
        EquilibriumState { k: 0.0, lambda_k: 0.001, beta: 0.9, eta: 1 }
    }
}

impl EquilibriumState {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::Config(format!("k must lie in [0,1], got {}", self.k)));
        }
        if !(self.lambda_k >= 0.0 && self.lambda_k.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("lambda_k and beta must be finite and non-negative".into()));
        }
        if self.eta != 1 && self.eta != 2 {
            return Err(Error::Config(format!("eta must be 1 or 2, got {}", self.eta)));
        }
        Ok(())
    }

    /// `k <- clamp(k + lambda_k (beta L_real - L_fake), 0, 1)`.
    pub fn update(&self, l_real: f64, l_fake: f64) -> EquilibriumState {
        EquilibriumState { k: (self.k + self.lambda_k * (self.beta * l_real - l_fake)).clamp(0.0, 1.0), ..*self }
    }

    /// `|beta L_real - L_fake|`.
    pub fn residual(&self, l_real: f64, l_fake: f64) -> f64 {
        (self.beta * l_real - l_fake).abs()
    }
}

/// Per-step record of every loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub d_adv: f64,
    pub d_id: f64,
    pub d_pose: f64,
    pub d_pixel: f64,
    pub g_adv: f64,
    pub g_id: f64,
    pub g_pose: f64,
    pub g_pixel: f64,
    pub d_total: f64,
    pub g_total: f64,
    /// `L(x)` on the real batch of the discriminator update.
    pub l_real: f64,
    /// `L(G(x))` on the generated batch of the discriminator update.
    pub l_fake: f64,
    /// `k_t` after this step's update.
    pub k: f64,
}

impl LossReport {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("d_adv", self.d_adv),
            ("d_id", self.d_id),
            ("d_pose", self.d_pose),
            ("d_pixel", self.d_pixel),
            ("g_adv", self.g_adv),
            ("g_id", self.g_id),
            ("g_pose", self.g_pose),
            ("g_pixel", self.g_pixel),
            ("d_total", self.d_total),
            ("g_total", self.g_total),
            ("k", self.k),
        ];
        terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn check_probabilities<T: Real>(g: &Graph<T>, p: Var, what: &str) -> Result<()> {
    if let Some(bad) = g.value(p).data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::numeric(format!("{what}: probability {bad} outside [0,1]")));
    }
    Ok(())
}

fn neg_mean_log<T: Real>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let l = g.log_eps(p, T::from_f64_lossy(LOG_EPS))?;
    let m = g.mean(l)?;
    g.scale(m, -T::one())
}

/// `L = mean |x - recon|^eta`.
pub fn autoencoder_loss<T: Real>(g: &mut Graph<T>, x: Var, recon: Var, eta: u32) -> Result<Var> {
    same_shape(g, x, recon, "autoencoder_loss")?;
    let d = g.sub(x, recon)?;
    let p = match eta {
        1 => g.abs(d)?,
        2 => g.square(d)?,
        _ => return Err(Error::Argument(format!("eta must be 1 or 2, got {eta}"))),
    };
    g.mean(p)
}

/// `E[-log a_real] + E[-log(1 - a_fake)]`.
pub fn d_adv_loss<T: Real>(g: &mut Graph<T>, a_real: Var, a_fake: Var) -> Result<Var> {
    check_probabilities(g, a_real, "d_adv_loss")?;
    check_probabilities(g, a_fake, "d_adv_loss")?;
    let real = neg_mean_log(g, a_real)?;
    let neg = g.scale(a_fake, -T::one())?;
    let one_minus = g.add_scalar(neg, T::one())?;
    let fake = neg_mean_log(g, one_minus)?;
    g.add(real, fake)
}

/// `E[-log a_fake]`.
pub fn g_adv_loss<T: Real>(g: &mut Graph<T>, a_fake: Var) -> Result<Var> {
    check_probabilities(g, a_fake, "g_adv_loss")?;
    neg_mean_log(g, a_fake)
}

/// Mean negative log-probability of the labelled class; used for identity
/// and for binned pose classification.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    check_probabilities(g, probs, "classification_loss")?;
    let picked = g.gather(probs, labels)?;
    neg_mean_log(g, picked)
}

pub fn d_id_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    classification_loss(g, probs, labels)
}

/// `mean |c_hat - target|`.
pub fn pose_regression_loss<T: Real>(g: &mut Graph<T>, c_hat: Var, target: Var) -> Result<Var> {
    same_shape(g, c_hat, target, "pose_regression_loss")?;
    let d = g.sub(c_hat, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `L(x) - k L(G(x))`.
pub fn d_pixel_loss<T: Real>(g: &mut Graph<T>, l_real: Var, l_fake: Var, k: f64) -> Result<Var> {
    let s = g.scale(l_fake, T::from_f64_lossy(k))?;
    g.sub(l_real, s)
}

/// `L(G(x))`; the generator's pixel loss is the fake reconstruction loss itself.
pub fn g_pixel_loss(l_fake: Var) -> Var {
    l_fake
}

/// Equal-width pose class of `code` among `classes` bins spanning
/// `[-extent, extent]`; codes outside fall in the end bins.
pub fn pose_class(code: f64, extent: f64, classes: usize) -> usize {
    let t = (code + extent) / (2.0 * extent) * classes as f64;
    (t.floor().max(0.0) as usize).min(classes - 1)
}

/// `(|m_1 - m_2|, W_1)` for two empirical distributions on the line. The
/// exact distance integrates `|F_1 - F_2|` between sorted sample points.
pub fn wasserstein_lower_bound(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("wasserstein bound needs non-empty sample sets".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Argument("sample sets must be finite".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bound = (mean(a) - mean(b)).abs();

    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let exact = if sa.len() == sb.len() {
        sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64
    } else {
        let (na, nb) = (sa.len() as f64, sb.len() as f64);
        let (mut i, mut j) = (0, 0);
        let mut prev = sa[0].min(sb[0]);
        let mut w = 0.0;
        while i < sa.len() || j < sb.len() {
            let next = match (sa.get(i), sb.get(j)) {
                (Some(&x), Some(&y)) => x.min(y),
                (Some(&x), None) => x,
                (None, Some(&y)) => y,
                (None, None) => unreachable!(),
            };
            w += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
            while i < sa.len() && sa[i] == next {
                i += 1;
            }
            while j < sb.len() && sb[j] == next {
                j += 1;
            }
            prev = next;
        }
        w
    };
    Ok((bound, exact))
}
