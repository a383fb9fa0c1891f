//! Structural causal models with noise-invertible mechanisms.
//!
//! Every mechanism is written as `y = T(f(x), u)` with `T(f, .)` invertible,
//! so a counterfactual is `T(f(x_cf), T^-1(f(x), y))`: abduct the noise from
//! the factual pair, then replay it under the intervention.

use serde::{Deserialize, Serialize};

use crate::datagen::{PromptRecord, ThetaDist};
use crate::error::{Error, Result};

/// Scale applied inside the tanh / sigmoid links.
pub const DEFAULT_TAU: f64 = 1.0 / 13.0;

/// `sqrt(Var(beta * X_cf * U_Y))` for theta ~ U[-6, 6]:
/// `E[(1 + theta^2)^2] * E[X_cf^2] = 284.2 * 12`.
pub fn default_normalizer() -> f64 {
    3410.4f64.sqrt()
}

/// Below this magnitude a multiplicative mechanism is not invertible.
pub const MULTIPLICATIVE_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTag {
    LinearAdditive,
    Anm,
    Multiplicative,
    Exponential,
    TanhLink,
    SigmoidLink,
}

/// Mechanism family plus the constants some members need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModelKind {
    pub tag: NoiseTag,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_normalizer")]
    pub normalizer: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for NoiseModelKind {
    fn default() -> Self {
        Self::linear()
    }
}

impl NoiseModelKind {
    pub fn new(tag: NoiseTag) -> Self {
        NoiseModelKind {
            tag,
            tau: DEFAULT_TAU,
            normalizer: default_normalizer(),
        }
    }

    pub fn linear() -> Self {
        Self::new(NoiseTag::LinearAdditive)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.normalizer > 0.0) {
            return Err(Error::Config(format!(
                "noise model needs tau > 0 and normalizer > 0, got tau={} normalizer={}",
                self.tau, self.normalizer
            )));
        }
        Ok(())
    }

    /// The deterministic part `f(x)` fed to `T`.
    pub fn mechanism(&self, beta: f64, x: f64) -> f64 {
        match self.tag {
            NoiseTag::Multiplicative => beta * x / self.normalizer,
            _ => beta * x,
        }
    }

    /// `T(f, u)`.
    pub fn transform(&self, f: f64, u: f64) -> f64 {
        match self.tag {
            NoiseTag::LinearAdditive | NoiseTag::Anm => f + u,
            NoiseTag::Multiplicative => f * u,
            NoiseTag::Exponential => (f + u).exp(),
            NoiseTag::TanhLink => (self.tau * (f + u)).tanh(),
            NoiseTag::SigmoidLink => 1.0 / (1.0 + (-self.tau * (f + u)).exp()),
        }
    }

    /// `T^-1(f, y)` for one component.
    pub fn inverse(&self, f: f64, y: f64, component: usize) -> Result<f64> {
        let fail = |detail: String| Error::Abduction { component, detail };
        match self.tag {
            NoiseTag::LinearAdditive | NoiseTag::Anm => Ok(y - f),
            NoiseTag::Multiplicative => {
                if f.abs() <= MULTIPLICATIVE_GUARD {
                    Err(fail(format!("|f(x)| = {:e} is not invertible", f.abs())))
                } else {
                    Ok(y / f)
                }
            }
            NoiseTag::Exponential => {
                if y > 0.0 {
                    Ok(y.ln() - f)
                } else {
                    Err(fail(format!("exponential mechanism needs y > 0, got {}", y)))
                }
            }
            NoiseTag::TanhLink => {
                if y.abs() < 1.0 {
                    Ok(y.atanh() / self.tau - f)
                } else {
                    Err(fail(format!("tanh link needs |y| < 1, got {}", y)))
                }
            }
            NoiseTag::SigmoidLink => {
                if y > 0.0 && y < 1.0 {
                    Ok((y / (1.0 - y)).ln() / self.tau - f)
                } else {
                    Err(fail(format!("sigmoid link needs 0 < y < 1, got {}", y)))
                }
            }
        }
    }
}

fn same_len(op: &'static str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).all(|w| w[0] == w[1]) {
        Ok(())
    } else {
        Err(Error::dim(op, format!("length mismatch {:?}", lens)))
    }
}

/// Latent and coefficients of one linear SCM instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScm {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LinearScm {
    pub fn new(theta: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() || theta.len() != beta.len() {
            return Err(Error::dim(
                "linear_scm",
                format!("theta {} vs beta {}", theta.len(), beta.len()),
            ));
        }
        Ok(LinearScm { theta, beta })
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}

/// One factual observation and, optionally, the noises that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactualPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u_x: Option<Vec<f64>>,
    pub u_y: Option<Vec<f64>>,
}

/// Counterfactual query: which in-context pair to anchor on (1-based) and the
/// intervened input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfQuery {
    pub z: usize,
    pub x_cf: Vec<f64>,
}

impl CfQuery {
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        if self.z == 0 || self.z > n_examples {
            return Err(Error::Contract(format!(
                "anchor z={} outside 1..={}",
                self.z, n_examples
            )));
        }
        Ok(())
    }
}

/// `u = T^-1(f(x), y)`, componentwise.
pub fn abduct_noise(kind: &NoiseModelKind, f_x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    same_len("abduct_noise", &[f_x.len(), y.len()])?;
    f_x.iter()
        .zip(y)
        .enumerate()
        .map(|(i, (&f, &yv))| kind.inverse(f, yv, i))
        .collect()
}

/// Generic counterfactual transformation `h(f_cf, f, y) = T(f_cf, T^-1(f, y))`.
pub fn transform_counterfactual<T, Ti>(forward: T, inverse: Ti, f_cf: f64, f: f64, y: f64) -> Result<f64>
where
    T: Fn(f64, f64) -> f64,
    Ti: Fn(f64, f64) -> Result<f64>,
{
    Ok(forward(f_cf, inverse(f, y)?))
}

/// Counterfactual outcome under `do(X = x_cf)` for the given mechanism.
pub fn counterfactual(kind: &NoiseModelKind, f_xcf: &[f64], f_x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    same_len("counterfactual", &[f_xcf.len(), f_x.len(), y.len()])?;
    (0..y.len())
        .map(|i| {
            transform_counterfactual(
                |f, u| kind.transform(f, u),
                |f, yv| kind.inverse(f, yv, i),
                f_xcf[i],
                f_x[i],
                y[i],
            )
        })
        .collect()
}

/// Closed-form counterfactual of `y = beta x + u`: `beta (x_cf - x) + y`,
/// evaluated as `beta x_cf + (y - beta x)`.
pub fn linear_cf(beta: &[f64], x: &[f64], y: &[f64], x_cf: &[f64]) -> Result<Vec<f64>> {
    same_len("linear_cf", &[beta.len(), x.len(), y.len(), x_cf.len()])?;
    Ok((0..beta.len())
        .map(|i| beta[i] * x_cf[i] + (y[i] - beta[i] * x[i]))
        .collect())
}

/// Ordinary least squares slope.
pub fn ols_fit(xs: &[f64], ys: &[f64]) -> Result<f64> {
    same_len("ols_fit", &[xs.len(), ys.len()])?;
    if xs.len() < 2 {
        return Err(Error::DegenerateDesign(format!("{} points", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateDesign("all x values are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Plug-in counterfactual `beta_hat (x_cf - x_z) + y_z`.
pub fn ols_cf(beta_hat: f64, x_z: f64, y_z: f64, x_cf: f64) -> f64 {
    beta_hat * (x_cf - x_z) + y_z
}

/// `(x, y)` for one observation of `X := U_X, Y := T(f(X), U_Y)`.
pub fn apply_link(kind: &NoiseModelKind, beta: &[f64], u_x: &[f64], u_y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len("apply_link", &[beta.len(), u_x.len(), u_y.len()])?;
    let x = u_x.to_vec();
    let y = (0..beta.len())
        .map(|i| kind.transform(kind.mechanism(beta[i], x[i]), u_y[i]))
        .collect();
    Ok((x, y))
}

/// Quadrature for the Bayes posterior-predictive oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum QuadratureGrid {
    /// Uniform trapezoid grid on `[theta_lo, theta_hi]`; for each theta the
    /// beta grid spans `+-beta_halfwidth` conditional posterior standard
    /// deviations around the conditional posterior mean.
    Adaptive {
        theta_lo: f64,
        theta_hi: f64,
        theta_points: usize,
        beta_points: usize,
        beta_halfwidth: f64,
    },
    /// Equal-weight cartesian product of explicit nodes.
    Fixed { thetas: Vec<f64>, betas: Vec<f64> },
}

impl QuadratureGrid {
    pub fn with_resolution(theta_points: usize, beta_points: usize) -> Self {
        QuadratureGrid::Adaptive {
            theta_lo: -6.0,
            theta_hi: 6.0,
            theta_points,
            beta_points,
            beta_halfwidth: 6.0,
        }
    }
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self::with_resolution(512, 96)
    }
}

/// Posterior means of the latent and the coefficient given the context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub theta_mean: f64,
    pub beta_mean: f64,
}

struct Suff {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

impl Suff {
    fn new(xs: &[f64], ys: &[f64]) -> Self {
        let mut s = Suff {
            n: xs.len() as f64,
            sx: 0.0,
            sy: 0.0,
            sxx: 0.0,
            sxy: 0.0,
            syy: 0.0,
        };
        for (&x, &y) in xs.iter().zip(ys) {
            s.sx += x;
            s.sy += y;
            s.sxx += x * x;
            s.sxy += x * y;
            s.syy += y * y;
        }
        s
    }

    /// log p(data | theta, beta) up to a constant, with x ~ N(theta, 1) and
    /// y - beta x ~ N(theta, 1).
    fn loglik(&self, theta: f64, beta: f64) -> f64 {
        let qx = self.sxx - 2.0 * theta * self.sx + self.n * theta * theta;
        let qy = self.syy + beta * beta * self.sxx + self.n * theta * theta
            - 2.0 * beta * self.sxy
            - 2.0 * theta * self.sy
            + 2.0 * beta * theta * self.sx;
        -0.5 * (qx + qy)
    }
}

fn log_prior(dist: ThetaDist, theta: f64) -> f64 {
    match dist {
        ThetaDist::Uniform => 0.0,
        ThetaDist::Normal => -theta * theta / 24.0,
    }
}

fn trapezoid(i: usize, n: usize) -> f64 {
    if n > 1 && (i == 0 || i == n - 1) {
        0.5
    } else {
        1.0
    }
}

/// Joint posterior over `(theta, beta)` for a one-dimensional linear-additive
/// context with `beta | theta ~ N(theta, 1)` and both noises `N(theta, 1)`.
pub fn bayes_posterior(xs: &[f64], ys: &[f64], prior: ThetaDist, grid: &QuadratureGrid) -> Result<Posterior> {
    same_len("bayes_posterior", &[xs.len(), ys.len()])?;
    let s = Suff::new(xs, ys);
    let mut nodes: Vec<(f64, f64, f64)> = Vec::new();
    match grid {
        QuadratureGrid::Fixed { thetas, betas } => {
            if thetas.is_empty() || betas.is_empty() {
                return Err(Error::Contract("empty quadrature grid".into()));
            }
            for &t in thetas {
                for &b in betas {
                    let lw = log_prior(prior, t) - 0.5 * (b - t) * (b - t) + s.loglik(t, b);
                    nodes.push((t, b, lw));
                }
            }
        }
        &QuadratureGrid::Adaptive {
            theta_lo,
            theta_hi,
            theta_points,
            beta_points,
            beta_halfwidth,
        } => {
            if theta_points < 64 || beta_points < 64 {
                return Err(Error::Contract(format!(
                    "quadrature needs >= 64 points per axis, got {}x{}",
                    theta_points, beta_points
                )));
            }
            if !(theta_hi > theta_lo) || !(beta_halfwidth > 0.0) {
                return Err(Error::Contract("invalid quadrature bounds".into()));
            }
            let ht = (theta_hi - theta_lo) / (theta_points - 1) as f64;
            let precision = 1.0 + s.sxx;
            let sd = precision.sqrt().recip();
            for i in 0..theta_points {
                let t = theta_lo + ht * i as f64;
                let mean = (t + s.sxy - t * s.sx) / precision;
                let lo = mean - beta_halfwidth * sd;
                let hb = 2.0 * beta_halfwidth * sd / (beta_points - 1) as f64;
                let base = log_prior(prior, t) + (trapezoid(i, theta_points) * ht * hb).ln();
                for k in 0..beta_points {
                    let b = lo + hb * k as f64;
                    let lw = base + trapezoid(k, beta_points).ln() - 0.5 * (b - t) * (b - t) + s.loglik(t, b);
                    nodes.push((t, b, lw));
                }
            }
        }
    }
    let mx = nodes.iter().map(|n| n.2).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut et, mut eb) = (0.0, 0.0, 0.0);
    for &(t, b, lw) in &nodes {
        let w = (lw - mx).exp();
        z += w;
        et += w * t;
        eb += w * b;
    }
    if !(z > 0.0) {
        return Err(Error::NonFinite { op: "bayes_posterior" });
    }
    Ok(Posterior {
        theta_mean: et / z,
        beta_mean: eb / z,
    })
}

fn require_bayes_support(prompt: &PromptRecord) -> Result<()> {
    if prompt.meta.beta.len() != 1 {
        return Err(Error::Unsupported(format!(
            "Bayes oracle needs a 1-dimensional prompt, got E={}",
            prompt.meta.beta.len()
        )));
    }
    if !matches!(prompt.kind.tag, NoiseTag::LinearAdditive | NoiseTag::Anm) {
        return Err(Error::Unsupported(format!(
            "Bayes oracle needs a linear additive prompt, got {:?}",
            prompt.kind.tag
        )));
    }
    Ok(())
}

/// Posterior-predictive mean of `beta (x_cf - x_z) + y_z`.
pub fn bayes_cf_mean(prompt: &PromptRecord, grid: &QuadratureGrid) -> Result<f64> {
    require_bayes_support(prompt)?;
    let (xs, ys) = prompt.context_column(0);
    let post = bayes_posterior(&xs, &ys, prompt.theta_dist, grid)?;
    let z = prompt.meta.z.ok_or_else(|| Error::Contract("prompt has no anchor".into()))?;
    let (x_z, y_z) = (xs[z - 1], ys[z - 1]);
    Ok(post.beta_mean * (prompt.meta.x_cf[0] - x_z) + y_z)
}

/// Posterior-predictive mean of a fresh observation `beta x_cf + u`,
/// `u | theta ~ N(theta, 1)`.
pub fn bayes_continuation_mean(prompt: &PromptRecord, grid: &QuadratureGrid) -> Result<f64> {
    require_bayes_support(prompt)?;
    let (xs, ys) = prompt.context_column(0);
    let post = bayes_posterior(&xs, &ys, prompt.theta_dist, grid)?;
    Ok(post.beta_mean * prompt.meta.x_cf[0] + post.theta_mean)
}
