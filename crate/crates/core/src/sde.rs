//! Lotka-Volterra SDE pairs with shared Brownian noise.
//!
//! Prey `x` and predator `y` follow
//! `dx = (alpha x - beta x y) dt + sigma_x dU`,
//! `dy = (-gamma y + delta x y) dt + sigma_y dW`,
//! integrated by Euler-Maruyama. The counterfactual path reuses the factual
//! increments and differs only in its initial condition.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, Field};
use crate::training::{Batch, BatchSource};

pub const SDE_FORMAT: &str = "iccr-sde";

/// Value of every component of the delimiter token.
pub const DELIMITER: f64 = -7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            x_lo: 0.5,
            x_hi: 2.0,
            y_lo: 0.5,
            y_hi: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Admissible parameter ranges that keep the deterministic flow inside the
/// bounds at the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBounds {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub beta_lo: f64,
    pub delta_lo: f64,
}

/// The closed-form bounds. `beta` and `delta` are the already drawn
/// interaction rates that the `alpha` and `gamma` intervals depend on.
pub fn param_bounds(x0: f64, y0: f64, b: &Bounds, t: f64, beta: f64, delta: f64) -> Result<ParamBounds> {
    if !(0.0 < b.x_lo && b.x_lo < b.x_hi && 0.0 < b.y_lo && b.y_lo < b.y_hi) {
        return Err(Error::Config(format!("bounds must satisfy 0 < lo < hi, got {:?}", b)));
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {}", t)));
    }
    if !(x0 > 0.0 && y0 > 0.0) {
        return Err(Error::Config(format!("initial condition must be positive, got ({}, {})", x0, y0)));
    }
    Ok(ParamBounds {
        alpha_lo: (b.x_hi / x0).ln() / t + beta * b.y_lo,
        alpha_hi: (b.x_lo / x0).ln() / t + beta * b.y_hi,
        gamma_lo: delta * b.x_lo - (b.y_lo / y0).ln() / t,
        gamma_hi: delta * b.x_hi - (b.y_hi / y0).ln() / t,
        beta_lo: (b.x_hi / b.x_lo).ln() / (t * (b.y_hi - b.y_lo)),
        delta_lo: (b.y_hi / b.y_lo).ln() / (t * (b.x_hi - b.x_lo)),
    })
}

/// `(dx, dy)` drift of the Lotka-Volterra system.
pub fn lv_drift(x: f64, y: f64, p: &LvParams) -> (f64, f64) {
    (p.alpha * x - p.beta * x * y, -p.gamma * y + p.delta * x * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CfInit {
    /// Independent uniform draw per component.
    Uniform { lo: f64, hi: f64 },
    /// Fresh draw from the factual Beta law.
    FreshBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeConfig {
    pub embed_dim: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Horizon used in the parameter bounds.
    pub t_horizon: f64,
    pub grid_steps: usize,
    pub n_events: usize,
    pub event_range: (f64, f64),
    pub bounds: Bounds,
    pub theta_support: (f64, f64),
    pub equidistant: bool,
    pub cf_init: CfInit,
    /// Reuse this many event-time sets instead of fresh times per record.
    #[serde(default)]
    pub times_pool: Option<usize>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    pub seed: u64,
}

fn default_retries() -> usize {
    100
}

impl Default for SdeConfig {
    fn default() -> Self {
        SdeConfig {
            embed_dim: 1,
            sigma_x: 0.05,
            sigma_y: 0.05,
            t_horizon: 1.0,
            grid_steps: 1000,
            n_events: 20,
            event_range: (0.0, 0.5),
            bounds: Bounds::default(),
            theta_support: (1.0, 2.0),
            equidistant: false,
            cf_init: CfInit::Uniform { lo: 1.0, hi: 2.0 },
            times_pool: None,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 {
            return fail("embedding dimension must be >= 1".into());
        }
        if self.grid_steps < 100 {
            return fail(format!("grid_steps must be >= 100, got {}", self.grid_steps));
        }
        let (lo, hi) = self.event_range;
        if !(0.0 <= lo && lo < hi && hi <= self.t_horizon) {
            return fail(format!("event range ({}, {}) must lie in [0, {}]", lo, hi, self.t_horizon));
        }
        if self.n_events < 2 {
            return fail("need at least 2 event times".into());
        }
        if self.n_events > self.grid_steps {
            return fail(format!("{} events do not fit on {} grid steps", self.n_events, self.grid_steps));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_y >= 0.0) {
            return fail("diffusion constants must be >= 0".into());
        }
        let (a, b) = self.theta_support;
        if !(1.0 <= a && a < b && b <= 2.0) {
            return fail(format!("theta support ({}, {}) must lie in [1, 2]", a, b));
        }
        if let CfInit::Uniform { lo, hi } = self.cf_init {
            if !(0.0 < lo && lo <= hi) {
                return fail("counterfactual init range must be positive and ordered".into());
            }
        }
        if self.times_pool == Some(0) {
            return fail("times_pool must be >= 1".into());
        }
        param_bounds(1.0, 1.0, &self.bounds, self.t_horizon, 0.0, 0.0).map(|_| ())
    }

    pub fn dt(&self) -> f64 {
        self.event_range.1 / self.grid_steps as f64
    }

    /// Number of observed time points per path.
    pub fn points(&self) -> usize {
        if self.equidistant {
            self.n_events + 1
        } else {
            self.n_events
        }
    }

    /// Full teacher-forced sequence length.
    pub fn seq_len(&self) -> usize {
        4 * self.points() + 1
    }
}

/// `kappa` of the `Beta(kappa, 2)` initial law, whose mode is `theta - 1`.
pub fn beta_kappa(theta: f64) -> Result<f64> {
    if !(1.0..2.0).contains(&theta) {
        return Err(Error::Config(format!("theta must lie in [1, 2), got {}", theta)));
    }
    Ok(1.0 / (2.0 - theta))
}

/// Draws parameters and initial condition for one component.
pub fn sample_lv<R: Rng>(theta: f64, cfg: &SdeConfig, rng: &mut R) -> Result<(LvParams, (f64, f64))> {
    let kappa = beta_kappa(theta)?;
    let init_law = Beta::new(kappa, 2.0).map_err(|e| Error::Config(e.to_string()))?;
    let exp = Exp::new(theta).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..cfg.max_retries.max(1) {
        let x0: f64 = init_law.sample(rng);
        let y0: f64 = init_law.sample(rng);
        if !(x0 > 0.0 && y0 > 0.0) {
            continue;
        }
        let base = param_bounds(x0, y0, &cfg.bounds, cfg.t_horizon, 0.0, 0.0)?;
        let beta = base.beta_lo + exp.sample(rng);
        let delta = base.delta_lo + exp.sample(rng);
        let pb = param_bounds(x0, y0, &cfg.bounds, cfg.t_horizon, beta, delta)?;
        let gamma_lo = pb.gamma_lo.max(0.0);
        if pb.gamma_hi < gamma_lo {
            continue;
        }
        let alpha = rng.random_range(pb.alpha_lo..=pb.alpha_hi);
        let gamma = rng.random_range(gamma_lo..=pb.gamma_hi);
        return Ok((LvParams { alpha, beta, gamma, delta }, (x0, y0)));
    }
    Err(Error::RejectionExhausted {
        attempts: cfg.max_retries,
        detail: "no admissible Lotka-Volterra parameters".into(),
    })
}

/// Checks a draw against its bounds.
pub fn params_within_bounds(p: &LvParams, init: (f64, f64), cfg: &SdeConfig) -> bool {
    let Ok(pb) = param_bounds(init.0, init.1, &cfg.bounds, cfg.t_horizon, p.beta, p.delta) else {
        return false;
    };
    p.beta >= pb.beta_lo
        && p.delta >= pb.delta_lo
        && (pb.alpha_lo..=pb.alpha_hi).contains(&p.alpha)
        && (pb.gamma_lo.max(0.0)..=pb.gamma_hi).contains(&p.gamma)
}

/// One simulated component on the Euler grid (`steps + 1` points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Euler-Maruyama with the given increments (`dw_x[k]`, `dw_y[k]` are the
/// Brownian increments of step `k`, already scaled to variance `dt`).
pub fn euler_maruyama(p: &LvParams, init: (f64, f64), dt: f64, sigma: (f64, f64), dw_x: &[f64], dw_y: &[f64]) -> Result<Path> {
    if dw_x.len() != dw_y.len() {
        return Err(Error::dim("euler_maruyama", "increment lengths differ"));
    }
    let steps = dw_x.len();
    let mut x = Vec::with_capacity(steps + 1);
    let mut y = Vec::with_capacity(steps + 1);
    let (mut xk, mut yk) = init;
    x.push(xk);
    y.push(yk);
    for k in 0..steps {
        let (fx, fy) = lv_drift(xk, yk, p);
        xk = xk + fx * dt + sigma.0 * dw_x[k];
        yk = yk + fy * dt + sigma.1 * dw_y[k];
        if !(xk.is_finite() && yk.is_finite()) {
            return Err(Error::BlowUp { step: k + 1 });
        }
        x.push(xk);
        y.push(yk);
    }
    Ok(Path { x, y })
}

/// Grid indices of the observation times, strictly increasing.
pub fn sample_event_times<R: Rng>(cfg: &SdeConfig, rng: &mut R) -> Result<Vec<usize>> {
    let n = cfg.n_events;
    if n < 2 || n > cfg.grid_steps {
        return Err(Error::Config(format!("cannot place {} events on {} steps", n, cfg.grid_steps)));
    }
    let dt = cfg.dt();
    let (lo, hi) = cfg.event_range;
    let k_lo = (lo / dt).round() as usize;
    if cfg.equidistant {
        let span = cfg.grid_steps - k_lo;
        return Ok((0..=n).map(|j| k_lo + (j * span) / n).collect());
    }
    let k_hi = cfg.grid_steps;
    if k_hi - k_lo + 1 < n {
        return Err(Error::Config("event range holds fewer grid points than events".into()));
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n {
        let t: f64 = rng.random_range(lo..=hi);
        let k = ((t / dt).round() as usize).clamp(k_lo, k_hi);
        picked.insert(k);
    }
    Ok(picked.into_iter().collect())
}

/// Factual and counterfactual paths of all `E` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPair {
    pub dt: f64,
    /// Grid indices of the observations.
    pub events: Vec<usize>,
    pub theta: Vec<f64>,
    pub params: Vec<LvParams>,
    pub init: Vec<(f64, f64)>,
    pub init_cf: Vec<(f64, f64)>,
    pub factual: Vec<Path>,
    pub counterfactual: Vec<Path>,
    /// Per component: `(dw_x, dw_y)`.
    pub increments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PathPair {
    pub fn event_times(&self) -> Vec<f64> {
        self.events.iter().map(|&k| k as f64 * self.dt).collect()
    }

    /// SHA-256 over the little-endian increments.
    pub fn increments_digest(&self) -> String {
        let mut h = Sha256::new();
        for (a, b) in &self.increments {
            for v in a.iter().chain(b) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

fn brownian(rng: &mut ChaCha8Rng, steps: usize, dt: f64) -> Vec<f64> {
    let s = dt.sqrt();
    (0..steps).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Integrates both paths for one component with shared increments.
pub fn counterfactual_path(
    p: &LvParams,
    init: (f64, f64),
    init_cf: (f64, f64),
    cfg: &SdeConfig,
    dw_x: &[f64],
    dw_y: &[f64],
) -> Result<(Path, Path)> {
    if !(init_cf.0 > 0.0 && init_cf.1 > 0.0) {
        return Err(Error::Contract("counterfactual initial condition must be positive".into()));
    }
    let sigma = (cfg.sigma_x, cfg.sigma_y);
    let f = euler_maruyama(p, init, cfg.dt(), sigma, dw_x, dw_y)?;
    let c = euler_maruyama(p, init_cf, cfg.dt(), sigma, dw_x, dw_y)?;
    Ok((f, c))
}

/// Pair `index` of the corpus; whole pairs are redrawn until every observed
/// value is positive.
pub fn sample_pair(cfg: &SdeConfig, index: u64) -> Result<PathPair> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut r_theta = stream(seed, index, Field::Theta);
    let mut r_params = stream(seed, index, Field::LvParams);
    let mut r_noise = stream(seed, index, Field::Brownian);
    let mut r_cf = stream(seed, index, Field::CounterfactualInit);
    let times_index = match cfg.times_pool {
        Some(k) => index % k as u64,
        None => index,
    };
    let events = sample_event_times(cfg, &mut stream(seed, times_index, Field::EventTimes))?;
    let dt = cfg.dt();
    let (t_lo, t_hi) = cfg.theta_support;

    'attempt: for _ in 0..cfg.max_retries.max(1) {
        let mut pair = PathPair {
            dt,
            events: events.clone(),
            theta: Vec::new(),
            params: Vec::new(),
            init: Vec::new(),
            init_cf: Vec::new(),
            factual: Vec::new(),
            counterfactual: Vec::new(),
            increments: Vec::new(),
        };
        for _ in 0..cfg.embed_dim {
            let theta = r_theta.random_range(t_lo..t_hi);
            let (p, init) = sample_lv(theta, cfg, &mut r_params)?;
            debug_assert!(params_within_bounds(&p, init, cfg));
            let init_cf = match cfg.cf_init {
                CfInit::Uniform { lo, hi } => (r_cf.random_range(lo..=hi), r_cf.random_range(lo..=hi)),
                CfInit::FreshBeta => {
                    let law = Beta::new(beta_kappa(theta)?, 2.0).map_err(|e| Error::Config(e.to_string()))?;
                    (law.sample(&mut r_cf), law.sample(&mut r_cf))
                }
            };
            let dw_x = brownian(&mut r_noise, cfg.grid_steps, dt);
            let dw_y = brownian(&mut r_noise, cfg.grid_steps, dt);
            let (f, c) = match counterfactual_path(&p, init, init_cf, cfg, &dw_x, &dw_y) {
                Ok(v) => v,
                Err(Error::BlowUp { .. }) | Err(Error::Contract(_)) => continue 'attempt,
                Err(e) => return Err(e),
            };
            let positive = |path: &Path| events.iter().all(|&k| path.x[k] > 0.0 && path.y[k] > 0.0);
            if !positive(&f) || !positive(&c) {
                continue 'attempt;
            }
            pair.theta.push(theta);
            pair.params.push(p);
            pair.init.push(init);
            pair.init_cf.push(init_cf);
            pair.factual.push(f);
            pair.counterfactual.push(c);
            pair.increments.push((dw_x, dw_y));
        }
        return Ok(pair);
    }
    Err(Error::RejectionExhausted {
        attempts: cfg.max_retries,
        detail: format!("pair {} kept leaving the positive orthant", index),
    })
}

/// Largest deviation, over components, grid steps and both coordinates, of
/// the discrete identity
/// `CF_k - F_k = (CF_0 - F_0) + sum_{j<k} [drift(CF_j) - drift(F_j)] dt`,
/// which holds because both paths share their increments.
pub fn telescoping_residual(pair: &PathPair) -> f64 {
    let mut worst = 0.0f64;
    for ((p, f), c) in pair.params.iter().zip(&pair.factual).zip(&pair.counterfactual) {
        let (mut sx, mut sy) = (c.x[0] - f.x[0], c.y[0] - f.y[0]);
        for k in 1..f.x.len() {
            let (cfx, cfy) = lv_drift(c.x[k - 1], c.y[k - 1], p);
            let (fx, fy) = lv_drift(f.x[k - 1], f.y[k - 1], p);
            sx += (cfx - fx) * pair.dt;
            sy += (cfy - fy) * pair.dt;
            let dx = (c.x[k] - f.x[k]) - sx;
            let dy = (c.y[k] - f.y[k]) - sy;
            worst = worst.max(dx.abs()).max(dy.abs());
        }
    }
    worst
}

/// Teacher-forced prompt with its completion targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdePrompt {
    /// `4m + 1` rows of width `E`.
    pub tokens: Vec<Vec<f64>>,
    /// True at positions whose next token is scored.
    pub mask: Vec<bool>,
    /// Next-token values at the masked positions, in order.
    pub targets: Vec<Vec<f64>>,
}

impl SdePrompt {
    pub fn read_positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn token_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.tokens).expect("rows have width E")
    }
}

/// `(x_t1, y_t1, ..., x_tm, y_tm, delim, x^CF_t1, y^CF_t1, ...)`; positions
/// after the first counterfactual pair are completion targets.
pub fn sde_prompt(pair: &PathPair) -> SdePrompt {
    let e = pair.factual.len();
    let m = pair.events.len();
    let mut tokens = Vec::with_capacity(4 * m + 1);
    let interleave = |paths: &[Path], tokens: &mut Vec<Vec<f64>>| {
        for &k in &pair.events {
            tokens.push(paths.iter().map(|p| p.x[k]).collect());
            tokens.push(paths.iter().map(|p| p.y[k]).collect());
        }
    };
    interleave(&pair.factual, &mut tokens);
    tokens.push(vec![DELIMITER; e]);
    interleave(&pair.counterfactual, &mut tokens);
    let len = tokens.len();
    // Token q is predicted at position q - 1; completion tokens start after
    // the delimiter and the first counterfactual pair.
    let first_target = 2 * m + 3;
    let mask: Vec<bool> = (0..len).map(|p| p + 1 >= first_target && p + 1 < len).collect();
    let targets = (first_target..len).map(|q| tokens[q].clone()).collect();
    SdePrompt { tokens, mask, targets }
}

/// One serialized SDE example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeRecord {
    pub tokens: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub targets: Vec<Vec<f64>>,
    pub meta: SdeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeMeta {
    pub theta: Vec<f64>,
    pub params: Vec<LvParams>,
    pub init: Vec<(f64, f64)>,
    pub init_cf: Vec<(f64, f64)>,
    pub event_times: Vec<f64>,
    pub increments_digest: String,
}

pub fn sde_record(pair: &PathPair) -> SdeRecord {
    let prompt = sde_prompt(pair);
    SdeRecord {
        tokens: prompt.tokens,
        mask: prompt.mask,
        targets: prompt.targets,
        meta: SdeMeta {
            theta: pair.theta.clone(),
            params: pair.params.clone(),
            init: pair.init.clone(),
            init_cf: pair.init_cf.clone(),
            event_times: pair.event_times(),
            increments_digest: pair.increments_digest(),
        },
    }
}

pub fn write_sde_dataset(cfg: &SdeConfig, count: usize, path: &std::path::Path) -> Result<Vec<SdeRecord>> {
    let records = (0..count as u64)
        .map(|i| sample_pair(cfg, i).map(|p| sde_record(&p)))
        .collect::<Result<Vec<_>>>()?;
    crate::datagen::write_jsonl(path, SDE_FORMAT, cfg, &records)?;
    Ok(records)
}

pub fn read_sde_dataset(path: &std::path::Path) -> Result<(SdeConfig, Vec<SdeRecord>)> {
    crate::datagen::read_jsonl(path, SDE_FORMAT)
}

/// Training batches of teacher-forced SDE prompts.
#[derive(Debug, Clone)]
pub struct SdeSource {
    cfg: SdeConfig,
}

impl SdeSource {
    pub fn new(cfg: SdeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SdeSource { cfg })
    }

    pub fn config(&self) -> &SdeConfig {
        &self.cfg
    }
}

/// Stacks prompts of equal length into a batch scored on masked positions.
pub fn sde_batch(prompts: &[SdePrompt]) -> Result<Batch> {
    let first = prompts.first().ok_or_else(|| Error::dim("sde_batch", "empty batch"))?;
    let seq = first.tokens.len();
    let e = first.tokens[0].len();
    let mut input = Vec::with_capacity(prompts.len() * seq * e);
    let mut targets = Vec::new();
    let mut read = Vec::new();
    for (b, p) in prompts.iter().enumerate() {
        if p.tokens.len() != seq {
            return Err(Error::dim("sde_batch", "prompts differ in length"));
        }
        input.extend(p.tokens.iter().flatten());
        targets.extend(p.targets.iter().flatten());
        read.extend(p.read_positions().into_iter().map(|q| b * seq + q));
    }
    Ok(Batch {
        input: Tensor::new(vec![prompts.len() * seq, e], input)?,
        batch: prompts.len(),
        seq,
        targets: Tensor::new(vec![read.len(), e], targets)?,
        read,
    })
}

impl BatchSource for SdeSource {
    fn batch(&self, step: u64, size: usize) -> Result<Batch> {
        let prompts = (0..size as u64)
            .map(|b| sample_pair(&self.cfg, step * size as u64 + b).map(|p| sde_prompt(&p)))
            .collect::<Result<Vec<_>>>()?;
        sde_batch(&prompts)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "task": "sde", "sde": self.cfg })
    }

    fn max_seq(&self) -> usize {
        self.cfg.seq_len()
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }
}
