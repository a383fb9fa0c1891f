//! Evaluation curves, linear probes, attention summaries and sweeps.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::datagen::{ess, GenConfig, Generator, Overrides, PromptRecord, ThetaDist};
use crate::error::{Error, Result};
use crate::models::{forward_batch, ModelConfig, ModelState};
use crate::rng::{stream, Field};
use crate::scm::{ols_cf, ols_fit};
use crate::training::{train, RegressionSource, TrainConfig};

/// Evaluation prompts use record indices from here on, so they never
/// coincide with training records of the same config.
pub const EVAL_OFFSET: u64 = 1 << 40;

/// Default number of bootstrap resamples.
pub const RESAMPLES: usize = 1000;

/// Anything that maps prompts to `E`-dimensional predictions.
pub trait Predictor {
    fn predict(&self, prompts: &[PromptRecord]) -> Result<Vec<Vec<f64>>>;

    /// Longest admissible sequence, if bounded.
    fn max_len(&self) -> Option<usize> {
        None
    }
}

/// Predicts zero everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn predict(&self, prompts: &[PromptRecord]) -> Result<Vec<Vec<f64>>> {
        Ok(prompts.iter().map(|p| vec![0.0; p.embed_dim()]).collect())
    }
}

/// Reads the answer off the latent metadata.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetadataOracle;

impl Predictor for MetadataOracle {
    fn predict(&self, prompts: &[PromptRecord]) -> Result<Vec<Vec<f64>>> {
        prompts.iter().map(|p| p.oracle_target()).collect()
    }
}

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 128;

impl Predictor for ModelState {
    fn predict(&self, prompts: &[PromptRecord]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        let mut start = 0;
        while start < prompts.len() {
            let seq = prompts[start].seq_len();
            let mut end = start + 1;
            while end < prompts.len() && end - start < EVAL_CHUNK && prompts[end].seq_len() == seq {
                end += 1;
            }
            let tokens: Vec<Tensor> = prompts[start..end].iter().map(|p| p.token_tensor()).collect();
            let refs: Vec<&Tensor> = tokens.iter().collect();
            let read: Vec<usize> = (0..refs.len()).map(|b| b * seq + seq - 1).collect();
            let pred = forward_batch(self, &refs, Some(&read))?.output;
            out.extend((0..pred.rows()).map(|r| pred.row(r).to_vec()));
            start = end;
        }
        Ok(out)
    }

    fn max_len(&self) -> Option<usize> {
        self.config.max_len()
    }
}

/// Basic bootstrap interval `(2m - q_{1-a/2}, 2m - q_{a/2})` for the mean.
pub fn bootstrap_ci<R: Rng>(samples: &[f64], alpha: f64, resamples: usize, rng: &mut R) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("bootstrap needs at least one sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) || resamples == 0 {
        return Err(Error::Config(format!("alpha {} / resamples {} out of range", alpha, resamples)));
    }
    let n = samples.len();
    let m = mean(samples);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = 2.0 * m - quantile(&means, 1.0 - alpha / 2.0);
    let hi = 2.0 * m - quantile(&means, alpha / 2.0);
    // Rounding in 2m - q can cross m by an ulp for constant samples.
    Ok((lo.min(m), hi.max(m)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    match sorted.get(i + 1) {
        Some(&next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

/// MSE per context length with bootstrap intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub lengths: Vec<usize>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub sequences: usize,
    /// Sequences left out per length (degenerate OLS designs).
    pub skipped: Vec<usize>,
}

impl EvalCurve {
    fn new(sequences: usize) -> Self {
        EvalCurve {
            lengths: Vec::new(),
            mean: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            sequences,
            skipped: Vec::new(),
        }
    }

    fn push(&mut self, n: usize, errors: &[f64], skipped: usize, seed: u64) -> Result<()> {
        if errors.is_empty() {
            return Err(Error::DegenerateDesign(format!("no usable sequence at length {}", n)));
        }
        let (lo, hi) = bootstrap_ci(errors, 0.05, RESAMPLES, &mut stream(seed, n as u64, Field::Bootstrap))?;
        self.lengths.push(n);
        self.mean.push(mean(errors));
        self.lower.push(lo);
        self.upper.push(hi);
        self.skipped.push(skipped);
        Ok(())
    }

    pub fn at(&self, n: usize) -> Option<(f64, f64, f64)> {
        let i = self.lengths.iter().position(|&l| l == n)?;
        Some((self.mean[i], self.lower[i], self.upper[i]))
    }

    /// Columns: `n,mse,ci_lower,ci_upper,log_mse,sequences,skipped`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,mse,ci_lower,ci_upper,log_mse,sequences,skipped\n");
        for i in 0..self.lengths.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.lengths[i],
                self.mean[i],
                self.lower[i],
                self.upper[i],
                self.mean[i].ln(),
                self.sequences,
                self.skipped[i]
            ));
        }
        s
    }
}

fn check_lengths(gen: &GenConfig, lengths: &[usize], max_len: Option<usize>) -> Result<()> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("lengths must be non-empty and strictly increasing".into()));
    }
    for &n in lengths {
        if n == 0 || gen.fixed_z.is_some_and(|z| z > n) {
            return Err(Error::Config(format!("length {} cannot hold the anchor", n)));
        }
        if let Some(max) = max_len {
            let len = gen.seq_len(n);
            if len > max {
                return Err(Error::ContextOverflow { len, max });
            }
        }
    }
    Ok(())
}

/// Fresh evaluation prompts with exactly `n` examples.
pub fn eval_prompts(gen: &Generator, n: usize, count: usize) -> Result<Vec<PromptRecord>> {
    let ov = Overrides { n: Some(n), z: None };
    (0..count as u64).map(|i| gen.sample_with(EVAL_OFFSET + i, ov)).collect()
}

/// Mean squared error over the `E` components of each prompt.
pub fn sequence_errors(pred: &dyn Predictor, prompts: &[PromptRecord]) -> Result<Vec<f64>> {
    let out = pred.predict(prompts)?;
    Ok(prompts
        .iter()
        .zip(&out)
        .map(|(p, o)| p.target.iter().zip(o).map(|(t, y)| (t - y) * (t - y)).sum::<f64>() / p.embed_dim() as f64)
        .collect())
}

pub fn eval_curve(pred: &dyn Predictor, gen: &GenConfig, lengths: &[usize], seqs: usize) -> Result<EvalCurve> {
    check_lengths(gen, lengths, pred.max_len())?;
    let g = Generator::new(gen.clone())?;
    let mut curve = EvalCurve::new(seqs);
    for &n in lengths {
        let errors = sequence_errors(pred, &eval_prompts(&g, n, seqs)?)?;
        curve.push(n, &errors, 0, gen.seed)?;
    }
    Ok(curve)
}

/// Per-component OLS plug-in counterfactual; `None` for degenerate designs.
pub fn ols_prediction(p: &PromptRecord) -> Option<Vec<f64>> {
    let z = p.meta.z?;
    (0..p.embed_dim())
        .map(|c| {
            let (xs, ys) = p.context_column(c);
            let b = ols_fit(&xs, &ys).ok()?;
            Some(ols_cf(b, xs[z - 1], ys[z - 1], p.meta.x_cf[c]))
        })
        .collect()
}

pub fn ols_baseline_curve(gen: &GenConfig, lengths: &[usize], seqs: usize) -> Result<EvalCurve> {
    check_lengths(gen, lengths, None)?;
    let g = Generator::new(gen.clone())?;
    let mut curve = EvalCurve::new(seqs);
    for &n in lengths {
        let mut errors = Vec::with_capacity(seqs);
        let mut skipped = 0;
        for p in eval_prompts(&g, n, seqs)? {
            match ols_prediction(&p) {
                Some(o) => {
                    let e = p.target.iter().zip(&o).map(|(t, y)| (t - y) * (t - y)).sum::<f64>();
                    errors.push(e / p.embed_dim() as f64);
                }
                None => skipped += 1,
            }
        }
        curve.push(n, &errors, skipped, gen.seed)?;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Theta,
    Beta,
}

/// Which per-layer activation is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStream {
    /// Output of the whole block (after the MLP).
    #[default]
    Hidden,
    /// After the attention sublayer only.
    Residual,
}

/// Fitted least-squares probe.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Whether the ridge fallback was needed.
    pub ridge: bool,
}

pub const PROBE_RIDGE: f64 = 1e-6;

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::dim("probe", format!("{} feature rows vs {} targets", n, y.len())));
        }
        let p = x[0].len();
        if x.iter().any(|r| r.len() != p) {
            return Err(Error::dim("probe", "ragged feature rows"));
        }
        let mx: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let my = mean(y);
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        let mut c = vec![0.0; p];
        for (row, &t) in x.iter().zip(y) {
            for j in 0..p {
                c[j] = row[j] - mx[j];
            }
            for j in 0..p {
                rhs[j] += c[j] * (t - my) / n as f64;
                for k in 0..=j {
                    gram[j * p + k] += c[j] * c[k] / n as f64;
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                gram[k * p + j] = gram[j * p + k];
            }
        }
        let (weights, ridge) = match solve_spd(&gram, &rhs, p) {
            Some(w) => (w, false),
            None => {
                for j in 0..p {
                    gram[j * p + j] += PROBE_RIDGE;
                }
                let w = solve_spd(&gram, &rhs, p).ok_or_else(|| Error::DegenerateDesign("probe design is not positive definite".into()))?;
                (w, true)
            }
        };
        let intercept = my - weights.iter().zip(&mx).map(|(w, m)| w * m).sum::<f64>();
        Ok(LinearProbe { weights, intercept, ridge })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Cholesky solve; `None` when a pivot is not clearly positive.
fn solve_spd(a: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    let max_diag = (0..p).map(|j| a[j * p + j]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    let tol = 1e-10 * max_diag;
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        l[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / d;
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i * p + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * p + i];
    }
    let mut w = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k * p + i] * w[k]).sum();
        w[i] = (z[i] - s) / l[i * p + i];
    }
    Some(w)
}

/// `1 - (1 - R^2)(n - 1)/(n - p - 1)` on held-out data.
pub fn adjusted_r2(pred: &[f64], y: &[f64], p: usize) -> Result<f64> {
    let n = y.len();
    if n != pred.len() || n <= p + 1 {
        return Err(Error::dim("adjusted_r2", format!("{} samples for {} features", n, p)));
    }
    let my = mean(y);
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sse: f64 = y.iter().zip(pred).map(|(v, q)| (v - q) * (v - q)).sum();
    if sst == 0.0 {
        return Err(Error::DegenerateDesign("constant probe target".into()));
    }
    let r2 = 1.0 - sse / sst;
    Ok(1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - p as f64 - 1.0))
}

/// Fits on the training split and scores on the held-out split.
pub fn probe_score(train_x: &[Vec<f64>], train_y: &[f64], eval_x: &[Vec<f64>], eval_y: &[f64]) -> Result<(f64, LinearProbe)> {
    let probe = LinearProbe::fit(train_x, train_y)?;
    let pred: Vec<f64> = eval_x.iter().map(|r| probe.predict(r)).collect();
    let p = train_x.first().map_or(0, |r| r.len());
    Ok((adjusted_r2(&pred, eval_y, p)?, probe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub target: ProbeTarget,
    pub stream: ProbeStream,
    pub train_n: usize,
    pub eval_n: usize,
    /// In-context examples per probing prompt.
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    /// 1-based block index.
    pub layer: usize,
    pub adj_r2: f64,
    /// Probe on the block's contribution (after minus before).
    pub diff_adj_r2: f64,
    /// Same probe with labels shuffled across prompts.
    pub permuted_adj_r2: f64,
    pub ridge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub options: ProbeOptions,
    pub layers: Vec<LayerProbe>,
    pub weights_digest: String,
}

impl ProbeResult {
    pub fn best(&self) -> Option<&LayerProbe> {
        self.layers.iter().max_by(|a, b| a.adj_r2.total_cmp(&b.adj_r2))
    }

    /// Columns: `layer,adj_r2,diff_adj_r2,permuted_adj_r2,ridge`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,adj_r2,diff_adj_r2,permuted_adj_r2,ridge\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{},{}\n", l.layer, l.adj_r2, l.diff_adj_r2, l.permuted_adj_r2, l.ridge));
        }
        s
    }
}

/// Per-layer features at the final position: `(after, before)` for each block.
fn layer_features(model: &ModelState, prompts: &[PromptRecord], stream_kind: ProbeStream) -> Result<Vec<Vec<(Vec<f64>, Vec<f64>)>>> {
    let layers = match &model.config {
        ModelConfig::Transformer(c) => c.layers,
        ModelConfig::Rnn(_) => return Err(Error::Unsupported("probing needs a transformer".into())),
    };
    let mut out = vec![Vec::with_capacity(prompts.len()); layers];
    for chunk in prompts.chunks(EVAL_CHUNK) {
        let seq = chunk[0].seq_len();
        let tokens: Vec<Tensor> = chunk.iter().map(|p| p.token_tensor()).collect();
        let refs: Vec<&Tensor> = tokens.iter().collect();
        let trace = forward_batch(model, &refs, Some(&[]))?;
        for b in 0..chunk.len() {
            let row = b * seq + seq - 1;
            for (l, layer) in out.iter_mut().enumerate() {
                let after = match stream_kind {
                    ProbeStream::Hidden => &trace.hidden[l + 1],
                    ProbeStream::Residual => &trace.residual[l],
                };
                layer.push((after.row(row).to_vec(), trace.hidden[l].row(row).to_vec()));
            }
        }
    }
    Ok(out)
}

fn probe_labels(prompts: &[PromptRecord], target: ProbeTarget, c: usize) -> Vec<f64> {
    prompts
        .iter()
        .map(|p| match target {
            ProbeTarget::Theta => p.meta.theta[c],
            ProbeTarget::Beta => p.meta.beta[c],
        })
        .collect()
}

/// Linear probes from each block's activations at the final prompt position
/// to the latent target, averaged over the `E` components.
pub fn probe_layers(model: &ModelState, gen: &GenConfig, opts: ProbeOptions) -> Result<ProbeResult> {
    check_lengths(gen, &[opts.examples], model.max_len())?;
    let g = Generator::new(gen.clone())?;
    let all = eval_prompts(&g, opts.examples, opts.train_n + opts.eval_n)?;
    let (train_p, eval_p) = all.split_at(opts.train_n);
    let train_f = layer_features(model, train_p, opts.stream)?;
    let eval_f = layer_features(model, eval_p, opts.stream)?;
    let e = gen.embed_dim;
    let mut digest = Sha256::new();
    let mut layers = Vec::new();
    for l in 0..train_f.len() {
        let take = |f: &[(Vec<f64>, Vec<f64>)], diff: bool| -> Vec<Vec<f64>> {
            f.iter()
                .map(|(a, b)| if diff { a.iter().zip(b).map(|(x, y)| x - y).collect() } else { a.clone() })
                .collect()
        };
        let (tx, ex) = (take(&train_f[l], false), take(&eval_f[l], false));
        let (td, ed) = (take(&train_f[l], true), take(&eval_f[l], true));
        let (mut s, mut sd, mut sp) = (0.0, 0.0, 0.0);
        let mut ridge = false;
        for c in 0..e {
            let ty = probe_labels(train_p, opts.target, c);
            let ey = probe_labels(eval_p, opts.target, c);
            let (r, probe) = probe_score(&tx, &ty, &ex, &ey)?;
            for w in probe.weights.iter().chain([&probe.intercept]) {
                digest.update(w.to_le_bytes());
            }
            ridge |= probe.ridge;
            s += r;
            sd += probe_score(&td, &ty, &ed, &ey)?.0;
            let mut rng = stream(gen.seed, (l * e + c) as u64, Field::Probe);
            let (mut pty, mut pey) = (ty.clone(), ey.clone());
            pty.shuffle(&mut rng);
            pey.shuffle(&mut rng);
            sp += probe_score(&tx, &pty, &ex, &pey)?.0;
        }
        layers.push(LayerProbe {
            layer: l + 1,
            adj_r2: s / e as f64,
            diff_adj_r2: sd / e as f64,
            permuted_adj_r2: sp / e as f64,
            ridge,
        });
    }
    Ok(ProbeResult {
        options: opts,
        layers,
        weights_digest: digest.finalize().iter().map(|b| format!("{:02x}", b)).collect(),
    })
}

/// Attention mass of one head from the anchor-token row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    /// Mean mass on `y_z`, per tested `z`.
    pub y_mass: Vec<f64>,
    /// Mean mass on `x_z`, per tested `z`.
    pub x_mass: Vec<f64>,
    /// Mean of `y_mass` over the tested anchors.
    pub score: f64,
    /// `y_mass` exceeds the threshold for every anchor.
    pub qualifies: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnSummary {
    pub z_values: Vec<usize>,
    pub threshold: f64,
    /// Sorted by score, best first.
    pub heads: Vec<HeadScore>,
}

pub const ABDUCTION_THRESHOLD: f64 = 0.5;

/// Mean `(x_z, y_z)` mass per `[layer][head]` for maps `[B*H, T, T]` of
/// counterfactual prompts with `n` examples, anchored at `z`.
pub fn anchor_mass(maps: &[Option<Tensor>], heads: usize, n: usize, z: usize) -> Result<Vec<Vec<(f64, f64)>>> {
    let seq = 2 * n + 2;
    if z == 0 || z > n {
        return Err(Error::Config(format!("anchor {} outside 1..={}", z, n)));
    }
    let row = 2 * n;
    let (cx, cy) = (2 * (z - 1), 2 * z - 1);
    let mut out = Vec::with_capacity(maps.len());
    for m in maps {
        let Some(m) = m else {
            out.push(Vec::new());
            continue;
        };
        let s = m.shape();
        if s.len() != 3 || s[1] != seq || s[2] != seq || s[0] % heads != 0 {
            return Err(Error::dim("anchor_mass", format!("map {:?} for T={} and {} heads", s, seq, heads)));
        }
        let batch = s[0] / heads;
        let d = m.data();
        let at = |bh: usize, col: usize| d[(bh * seq + row) * seq + col];
        out.push(
            (0..heads)
                .map(|h| {
                    let (mut x, mut y) = (0.0, 0.0);
                    for b in 0..batch {
                        x += at(b * heads + h, cx);
                        y += at(b * heads + h, cy);
                    }
                    (x / batch as f64, y / batch as f64)
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Ranks heads from per-anchor masses `masses[k][layer][head]`.
pub fn summarize_heads(z_values: &[usize], masses: &[Vec<Vec<(f64, f64)>>], threshold: f64) -> AttnSummary {
    let mut heads = Vec::new();
    if let Some(first) = masses.first() {
        for (l, layer) in first.iter().enumerate() {
            for h in 0..layer.len() {
                let y_mass: Vec<f64> = masses.iter().map(|m| m[l][h].1).collect();
                let x_mass: Vec<f64> = masses.iter().map(|m| m[l][h].0).collect();
                heads.push(HeadScore {
                    layer: l + 1,
                    head: h,
                    score: mean(&y_mass),
                    qualifies: y_mass.iter().all(|&v| v > threshold),
                    y_mass,
                    x_mass,
                });
            }
        }
    }
    heads.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    AttnSummary {
        z_values: z_values.to_vec(),
        threshold,
        heads,
    }
}

/// Where the anchor-token row of each head looks, across anchors.
pub fn detect_abduction_heads(
    model: &ModelState,
    gen: &GenConfig,
    z_values: &[usize],
    n: usize,
    batches: usize,
    batch_size: usize,
) -> Result<AttnSummary> {
    let heads = match &model.config {
        ModelConfig::Transformer(c) if c.variant.has_attention() => c.heads,
        _ => return Err(Error::Unsupported("attention summary needs a model with attention".into())),
    };
    let mut cfg = gen.clone();
    cfg.fixed_z = None;
    cfg.task = crate::datagen::Task::Counterfactual;
    check_lengths(&cfg, &[n], model.max_len())?;
    let g = Generator::new(cfg)?;
    let mut masses = Vec::with_capacity(z_values.len());
    for &z in z_values {
        let ov = Overrides { n: Some(n), z: Some(z) };
        let mut acc: Option<Vec<Vec<(f64, f64)>>> = None;
        for k in 0..batches {
            let prompts = (0..batch_size as u64)
                .map(|b| g.sample_with(EVAL_OFFSET + (k * batch_size) as u64 + b, ov))
                .collect::<Result<Vec<_>>>()?;
            let tokens: Vec<Tensor> = prompts.iter().map(|p| p.token_tensor()).collect();
            let refs: Vec<&Tensor> = tokens.iter().collect();
            let trace = forward_batch(model, &refs, Some(&[]))?;
            let m = anchor_mass(&trace.attention, heads, n, z)?;
            acc = Some(match acc {
                None => m,
                Some(a) => a
                    .iter()
                    .zip(&m)
                    .map(|(la, lm)| la.iter().zip(lm).map(|(p, q)| (p.0 + q.0, p.1 + q.1)).collect())
                    .collect(),
            });
        }
        let a = acc.ok_or_else(|| Error::Config("need at least one batch".into()))?;
        masses.push(
            a.iter()
                .map(|l| l.iter().map(|&(x, y)| (x / batches as f64, y / batches as f64)).collect())
                .collect(),
        );
    }
    // Attention-free layers contribute no heads.
    let masses: Vec<Vec<Vec<(f64, f64)>>> = masses;
    Ok(summarize_heads(z_values, &masses, ABDUCTION_THRESHOLD))
}

/// Which latent distribution a sweep evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOn {
    /// Fresh latents from the given law.
    Fresh(ThetaDist),
    /// The training pool itself.
    TrainingPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub pool_size: usize,
    pub train_dist: ThetaDist,
    pub eval_on: EvalOn,
    pub ess: f64,
    pub mse: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityPlan {
    pub pool_sizes: Vec<usize>,
    pub train_dists: Vec<ThetaDist>,
    pub eval_on: Vec<EvalOn>,
    pub lengths: Vec<usize>,
    pub seqs_per_length: usize,
}

pub fn diversity_csv(rows: &[DiversityRow]) -> String {
    let mut s = String::from("pool_size,train_dist,eval_on,ess,mse,ci_lower,ci_upper\n");
    for r in rows {
        let dist = |d: ThetaDist| match d {
            ThetaDist::Uniform => "uniform",
            ThetaDist::Normal => "normal",
        };
        let on = match r.eval_on {
            EvalOn::Fresh(d) => dist(d).to_string(),
            EvalOn::TrainingPool => "pool".to_string(),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.pool_size,
            dist(r.train_dist),
            on,
            r.ess,
            r.mse,
            r.lower,
            r.upper
        ));
    }
    s
}

/// MSE pooled over all lengths with a bootstrap interval.
pub fn pooled_error(pred: &dyn Predictor, gen: &GenConfig, lengths: &[usize], seqs: usize) -> Result<(f64, f64, f64)> {
    check_lengths(gen, lengths, pred.max_len())?;
    let g = Generator::new(gen.clone())?;
    let mut errors = Vec::new();
    for &n in lengths {
        errors.extend(sequence_errors(pred, &eval_prompts(&g, n, seqs)?)?);
    }
    let (lo, hi) = bootstrap_ci(&errors, 0.05, RESAMPLES, &mut stream(gen.seed, 0, Field::Bootstrap))?;
    Ok((mean(&errors), lo, hi))
}

/// Trains one model per `(pool size, training law)` and evaluates it on
/// every requested latent distribution.
pub fn diversity_sweep(plan: &DiversityPlan, base: &GenConfig, model: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<DiversityRow>> {
    let mut rows = Vec::new();
    for &d in &plan.pool_sizes {
        for &dist in &plan.train_dists {
            let gen = GenConfig {
                diversity: Some(d),
                theta_dist: dist,
                ..base.clone()
            };
            let src = RegressionSource::new(gen.clone(), train_cfg.batch_constant_z)?;
            let weights = src.generator().pool().map(|p| p.weights.clone()).unwrap_or_default();
            let ess = ess(&weights)?;
            let (ck, _) = train(model, &src, train_cfg)?;
            for &on in &plan.eval_on {
                let eval_gen = match on {
                    EvalOn::Fresh(e) => GenConfig {
                        diversity: None,
                        theta_dist: e,
                        ..gen.clone()
                    },
                    EvalOn::TrainingPool => gen.clone(),
                };
                let (mse, lower, upper) = pooled_error(&ck.model, &eval_gen, &plan.lengths, plan.seqs_per_length)?;
                rows.push(DiversityRow {
                    pool_size: d,
                    train_dist: dist,
                    eval_on: on,
                    ess,
                    mse,
                    lower,
                    upper,
                });
            }
        }
    }
    Ok(rows)
}

/// Completion error of a model on teacher-forced SDE prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeCurve {
    /// Per completion token: mean, lower, upper.
    pub per_token: Vec<(f64, f64, f64)>,
    pub overall: (f64, f64, f64),
    pub sequences: usize,
}

impl SdeCurve {
    /// Columns: `token,mse,ci_lower,ci_upper`; token `all` is the pooled row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("token,mse,ci_lower,ci_upper\n");
        for (j, (m, lo, hi)) in self.per_token.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", j, m, lo, hi));
        }
        let (m, lo, hi) = self.overall;
        s.push_str(&format!("all,{},{},{}\n", m, lo, hi));
        s
    }
}

/// Mean squared completion error per scored token over `seqs` fresh pairs.
pub fn sde_completion_curve(model: &ModelState, cfg: &crate::sde::SdeConfig, seqs: usize) -> Result<SdeCurve> {
    use crate::sde::{sample_pair, sde_batch, sde_prompt};
    if seqs == 0 {
        return Err(Error::Config("need at least one sequence".into()));
    }
    let e = cfg.embed_dim;
    let mut per_seq: Vec<Vec<f64>> = Vec::with_capacity(seqs);
    for start in (0..seqs).step_by(EVAL_CHUNK) {
        let prompts = (start..(start + EVAL_CHUNK).min(seqs))
            .map(|i| sample_pair(cfg, EVAL_OFFSET + i as u64).map(|p| sde_prompt(&p)))
            .collect::<Result<Vec<_>>>()?;
        let batch = sde_batch(&prompts)?;
        let tokens = batch.read.len() / prompts.len();
        let out = crate::training::Trainer::predict_batch(model, &batch)?;
        for b in 0..prompts.len() {
            per_seq.push(
                (0..tokens)
                    .map(|j| {
                        let r = b * tokens + j;
                        (0..e).map(|c| (out.at(r, c) - batch.targets.at(r, c)).powi(2)).sum::<f64>() / e as f64
                    })
                    .collect(),
            );
        }
    }
    let tokens = per_seq[0].len();
    let mut per_token = Vec::with_capacity(tokens);
    for j in 0..tokens {
        let col: Vec<f64> = per_seq.iter().map(|r| r[j]).collect();
        let (lo, hi) = bootstrap_ci(&col, 0.05, RESAMPLES, &mut stream(cfg.seed, j as u64, Field::Bootstrap))?;
        per_token.push((mean(&col), lo, hi));
    }
    let pooled: Vec<f64> = per_seq.iter().map(|r| mean(r)).collect();
    let (lo, hi) = bootstrap_ci(&pooled, 0.05, RESAMPLES, &mut stream(cfg.seed, u64::MAX, Field::Bootstrap))?;
    Ok(SdeCurve {
        per_token,
        overall: (mean(&pooled), lo, hi),
        sequences: seqs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, TransformerConfig};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn bootstrap_constant_samples() {
        let (lo, hi) = bootstrap_ci(&[3.5; 50], 0.05, 200, &mut stream(0, 0, Field::Misc)).unwrap();
        assert_eq!((lo, hi), (3.5, 3.5));
    }

    #[test]
    fn bootstrap_contains_mean() {
        let xs: Vec<f64> = (0..101).map(|i| (i as f64 - 50.0).powi(3)).collect();
        let (lo, hi) = bootstrap_ci(&xs, 0.05, 500, &mut stream(0, 1, Field::Misc)).unwrap();
        assert!(lo <= 0.0 && 0.0 <= hi);
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        let mut r = stream(0, 0, Field::Misc);
        assert!(bootstrap_ci(&[], 0.05, 10, &mut r).is_err());
        assert!(bootstrap_ci(&[1.0], 1.0, 10, &mut r).is_err());
        assert!(bootstrap_ci(&[1.0], 0.05, 0, &mut r).is_err());
    }

    #[test]
    fn bootstrap_width_shrinks_like_root_n() {
        let mut r = stream(9, 0, Field::Misc);
        let draw = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(r)).collect() };
        let small = draw(1600, &mut r);
        let large = draw(6400, &mut r);
        let w = |s: &[f64], r: &mut rand_chacha::ChaCha8Rng| {
            let (lo, hi) = bootstrap_ci(s, 0.05, 1000, r).unwrap();
            hi - lo
        };
        let ratio = w(&large, &mut r) / w(&small, &mut r);
        assert!((0.4..=0.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&s, 0.0), 0.0);
        assert_eq!(quantile(&s, 1.0), 3.0);
        assert_eq!(quantile(&s, 0.5), 1.5);
    }

    fn small_gen() -> GenConfig {
        GenConfig {
            n_max: 10,
            seed: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn oracle_curve_is_zero() {
        let c = eval_curve(&MetadataOracle, &small_gen(), &[2, 5, 10], 50).unwrap();
        assert!(c.mean.iter().all(|&m| m == 0.0));
        assert!(c.lower.iter().zip(&c.upper).all(|(l, u)| *l == 0.0 && *u == 0.0));
    }

    #[test]
    fn curve_csv_has_one_row_per_length() {
        let lengths: Vec<usize> = (2..=10).collect();
        let c = eval_curve(&ZeroPredictor, &small_gen(), &lengths, 20).unwrap();
        assert_eq!(c.to_csv().lines().count(), 1 + lengths.len());
        for i in 0..lengths.len() {
            assert!(c.lower[i] <= c.mean[i] && c.mean[i] <= c.upper[i]);
        }
    }

    #[test]
    fn length_checks() {
        let model = init_model(
            &ModelConfig::Transformer(TransformerConfig {
                layers: 1,
                heads: 1,
                hidden: 4,
                max_len: 10,
                ..TransformerConfig::default()
            }),
            0,
        )
        .unwrap();
        let e = eval_curve(&model, &small_gen(), &[5], 2).unwrap_err();
        assert!(matches!(e, Error::ContextOverflow { len: 12, max: 10 }));
        assert!(eval_curve(&model, &small_gen(), &[3, 2], 2).is_err());
        assert!(eval_curve(&model, &small_gen(), &[2, 4], 2).is_ok());
    }

    #[test]
    fn ols_noiseless_is_exact() {
        // One example per prompt cannot be fitted.
        assert!(ols_baseline_curve(&small_gen(), &[1], 10).is_err());
        let c = ols_baseline_curve(&small_gen(), &[2, 10], 500).unwrap();
        assert!(c.mean[0] > c.mean[1]);
        assert!(c.mean[0].is_finite());
    }

    #[test]
    fn planted_probe_signal() {
        let mut r = stream(1, 0, Field::Misc);
        let v: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut make = |n: usize| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for _ in 0..n {
                let t: f64 = r.random_range(-6.0..6.0);
                let row: Vec<f64> = v
                    .iter()
                    .map(|&vi| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        t * vi + 0.01 * e
                    })
                    .collect();
                xs.push(row);
                ys.push(t);
            }
            (xs, ys)
        };
        let (tx, ty) = make(2000);
        let (ex, ey) = make(500);
        let (r2, probe) = probe_score(&tx, &ty, &ex, &ey).unwrap();
        assert!(r2 > 0.99 && r2 <= 1.0, "{r2}");
        assert!(!probe.ridge);

        let mut pty = ty.clone();
        let mut pey = ey.clone();
        pty.shuffle(&mut r);
        pey.shuffle(&mut r);
        let (pr2, _) = probe_score(&tx, &pty, &ex, &pey).unwrap();
        assert!(pr2.abs() < 0.05, "{pr2}");
        assert!(r2 - pr2 > 0.5);
    }

    #[test]
    fn perfect_probe_and_ridge_fallback() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let ys: Vec<f64> = (0..50).map(|i| 3.0 * i as f64 + 1.0).collect();
        let (r2, probe) = probe_score(&xs, &ys, &xs, &ys).unwrap();
        assert!(probe.ridge);
        assert!((r2 - 1.0).abs() < 1e-9, "{r2}");

        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, ((i * 7) % 11) as f64]).collect();
        let ys: Vec<f64> = xs.iter().map(|r| 2.0 * r[0] - r[1] + 0.5).collect();
        let (r2, probe) = probe_score(&xs, &ys, &xs, &ys).unwrap();
        assert!(!probe.ridge);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    fn one_hot_maps(batch: usize, heads: usize, n: usize, z: usize, winner: usize) -> Tensor {
        let seq = 2 * n + 2;
        let mut d = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                for row in 0..seq {
                    let base = ((b * heads + h) * seq + row) * seq;
                    if h == winner && row == 2 * n {
                        d[base + 2 * z - 1] = 1.0;
                    } else {
                        for c in 0..=row {
                            d[base + c] = 1.0 / (row + 1) as f64;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch * heads, seq, seq], d).unwrap()
    }

    #[test]
    fn planted_abduction_head_ranks_first() {
        let n = 6;
        let zs = [1, 3, 6];
        let masses: Vec<_> = zs
            .iter()
            .map(|&z| anchor_mass(&[None, Some(one_hot_maps(3, 2, n, z, 1))], 2, n, z).unwrap())
            .collect();
        let s = summarize_heads(&zs, &masses, ABDUCTION_THRESHOLD);
        assert_eq!((s.heads[0].layer, s.heads[0].head), (2, 1));
        assert_eq!(s.heads[0].score, 1.0);
        assert!(s.heads[0].qualifies);
        let uniform = &s.heads[1];
        assert!((uniform.score - 1.0 / (2 * n + 1) as f64).abs() < 1e-12);
        assert!(!uniform.qualifies);
    }

    #[test]
    fn abduction_scan_on_random_model() {
        let model = init_model(
            &ModelConfig::Transformer(TransformerConfig {
                layers: 2,
                heads: 2,
                hidden: 8,
                max_len: 30,
                ..TransformerConfig::default()
            }),
            1,
        )
        .unwrap();
        let s = detect_abduction_heads(&model, &small_gen(), &[1, 4], 8, 2, 4).unwrap();
        assert_eq!(s.heads.len(), 4);
        for h in &s.heads {
            assert!(h.y_mass.iter().chain(&h.x_mass).all(|m| (0.0..=1.0).contains(m)));
        }
    }

    #[test]
    fn probe_on_random_model_runs() {
        let model = init_model(
            &ModelConfig::Transformer(TransformerConfig {
                layers: 2,
                heads: 2,
                hidden: 8,
                max_len: 30,
                ..TransformerConfig::default()
            }),
            1,
        )
        .unwrap();
        let opts = ProbeOptions {
            target: ProbeTarget::Theta,
            stream: ProbeStream::Hidden,
            train_n: 200,
            eval_n: 100,
            examples: 8,
        };
        let r = probe_layers(&model, &small_gen(), opts).unwrap();
        assert_eq!(r.layers.len(), 2);
        assert!(r.layers.iter().all(|l| l.adj_r2 <= 1.0));
        assert_eq!(r.weights_digest.len(), 64);
    }
}
