//! Online training loop: fresh batches per step, MSE on scored positions,
//! AdamW, checkpoints that resume bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::{GenConfig, Generator, Overrides};
use crate::error::{Error, Result};
use crate::models::{build_forward, init_model, ModelConfig, ModelState};
use crate::rng::{stream, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Score only the final position of each sequence.
    FinalToken,
    /// Score every position flagged by the task's completion mask.
    CompletionMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    #[serde(rename = "learning_rate", alias = "lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: u64,
    #[serde(default = "d_mask")]
    pub loss_mask: LossMask,
    pub seed: u64,
    /// Drop wall-clock timings so traces compare bitwise.
    #[serde(default = "d_true")]
    pub deterministic: bool,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Share one anchor `z` across each batch.
    #[serde(default)]
    pub batch_constant_z: bool,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.01
}
fn d_eval_every() -> u64 {
    1000
}
fn d_ckpt_every() -> u64 {
    1000
}
fn d_mask() -> LossMask {
    LossMask::FinalToken
}
fn d_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch: 64,
            lr: 1e-4,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            eval_every: d_eval_every(),
            checkpoint_every: d_ckpt_every(),
            loss_mask: d_mask(),
            seed: 0,
            deterministic: true,
            clip_norm: None,
            batch_constant_z: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for the SDE task.
    pub fn sde() -> Self {
        TrainConfig {
            batch: 8,
            loss_mask: LossMask::CompletionMask,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid AdamW moments".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One training batch, already laid out for [`build_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch*seq, E]`.
    pub input: Tensor,
    pub batch: usize,
    pub seq: usize,
    /// Rows of `input` whose predictions are scored.
    pub read: Vec<usize>,
    /// `[read.len(), E]`.
    pub targets: Tensor,
}

/// Produces the batch for a given step, deterministically.
pub trait BatchSource {
    fn batch(&self, step: u64, size: usize) -> Result<Batch>;
    /// Stable description that enters the checkpoint digest.
    fn describe(&self) -> serde_json::Value;
    /// Longest sequence this source can emit.
    fn max_seq(&self) -> usize;
    fn embed_dim(&self) -> usize;
}

/// Regression prompts; every batch shares its example count.
#[derive(Debug, Clone)]
pub struct RegressionSource {
    gen: Generator,
    batch_constant_z: bool,
}

impl RegressionSource {
    pub fn new(cfg: GenConfig, batch_constant_z: bool) -> Result<Self> {
        Ok(RegressionSource {
            gen: Generator::new(cfg)?,
            batch_constant_z,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }
}

impl BatchSource for RegressionSource {
    fn batch(&self, step: u64, size: usize) -> Result<Batch> {
        let mut rng = stream(self.gen.config().seed, step, Field::Batch);
        let n = self.gen.draw_n(&mut rng);
        let z = match (self.batch_constant_z, self.gen.config().fixed_z) {
            (true, None) => Some(rng.random_range(1..=n)),
            _ => None,
        };
        let ov = Overrides { n: Some(n), z };
        let records = (0..size as u64)
            .map(|b| self.gen.sample_with(step * size as u64 + b, ov))
            .collect::<Result<Vec<_>>>()?;
        let seq = records[0].seq_len();
        let e = self.gen.config().embed_dim;
        let mut input = Vec::with_capacity(size * seq * e);
        let mut targets = Vec::with_capacity(size * e);
        for r in &records {
            input.extend(r.tokens.iter().flatten());
            targets.extend_from_slice(&r.target);
        }
        Ok(Batch {
            input: Tensor::new(vec![size * seq, e], input)?,
            batch: size,
            seq,
            read: (0..size).map(|b| b * seq + seq - 1).collect(),
            targets: Tensor::new(vec![size, e], targets)?,
        })
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "task": "regression",
            "gen": self.gen.config(),
            "batch_constant_z": self.batch_constant_z,
        })
    }

    fn max_seq(&self) -> usize {
        self.gen.config().seq_len(self.gen.config().n_max)
    }

    fn embed_dim(&self) -> usize {
        self.gen.config().embed_dim
    }
}

/// Mean squared error over masked rows: `sum ||err||^2 / (rows * E)`.
pub fn mse_loss(preds: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<f64> {
    if preds.shape() != targets.shape() || preds.rows() != mask.len() {
        return Err(Error::dim(
            "mse_loss",
            format!("{:?} vs {:?} with mask {}", preds.shape(), targets.shape(), mask.len()),
        ));
    }
    let rows = mask.iter().filter(|&&m| m).count();
    if rows == 0 {
        return Err(Error::Contract("loss mask selects no position".into()));
    }
    let e = preds.cols();
    let mut s = 0.0;
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (p, t) in preds.row(r).iter().zip(targets.row(r)) {
            s += (p - t) * (p - t);
        }
    }
    Ok(s / (rows * e) as f64)
}

fn tape_mse(tape: &mut Tape, out: Var, target: &Tensor) -> Result<Var> {
    let t = tape.leaf(target.clone());
    let d = tape.sub(out, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / target.len() as f64)
}

/// First and second moments of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: z.clone(), v: z }
    }
}

/// One AdamW update at step `t >= 1`: decoupled decay, then the
/// bias-corrected adaptive step.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], opt: &mut AdamState, cfg: &TrainConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("AdamW step index starts at 1".into()));
    }
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::dim("adamw_step", "parameter/gradient count mismatch"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: t as usize,
            detail: "non-finite gradient".into(),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        if p.shape() != grads[i].shape() {
            return Err(Error::dim("adamw_step", format!("{:?} vs {:?}", p.shape(), grads[i].shape())));
        }
        let g = grads[i].data();
        let m = opt.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = opt.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (opt.m[i].data(), opt.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            *pj *= decay;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *pj -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Training history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<u64>,
    pub train_mse: Vec<f64>,
    /// `(step, in-context eval MSE)`.
    pub evals: Vec<(u64, f64)>,
    /// Seconds per step; empty for deterministic runs.
    pub step_seconds: Vec<f64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub model: ModelState,
    pub opt: AdamState,
    pub step: u64,
    /// Index of the next batch to draw.
    pub rng_cursor: u64,
}

/// Digest of everything that shapes the optimization trajectory.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig, source: &dyn BatchSource) -> [u8; 32] {
    let mut t = train.clone();
    // Run length and cadences do not change the trajectory.
    t.steps = 0;
    t.eval_every = 0;
    t.checkpoint_every = 0;
    t.deterministic = true;
    let doc = serde_json::json!({ "model": model, "train": t, "source": source.describe() });
    Sha256::digest(doc.to_string().as_bytes()).into()
}

/// Stateful optimizer loop.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    source: &'a dyn BatchSource,
    model: ModelState,
    opt: AdamState,
    step: u64,
    digest: [u8; 32],
    trace: LossTrace,
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig, source: &'a dyn BatchSource) -> Result<Self> {
        cfg.validate()?;
        let model = init_model(model_cfg, cfg.seed)?;
        Self::check_fit(model_cfg, source)?;
        let opt = AdamState::zeros_like(&model.params);
        let digest = config_digest(model_cfg, &cfg, source);
        Ok(Trainer {
            cfg,
            source,
            model,
            opt,
            step: 0,
            digest,
            trace: LossTrace::default(),
        })
    }

    fn check_fit(model_cfg: &ModelConfig, source: &dyn BatchSource) -> Result<()> {
        if model_cfg.embed_dim() != source.embed_dim() {
            return Err(Error::Config(format!(
                "model embeds {} dims but data has {}",
                model_cfg.embed_dim(),
                source.embed_dim()
            )));
        }
        if let Some(max) = model_cfg.max_len() {
            if source.max_seq() > max {
                return Err(Error::Config(format!(
                    "sequences of length {} exceed the model context {}",
                    source.max_seq(),
                    max
                )));
            }
        }
        Ok(())
    }

    /// Continues from `ck`; the configs must hash to the stored digest.
    pub fn resume(ck: Checkpoint, cfg: TrainConfig, source: &'a dyn BatchSource) -> Result<Self> {
        cfg.validate()?;
        let digest = config_digest(&ck.model.config, &cfg, source);
        if digest != ck.config_digest {
            return Err(Error::Config("checkpoint was written for a different configuration".into()));
        }
        Self::check_fit(&ck.model.config, source)?;
        Ok(Trainer {
            cfg,
            source,
            model: ck.model,
            opt: ck.opt,
            step: ck.step,
            digest,
            trace: LossTrace::default(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (ModelState, LossTrace) {
        (self.model, self.trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_digest: self.digest,
            model: self.model.clone(),
            opt: self.opt.clone(),
            step: self.step,
            rng_cursor: self.step,
        }
    }

    /// Loss and gradients of the current parameters on `batch`.
    pub fn loss_and_grads(model: &ModelState, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let x = tape.leaf(batch.input.clone());
        let g = build_forward(&mut tape, &model.config, &params, x, batch.batch, batch.seq, Some(&batch.read))?;
        let loss = tape_mse(&mut tape, g.output, &batch.targets)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, params.iter().map(|&p| grads.wrt(p)).collect()))
    }

    /// Predictions at the scored rows of `batch`, `[read.len(), E]`.
    pub fn predict_batch(model: &ModelState, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let x = tape.leaf(batch.input.clone());
        let g = build_forward(&mut tape, &model.config, &params, x, batch.batch, batch.seq, Some(&batch.read))?;
        Ok(tape.value(g.output).clone())
    }

    /// One optimizer step on the next batch; returns the pre-update loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let started = Instant::now();
        let t = self.step + 1;
        let batch = self.source.batch(self.step, self.cfg.batch)?;
        let diverged = |detail: String| Error::Divergence { step: t as usize, detail };
        let (loss, mut grads) = match Self::loss_and_grads(&self.model, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {}", op))),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged("non-finite loss".into()));
        }
        if let Some(max) = self.cfg.clip_norm {
            let norm = grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= max / norm);
                }
            }
        }
        adamw_step(&mut self.model.params, &grads, &mut self.opt, &self.cfg, t)?;
        if !self.model.is_finite() {
            return Err(diverged("parameters became non-finite".into()));
        }
        self.step = t;
        self.trace.steps.push(t);
        self.trace.train_mse.push(loss);
        if !self.cfg.deterministic {
            self.trace.step_seconds.push(started.elapsed().as_secs_f64());
        }
        Ok(loss)
    }

    /// Runs until `cfg.steps`, calling `on_eval` and `on_checkpoint` at
    /// their cadences and once more at the end.
    pub fn run(
        &mut self,
        mut on_eval: Option<&mut dyn FnMut(&ModelState) -> Result<f64>>,
        mut on_checkpoint: Option<&mut dyn FnMut(&Checkpoint) -> Result<()>>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            self.train_step()?;
            let last = self.step == self.cfg.steps;
            if let Some(f) = on_eval.as_mut() {
                if last || (self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0) {
                    let mse = f(&self.model)?;
                    self.trace.evals.push((self.step, mse));
                }
            }
            if let Some(f) = on_checkpoint.as_mut() {
                if !last && self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    f(&self.checkpoint())?;
                }
            }
        }
        if let Some(f) = on_checkpoint.as_mut() {
            f(&self.checkpoint())?;
        }
        Ok(())
    }
}

/// Trains from scratch without hooks.
pub fn train(model_cfg: &ModelConfig, source: &dyn BatchSource, cfg: &TrainConfig) -> Result<(Checkpoint, LossTrace)> {
    let mut trainer = Trainer::new(model_cfg, cfg.clone(), source)?;
    trainer.run(None, None)?;
    let ck = trainer.checkpoint();
    Ok((ck, trainer.trace))
}

/// Start of the first trailing window whose mean is below `threshold` and
/// stays below for the rest of the trace.
pub fn detect_phase_transition(steps: &[u64], losses: &[f64], threshold: f64, window: usize) -> Result<Option<u64>> {
    if window == 0 {
        return Err(Error::Contract("window must be >= 1".into()));
    }
    if steps.len() != losses.len() {
        return Err(Error::dim("detect_phase_transition", "steps and losses differ in length"));
    }
    if losses.len() < window {
        return Ok(None);
    }
    let mut sum: f64 = losses[..window].iter().sum();
    let mut means = vec![sum / window as f64];
    for i in window..losses.len() {
        sum += losses[i] - losses[i - window];
        means.push(sum / window as f64);
    }
    // means[k] covers losses[k..k+window].
    let mut first = None;
    for k in (0..means.len()).rev() {
        if means[k] < threshold {
            first = Some(k);
        } else {
            break;
        }
    }
    Ok(first.map(|k| steps[k]))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_values(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes the little-endian checkpoint file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let cfg = serde_json::to_string(&ck.model.config).map_err(|e| Error::format(path, e.to_string()))?;
    (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        w.write_all(&ck.config_digest)?;
        put_u32(&mut w, cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;
        put_u64(&mut w, ck.step)?;
        put_u64(&mut w, ck.rng_cursor)?;
        put_u32(&mut w, ck.model.params.len() as u32)?;
        for (name, t) in ck.model.names.iter().zip(&ck.model.params) {
            put_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u64(&mut w, d as u64)?;
            }
            put_values(&mut w, t)?;
        }
        for (m, v) in ck.opt.m.iter().zip(&ck.opt.v) {
            put_values(&mut w, m)?;
            put_values(&mut w, v)?;
        }
        w.flush()
    })()
    .map_err(io)
}

struct Reader<'p, R> {
    r: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "truncated checkpoint")
            } else {
                Error::io(self.path, e)
            }
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        r: BufReader::new(file),
        path,
    };
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", version)));
    }
    let digest: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
    let len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.bytes(len)?).map_err(|e| Error::format(path, e.to_string()))?;
    let config: ModelConfig = serde_json::from_str(&cfg_text).map_err(|e| Error::format(path, e.to_string()))?;
    let step = r.u64()?;
    let rng_cursor = r.u64()?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(n)?).map_err(|e| Error::format(path, e.to_string()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = shape.iter().product();
        params.push(Tensor::new(shape, r.values(size)?)?);
        names.push(name);
    }
    let mut opt = AdamState::zeros_like(&params);
    for i in 0..count {
        let size = params[i].len();
        opt.m[i].data_mut().copy_from_slice(&r.values(size)?);
        opt.v[i].data_mut().copy_from_slice(&r.values(size)?);
    }
    let model = ModelState::from_parts(config, names, params).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        config_digest: digest,
        model,
        opt,
        step,
        rng_cursor,
    })
}
