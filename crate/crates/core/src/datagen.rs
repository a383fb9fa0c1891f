//! Exchangeable regression prompts for in-context counterfactual reasoning.
//!
//! A record serializes `(x_1, y_1, ..., x_n, y_n, z, x_cf)` as a `T x E`
//! token matrix; the target is the counterfactual outcome of pair `z` under
//! `do(X = x_cf)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, Field};
use crate::scm::{apply_link, counterfactual, NoiseModelKind};

pub const DATASET_FORMAT: &str = "iccr-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// Support of the uniform latent and the intervened input.
pub const SUPPORT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaDist {
    /// `U[-6, 6]^E`.
    Uniform,
    /// `N(0, 12 I)`, matching the uniform's variance.
    Normal,
}

impl ThetaDist {
    /// Density of one component; used to weight pool members.
    pub fn density(self, v: f64) -> f64 {
        match self {
            ThetaDist::Uniform => {
                if v.abs() <= SUPPORT {
                    1.0 / (2.0 * SUPPORT)
                } else {
                    0.0
                }
            }
            ThetaDist::Normal => (-v * v / 24.0).exp() / (24.0 * std::f64::consts::PI).sqrt(),
        }
    }

    fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            ThetaDist::Uniform => rng.random_range(-SUPPORT..=SUPPORT),
            ThetaDist::Normal => {
                let z: f64 = rng.sample(StandardNormal);
                z * 12f64.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Counterfactual,
    /// Predict a fresh observation at `x_cf`; no anchor token.
    Continuation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub embed_dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub theta_dist: ThetaDist,
    #[serde(default)]
    pub diversity: Option<usize>,
    pub kind: NoiseModelKind,
    pub task: Task,
    #[serde(default)]
    pub fixed_z: Option<usize>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            embed_dim: 1,
            n_min: 2,
            n_max: 50,
            theta_dist: ThetaDist::Uniform,
            diversity: None,
            kind: NoiseModelKind::linear(),
            task: Task::Counterfactual,
            fixed_z: None,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "invalid example range {}..={}",
                self.n_min, self.n_max
            )));
        }
        if self.diversity == Some(0) {
            return Err(Error::Config("diversity must be >= 1".into()));
        }
        if let Some(z) = self.fixed_z {
            if z == 0 || z > self.n_min {
                return Err(Error::Config(format!(
                    "fixed anchor {} must lie in 1..={} (minimum example count)",
                    z, self.n_min
                )));
            }
        }
        self.kind.validate()
    }

    /// Sequence length for `n` in-context examples.
    pub fn seq_len(&self, n: usize) -> usize {
        match self.task {
            Task::Counterfactual => 2 * n + 2,
            Task::Continuation => 2 * n + 1,
        }
    }
}

/// Finite set of latent values with selection probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPool {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Draws the `d` pool members once per seed.
pub fn make_pool(cfg: &GenConfig) -> Result<ThetaPool> {
    let d = cfg
        .diversity
        .ok_or_else(|| Error::Config("make_pool needs a diversity value".into()))?;
    if d == 0 {
        return Err(Error::Config("diversity must be >= 1".into()));
    }
    let mut rng = stream(cfg.seed, 0, Field::Pool);
    let values: Vec<f64> = (0..d).map(|_| cfg.theta_dist.draw(&mut rng)).collect();
    let weights = match cfg.theta_dist {
        ThetaDist::Uniform => vec![1.0 / d as f64; d],
        ThetaDist::Normal => {
            let dens: Vec<f64> = values.iter().map(|&v| cfg.theta_dist.density(v)).collect();
            let total: f64 = dens.iter().sum();
            dens.iter().map(|p| p / total).collect()
        }
    };
    Ok(ThetaPool { values, weights })
}

/// Effective support size `exp(H)` of a probability vector.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Contract("empty weight vector".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Contract(format!("invalid weight {}", w)));
    }
    // Equal weights: exp(H) is the support size, which the log/exp round
    // trip would only reproduce to a few ulps.
    let mut support = weights.iter().filter(|&&w| w > 0.0);
    if let Some(&first) = support.clone().next() {
        if support.all(|&w| w == first) {
            return Ok(weights.iter().filter(|&&w| w > 0.0).count() as f64);
        }
    }
    let h: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum();
    Ok(h.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub u_x: Vec<Vec<f64>>,
    pub u_y: Vec<Vec<f64>>,
    pub x_cf: Vec<f64>,
    /// 1-based anchor; absent for continuation prompts.
    pub z: Option<usize>,
    pub n: usize,
    /// Fresh outcome noise used by continuation targets.
    #[serde(default)]
    pub fresh_u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    /// `T` rows of width `E`.
    pub tokens: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub meta: PromptMeta,
    pub kind: NoiseModelKind,
    pub theta_dist: ThetaDist,
    pub task: Task,
}

impl PromptRecord {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.target.len()
    }

    /// In-context `(x, y)` values of one embedding component.
    pub fn context_column(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.meta.n;
        (
            (0..n).map(|i| self.tokens[2 * i][c]).collect(),
            (0..n).map(|i| self.tokens[2 * i + 1][c]).collect(),
        )
    }

    pub fn token_tensor(&self) -> Tensor {
        let e = self.embed_dim();
        let data = self.tokens.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![self.tokens.len(), e], data).expect("rows have width E")
    }

    /// Recomputes the target from the latent quantities.
    pub fn oracle_target(&self) -> Result<Vec<f64>> {
        match self.task {
            Task::Counterfactual => {
                let z = self.meta.z.ok_or_else(|| Error::Contract("counterfactual prompt without anchor".into()))?;
                cf_target(&self.kind, &self.meta.beta, &self.tokens[2 * (z - 1)], &self.tokens[2 * z - 1], &self.meta.x_cf)
            }
            Task::Continuation => {
                let u = self
                    .meta
                    .fresh_u
                    .as_ref()
                    .ok_or_else(|| Error::Contract("continuation prompt without fresh noise".into()))?;
                continuation_target(self, u)
            }
        }
    }
}

fn cf_target(kind: &NoiseModelKind, beta: &[f64], x: &[f64], y: &[f64], x_cf: &[f64]) -> Result<Vec<f64>> {
    let f_cf: Vec<f64> = beta.iter().zip(x_cf).map(|(&b, &v)| kind.mechanism(b, v)).collect();
    let f_x: Vec<f64> = beta.iter().zip(x).map(|(&b, &v)| kind.mechanism(b, v)).collect();
    counterfactual(kind, &f_cf, &f_x, y)
}

/// Outcome of a fresh draw at `x_cf`: `T(f(x_cf), fresh_noise)`.
pub fn continuation_target(record: &PromptRecord, fresh_noise: &[f64]) -> Result<Vec<f64>> {
    let beta = &record.meta.beta;
    if fresh_noise.len() != beta.len() {
        return Err(Error::dim(
            "continuation_target",
            format!("noise {} vs E {}", fresh_noise.len(), beta.len()),
        ));
    }
    let (_, y) = apply_link(&record.kind, beta, &record.meta.x_cf, fresh_noise)?;
    Ok(y)
}

/// Per-record overrides used when a batch must share `n` or `z`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub n: Option<usize>,
    pub z: Option<usize>,
}

/// Config plus its (optional) latent pool, ready to emit records.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GenConfig,
    pool: Option<(ThetaPool, WeightedIndex<f64>)>,
}

impl Generator {
    pub fn new(cfg: GenConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = match cfg.diversity {
            Some(_) => {
                let pool = make_pool(&cfg)?;
                let index = WeightedIndex::new(&pool.weights)
                    .map_err(|e| Error::Config(format!("pool weights: {}", e)))?;
                Some((pool, index))
            }
            None => None,
        };
        Ok(Generator { cfg, pool })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn pool(&self) -> Option<&ThetaPool> {
        self.pool.as_ref().map(|p| &p.0)
    }

    /// Number of in-context examples for a shared-length batch.
    pub fn draw_n(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.cfg.n_min..=self.cfg.n_max)
    }

    pub fn sample(&self, index: u64) -> Result<PromptRecord> {
        self.sample_with(index, Overrides::default())
    }

    pub fn sample_with(&self, index: u64, ov: Overrides) -> Result<PromptRecord> {
        let cfg = &self.cfg;
        let e = cfg.embed_dim;
        let seed = cfg.seed;

        let n = match ov.n {
            Some(n) => n,
            None => self.draw_n(&mut stream(seed, index, Field::Count)),
        };
        if n == 0 {
            return Err(Error::Config("a prompt needs at least one example".into()));
        }

        let mut rng = stream(seed, index, Field::Theta);
        let theta: Vec<f64> = match &self.pool {
            Some((pool, idx)) => {
                let mut pick = stream(seed, index, Field::PoolPick);
                (0..e).map(|_| pool.values[idx.sample(&mut pick)]).collect()
            }
            None => (0..e).map(|_| cfg.theta_dist.draw(&mut rng)).collect(),
        };
        let around = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            theta.iter().map(|&t| t + rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let beta = around(&mut stream(seed, index, Field::Beta));
        let mut rx = stream(seed, index, Field::NoiseX);
        let mut ry = stream(seed, index, Field::NoiseY);
        let u_x: Vec<Vec<f64>> = (0..n).map(|_| around(&mut rx)).collect();
        let u_y: Vec<Vec<f64>> = (0..n).map(|_| around(&mut ry)).collect();
        let mut rc = stream(seed, index, Field::CounterfactualX);
        let unif = Uniform::new_inclusive(-SUPPORT, SUPPORT).expect("valid bounds");
        let x_cf: Vec<f64> = (0..e).map(|_| unif.sample(&mut rc)).collect();

        let mut tokens = Vec::with_capacity(cfg.seq_len(n));
        for i in 0..n {
            let (x, y) = apply_link(&cfg.kind, &beta, &u_x[i], &u_y[i])?;
            tokens.push(x);
            tokens.push(y);
        }

        let (z, fresh_u, target) = match cfg.task {
            Task::Counterfactual => {
                let z = match ov.z.or(cfg.fixed_z) {
                    Some(z) if z == 0 || z > n => {
                        return Err(Error::Config(format!("anchor z={} but only {} examples", z, n)))
                    }
                    Some(z) => z,
                    None => stream(seed, index, Field::Anchor).random_range(1..=n),
                };
                let target = cf_target(&cfg.kind, &beta, &tokens[2 * (z - 1)], &tokens[2 * z - 1], &x_cf)?;
                tokens.push(vec![z as f64; e]);
                (Some(z), None, target)
            }
            Task::Continuation => {
                let fresh = around(&mut stream(seed, index, Field::FreshNoise));
                let (_, y) = apply_link(&cfg.kind, &beta, &x_cf, &fresh)?;
                (None, Some(fresh), y)
            }
        };
        tokens.push(x_cf.clone());

        Ok(PromptRecord {
            tokens,
            target,
            meta: PromptMeta {
                theta,
                beta,
                u_x,
                u_y,
                x_cf,
                z,
                n,
                fresh_u,
            },
            kind: cfg.kind,
            theta_dist: cfg.theta_dist,
            task: cfg.task,
        })
    }
}

/// Record `index` of the corpus defined by `cfg`.
pub fn sample_sequence(cfg: &GenConfig, index: u64) -> Result<PromptRecord> {
    Generator::new(cfg.clone())?.sample(index)
}

/// Header line of every JSON-Lines artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader<C> {
    pub format: String,
    pub version: u32,
    pub config: C,
    pub count: usize,
}

/// Writes a header line followed by one JSON document per record.
pub fn write_jsonl<C: Serialize, R: Serialize>(path: &Path, format: &str, config: &C, records: &[R]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = FileHeader {
        format: format.to_string(),
        version: FORMAT_VERSION,
        config,
        count: records.len(),
    };
    let header = serde_json::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(w, "{}", header).map_err(|e| Error::io(path, e))?;
    for r in records {
        let s = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{}", s).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_jsonl`], checking format tag and count.
pub fn read_jsonl<C: DeserializeOwned, R: DeserializeOwned>(path: &Path, format: &str) -> Result<(C, Vec<R>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let header: FileHeader<C> =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {}", e)))?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("expected {} v{}, found {} v{}", format, FORMAT_VERSION, header.format, header.version),
        ));
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("record {}: {}", i, e)))?;
        records.push(r);
    }
    if records.len() != header.count {
        return Err(Error::format(
            path,
            format!("header promises {} records, found {}", header.count, records.len()),
        ));
    }
    Ok((header.config, records))
}

/// Generates `count` records and writes them as a dataset file.
pub fn write_dataset(cfg: &GenConfig, count: usize, path: &Path) -> Result<Vec<PromptRecord>> {
    let gen = Generator::new(cfg.clone())?;
    let records = (0..count as u64).map(|i| gen.sample(i)).collect::<Result<Vec<_>>>()?;
    write_jsonl(path, DATASET_FORMAT, cfg, &records)?;
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<(GenConfig, Vec<PromptRecord>)> {
    read_jsonl(path, DATASET_FORMAT)
}
