//! Run configuration: TOML file, then `--set` / flag overrides.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use iccr_core::analysis::{EvalOn, ProbeStream, ProbeTarget};
use iccr_core::{GenConfig, ModelConfig, SdeConfig, ThetaDist, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// `a..b` (inclusive) or a comma list.
    pub lengths: String,
    pub seqs: usize,
    /// Prompts scored at each training eval.
    pub cadence_seqs: usize,
    /// Loss below which training counts as having emerged.
    pub phase_threshold: Option<f64>,
    pub phase_window: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            lengths: "2..50".into(),
            seqs: 6400,
            cadence_seqs: 256,
            phase_threshold: None,
            phase_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub target: ProbeTarget,
    pub stream: ProbeStream,
    pub train_n: usize,
    pub eval_n: usize,
    /// Examples per probing prompt; defaults to the longest that fits.
    pub examples: Option<usize>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            target: ProbeTarget::Theta,
            stream: ProbeStream::Hidden,
            train_n: 6400,
            eval_n: 1280,
            examples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnSettings {
    /// Anchors to sweep; empty picks four spread over the prompt.
    pub z_values: Vec<usize>,
    pub examples: usize,
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for AttnSettings {
    fn default() -> Self {
        AttnSettings {
            z_values: Vec::new(),
            examples: 50,
            batches: 4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversitySettings {
    pub pools: Vec<usize>,
    pub train_dists: Vec<ThetaDist>,
    pub eval_on: Vec<EvalOn>,
    pub lengths: String,
    pub seqs: usize,
}

impl Default for DiversitySettings {
    fn default() -> Self {
        DiversitySettings {
            pools: vec![1, 4, 16, 64],
            train_dists: vec![ThetaDist::Uniform, ThetaDist::Normal],
            eval_on: vec![
                EvalOn::Fresh(ThetaDist::Uniform),
                EvalOn::Fresh(ThetaDist::Normal),
                EvalOn::TrainingPool,
            ],
            lengths: "10,20,30,40,50".into(),
            seqs: 640,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section that does not set its own seed.
    pub seed: u64,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sde: SdeConfig,
    pub eval: EvalSettings,
    pub probe: ProbeSettings,
    pub attn: AttnSettings,
    pub diversity: DiversitySettings,
}

/// One flag that replaced (or added) a config value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverrideRecord {
    pub key: String,
    pub value: serde_json::Value,
    /// What the file said, if it set this key.
    pub file_value: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub overrides: Vec<OverrideRecord>,
    /// Dotted keys set by the file or by flags.
    pub explicit: BTreeSet<String>,
}

impl Resolved {
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {}", raw)) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').with_context(|| format!("expected KEY=VALUE, got `{}`", s))?;
    if k.is_empty() {
        bail!("empty key in `{}`", s);
    }
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

fn get<'a>(root: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = root.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("`{}` is not a table", p))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn collect_keys(prefix: &str, t: &toml::Table, out: &mut BTreeSet<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
        if let toml::Value::Table(inner) = v {
            collect_keys(&key, inner, out);
        }
        out.insert(key);
    }
}

fn to_json(v: &toml::Value) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Reads `path` (if any), applies `overrides` in order, fills derived
/// values and validates every section.
pub fn load_config(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Resolved> {
    let mut root: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    let mut explicit = BTreeSet::new();
    collect_keys("", &root, &mut explicit);

    let mut records = Vec::new();
    for (key, value) in overrides {
        records.push(OverrideRecord {
            key: key.clone(),
            value: to_json(value),
            file_value: get(&root, key).map(to_json),
        });
        set(&mut root, key, value.clone())?;
        let mut prefix = String::new();
        for part in key.split('.') {
            if !prefix.is_empty() {
                prefix.push('.');
            }
            prefix.push_str(part);
            explicit.insert(prefix.clone());
        }
    }

    if let Some(seed) = root.get("seed").cloned() {
        for section in ["data", "train", "sde"] {
            let key = format!("{}.seed", section);
            if !explicit.contains(&key) {
                set(&mut root, &key, seed.clone())?;
            }
        }
    }
    if !explicit.contains("model.embed_dim") {
        if let Some(e) = get(&root, "data.embed_dim").cloned() {
            set(&mut root, "model.embed_dim", e)?;
        }
    }

    // The model table is tagged; untagged tables mean a transformer.
    if let Some(toml::Value::Table(m)) = root.get_mut("model") {
        m.entry("type").or_insert_with(|| toml::Value::String("transformer".into()));
    }
    let config: RunConfig = toml::Value::Table(root).try_into().context("invalid configuration")?;
    config.data.validate()?;
    config.model.validate()?;
    config.train.validate()?;
    config.sde.validate()?;
    parse_lengths(&config.eval.lengths)?;
    parse_lengths(&config.diversity.lengths)?;
    Ok(Resolved {
        config,
        overrides: records,
        explicit,
    })
}

/// `"2..50"` (inclusive) or `"5,15,35"`.
pub fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().with_context(|| format!("bad range start in `{}`", s))?;
        let b: usize = b.trim().trim_start_matches('=').parse().with_context(|| format!("bad range end in `{}`", s))?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad length `{}`", p)))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.windows(2).any(|w| w[0] >= w[1]) || out[0] == 0 {
        bail!("lengths `{}` must be positive and strictly increasing", s);
    }
    Ok(out)
}
