//! Quick numerical checks runnable from a release binary.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::autodiff::{grad_check, Binary, Tape, Tensor, Unary, Var};
use crate::error::Result;
use crate::models::{build_forward, init_model, ModelConfig, RnnConfig, RnnKind, TransformerConfig};
use crate::rng::{stream, Field};
use crate::scm::{abduct_noise, counterfactual, NoiseModelKind, NoiseTag};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub worst: f64,
    pub seconds: f64,
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, 0, Field::Misc);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Weighted sum so that gradients differ per element.
fn weighted(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.leaf(random(t.shape(y), seed));
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Case = (&'static str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);

fn primitive_cases() -> Vec<Case> {
    let b = random(&[4, 3], 1);
    let other = random(&[2, 3, 4], 2);
    let gain = random(&[5], 3);
    let bias = random(&[5], 4);
    let row_bias = random(&[4], 5);
    let partner = random(&[3, 4], 6);
    let mut cases: Vec<Case> = vec![
        ("matmul", random(&[3, 4], 10), Box::new(move |t, x| {
            let bv = t.leaf(b.clone());
            let y = t.matmul(x, bv)?;
            weighted(t, y, 11)
        })),
        ("batch_matmul", random(&[2, 5, 3], 12), {
            let o = other.clone();
            Box::new(move |t, x| {
                let ov = t.leaf(o.clone());
                let y = t.batch_matmul(x, ov, false)?;
                weighted(t, y, 13)
            })
        }),
        ("batch_matmul_transposed", random(&[2, 5, 4], 14), Box::new(move |t, x| {
            let ov = t.leaf(other.clone());
            let y = t.batch_matmul(ov, x, true)?;
            weighted(t, y, 15)
        })),
        ("softmax_causal", random(&[2, 4, 4], 16), Box::new(|t, x| {
            let y = t.softmax_causal(x)?;
            weighted(t, y, 17)
        })),
        ("layer_norm", random(&[3, 5], 18), Box::new(move |t, x| {
            let g = t.leaf(gain.clone());
            let b = t.leaf(bias.clone());
            let y = t.layer_norm(x, g, b)?;
            weighted(t, y, 19)
        })),
        ("add_bias", random(&[3, 4], 20), Box::new(move |t, x| {
            let b = t.leaf(row_bias.clone());
            let y = t.add_bias(x, b)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 21)
        })),
        ("affine", random(&[3, 4], 22), Box::new(|t, x| {
            let y = t.affine(x, -1.7, 0.3)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 23)
        })),
        ("scale", random(&[3, 4], 24), Box::new(|t, x| {
            let y = t.scale(x, 2.5)?;
            let y = t.mul(y, x)?;
            weighted(t, y, 25)
        })),
        ("split_merge_heads", random(&[6, 4], 26), Box::new(|t, x| {
            let s = t.split_heads(x, 2, 3, 2)?;
            let s = t.unary(Unary::Tanh, s)?;
            let m = t.merge_heads(s, 2, 3, 2)?;
            weighted(t, m, 27)
        })),
        ("gather_rows", random(&[5, 3], 28), Box::new(|t, x| {
            let g = t.gather_rows(x, &[4, 0, 4, 2])?;
            let g = t.mul(g, g)?;
            weighted(t, g, 29)
        })),
        ("stack_time", random(&[2, 3], 30), Box::new(|t, x| {
            let y = t.unary(Unary::Sigmoid, x)?;
            let s = t.stack_time(&[x, y, x])?;
            weighted(t, s, 31)
        })),
        ("sum", random(&[3, 4], 32), Box::new(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        })),
    ];
    for (name, op) in [("add", Binary::Add), ("sub", Binary::Sub), ("mul", Binary::Mul)] {
        let p = partner.clone();
        cases.push((name, random(&[3, 4], 40), Box::new(move |t, x| {
            let pv = t.leaf(p.clone());
            let y = t.binary(op, x, pv)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 41)
        })));
    }
    for (name, op) in [("gelu", Unary::Gelu), ("tanh", Unary::Tanh), ("sigmoid", Unary::Sigmoid)] {
        cases.push((name, random(&[3, 4], 50), Box::new(move |t, x| {
            let y = t.unary(op, x)?;
            weighted(t, y, 51)
        })));
    }
    cases
}

/// Largest relative error over all parameter tensors of `cfg`. Tensors whose
/// analytic gradient vanishes identically (attention key bias) are checked
/// for exact zeros instead.
pub fn model_grad_error(cfg: &ModelConfig, seq: usize) -> Result<f64> {
    let state = init_model(cfg, 9)?;
    let x = random(&[seq, cfg.embed_dim()], 60);
    let mut worst = 0.0f64;
    for (i, p) in state.params.iter().enumerate() {
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let params: Vec<Var> = state
                .params
                .iter()
                .enumerate()
                .map(|(j, q)| if j == i { v } else { tape.leaf(q.clone()) })
                .collect();
            let input = tape.leaf(x.clone());
            let g = build_forward(tape, &state.config, &params, input, 1, seq, None)?;
            let sq = tape.mul(g.output, g.output)?;
            tape.sum(sq)
        };
        if state.names[i].ends_with("attn.b_k") {
            let mut tape = Tape::new();
            let v = tape.leaf(p.clone());
            let loss = f(&mut tape, v)?;
            let g = tape.backward(loss)?.wrt(v);
            let m = g.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
            worst = worst.max(if m < 1e-10 { 0.0 } else { 1.0 });
            continue;
        }
        worst = worst.max(grad_check(f, p, 1e-5)?);
    }
    Ok(worst)
}

fn timed(name: impl Into<String>, tol: f64, f: impl FnOnce() -> Result<f64>) -> Result<Check> {
    let t0 = Instant::now();
    let worst = f()?;
    Ok(Check {
        name: name.into(),
        passed: worst < tol,
        worst,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Finite-difference checks of every primitive and of small full models.
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, point, f) in primitive_cases() {
        out.push(timed(format!("grad/{}", name), GRAD_TOLERANCE, || grad_check(f, &point, 1e-5))?);
    }
    let tf = ModelConfig::Transformer(TransformerConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        embed_dim: 1,
        max_len: 8,
        init_std: 0.3,
        ..TransformerConfig::default()
    });
    out.push(timed("grad/transformer_l2_d8", GRAD_TOLERANCE, || model_grad_error(&tf, 6))?);
    for kind in [RnnKind::Elman, RnnKind::Lstm, RnnKind::Gru] {
        let cfg = ModelConfig::Rnn(RnnConfig {
            kind,
            layers: 2,
            hidden: 4,
            embed_dim: 1,
        });
        out.push(timed(format!("grad/{:?}", kind).to_lowercase(), GRAD_TOLERANCE, || model_grad_error(&cfg, 5))?);
    }
    Ok(out)
}

pub const ALL_TAGS: [NoiseTag; 6] = [
    NoiseTag::LinearAdditive,
    NoiseTag::Anm,
    NoiseTag::Multiplicative,
    NoiseTag::Exponential,
    NoiseTag::TanhLink,
    NoiseTag::SigmoidLink,
];

/// Round trip `T(f, T^-1(f, y)) = y` and factual-intervention consistency
/// on `instances` draws from the data law, per mechanism; the
/// multiplicative kind also checks `y_cf = (x_cf / x) y`.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (k, tag) in ALL_TAGS.into_iter().enumerate() {
        let kind = NoiseModelKind::new(tag);
        out.push(timed(format!("oracle/{:?}", tag).to_lowercase(), ORACLE_TOLERANCE, || {
            let mut rng = stream(seed, k as u64, Field::Misc);
            let unif = Uniform::new(-6.0, 6.0).expect("valid range");
            let mut worst = 0.0f64;
            let mut done = 0;
            while done < instances {
                let theta: f64 = unif.sample(&mut rng);
                let near = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
                    let e: f64 = StandardNormal.sample(rng);
                    theta + e
                };
                let (beta, x, u) = (near(&mut rng), near(&mut rng), near(&mut rng));
                let x_cf = unif.sample(&mut rng);
                let f = kind.mechanism(beta, x);
                if tag == NoiseTag::Multiplicative && f.abs() <= 1e-3 {
                    continue;
                }
                done += 1;
                let y = kind.transform(f, u);
                let scale = y.abs().max(1.0);
                let u_hat = abduct_noise(&kind, &[f], &[y])?[0];
                worst = worst.max((kind.transform(f, u_hat) - y).abs() / scale);
                let same = counterfactual(&kind, &[f], &[f], &[y])?[0];
                worst = worst.max((same - y).abs() / scale);
                if tag == NoiseTag::Multiplicative {
                    let y_cf = counterfactual(&kind, &[kind.mechanism(beta, x_cf)], &[f], &[y])?[0];
                    let want = x_cf / x * y;
                    worst = worst.max((y_cf - want).abs() / want.abs().max(1.0));
                }
            }
            Ok(worst)
        })?);
    }
    Ok(out)
}
