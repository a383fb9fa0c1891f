//! Subcommand bodies. Each writes into the run directory it is handed.

use anyhow::{bail, Context, Result};
use iccr_core::analysis::{
    detect_abduction_heads, diversity_csv, diversity_sweep, eval_curve, ols_baseline_curve, pooled_error, probe_layers,
    sde_completion_curve, DiversityPlan, MetadataOracle, ProbeOptions, ZeroPredictor,
};
use iccr_core::datagen::{write_dataset, DATASET_FORMAT, FORMAT_VERSION};
use iccr_core::sde::{
    counterfactual_path, params_within_bounds, sample_pair, telescoping_residual, write_sde_dataset, SDE_FORMAT,
};
use iccr_core::selftest::{gradient_suite, oracle_suite};
use iccr_core::training::{
    detect_phase_transition, load_checkpoint, save_checkpoint, LossMask, CHECKPOINT_VERSION,
};
use iccr_core::{Checkpoint, GenConfig, LossTrace, ModelConfig, ModelState, RegressionSource, SdeSource, TrainConfig, Trainer};
use serde::Serialize;

use crate::config::{parse_lengths, Resolved};
use crate::run_dir::RunDir;
use crate::{Baseline, Command, DataTask, TrainTask};

pub const CHECKPOINT_FORMAT: &str = "iccr-checkpoint";

pub fn dispatch(cmd: &Command, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    match cmd {
        Command::GenData { task, count } => gen_data(*task, *count, res, dir),
        Command::Train { task, resume, .. } => train(*task, resume.as_deref(), res, dir),
        Command::Eval {
            checkpoint,
            baseline,
            task,
            ..
        } => eval(checkpoint.as_deref(), *baseline, *task, res, dir),
        Command::Probe { checkpoint } => probe(&load_model(checkpoint)?, res, dir),
        Command::Attn { checkpoint } => attn(&load_model(checkpoint)?, res, dir),
        Command::SdeSim { count } => sde_sim(*count, res, dir),
        Command::Diversity => diversity(res, dir),
        Command::Report => report(dir),
        Command::Selftest { instances } => selftest(*instances, res, dir),
    }
}

fn load_model(path: &std::path::Path) -> Result<ModelState> {
    Ok(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.model)
}

/// The configured model, with width and context filled from the data
/// unless the config pins them.
pub fn model_for(res: &Resolved, embed_dim: usize, max_seq: usize) -> ModelConfig {
    let mut m = res.config.model.clone();
    match &mut m {
        ModelConfig::Transformer(c) => {
            if !res.is_explicit("model.embed_dim") {
                c.embed_dim = embed_dim;
            }
            if !res.is_explicit("model.max_len") {
                c.max_len = max_seq;
            }
        }
        ModelConfig::Rnn(c) => {
            if !res.is_explicit("model.embed_dim") {
                c.embed_dim = embed_dim;
            }
        }
    }
    m
}

/// Training settings, with SDE defaults where the config is silent.
pub fn train_config_for(res: &Resolved, task: TrainTask) -> TrainConfig {
    let mut t = res.config.train.clone();
    if task == TrainTask::Sde {
        let d = TrainConfig::sde();
        if !res.is_explicit("train.batch") {
            t.batch = d.batch;
        }
        if !res.is_explicit("train.loss_mask") {
            t.loss_mask = LossMask::CompletionMask;
        }
    }
    t
}

fn gen_data(task: DataTask, count: usize, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    match task {
        DataTask::Sde => {
            write_sde_dataset(&res.config.sde, count, &dir.join("dataset/sde.jsonl"))?;
            dir.record("dataset/sde.jsonl", SDE_FORMAT, FORMAT_VERSION)?;
        }
        _ => {
            write_dataset(&res.config.data, count, &dir.join("dataset/prompts.jsonl"))?;
            dir.record("dataset/prompts.jsonl", DATASET_FORMAT, FORMAT_VERSION)?;
        }
    }
    Ok(())
}

fn trace_csv(trace: &LossTrace) -> String {
    let timed = trace.step_seconds.len() == trace.steps.len() && !trace.steps.is_empty();
    let mut s = String::from(if timed { "step,train_mse,seconds\n" } else { "step,train_mse\n" });
    for (i, (step, loss)) in trace.steps.iter().zip(&trace.train_mse).enumerate() {
        if timed {
            s.push_str(&format!("{},{},{}\n", step, loss, trace.step_seconds[i]));
        } else {
            s.push_str(&format!("{},{}\n", step, loss));
        }
    }
    s
}

fn evals_csv(trace: &LossTrace) -> String {
    let mut s = String::from("step,eval_mse\n");
    for (step, mse) in &trace.evals {
        s.push_str(&format!("{},{}\n", step, mse));
    }
    s
}

#[derive(Serialize)]
struct Phase {
    threshold: f64,
    window: usize,
    /// First step of the window after which the loss stays low.
    step: Option<u64>,
}

fn write_traces(trace: &LossTrace, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    dir.write_text("metrics/trace.csv", "loss-trace", &trace_csv(trace))?;
    dir.write_text("metrics/evals.csv", "eval-trace", &evals_csv(trace))?;
    let window = res.config.eval.phase_window.max(1);
    // Without an explicit threshold: half the mean loss of the first window.
    let head = &trace.train_mse[..window.min(trace.train_mse.len())];
    let threshold = res
        .config
        .eval
        .phase_threshold
        .unwrap_or_else(|| if head.is_empty() { 0.0 } else { 0.5 * head.iter().sum::<f64>() / head.len() as f64 });
    let step = detect_phase_transition(&trace.steps, &trace.train_mse, threshold, window)?;
    dir.write_json("metrics/phase.json", "phase", &Phase { threshold, window, step })?;
    Ok(())
}

/// Lengths used for the periodic in-training evaluation.
fn cadence_lengths(gen: &GenConfig) -> Vec<usize> {
    let lo = gen.n_min.max(gen.fixed_z.unwrap_or(1));
    let mut v = vec![lo, (lo + gen.n_max) / 2, gen.n_max];
    v.dedup();
    v
}

fn train(task: TrainTask, resume: Option<&std::path::Path>, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    let cfg = train_config_for(res, task);
    let steps = cfg.steps;
    let seqs = res.config.eval.cadence_seqs;
    let gen = res.config.data.clone();
    let sde_cfg = res.config.sde.clone();

    let regression;
    let sde;
    let (source, model_cfg): (&dyn iccr_core::training::BatchSource, ModelConfig) = match task {
        TrainTask::Regression => {
            regression = RegressionSource::new(gen.clone(), cfg.batch_constant_z)?;
            (&regression, model_for(res, gen.embed_dim, gen.seq_len(gen.n_max)))
        }
        TrainTask::Sde => {
            sde = SdeSource::new(sde_cfg.clone())?;
            (&sde, model_for(res, sde_cfg.embed_dim, sde_cfg.seq_len()))
        }
    };
    let mut trainer = match resume {
        Some(p) => Trainer::resume(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?, cfg, source)?,
        None => Trainer::new(&model_cfg, cfg, source)?,
    };

    let lengths = cadence_lengths(&gen);
    let mut on_eval = |m: &ModelState| -> iccr_core::Result<f64> {
        match task {
            TrainTask::Regression => Ok(pooled_error(m, &gen, &lengths, seqs)?.0),
            TrainTask::Sde => Ok(sde_completion_curve(m, &sde_cfg, seqs)?.overall.0),
        }
    };
    let mut saved: Vec<String> = Vec::new();
    let ckpt_dir = dir.join("checkpoints");
    let mut on_ckpt = |ck: &Checkpoint| -> iccr_core::Result<()> {
        let rel = if ck.step == steps {
            "checkpoints/final.ckpt".to_string()
        } else {
            format!("checkpoints/step-{:08}.ckpt", ck.step)
        };
        save_checkpoint(ck, &ckpt_dir.join(rel.trim_start_matches("checkpoints/")))?;
        saved.push(rel);
        Ok(())
    };
    let outcome = trainer.run(Some(&mut on_eval), Some(&mut on_ckpt));
    for rel in &saved {
        dir.record(rel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    }
    // Keep whatever trace exists, diverged or not.
    write_traces(trainer.trace(), res, dir)?;
    outcome?;
    Ok(())
}

fn eval(
    checkpoint: Option<&std::path::Path>,
    baseline: Option<Baseline>,
    task: TrainTask,
    res: &Resolved,
    dir: &mut RunDir,
) -> Result<()> {
    let seqs = res.config.eval.seqs;
    if task == TrainTask::Sde {
        let Some(p) = checkpoint else {
            bail!("SDE evaluation needs --checkpoint");
        };
        let curve = sde_completion_curve(&load_model(p)?, &res.config.sde, seqs)?;
        dir.write_text("metrics/sde_eval.csv", "sde-curve", &curve.to_csv())?;
        dir.write_json("metrics/sde_eval.json", "sde-curve", &curve)?;
        return Ok(());
    }
    let lengths = parse_lengths(&res.config.eval.lengths)?;
    let gen = &res.config.data;
    let curve = match (checkpoint, baseline) {
        (Some(p), _) => eval_curve(&load_model(p)?, gen, &lengths, seqs)?,
        (None, Some(Baseline::Zero)) => eval_curve(&ZeroPredictor, gen, &lengths, seqs)?,
        (None, Some(Baseline::Oracle)) => eval_curve(&MetadataOracle, gen, &lengths, seqs)?,
        (None, Some(Baseline::Ols)) => ols_baseline_curve(gen, &lengths, seqs)?,
        (None, None) => bail!("pass --checkpoint or --baseline"),
    };
    dir.write_text("metrics/eval.csv", "eval-curve", &curve.to_csv())?;
    dir.write_json("metrics/eval.json", "eval-curve", &curve)?;
    Ok(())
}

/// Largest example count whose prompt fits the model and the data range.
fn fitting_examples(model: &ModelState, gen: &GenConfig, want: usize) -> usize {
    let mut n = want.min(gen.n_max);
    if let Some(max) = model.config.max_len() {
        while n > 1 && gen.seq_len(n) > max {
            n -= 1;
        }
    }
    n
}

fn probe(model: &ModelState, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    let s = &res.config.probe;
    let gen = &res.config.data;
    let examples = s.examples.unwrap_or_else(|| fitting_examples(model, gen, gen.n_max));
    let result = probe_layers(
        model,
        gen,
        ProbeOptions {
            target: s.target,
            stream: s.stream,
            train_n: s.train_n,
            eval_n: s.eval_n,
            examples,
        },
    )?;
    dir.write_text("metrics/probe.csv", "probe", &result.to_csv())?;
    dir.write_json("metrics/probe.json", "probe", &result)?;
    Ok(())
}

fn attn(model: &ModelState, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    let s = &res.config.attn;
    let n = fitting_examples(model, &res.config.data, s.examples);
    let z_values = if s.z_values.is_empty() {
        let mut z = vec![1, (n / 4).max(1), (n / 2).max(1), n];
        z.dedup();
        z
    } else {
        s.z_values.clone()
    };
    let summary = detect_abduction_heads(model, &res.config.data, &z_values, n, s.batches, s.batch_size)?;
    let mut csv = String::from("layer,head,score,qualifies\n");
    for h in &summary.heads {
        csv.push_str(&format!("{},{},{},{}\n", h.layer, h.head, h.score, h.qualifies));
    }
    dir.write_text("metrics/attn.csv", "attn", &csv)?;
    dir.write_json("metrics/attn.json", "attn", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct SdeChecks {
    pairs: usize,
    max_telescoping_residual: f64,
    params_within_bounds: bool,
    identical_intervention_bitwise: bool,
}

fn sde_sim(count: usize, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    let cfg = &res.config.sde;
    write_sde_dataset(cfg, count, &dir.join("dataset/sde.jsonl"))?;
    dir.record("dataset/sde.jsonl", SDE_FORMAT, FORMAT_VERSION)?;
    let mut checks = SdeChecks {
        pairs: count,
        max_telescoping_residual: 0.0,
        params_within_bounds: true,
        identical_intervention_bitwise: true,
    };
    for i in 0..count as u64 {
        let pair = sample_pair(cfg, i)?;
        checks.max_telescoping_residual = checks.max_telescoping_residual.max(telescoping_residual(&pair));
        for c in 0..pair.params.len() {
            checks.params_within_bounds &= params_within_bounds(&pair.params[c], pair.init[c], cfg);
            let (dw_x, dw_y) = &pair.increments[c];
            let (f, same) = counterfactual_path(&pair.params[c], pair.init[c], pair.init[c], cfg, dw_x, dw_y)?;
            checks.identical_intervention_bitwise &= f == same && f == pair.factual[c];
        }
    }
    dir.write_json("metrics/sde_checks.json", "sde-checks", &checks)?;
    Ok(())
}

fn diversity(res: &Resolved, dir: &mut RunDir) -> Result<()> {
    let s = &res.config.diversity;
    let gen = &res.config.data;
    let plan = DiversityPlan {
        pool_sizes: s.pools.clone(),
        train_dists: s.train_dists.clone(),
        eval_on: s.eval_on.clone(),
        lengths: parse_lengths(&s.lengths)?,
        seqs_per_length: s.seqs,
    };
    let model = model_for(res, gen.embed_dim, gen.seq_len(gen.n_max));
    let rows = diversity_sweep(&plan, gen, &model, &res.config.train)?;
    dir.write_text("metrics/diversity.csv", "diversity", &diversity_csv(&rows))?;
    dir.write_json("metrics/diversity.json", "diversity", &rows)?;
    Ok(())
}

#[derive(Serialize)]
pub struct ReportEntry {
    pub figure: &'static str,
    pub shows: &'static str,
    pub commands: &'static [&'static str],
}

pub const REPORT: &[ReportEntry] = &[
    ReportEntry {
        figure: "fig2",
        shows: "error against prompt length across architectures",
        commands: &[
            "iccr train --set model.type=transformer",
            "iccr train --set model.type=rnn --set model.kind=lstm",
            "iccr eval --checkpoint <run>/checkpoints/final.ckpt --lengths 2..50",
            "iccr eval --baseline ols --lengths 2..50",
        ],
    },
    ReportEntry {
        figure: "fig3",
        shows: "component ablation and depth sweep",
        commands: &[
            "iccr train --set model.variant=mlp_only",
            "iccr train --set model.variant=attention_only",
            "iccr train --set model.layers=2 --set model.heads=4",
            "iccr eval --checkpoint <run>/checkpoints/final.ckpt",
        ],
    },
    ReportEntry {
        figure: "fig4",
        shows: "data diversity and the loss phase transition",
        commands: &["iccr diversity", "iccr train --set data.diversity=64  (metrics/phase.json)"],
    },
    ReportEntry {
        figure: "fig5",
        shows: "linear probes of the latent per layer",
        commands: &["iccr probe --checkpoint <run>/checkpoints/final.ckpt"],
    },
    ReportEntry {
        figure: "fig7",
        shows: "attention from the anchor token",
        commands: &["iccr attn --checkpoint <run>/checkpoints/final.ckpt"],
    },
    ReportEntry {
        figure: "fig8",
        shows: "counterfactual SDE completion",
        commands: &[
            "iccr sde-sim --count 1000",
            "iccr train --task sde",
            "iccr eval --task sde --checkpoint <run>/checkpoints/final.ckpt",
        ],
    },
];

fn report(dir: &mut RunDir) -> Result<()> {
    let mut md = String::from("| figure | shows | commands |\n|---|---|---|\n");
    for e in REPORT {
        md.push_str(&format!("| {} | {} | `{}` |\n", e.figure, e.shows, e.commands.join("`; `")));
    }
    print!("{}", md);
    dir.write_text("metrics/report.md", "report", &md)?;
    dir.write_json("metrics/report.json", "report", &REPORT)?;
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    name: String,
    passed: bool,
    worst: f64,
}

fn selftest(instances: usize, res: &Resolved, dir: &mut RunDir) -> Result<()> {
    let mut rows = Vec::new();
    for c in gradient_suite()?.into_iter().chain(oracle_suite(instances, res.config.seed)?) {
        println!("{} {} worst={:.3e} ({:.2}s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.worst, c.seconds);
        rows.push(CheckRow {
            name: c.name,
            passed: c.passed,
            worst: c.worst,
        });
    }
    dir.write_json("metrics/selftest.json", "selftest", &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("failed checks: {}", failed.join(", "));
    }
    Ok(())
}
