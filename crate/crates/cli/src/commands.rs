use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dgmn::data::{batch, generate_synthetic, kfold, load_csv, save_csv, split, Dataset, SyntheticSpec};
use dgmn::lcg::export_graph as write_graph;
use dgmn::model::{load_checkpoint, load_checkpoint_expecting, model_grad_check, save_checkpoint, EpochReport};
use dgmn::{Dgmn64, DgmnConfig, Error, Variant};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{resolve, ModelFlags, RunConfig, RunOptions};
use crate::CliError;

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Like `load_csv`, but file-system errors name the path.
fn load(path: &Path) -> Result<Dataset, CliError> {
    load_csv(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())).into(),
        other => other.into(),
    })
}

fn truth_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".truth.json");
    PathBuf::from(name)
}

pub fn gen(
    students: usize,
    questions: usize,
    concepts: usize,
    seq_len: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let spec = SyntheticSpec::new(students, questions, concepts, seq_len, seed);
    let (data, truth) = generate_synthetic(&spec).map_err(|e| match e {
        Error::Data(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    save_csv(&data, out)?;
    let truth_out = truth_path(out);
    std::fs::write(&truth_out, serde_json::to_string_pretty(&truth).map_err(Error::from)?)?;
    println!("students={}", data.len());
    println!("interactions={}", data.num_interactions());
    println!("data={}", out.display());
    println!("truth={}", truth_out.display());
    Ok(())
}

fn train_defaults() -> RunConfig {
    RunConfig {
        model: DgmnConfig::default(),
        run: RunOptions::default(),
    }
}

/// Number of questions both data sets need.
fn questions_needed(sets: &[&Dataset]) -> usize {
    sets.iter()
        .map(|d| d.num_questions.max(d.max_question_id().map_or(0, |q| q + 1)))
        .max()
        .unwrap_or(0)
}

struct Outcome {
    valid_auc: Option<f64>,
}

fn train_one(
    config: &DgmnConfig,
    train: &Dataset,
    valid: &Dataset,
    dir: &Path,
    clusters: usize,
    resume: Option<&Path>,
) -> Result<Outcome, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut model = match resume {
        Some(path) => load_checkpoint_expecting::<f64>(path, config)?,
        None => Dgmn64::new(config.clone())?,
    };
    log::info!(
        "training {} ({} parameters) on {} sequences, validating on {}",
        config.variant,
        model.num_parameters(),
        train.len(),
        valid.len()
    );
    let report_path = dir.join("report.jsonl");
    let mut report = BufWriter::new(File::create(&report_path)?);
    let mut last: Option<EpochReport> = None;
    let fitted = model.fit(train, Some(valid), config.epochs, |r| {
        serde_json::to_writer(&mut report, r)?;
        writeln!(report)?;
        report.flush()?;
        println!(
            "epoch={} loss={} train_auc={} valid_auc={}",
            r.epoch,
            r.loss,
            show(r.train_auc),
            show(r.valid_auc)
        );
        last = Some(r.clone());
        Ok(())
    });
    if let Err(e) = fitted {
        if let Error::Divergence { epoch, batch, detail } = &e {
            let diag = dir.join("divergence.json");
            let body = json!({
                "error": e.to_string(),
                "epoch": epoch,
                "batch": batch,
                "detail": detail,
                "last_report": last,
            });
            std::fs::write(&diag, serde_json::to_string_pretty(&body).map_err(Error::from)?)?;
            println!("diagnostic={}", diag.display());
        }
        return Err(e.into());
    }
    let checkpoint = dir.join("checkpoint.json");
    save_checkpoint(&model, &checkpoint)?;
    let export = write_graph(
        &model.graph,
        &model.memory.concept_keys,
        dir.join("graph"),
        clusters,
        config.seed,
    )?;
    println!("report={}", report_path.display());
    println!("checkpoint={}", checkpoint.display());
    println!("checkpoint_sha256={}", sha256_file(&checkpoint)?);
    println!("graph={}", export.json_path.display());
    let valid_auc = match &last {
        Some(r) => r.valid_auc,
        None => model.evaluate(valid)?.auc().ok(),
    };
    Ok(Outcome { valid_auc })
}

pub fn train(
    config_file: Option<&Path>,
    flags: &ModelFlags,
    run_flags: Map<String, Value>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = resolve(train_defaults(), config_file, flags, run_flags)?;
    let data_path = cfg
        .run
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = cfg
        .run
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let data = load(&data_path)?;
    let valid = cfg.run.valid.as_deref().map(load).transpose()?;

    let needed = questions_needed(&[Some(&data), valid.as_ref()].into_iter().flatten().collect::<Vec<_>>());
    if cfg.model.num_questions == 0 {
        cfg.model.num_questions = needed;
    } else if cfg.model.num_questions < needed {
        return Err(Error::Data(format!(
            "data uses {needed} questions but num_questions is {}",
            cfg.model.num_questions
        ))
        .into());
    }
    cfg.model.validate()?;
    std::fs::create_dir_all(&out)?;
    let echo = out.join("config.json");
    std::fs::write(
        &echo,
        serde_json::to_string_pretty(&Value::Object(cfg.to_flat())).map_err(Error::from)?,
    )?;
    println!("config={}", echo.display());

    if cfg.run.folds > 0 {
        if valid.is_some() || resume.is_some() {
            return Err(CliError::Usage("--folds cannot be combined with --valid or --resume".into()));
        }
        let mut aucs = Vec::new();
        for (i, (train, held_out)) in kfold(&data, cfg.run.folds, cfg.model.seed)?.iter().enumerate() {
            let outcome = train_one(&cfg.model, train, held_out, &out.join(format!("fold{i}")), cfg.run.clusters, None)?;
            println!("fold={i} valid_auc={}", show(outcome.valid_auc));
            aucs.push(outcome.valid_auc);
        }
        let defined: Vec<f64> = aucs.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let summary = out.join("summary.json");
        std::fs::write(
            &summary,
            serde_json::to_string_pretty(&json!({ "fold_auc": aucs, "mean_auc": mean })).map_err(Error::from)?,
        )?;
        println!("folds={}", aucs.len());
        println!("mean_auc={}", show(mean));
        println!("summary={}", summary.display());
        return Ok(());
    }

    let (train, valid) = match valid {
        Some(v) => (data, v),
        None => split(&data, cfg.run.train_fraction, cfg.model.seed)?,
    };
    let outcome = train_one(&cfg.model, &train, &valid, &out, cfg.run.clusters, resume)?;
    println!("valid_auc={}", show(outcome.valid_auc));
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    config_file: Option<&Path>,
    out: Option<&Path>,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let model: Dgmn64 = match config_file {
        Some(file) => {
            let mut expected = resolve(train_defaults(), Some(file), &ModelFlags::default(), Map::new())?.model;
            if expected.num_questions == 0 {
                expected.num_questions = load_checkpoint::<f64>(checkpoint)?.config().num_questions;
            }
            load_checkpoint_expecting(checkpoint, &expected)?
        }
        None => load_checkpoint(checkpoint)?,
    };
    let data = load(data)?;
    let evaluation = model.evaluate(&data)?;
    if let Some(path) = dump {
        evaluation.write_csv(path)?;
        println!("predictions={}", path.display());
    }
    let auc = evaluation.auc()?;
    println!("steps={}", evaluation.predictions.len());
    println!("auc={auc}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let body = json!({ "auc": auc, "steps": evaluation.predictions.len() });
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&body).map_err(Error::from)?)?;
    }
    Ok(())
}

pub fn export_graph(checkpoint: &Path, out: &Path, clusters: usize) -> Result<(), CliError> {
    if clusters == 0 {
        return Err(CliError::Usage("--clusters must be at least 1".into()));
    }
    let model: Dgmn64 = load_checkpoint(checkpoint)?;
    let export = write_graph(
        &model.graph,
        &model.memory.concept_keys,
        out,
        clusters,
        model.config().seed,
    )?;
    println!("nodes={}", export.graph.nodes.len());
    println!("edges={}", export.graph.edges.len());
    println!("json={}", export.json_path.display());
    println!("dot={}", export.dot_path.display());
    Ok(())
}

fn tiny_defaults() -> RunConfig {
    RunConfig {
        model: DgmnConfig {
            concepts: 4,
            key_dim: 6,
            value_dim: 8,
            num_questions: 10,
            batch_size: 2,
            max_seq_len: 5,
            ..Default::default()
        },
        run: RunOptions::default(),
    }
}

pub fn gradcheck(
    config_file: Option<&Path>,
    eps: f64,
    tolerance: f64,
    variants: &[Variant],
    inject_fault: bool,
) -> Result<(), CliError> {
    let base = resolve(tiny_defaults(), config_file, &ModelFlags::default(), Map::new())?.model;
    let variants = if variants.is_empty() {
        &[Variant::Full, Variant::NoForget, Variant::NoGraph, Variant::Basic][..]
    } else {
        variants
    };
    if inject_fault {
        dgmn::autodiff::inject_tanh_backward_fault(true);
    }
    let spec = SyntheticSpec::new(
        base.batch_size,
        base.num_questions,
        base.num_questions.min(3),
        base.max_seq_len,
        base.seed,
    );
    let (data, _) = generate_synthetic(&spec)?;
    let mb = batch(&data, base.batch_size, base.max_seq_len, base.seed)?.remove(0);
    println!("eps={eps}");
    let mut worst_overall = 0.0f64;
    let mut failures = Vec::new();
    for &variant in variants {
        let model = Dgmn64::new(DgmnConfig {
            variant,
            ..base.clone()
        })?;
        let report = model_grad_check(&model, &mb, eps)?;
        println!(
            "variant={variant} entries={} max_rel_error={:e} worst={}[{}]",
            report.entries, report.max_error, report.worst.0, report.worst.1
        );
        worst_overall = worst_overall.max(report.max_error);
        if !report.passes(tolerance) {
            let mut bad: Vec<_> = report.per_param.iter().filter(|(_, e)| *e >= tolerance).collect();
            bad.sort_by(|a, b| b.1.total_cmp(&a.1));
            let listed: Vec<String> = bad.iter().take(5).map(|(n, e)| format!("{n} ({e:.2e})")).collect();
            failures.push(format!("{variant}: {}", listed.join(", ")));
        }
    }
    println!("max_rel_error={worst_overall:e}");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradientMismatch(format!(
            "tolerance {tolerance:e} exceeded; {}",
            failures.join("; ")
        )))
    }
}
