use std::fs;
use std::path::{Path, PathBuf};

use awe_core::corpus::{load_corpus_dir, Split};
use awe_core::evaluation::{embed_split, export_embeddings, map_report};
use awe_core::model::AweModel;
use awe_core::nn::{Fault, GradCheckConfig};
use awe_core::synthgen::generate_corpus;
use awe_core::training::{check_gradients, train, BEST_CHECKPOINT, EPOCH_CSV};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, CliError, Command};

const GRAD_TOLERANCE: f64 = 1e-4;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (mut cfg, has_model) = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.check_grad.seed = seed;
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    match cli.command {
        Command::Synth { out, force } => {
            let out = out
                .or(cli.run_dir)
                .ok_or_else(|| CliError::Usage("synth needs --out or --run-dir".into()))?;
            synth(&cfg, &out, force)
        }
        Command::Train { corpus, loss_mode, epochs, force } => {
            if let Some(m) = loss_mode {
                cfg.train.loss_mode = m.parse().map_err(CliError::config)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let run_dir = cli.run_dir.ok_or_else(|| CliError::Usage("train needs --run-dir".into()))?;
            train_cmd(cfg, &corpus, &run_dir, force)
        }
        Command::Eval { checkpoint, corpus, split, export } => {
            if let Some(s) = split {
                cfg.eval.split = s.parse().map_err(CliError::config)?;
            }
            eval_cmd(&cfg, has_model, &checkpoint, &corpus, export.as_deref(), cli.run_dir.as_deref())
        }
        Command::CheckGrad { eps, samples, inject_fault } => {
            if let Some(e) = eps {
                cfg.check_grad.eps = e;
            }
            if let Some(s) = samples {
                cfg.check_grad.samples = s;
            }
            let fault = match inject_fault.as_deref() {
                None => Fault::None,
                Some("sigmoid-sign") => Fault::FlipSigmoidGrad,
                Some(other) => return Err(CliError::Usage(format!("unknown fault {other:?}"))),
            };
            check_grad(&cfg, fault)
        }
    }
}

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(awe_core::Error::Io { path: dir.to_path_buf(), source: e }))
}

fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.synth.validate().map_err(CliError::config)?;
    if is_non_empty(out) && !force {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    create_dir(out)?;
    let synth = generate_corpus(&cfg.synth)?;
    synth.write(out)?;
    cfg.write(out)?;
    let corpus = load_corpus_dir(out, &cfg.features)?;
    corpus.check_speaker_disjoint()?;
    println!("split\tsegments\ttypes\tspeakers\tduration_s\tttr");
    for split in Split::ALL {
        let s = corpus.split_stats(split)?;
        println!(
            "{}\t{}\t{}\t{}\t{:.3} ± {:.3}\t{:.4}",
            split, s.segments, s.types, s.speakers, s.duration_mean, s.duration_sd, s.ttr
        );
    }
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, corpus_dir: &Path, run_dir: &Path, force: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let existing = [BEST_CHECKPOINT, EPOCH_CSV].iter().any(|f| run_dir.join(f).exists());
    if existing && !force {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --force to overwrite",
            run_dir.display()
        )));
    }
    let corpus = load_corpus_dir(corpus_dir, &cfg.features)?;
    cfg.model.phone_inventory_size = corpus.lexicon().inventory().len();
    cfg.model.semantic_dim = corpus.semantic().dim();
    cfg.model.validate().map_err(CliError::config)?;
    create_dir(run_dir)?;
    cfg.write(run_dir)?;
    let outcome = train(&corpus, cfg.model.clone(), &cfg.train, Some(run_dir))?;
    let summary = json!({
        "loss_mode": cfg.train.loss_mode,
        "epochs": outcome.logs.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_map": outcome.best_val_map,
        "checkpoint": run_dir.join(BEST_CHECKPOINT),
    });
    println!("{summary}");
    Ok(())
}

fn eval_cmd(
    cfg: &RunConfig,
    has_model: bool,
    checkpoint: &Path,
    corpus_dir: &Path,
    export: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<(), CliError> {
    cfg.validate()?;
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let (model, _) = AweModel::load(checkpoint)?;
    if has_model {
        // inventory size and semantic dimension come from the corpus and
        // are checked against it below
        let mut expected = cfg.model.clone();
        expected.phone_inventory_size = model.config().phone_inventory_size;
        expected.semantic_dim = model.config().semantic_dim;
        if &expected != model.config() {
            return Err(CliError::Usage(format!(
                "architecture mismatch: config {:?} vs checkpoint {:?}",
                expected,
                model.config()
            )));
        }
    }
    let corpus = load_corpus_dir(corpus_dir, &cfg.features)?;
    model.check_compatible(&corpus)?;
    let set = embed_split(&model, &corpus, cfg.eval.split, cfg.eval.batch_size)?;
    let report = map_report(cfg.eval.split, &set)?;
    let text = serde_json::to_string(&report).map_err(awe_core::Error::from)?;
    println!("{text}");
    if let Some(dir) = run_dir {
        create_dir(dir)?;
        let path: PathBuf = dir.join(format!("map_{}.json", cfg.eval.split));
        fs::write(&path, format!("{text}\n")).map_err(|e| CliError::Core(awe_core::Error::Io { path, source: e }))?;
    }
    if let Some(path) = export {
        export_embeddings(&set, path)?;
    }
    Ok(())
}

fn check_grad(cfg: &RunConfig, fault: Fault) -> Result<(), CliError> {
    let g = &cfg.check_grad;
    if !(g.eps > 0.0 && g.eps.is_finite()) {
        return Err(CliError::Usage(format!("--eps must be positive, got {}", g.eps)));
    }
    if g.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let reports = check_gradients(&GradCheckConfig { eps: g.eps, samples: g.samples, seed: g.seed, fault })?;
    let mut failed = Vec::new();
    for (mode, r) in &reports {
        let status = if r.max_rel_error < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        let worst = r
            .worst()
            .map(|p| format!("{}[{},{}] analytic {:.6e} numeric {:.6e}", p.param, p.index.0, p.index.1, p.analytic, p.numeric))
            .unwrap_or_default();
        println!("{mode}\t{status}\tmax_rel_error {:.3e}\tprobes {}\t{worst}", r.max_rel_error, r.probes.len());
        if r.max_rel_error >= GRAD_TOLERANCE {
            failed.push(mode.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}
