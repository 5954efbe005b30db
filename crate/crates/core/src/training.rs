//! Optimization loop: Adam with global-norm clipping, learning-rate decay on
//! validation plateaus, best-epoch checkpoint selection and per-epoch logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{make_batches, Corpus, Split};
use crate::error::{Error, Result};
use crate::evaluation::{embed_split, same_different_map};
use crate::losses::{LossBreakdown, LossMode, DEFAULT_MARGIN};
use crate::model::{AweModel, ModelConfig, Objective};
use crate::nn::{finite_difference_check, GradCheckConfig, GradCheckReport, Gradients, Graph, Mat, ParamStore, RngState};
use crate::synthgen::{generate_corpus, SynthConfig};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_CSV: &str = "epochs.csv";
pub const CSV_HEADER: &str = "epoch,phi,lambda,triplet,total,val_map,lr,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Segments per forward pass when embedding the validation split.
    pub eval_batch_size: usize,
    /// Write 0 in the `seconds` column so logs compare bitwise.
    pub deterministic: bool,
    /// Also write `epoch_<n>.ckpt` after every epoch.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            lr_factor: 0.5,
            lr_patience: 10,
            min_lr: 1e-6,
            clip_norm: 5.0,
            seed: 0,
            loss_mode: LossMode::FormMeaning,
            margin: DEFAULT_MARGIN,
            alpha: 1.0,
            beta: 1.0,
            eval_batch_size: 64,
            deterministic: false,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor {} must lie in (0, 1)", self.lr_factor));
        }
        if self.lr_patience == 0 {
            return bad("lr_patience must be at least 1".into());
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr must lie in [0, lr]".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        self.objective().map(|_| ())
    }

    pub fn objective(&self) -> Result<Objective> {
        Objective::new(self.loss_mode, self.alpha, self.beta, self.margin)
    }
}

/// Bias-corrected Adam moments for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, t)| Mat::zeros(t.value.dim())).collect();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }
}

pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let k = id.index();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.dim() != g.dim() {
            return Err(Error::Shape(format!("gradient {:?} for moment {:?}", g.dim(), m.dim())));
        }
        let p = store.value_mut(id);
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Learning-rate decay on a stalled validation metric (higher is better).
///
/// The first observation, and the first after each decay, sets the
/// reference. Each later epoch that does not strictly beat the reference
/// counts against `patience`; when the count reaches it the rate is
/// multiplied by `factor` (not below `min_lr`) and the reference is
/// cleared.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler { lr, factor, patience, min_lr, best: None, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's metric and returns the rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                    self.stale = 0;
                    self.best = None;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after each epoch of `history`.
pub fn plateau_scheduler(history: &[f64], lr: f64, patience: usize, factor: f64, min_lr: f64) -> Vec<f64> {
    let mut s = PlateauScheduler::new(lr, factor, patience, min_lr);
    history.iter().map(|&m| s.observe(m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phi: f64,
    pub lambda: f64,
    pub triplet: f64,
    pub total: f64,
    pub val_map: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.phi, self.lambda, self.triplet, self.total, self.val_map, self.lr, self.seconds
        )
    }
}

pub fn write_epoch_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: n + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| err(format!("{}: {e}", f[i])));
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|e| err(format!("{}: {e}", f[0])))?,
            phi: num(1)?,
            lambda: num(2)?,
            triplet: num(3)?,
            total: num(4)?,
            val_map: num(5)?,
            lr: num(6)?,
            seconds: num(7)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: AweModel,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub logs: Vec<EpochLog>,
    pub best_path: Option<PathBuf>,
}

/// Trains a fresh model on `corpus`. With `run_dir`, writes `best.ckpt`
/// whenever validation mAP improves and rewrites `epochs.csv` each epoch.
pub fn train(corpus: &Corpus, model_cfg: ModelConfig, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let objective = cfg.objective()?;
    if corpus.split_indices(Split::Train).is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    if corpus.split_indices(Split::Valid).is_empty() {
        return Err(Error::EmptySplit(Split::Valid.to_string()));
    }
    let contrastive = cfg.loss_mode == LossMode::Contrastive;
    // fail before any work on corpora that cannot form triplets
    make_batches(corpus, Split::Train, cfg.batch_size, cfg.seed, contrastive)?;

    let mut model = AweModel::for_corpus(model_cfg, corpus, cfg.seed)?;
    let mut adam = AdamState::new(model.params());
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr);
    let mut logs: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, AweModel)> = None;
    let best_path = run_dir.map(|d| d.join(BEST_CHECKPOINT));
    log::info!(
        "training {} on {} segments, {} parameters",
        cfg.loss_mode,
        corpus.split_indices(Split::Train).len(),
        model.params().scalar_count()
    );

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let lr = sched.lr();
        let batch_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let batches = make_batches(corpus, Split::Train, cfg.batch_size, batch_seed, contrastive)?;
        let mut dropout_rng = RngState::derived(cfg.seed, epoch as u64);
        let mut sums = LossBreakdown::default();
        for (bi, idx) in batches.iter().enumerate() {
            let batch = corpus.collate(idx);
            let (grads, parts) = {
                let mut g = Graph::new(model.params());
                let (loss, parts) = model.batch_loss(&mut g, &batch, &objective, Some(&mut dropout_rng))?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {}: {parts:?}", bi + 1)));
                }
                let grads = g
                    .backward(loss)
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {}: {e}", bi + 1)))?;
                (grads, parts)
            };
            let mut grads = grads;
            grads.clip_global_norm(cfg.clip_norm);
            adam_step(model.params_mut(), &grads, &mut adam, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {}: {e}", bi + 1)))?;
            let w = parts.segments as f64;
            sums.phi += parts.phi * w;
            sums.lambda += parts.lambda * w;
            sums.total += parts.total * w;
            sums.triplet += parts.triplet * parts.anchors as f64;
            sums.segments += parts.segments;
            sums.anchors += parts.anchors;
        }
        let val = embed_split(&model, corpus, Split::Valid, cfg.eval_batch_size)?;
        let val_map = same_different_map(&val)?;
        sched.observe(val_map);
        let n = sums.segments.max(1) as f64;
        let entry = EpochLog {
            epoch,
            phi: sums.phi / n,
            lambda: sums.lambda / n,
            triplet: if sums.anchors > 0 { sums.triplet / sums.anchors as f64 } else { 0.0 },
            total: if contrastive && sums.anchors > 0 { sums.triplet / sums.anchors as f64 } else { sums.total / n },
            val_map,
            lr,
            seconds: if cfg.deterministic { 0.0 } else { clock.elapsed().as_secs_f64() },
        };
        log::info!(
            "epoch {epoch}: total {:.4} phi {:.4} lambda {:.4} triplet {:.4} val mAP {:.4} lr {}",
            entry.total,
            entry.phi,
            entry.lambda,
            entry.triplet,
            entry.val_map,
            entry.lr
        );
        logs.push(entry);

        let improved = best.as_ref().is_none_or(|(_, m, _)| val_map > *m);
        if improved {
            if let Some(p) = &best_path {
                model.save(p, checkpoint_meta(epoch, val_map, cfg))?;
            }
            best = Some((epoch, val_map, model.clone()));
        }
        if let (Some(dir), true) = (run_dir, cfg.keep_epoch_checkpoints) {
            model.save(&dir.join(format!("epoch_{epoch}.ckpt")), checkpoint_meta(epoch, val_map, cfg))?;
        }
        if let Some(dir) = run_dir {
            write_epoch_csv(&dir.join(EPOCH_CSV), &logs)?;
        }
    }
    let (best_epoch, best_val_map, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { best: best_model, best_epoch, best_val_map, logs, best_path })
}

fn checkpoint_meta(epoch: usize, val_map: f64, cfg: &TrainConfig) -> serde_json::Value {
    json!({ "epoch": epoch, "val_map": val_map, "train": cfg })
}

/// Finite-difference check of every loss mode on a tiny model (hidden 8,
/// 8-dim semantic space, 5 phones plus EOS, batch of 4).
pub fn check_gradients(cfg: &GradCheckConfig) -> Result<Vec<(LossMode, GradCheckReport)>> {
    let synth = SynthConfig {
        n_word_types: 4,
        n_phones: 5,
        phones_per_word: [2, 3],
        n_speakers: 4,
        speaker_split: [2, 1, 1],
        exemplars_per_speaker_per_word: 2,
        frames_per_phone: [2, 3],
        semantic_cluster_count: 2,
        semantic_dim: 8,
        seed: 0,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth)?.into_corpus(true)?;
    let model_cfg = ModelConfig {
        conv_filters: 8,
        gru_layers: 3,
        hidden: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = AweModel::for_corpus(model_cfg, &corpus, 0)?;
    // two exemplars each of two words, so every anchor has a positive
    let train = corpus.split_indices(Split::Train);
    let recs = corpus.records();
    let first = &recs[train[0]].word;
    let second = train.iter().map(|&i| &recs[i].word).find(|w| *w != first).expect("two words");
    let mut idx: Vec<usize> = train.iter().copied().filter(|&i| &recs[i].word == first).take(2).collect();
    idx.extend(train.iter().copied().filter(|&i| &recs[i].word == second).take(2));
    let batch = corpus.collate(&idx);
    let mut out = Vec::new();
    for mode in LossMode::ALL {
        let obj = Objective::new(mode, 1.0, 1.0, DEFAULT_MARGIN)?;
        let frozen = model.clone();
        let report = finite_difference_check(model.params_mut(), |g| Ok(frozen.batch_loss(g, &batch, &obj, None)?.0), cfg)?;
        out.push((mode, report));
    }
    Ok(out)
}
