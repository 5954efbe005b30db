//! Acoustic word embedding network: convolutional front-end and stacked GRU
//! encoder, a free-running GRU phone decoder, and a tanh semantic regressor.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Batch, Corpus, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_DIM};
use crate::losses::{self, LossBreakdown, LossMode};
use crate::nn::checkpoint::{read_archive, write_archive};
use crate::nn::graph::unfold_rows;
use crate::nn::{Conv1d, Graph, GruCell, GruStack, Linear, Mat, NodeId, ParamId, ParamStore, RngState};

const CHECKPOINT_FORMAT: &str = "awe-model";
const SCALER_SCALE: &str = "semantic_scaler.scale";
const SCALER_OFFSET: &str = "semantic_scaler.offset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub gru_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub decoder_layers: usize,
    pub semantic_dim: usize,
    /// Number of phones, excluding EOS.
    pub phone_inventory_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: FEATURE_DIM,
            conv_filters: 64,
            kernel: 5,
            stride: 2,
            gru_layers: 3,
            hidden: 512,
            dropout: 0.2,
            decoder_layers: 1,
            semantic_dim: 300,
            phone_inventory_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 || self.conv_filters == 0 || self.kernel == 0 || self.stride == 0 {
            return bad("front-end sizes must be positive");
        }
        if self.gru_layers == 0 || self.hidden == 0 {
            return bad("encoder needs at least one layer of positive width");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.decoder_layers != 1 {
            return bad("only a single-layer decoder is supported");
        }
        if self.semantic_dim == 0 {
            return bad("semantic_dim must be positive");
        }
        if self.phone_inventory_size == 0 {
            return bad("phone_inventory_size must be positive");
        }
        Ok(())
    }

    /// Decoder output classes: phones plus EOS.
    pub fn output_size(&self) -> usize {
        self.phone_inventory_size + 1
    }

    /// Scalar parameter count implied by the architecture.
    pub fn parameter_count(&self) -> usize {
        let (h, v) = (self.hidden, self.output_size());
        let conv = self.feature_dim * self.kernel * self.conv_filters + self.conv_filters;
        let encoder: usize = (0..self.gru_layers)
            .map(|l| GruCell::param_count(if l == 0 { self.conv_filters } else { h }, h))
            .sum();
        let decoder = GruCell::param_count(h, h) + v * h + h + h * v + v;
        let regressor = h * self.semantic_dim + self.semantic_dim;
        conv + encoder + decoder + regressor
    }
}

/// Fixed-dimensional embedding of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AweVector(pub Array1<f64>);

impl AweVector {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per-dimension affine map taking training-vocabulary targets into
/// `[-0.9, 0.9]`. Constant dimensions map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScaler {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

pub const TARGET_BOUND: f64 = 0.9;

impl TargetScaler {
    pub fn fit<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for v in vectors {
            if lo.is_empty() {
                lo = v.to_vec();
                hi = v.to_vec();
                continue;
            }
            if v.len() != lo.len() {
                return Err(Error::Shape(format!("semantic dims {} vs {}", v.len(), lo.len())));
            }
            for (i, &x) in v.iter().enumerate() {
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
        }
        if lo.is_empty() {
            return Err(Error::EmptySplit("no semantic targets to fit".into()));
        }
        let mut scale = Vec::with_capacity(lo.len());
        let mut offset = Vec::with_capacity(lo.len());
        for (l, h) in lo.into_iter().zip(hi) {
            if h > l {
                let a = 2.0 * TARGET_BOUND / (h - l);
                scale.push(a);
                offset.push(-TARGET_BOUND - a * l);
            } else {
                scale.push(0.0);
                offset.push(0.0);
            }
        }
        Ok(TargetScaler { scale, offset })
    }

    /// Fits on the vectors of word types that occur in the training split.
    pub fn fit_corpus(corpus: &Corpus) -> Result<Self> {
        let mut words: Vec<&str> = corpus
            .split_indices(Split::Train)
            .into_iter()
            .map(|i| corpus.records()[i].word.as_str())
            .collect();
        words.sort_unstable();
        words.dedup();
        TargetScaler::fit(words.into_iter().map(|w| corpus.semantic().get(w).expect("loaded words have vectors")))
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, targets: &Mat) -> Result<Mat> {
        if targets.ncols() != self.dim() {
            return Err(Error::Shape(format!("scaler has {} dims, targets {}", self.dim(), targets.ncols())));
        }
        let mut out = targets.clone();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.scale[j] * *x + self.offset[j];
            }
        }
        Ok(out)
    }
}

/// Weights and switches for one training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Objective {
    pub fn new(mode: LossMode, alpha: f64, beta: f64, margin: f64) -> Result<Self> {
        let obj = Objective { mode, alpha, beta, margin };
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.margin >= 0.0) {
            return Err(Error::Config("loss weights and margin must be non-negative".into()));
        }
        if self.mode != LossMode::Contrastive {
            let (a, b) = self.weights();
            if a == 0.0 && b == 0.0 {
                return Err(Error::Config(format!("{} has zero total loss weight", self.mode)));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> (f64, f64) {
        self.mode.weights(self.alpha, self.beta)
    }
}

#[derive(Debug, Clone)]
pub struct AweModel {
    config: ModelConfig,
    phones: Vec<String>,
    params: ParamStore,
    conv: Conv1d,
    encoder: GruStack,
    decoder: GruCell,
    phone_embedding: ParamId,
    start: ParamId,
    output: Linear,
    regressor: Linear,
    scaler: Option<TargetScaler>,
}

impl AweModel {
    /// Fresh model; `phones` are the inventory symbols in index order.
    pub fn new(config: ModelConfig, phones: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if phones.len() != config.phone_inventory_size {
            return Err(Error::Config(format!(
                "{} phone symbols for inventory size {}",
                phones.len(),
                config.phone_inventory_size
            )));
        }
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let v = config.output_size();
        let conv = Conv1d::new(&mut store, "conv", config.feature_dim, config.conv_filters, config.kernel, config.stride, &mut rng);
        let encoder = GruStack::new(&mut store, "encoder", config.conv_filters, h, config.gru_layers, config.dropout, &mut rng);
        let decoder = GruCell::new(&mut store, "decoder.gru", h, h, &mut rng);
        let phone_embedding = store.add_uniform("decoder.embedding", v, h, h, &mut rng);
        let start = store.add_uniform("decoder.start", 1, h, h, &mut rng);
        let output = Linear::new(&mut store, "decoder.output", h, v, &mut rng);
        let regressor = Linear::new(&mut store, "regressor", h, config.semantic_dim, &mut rng);
        Ok(AweModel {
            config,
            phones,
            params: store,
            conv,
            encoder,
            decoder,
            phone_embedding,
            start,
            output,
            regressor,
            scaler: None,
        })
    }

    /// Model sized for `corpus`, with the target scaler fitted on its
    /// training vocabulary.
    pub fn for_corpus(mut config: ModelConfig, corpus: &Corpus, seed: u64) -> Result<Self> {
        let inv = corpus.lexicon().inventory();
        config.phone_inventory_size = inv.len();
        config.semantic_dim = corpus.semantic().dim();
        let mut model = AweModel::new(config, inv.phones().to_vec(), seed)?;
        model.scaler = Some(TargetScaler::fit_corpus(corpus)?);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scaler(&self) -> Option<&TargetScaler> {
        self.scaler.as_ref()
    }

    pub fn set_scaler(&mut self, scaler: Option<TargetScaler>) {
        self.scaler = scaler;
    }

    pub fn eos(&self) -> usize {
        self.config.phone_inventory_size
    }

    /// Ids of the decoder and regressor parameters, for inspection.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix("decoder.")
    }

    pub fn regressor_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix("regressor.")
    }

    fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, t)| t.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Checks that a corpus uses the phone inventory and semantic space this
    /// model was built for.
    pub fn check_compatible(&self, corpus: &Corpus) -> Result<()> {
        let inv = corpus.lexicon().inventory();
        if inv.phones() != self.phones.as_slice() {
            return Err(Error::Checkpoint(format!(
                "phone inventory mismatch: model has {} phones, corpus {}",
                self.phones.len(),
                inv.len()
            )));
        }
        if corpus.semantic().dim() != self.config.semantic_dim {
            return Err(Error::Checkpoint(format!(
                "semantic dimension mismatch: model {}, corpus {}",
                self.config.semantic_dim,
                corpus.semantic().dim()
            )));
        }
        Ok(())
    }

    /// Encodes a padded batch into `B×D` embeddings. Rows past their own
    /// length are masked so each row matches its unbatched encoding.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        features: &ndarray::Array3<f64>,
        lengths: &[usize],
        dropout_rng: Option<&mut RngState>,
    ) -> Result<NodeId> {
        let (b, t_max, c) = features.dim();
        if c != self.config.feature_dim || lengths.len() != b || b == 0 {
            return Err(Error::Shape(format!(
                "batch {:?} with {} lengths for feature dim {}",
                features.dim(),
                lengths.len(),
                self.config.feature_dim
            )));
        }
        let out_lens = lengths
            .iter()
            .map(|&t| self.conv.output_len(t))
            .collect::<Result<Vec<_>>>()?;
        let steps = self.conv.output_len(t_max)?;
        let width = self.config.kernel * c;
        let mut windows = Mat::zeros((steps * b, width));
        for row in 0..b {
            let seg = features.index_axis(ndarray::Axis(0), row).to_owned();
            let w = unfold_rows(&seg, self.config.kernel, self.config.stride)?;
            for t in 0..steps {
                windows.row_mut(t * b + row).assign(&w.row(t));
            }
        }
        let win = g.input(windows);
        let conv = self.conv.apply_windows(g, win);
        let inputs: Vec<NodeId> = (0..steps).map(|t| g.slice_rows(conv, t * b, b)).collect();
        let active: Vec<Vec<bool>> = (0..steps)
            .map(|t| out_lens.iter().map(|&n| t < n).collect())
            .collect();
        self.encoder.run(g, &inputs, &active, dropout_rng)
    }

    /// Free-running decoder: `steps` logit nodes (`B×(V+1)`), each step fed
    /// the embedding of the previous step's argmax.
    pub fn decode_steps(&self, g: &mut Graph, embeddings: NodeId, steps: usize) -> Result<Vec<NodeId>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one step".into()));
        }
        let b = g.value(embeddings).nrows();
        let start = g.param(self.start);
        let table = g.param(self.phone_embedding);
        let mut input = g.gather_rows(start, vec![0; b]);
        let mut h = embeddings;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            h = self.decoder.step(g, input, h);
            let logits = self.output.forward(g, h);
            out.push(logits);
            if t + 1 < steps {
                let picks = argmax_rows(g.value(logits));
                input = g.gather_rows(table, picks);
            }
        }
        Ok(out)
    }

    pub fn regress_node(&self, g: &mut Graph, embeddings: NodeId) -> NodeId {
        let lin = self.regressor.forward(g, embeddings);
        g.tanh(lin)
    }

    /// Training objective on one batch. Branches with zero weight are not
    /// built, so their parameters receive exactly zero gradient.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &Batch,
        objective: &Objective,
        dropout_rng: Option<&mut RngState>,
    ) -> Result<(NodeId, LossBreakdown)> {
        let x = self.encode_batch(g, &batch.features, &batch.feature_lengths, dropout_rng)?;
        let mut breakdown = LossBreakdown { segments: batch.len(), ..Default::default() };
        let mut terms: Vec<NodeId> = Vec::new();
        if objective.mode == LossMode::Contrastive {
            match losses::triplet_node(g, x, &batch.word_ids, objective.margin)? {
                Some((node, anchors)) => {
                    breakdown.triplet = g.scalar(node);
                    breakdown.anchors = anchors;
                    terms.push(node);
                }
                None => {
                    let zero = g.input(Mat::zeros((1, 1)));
                    terms.push(zero);
                }
            }
        } else {
            let (alpha, beta) = objective.weights();
            if alpha > 0.0 {
                let phi = self.phonological_rows(g, x, batch)?;
                let phi = g.mean(phi);
                breakdown.phi = g.scalar(phi);
                terms.push(g.scale(phi, alpha));
            }
            if beta > 0.0 {
                let lambda = self.semantic_rows(g, x, batch)?;
                let lambda = g.mean(lambda);
                breakdown.lambda = g.scalar(lambda);
                terms.push(g.scale(lambda, beta));
            }
        }
        let total = terms.into_iter().reduce(|a, b| g.add(a, b)).expect("at least one term");
        breakdown.total = g.scalar(total);
        Ok((total, breakdown))
    }

    fn phonological_rows(&self, g: &mut Graph, x: NodeId, batch: &Batch) -> Result<NodeId> {
        let steps = batch.phone_lengths.iter().copied().max().unwrap_or(0);
        let logits = self.decode_steps(g, x, steps)?;
        let targets: Vec<Vec<usize>> = (0..batch.len())
            .map(|b| batch.phone_targets.row(b).iter().take(batch.phone_lengths[b]).copied().collect())
            .collect();
        losses::phonological_rows(g, &logits, &targets)
    }

    fn semantic_rows(&self, g: &mut Graph, x: NodeId, batch: &Batch) -> Result<NodeId> {
        let targets = match &self.scaler {
            Some(s) => s.apply(&batch.semantic_targets)?,
            None => batch.semantic_targets.clone(),
        };
        let v = self.regress_node(g, x);
        losses::semantic_rows(g, v, &targets)
    }

    /// Per-segment `(φ, λ)` in evaluation mode.
    pub fn segment_losses(&self, batch: &Batch) -> Result<Vec<(f64, f64)>> {
        let mut g = Graph::new(&self.params);
        let x = self.encode_batch(&mut g, &batch.features, &batch.feature_lengths, None)?;
        let phi = self.phonological_rows(&mut g, x, batch)?;
        let lambda = self.semantic_rows(&mut g, x, batch)?;
        let (p, l) = (g.value(phi), g.value(lambda));
        Ok((0..batch.len()).map(|i| (p[[i, 0]], l[[i, 0]])).collect())
    }

    pub fn encode(&self, features: &FeatureMatrix) -> Result<AweVector> {
        let a = features.as_array();
        let batch = a.clone().insert_axis(ndarray::Axis(0));
        let mut g = Graph::new(&self.params);
        let x = self.encode_batch(&mut g, &batch, &[a.nrows()], None)?;
        Ok(AweVector(g.value(x).row(0).to_owned()))
    }

    /// Eval-mode embeddings of a padded batch.
    pub fn embed_batch(&self, batch: &Batch) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let x = self.encode_batch(&mut g, &batch.features, &batch.feature_lengths, None)?;
        Ok(g.value(x).clone())
    }

    /// Embeds corpus records in order, `chunk` at a time.
    pub fn embed_records(&self, corpus: &Corpus, indices: &[usize], chunk: usize) -> Result<Mat> {
        let mut out = Mat::zeros((indices.len(), self.config.hidden));
        for (c, idx) in indices.chunks(chunk.max(1)).enumerate() {
            let e = self.embed_batch(&corpus.collate(idx))?;
            let start = c * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + idx.len(), ..]).assign(&e);
        }
        Ok(out)
    }

    /// Greedy decode from one embedding; stops after EOS or `max_len` steps.
    pub fn decode_phones(&self, x: &AweVector, max_len: usize) -> Result<Vec<Array1<f64>>> {
        if max_len < 1 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        self.check_embedding(x)?;
        let mut g = Graph::new(&self.params);
        let xn = g.input(x.0.clone().insert_axis(ndarray::Axis(0)));
        let start = g.param(self.start);
        let table = g.param(self.phone_embedding);
        let mut input = start;
        let mut h = xn;
        let mut out = Vec::new();
        for _ in 0..max_len {
            h = self.decoder.step(&mut g, input, h);
            let logits = self.output.forward(&mut g, h);
            let row = g.value(logits).row(0).to_owned();
            let pick = argmax_rows(g.value(logits))[0];
            out.push(row);
            if pick == self.eos() {
                break;
            }
            input = g.gather_rows(table, vec![pick]);
        }
        Ok(out)
    }

    /// Greedy phone symbols, without the EOS.
    pub fn transcribe(&self, x: &AweVector, max_len: usize) -> Result<Vec<String>> {
        Ok(self
            .decode_phones(x, max_len)?
            .iter()
            .map(|l| argmax(l.as_slice().unwrap()))
            .take_while(|&p| p != self.eos())
            .map(|p| self.phones[p].clone())
            .collect())
    }

    pub fn regress_semantic(&self, x: &AweVector) -> Result<Array1<f64>> {
        self.check_embedding(x)?;
        let mut g = Graph::new(&self.params);
        let xn = g.input(x.0.clone().insert_axis(ndarray::Axis(0)));
        let v = self.regress_node(&mut g, xn);
        Ok(g.value(v).row(0).to_owned())
    }

    fn check_embedding(&self, x: &AweVector) -> Result<()> {
        if x.dim() != self.config.hidden {
            return Err(Error::Shape(format!("embedding dim {} for hidden {}", x.dim(), self.config.hidden)));
        }
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(())
    }

    /// Writes weights, architecture, phone inventory and target scaling.
    /// `meta` is stored verbatim in the header.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = json!({
            "format": CHECKPOINT_FORMAT,
            "model": self.config,
            "phones": self.phones,
            "meta": meta,
        });
        let mut scaler_mats = Vec::new();
        if let Some(s) = &self.scaler {
            scaler_mats.push((SCALER_SCALE, Mat::from_shape_vec((1, s.dim()), s.scale.clone()).unwrap()));
            scaler_mats.push((SCALER_OFFSET, Mat::from_shape_vec((1, s.dim()), s.offset.clone()).unwrap()));
        }
        let mut tensors: Vec<(&str, &Mat)> = self.params.iter().map(|(_, t)| (t.name.as_str(), &t.value)).collect();
        tensors.extend(scaler_mats.iter().map(|(n, m)| (*n, m)));
        write_archive(path, &header, &tensors)
    }

    /// Restores a model and the header's `meta` value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let archive = read_archive(path)?;
        let header = &archive.header;
        if header.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(header["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let phones: Vec<String> = serde_json::from_value(header["phones"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad phone list: {e}")))?;
        let meta = header.get("meta").cloned().unwrap_or(serde_json::Value::Null);
        let mut model = AweModel::new(config, phones, 0)?;
        let (scaler, weights): (Vec<_>, Vec<_>) = archive
            .tensors
            .into_iter()
            .partition(|(n, _)| n == SCALER_SCALE || n == SCALER_OFFSET);
        model.params.load_named(weights)?;
        let get = |name: &str| scaler.iter().find(|(n, _)| n == name).map(|(_, m)| m.iter().copied().collect::<Vec<_>>());
        model.scaler = match (get(SCALER_SCALE), get(SCALER_OFFSET)) {
            (Some(scale), Some(offset)) if scale.len() == offset.len() => Some(TargetScaler { scale, offset }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete semantic scaler".into())),
        };
        Ok((model, meta))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

/// Convenience for tests and tools: a `T×C` matrix as a one-row batch.
pub fn single_batch(features: &Array2<f64>) -> ndarray::Array3<f64> {
    features.clone().insert_axis(ndarray::Axis(0))
}
