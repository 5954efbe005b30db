//! Training objectives: phone-sequence cross-entropy, semantic regression,
//! their weighted sum, and the cosine triplet loss with in-batch hardest
//! negatives.
//!
//! Scalar reference implementations operate on plain slices; the `*_node`
//! variants record the same quantities onto a [`Graph`] for training. Batch
//! values are means over segments (or anchors), not sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mat, NodeId};

/// Guard added under the square root of the semantic distance so its
/// gradient stays defined at zero.
pub const SEMANTIC_SQRT_GUARD: f64 = 1e-12;

pub const DEFAULT_MARGIN: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FormOnly,
    MeaningOnly,
    FormMeaning,
    Contrastive,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::FormOnly,
        LossMode::MeaningOnly,
        LossMode::FormMeaning,
        LossMode::Contrastive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::FormOnly => "form_only",
            LossMode::MeaningOnly => "meaning_only",
            LossMode::FormMeaning => "form_meaning",
            LossMode::Contrastive => "contrastive",
        }
    }

    /// Effective `(α, β)`; the single-branch modes pin one weight to zero.
    pub fn weights(self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            LossMode::FormOnly => (alpha, 0.0),
            LossMode::MeaningOnly => (0.0, beta),
            LossMode::FormMeaning => (alpha, beta),
            LossMode::Contrastive => (0.0, 0.0),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss mode {s:?}")))
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub phi: f64,
    pub lambda: f64,
    pub triplet: f64,
    pub total: f64,
    pub segments: usize,
    pub anchors: usize,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// `−Σ_t log softmax(logits_t)[target_t]`, skipping `pad` positions.
pub fn phonological_loss(logits: &Mat, targets: &[usize], pad: usize) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if targets.iter().all(|&t| t == pad) {
        return Err(Error::InvalidArgument("target sequence is padding only".into()));
    }
    let mut loss = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t == pad {
            continue;
        }
        if t >= row.len() {
            return Err(Error::Shape(format!("target {t} outside {} classes", row.len())));
        }
        loss -= log_softmax_at(&row.to_vec(), t);
    }
    Ok(loss)
}

/// Euclidean (not squared) distance between prediction and target.
pub fn semantic_loss(v: &[f64], target: &[f64]) -> Result<f64> {
    if v.len() != target.len() {
        return Err(Error::Shape(format!("semantic dims {} vs {}", v.len(), target.len())));
    }
    Ok(v.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

pub fn joint_loss(phi: f64, lambda: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    if alpha == 0.0 && beta == 0.0 {
        return Err(Error::InvalidArgument("α = β = 0 leaves no learning signal".into()));
    }
    Ok(alpha * phi + beta * lambda)
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vector dims {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Hinge `max(0, m + d(a,p) − d(a,n))` on precomputed distances.
pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (margin + d_ap - d_an).max(0.0)
}

pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    Ok(triplet_hinge(
        cosine_distance(anchor, positive)?,
        cosine_distance(anchor, negative)?,
        margin,
    ))
}

/// For each anchor, the different-word row at minimal cosine distance; ties
/// go to the lowest index.
pub fn mine_hard_negatives(embeddings: &Mat, word_ids: &[usize]) -> Result<Vec<usize>> {
    let b = embeddings.nrows();
    if word_ids.len() != b {
        return Err(Error::Shape(format!("{b} embeddings for {} labels", word_ids.len())));
    }
    if word_ids.iter().all(|&w| w == word_ids[0]) {
        return Err(Error::SingleWordType);
    }
    let norms: Vec<f64> = embeddings.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroVector);
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let ri = embeddings.row(i);
        let mut best: Option<(f64, usize)> = None;
        for j in 0..b {
            if word_ids[j] == word_ids[i] {
                continue;
            }
            let d = 1.0 - ri.dot(&embeddings.row(j)) / (norms[i] * norms[j]);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        out.push(best.expect("at least two word types").1);
    }
    Ok(out)
}

/// For each row, the first other row with the same word, if any.
pub fn select_positives(word_ids: &[usize]) -> Vec<Option<usize>> {
    (0..word_ids.len())
        .map(|i| (0..word_ids.len()).find(|&j| j != i && word_ids[j] == word_ids[i]))
        .collect()
}

/// Per-row sequence cross-entropy (`B×1`) from per-step logits.
/// `targets[b]` holds the transcription plus EOS for row `b`; steps past a
/// row's target length are masked out.
pub fn phonological_rows(g: &mut Graph, step_logits: &[NodeId], targets: &[Vec<usize>]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (t, &logits) in step_logits.iter().enumerate() {
        let tgt: Vec<Option<usize>> = targets.iter().map(|seq| seq.get(t).copied()).collect();
        let step = g.softmax_cross_entropy(logits, tgt)?;
        total = Some(match total {
            Some(acc) => g.add(acc, step),
            None => step,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no decoder steps".into()))
}

/// Per-row guarded Euclidean distance (`B×1`) between predictions and
/// constant targets.
pub fn semantic_rows(g: &mut Graph, predictions: NodeId, targets: &Mat) -> Result<NodeId> {
    if g.value(predictions).dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "semantic predictions {:?} vs targets {:?}",
            g.value(predictions).dim(),
            targets.dim()
        )));
    }
    let t = g.input(targets.clone());
    let diff = g.sub(predictions, t);
    let sq = g.mul(diff, diff);
    let rs = g.sum_rows(sq);
    let rs = g.add_scalar(rs, SEMANTIC_SQRT_GUARD);
    Ok(g.sqrt(rs))
}

/// Mean triplet hinge over anchors that have an in-batch positive, with
/// hardest in-batch negatives mined on the current embedding values.
/// Returns `None` when no anchor qualifies or the batch has one word type.
pub fn triplet_node(
    g: &mut Graph,
    embeddings: NodeId,
    word_ids: &[usize],
    margin: f64,
) -> Result<Option<(NodeId, usize)>> {
    let negatives = match mine_hard_negatives(g.value(embeddings), word_ids) {
        Ok(n) => n,
        Err(Error::SingleWordType) => return Ok(None),
        Err(e) => return Err(e),
    };
    let positives = select_positives(word_ids);
    let anchors: Vec<usize> = (0..word_ids.len()).filter(|&i| positives[i].is_some()).collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    let pos: Vec<usize> = anchors.iter().map(|&i| positives[i].unwrap()).collect();
    let neg: Vec<usize> = anchors.iter().map(|&i| negatives[i]).collect();
    let a = g.gather_rows(embeddings, anchors.clone());
    let p = g.gather_rows(embeddings, pos);
    let n = g.gather_rows(embeddings, neg);
    let d_ap = g.cosine_distance_rows(a, p);
    let d_an = g.cosine_distance_rows(a, n);
    let gap = g.sub(d_ap, d_an);
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    Ok(Some((g.mean(hinge), anchors.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, RngState};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_length_times_log_v() {
        let logits = Mat::zeros((4, 20));
        let l = phonological_loss(&logits, &[3, 1, 7, 19], 99).unwrap();
        assert!((l - 4.0 * 20f64.ln()).abs() < 1e-12);
        assert!((l - 11.983).abs() < 1e-3);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let mut logits = Mat::zeros((3, 5));
            for (t, &c) in [2usize, 0, 4].iter().enumerate() {
                logits[[t, c]] = margin;
            }
            let l = phonological_loss(&logits, &[2, 0, 4], 9).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-11);
    }

    #[test]
    fn phonological_loss_matches_direct_summation() {
        let mut rng = RngState::new(17);
        let logits = Mat::from_shape_fn((4, 6), |_| rng.uniform(-3.0, 3.0));
        let target = [5usize, 2, 0, 3];
        let mut oracle = 0.0;
        for t in 0..4 {
            let z: f64 = (0..6).map(|j| logits[[t, j]].exp()).sum();
            oracle -= (logits[[t, target[t]]].exp() / z).ln();
        }
        let l = phonological_loss(&logits, &target, 7).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        // padded positions are ignored
        let l_pad = phonological_loss(
            &ndarray::concatenate![ndarray::Axis(0), logits, Mat::zeros((2, 6))],
            &[5, 2, 0, 3, 7, 7],
            7,
        )
        .unwrap();
        assert_eq!(l, l_pad);
        assert!(phonological_loss(&Mat::zeros((2, 6)), &[7, 7], 7).is_err());
        assert!(phonological_loss(&Mat::zeros((2, 6)), &[1], 7).is_err());
    }

    #[test]
    fn semantic_loss_examples() {
        let v = vec![0.3; 300];
        assert_eq!(semantic_loss(&v, &v).unwrap(), 0.0);
        let mut a = vec![0.0; 300];
        a[0] = 3.0;
        a[1] = 4.0;
        assert_eq!(semantic_loss(&a, &vec![0.0; 300]).unwrap(), 5.0);
        let mut rng = RngState::new(2);
        let x: Vec<f64> = (0..300).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..300).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut ss = 0.0;
        for i in 0..300 {
            ss += (x[i] - y[i]).powi(2);
        }
        assert!((semantic_loss(&x, &y).unwrap() - ss.sqrt()).abs() < 1e-12);
        assert!(semantic_loss(&x, &y[..299]).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(2.0, 3.0, 1.0, 1.0).unwrap(), 5.0);
        assert_eq!(joint_loss(2.0, 3.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(joint_loss(4.0, 1.0, 0.5, 2.0).unwrap(), 4.0);
        assert!(joint_loss(1.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn cosine_distance_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&a, &[-1.0, -2.0, 0.5]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(cosine_distance(&a, &[0.0; 3]), Err(Error::ZeroVector)));
    }

    #[test]
    fn triplet_hinge_examples() {
        assert_eq!(triplet_hinge(0.0, 1.0, 0.4), 0.0);
        assert!((triplet_hinge(0.5, 0.5, 0.4) - 0.4).abs() < 1e-15);
        assert!((triplet_hinge(0.9, 0.2, 0.4) - 1.1).abs() < 1e-12);
    }

    /// Exhaustive O(B²) search kept independent of the implementation above.
    fn brute_negatives(e: &Mat, w: &[usize]) -> Vec<usize> {
        (0..w.len())
            .map(|i| {
                let cands: Vec<(f64, usize)> = (0..w.len())
                    .filter(|&j| w[j] != w[i])
                    .map(|j| (cosine_distance(&e.row(i).to_vec(), &e.row(j).to_vec()).unwrap(), j))
                    .collect();
                let min = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
                cands.iter().filter(|c| c.0 == min).map(|c| c.1).min().unwrap()
            })
            .collect()
    }

    #[test]
    fn mining_hand_set_batch() {
        let e = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.8, 0.6]];
        let w = [0, 0, 1, 1];
        let mined = mine_hard_negatives(&e, &w).unwrap();
        assert_eq!(mined, brute_negatives(&e, &w));
        assert_eq!(mined, vec![3, 3, 1, 1]);
        // single eligible negative
        assert_eq!(mine_hard_negatives(&array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], &[0, 0, 1]).unwrap()[0], 2);
        // ties go to the lowest index
        let tie = array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 2.0]];
        assert_eq!(mine_hard_negatives(&tie, &[0, 1, 1, 1]).unwrap()[0], 1);
        assert!(matches!(mine_hard_negatives(&tie, &[3, 3, 3, 3]), Err(Error::SingleWordType)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mining_equals_exhaustive_search(
            b in 2usize..=64,
            seed in any::<u64>(),
            types in 2usize..6,
            dup in any::<bool>(),
        ) {
            let mut rng = RngState::new(seed);
            let mut e = Mat::from_shape_fn((b, 5), |_| rng.uniform(-1.0, 1.0));
            if dup && b > 3 {
                let r = e.row(1).to_owned();
                e.row_mut(b - 1).assign(&r);
            }
            let w: Vec<usize> = (0..b).map(|i| if i < 2 { i } else { (rng.uniform(0.0, types as f64)) as usize }).collect();
            prop_assert_eq!(mine_hard_negatives(&e, &w).unwrap(), brute_negatives(&e, &w));
            // positive rescaling leaves the choice unchanged
            let scaled = e.mapv(|v| v * 3.7);
            prop_assert_eq!(mine_hard_negatives(&scaled, &w).unwrap(), mine_hard_negatives(&e, &w).unwrap());
        }

        #[test]
        fn semantic_loss_is_a_metric(
            xs in proptest::collection::vec(-2.0f64..2.0, 24)
        ) {
            let (a, rest) = xs.split_at(8);
            let (b, c) = rest.split_at(8);
            let ab = semantic_loss(a, b).unwrap();
            let bc = semantic_loss(b, c).unwrap();
            let ac = semantic_loss(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(semantic_loss(a, a).unwrap(), 0.0);
            prop_assert!(a == b || ab > 0.0);
        }

        #[test]
        fn triplet_zero_when_margin_met(dap in 0.0f64..2.0, extra in 0.0f64..1.0, m in 0.0f64..1.0) {
            prop_assert_eq!(triplet_hinge(dap, dap + m + extra, m), 0.0);
        }
    }

    #[test]
    fn triplet_node_matches_scalar_path() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = array![[1.0, 0.2, 0.0], [0.8, 0.4, 0.1], [0.1, 1.0, 0.3], [0.3, 0.9, -0.2], [0.0, -1.0, 1.0]];
        let w = [0, 0, 1, 1, 2];
        let x = g.input(e.clone());
        let (node, anchors) = triplet_node(&mut g, x, &w, 0.4).unwrap().unwrap();
        assert_eq!(anchors, 4);
        let neg = mine_hard_negatives(&e, &w).unwrap();
        let pos = select_positives(&w);
        let mut expect = 0.0;
        for i in 0..4 {
            let row = |k: usize| e.row(k).to_vec();
            expect += triplet_loss(&row(i), &row(pos[i].unwrap()), &row(neg[i]), 0.4).unwrap();
        }
        assert!((g.scalar(node) - expect / 4.0).abs() < 1e-12);
        let single = g.input(e.clone());
        assert!(triplet_node(&mut g, single, &[1, 1, 1, 1, 1], 0.4).unwrap().is_none());
    }
}
