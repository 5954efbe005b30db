//! Same-different word discrimination: pooled pair ranking by cosine
//! distance scored with average precision. Also embedding export and a
//! nearest-neighbour purity diagnostic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::AweModel;
use crate::nn::Mat;

/// Embeddings with aligned segment, word and speaker labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Mat,
    segment_ids: Vec<String>,
    words: Vec<String>,
    speakers: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(vectors: Mat, segment_ids: Vec<String>, words: Vec<String>, speakers: Vec<String>) -> Result<Self> {
        let n = vectors.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("embedding set is empty".into()));
        }
        if segment_ids.len() != n || words.len() != n || speakers.len() != n {
            return Err(Error::Shape(format!(
                "{n} vectors but {}/{}/{} labels",
                segment_ids.len(),
                words.len(),
                speakers.len()
            )));
        }
        for row in vectors.rows() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("embedding".into()));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroVector);
            }
        }
        Ok(EmbeddingSet { vectors, segment_ids, words, speakers })
    }

    /// Labels only; segment and speaker ids are synthesized.
    pub fn from_labels(vectors: Mat, words: Vec<String>) -> Result<Self> {
        let n = words.len();
        let ids = (0..n).map(|i| format!("seg{i}")).collect();
        EmbeddingSet::new(vectors, ids, words, vec!["spk".to_string(); n])
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn segment_ids(&self) -> &[String] {
        &self.segment_ids
    }

    pub fn positive_pairs(&self) -> usize {
        let n = self.len();
        (0..n)
            .map(|i| (i + 1..n).filter(|&j| self.words[i] == self.words[j]).count())
            .sum()
    }
}

/// `(1/P)·Σ_{k: rel_k} precision@k` over a ranked relevance list.
///
/// Accumulated in double-double so short lists round like the exact
/// rational value.
pub fn average_precision(ranked: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (k, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            let (h, d) = (hits as f64, (k + 1) as f64);
            let q = h / d;
            let q_lo = (-q).mul_add(d, h) / d;
            let (s, e) = two_sum(hi, q);
            let e = e + lo + q_lo;
            hi = s + e;
            lo = e - (hi - s);
        }
    }
    if hits == 0 {
        return Err(Error::NoPositivePairs("relevance list has no positives".into()));
    }
    let p = hits as f64;
    let q = hi / p;
    let r = (-q).mul_add(p, hi) + lo;
    Ok(q + r / p)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Relevance of all unordered pairs sorted by ascending cosine distance,
/// ties in `(i, j)` order.
pub fn ranked_pairs(set: &EmbeddingSet) -> Vec<bool> {
    let n = set.len();
    let v = &set.vectors;
    let norms: Vec<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = v.row(i);
        for j in i + 1..n {
            let d = (1.0 - ri.dot(&v.row(j)) / (norms[i] * norms[j])).clamp(0.0, 2.0);
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs.into_iter().map(|(_, i, j)| set.words[i] == set.words[j]).collect()
}

pub fn same_different_map(set: &EmbeddingSet) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::NoPositivePairs("fewer than two segments".into()));
    }
    average_precision(&ranked_pairs(set))
        .map_err(|_| Error::NoPositivePairs("no two segments share a word".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub split: String,
    pub n: usize,
    pub n_positive_pairs: usize,
    pub map: f64,
}

pub fn map_report(split: Split, set: &EmbeddingSet) -> Result<MapReport> {
    Ok(MapReport {
        split: split.to_string(),
        n: set.len(),
        n_positive_pairs: set.positive_pairs(),
        map: same_different_map(set)?,
    })
}

/// Mean fraction of each segment's `k` nearest cosine neighbours that share
/// its word. Neighbour ties go to the lower index.
pub fn neighbor_purity(set: &EmbeddingSet, k: usize) -> Result<f64> {
    let n = set.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..{n}")));
    }
    let v = &set.vectors;
    let norms: Vec<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (1.0 - v.row(i).dot(&v.row(j)) / (norms[i] * norms[j]), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = d[..k].iter().filter(|(_, j)| set.words[*j] == set.words[i]).count();
        total += same as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// Embeds every record of `split` in corpus order.
pub fn embed_split(model: &AweModel, corpus: &Corpus, split: Split, chunk: usize) -> Result<EmbeddingSet> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let vectors = model.embed_records(corpus, &idx, chunk)?;
    let recs = corpus.records();
    EmbeddingSet::new(
        vectors,
        idx.iter().map(|&i| recs[i].segment_id.clone()).collect(),
        idx.iter().map(|&i| recs[i].word.clone()).collect(),
        idx.iter().map(|&i| recs[i].speaker.clone()).collect(),
    )
}

/// Writes `segment_id word speaker v_1 … v_D`, tab-separated, one row per
/// segment, values to 9 significant digits.
pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("nothing to export".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..set.len() {
        let mut line = format!("{}\t{}\t{}", set.segment_ids[i], set.words[i], set.speakers[i]);
        for x in set.vectors.row(i) {
            line.push('\t');
            line.push_str(&format!("{x:.8e}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (mut ids, mut words, mut spk, mut values) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dim = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: n + 1, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(parse_err(format!("expected at least 4 columns, found {}", cols.len())));
        }
        let d = cols.len() - 3;
        if *dim.get_or_insert(d) != d {
            return Err(parse_err(format!("row has {d} values, earlier rows {}", dim.unwrap())));
        }
        ids.push(cols[0].to_string());
        words.push(cols[1].to_string());
        spk.push(cols[2].to_string());
        for c in &cols[3..] {
            values.push(c.parse::<f64>().map_err(|e| parse_err(format!("{c:?}: {e}")))?);
        }
    }
    let d = dim.ok_or_else(|| Error::InvalidArgument(format!("{} has no rows", path.display())))?;
    let vectors = Mat::from_shape_vec((ids.len(), d), values).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingSet::new(vectors, ids, words, spk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cosine_distance;
    use crate::nn::RngState;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(ws: &[usize]) -> Vec<String> {
        ws.iter().map(|w| format!("w{w}")).collect()
    }

    /// Independent O(n²) reference: explicit pair list, distances from the
    /// scalar cosine helper, stable sort, precision recomputed per positive.
    pub(crate) fn brute_map(v: &Mat, w: &[usize]) -> f64 {
        let n = w.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    pairs.push((cosine_distance(&v.row(i).to_vec(), &v.row(j).to_vec()).unwrap(), i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut precisions = Vec::new();
        for k in 0..pairs.len() {
            let (_, i, j) = pairs[k];
            if w[i] == w[j] {
                let pos_so_far = pairs[..=k].iter().filter(|p| w[p.1] == w[p.2]).count();
                precisions.push(pos_so_far as f64 / (k + 1) as f64);
            }
        }
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }

    fn random_set(rng: &mut RngState, n: usize, d: usize, types: usize) -> (Mat, Vec<usize>) {
        let v = Mat::from_shape_fn((n, d), |_| rng.uniform(-1.0, 1.0));
        let mut w: Vec<usize> = (0..n).map(|_| (rng.uniform(0.0, types as f64)) as usize).collect();
        w[1] = w[0];
        (v, w)
    }

    #[test]
    fn ap_kernel_examples() {
        assert_eq!(average_precision(&[true, false, true]).unwrap(), 5.0 / 6.0);
        assert_eq!(average_precision(&[true; 7]).unwrap(), 1.0);
        for l in [2, 10, 1000] {
            let mut r = vec![false; l];
            r[l - 1] = true;
            assert_eq!(average_precision(&r).unwrap(), 1.0 / l as f64);
        }
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn perfect_separation_gives_one() {
        let v = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let set = EmbeddingSet::from_labels(v, labels(&[0, 0, 1, 1])).unwrap();
        assert_eq!(same_different_map(&set).unwrap(), 1.0);
        let r = map_report(Split::Test, &set).unwrap();
        assert_eq!((r.n, r.n_positive_pairs, r.split.as_str()), (4, 2, "test"));
    }

    #[test]
    fn hand_set_six_points_match_brute_force() {
        let v = array![[1.0, 0.1], [0.9, 0.3], [0.2, 1.0], [0.5, 0.5], [-0.3, 1.0], [1.0, -0.2]];
        let w = [0, 0, 1, 1, 1, 0];
        let set = EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap();
        assert!((same_different_map(&set).unwrap() - brute_map(&v, &w)).abs() < 1e-12);
    }

    #[test]
    fn no_positive_pair_is_an_error() {
        let set = EmbeddingSet::from_labels(array![[1.0, 0.0], [0.0, 1.0]], labels(&[0, 1])).unwrap();
        assert!(matches!(same_different_map(&set), Err(Error::NoPositivePairs(_))));
        assert!(EmbeddingSet::from_labels(array![[0.0, 0.0], [0.0, 1.0]], labels(&[0, 1])).is_err());
    }

    #[test]
    fn random_sets_match_brute_force() {
        let mut rng = RngState::new(42);
        for trial in 0..50 {
            let n = 4 + (trial * 97) % 97;
            let (v, w) = random_set(&mut rng, n, 3, 1 + trial % 7);
            let set = EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap();
            assert!((same_different_map(&set).unwrap() - brute_map(&v, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn permuted_labels_approach_prevalence() {
        let mut rng = RngState::new(7);
        let n = 40;
        let v = Mat::from_shape_fn((n, 4), |_| rng.uniform(-1.0, 1.0));
        let mut w: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let set0 = EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap();
        let prevalence = set0.positive_pairs() as f64 / (n * (n - 1) / 2) as f64;
        let mut mean = 0.0;
        let trials = 300;
        for _ in 0..trials {
            use rand::seq::SliceRandom;
            w.shuffle(rng.inner());
            mean += same_different_map(&EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap()).unwrap();
        }
        mean /= trials as f64;
        assert!((mean - prevalence).abs() < 0.02, "{mean} vs {prevalence}");
    }

    #[test]
    fn collapsed_clusters_tolerate_small_noise() {
        let mut rng = RngState::new(3);
        let dirs = Mat::eye(4);
        let mut v = Mat::zeros((12, 4));
        let w: Vec<usize> = (0..12).map(|i| i % 4).collect();
        for (i, &wi) in w.iter().enumerate() {
            v.row_mut(i).assign(&dirs.row(wi));
        }
        assert_eq!(same_different_map(&EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap()).unwrap(), 1.0);
        // inter-class distance is √2; keep perturbations far below half of it
        let noisy = &v + &Mat::from_shape_fn((12, 4), |_| rng.uniform(-0.05, 0.05));
        assert_eq!(same_different_map(&EmbeddingSet::from_labels(noisy, labels(&w)).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn purity_examples() {
        let v = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        let set = EmbeddingSet::from_labels(v, labels(&[0, 0, 0, 1, 1, 1])).unwrap();
        assert_eq!(neighbor_purity(&set, 2).unwrap(), 1.0);
        let singles = EmbeddingSet::from_labels(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], labels(&[0, 1, 2])).unwrap();
        assert_eq!(neighbor_purity(&singles, 1).unwrap(), 0.0);
        assert!(neighbor_purity(&singles, 3).is_err());

        // brute force on a small hand-set case
        let v = array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8], [0.6, 0.8]];
        let w = [0, 1, 1, 0, 0];
        let set = EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap();
        let mut expect = 0.0;
        for i in 0..5 {
            let mut d: Vec<(f64, usize)> = (0..5)
                .filter(|&j| j != i)
                .map(|j| (cosine_distance(&v.row(i).to_vec(), &v.row(j).to_vec()).unwrap(), j))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expect += d[..2].iter().filter(|p| w[p.1] == w[i]).count() as f64 / 2.0;
        }
        assert!((neighbor_purity(&set, 2).unwrap() - expect / 5.0).abs() < 1e-15);
    }

    #[test]
    fn export_round_trip() {
        let mut rng = RngState::new(1);
        let v = Mat::from_shape_fn((3, 4), |_| rng.uniform(-1e3, 1e3));
        let set = EmbeddingSet::new(
            v.clone(),
            vec!["a".into(), "b".into(), "c".into()],
            labels(&[0, 1, 0]),
            vec!["s1".into(), "s2".into(), "s1".into()],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        export_embeddings(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split('\t').count() == 7));
        let back = import_embeddings(&path).unwrap();
        assert_eq!(back.words(), set.words());
        assert_eq!(back.segment_ids(), set.segment_ids());
        for (a, b) in back.vectors().iter().zip(v.iter()) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
        }
        assert!(EmbeddingSet::new(Mat::zeros((0, 4)), vec![], vec![], vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn map_invariances(seed in any::<u64>(), n in 4usize..40, scale in 0.01f64..100.0, angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = RngState::new(seed);
            let (v, w) = random_set(&mut rng, n, 2, 3);
            let base = same_different_map(&EmbeddingSet::from_labels(v.clone(), labels(&w)).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!((base - brute_map(&v, &w)).abs() < 1e-12);
            let scaled = v.mapv(|x| x * scale);
            let s = same_different_map(&EmbeddingSet::from_labels(scaled, labels(&w)).unwrap()).unwrap();
            prop_assert!((s - base).abs() < 1e-9);
            let rot = array![[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
            let r = same_different_map(&EmbeddingSet::from_labels(v.dot(&rot), labels(&w)).unwrap()).unwrap();
            prop_assert!((r - base).abs() < 1e-9);
            let relabeled = EmbeddingSet::new(
                v.clone(),
                (0..n).map(|i| format!("x{i}")).collect(),
                labels(&w),
                (0..n).map(|i| format!("spk{}", (i * 7) % 5)).collect(),
            ).unwrap();
            prop_assert_eq!(same_different_map(&relabeled).unwrap(), base);
        }
    }
}
