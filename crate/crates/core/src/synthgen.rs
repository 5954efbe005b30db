//! Synthetic spoken-word corpora.
//!
//! Every phone gets a fixed prototype vector in the 13 static dimensions.
//! An exemplar of a word repeats each of its phone prototypes for a random
//! number of frames, adds a per-speaker offset and i.i.d. Gaussian noise, and
//! completes the 39 columns with [`append_deltas`]. Semantic vectors are
//! cluster centers plus jitter; words sharing a cluster stand in for
//! morphological variants of one lemma. Speakers are assigned to splits in
//! contiguous blocks, so splits never share a speaker.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_manifest, Corpus, Lexicon, SegmentRecord, SemanticLexicon, Split, LEXICON_FILE, MANIFEST_FILE, VECTORS_FILE,
};
use crate::error::{Error, Result};
use crate::features::{append_deltas, FeatureMatrix, FEATURE_DIM};

const PHONE_SYMBOLS: [&str; 26] = [
    "a", "e", "i", "o", "u", "p", "t", "k", "b", "d", "g", "m", "n", "s", "z", "f", "v", "l", "r", "j", "w", "h", "S",
    "Z", "x", "N",
];
const STATIC_DIM: usize = FEATURE_DIM / 3;
const DELTA_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_word_types: usize,
    pub n_phones: usize,
    pub phones_per_word: [usize; 2],
    pub n_speakers: usize,
    /// Speakers per split as `[train, valid, test]`; must sum to `n_speakers`.
    pub speaker_split: [usize; 3],
    pub exemplars_per_speaker_per_word: usize,
    pub frames_per_phone: [usize; 2],
    pub feature_dim: usize,
    pub prototype_scale: f64,
    pub speaker_shift_scale: f64,
    pub noise_scale: f64,
    pub semantic_cluster_count: usize,
    pub semantic_dim: usize,
    pub semantic_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_word_types: 30,
            n_phones: 20,
            phones_per_word: [3, 6],
            n_speakers: 8,
            speaker_split: [5, 1, 2],
            exemplars_per_speaker_per_word: 6,
            frames_per_phone: [3, 6],
            feature_dim: FEATURE_DIM,
            prototype_scale: 1.0,
            speaker_shift_scale: 0.5,
            noise_scale: 1.0,
            semantic_cluster_count: 10,
            semantic_dim: 300,
            semantic_jitter: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("n_word_types", self.n_word_types),
            ("n_phones", self.n_phones),
            ("n_speakers", self.n_speakers),
            ("exemplars_per_speaker_per_word", self.exemplars_per_speaker_per_word),
            ("semantic_cluster_count", self.semantic_cluster_count),
            ("semantic_dim", self.semantic_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_phones > PHONE_SYMBOLS.len() {
            return bad(format!("at most {} phones supported", PHONE_SYMBOLS.len()));
        }
        let [lo, hi] = self.phones_per_word;
        if lo == 0 || lo > hi {
            return bad("phones_per_word must be a non-empty range of positive lengths".into());
        }
        let [flo, fhi] = self.frames_per_phone;
        if flo == 0 || flo > fhi {
            return bad("frames_per_phone must be a non-empty range of positive lengths".into());
        }
        if self.feature_dim != FEATURE_DIM {
            return bad(format!("feature_dim must be {FEATURE_DIM}"));
        }
        if self.speaker_split.iter().sum::<usize>() != self.n_speakers {
            return bad("speaker_split must sum to n_speakers".into());
        }
        if self.speaker_split.contains(&0) {
            return bad("every split needs at least one speaker".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("speaker_shift_scale", self.speaker_shift_scale),
            ("prototype_scale", self.prototype_scale),
            ("semantic_jitter", self.semantic_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        let possible = (lo..=hi).map(|l| (self.n_phones as f64).powi(l as i32)).sum::<f64>();
        if possible < self.n_word_types as f64 {
            return bad("not enough distinct phone strings for n_word_types".into());
        }
        Ok(())
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    /// `(word, phone symbols)` in generation order.
    pub transcriptions: Vec<(String, Vec<String>)>,
    pub semantic: BTreeMap<String, Vec<f64>>,
    pub records: Vec<SegmentRecord>,
    /// Static-dimension prototype per phone (`n_phones × 13`).
    pub prototypes: Array2<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn segment_rng(seed: u64, word: usize, speaker: usize, exemplar: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((word as u64) << 40 | (speaker as u64) << 20 | exemplar as u64));
    rng
}

/// Static frames: each phone prototype repeated `durations[i]` times plus
/// the speaker offset, plus noise drawn from `rng`.
pub fn render_static(
    prototypes: &Array2<f64>,
    phones: &[usize],
    durations: &[usize],
    shift: &Array1<f64>,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let t: usize = durations.iter().sum();
    let mut out = Array2::zeros((t, STATIC_DIM));
    let mut row = 0;
    for (&p, &d) in phones.iter().zip(durations) {
        for _ in 0..d {
            let mut r = out.row_mut(row);
            r.assign(&prototypes.row(p));
            r += shift;
            if noise_scale > 0.0 {
                r += &normal_vec(rng, STATIC_DIM, noise_scale);
            }
            row += 1;
        }
    }
    out
}

/// Full `T×39` exemplar, stored at f32 precision so in-memory and on-disk
/// corpora agree exactly.
pub fn render_exemplar(
    prototypes: &Array2<f64>,
    phones: &[usize],
    durations: &[usize],
    shift: &Array1<f64>,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix> {
    let stat = render_static(prototypes, phones, durations, shift, noise_scale, rng);
    let full = append_deltas(&stat, DELTA_WINDOW).mapv(|v| v as f32 as f64);
    FeatureMatrix::new(full)
}

fn word_name(phones: &[usize], taken: &mut HashSet<String>) -> String {
    let base: String = phones.iter().map(|&p| PHONE_SYMBOLS[p]).collect();
    let mut name = base.clone();
    let mut k = 2;
    while !taken.insert(name.clone()) {
        name = format!("{base}_{k}");
        k += 1;
    }
    name
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lo, hi] = cfg.phones_per_word;
    let mut seen = HashSet::new();
    let mut strings = Vec::with_capacity(cfg.n_word_types);
    while strings.len() < cfg.n_word_types {
        let len = rng.random_range(lo..=hi);
        let s: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.n_phones)).collect();
        if seen.insert(s.clone()) {
            strings.push(s);
        }
    }
    generate_with_transcriptions(cfg, strings)
}

/// Like [`generate_corpus`] but with caller-chosen phone strings (indices
/// into the phone inventory). Duplicate strings yield homophones with
/// distinct word names.
pub fn generate_with_transcriptions(cfg: &SynthConfig, strings: Vec<Vec<usize>>) -> Result<SynthCorpus> {
    cfg.validate()?;
    if strings.iter().any(|s| s.is_empty() || s.iter().any(|&p| p >= cfg.n_phones)) {
        return Err(Error::Config("transcriptions must be non-empty and use known phones".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let prototypes = Array2::from_shape_fn((cfg.n_phones, STATIC_DIM), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * cfg.prototype_scale
    });
    let shifts: Vec<Array1<f64>> = (0..cfg.n_speakers)
        .map(|_| normal_vec(&mut rng, STATIC_DIM, cfg.speaker_shift_scale))
        .collect();
    let centers: Vec<Array1<f64>> = (0..cfg.semantic_cluster_count)
        .map(|_| normal_vec(&mut rng, cfg.semantic_dim, 1.0))
        .collect();

    let mut taken = HashSet::new();
    let mut transcriptions = Vec::with_capacity(strings.len());
    let mut semantic = BTreeMap::new();
    for (w, s) in strings.iter().enumerate() {
        let name = word_name(s, &mut taken);
        let center = &centers[w % cfg.semantic_cluster_count];
        let vec = center + &normal_vec(&mut rng, cfg.semantic_dim, cfg.semantic_jitter);
        semantic.insert(name.clone(), vec.to_vec());
        transcriptions.push((name, s.iter().map(|&p| PHONE_SYMBOLS[p].to_string()).collect()));
    }

    let [flo, fhi] = cfg.frames_per_phone;
    let mut records = Vec::new();
    for spk in 0..cfg.n_speakers {
        let split = speaker_split(cfg, spk);
        let speaker = format!("spk{:02}", spk + 1);
        for (w, s) in strings.iter().enumerate() {
            for e in 0..cfg.exemplars_per_speaker_per_word {
                let mut srng = segment_rng(cfg.seed, w, spk, e);
                let durations: Vec<usize> = s.iter().map(|_| srng.random_range(flo..=fhi)).collect();
                let features = render_exemplar(&prototypes, s, &durations, &shifts[spk], cfg.noise_scale, &mut srng)?;
                let word = transcriptions[w].0.clone();
                records.push(SegmentRecord {
                    segment_id: format!("{speaker}_{word}_{e}"),
                    word,
                    speaker: speaker.clone(),
                    split,
                    features,
                });
            }
        }
    }
    Ok(SynthCorpus { config: cfg.clone(), transcriptions, semantic, records, prototypes })
}

fn speaker_split(cfg: &SynthConfig, speaker: usize) -> Split {
    let [tr, va, _] = cfg.speaker_split;
    if speaker < tr {
        Split::Train
    } else if speaker < tr + va {
        Split::Valid
    } else {
        Split::Test
    }
}

impl SynthCorpus {
    pub fn lexicon(&self) -> Result<Lexicon> {
        Lexicon::from_entries(self.transcriptions.clone())
    }

    pub fn semantic_lexicon(&self) -> Result<SemanticLexicon> {
        SemanticLexicon::new(self.config.semantic_dim, self.semantic.clone())
    }

    /// In-memory corpus; `normalize` fits train-split statistics.
    pub fn into_corpus(self, normalize: bool) -> Result<Corpus> {
        let lex = self.lexicon()?;
        let sem = self.semantic_lexicon()?;
        let mut c = Corpus::from_records(self.records, lex, sem)?;
        if normalize {
            c.normalize()?;
        }
        Ok(c)
    }

    /// Writes `manifest.tsv`, `lexicon.txt`, `vectors.txt` and
    /// `features/<segment_id>.feat` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut rows = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let rel = format!("features/{}.feat", r.segment_id);
            r.features.write(&dir.join(&rel))?;
            rows.push((r.segment_id.clone(), r.word.clone(), r.speaker.clone(), r.split, rel));
        }
        write_manifest(&dir.join(MANIFEST_FILE), &rows)?;
        self.lexicon()?.write(&dir.join(LEXICON_FILE))?;
        self.semantic_lexicon()?.write(&dir.join(VECTORS_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;
    use crate::features::FeatureConfig;

    fn small() -> SynthConfig {
        SynthConfig {
            n_word_types: 6,
            n_speakers: 4,
            speaker_split: [2, 1, 1],
            exemplars_per_speaker_per_word: 2,
            semantic_dim: 8,
            semantic_cluster_count: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_preset_shape() {
        let s = generate_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(s.records.len(), 30 * 8 * 6);
        let c = s.into_corpus(false).unwrap();
        c.check_speaker_disjoint().unwrap();
        assert_eq!(c.split_indices(Split::Train).len(), 900);
        assert_eq!(c.split_indices(Split::Valid).len(), 180);
        assert_eq!(c.split_indices(Split::Test).len(), 360);
        assert_eq!(c.speakers_in(Split::Train).len(), 5);
        assert_eq!(c.skipped(), 0);
    }

    #[test]
    fn same_seed_is_byte_identical_on_disk() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small()).unwrap().write(a.path()).unwrap();
        generate_corpus(&small()).unwrap().write(b.path()).unwrap();
        for name in ["manifest.tsv", "lexicon.txt", "vectors.txt"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        for entry in fs::read_dir(a.path().join("features")).unwrap() {
            let p = entry.unwrap().path();
            let q = b.path().join("features").join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(q).unwrap());
        }
        let other = generate_corpus(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.records[0].features, generate_corpus(&small()).unwrap().records[0].features);
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_corpus(&small()).unwrap();
        s.write(dir.path()).unwrap();
        let cfg = FeatureConfig { normalize: false, ..Default::default() };
        let disk = load_corpus(
            &dir.path().join("manifest.tsv"),
            &dir.path().join("lexicon.txt"),
            &dir.path().join("vectors.txt"),
            &cfg,
        )
        .unwrap();
        let mem = s.into_corpus(false).unwrap();
        assert_eq!(disk.len(), mem.len());
        for (a, b) in disk.records().iter().zip(mem.records()) {
            assert_eq!(a.segment_id, b.segment_id);
            assert_eq!(a.features, b.features);
        }
        assert_eq!(disk.semantic().get("x"), None);
        for w in mem.words() {
            assert_eq!(disk.semantic().get(w), mem.semantic().get(w));
        }
    }

    /// Run-length collapse of consecutive identical static rows.
    fn collapse(m: &Array2<f64>) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for row in m.rows() {
            let r: Vec<f64> = row.iter().take(STATIC_DIM).cloned().collect();
            if out.last() != Some(&r) {
                out.push(r);
            }
        }
        out
    }

    #[test]
    fn noiseless_exemplars_differ_only_in_duration() {
        let cfg = SynthConfig { noise_scale: 0.0, speaker_shift_scale: 0.0, ..small() };
        let s = generate_corpus(&cfg).unwrap();
        let mut by_word: BTreeMap<&str, Vec<&SegmentRecord>> = BTreeMap::new();
        for r in &s.records {
            by_word.entry(&r.word).or_default().push(r);
        }
        for recs in by_word.values() {
            let reference = collapse(recs[0].features.as_array());
            for r in recs {
                assert_eq!(collapse(r.features.as_array()), reference);
            }
        }
    }

    #[test]
    fn forced_homophones_are_indistinguishable() {
        let cfg = SynthConfig { noise_scale: 0.0, speaker_shift_scale: 0.0, ..small() };
        let strings = vec![vec![1, 4, 2], vec![1, 4, 2], vec![3, 3, 0, 5]];
        let s = generate_with_transcriptions(&cfg, strings).unwrap();
        assert_eq!(s.transcriptions[0].0, "eui");
        assert_eq!(s.transcriptions[1].0, "eui_2");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shift = Array1::zeros(STATIC_DIM);
        // exhaustive over every duration assignment in range
        let [flo, fhi] = cfg.frames_per_phone;
        for d0 in flo..=fhi {
            for d1 in flo..=fhi {
                for d2 in flo..=fhi {
                    let d = [d0, d1, d2];
                    let a = render_exemplar(&s.prototypes, &[1, 4, 2], &d, &shift, 0.0, &mut rng).unwrap();
                    let b = render_exemplar(&s.prototypes, &[1, 4, 2], &d, &shift, 0.0, &mut rng).unwrap();
                    assert_eq!(a, b);
                }
            }
        }
        // and the generated exemplars of both words collapse to the same phone path
        let first: Vec<_> = s.records.iter().filter(|r| r.word == "eui").map(|r| collapse(r.features.as_array())).collect();
        let second: Vec<_> = s.records.iter().filter(|r| r.word == "eui_2").map(|r| collapse(r.features.as_array())).collect();
        assert_eq!(first[0], second[0]);
    }

    #[test]
    fn within_word_distance_below_between_word() {
        for seed in 0..5 {
            let cfg = SynthConfig { seed, ..small() };
            let s = generate_corpus(&cfg).unwrap();
            let means: Vec<(String, Array1<f64>)> = s
                .records
                .iter()
                .map(|r| (r.word.clone(), r.features.as_array().mean_axis(ndarray::Axis(0)).unwrap()))
                .collect();
            let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    let d = (&means[i].1 - &means[j].1).mapv(|v| v * v).sum().sqrt();
                    if means[i].0 == means[j].0 {
                        within += d;
                        nw += 1;
                    } else {
                        between += d;
                        nb += 1;
                    }
                }
            }
            assert!(within / (nw as f64) < between / (nb as f64), "seed {seed}");
        }
    }

    #[test]
    fn every_word_in_both_lexicons() {
        let s = generate_corpus(&small()).unwrap();
        let lex = s.lexicon().unwrap();
        let sem = s.semantic_lexicon().unwrap();
        for r in &s.records {
            assert!(lex.get(&r.word).is_some());
            assert!(sem.get(&r.word).is_some());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero = SynthConfig { exemplars_per_speaker_per_word: 0, ..Default::default() };
        assert!(matches!(generate_corpus(&zero), Err(Error::Config(_))));
        let split = SynthConfig { speaker_split: [4, 1, 1], ..Default::default() };
        assert!(split.validate().is_err());
        let noise = SynthConfig { noise_scale: -0.1, ..Default::default() };
        assert!(noise.validate().is_err());
    }
}
