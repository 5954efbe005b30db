//! Dataset model: segment manifests, the phonetic and semantic lexicons,
//! speaker-disjoint splits and padded mini-batches.
//!
//! File formats (all UTF-8, tab separated where noted):
//!
//! * manifest: `segment_id  word  speaker  split  feature_path`, or
//!   `segment_id  word  speaker  split  wav_path  start  end` with times in
//!   seconds when features are computed on load. An optional header row
//!   starting with `segment_id` is skipped. Relative paths resolve against
//!   the manifest's directory.
//! * phonetic lexicon: `word<TAB>phone phone …`
//! * semantic lexicon: first line `vocab_size dim`, then `word v1 … vK`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Extractor, FeatureConfig, FeatureMatrix, Normalizer, Waveform, FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Closed phone set. Phones occupy indices `0..len()`; the end-of-sequence
/// symbol is `len()` and padding is `len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    phones: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhoneInventory {
    pub fn new(phones: impl IntoIterator<Item = String>) -> Self {
        let phones: Vec<String> = phones.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = phones.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        PhoneInventory { phones, index }
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.phones.len()
    }

    pub fn pad(&self) -> usize {
        self.phones.len() + 1
    }

    /// Decoder output classes: every phone plus EOS.
    pub fn output_size(&self) -> usize {
        self.phones.len() + 1
    }

    pub fn index_of(&self, phone: &str) -> Option<usize> {
        self.index.get(phone).copied()
    }

    pub fn symbol(&self, idx: usize) -> &str {
        if idx == self.eos() {
            "</s>"
        } else if idx == self.pad() {
            "<pad>"
        } else {
            &self.phones[idx]
        }
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }
}

/// Phonetic transcription as inventory indices, without the end marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhoneSequence(pub Vec<usize>);

/// Pronunciation lexicon Φ.
#[derive(Debug, Clone)]
pub struct Lexicon {
    inventory: PhoneInventory,
    words: BTreeMap<String, PhoneSequence>,
}

impl Lexicon {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<Self> {
        let entries: Vec<(String, Vec<String>)> = entries.into_iter().collect();
        for (w, phones) in &entries {
            if phones.is_empty() {
                return Err(Error::InvalidArgument(format!("empty transcription for {w:?}")));
            }
        }
        let inventory = PhoneInventory::new(entries.iter().flat_map(|(_, p)| p.iter().cloned()));
        let words = entries
            .into_iter()
            .map(|(w, phones)| {
                let seq = phones.iter().map(|p| inventory.index_of(p).unwrap()).collect();
                (w, PhoneSequence(seq))
            })
            .collect();
        Ok(Lexicon { inventory, words })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected word<TAB>phones".into(),
            })?;
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if phones.is_empty() {
                return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("no phones for {word:?}") });
            }
            entries.push((word.to_string(), phones));
        }
        Lexicon::from_entries(entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (w, seq) in &self.words {
            let phones: Vec<&str> = seq.0.iter().map(|&p| self.inventory.symbol(p)).collect();
            out.push_str(&format!("{w}\t{}\n", phones.join(" ")));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn inventory(&self) -> &PhoneInventory {
        &self.inventory
    }

    pub fn get(&self, word: &str) -> Option<&PhoneSequence> {
        self.words.get(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = (&String, &PhoneSequence)> {
        self.words.iter()
    }
}

/// Distributed word representations Λ.
#[derive(Debug, Clone)]
pub struct SemanticLexicon {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl SemanticLexicon {
    pub fn new(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (w, v) in &vectors {
            if v.len() != dim {
                return Err(Error::SemanticDim { expected: dim, found: v.len(), word: w.clone() });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("semantic vector for {w:?}")));
            }
        }
        Ok(SemanticLexicon { dim, vectors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "missing `vocab_size dim` header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(1, format!("bad header token {t:?}"))))
            .collect::<Result<_>>()?;
        let [vocab, dim] = nums[..] else {
            return Err(perr(1, "header must be `vocab_size dim`".into()));
        };
        let mut vectors = BTreeMap::new();
        for (i, line) in lines {
            let mut toks = line.split_whitespace();
            let word = toks.next().unwrap().to_string();
            let v: Vec<f64> = toks
                .map(|t| t.parse().map_err(|_| perr(i + 1, format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if v.len() != dim {
                return Err(Error::SemanticDim { expected: dim, found: v.len(), word });
            }
            vectors.insert(word, v);
        }
        if vectors.len() != vocab {
            warn!("{}: header declares {vocab} words, found {}", path.display(), vectors.len());
        }
        SemanticLexicon::new(dim, vectors)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {}\n", self.vectors.len(), self.dim);
        for (w, v) in &self.vectors {
            out.push_str(w);
            for x in v {
                out.push_str(&format!(" {x}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub word: String,
    pub speaker: String,
    pub split: Split,
    pub features: FeatureMatrix,
}

/// One manifest row before features are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub segment_id: String,
    pub word: String,
    pub speaker: String,
    pub split: Split,
    pub source: FeatureSource,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    File(PathBuf),
    Wav { path: PathBuf, start: f64, end: f64 },
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("segment_id")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let source = match cols.len() {
            5 => FeatureSource::File(resolve(cols[4])),
            7 => {
                let num = |s: &str| s.parse::<f64>().map_err(|_| perr(format!("bad time {s:?}")));
                FeatureSource::Wav { path: resolve(cols[4]), start: num(cols[5])?, end: num(cols[6])? }
            }
            n => return Err(perr(format!("expected 5 or 7 columns, found {n}"))),
        };
        out.push(ManifestEntry {
            segment_id: cols[0].to_string(),
            word: cols[1].to_string(),
            speaker: cols[2].to_string(),
            split: cols[3].parse().map_err(|e: Error| perr(e.to_string()))?,
            source,
        });
    }
    Ok(out)
}

/// Writes a feature-file manifest with paths relative to `root`.
pub fn write_manifest(path: &Path, rows: &[(String, String, String, Split, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("segment_id\tword\tspeaker\tsplit\tfeature_path\n");
    for (id, word, spk, split, feat) in rows {
        out.push_str(&format!("{id}\t{word}\t{spk}\t{split}\t{feat}\n"));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub segments: usize,
    pub types: usize,
    pub speakers: usize,
    pub duration_mean: f64,
    pub duration_sd: f64,
    pub ttr: f64,
}

/// Loaded, lexicon-resolved dataset. Immutable after load.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<SegmentRecord>,
    lexicon: Lexicon,
    semantic: SemanticLexicon,
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    speakers: Vec<String>,
    speaker_ids: HashMap<String, usize>,
    skipped: usize,
    normalizer: Option<Normalizer>,
    frame_ms: f64,
    hop_ms: f64,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const VECTORS_FILE: &str = "vectors.txt";

/// Loads a corpus laid out as `manifest.tsv`, `lexicon.txt` and
/// `vectors.txt` in one directory.
pub fn load_corpus_dir(dir: &Path, cfg: &FeatureConfig) -> Result<Corpus> {
    load_corpus(&dir.join(MANIFEST_FILE), &dir.join(LEXICON_FILE), &dir.join(VECTORS_FILE), cfg)
}

pub fn load_corpus(
    manifest_path: &Path,
    lexicon_path: &Path,
    semantic_path: &Path,
    cfg: &FeatureConfig,
) -> Result<Corpus> {
    let entries = read_manifest(manifest_path)?;
    let lexicon = Lexicon::read(lexicon_path)?;
    let semantic = SemanticLexicon::read(semantic_path)?;
    let mut extractors: HashMap<u32, Extractor> = HashMap::new();
    let mut records = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for e in entries {
        if lexicon.get(&e.word).is_none() {
            warn!("skipping {}: {:?} not in phonetic lexicon", e.segment_id, e.word);
            skipped += 1;
            continue;
        }
        if semantic.get(&e.word).is_none() {
            warn!("skipping {}: {:?} has no semantic vector", e.segment_id, e.word);
            skipped += 1;
            continue;
        }
        let features = match &e.source {
            FeatureSource::File(p) => FeatureMatrix::read(p)?,
            FeatureSource::Wav { path, start, end } => {
                let wav = Waveform::from_wav(path)?.slice_seconds(*start, *end)?;
                let sr = wav.sample_rate();
                let ex = match extractors.entry(sr) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(e) => e.insert(Extractor::new(cfg, sr)?),
                };
                ex.extract(&wav)?
            }
        };
        records.push(SegmentRecord {
            segment_id: e.segment_id,
            word: e.word,
            speaker: e.speaker,
            split: e.split,
            features,
        });
    }
    let mut corpus = Corpus::from_records(records, lexicon, semantic)?;
    corpus.skipped = skipped;
    corpus.frame_ms = cfg.frame_ms;
    corpus.hop_ms = cfg.hop_ms;
    if cfg.normalize {
        corpus.normalize()?;
    }
    Ok(corpus)
}

impl Corpus {
    /// Builds a corpus from in-memory records, dropping (and counting)
    /// records whose word is missing from either lexicon.
    pub fn from_records(records: Vec<SegmentRecord>, lexicon: Lexicon, semantic: SemanticLexicon) -> Result<Self> {
        let mut kept = Vec::with_capacity(records.len());
        let mut skipped = 0;
        for r in records {
            if lexicon.get(&r.word).is_some() && semantic.get(&r.word).is_some() {
                kept.push(r);
            } else {
                warn!("skipping {}: {:?} missing from a lexicon", r.segment_id, r.word);
                skipped += 1;
            }
        }
        let words: Vec<String> = kept.iter().map(|r| r.word.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let word_ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let speakers: Vec<String> = kept.iter().map(|r| r.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let speaker_ids = speakers.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let defaults = FeatureConfig::default();
        Ok(Corpus {
            records: kept,
            lexicon,
            semantic,
            words,
            word_ids,
            speakers,
            speaker_ids,
            skipped,
            normalizer: None,
            frame_ms: defaults.frame_ms,
            hop_ms: defaults.hop_ms,
        })
    }

    /// Fits mean/variance statistics on the training split and applies them
    /// to every record.
    pub fn normalize(&mut self) -> Result<()> {
        let norm = Normalizer::fit(
            self.records
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| r.features.as_array()),
        )?;
        for r in &mut self.records {
            let mut m = r.features.as_array().clone();
            norm.apply(&mut m);
            r.features = FeatureMatrix::new(m)?;
        }
        self.normalizer = Some(norm);
        Ok(())
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }

    pub fn records(&self) -> &[SegmentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn semantic(&self) -> &SemanticLexicon {
        &self.semantic
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.word_ids.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn speakers_in(&self, split: Split) -> BTreeSet<&str> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.speaker.as_str()).collect()
    }

    /// Fails if any speaker occurs in more than one split.
    pub fn check_speaker_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(&r.speaker, r.split) {
                if prev != r.split {
                    return Err(Error::InvalidArgument(format!(
                        "speaker {:?} appears in both {prev} and {}",
                        r.speaker, r.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn type_token_ratio(&self, split: Split) -> Result<f64> {
        let idx = self.split_indices(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let types: BTreeSet<&str> = idx.iter().map(|&i| self.records[i].word.as_str()).collect();
        Ok(type_token_ratio(types.len(), idx.len()))
    }

    pub fn split_stats(&self, split: Split) -> Result<SplitStats> {
        let idx = self.split_indices(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let durations: Vec<f64> = idx
            .iter()
            .map(|&i| ((self.records[i].features.frames() - 1) as f64 * self.hop_ms + self.frame_ms) / 1000.0)
            .collect();
        let n = durations.len() as f64;
        let mean = durations.iter().sum::<f64>() / n;
        let var = durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let types: BTreeSet<&str> = idx.iter().map(|&i| self.records[i].word.as_str()).collect();
        Ok(SplitStats {
            split,
            segments: idx.len(),
            types: types.len(),
            speakers: self.speakers_in(split).len(),
            duration_mean: mean,
            duration_sd: var.sqrt(),
            ttr: type_token_ratio(types.len(), idx.len()),
        })
    }

    /// Pads the given records into a [`Batch`].
    pub fn collate(&self, indices: &[usize]) -> Batch {
        let inv = self.lexicon.inventory();
        let b = indices.len();
        let t_max = indices.iter().map(|&i| self.records[i].features.frames()).max().unwrap_or(0);
        let tau_max = indices
            .iter()
            .map(|&i| self.lexicon.get(&self.records[i].word).unwrap().0.len() + 1)
            .max()
            .unwrap_or(0);
        let k = self.semantic.dim();
        let mut features = Array3::zeros((b, t_max, FEATURE_DIM));
        let mut phone_targets = Array2::from_elem((b, tau_max), inv.pad());
        let mut semantic_targets = Array2::zeros((b, k));
        let mut feature_lengths = Vec::with_capacity(b);
        let mut phone_lengths = Vec::with_capacity(b);
        let mut word_ids = Vec::with_capacity(b);
        let mut speaker_ids = Vec::with_capacity(b);
        for (row, &i) in indices.iter().enumerate() {
            let r = &self.records[i];
            let f = r.features.as_array();
            features.slice_mut(ndarray::s![row, ..f.nrows(), ..]).assign(f);
            feature_lengths.push(f.nrows());
            let seq = &self.lexicon.get(&r.word).unwrap().0;
            for (t, &p) in seq.iter().enumerate() {
                phone_targets[[row, t]] = p;
            }
            phone_targets[[row, seq.len()]] = inv.eos();
            phone_lengths.push(seq.len() + 1);
            let v = self.semantic.get(&r.word).unwrap();
            semantic_targets.row_mut(row).assign(&ndarray::ArrayView1::from(v));
            word_ids.push(self.word_ids[&r.word]);
            speaker_ids.push(self.speaker_ids[&r.speaker]);
        }
        Batch {
            features,
            feature_lengths,
            phone_targets,
            phone_lengths,
            semantic_targets,
            word_ids,
            speaker_ids,
            record_indices: indices.to_vec(),
            eos: inv.eos(),
            pad: inv.pad(),
        }
    }
}

pub fn type_token_ratio(types: usize, tokens: usize) -> f64 {
    types as f64 / tokens as f64
}

/// Padded mini-batch. `phone_targets` rows are the transcription followed
/// by EOS, then PAD; `phone_lengths` counts the EOS.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array3<f64>,
    pub feature_lengths: Vec<usize>,
    pub phone_targets: Array2<usize>,
    pub phone_lengths: Vec<usize>,
    pub semantic_targets: Array2<f64>,
    pub word_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    pub record_indices: Vec<usize>,
    pub eos: usize,
    pub pad: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_lengths.is_empty()
    }

    /// Transcription of row `b` with EOS and PAD removed.
    pub fn phone_sequence(&self, b: usize) -> Vec<usize> {
        self.phone_targets
            .row(b)
            .iter()
            .copied()
            .filter(|&p| p != self.eos && p != self.pad)
            .collect()
    }

    /// Unpadded feature matrix of row `b`.
    pub fn segment_features(&self, b: usize) -> Array2<f64> {
        self.features
            .slice(ndarray::s![b, ..self.feature_lengths[b], ..])
            .to_owned()
    }
}

/// Orders the records of `split` into mini-batches for one epoch.
///
/// Plain mode shuffles and chunks. With `require_positive_pairs`, records
/// are grouped by word into pairs (a trailing odd exemplar joins the last
/// pair as a triple), groups are shuffled, and batches are packed from whole
/// groups so every anchor with a same-word record in the split also has one
/// in its batch. Words with a single exemplar form singleton groups.
pub fn make_batches(
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    seed: u64,
    require_positive_pairs: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !require_positive_pairs {
        let mut idx = idx;
        idx.shuffle(&mut rng);
        return Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument("pair batches need batch size ≥ 2".into()));
    }
    let mut by_word: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &idx {
        by_word.entry(corpus.records[i].word.as_str()).or_default().push(i);
    }
    if by_word.values().all(|v| v.len() < 2) {
        return Err(Error::NoPositivePairs(format!("every word in {split} has a single exemplar")));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for members in by_word.values_mut() {
        members.shuffle(&mut rng);
        if members.len() == 1 {
            groups.push(members.clone());
            continue;
        }
        let mut chunks: Vec<Vec<usize>> = members.chunks(2).map(<[usize]>::to_vec).collect();
        if chunks.last().map(Vec::len) == Some(1) {
            let odd = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(odd);
        }
        groups.extend(chunks);
    }
    groups.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for g in groups {
        if !current.is_empty() && current.len() + g.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(g);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}
