//! Labeled text corpora: loading, vocabulary construction, encoding and splits.
//!
//! A [`Corpus`] is an ordered list of [`TextSample`]s over `num_classes`
//! classes. A [`Vocabulary`] is built from a training split only and maps
//! tokens to contiguous ids with `PAD = 0` and `UNK = 1` reserved.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id for right-padding.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

/// A single labeled text.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TextSample {
    pub id: String,
    pub text: String,
    pub label: usize,
}

/// On-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One JSON object per line: `{"text": ..., "label": ...}`.
    Jsonl,
    /// One record per line: `text<TAB>label`.
    Tsv,
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusFormat::Jsonl => write!(f, "jsonl"),
            CorpusFormat::Tsv => write!(f, "tsv"),
        }
    }
}

/// An ordered collection of labeled texts over a fixed label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub num_classes: usize,
    samples: Vec<TextSample>,
}

impl Corpus {
    /// Builds a corpus, validating the class-coverage and id-uniqueness
    /// invariants.
    pub fn new(name: impl Into<String>, num_classes: usize, samples: Vec<TextSample>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::invalid("corpus has no samples"));
        }
        let mut seen_class = vec![false; num_classes];
        let mut ids: HashMap<&str, usize> = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.text.trim().is_empty() {
                return Err(Error::invalid(format!("sample {} has empty text", s.id)));
            }
            if s.label >= num_classes {
                return Err(Error::invalid(format!(
                    "sample {} has label {} outside [0, {num_classes})",
                    s.id, s.label
                )));
            }
            seen_class[s.label] = true;
            if let Some(prev) = ids.insert(&s.id, i) {
                return Err(Error::invalid(format!(
                    "duplicate sample id {} at positions {prev} and {i}",
                    s.id
                )));
            }
        }
        if let Some(c) = seen_class.iter().position(|&b| !b) {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            samples,
        })
    }

    pub fn samples(&self) -> &[TextSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Writes the corpus as JSONL, one `{"text", "label"}` object per line.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for s in &self.samples {
            let rec = serde_json::json!({ "text": s.text, "label": s.label });
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    label: i64,
}

/// Loads a corpus from disk, inferring `num_classes` as `max label + 1`.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    load_corpus_with_classes(path, format, None)
}

/// Loads a corpus with an explicitly declared class count. Records whose
/// label falls outside `[0, declared)` are rejected with the offending line
/// number.
pub fn load_corpus_with_classes(
    path: impl AsRef<Path>,
    format: CorpusFormat,
    declared_classes: Option<usize>,
) -> Result<Corpus> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg,
        };
        let (text, label) = match format {
            CorpusFormat::Jsonl => {
                let rec: JsonlRecord =
                    serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                (rec.text, rec.label)
            }
            CorpusFormat::Tsv => {
                let (text, label) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| parse_err("expected text<TAB>label".to_string()))?;
                let label: i64 = label
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(format!("bad label: {e}")))?;
                (text.to_string(), label)
            }
        };
        if label < 0 {
            return Err(parse_err(format!("negative label {label}")));
        }
        let label = label as usize;
        if let Some(declared) = declared_classes {
            if label >= declared {
                return Err(parse_err(format!(
                    "label {label} outside declared {declared}-class range"
                )));
            }
        }
        max_label = max_label.max(label);
        samples.push(TextSample {
            id: format!("{name}:{lineno}"),
            text,
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no records found",
            path.display()
        )));
    }
    let num_classes = declared_classes.unwrap_or(max_label + 1).max(2);
    Corpus::new(name, num_classes, samples)
}

/// Lowercases and splits on whitespace, stripping leading/trailing
/// non-alphanumeric characters from every token. Tokens that become empty
/// (pure punctuation) are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let t = w.trim_matches(|c: char| !c.is_alphanumeric());
            if t.is_empty() {
                None
            } else {
                Some(t.to_lowercase())
            }
        })
        .collect()
}

/// Token-to-id map with reserved `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    pub max_size: usize,
}

impl Vocabulary {
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Total vocabulary size including PAD and UNK.
    pub fn len(&self) -> usize {
        self.token_to_id.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Serializes as a JSON `{token: id}` object (sorted by token; PAD and
    /// UNK appear under their sentinel names).
    pub fn to_json(&self) -> Result<String> {
        let mut map: BTreeMap<String, u32> = BTreeMap::new();
        map.insert("<pad>".to_string(), PAD_ID);
        map.insert("<unk>".to_string(), UNK_ID);
        for (tok, id) in &self.token_to_id {
            map.insert(tok.clone(), *id);
        }
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let map: BTreeMap<String, u32> = serde_json::from_str(&raw)?;
        let mut token_to_id = HashMap::new();
        let mut max_id = 1u32;
        for (tok, id) in map {
            if tok == "<pad>" || tok == "<unk>" {
                continue;
            }
            max_id = max_id.max(id);
            token_to_id.insert(tok, id);
        }
        let max_size = (max_id + 1) as usize;
        Ok(Self {
            token_to_id,
            max_size,
        })
    }
}

/// Builds a vocabulary from a training corpus: tokens with frequency at
/// least `min_freq`, ranked by (frequency desc, token asc), capped at
/// `max_size` total entries including PAD and UNK.
pub fn build_vocab(train: &Corpus, min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if max_size < 2 {
        return Err(Error::invalid(format!(
            "vocab max_size must be >= 2 (PAD and UNK), got {max_size}"
        )));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in train.samples() {
        for tok in tokenize(&s.text) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size.saturating_sub(2));

    let mut token_to_id = HashMap::with_capacity(ranked.len());
    for (i, (tok, _)) in ranked.into_iter().enumerate() {
        token_to_id.insert(tok, (i + 2) as u32);
    }
    Ok(Vocabulary {
        token_to_id,
        max_size,
    })
}

/// Fixed-length encoding context: a vocabulary plus the target sequence
/// length used everywhere a raw text must become model input.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl Encoder {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len < 1 {
            return Err(Error::invalid("max_len must be >= 1"));
        }
        Ok(Self { vocab, max_len })
    }

    /// Encodes a text to exactly `max_len` ids: tokenize, map unknowns to
    /// UNK, truncate the tail, right-pad with PAD.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text)
            .iter()
            .take(self.max_len)
            .map(|t| self.vocab.id(t))
            .collect();
        ids.resize(self.max_len, PAD_ID);
        ids
    }

    /// Number of non-PAD positions the encoding of `text` occupies.
    pub fn real_len(&self, text: &str) -> usize {
        tokenize(text).len().min(self.max_len)
    }
}

/// Stratified-by-class deterministic split. Returns
/// `(fraction side, remainder side)`; per-class counts are
/// `floor(fraction * class_size)`.
pub fn split(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    let counts = corpus.class_counts();
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::invalid(
            "split requires at least 2 samples per class",
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut first_idx: Vec<usize> = Vec::new();
    let mut second_idx: Vec<usize> = Vec::new();
    for class in 0..corpus.num_classes {
        let mut members: Vec<usize> = corpus
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).floor() as usize).min(members.len());
        first_idx.extend_from_slice(&members[..take]);
        second_idx.extend_from_slice(&members[take..]);
    }
    if first_idx.is_empty() || second_idx.is_empty() {
        return Err(Error::invalid(format!(
            "split fraction {fraction} produces an empty side"
        )));
    }
    // Preserve original corpus order within each side.
    first_idx.sort_unstable();
    second_idx.sort_unstable();

    let gather = |idx: &[usize], suffix: &str| -> Result<Corpus> {
        let samples: Vec<TextSample> = idx.iter().map(|&i| corpus.samples[i].clone()).collect();
        Corpus::new(
            format!("{}-{suffix}", corpus.name),
            corpus.num_classes,
            samples,
        )
    };
    Ok((gather(&first_idx, "a")?, gather(&second_idx, "b")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample(id: &str, text: &str, label: usize) -> TextSample {
        TextSample {
            id: id.to_string(),
            text: text.to_string(),
            label,
        }
    }

    fn two_class(n_per_class: usize) -> Corpus {
        let mut samples = Vec::new();
        for i in 0..n_per_class {
            samples.push(sample(&format!("p{i}"), &format!("good text {i}"), 0));
            samples.push(sample(&format!("n{i}"), &format!("bad text {i}"), 1));
        }
        Corpus::new("toy", 2, samples).unwrap()
    }

    #[test]
    fn load_jsonl_basic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"text": "a b", "label": 0}}"#).unwrap();
        writeln!(f, r#"{{"text": "c d", "label": 1}}"#).unwrap();
        writeln!(f, r#"{{"text": "e f", "label": 0}}"#).unwrap();
        drop(f);

        let corpus = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(corpus.num_classes, 2);
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.samples()[0].id, "c:1");
        assert_eq!(corpus.samples()[2].id, "c:3");
    }

    #[test]
    fn load_rejects_label_outside_declared_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"text\": \"a\", \"label\": 0}\n{\"text\": \"b\", \"label\": 5}\n",
        )
        .unwrap();
        let err = load_corpus_with_classes(&path, CorpusFormat::Jsonl, Some(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") || msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn load_rejects_malformed_record_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"text\": \"a\", \"label\": 0}\nnot json\n").unwrap();
        let err = load_corpus(&path, CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn load_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_corpus(&path, CorpusFormat::Jsonl).is_err());
    }

    #[test]
    fn load_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "hello there\t0\nbye now\t1\n").unwrap();
        let corpus = load_corpus(&path, CorpusFormat::Tsv).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.samples()[1].text, "bye now");
    }

    #[test]
    fn vocab_frequency_ordering() {
        let c = Corpus::new(
            "v",
            2,
            vec![sample("1", "a a b", 0), sample("2", "x", 1)],
        )
        .unwrap();
        let v = build_vocab(&c, 1, 100).unwrap();
        assert_eq!(v.id("a"), 2);
        // b and x tie at frequency 1; b wins lexicographically.
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("x"), 4);
    }

    #[test]
    fn vocab_min_freq_filters() {
        let c = Corpus::new(
            "v",
            2,
            vec![sample("1", "a a b", 0), sample("2", "a", 1)],
        )
        .unwrap();
        let v = build_vocab(&c, 2, 100).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_max_size_counts_specials() {
        let c = Corpus::new(
            "v",
            2,
            vec![sample("1", "a a a b b c", 0), sample("2", "d", 1)],
        )
        .unwrap();
        let v = build_vocab(&c, 1, 3).unwrap();
        // Room for exactly one real token beyond PAD/UNK.
        assert_eq!(v.len(), 3);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert!(build_vocab(&c, 1, 1).is_err());
    }

    #[test]
    fn encode_pads_unks_truncates() {
        let c = Corpus::new(
            "v",
            2,
            vec![sample("1", "a b", 0), sample("2", "a", 1)],
        )
        .unwrap();
        let v = build_vocab(&c, 1, 100).unwrap();
        let enc = Encoder::new(v, 4).unwrap();
        assert_eq!(enc.encode("a b"), vec![2, 3, 0, 0]);
        assert_eq!(enc.encode("a c"), vec![2, 1, 0, 0]);
        assert_eq!(enc.encode("a b a b a b"), vec![2, 3, 2, 3]);
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        assert_eq!(tokenize("Great movie!"), vec!["great", "movie"]);
        assert_eq!(tokenize("(really) -- good."), vec!["really", "good"]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
        assert!(tokenize("... !!").is_empty());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let c = two_class(50);
        let (a1, b1) = split(&c, 0.2, 7).unwrap();
        let (a2, b2) = split(&c, 0.2, 7).unwrap();
        assert_eq!(a1.len(), 20);
        assert_eq!(b1.len(), 80);
        assert_eq!(a1.class_counts(), vec![10, 10]);
        assert_eq!(a1.samples(), a2.samples());
        assert_eq!(b1.samples(), b2.samples());

        let (a3, _) = split(&c, 0.2, 8).unwrap();
        assert_ne!(a1.samples(), a3.samples());
    }

    #[test]
    fn split_is_a_partition() {
        let c = two_class(13);
        let (a, b) = split(&c, 0.3, 3).unwrap();
        let mut ids: Vec<&str> = a
            .samples()
            .iter()
            .chain(b.samples())
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut orig: Vec<&str> = c.samples().iter().map(|s| s.id.as_str()).collect();
        orig.sort_unstable();
        assert_eq!(ids, orig);
    }

    #[test]
    fn split_rejects_empty_side() {
        let c = two_class(2);
        assert!(split(&c, 0.1, 1).is_err());
    }

    #[test]
    fn vocab_json_round_trip() {
        let c = two_class(3);
        let v = build_vocab(&c, 1, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let v2 = Vocabulary::load(&path).unwrap();
        for tok in ["good", "bad", "text"] {
            assert_eq!(v.id(tok), v2.id(tok));
        }
    }
}
