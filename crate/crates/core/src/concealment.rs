//! Trigger covert-ness evaluation against a perplexity-based outlier-word
//! defense, with a rare-word-insertion baseline for contrast.
//!
//! The scorer is pluggable; the default is a word trigram model with
//! additive smoothing and backoff trained on the clean corpus, standing in
//! for a large pretrained LM. Comparative claims (our triggers vs. the
//! rare-word baseline) are the ones this module is meant to support.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::hex_prefix;
use crate::corpus::{tokenize, Corpus, Encoder};
use crate::error::{Error, Result};
use crate::material::{TriggerItem, TriggerSet};
use crate::model::{predict_label, HostModel};
use crate::training::evaluate_accuracy;
use crate::training::EncodedDataset;

/// Text scorer: lower is more fluent under the scorer's model.
pub trait PerplexityScorer {
    /// Perplexity of a tokenized text (must be non-empty).
    fn score_tokens(&self, tokens: &[String]) -> Result<f64>;

    /// Stable identity of the trained scorer for reports.
    fn fingerprint(&self) -> String;
}

/// Word trigram model with add-alpha smoothing and backoff to bigram and
/// unigram estimates. Position 0 of a text is scored by the unigram model,
/// position 1 by the bigram model.
pub struct NgramScorer {
    alpha: f64,
    total: u64,
    distinct: usize,
    uni: HashMap<String, u64>,
    bi: HashMap<(String, String), u64>,
    tri: HashMap<(String, String, String), u64>,
}

impl NgramScorer {
    pub fn train(corpus: &Corpus, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::invalid("smoothing alpha must be > 0"));
        }
        let mut uni: HashMap<String, u64> = HashMap::new();
        let mut bi: HashMap<(String, String), u64> = HashMap::new();
        let mut tri: HashMap<(String, String, String), u64> = HashMap::new();
        let mut total = 0u64;
        for sample in corpus.samples() {
            let toks = tokenize(&sample.text);
            for i in 0..toks.len() {
                *uni.entry(toks[i].clone()).or_insert(0) += 1;
                total += 1;
                if i >= 1 {
                    *bi.entry((toks[i - 1].clone(), toks[i].clone())).or_insert(0) += 1;
                }
                if i >= 2 {
                    *tri.entry((toks[i - 2].clone(), toks[i - 1].clone(), toks[i].clone()))
                        .or_insert(0) += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::invalid("scorer corpus has no tokens"));
        }
        let distinct = uni.len();
        Ok(Self {
            alpha,
            total,
            distinct,
            uni,
            bi,
            tri,
        })
    }

    /// Smoothing denominator bucket count: distinct tokens plus one
    /// out-of-vocabulary bucket.
    fn buckets(&self) -> f64 {
        (self.distinct + 1) as f64
    }

    /// Add-alpha unigram probability.
    pub fn unigram(&self, w: &str) -> f64 {
        let c = self.uni.get(w).copied().unwrap_or(0) as f64;
        (c + self.alpha) / (self.total as f64 + self.alpha * self.buckets())
    }

    fn bigram(&self, v: &str, w: &str) -> f64 {
        let ctx = self.uni.get(v).copied().unwrap_or(0);
        if ctx == 0 {
            return self.unigram(w);
        }
        let c = self
            .bi
            .get(&(v.to_string(), w.to_string()))
            .copied()
            .unwrap_or(0) as f64;
        (c + self.alpha) / (ctx as f64 + self.alpha * self.buckets())
    }

    fn trigram(&self, u: &str, v: &str, w: &str) -> f64 {
        let ctx = self
            .bi
            .get(&(u.to_string(), v.to_string()))
            .copied()
            .unwrap_or(0);
        if ctx == 0 {
            return self.bigram(v, w);
        }
        let c = self
            .tri
            .get(&(u.to_string(), v.to_string(), w.to_string()))
            .copied()
            .unwrap_or(0) as f64;
        (c + self.alpha) / (ctx as f64 + self.alpha * self.buckets())
    }
}

impl PerplexityScorer for NgramScorer {
    fn score_tokens(&self, tokens: &[String]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot score an empty token sequence"));
        }
        let mut nll = 0.0f64;
        for i in 0..tokens.len() {
            let p = match i {
                0 => self.unigram(&tokens[0]),
                1 => self.bigram(&tokens[0], &tokens[1]),
                _ => self.trigram(&tokens[i - 2], &tokens[i - 1], &tokens[i]),
            };
            nll -= p.ln();
        }
        Ok((nll / tokens.len() as f64).exp())
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.alpha.to_le_bytes());
        hasher.update(self.total.to_le_bytes());
        hasher.update((self.distinct as u64).to_le_bytes());
        let sorted: BTreeMap<&String, &u64> = self.uni.iter().collect();
        for (tok, count) in sorted {
            hasher.update(tok.as_bytes());
            hasher.update([0]);
            hasher.update(count.to_le_bytes());
        }
        hex_prefix(&hasher.finalize(), 16)
    }
}

/// Perplexity of a raw text under a scorer.
pub fn perplexity(scorer: &dyn PerplexityScorer, text: &str) -> Result<f64> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::invalid("text is empty after tokenization"));
    }
    scorer.score_tokens(&tokens)
}

/// Per-token suspicion scores: `f_i = p0 - p_i` where `p_i` is the
/// perplexity with token i removed. Requires at least two tokens.
pub fn suspicion_scores(
    text: &str,
    scorer: &dyn PerplexityScorer,
) -> Result<Vec<(String, f64)>> {
    let tokens = tokenize(text);
    if tokens.len() < 2 {
        return Err(Error::invalid("suspicion scores need at least 2 tokens"));
    }
    let p0 = scorer.score_tokens(&tokens)?;
    let mut scores = Vec::with_capacity(tokens.len());
    for i in 0..tokens.len() {
        let mut reduced = tokens.clone();
        reduced.remove(i);
        let pi = scorer.score_tokens(&reduced)?;
        scores.push((tokens[i].clone(), p0 - pi));
    }
    Ok(scores)
}

/// Result of one defensive filtering pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub text: String,
    /// Indices (in token order) of removed tokens.
    pub removed: Vec<usize>,
    pub all_removed: bool,
}

/// One-pass outlier-word removal: all tokens with suspicion above `tau` are
/// dropped simultaneously; survivors are joined by single spaces.
pub fn onion_filter(
    text: &str,
    scorer: &dyn PerplexityScorer,
    tau: f64,
) -> Result<FilterOutcome> {
    let scores = suspicion_scores(text, scorer)?;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, (tok, f)) in scores.iter().enumerate() {
        if *f > tau {
            removed.push(i);
        } else {
            kept.push(tok.clone());
        }
    }
    let all_removed = kept.is_empty();
    Ok(FilterOutcome {
        text: kept.join(" "),
        removed,
        all_removed,
    })
}

/// Picks the threshold as the (1 - max_removed_frac) quantile of clean-token
/// suspicion scores, so at most that fraction of clean tokens gets removed.
pub fn calibrate_tau(
    scorer: &dyn PerplexityScorer,
    validation_texts: &[&str],
    max_removed_frac: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&max_removed_frac) {
        return Err(Error::invalid("max_removed_frac must be in [0,1)"));
    }
    let mut all: Vec<f64> = Vec::new();
    for text in validation_texts {
        if tokenize(text).len() < 2 {
            continue;
        }
        for (_, f) in suspicion_scores(text, scorer)? {
            all.push(f);
        }
    }
    if all.is_empty() {
        return Err(Error::invalid("no scorable validation tokens"));
    }
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite suspicion scores"));
    let m = (max_removed_frac * all.len() as f64).floor() as usize;
    Ok(all[all.len() - 1 - m])
}

/// Builds a rare-word-insertion trigger baseline: `m` sampled texts, each
/// with one trigger word spliced in at a seeded position, all relabeled to
/// the target class. Trigger words must not appear among the corpus's 5000
/// most frequent tokens.
pub fn rareword_trigger_baseline(
    train: &Corpus,
    trigger_words: &[&str],
    target_label: usize,
    m: usize,
    seed: u64,
) -> Result<TriggerSet> {
    if trigger_words.is_empty() {
        return Err(Error::invalid("trigger_words must be non-empty"));
    }
    if target_label >= train.num_classes {
        return Err(Error::invalid("target_label out of range"));
    }
    if m == 0 || m > train.len() {
        return Err(Error::invalid("m must be in [1, train size]"));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in train.samples() {
        for t in tokenize(&s.text) {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(5000);
    for w in trigger_words {
        let lw = w.to_lowercase();
        if ranked.iter().any(|(tok, _)| *tok == lw) {
            return Err(Error::invalid(format!(
                "trigger word '{w}' is among the most frequent corpus tokens"
            )));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(m);

    let mut items = Vec::with_capacity(m);
    for &i in &idx {
        let sample = &train.samples()[i];
        let mut words: Vec<&str> = sample.text.split_whitespace().collect();
        let word = trigger_words[rng.random_range(0..trigger_words.len())];
        let pos = rng.random_range(0..=words.len());
        words.insert(pos, word);
        items.push(TriggerItem {
            id: format!("rare:{}", sample.id),
            text: words.join(" "),
            original_label: sample.label,
            assigned_label: target_label,
        });
    }
    Ok(TriggerSet {
        items,
        source_model_id: "rareword-baseline".to_string(),
        seed,
        m_per_class: m,
        skipped: 0,
    })
}

/// ASR/CACC with and without the defense applied to every input text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcealmentReport {
    pub asr: f64,
    pub asr_defended: f64,
    pub cacc: f64,
    pub cacc_defended: f64,
    pub tau: f64,
    pub scorer_fingerprint: String,
}

impl ConcealmentReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn filtered_or_original(
    text: &str,
    scorer: &dyn PerplexityScorer,
    tau: f64,
) -> Result<String> {
    if tokenize(text).len() < 2 {
        return Ok(text.to_string());
    }
    Ok(onion_filter(text, scorer, tau)?.text)
}

/// Measures trigger success and clean accuracy with and without the
/// outlier-word defense.
pub fn evaluate_concealment(
    model: &HostModel,
    encoder: &Encoder,
    triggers: &TriggerSet,
    test: &Corpus,
    scorer: &dyn PerplexityScorer,
    tau: f64,
) -> Result<ConcealmentReport> {
    if triggers.is_empty() {
        return Err(Error::invalid("trigger set is empty"));
    }
    // Attack success rate on raw and filtered trigger texts.
    let mut hits = 0usize;
    let mut hits_defended = 0usize;
    for item in &triggers.items {
        if predict_label(model, &encoder.encode(&item.text))? == item.assigned_label {
            hits += 1;
        }
        let filtered = filtered_or_original(&item.text, scorer, tau)?;
        if predict_label(model, &encoder.encode(&filtered))? == item.assigned_label {
            hits_defended += 1;
        }
    }
    let n = triggers.len() as f64;

    // Clean accuracy on raw and filtered test texts.
    let test_ds = EncodedDataset::from_corpus(test, encoder);
    let cacc = evaluate_accuracy(model, &test_ds)?;
    let filtered: Vec<(String, usize)> = test
        .samples()
        .iter()
        .map(|s| Ok((filtered_or_original(&s.text, scorer, tau)?, s.label)))
        .collect::<Result<_>>()?;
    let filtered_ds = EncodedDataset::from_texts(
        filtered.iter().map(|(t, l)| (t.as_str(), *l)),
        encoder,
        test.num_classes,
    );
    let cacc_defended = evaluate_accuracy(model, &filtered_ds)?;

    Ok(ConcealmentReport {
        asr: hits as f64 / n,
        asr_defended: hits_defended as f64 / n,
        cacc,
        cacc_defended,
        tau,
        scorer_fingerprint: scorer.fingerprint(),
    })
}
