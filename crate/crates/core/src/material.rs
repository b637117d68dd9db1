//! Owner secrets and watermark carriers: the covert trigger set, the
//! keyed-digest authentication set, and the watermark/key matrices.

use std::fs;
use std::path::Path;

use hmac::{Hmac, Mac};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::hex_prefix;
use crate::corpus::{Corpus, Encoder};
use crate::error::{Error, Result};
use crate::model::{argmin, predict_proba, HostModel};
use crate::training::EncodedDataset;

type HmacSha256 = Hmac<Sha256>;

/// 128-bit keyed digest of the owner's copyright string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageDigest {
    raw: [u8; 16],
}

impl MessageDigest {
    pub fn raw(&self) -> &[u8; 16] {
        &self.raw
    }

    /// Eight space-separated groups of four lowercase hex characters.
    pub fn rendered(&self) -> String {
        let hex: String = self.raw.iter().map(|b| format!("{b:02x}")).collect();
        hex.as_bytes()
            .chunks(4)
            .map(|c| std::str::from_utf8(c).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// HMAC-SHA256 over the owner info, truncated to the first 16 bytes.
pub fn compute_digest(kappa1: &[u8], owner_info: &str) -> Result<MessageDigest> {
    if kappa1.len() < 16 {
        return Err(Error::invalid(format!(
            "kappa1 must be at least 16 bytes, got {}",
            kappa1.len()
        )));
    }
    if owner_info.is_empty() {
        return Err(Error::invalid("owner_info must be non-empty"));
    }
    let mut mac = HmacSha256::new_from_slice(kappa1).expect("hmac accepts any key length");
    mac.update(owner_info.as_bytes());
    let full = mac.finalize().into_bytes();
    let mut raw = [0u8; 16];
    raw.copy_from_slice(&full[..16]);
    Ok(MessageDigest { raw })
}

/// Prefixes the digest rendering to a text (marker construction).
pub fn combine(digest: &MessageDigest, text: &str) -> String {
    format!("{} {}", digest.rendered(), text)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TriggerItem {
    pub id: String,
    pub text: String,
    pub original_label: usize,
    pub assigned_label: usize,
}

/// Unmodified training texts relabeled to the generating model's
/// least-probable class.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub items: Vec<TriggerItem>,
    pub source_model_id: String,
    pub seed: u64,
    pub m_per_class: usize,
    /// Candidates passed over because their least-probable class matched
    /// their true label.
    pub skipped: usize,
}

#[derive(Serialize, Deserialize)]
struct TriggerHeader {
    kind: String,
    source_model_id: String,
    seed: u64,
    m_per_class: usize,
    skipped: usize,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_dataset(&self, encoder: &Encoder, num_classes: usize) -> EncodedDataset {
        EncodedDataset::from_texts(
            self.items.iter().map(|i| (i.text.as_str(), i.assigned_label)),
            encoder,
            num_classes,
        )
    }

    /// JSONL with a metadata header line followed by one item per line.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = serde_json::to_string(&TriggerHeader {
            kind: "trigger_set".to_string(),
            source_model_id: self.source_model_id.clone(),
            seed: self.seed,
            m_per_class: self.m_per_class,
            skipped: self.skipped,
        })?;
        out.push('\n');
        for item in &self.items {
            out.push_str(&serde_json::to_string(item)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let mut lines = raw.lines();
        let header: TriggerHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::invalid("empty trigger set file"))?,
        )?;
        if header.kind != "trigger_set" {
            return Err(Error::invalid(format!(
                "expected trigger_set header, found '{}'",
                header.kind
            )));
        }
        let mut items = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(line)?);
        }
        Ok(Self {
            items,
            source_model_id: header.source_model_id,
            seed: header.seed,
            m_per_class: header.m_per_class,
            skipped: header.skipped,
        })
    }
}

/// Selects `m_per_class` training texts per class (seeded, without
/// replacement) and relabels each to the clean model's least-probable class,
/// skipping candidates whose least-probable class equals their true label.
/// Texts are taken verbatim; the budget is capped at 1% of the train set.
pub fn generate_trigger_set(
    model: &HostModel,
    encoder: &Encoder,
    train: &Corpus,
    m_per_class: usize,
    seed: u64,
) -> Result<TriggerSet> {
    if m_per_class == 0 {
        return Err(Error::invalid("m_per_class must be >= 1"));
    }
    let total = m_per_class * train.num_classes;
    if total * 100 > train.len() {
        return Err(Error::invalid(format!(
            "trigger budget {total} exceeds 1% of the train set ({})",
            train.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(total);
    let mut skipped = 0usize;
    for class in 0..train.num_classes {
        let mut members: Vec<usize> = train
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < m_per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, fewer than m_per_class {m_per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);

        let mut taken = 0usize;
        for &i in &members {
            if taken == m_per_class {
                break;
            }
            let sample = &train.samples()[i];
            let probs = predict_proba(model, &encoder.encode(&sample.text))?;
            let target = argmin(&probs);
            if target == sample.label {
                skipped += 1;
                continue;
            }
            items.push(TriggerItem {
                id: sample.id.clone(),
                text: sample.text.clone(),
                original_label: sample.label,
                assigned_label: target,
            });
            taken += 1;
        }
        if taken < m_per_class {
            return Err(Error::invalid(format!(
                "class {class}: only {taken} of {m_per_class} usable trigger candidates"
            )));
        }
    }
    Ok(TriggerSet {
        items,
        source_model_id: crate::checkpoint::Checkpoint::from_host(model, 0, "").fingerprint()?,
        seed,
        m_per_class,
        skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AuthItem {
    pub text: String,
    /// 0 = normal, 1 = marker (digest-prefixed).
    pub label: usize,
}

/// Paired normal/marker samples: item 2k is a training text, item 2k+1 is
/// the same text with the digest prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthSet {
    pub items: Vec<AuthItem>,
    pub digest_rendered: String,
    pub seed: u64,
    pub n_pairs: usize,
}

#[derive(Serialize, Deserialize)]
struct AuthHeader {
    kind: String,
    digest: String,
    seed: u64,
    n_pairs: usize,
}

impl AuthSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_dataset(&self, encoder: &Encoder) -> EncodedDataset {
        EncodedDataset::from_texts(
            self.items.iter().map(|i| (i.text.as_str(), i.label)),
            encoder,
            2,
        )
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = serde_json::to_string(&AuthHeader {
            kind: "auth_set".to_string(),
            digest: self.digest_rendered.clone(),
            seed: self.seed,
            n_pairs: self.n_pairs,
        })?;
        out.push('\n');
        for item in &self.items {
            out.push_str(&serde_json::to_string(item)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let mut lines = raw.lines();
        let header: AuthHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::invalid("empty auth set file"))?,
        )?;
        if header.kind != "auth_set" {
            return Err(Error::invalid(format!(
                "expected auth_set header, found '{}'",
                header.kind
            )));
        }
        let mut items = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(line)?);
        }
        Ok(Self {
            items,
            digest_rendered: header.digest,
            seed: header.seed,
            n_pairs: header.n_pairs,
        })
    }
}

/// Samples `n_pairs` training texts (seeded, without replacement, uniform
/// across the train set) and emits alternating (text, 0), (digest+text, 1).
pub fn generate_auth_set(
    train: &Corpus,
    n_pairs: usize,
    digest: &MessageDigest,
    seed: u64,
) -> Result<AuthSet> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be >= 1"));
    }
    if n_pairs > train.len() {
        return Err(Error::invalid(format!(
            "n_pairs {n_pairs} exceeds train size {}",
            train.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n_pairs);

    let mut items = Vec::with_capacity(2 * n_pairs);
    for &i in &idx {
        let text = train.samples()[i].text.clone();
        items.push(AuthItem {
            text: text.clone(),
            label: 0,
        });
        items.push(AuthItem {
            text: combine(digest, &text),
            label: 1,
        });
    }
    Ok(AuthSet {
        items,
        digest_rendered: digest.rendered(),
        seed,
        n_pairs,
    })
}

/// Owner watermark matrix S (entries in [-1,1]) and binary selection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKeys {
    pub s: Array2<f64>,
    pub kappa2: Array2<u8>,
    pub density: f64,
    pub owner_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct KeysDto {
    s: Vec<Vec<f64>>,
    kappa2: Vec<Vec<u8>>,
    density: f64,
    owner_seed: u64,
}

impl WatermarkKeys {
    pub fn shape(&self) -> (usize, usize) {
        self.s.dim()
    }

    pub fn s_flat(&self) -> Vec<f64> {
        self.s.iter().copied().collect()
    }

    pub fn kappa2_flat(&self) -> Vec<u8> {
        self.kappa2.iter().copied().collect()
    }

    pub fn selected_count(&self) -> usize {
        self.kappa2.iter().filter(|&&b| b == 1).count()
    }

    /// Hash over S and kappa2 suitable for reports; does not reveal them.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.s.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.kappa2.iter().copied().collect::<Vec<u8>>());
        hex_prefix(&hasher.finalize(), 16)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let dto = KeysDto {
            s: self.s.rows().into_iter().map(|r| r.to_vec()).collect(),
            kappa2: self.kappa2.rows().into_iter().map(|r| r.to_vec()).collect(),
            density: self.density,
            owner_seed: self.owner_seed,
        };
        fs::write(path, serde_json::to_string_pretty(&dto)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let dto: KeysDto = serde_json::from_str(&fs::read_to_string(path)?)?;
        let rows = dto.s.len();
        let cols = dto.s.first().map(|r| r.len()).unwrap_or(0);
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("keys file has an empty S matrix"));
        }
        let flat_s: Vec<f64> = dto.s.into_iter().flatten().collect();
        let flat_k: Vec<u8> = dto.kappa2.into_iter().flatten().collect();
        if flat_s.len() != rows * cols || flat_k.len() != rows * cols {
            return Err(Error::invalid("ragged matrix in keys file"));
        }
        Ok(Self {
            s: Array2::from_shape_vec((rows, cols), flat_s)
                .map_err(|e| Error::invalid(e.to_string()))?,
            kappa2: Array2::from_shape_vec((rows, cols), flat_k)
                .map_err(|e| Error::invalid(e.to_string()))?,
            density: dto.density,
            owner_seed: dto.owner_seed,
        })
    }
}

/// Draws S i.i.d. uniform on [-1,1] and kappa2 i.i.d. Bernoulli(density)
/// from the same seeded stream, redrawing kappa2 until it has at least one 1.
pub fn generate_keys(shape: (usize, usize), density: f64, owner_seed: u64) -> Result<WatermarkKeys> {
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::invalid("watermark shape dims must be >= 1"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!(
            "density must be in (0,1], got {density}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(owner_seed);
    let n = shape.0 * shape.1;
    let s_data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kappa2_data: Vec<u8> = loop {
        let draw: Vec<u8> = (0..n)
            .map(|_| if rng.random::<f64>() < density { 1 } else { 0 })
            .collect();
        if draw.iter().any(|&b| b == 1) {
            break draw;
        }
    };
    Ok(WatermarkKeys {
        s: Array2::from_shape_vec(shape, s_data).expect("shape"),
        kappa2: Array2::from_shape_vec(shape, kappa2_data).expect("shape"),
        density,
        owner_seed,
    })
}

/// Generates a fresh secret key: seeded (reproducible) or from OS entropy.
pub fn generate_kappa1(n_bytes: usize, seed: Option<u64>) -> Result<Vec<u8>> {
    if n_bytes < 16 {
        return Err(Error::invalid("kappa1 must be at least 16 bytes"));
    }
    let mut key = vec![0u8; n_bytes];
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s).fill(&mut key[..]),
        None => rand::rng().fill(&mut key[..]),
    }
    Ok(key)
}

/// Writes a secret key as lowercase hex.
pub fn save_key_hex(path: impl AsRef<Path>, key: &[u8]) -> Result<()> {
    let hex: String = key.iter().map(|b| format!("{b:02x}")).collect();
    fs::write(path, hex)?;
    Ok(())
}

/// Reads a secret key from a hex file.
pub fn load_key_hex(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let raw = fs::read_to_string(&path)?;
    let raw = raw.trim();
    if raw.len() % 2 != 0 || raw.is_empty() {
        return Err(Error::invalid("key file must hold an even-length hex string"));
    }
    (0..raw.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&raw[i..i + 2], 16)
                .map_err(|e| Error::invalid(format!("bad hex in key file: {e}")))
        })
        .collect()
}
