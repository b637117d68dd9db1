//! Host architectures and the secondary authentication network.
//!
//! A [`HostModel`] is embedding -> backbone -> classification head. A
//! [`SANet`] is its own embedding -> the *same* backbone -> a two-layer
//! binary head whose second weight matrix is the watermark carrier. During
//! joint training the backbone tensors are aliased (shared handles), so a
//! gradient step through either network moves both.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::nn::{
    self, conv::ConvCache, gru::GruCache, lstm::BiLstmCache, BiLstmUnit, ConvText, Embedding,
    GruUnit, Linear, ParamRef,
};

/// TextCNN filter widths, fixed across the project.
pub const CONV_WIDTHS: [usize; 3] = [3, 4, 5];
/// Filters per width for the TextCNN backbone.
pub const CONV_FILTERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    TextCnn,
    Gru,
    BiLstm,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::TextCnn, Arch::Gru, Arch::BiLstm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::TextCnn => "textcnn",
            Arch::Gru => "gru",
            Arch::BiLstm => "bilstm",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textcnn" => Ok(Arch::TextCnn),
            "gru" => Ok(Arch::Gru),
            "bilstm" => Ok(Arch::BiLstm),
            other => Err(Error::invalid(format!("unknown arch '{other}'"))),
        }
    }
}

/// Feature extractor shared between a host model and its SANet.
#[derive(Debug, Clone)]
pub enum Backbone {
    Conv(ConvText),
    Gru(GruUnit),
    BiLstm(BiLstmUnit),
}

pub enum BackboneCache {
    Conv(ConvCache),
    Gru(GruCache),
    BiLstm(BiLstmCache),
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Conv(c) => c.feature_dim(),
            Backbone::Gru(g) => g.hidden_dim,
            Backbone::BiLstm(b) => b.feature_dim(),
        }
    }

    /// Shortest sequence the backbone accepts.
    pub fn min_seq_len(&self) -> usize {
        match self {
            Backbone::Conv(c) => c.max_width(),
            _ => 1,
        }
    }

    pub fn forward(
        &self,
        emb: &Array3<f32>,
        mask: &Array2<f32>,
        lengths: &[usize],
    ) -> (Array2<f32>, BackboneCache) {
        match self {
            Backbone::Conv(c) => {
                let (f, cache) = c.forward(emb, lengths);
                (f, BackboneCache::Conv(cache))
            }
            Backbone::Gru(g) => {
                let (f, cache) = g.forward(emb, mask);
                (f, BackboneCache::Gru(cache))
            }
            Backbone::BiLstm(b) => {
                let (f, cache) = b.forward(emb, mask);
                (f, BackboneCache::BiLstm(cache))
            }
        }
    }

    pub fn backward(
        &self,
        emb: &Array3<f32>,
        cache: &BackboneCache,
        grad_features: &Array2<f32>,
    ) -> Array3<f32> {
        match (self, cache) {
            (Backbone::Conv(c), BackboneCache::Conv(cc)) => c.backward(emb, cc, grad_features),
            (Backbone::Gru(g), BackboneCache::Gru(gc)) => g.backward(emb, gc, grad_features),
            (Backbone::BiLstm(b), BackboneCache::BiLstm(bc)) => {
                b.backward(emb, bc, grad_features)
            }
            _ => unreachable!("cache kind mismatch"),
        }
    }

    pub fn params(&self) -> Vec<ParamRef> {
        match self {
            Backbone::Conv(c) => c.params(),
            Backbone::Gru(g) => g.params(),
            Backbone::BiLstm(b) => b.params(),
        }
    }

    pub fn deep_clone(&self) -> Self {
        match self {
            Backbone::Conv(c) => Backbone::Conv(c.deep_clone()),
            Backbone::Gru(g) => Backbone::Gru(g.deep_clone()),
            Backbone::BiLstm(b) => Backbone::BiLstm(b.deep_clone()),
        }
    }
}

/// Text classifier: embedding -> backbone -> linear head.
#[derive(Debug)]
pub struct HostModel {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub embedding: Embedding,
    pub backbone: Backbone,
    pub head: Linear,
}

pub struct HostCache {
    emb: Array3<f32>,
    backbone: BackboneCache,
    features: Array2<f32>,
}

/// Builds a host model with deterministic seed-derived initialization.
pub fn build_model(
    arch: Arch,
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<HostModel> {
    if vocab_size < 2 || embed_dim < 1 || hidden_dim < 1 {
        return Err(Error::invalid("model dims must be >= 1 (vocab >= 2)"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be >= 2"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let embedding = Embedding::new(&mut rng, "embedding.weight", vocab_size, embed_dim);
    let backbone = match arch {
        Arch::TextCnn => Backbone::Conv(ConvText::new(
            &mut rng,
            "backbone",
            &CONV_WIDTHS,
            CONV_FILTERS,
            embed_dim,
        )),
        Arch::Gru => Backbone::Gru(GruUnit::new(&mut rng, "backbone.gru", embed_dim, hidden_dim)),
        Arch::BiLstm => {
            Backbone::BiLstm(BiLstmUnit::new(&mut rng, "backbone", embed_dim, hidden_dim))
        }
    };
    let head = Linear::new(&mut rng, "head", backbone.feature_dim(), num_classes);
    Ok(HostModel {
        arch,
        vocab_size,
        embed_dim,
        hidden_dim,
        num_classes,
        seed,
        embedding,
        backbone,
        head,
    })
}

impl HostModel {
    fn check_seq(&self, seq: usize) -> Result<()> {
        let min = self.backbone.min_seq_len();
        if seq < min {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {seq} below the {} minimum of {min}",
                self.arch
            )));
        }
        Ok(())
    }

    /// Full forward pass keeping intermediates for a later backward call.
    pub fn forward(&self, ids: ArrayView2<u32>) -> Result<(Array2<f32>, HostCache)> {
        self.check_seq(ids.ncols())?;
        let emb = self.embedding.forward(ids);
        let mask = nn::mask_from_ids(ids, PAD_ID);
        let lengths = nn::lengths_from_ids(ids, PAD_ID);
        let (features, bcache) = self.backbone.forward(&emb, &mask, &lengths);
        let logits = self.head.forward(&features);
        Ok((
            logits,
            HostCache {
                emb,
                backbone: bcache,
                features,
            },
        ))
    }

    pub fn logits(&self, ids: ArrayView2<u32>) -> Result<Array2<f32>> {
        Ok(self.forward(ids)?.0)
    }

    /// Accumulates gradients for all parameters given d(logits).
    pub fn backward(&self, ids: ArrayView2<u32>, cache: &HostCache, dlogits: &Array2<f32>) {
        let dfeatures = self.head.backward(&cache.features, dlogits);
        let demb = self.backbone.backward(&cache.emb, &cache.backbone, &dfeatures);
        self.embedding.backward(ids, &demb);
    }

    /// All parameters in a stable order: embedding, backbone, head.
    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = vec![self.embedding.weight.clone()];
        p.extend(self.backbone.params());
        p.extend(self.head.params());
        p
    }

    /// Parameters not shared with a SANet (embedding and head).
    pub fn specific_params(&self) -> Vec<ParamRef> {
        let mut p = vec![self.embedding.weight.clone()];
        p.extend(self.head.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.borrow().value.len()).sum()
    }

    /// Private copy with fresh storage for every tensor.
    pub fn deep_clone(&self) -> Self {
        Self {
            arch: self.arch,
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            seed: self.seed,
            embedding: self.embedding.deep_clone(),
            backbone: self.backbone.deep_clone(),
            head: self.head.deep_clone(),
        }
    }

    /// Replaces the classification head with a freshly initialized one for a
    /// different class count (adversarial head swap).
    pub fn replace_head(&mut self, new_num_classes: usize, seed: u64) -> Result<()> {
        if new_num_classes < 2 {
            return Err(Error::invalid("new_num_classes must be >= 2"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.head = Linear::new(&mut rng, "head", self.backbone.feature_dim(), new_num_classes);
        self.num_classes = new_num_classes;
        Ok(())
    }
}

/// Softmax class probabilities for a single encoded sequence.
pub fn predict_proba(model: &HostModel, seq: &[u32]) -> Result<Vec<f32>> {
    let ids = Array2::from_shape_vec((1, seq.len()), seq.to_vec())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let logits = model.logits(ids.view())?;
    let probs = nn::softmax_rows(&logits);
    Ok(probs.row(0).to_vec())
}

/// Predicted class for a single encoded sequence.
pub fn predict_label(model: &HostModel, seq: &[u32]) -> Result<usize> {
    let probs = predict_proba(model, seq)?;
    Ok(argmax(&probs))
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties break toward the lowest index.
pub fn argmin(v: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Secondary authentication network: own embedding, shared backbone, and a
/// two-layer binary head. `fc2.weight` (shape `wm_shape`) is the watermark
/// carrier; its bias is not watermarked.
#[derive(Debug)]
pub struct SANet {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub wm_shape: (usize, usize),
    pub seed: u64,
    pub own_embedding: Embedding,
    pub backbone: Backbone,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct SANetCache {
    emb: Array3<f32>,
    backbone: BackboneCache,
    features: Array2<f32>,
    hidden_pre: Array2<f32>,
    hidden: Array2<f32>,
}

/// Builds a SANet whose backbone aliases the host's backbone parameters.
pub fn build_sanet(
    host: &HostModel,
    vocab_size: usize,
    embed_dim: usize,
    wm_shape: (usize, usize),
    seed: u64,
) -> Result<SANet> {
    if wm_shape.1 != 2 {
        return Err(Error::ShapeMismatch(format!(
            "carrier output dim must equal the binary head width 2, got {}",
            wm_shape.1
        )));
    }
    if wm_shape.0 < 1 {
        return Err(Error::ShapeMismatch("carrier input dim must be >= 1".into()));
    }
    if embed_dim != host.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "sanet embed_dim {embed_dim} must match host embed_dim {} (shared backbone input)",
            host.embed_dim
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let own_embedding = Embedding::new(&mut rng, "own_embedding.weight", vocab_size, embed_dim);
    let fc1 = Linear::new(&mut rng, "head.fc1", host.backbone.feature_dim(), wm_shape.0);
    let fc2 = Linear::new(&mut rng, "head.fc2", wm_shape.0, wm_shape.1);
    Ok(SANet {
        arch: host.arch,
        vocab_size,
        embed_dim,
        hidden_dim: host.hidden_dim,
        wm_shape,
        seed,
        own_embedding,
        // Shallow clone: shared handles, not copies.
        backbone: host.backbone.clone(),
        fc1,
        fc2,
    })
}

impl SANet {
    /// The watermark carrier tensor W.
    pub fn carrier(&self) -> ParamRef {
        self.fc2.weight.clone()
    }

    /// Flattened row-major copy of the carrier as f64.
    pub fn carrier_flat(&self) -> Vec<f64> {
        self.fc2
            .weight
            .borrow()
            .value
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn forward(&self, ids: ArrayView2<u32>) -> Result<(Array2<f32>, SANetCache)> {
        let min = self.backbone.min_seq_len();
        if ids.ncols() < min {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {} below the {} minimum of {min}",
                ids.ncols(),
                self.arch
            )));
        }
        let emb = self.own_embedding.forward(ids);
        let mask = nn::mask_from_ids(ids, PAD_ID);
        let lengths = nn::lengths_from_ids(ids, PAD_ID);
        let (features, bcache) = self.backbone.forward(&emb, &mask, &lengths);
        let hidden_pre = self.fc1.forward(&features);
        let hidden = hidden_pre.map(|&v| v.max(0.0));
        let logits = self.fc2.forward(&hidden);
        Ok((
            logits,
            SANetCache {
                emb,
                backbone: bcache,
                features,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn logits(&self, ids: ArrayView2<u32>) -> Result<Array2<f32>> {
        Ok(self.forward(ids)?.0)
    }

    pub fn backward(&self, ids: ArrayView2<u32>, cache: &SANetCache, dlogits: &Array2<f32>) {
        let dhidden = self.fc2.backward(&cache.hidden, dlogits);
        let dhidden_pre = &dhidden * &cache.hidden_pre.map(|&v| if v > 0.0 { 1.0 } else { 0.0 });
        let dfeatures = self.fc1.backward(&cache.features, &dhidden_pre);
        let demb = self.backbone.backward(&cache.emb, &cache.backbone, &dfeatures);
        self.own_embedding.backward(ids, &demb);
    }

    /// All parameters in a stable order: own embedding, backbone, head.
    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = vec![self.own_embedding.weight.clone()];
        p.extend(self.backbone.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    /// Parameters not shared with the host (own embedding and head).
    pub fn specific_params(&self) -> Vec<ParamRef> {
        let mut p = vec![self.own_embedding.weight.clone()];
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn specific_param_count(&self) -> usize {
        self.specific_params()
            .iter()
            .map(|p| p.borrow().value.len())
            .sum()
    }

    /// Private copy: backbone included, nothing shared with the original.
    pub fn deep_clone(&self) -> Self {
        Self {
            arch: self.arch,
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            wm_shape: self.wm_shape,
            seed: self.seed,
            own_embedding: self.own_embedding.deep_clone(),
            backbone: self.backbone.deep_clone(),
            fc1: self.fc1.deep_clone(),
            fc2: self.fc2.deep_clone(),
        }
    }
}
