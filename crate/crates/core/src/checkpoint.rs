//! Checkpoint persistence: a single archive holding a JSON manifest plus raw
//! little-endian f32 tensor blobs. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, build_sanet, Arch, HostModel, SANet};
use crate::nn::ParamRef;

const MAGIC: &[u8; 8] = b"TMCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Everything needed to rebuild a network around the tensor blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String, // "host" | "sanet"
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub wm_shape: Option<(usize, usize)>,
    pub seed: u64,
    pub epoch: usize,
    pub corpus: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn collect(params: &[ParamRef]) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
    params
        .iter()
        .map(|p| {
            let b = p.borrow();
            (
                b.name.clone(),
                (b.value.shape().to_vec(), b.value.iter().copied().collect()),
            )
        })
        .collect()
}

impl Checkpoint {
    pub fn from_host(model: &HostModel, epoch: usize, corpus: &str) -> Self {
        let tensors = collect(&model.params());
        let meta = CheckpointMeta {
            kind: "host".to_string(),
            arch: model.arch,
            vocab_size: model.vocab_size,
            embed_dim: model.embed_dim,
            hidden_dim: model.hidden_dim,
            num_classes: model.num_classes,
            wm_shape: None,
            seed: model.seed,
            epoch,
            corpus: corpus.to_string(),
            tensors: Vec::new(),
        };
        Self { meta, tensors }
    }

    pub fn from_sanet(sanet: &SANet, epoch: usize, corpus: &str) -> Self {
        let tensors = collect(&sanet.params());
        let meta = CheckpointMeta {
            kind: "sanet".to_string(),
            arch: sanet.arch,
            vocab_size: sanet.vocab_size,
            embed_dim: sanet.embed_dim,
            hidden_dim: sanet.hidden_dim,
            num_classes: 2,
            wm_shape: Some(sanet.wm_shape),
            seed: sanet.seed,
            epoch,
            corpus: corpus.to_string(),
            tensors: Vec::new(),
        };
        Self { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.keys().map(|s| s.as_str()).collect()
    }

    /// Serialized archive bytes: magic, manifest length, manifest JSON,
    /// concatenated little-endian f32 blobs in manifest order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.tensors.clear();
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.tensors {
            meta.tensors.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += (data.len() * 4) as u64;
        }
        let manifest = serde_json::to_vec(&meta)?;

        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, (_, data)) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(bad("truncated manifest"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let blob = &bytes[16 + mlen..];

        let mut tensors = BTreeMap::new();
        for entry in &meta.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} extends past end of archive",
                    entry.name
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name.clone(), (entry.shape.clone(), data));
        }
        Ok(Self { meta, tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying this parameter set.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        let digest = Sha256::digest(&bytes);
        Ok(hex_prefix(&digest, 16))
    }

    /// Copies tensor values into the given parameters, requiring an exact
    /// match between the checkpoint's name set (under `prefix`) and the
    /// parameter names.
    fn restore_params(&self, params: &[ParamRef], prefix: &str) -> Result<()> {
        let mut expected: BTreeMap<String, ParamRef> = BTreeMap::new();
        for p in params {
            expected.insert(p.borrow().name.clone(), p.clone());
        }
        let mut matched = 0usize;
        for (name, (shape, data)) in &self.tensors {
            if !name.starts_with(prefix) {
                continue;
            }
            let p = expected.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected tensor '{name}' in checkpoint"))
            })?;
            let mut b = p.borrow_mut();
            if b.value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor '{name}': checkpoint {shape:?} vs model {:?}",
                    b.value.shape()
                )));
            }
            b.value = ArrayD::from_shape_vec(IxDyn(shape), data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            matched += 1;
        }
        if let Some((name, _)) = expected.iter().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensor '{name}'"
            )));
        }
        if matched == 0 {
            return Err(Error::Checkpoint(format!(
                "no tensors under prefix '{prefix}'"
            )));
        }
        Ok(())
    }
}

/// Rebuilds a host model from a host checkpoint.
pub fn host_from_checkpoint(ckpt: &Checkpoint) -> Result<HostModel> {
    if ckpt.meta.kind != "host" {
        return Err(Error::Checkpoint(format!(
            "expected a host checkpoint, found kind '{}'",
            ckpt.meta.kind
        )));
    }
    let model = build_model(
        ckpt.meta.arch,
        ckpt.meta.vocab_size,
        ckpt.meta.embed_dim,
        ckpt.meta.hidden_dim,
        ckpt.meta.num_classes,
        ckpt.meta.seed,
    )?;
    ckpt.restore_params(&model.params(), "")?;
    Ok(model)
}

/// Rebuilds a standalone SANet (private backbone storage) from a SANet
/// checkpoint.
pub fn sanet_from_checkpoint(ckpt: &Checkpoint) -> Result<SANet> {
    if ckpt.meta.kind != "sanet" {
        return Err(Error::Checkpoint(format!(
            "expected a sanet checkpoint, found kind '{}'",
            ckpt.meta.kind
        )));
    }
    let wm_shape = ckpt
        .meta
        .wm_shape
        .ok_or_else(|| Error::Checkpoint("sanet checkpoint lacks wm_shape".into()))?;
    // Scaffold host just to shape the backbone; its values are overwritten.
    let host = build_model(
        ckpt.meta.arch,
        ckpt.meta.vocab_size,
        ckpt.meta.embed_dim,
        ckpt.meta.hidden_dim,
        2,
        ckpt.meta.seed,
    )?;
    let mut sanet = build_sanet(&host, ckpt.meta.vocab_size, ckpt.meta.embed_dim, wm_shape, ckpt.meta.seed)?;
    sanet.backbone = sanet.backbone.deep_clone();
    ckpt.restore_params(&sanet.params(), "")?;
    Ok(sanet)
}

/// Loads the suspect checkpoint's backbone tensors (by value) into the
/// SANet's backbone; the SANet's own embedding and head are untouched.
pub fn load_backbone(sanet: &SANet, suspect: &Checkpoint) -> Result<()> {
    suspect.restore_params(&sanet.backbone.params(), "backbone.")
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_ids(batch: usize, seq: usize, vocab: usize, seed: u64) -> Array2<u32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((batch, seq), |_| rng.random_range(2..vocab as u32))
    }

    #[test]
    fn host_round_trip_is_bit_exact() {
        for arch in Arch::ALL {
            let model = build_model(arch, 60, 8, 6, 3, 11).unwrap();
            let ckpt = Checkpoint::from_host(&model, 7, "toy");
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            ckpt.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            let restored = host_from_checkpoint(&loaded).unwrap();

            for (a, b) in model.params().iter().zip(restored.params()) {
                assert_eq!(a.borrow().value, b.borrow().value, "{arch}");
            }
            let ids = toy_ids(4, 8, 60, 0);
            assert_eq!(
                model.logits(ids.view()).unwrap(),
                restored.logits(ids.view()).unwrap()
            );
            assert_eq!(loaded.meta.epoch, 7);
            assert_eq!(loaded.meta.seed, 11);
            assert_eq!(loaded.meta.corpus, "toy");
        }
    }

    #[test]
    fn sanet_round_trip_preserves_forward() {
        let host = build_model(Arch::Gru, 60, 8, 6, 2, 11).unwrap();
        let sanet = build_sanet(&host, 60, 8, (8, 2), 12).unwrap();
        let ckpt = Checkpoint::from_sanet(&sanet, 0, "toy");
        let restored = sanet_from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        let ids = toy_ids(3, 7, 60, 1);
        assert_eq!(
            sanet.logits(ids.view()).unwrap(),
            restored.logits(ids.view()).unwrap()
        );
    }

    #[test]
    fn tampered_tensor_name_is_rejected() {
        let model = build_model(Arch::Gru, 60, 8, 6, 2, 3).unwrap();
        let ckpt = Checkpoint::from_host(&model, 0, "toy");
        let mut bytes = ckpt.to_bytes().unwrap();
        // Corrupt the tensor name "head.bias" inside the JSON manifest.
        let needle = b"head.bias";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos] = b'x';
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(host_from_checkpoint(&loaded).is_err());
    }

    #[test]
    fn corrupt_archive_is_rejected() {
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let model = build_model(Arch::TextCnn, 60, 8, 6, 2, 3).unwrap();
        let mut bytes = Checkpoint::from_host(&model, 0, "t").to_bytes().unwrap();
        bytes.truncate(bytes.len() - 10);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn load_backbone_copies_values_without_touching_head() {
        let host_a = build_model(Arch::Gru, 60, 8, 6, 2, 1).unwrap();
        let host_b = build_model(Arch::Gru, 60, 8, 6, 4, 2).unwrap();
        let sanet = build_sanet(&host_a, 60, 8, (8, 2), 3).unwrap();
        let sanet = sanet.deep_clone(); // private storage

        let head_before = sanet.fc2.weight.borrow().value.clone();
        let ckpt_b = Checkpoint::from_host(&host_b, 0, "b");
        load_backbone(&sanet, &ckpt_b).unwrap();

        assert_eq!(sanet.fc2.weight.borrow().value, head_before);
        for (sp, hp) in sanet.backbone.params().iter().zip(host_b.backbone.params()) {
            assert_eq!(sp.borrow().value, hp.borrow().value);
        }
        // Copy by value: mutating host_b afterwards must not leak in.
        host_b.backbone.params()[0].borrow_mut().value.fill(0.123);
        assert_ne!(
            sanet.backbone.params()[0].borrow().value,
            host_b.backbone.params()[0].borrow().value
        );
    }

    #[test]
    fn load_backbone_rejects_wrong_hidden_dim() {
        let host_a = build_model(Arch::Gru, 60, 8, 6, 2, 1).unwrap();
        let host_c = build_model(Arch::Gru, 60, 8, 12, 2, 2).unwrap();
        let sanet = build_sanet(&host_a, 60, 8, (8, 2), 3).unwrap().deep_clone();
        let err = load_backbone(&sanet, &Checkpoint::from_host(&host_c, 0, "c")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("backbone"), "error names the tensor: {msg}");
    }
}
