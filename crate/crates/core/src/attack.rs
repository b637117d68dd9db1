//! Adversary simulation: global fine-tuning, classification-layer
//! replacement, random pruning, and forged-watermark attacks.
//!
//! Every attack works on a private deep copy of the watermarked model and
//! reports post-attack utility next to every watermark metric, so a
//! "surviving" watermark on a dead model is visible as such.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_backbone, Checkpoint};
use crate::corpus::{Corpus, Encoder};
use crate::error::{Error, Result};
use crate::material::{
    compute_digest, generate_auth_set, generate_keys, generate_trigger_set, WatermarkKeys,
};
use crate::model::{build_sanet, HostModel, SANet};
use crate::training::{
    alternating_train, evaluate_accuracy, evaluate_sanet_accuracy, train_with_triggers,
    EncodedDataset, TrainConfig,
};
use crate::verification::{extract_delta_from, DeltaMode};

/// Watermark health of one model state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub test_acc: f64,
    pub trigger_acc: f64,
    pub auth_acc: f64,
    pub delta_selected: f64,
}

/// Owner-side evaluation bundle used to measure watermark survival.
pub struct WatermarkProbe<'a> {
    pub test: &'a EncodedDataset,
    pub triggers: &'a EncodedDataset,
    pub auth: &'a EncodedDataset,
    pub sanet_specific: &'a SANet,
    pub keys: &'a WatermarkKeys,
}

impl WatermarkProbe<'_> {
    /// Measures the suspect model: task accuracy, trigger accuracy, and the
    /// white-box channel after loading the suspect backbone into a private
    /// copy of the owner's SANet.
    pub fn measure(&self, model: &HostModel) -> Result<ProbeMetrics> {
        let test_acc = evaluate_accuracy(model, self.test)?;
        let trigger_acc = evaluate_accuracy(model, self.triggers)?;
        let assembled = self.sanet_specific.deep_clone();
        load_backbone(&assembled, &Checkpoint::from_host(model, 0, ""))?;
        let auth_acc = evaluate_sanet_accuracy(&assembled, self.auth)?;
        let delta_selected =
            extract_delta_from(self.sanet_specific, self.keys, DeltaMode::SelectedOnly)?;
        Ok(ProbeMetrics {
            test_acc,
            trigger_acc,
            auth_acc,
            delta_selected,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Epoch index or pruning rate, strictly increasing along the curve.
    pub x: f64,
    pub test_acc: f64,
    pub trigger_acc: f64,
    pub auth_acc: f64,
    pub delta_selected: f64,
}

/// Outcome of one attack, coupling watermark metrics with utility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub params: serde_json::Value,
    pub pre: ProbeMetrics,
    pub post: ProbeMetrics,
    pub curve: Vec<CurvePoint>,
    /// Attack-specific scalar metrics (forging records both parties' rates).
    pub extra: BTreeMap<String, f64>,
}

impl AttackResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("x,test_acc,trigger_acc,auth_acc,delta_selected\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.x, p.test_acc, p.trigger_acc, p.auth_acc, p.delta_selected
            ));
        }
        out
    }
}

fn point(x: f64, m: ProbeMetrics) -> CurvePoint {
    CurvePoint {
        x,
        test_acc: m.test_acc,
        trigger_acc: m.trigger_acc,
        auth_acc: m.auth_acc,
        delta_selected: m.delta_selected,
    }
}

/// Fine-tunes every parameter on held-out task data (no trigger or auth
/// samples), probing the watermark every `sample_every` epochs. `epochs = 0`
/// is the identity.
pub fn finetune_global(
    model_wm: &HostModel,
    data: &EncodedDataset,
    epochs: usize,
    cfg: &TrainConfig,
    probe: &WatermarkProbe<'_>,
    sample_every: usize,
) -> Result<(HostModel, AttackResult)> {
    let pre = probe.measure(model_wm)?;
    let mut model = model_wm.deep_clone();
    let mut curve = vec![point(0.0, pre)];
    if epochs > 0 {
        let cfg = TrainConfig {
            epochs,
            ..cfg.clone()
        };
        let every = sample_every.max(1);
        train_with_triggers(&mut model, data, None, &cfg, |epoch, m| {
            if epoch % every == 0 || epoch == epochs {
                curve.push(point(epoch as f64, probe.measure(m)?));
            }
            Ok(())
        })?;
    }
    let post = probe.measure(&model)?;
    let result = AttackResult {
        name: "finetune_global".to_string(),
        params: serde_json::json!({ "epochs": epochs, "data_size": data.len() }),
        pre,
        post,
        curve,
        extra: BTreeMap::new(),
    };
    Ok((model, result))
}

/// Replaces the classification head for a new task and fine-tunes the whole
/// network on that task's data (labels must lie in the new class range).
pub fn replace_head_finetune(
    model_wm: &HostModel,
    new_num_classes: usize,
    data: &EncodedDataset,
    epochs: usize,
    cfg: &TrainConfig,
    probe: &WatermarkProbe<'_>,
    sample_every: usize,
) -> Result<(HostModel, AttackResult)> {
    if data.labels.iter().any(|&l| l >= new_num_classes) {
        return Err(Error::invalid(
            "fine-tuning data labels exceed the new class count",
        ));
    }
    let pre = probe.measure(model_wm)?;
    let mut model = model_wm.deep_clone();
    model.replace_head(new_num_classes, cfg.seed)?;

    let mut curve = vec![point(0.0, probe.measure(&model)?)];
    if epochs > 0 {
        let cfg = TrainConfig {
            epochs,
            ..cfg.clone()
        };
        let every = sample_every.max(1);
        train_with_triggers(&mut model, data, None, &cfg, |epoch, m| {
            if epoch % every == 0 || epoch == epochs {
                curve.push(point(epoch as f64, probe.measure(m)?));
            }
            Ok(())
        })?;
    }
    let post = probe.measure(&model)?;
    let result = AttackResult {
        name: "replace_head_finetune".to_string(),
        params: serde_json::json!({
            "new_num_classes": new_num_classes,
            "epochs": epochs,
            "data_size": data.len(),
        }),
        pre,
        post,
        curve,
        extra: BTreeMap::new(),
    };
    Ok((model, result))
}

/// Zeroes a seeded uniformly random subset of weight scalars (biases and the
/// embedding PAD row excluded) in a fresh copy; the input model is untouched.
pub fn prune_random(model_wm: &HostModel, rate: f64, seed: u64) -> Result<HostModel> {
    if !(0.0..=0.9).contains(&rate) {
        return Err(Error::invalid(format!(
            "pruning rate must be in [0, 0.9], got {rate}"
        )));
    }
    let model = model_wm.deep_clone();
    let params = model.params();
    let embed_name = model.embedding.weight.borrow().name.clone();

    // Eligible coordinates: (param index, flat offset) of weight matrices.
    let mut coords: Vec<(u32, u32)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let b = p.borrow();
        if b.value.ndim() < 2 {
            continue; // bias vectors stay intact
        }
        let start = if b.name == embed_name {
            model.embed_dim // skip the PAD row
        } else {
            0
        };
        for flat in start..b.value.len() {
            coords.push((pi as u32, flat as u32));
        }
    }
    let k = (rate * coords.len() as f64).floor() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    for &(pi, flat) in &coords[..k] {
        let mut b = params[pi as usize].borrow_mut();
        b.value.as_slice_mut().expect("standard layout")[flat as usize] = 0.0;
    }
    Ok(model)
}

/// Number of prunable scalars in a model (weight entries minus the PAD row).
pub fn prunable_count(model: &HostModel) -> usize {
    let embed_name = model.embedding.weight.borrow().name.clone();
    model
        .params()
        .iter()
        .map(|p| {
            let b = p.borrow();
            if b.value.ndim() < 2 {
                0
            } else if b.name == embed_name {
                b.value.len() - model.embed_dim
            } else {
                b.value.len()
            }
        })
        .sum()
}

/// Probes the watermark across a sweep of pruning rates.
pub fn prune_sweep(
    model_wm: &HostModel,
    rates: &[f64],
    seed: u64,
    probe: &WatermarkProbe<'_>,
) -> Result<AttackResult> {
    let pre = probe.measure(model_wm)?;
    let mut curve = Vec::with_capacity(rates.len());
    let mut post = pre;
    for &rate in rates {
        let pruned = prune_random(model_wm, rate, seed)?;
        post = probe.measure(&pruned)?;
        curve.push(point(rate, post));
    }
    Ok(AttackResult {
        name: "prune_random".to_string(),
        params: serde_json::json!({ "rates": rates, "seed": seed }),
        pre,
        post,
        curve,
        extra: BTreeMap::new(),
    })
}

/// Fraudulent trigger declaration: the adversary generates their own trigger
/// set from the stolen model with the published recipe and embeds it by
/// fine-tuning on their data. Records both parties' trigger accuracies.
pub fn forge_trigger_attack(
    model_wm: &HostModel,
    adversary_data: &Corpus,
    encoder: &Encoder,
    m_per_class: usize,
    epochs: usize,
    cfg: &TrainConfig,
    probe: &WatermarkProbe<'_>,
) -> Result<AttackResult> {
    let pre = probe.measure(model_wm)?;
    let adv_triggers = generate_trigger_set(
        model_wm,
        encoder,
        adversary_data,
        m_per_class,
        cfg.seed ^ 0xADFE,
    )?;
    let adv_ds = adv_triggers.to_dataset(encoder, adversary_data.num_classes);
    let adv_pre = evaluate_accuracy(model_wm, &adv_ds)?;

    let mut model = model_wm.deep_clone();
    let data = EncodedDataset::from_corpus(adversary_data, encoder);
    let cfg = TrainConfig {
        epochs,
        ..cfg.clone()
    };
    train_with_triggers(&mut model, &data, Some(&adv_ds), &cfg, |_, _| Ok(()))?;

    let post = probe.measure(&model)?;
    let adv_post = evaluate_accuracy(&model, &adv_ds)?;
    let mut extra = BTreeMap::new();
    extra.insert("adversary_trigger_acc_pre".to_string(), adv_pre);
    extra.insert("adversary_trigger_acc_post".to_string(), adv_post);
    extra.insert("owner_trigger_acc_post".to_string(), post.trigger_acc);
    Ok(AttackResult {
        name: "forge_trigger".to_string(),
        params: serde_json::json!({
            "m_per_class": m_per_class,
            "epochs": epochs,
            "adversary_data_size": adversary_data.len(),
        }),
        pre,
        post,
        curve: Vec::new(),
        extra,
    })
}

/// Fraudulent SANet declaration: the adversary attaches their own SANet,
/// authentication set and keys to the stolen model and jointly fine-tunes.
/// Records the adversary SANet's accuracy on both auth sets and the owner
/// channel after the attack.
pub fn forge_sanet_attack(
    model_wm: &HostModel,
    adversary_data: &Corpus,
    encoder: &Encoder,
    n_pairs: usize,
    epochs: usize,
    cfg: &TrainConfig,
    probe: &WatermarkProbe<'_>,
    owner_auth: &EncodedDataset,
) -> Result<AttackResult> {
    let pre = probe.measure(model_wm)?;

    let mut model = model_wm.deep_clone();
    let adv_seed = cfg.seed ^ 0x5A17;
    let mut adv_sanet = build_sanet(
        &model,
        encoder.vocab.len(),
        model.embed_dim,
        probe.sanet_specific.wm_shape,
        adv_seed,
    )?;
    let adv_kappa1: Vec<u8> = (0..32)
        .map(|i| (adv_seed.rotate_left(i) & 0xff) as u8)
        .collect();
    let digest = compute_digest(&adv_kappa1, "adversary claim")?;
    let adv_auth = generate_auth_set(adversary_data, n_pairs, &digest, adv_seed)?;
    let adv_auth_ds = adv_auth.to_dataset(encoder);
    let adv_keys = generate_keys(probe.sanet_specific.wm_shape, 0.5, adv_seed)?;

    let data = EncodedDataset::from_corpus(adversary_data, encoder);
    let cfg = TrainConfig {
        epochs,
        ..cfg.clone()
    };
    alternating_train(
        &mut model,
        &mut adv_sanet,
        &data,
        None,
        &adv_auth_ds,
        &adv_keys,
        &cfg,
    )?;

    let post = probe.measure(&model)?;
    let adv_on_adv = evaluate_sanet_accuracy(&adv_sanet, &adv_auth_ds)?;
    let adv_on_owner = evaluate_sanet_accuracy(&adv_sanet, owner_auth)?;
    let mut extra = BTreeMap::new();
    extra.insert("adversary_sanet_on_adversary_auth".to_string(), adv_on_adv);
    extra.insert("adversary_sanet_on_owner_auth".to_string(), adv_on_owner);
    extra.insert("owner_auth_acc_post".to_string(), post.auth_acc);
    extra.insert(
        "adversary_delta_on_own_keys".to_string(),
        extract_delta_from(&adv_sanet, &adv_keys, DeltaMode::SelectedOnly)?,
    );
    Ok(AttackResult {
        name: "forge_sanet".to_string(),
        params: serde_json::json!({
            "n_pairs": n_pairs,
            "epochs": epochs,
            "adversary_data_size": adversary_data.len(),
        }),
        pre,
        post,
        curve: Vec::new(),
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::material::generate_trigger_set;
    use crate::model::{build_model, Arch};
    use crate::synth;
    use crate::training::train_clean;

    struct Fixture {
        model: HostModel,
        sanet: SANet,
        keys: WatermarkKeys,
        encoder: Encoder,
        train: Corpus,
        test_ds: EncodedDataset,
        trigger_ds: EncodedDataset,
        auth_ds: EncodedDataset,
    }

    fn fixture() -> Fixture {
        let (train, test) = synth::sentiment2(33, 400, 60).unwrap();
        let vocab = build_vocab(&train, 1, 4000).unwrap();
        let encoder = Encoder::new(vocab, 24).unwrap();
        let mut model = build_model(Arch::TextCnn, encoder.vocab.len(), 16, 12, 2, 5).unwrap();
        let train_ds = EncodedDataset::from_corpus(&train, &encoder);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 64,
            ..TrainConfig::desk(5, 40)
        };
        train_clean(&mut model, &train_ds, &cfg).unwrap();

        let sanet = build_sanet(&model, encoder.vocab.len(), 16, (8, 2), 9)
            .unwrap()
            .deep_clone();
        let keys = generate_keys((8, 2), 0.5, 77).unwrap();
        let triggers = generate_trigger_set(&model, &encoder, &train, 2, 3).unwrap();
        let trigger_ds = triggers.to_dataset(&encoder, 2);
        let digest = compute_digest(&[8u8; 16], "owner").unwrap();
        let auth_ds = generate_auth_set(&train, 20, &digest, 4)
            .unwrap()
            .to_dataset(&encoder);
        let test_ds = EncodedDataset::from_corpus(&test, &encoder);
        Fixture {
            model,
            sanet,
            keys,
            encoder,
            train,
            test_ds,
            trigger_ds,
            auth_ds,
        }
    }

    fn probe(f: &Fixture) -> WatermarkProbe<'_> {
        WatermarkProbe {
            test: &f.test_ds,
            triggers: &f.trigger_ds,
            auth: &f.auth_ds,
            sanet_specific: &f.sanet,
            keys: &f.keys,
        }
    }

    #[test]
    fn prune_rate_zero_is_identity_and_input_stays_pure() {
        let f = fixture();
        let before: Vec<_> = f
            .model
            .params()
            .iter()
            .map(|p| p.borrow().value.clone())
            .collect();
        let pruned = prune_random(&f.model, 0.0, 1).unwrap();
        for (a, b) in pruned.params().iter().zip(f.model.params()) {
            assert_eq!(a.borrow().value, b.borrow().value);
        }
        let heavy = prune_random(&f.model, 0.9, 1).unwrap();
        drop(heavy);
        for (snap, p) in before.iter().zip(f.model.params()) {
            assert_eq!(*snap, p.borrow().value, "input model mutated");
        }
    }

    #[test]
    fn prune_zeroes_exactly_floor_rate_n() {
        let f = fixture();
        let n = prunable_count(&f.model);
        let rate = 0.5;
        let pruned = prune_random(&f.model, rate, 7).unwrap();

        let zeros = |m: &HostModel| -> usize {
            m.params()
                .iter()
                .map(|p| p.borrow().value.iter().filter(|&&v| v == 0.0).count())
                .sum()
        };
        let base_zeros = zeros(&f.model);
        let pruned_zeros = zeros(&pruned);
        let expected = (rate * n as f64).floor() as usize;
        // Selected coordinates may already hold 0.0 (biases are excluded so
        // only trained weights count, and exact zeros there are rare).
        assert!(pruned_zeros >= expected.saturating_sub(base_zeros));
        assert!(pruned_zeros <= expected + base_zeros);

        assert!(prune_random(&f.model, 0.95, 1).is_err());
        assert!(prune_random(&f.model, -0.1, 1).is_err());
    }

    #[test]
    fn prune_never_touches_biases_or_pad_row() {
        let f = fixture();
        let pruned = prune_random(&f.model, 0.9, 3).unwrap();
        for (orig, new) in f.model.params().iter().zip(pruned.params()) {
            let ob = orig.borrow();
            let nb = new.borrow();
            if ob.value.ndim() < 2 {
                assert_eq!(ob.value, nb.value, "bias {} changed", ob.name);
            }
        }
        let orig_pad = f.model.embedding.weight.borrow();
        let new_pad = pruned.embedding.weight.borrow();
        let d = f.model.embed_dim;
        assert_eq!(
            orig_pad.value.as_slice().unwrap()[..d],
            new_pad.value.as_slice().unwrap()[..d]
        );
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let f = fixture();
        let p = probe(&f);
        let (model, result) = finetune_global(&f.model, &f.test_ds, 0, &TrainConfig::desk(1, 2), &p, 1).unwrap();
        for (a, b) in model.params().iter().zip(f.model.params()) {
            assert_eq!(a.borrow().value, b.borrow().value);
        }
        assert_eq!(result.pre.test_acc, result.post.test_acc);
        assert_eq!(result.curve.len(), 1);
    }

    #[test]
    fn finetune_curve_is_monotone_in_x_and_couples_utility() {
        let f = fixture();
        let p = probe(&f);
        let (_, result) =
            finetune_global(&f.model, &f.test_ds, 4, &TrainConfig::desk(4, 2), &p, 2).unwrap();
        assert!(result.curve.len() >= 2);
        for w in result.curve.windows(2) {
            assert!(w[0].x < w[1].x, "curve x must increase");
        }
        for pt in &result.curve {
            assert!((0.0..=1.0).contains(&pt.test_acc));
            assert!((0.0..=1.0).contains(&pt.trigger_acc));
        }
    }

    #[test]
    fn replace_head_rejects_bad_class_counts() {
        let f = fixture();
        let p = probe(&f);
        assert!(
            replace_head_finetune(&f.model, 1, &f.test_ds, 1, &TrainConfig::desk(1, 2), &p, 1)
                .is_err()
        );
        // Labels outside the new range are rejected.
        let (topic_train, _) = synth::topic4(1, 40, 8).unwrap();
        let topic_ds = EncodedDataset::from_corpus(&topic_train, &f.encoder);
        assert!(
            replace_head_finetune(&f.model, 3, &topic_ds, 1, &TrainConfig::desk(1, 2), &p, 1)
                .is_err()
        );
        drop(f.train);
    }
}
