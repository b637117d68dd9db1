//! Losses, optimizers, clean training and the alternating watermark
//! embedding loop.
//!
//! The host branch minimizes task cross-entropy over clean batches plus the
//! full trigger set; the SANet branch minimizes authentication cross-entropy
//! plus `lambda` times the carrier regularizer. Steps alternate strictly:
//! even counter = host, odd counter = SANet.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Encoder, PAD_ID};
use crate::error::{Error, Result};
use crate::material::WatermarkKeys;
use crate::model::{argmax, HostModel, SANet};
use crate::nn::{softmax_rows, zero_grad, ParamRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adagrad,
    Sgd,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_wm: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Stop early once both branch task losses move less than this over an
    /// epoch. `None` disables early stopping.
    #[serde(default)]
    pub early_stop_tol: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.lambda_wm < 0.0 {
            return Err(Error::invalid("lambda_wm must be >= 0"));
        }
        Ok(())
    }

    /// Desk-scale defaults: AdaGrad, lr 0.03, batch 64, lambda 10.
    pub fn desk(epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate: 0.03,
            batch_size: 64,
            epochs,
            lambda_wm: 10.0,
            optimizer: OptimizerKind::Adagrad,
            seed,
            early_stop_tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Host,
    Sanet,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Host => write!(f, "host"),
            Branch::Sanet => write!(f, "sanet"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub branch: Branch,
    pub task_loss: f64,
    pub wm_loss: Option<f64>,
    pub total: f64,
}

/// Per-step loss trace of a training run.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub records: Vec<StepRecord>,
}

impl LossReport {
    pub fn push(&mut self, rec: StepRecord) {
        self.records.push(rec);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,branch,task_loss,wm_loss,total\n");
        for r in &self.records {
            let wm = r.wm_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.branch, r.task_loss, wm, r.total
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// A corpus encoded to fixed-length id rows, ready for batching.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub ids: Array2<u32>,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
    pub num_classes: usize,
}

impl EncodedDataset {
    pub fn from_texts<'a>(
        texts: impl Iterator<Item = (&'a str, usize)>,
        encoder: &Encoder,
        num_classes: usize,
    ) -> Self {
        let mut rows: Vec<u32> = Vec::new();
        let mut labels = Vec::new();
        let mut lengths = Vec::new();
        for (text, label) in texts {
            let ids = encoder.encode(text);
            lengths.push(ids.iter().filter(|&&t| t != PAD_ID).count());
            rows.extend_from_slice(&ids);
            labels.push(label);
        }
        let n = labels.len();
        let ids = Array2::from_shape_vec((n, encoder.max_len), rows).expect("row shape");
        Self {
            ids,
            labels,
            lengths,
            num_classes,
        }
    }

    pub fn from_corpus(corpus: &Corpus, encoder: &Encoder) -> Self {
        Self::from_texts(
            corpus.samples().iter().map(|s| (s.text.as_str(), s.label)),
            encoder,
            corpus.num_classes,
        )
    }

    pub fn empty(max_len: usize, num_classes: usize) -> Self {
        Self {
            ids: Array2::zeros((0, max_len)),
            labels: Vec::new(),
            lengths: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materializes rows `idx`, truncating trailing all-PAD columns down to
    /// the longest real row (but never below `min_len`).
    pub fn gather(&self, idx: &[usize], min_len: usize) -> (Array2<u32>, Vec<usize>) {
        let max_real = idx
            .iter()
            .map(|&i| self.lengths[i])
            .max()
            .unwrap_or(1)
            .max(min_len)
            .min(self.ids.ncols());
        let mut out = Array2::<u32>::zeros((idx.len(), max_real));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            out.slice_mut(s![row, ..])
                .assign(&self.ids.slice(s![i, ..max_real]));
            labels.push(self.labels[i]);
        }
        (out, labels)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Cross-entropy of a logit vector against a class index, computed in f64
/// with max-subtracted log-softmax.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::invalid("cross_entropy needs at least 2 logits"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(-(logits[label] - max - log_sum))
}

/// Carrier regularizer: `(1/T) * sum_i b_i * (w_i - s_i)^2` over all T
/// entries of the carrier tensor.
pub fn wm_regularizer(w: &[f64], s: &[f64], b: &[u8]) -> Result<f64> {
    if w.len() != s.len() || w.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "regularizer lengths differ: w {}, s {}, b {}",
            w.len(),
            s.len(),
            b.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::invalid("regularizer over an empty carrier"));
    }
    let t = w.len() as f64;
    let sum: f64 = w
        .iter()
        .zip(s)
        .zip(b)
        .map(|((&wi, &si), &bi)| f64::from(bi) * (wi - si) * (wi - si))
        .sum();
    Ok(sum / t)
}

/// Analytic gradient of [`wm_regularizer`]: `2 * b_i * (w_i - s_i) / T`.
pub fn wm_regularizer_grad(w: &[f64], s: &[f64], b: &[u8]) -> Result<Vec<f64>> {
    if w.len() != s.len() || w.len() != b.len() {
        return Err(Error::ShapeMismatch("regularizer lengths differ".into()));
    }
    let t = w.len() as f64;
    Ok(w.iter()
        .zip(s)
        .zip(b)
        .map(|((&wi, &si), &bi)| 2.0 * f64::from(bi) * (wi - si) / t)
        .collect())
}

/// Mean cross-entropy over a batch plus the gradient w.r.t. the logits
/// (already divided by the batch size).
fn ce_loss_and_grad(logits: &Array2<f32>, labels: &[usize]) -> Result<(f64, Array2<f32>)> {
    let n = labels.len();
    debug_assert_eq!(logits.nrows(), n);
    let mut loss = 0.0f64;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        loss += cross_entropy(&row64, label)?;
    }
    loss /= n as f64;

    let mut grad = softmax_rows(logits);
    for (i, &label) in labels.iter().enumerate() {
        grad[[i, label]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f32);
    Ok((loss, grad))
}

fn mean_ce(logits: &Array2<f32>, labels: &[usize]) -> Result<f64> {
    let mut loss = 0.0f64;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        loss += cross_entropy(&row64, label)?;
    }
    Ok(loss / labels.len().max(1) as f64)
}

/// Host training loss: mean cross-entropy over the clean batch plus mean
/// cross-entropy over the trigger batch (zero when the trigger batch is
/// empty). Forward-only.
pub fn host_loss(
    model: &HostModel,
    clean: &EncodedDataset,
    trigger: &EncodedDataset,
) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::invalid("host_loss needs a non-empty clean batch"));
    }
    let min_len = model.backbone.min_seq_len();
    let (ids, labels) = clean.gather(&clean.all_indices(), min_len);
    let mut loss = mean_ce(&model.logits(ids.view())?, &labels)?;
    if !trigger.is_empty() {
        let (tids, tlabels) = trigger.gather(&trigger.all_indices(), min_len);
        loss += mean_ce(&model.logits(tids.view())?, &tlabels)?;
    }
    Ok(loss)
}

/// SANet training loss: mean authentication cross-entropy plus
/// `lambda_wm` times the carrier regularizer. Forward-only.
pub fn sanet_loss(
    sanet: &SANet,
    auth: &EncodedDataset,
    keys: &WatermarkKeys,
    lambda_wm: f64,
) -> Result<f64> {
    if auth.is_empty() {
        return Err(Error::invalid("sanet_loss needs a non-empty auth batch"));
    }
    check_keys_shape(sanet, keys)?;
    let (ids, labels) = auth.gather(&auth.all_indices(), sanet.backbone.min_seq_len());
    let task = mean_ce(&sanet.logits(ids.view())?, &labels)?;
    let wm = wm_regularizer(&sanet.carrier_flat(), &keys.s_flat(), &keys.kappa2_flat())?;
    Ok(task + lambda_wm * wm)
}

fn check_keys_shape(sanet: &SANet, keys: &WatermarkKeys) -> Result<()> {
    if keys.shape() != sanet.wm_shape {
        return Err(Error::ShapeMismatch(format!(
            "keys shape {:?} vs carrier {:?}",
            keys.shape(),
            sanet.wm_shape
        )));
    }
    Ok(())
}

/// Per-parameter state optimizer (AdaGrad accumulators keyed by parameter
/// identity, shared across branches when parameters are shared).
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    eps: f32,
    accum: HashMap<usize, ArrayD<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr: lr as f32,
            eps: 1e-10,
            accum: HashMap::new(),
        }
    }

    /// Applies one update to each parameter from its accumulated gradient.
    pub fn step(&mut self, params: &[ParamRef]) {
        for p in params {
            let key = Rc::as_ptr(p) as usize;
            let mut b = p.borrow_mut();
            // Split-borrow value apart from grad.
            let crate::nn::Param {
                ref mut value,
                ref grad,
                ..
            } = *b;
            match self.kind {
                OptimizerKind::Sgd => {
                    value.zip_mut_with(grad, |v, &g| *v -= self.lr * g);
                }
                OptimizerKind::Adagrad => {
                    let acc = self
                        .accum
                        .entry(key)
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    acc.zip_mut_with(grad, |a, &g| *a += g * g);
                    ndarray::Zip::from(value)
                        .and(grad)
                        .and(&*acc)
                        .for_each(|v, &g, &a| {
                            *v -= self.lr * g / (a.sqrt() + self.eps);
                        });
                }
            }
        }
    }
}

/// One gradient step on the host branch. Returns the step loss.
fn host_step(
    model: &HostModel,
    opt: &mut Optimizer,
    params: &[ParamRef],
    clean_ids: &Array2<u32>,
    clean_labels: &[usize],
    trigger: Option<(&Array2<u32>, &[usize])>,
) -> Result<f64> {
    zero_grad(params);
    let (logits, cache) = model.forward(clean_ids.view())?;
    let (mut loss, dlogits) = ce_loss_and_grad(&logits, clean_labels)?;
    model.backward(clean_ids.view(), &cache, &dlogits);
    if let Some((tids, tlabels)) = trigger {
        let (tlogits, tcache) = model.forward(tids.view())?;
        let (tloss, tdlogits) = ce_loss_and_grad(&tlogits, tlabels)?;
        model.backward(tids.view(), &tcache, &tdlogits);
        loss += tloss;
    }
    opt.step(params);
    Ok(loss)
}

/// One gradient step on the SANet branch. Returns (task, wm) losses.
fn sanet_step(
    sanet: &SANet,
    opt: &mut Optimizer,
    params: &[ParamRef],
    auth_ids: &Array2<u32>,
    auth_labels: &[usize],
    keys: &WatermarkKeys,
    lambda_wm: f64,
) -> Result<(f64, f64)> {
    zero_grad(params);
    let (logits, cache) = sanet.forward(auth_ids.view())?;
    let (task, dlogits) = ce_loss_and_grad(&logits, auth_labels)?;
    sanet.backward(auth_ids.view(), &cache, &dlogits);

    let w = sanet.carrier_flat();
    let wm = wm_regularizer(&w, &keys.s_flat(), &keys.kappa2_flat())?;
    let wm_grad = wm_regularizer_grad(&w, &keys.s_flat(), &keys.kappa2_flat())?;
    {
        let carrier = sanet.carrier();
        let mut b = carrier.borrow_mut();
        for (g, &wg) in b.grad.iter_mut().zip(&wm_grad) {
            *g += (lambda_wm * wg) as f32;
        }
    }
    opt.step(params);
    Ok((task, wm))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mini-batch training on the task loss alone. Deterministic given the
/// config seed; errors out if the loss stops being finite.
pub fn train_clean(
    model: &mut HostModel,
    train: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    train_with_triggers(model, train, None, cfg, |_, _| Ok(()))
}

/// Host-branch training over clean batches, optionally appending the full
/// trigger set to every step (the host side of the embedding objective).
/// `on_epoch` runs after each completed epoch with the epoch count so far.
pub fn train_with_triggers(
    model: &mut HostModel,
    train: &EncodedDataset,
    triggers: Option<&EncodedDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &HostModel) -> Result<()>,
) -> Result<LossReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let params = model.params();
    let min_len = model.backbone.min_seq_len();
    let trigger_batch = triggers
        .filter(|t| !t.is_empty())
        .map(|t| t.gather(&t.all_indices(), min_len));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut report = LossReport::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut idx = train.all_indices();
        idx.shuffle(&mut epoch_rng(cfg.seed, epoch));
        for chunk in idx.chunks(cfg.batch_size) {
            let (ids, labels) = train.gather(chunk, min_len);
            let loss = host_step(
                model,
                &mut opt,
                &params,
                &ids,
                &labels,
                trigger_batch.as_ref().map(|(t, l)| (t, l.as_slice())),
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            report.push(StepRecord {
                step,
                branch: Branch::Host,
                task_loss: loss,
                wm_loss: None,
                total: loss,
            });
            step += 1;
        }
        on_epoch(epoch + 1, model)?;
    }
    Ok(report)
}

/// Alternating watermark embedding; `triggers` may be empty only through
/// [`alternating_train`] (adversarial SANet-only embedding).
pub fn embed_watermark(
    model: &mut HostModel,
    sanet: &mut SANet,
    train: &EncodedDataset,
    triggers: &EncodedDataset,
    auth: &EncodedDataset,
    keys: &WatermarkKeys,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if triggers.is_empty() {
        return Err(Error::invalid("trigger set is empty"));
    }
    alternating_train(model, sanet, train, Some(triggers), auth, keys, cfg)
}

/// Alternating host/SANet optimization: the even step counter trains the
/// host on a clean batch plus the full trigger set; the odd counter trains
/// the SANet on the next authentication batch.
pub fn alternating_train(
    model: &mut HostModel,
    sanet: &mut SANet,
    train: &EncodedDataset,
    triggers: Option<&EncodedDataset>,
    auth: &EncodedDataset,
    keys: &WatermarkKeys,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if auth.is_empty() {
        return Err(Error::invalid("auth set is empty"));
    }
    check_keys_shape(sanet, keys)?;

    let host_params = model.params();
    let sanet_params = sanet.params();
    let min_len = model.backbone.min_seq_len();

    let trigger_batch = triggers.map(|t| t.gather(&t.all_indices(), min_len));

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut report = LossReport::default();
    let mut step = 0usize;

    let mut auth_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xA117_5E7);
    let mut auth_idx = auth.all_indices();
    auth_idx.shuffle(&mut auth_rng);
    let mut auth_pos = 0usize;

    let mut prev_epoch_losses: Option<(f64, f64)> = None;
    for epoch in 0..cfg.epochs {
        let mut idx = train.all_indices();
        idx.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut epoch_host = 0.0f64;
        let mut epoch_sanet = 0.0f64;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            // Even counter: host branch.
            let (ids, labels) = train.gather(chunk, min_len);
            let host = host_step(
                model,
                &mut opt,
                &host_params,
                &ids,
                &labels,
                trigger_batch.as_ref().map(|(t, l)| (t, l.as_slice())),
            )?;
            if !host.is_finite() {
                return Err(Error::Diverged { step });
            }
            report.push(StepRecord {
                step,
                branch: Branch::Host,
                task_loss: host,
                wm_loss: None,
                total: host,
            });
            step += 1;

            // Odd counter: SANet branch on the next auth batch.
            let take = cfg.batch_size.min(auth.len());
            let mut batch_idx = Vec::with_capacity(take);
            for _ in 0..take {
                if auth_pos == auth_idx.len() {
                    auth_idx.shuffle(&mut auth_rng);
                    auth_pos = 0;
                }
                batch_idx.push(auth_idx[auth_pos]);
                auth_pos += 1;
            }
            let (aids, alabels) = auth.gather(&batch_idx, sanet.backbone.min_seq_len());
            let (task, wm) = sanet_step(
                sanet,
                &mut opt,
                &sanet_params,
                &aids,
                &alabels,
                keys,
                cfg.lambda_wm,
            )?;
            let total = task + cfg.lambda_wm * wm;
            if !total.is_finite() {
                return Err(Error::Diverged { step });
            }
            report.push(StepRecord {
                step,
                branch: Branch::Sanet,
                task_loss: task,
                wm_loss: Some(wm),
                total,
            });
            step += 1;

            epoch_host += host;
            epoch_sanet += task;
            batches += 1;
        }

        if let Some(tol) = cfg.early_stop_tol {
            let cur = (epoch_host / batches as f64, epoch_sanet / batches as f64);
            if let Some(prev) = prev_epoch_losses {
                if (prev.0 - cur.0).abs() < tol && (prev.1 - cur.1).abs() < tol {
                    break;
                }
            }
            prev_epoch_losses = Some(cur);
        }
    }
    Ok(report)
}

/// Classification accuracy of a host model over an encoded dataset.
pub fn evaluate_accuracy(model: &HostModel, ds: &EncodedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let min_len = model.backbone.min_seq_len();
    let mut correct = 0usize;
    for chunk in ds.all_indices().chunks(256) {
        let (ids, labels) = ds.gather(chunk, min_len);
        let logits = model.logits(ids.view())?;
        for (row, &label) in logits.rows().into_iter().zip(&labels) {
            if argmax(&row.to_vec()) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Classification accuracy of a SANet over an encoded (binary) dataset.
pub fn evaluate_sanet_accuracy(sanet: &SANet, ds: &EncodedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let min_len = sanet.backbone.min_seq_len();
    let mut correct = 0usize;
    for chunk in ds.all_indices().chunks(256) {
        let (ids, labels) = ds.gather(chunk, min_len);
        let logits = sanet.logits(ids.view())?;
        for (row, &label) in logits.rows().into_iter().zip(&labels) {
            if argmax(&row.to_vec()) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::material::{compute_digest, generate_auth_set, generate_keys, generate_trigger_set};
    use crate::model::{build_model, build_sanet, Arch};
    use crate::synth;
    use rand::Rng;

    #[test]
    fn cross_entropy_worked_examples() {
        // Uniform two-logit case: -ln(1/2).
        let v = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12, "{v}");

        // Confident case: -ln(sigma(20)) = ln(1 + e^{-20}).
        let v = cross_entropy(&[10.0, -10.0], 0).unwrap();
        let oracle = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((v - oracle).abs() < 1e-15, "{v} vs {oracle}");
        assert!((v - 2.0611536e-9).abs() < 1e-12);

        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
        assert!(cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let base = cross_entropy(&logits, 2).unwrap();
        for c in [-100.0, -1.0, 0.5, 42.0] {
            let shifted: Vec<f64> = logits.iter().map(|&x| x + c).collect();
            let v = cross_entropy(&shifted, 2).unwrap();
            assert!((v - base).abs() < 1e-6, "shift {c}: {v} vs {base}");
        }
    }

    #[test]
    fn regularizer_worked_example_and_zero_case() {
        let w = [0.5, 0.1, -0.3, 0.2];
        let s = [0.5, 0.9, 0.3, 0.2];
        let b = [1u8, 0, 1, 0];
        let v = wm_regularizer(&w, &s, &b).unwrap();
        assert!((v - 0.09).abs() < 1e-12, "{v}");

        let g = wm_regularizer_grad(&w, &s, &b).unwrap();
        assert!((g[2] - (-0.3)).abs() < 1e-12, "{}", g[2]);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);

        let v0 = wm_regularizer(&s, &s, &[1, 1, 1, 1]).unwrap();
        assert_eq!(v0, 0.0);

        assert!(wm_regularizer(&w, &s[..3], &b).is_err());
    }

    #[test]
    fn regularizer_gradient_matches_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..20 {
            let t = rng.random_range(2..12);
            let w: Vec<f64> = (0..t).map(|_| rng.random_range(-1.5..1.5)).collect();
            let s: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<u8> = (0..t).map(|_| u8::from(rng.random::<f64>() < 0.6)).collect();
            let grad = wm_regularizer_grad(&w, &s, &b).unwrap();
            let h = 1e-6;
            for i in 0..t {
                let mut wp = w.clone();
                wp[i] += h;
                let up = wm_regularizer(&wp, &s, &b).unwrap();
                wp[i] -= 2.0 * h;
                let down = wm_regularizer(&wp, &s, &b).unwrap();
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(1e-12);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-5 || (grad[i] - fd).abs() < 1e-10,
                    "trial {trial} entry {i}: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }

    fn tiny_setup(
        arch: Arch,
    ) -> (
        HostModel,
        EncodedDataset,
        EncodedDataset,
        Encoder,
        crate::corpus::Corpus,
    ) {
        let (train, test) = synth::sentiment2(21, 240, 40).unwrap();
        let vocab = build_vocab(&train, 1, 4000).unwrap();
        let encoder = Encoder::new(vocab, 24).unwrap();
        let model = build_model(arch, encoder.vocab.len(), 16, 12, 2, 5).unwrap();
        let train_ds = EncodedDataset::from_corpus(&train, &encoder);
        let test_ds = EncodedDataset::from_corpus(&test, &encoder);
        (model, train_ds, test_ds, encoder, train)
    }

    #[test]
    fn host_loss_decomposes_additively() {
        let (model, train_ds, _, encoder, _) = tiny_setup(Arch::Gru);
        let single_a = EncodedDataset::from_texts(
            [("great wonderful story", 0usize)].into_iter(),
            &encoder,
            2,
        );
        let single_b =
            EncodedDataset::from_texts([("terrible boring plot", 1usize)].into_iter(), &encoder, 2);

        let combined = host_loss(&model, &single_a, &single_b).unwrap();
        let empty = EncodedDataset::empty(encoder.max_len, 2);
        let a = host_loss(&model, &single_a, &empty).unwrap();
        let b = host_loss(&model, &single_b, &empty).unwrap();
        assert!((combined - (a + b)).abs() < 1e-9, "{combined} vs {}", a + b);
        drop(train_ds);
    }

    #[test]
    fn sanet_loss_is_monotone_in_lambda_and_degenerates_at_zero() {
        let (model, _, _, encoder, train) = tiny_setup(Arch::Gru);
        let sanet = build_sanet(&model, encoder.vocab.len(), 16, (8, 2), 6).unwrap();
        let digest = compute_digest(&[9u8; 16], "owner").unwrap();
        let auth = generate_auth_set(&train, 8, &digest, 2)
            .unwrap()
            .to_dataset(&encoder);
        let keys = generate_keys((8, 2), 0.5, 3).unwrap();

        let l0 = sanet_loss(&sanet, &auth, &keys, 0.0).unwrap();
        let l1 = sanet_loss(&sanet, &auth, &keys, 1.0).unwrap();
        let l10 = sanet_loss(&sanet, &auth, &keys, 10.0).unwrap();
        let wm = wm_regularizer(
            &sanet.carrier_flat(),
            &keys.s_flat(),
            &keys.kappa2_flat(),
        )
        .unwrap();
        assert!(wm > 0.0);
        assert!(l0 < l1 && l1 < l10);
        assert!((l1 - (l0 + wm)).abs() < 1e-9);

        // W = S at selected positions zeroes the regularizer term.
        {
            let carrier = sanet.carrier();
            let mut b = carrier.borrow_mut();
            let kflat = keys.kappa2_flat();
            let sflat = keys.s_flat();
            for (i, v) in b.value.iter_mut().enumerate() {
                if kflat[i] == 1 {
                    *v = sflat[i] as f32;
                }
            }
        }
        let wm_after = wm_regularizer(
            &sanet.carrier_flat(),
            &keys.s_flat(),
            &keys.kappa2_flat(),
        )
        .unwrap();
        assert!(wm_after < 1e-12);
        let mismatched = generate_keys((4, 2), 0.5, 3).unwrap();
        assert!(sanet_loss(&sanet, &auth, &mismatched, 1.0).is_err());
    }

    #[test]
    fn train_clean_is_deterministic_and_learns() {
        let (mut m1, train_ds, test_ds, _, _) = tiny_setup(Arch::TextCnn);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 32,
            ..TrainConfig::desk(8, 40)
        };
        train_clean(&mut m1, &train_ds, &cfg).unwrap();
        let acc = evaluate_accuracy(&m1, &train_ds).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
        let test_acc = evaluate_accuracy(&m1, &test_ds).unwrap();
        assert!(test_acc >= 0.8, "test accuracy {test_acc}");

        let (mut m2, train_ds2, _, _, _) = tiny_setup(Arch::TextCnn);
        train_clean(&mut m2, &train_ds2, &cfg).unwrap();
        for (a, b) in m1.params().iter().zip(m2.params()) {
            assert_eq!(a.borrow().value, b.borrow().value);
        }
    }

    #[test]
    fn probe_loss_is_nonincreasing_early() {
        let (mut model, train_ds, _, _, _) = tiny_setup(Arch::Gru);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            ..TrainConfig::desk(3, 17)
        };
        let report = train_clean(&mut model, &train_ds, &cfg).unwrap();
        let steps_per_epoch = train_ds.len().div_ceil(32);
        let epoch_mean = |e: usize| {
            let lo = e * steps_per_epoch;
            let hi = (e + 1) * steps_per_epoch;
            report.records[lo..hi]
                .iter()
                .map(|r| r.task_loss)
                .sum::<f64>()
                / steps_per_epoch as f64
        };
        let (e0, e1, e2) = (epoch_mean(0), epoch_mean(1), epoch_mean(2));
        // Allow one epoch of increase.
        assert!(
            e1 <= e0 || e2 <= e1,
            "loss not decreasing: {e0} -> {e1} -> {e2}"
        );
    }

    #[test]
    fn alternation_schedule_and_param_ownership() {
        let (mut model, train_ds, _, encoder, train) = tiny_setup(Arch::Gru);
        let clean_cfg = TrainConfig {
            epochs: 3,
            batch_size: 40,
            ..TrainConfig::desk(3, 3)
        };
        train_clean(&mut model, &train_ds, &clean_cfg).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 40,
            ..TrainConfig::desk(1, 3)
        };

        let mut sanet = build_sanet(&model, encoder.vocab.len(), 16, (8, 2), 11).unwrap();
        let digest = compute_digest(&[4u8; 16], "owner").unwrap();
        let triggers = generate_trigger_set(&model, &encoder, &train, 1, 8)
            .unwrap()
            .to_dataset(&encoder, 2);
        let auth = generate_auth_set(&train, 16, &digest, 5)
            .unwrap()
            .to_dataset(&encoder);
        let keys = generate_keys((8, 2), 0.5, 7).unwrap();

        let snapshot = |params: &[ParamRef]| -> Vec<ArrayD<f32>> {
            params.iter().map(|p| p.borrow().value.clone()).collect()
        };
        let host_specific_before = snapshot(&model.specific_params());
        let sanet_specific_before = snapshot(&sanet.specific_params());
        let backbone_before = snapshot(&model.backbone.params());

        let report =
            embed_watermark(&mut model, &mut sanet, &train_ds, &triggers, &auth, &keys, &cfg)
                .unwrap();

        let hosts = report
            .records
            .iter()
            .filter(|r| r.branch == Branch::Host)
            .count();
        let sanets = report.records.len() - hosts;
        assert_eq!(hosts, sanets, "strict 1:1 alternation");
        for (i, r) in report.records.iter().enumerate() {
            let expected = if i % 2 == 0 { Branch::Host } else { Branch::Sanet };
            assert_eq!(r.branch, expected);
            assert_eq!(r.wm_loss.is_some(), r.branch == Branch::Sanet);
            assert!(r.total.is_finite());
        }

        // All three parameter groups moved: host-specific, sanet-specific,
        // and the shared backbone.
        let moved = |before: &[ArrayD<f32>], after: &[ParamRef]| {
            before
                .iter()
                .zip(after)
                .any(|(b, a)| *b != a.borrow().value)
        };
        assert!(moved(&host_specific_before, &model.specific_params()));
        assert!(moved(&sanet_specific_before, &sanet.specific_params()));
        assert!(moved(&backbone_before, &model.backbone.params()));
    }

    #[test]
    fn host_step_never_touches_sanet_specific_params_and_vice_versa() {
        let (model, train_ds, _, encoder, train) = tiny_setup(Arch::TextCnn);
        let sanet = build_sanet(&model, encoder.vocab.len(), 16, (8, 2), 11).unwrap();
        let digest = compute_digest(&[4u8; 16], "owner").unwrap();
        let auth = generate_auth_set(&train, 8, &digest, 5)
            .unwrap()
            .to_dataset(&encoder);
        let keys = generate_keys((8, 2), 0.5, 7).unwrap();

        let snapshot = |params: &[ParamRef]| -> Vec<ArrayD<f32>> {
            params.iter().map(|p| p.borrow().value.clone()).collect()
        };

        // A host-only step leaves SANet-specific parameters untouched.
        let sanet_before = snapshot(&sanet.specific_params());
        let cfg = TrainConfig::desk(1, 3);
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        let params = model.params();
        let (ids, labels) = train_ds.gather(&[0, 1, 2, 3], model.backbone.min_seq_len());
        host_step(&model, &mut opt, &params, &ids, &labels, None).unwrap();
        for (b, a) in sanet_before.iter().zip(sanet.specific_params()) {
            assert_eq!(*b, a.borrow().value);
        }

        // A SANet-only step leaves host-specific parameters untouched but
        // moves the shared backbone (visible through the host).
        let host_before = snapshot(&model.specific_params());
        let backbone_before = snapshot(&model.backbone.params());
        let host_logits_before = {
            let (ids, _) = train_ds.gather(&[0, 1], model.backbone.min_seq_len());
            model.logits(ids.view()).unwrap()
        };
        let sparams = sanet.params();
        let (aids, alabels) = auth.gather(&[0, 1, 2, 3], sanet.backbone.min_seq_len());
        sanet_step(&sanet, &mut opt, &sparams, &aids, &alabels, &keys, 10.0).unwrap();
        for (b, a) in host_before.iter().zip(model.specific_params()) {
            assert_eq!(*b, a.borrow().value);
        }
        assert!(backbone_before
            .iter()
            .zip(model.backbone.params())
            .any(|(b, a)| *b != a.borrow().value));
        let host_logits_after = {
            let (ids, _) = train_ds.gather(&[0, 1], model.backbone.min_seq_len());
            model.logits(ids.view()).unwrap()
        };
        assert_ne!(host_logits_before, host_logits_after);

        drop(model);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (mut model, train_ds, _, encoder, train) = tiny_setup(Arch::Gru);
        let mut sanet = build_sanet(&model, encoder.vocab.len(), 16, (8, 2), 1).unwrap();
        let digest = compute_digest(&[4u8; 16], "owner").unwrap();
        let auth = generate_auth_set(&train, 8, &digest, 5)
            .unwrap()
            .to_dataset(&encoder);
        let keys = generate_keys((8, 2), 0.5, 7).unwrap();
        let cfg = TrainConfig::desk(1, 3);
        let empty = EncodedDataset::empty(encoder.max_len, 2);
        assert!(
            embed_watermark(&mut model, &mut sanet, &train_ds, &empty, &auth, &keys, &cfg)
                .is_err()
        );
        let bad_cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::desk(1, 3)
        };
        assert!(bad_cfg.validate().is_err());
    }
}
