//! Ownership verification: black-box trigger queries, white-box SANet
//! assembly, and watermark extraction rate.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_backbone, Checkpoint};
use crate::corpus::Encoder;
use crate::error::{Error, Result};
use crate::material::{AuthSet, TriggerSet, WatermarkKeys};
use crate::model::{predict_label, HostModel, SANet};
use crate::training::{evaluate_sanet_accuracy, EncodedDataset};

/// Default decision threshold for both verification channels.
pub const DEFAULT_EPSILON: f64 = 0.8;
/// Required extraction rate for the white-box watermark claim.
pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.99;
/// Below this many queries a black-box report is advisory only.
pub const MIN_DECISION_QUERIES: usize = 20;

/// Label oracle over raw text: the only interface the remote threat model
/// exposes (hard labels, no probabilities, no parameters).
pub trait QueryClient {
    fn classify(&mut self, text: &str) -> Result<usize>;
}

/// Local client backed by a checkpointed model.
pub struct LocalClient {
    model: HostModel,
    encoder: Encoder,
}

impl LocalClient {
    pub fn new(model: HostModel, encoder: Encoder) -> Self {
        Self { model, encoder }
    }
}

impl QueryClient for LocalClient {
    fn classify(&mut self, text: &str) -> Result<usize> {
        predict_label(&self.model, &self.encoder.encode(text))
    }
}

/// Line-delimited protocol client: writes one text per line, reads one
/// integer label per line. Newlines inside the text are flattened to spaces.
pub struct LineProtocolClient<R: BufRead, W: Write> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> LineProtocolClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }
}

impl<R: BufRead, W: Write> QueryClient for LineProtocolClient<R, W> {
    fn classify(&mut self, text: &str) -> Result<usize> {
        let flat = text.replace(['\n', '\r'], " ");
        writeln!(self.writer, "{flat}")?;
        self.writer.flush()?;
        let mut line = String::new();
        let n = self.reader.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::invalid("label stream closed"));
        }
        line.trim()
            .parse::<usize>()
            .map_err(|e| Error::invalid(format!("bad label line '{}': {e}", line.trim())))
    }
}

/// Spawns a label server subprocess and speaks the line protocol over its
/// standard streams.
pub struct ChildProcessClient {
    child: Child,
    inner: LineProtocolClient<BufReader<std::process::ChildStdout>, std::process::ChildStdin>,
}

impl ChildProcessClient {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::invalid("child has no stdin"))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::invalid("child has no stdout"))?;
        Ok(Self {
            child,
            inner: LineProtocolClient::new(BufReader::new(stdout), stdin),
        })
    }
}

impl QueryClient for ChildProcessClient {
    fn classify(&mut self, text: &str) -> Result<usize> {
        self.inner.classify(text)
    }
}

impl Drop for ChildProcessClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Blackbox,
    Whitebox,
    Extraction,
}

/// Outcome of one verification pass. `decision` holds exactly when
/// `metric >= threshold`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub channel: Channel,
    pub metric: f64,
    pub threshold: f64,
    pub decision: bool,
    pub n_queries: usize,
    pub timestamp: String,
    pub keys_fingerprint: Option<String>,
    /// Literal-mode extraction rate, reported alongside the authoritative
    /// selected-only metric on the extraction channel.
    pub delta_literal: Option<f64>,
    /// Set when the query count is below the decision floor.
    pub advisory: bool,
}

impl VerificationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Queries the client with every trigger text and compares against the
/// assigned labels; ownership holds at accuracy >= epsilon.
pub fn verify_blackbox(
    client: &mut dyn QueryClient,
    triggers: &TriggerSet,
    epsilon: f64,
    timestamp: &str,
) -> Result<VerificationReport> {
    if triggers.is_empty() {
        return Err(Error::invalid("trigger set is empty"));
    }
    let mut hits = 0usize;
    for (index, item) in triggers.items.iter().enumerate() {
        let label = client.classify(&item.text).map_err(|e| Error::Client {
            index,
            msg: e.to_string(),
        })?;
        if label == item.assigned_label {
            hits += 1;
        }
    }
    let n = triggers.len();
    let accuracy = hits as f64 / n as f64;
    Ok(VerificationReport {
        channel: Channel::Blackbox,
        metric: accuracy,
        threshold: epsilon,
        decision: accuracy >= epsilon,
        n_queries: n,
        timestamp: timestamp.to_string(),
        keys_fingerprint: None,
        delta_literal: None,
        advisory: n < MIN_DECISION_QUERIES,
    })
}

/// Loads the suspect's backbone into a private copy of the owner's SANet and
/// measures authentication-set accuracy.
pub fn verify_whitebox(
    suspect: &Checkpoint,
    sanet_specific: &SANet,
    auth: &AuthSet,
    encoder: &Encoder,
    threshold: f64,
    timestamp: &str,
) -> Result<VerificationReport> {
    if auth.is_empty() {
        return Err(Error::invalid("auth set is empty"));
    }
    let assembled = sanet_specific.deep_clone();
    load_backbone(&assembled, suspect)?;
    let ds: EncodedDataset = auth.to_dataset(encoder);
    let accuracy = evaluate_sanet_accuracy(&assembled, &ds)?;
    Ok(VerificationReport {
        channel: Channel::Whitebox,
        metric: accuracy,
        threshold,
        decision: accuracy >= threshold,
        n_queries: auth.len(),
        timestamp: timestamp.to_string(),
        keys_fingerprint: None,
        delta_literal: None,
        advisory: false,
    })
}

/// Stage function: 1 when the distance is within the extraction tolerance.
pub fn step_f(x: f64) -> u8 {
    u8::from(x <= 0.01)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Mean of F(|w_i - s_i|) over positions with b_i = 1 (authoritative).
    SelectedOnly,
    /// Mean of F(b_i * |w_i - s_i|) over all positions; unselected positions
    /// contribute F(0) = 1 (paper-parity form).
    Literal,
}

/// Watermark extraction rate over a flattened carrier.
pub fn extract_delta(w: &[f64], s: &[f64], kappa2: &[u8], mode: DeltaMode) -> Result<f64> {
    if w.len() != s.len() || w.len() != kappa2.len() {
        return Err(Error::ShapeMismatch(format!(
            "delta lengths differ: w {}, s {}, kappa2 {}",
            w.len(),
            s.len(),
            kappa2.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::invalid("delta over an empty carrier"));
    }
    match mode {
        DeltaMode::SelectedOnly => {
            let selected: Vec<usize> = (0..w.len()).filter(|&i| kappa2[i] == 1).collect();
            if selected.is_empty() {
                return Err(Error::invalid(
                    "selected_only delta undefined: kappa2 is all-zero",
                ));
            }
            let hits: u64 = selected
                .iter()
                .map(|&i| u64::from(step_f((w[i] - s[i]).abs())))
                .sum();
            Ok(hits as f64 / selected.len() as f64)
        }
        DeltaMode::Literal => {
            let hits: u64 = (0..w.len())
                .map(|i| u64::from(step_f(f64::from(kappa2[i]) * (w[i] - s[i]).abs())))
                .sum();
            Ok(hits as f64 / w.len() as f64)
        }
    }
}

/// Extraction rate of a SANet's carrier against the owner keys.
pub fn extract_delta_from(sanet: &SANet, keys: &WatermarkKeys, mode: DeltaMode) -> Result<f64> {
    extract_delta(
        &sanet.carrier_flat(),
        &keys.s_flat(),
        &keys.kappa2_flat(),
        mode,
    )
}

/// Extraction-channel report: selected-only delta is the decision metric;
/// the literal form is carried alongside.
pub fn verify_extraction(
    sanet_specific: &SANet,
    keys: &WatermarkKeys,
    threshold: f64,
    timestamp: &str,
) -> Result<VerificationReport> {
    let delta = extract_delta_from(sanet_specific, keys, DeltaMode::SelectedOnly)?;
    let literal = extract_delta_from(sanet_specific, keys, DeltaMode::Literal)?;
    Ok(VerificationReport {
        channel: Channel::Extraction,
        metric: delta,
        threshold,
        decision: delta >= threshold,
        n_queries: keys.selected_count(),
        timestamp: timestamp.to_string(),
        keys_fingerprint: Some(keys.fingerprint()),
        delta_literal: Some(literal),
        advisory: false,
    })
}

/// In-memory lookup client, mainly for tests and simulations.
pub struct TableClient {
    table: BTreeMap<String, usize>,
    pub fallback: usize,
}

impl TableClient {
    pub fn new(table: BTreeMap<String, usize>, fallback: usize) -> Self {
        Self { table, fallback }
    }
}

impl QueryClient for TableClient {
    fn classify(&mut self, text: &str) -> Result<usize> {
        Ok(self.table.get(text).copied().unwrap_or(self.fallback))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::TriggerItem;

    fn toy_triggers(n: usize) -> TriggerSet {
        TriggerSet {
            items: (0..n)
                .map(|i| TriggerItem {
                    id: format!("t{i}"),
                    text: format!("trigger text {i}"),
                    original_label: 0,
                    assigned_label: 1,
                })
                .collect(),
            source_model_id: "test".to_string(),
            seed: 0,
            m_per_class: n,
            skipped: 0,
        }
    }

    #[test]
    fn step_function_boundary() {
        assert_eq!(step_f(0.005), 1);
        assert_eq!(step_f(0.01), 1);
        assert_eq!(step_f(0.02), 0);
        assert_eq!(step_f(0.0), 1);
    }

    #[test]
    fn delta_worked_examples() {
        // Exact match: both modes 1.
        let w = [0.1, -0.5, 0.9];
        assert_eq!(
            extract_delta(&w, &w, &[1, 1, 1], DeltaMode::SelectedOnly).unwrap(),
            1.0
        );
        assert_eq!(
            extract_delta(&w, &w, &[1, 1, 1], DeltaMode::Literal).unwrap(),
            1.0
        );

        // Two of three positions within tolerance.
        let w = [0.5, -0.2, 0.3];
        let s = [0.5, 0.9, 0.305];
        let d = extract_delta(&w, &s, &[1, 1, 1], DeltaMode::SelectedOnly).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        let d = extract_delta(&w, &s, &[1, 1, 1], DeltaMode::Literal).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);

        // Unselected positions always pass in literal mode.
        let w = [0.5, 9.0];
        let s = [0.5, -9.0];
        assert_eq!(
            extract_delta(&w, &s, &[1, 0], DeltaMode::SelectedOnly).unwrap(),
            1.0
        );
        assert_eq!(extract_delta(&w, &s, &[1, 0], DeltaMode::Literal).unwrap(), 1.0);

        // Mode divergence when the selected position misses.
        let w = [1.0, 0.0];
        let s = [0.5, 0.0];
        assert_eq!(
            extract_delta(&w, &s, &[1, 0], DeltaMode::SelectedOnly).unwrap(),
            0.0
        );
        assert_eq!(extract_delta(&w, &s, &[1, 0], DeltaMode::Literal).unwrap(), 0.5);

        // All-zero kappa2: selected mode undefined, literal passes everywhere.
        assert!(extract_delta(&w, &s, &[0, 0], DeltaMode::SelectedOnly).is_err());
        assert_eq!(extract_delta(&w, &s, &[0, 0], DeltaMode::Literal).unwrap(), 1.0);
    }

    #[test]
    fn delta_matches_bruteforce_oracle_on_random_instances() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(12);
        for _ in 0..50 {
            let t = rng.random_range(2..40);
            let w: Vec<f64> = (0..t).map(|_| rng.random_range(-1.2..1.2)).collect();
            let s: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut b: Vec<u8> = (0..t).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
            if b.iter().all(|&x| x == 0) {
                b[0] = 1;
            }

            // Brute force straight from the definitions.
            let mut sel_hits = 0usize;
            let mut sel_n = 0usize;
            let mut lit_hits = 0usize;
            for i in 0..t {
                let dist = (w[i] - s[i]).abs();
                if b[i] == 1 {
                    sel_n += 1;
                    if dist <= 0.01 {
                        sel_hits += 1;
                        lit_hits += 1;
                    }
                } else {
                    lit_hits += 1;
                }
            }
            let sel_oracle = sel_hits as f64 / sel_n as f64;
            let lit_oracle = lit_hits as f64 / t as f64;

            let sel = extract_delta(&w, &s, &b, DeltaMode::SelectedOnly).unwrap();
            let lit = extract_delta(&w, &s, &b, DeltaMode::Literal).unwrap();
            assert!((sel - sel_oracle).abs() < 1e-9);
            assert!((lit - lit_oracle).abs() < 1e-9);

            // Literal >= selected * (#selected / T): unselected only add passes.
            assert!(lit + 1e-12 >= sel * (sel_n as f64) / t as f64);

            // Selected-only ignores unselected coordinates entirely.
            let mut w2 = w.clone();
            for i in 0..t {
                if b[i] == 0 {
                    w2[i] += 100.0;
                }
            }
            let sel2 = extract_delta(&w2, &s, &b, DeltaMode::SelectedOnly).unwrap();
            assert_eq!(sel, sel2);
        }
    }

    #[test]
    fn blackbox_counts_and_decides() {
        let triggers = toy_triggers(100);
        // 95 of 100 correct.
        let mut table = BTreeMap::new();
        for (i, item) in triggers.items.iter().enumerate() {
            table.insert(item.text.clone(), if i < 95 { 1 } else { 0 });
        }
        let mut client = TableClient::new(table, 0);
        let report = verify_blackbox(&mut client, &triggers, 0.8, "t0").unwrap();
        assert!((report.metric - 0.95).abs() < 1e-12);
        assert!(report.decision);
        assert!(!report.advisory);
        assert_eq!(report.n_queries, 100);

        // Below the floor: advisory.
        let small = toy_triggers(10);
        let mut client = TableClient::new(BTreeMap::new(), 1);
        let report = verify_blackbox(&mut client, &small, 0.8, "t0").unwrap();
        assert!(report.advisory);
    }

    #[test]
    fn blackbox_is_order_invariant() {
        let mut triggers = toy_triggers(25);
        let mut table = BTreeMap::new();
        for (i, item) in triggers.items.iter().enumerate() {
            table.insert(item.text.clone(), if i % 5 == 0 { 0 } else { 1 });
        }
        let mut client = TableClient::new(table.clone(), 0);
        let base = verify_blackbox(&mut client, &triggers, 0.8, "t").unwrap();

        triggers.items.reverse();
        let mut client = TableClient::new(table, 0);
        let permuted = verify_blackbox(&mut client, &triggers, 0.8, "t").unwrap();
        assert_eq!(base.metric, permuted.metric);
    }

    #[test]
    fn blackbox_propagates_client_failures_with_index() {
        struct Failing(usize);
        impl QueryClient for Failing {
            fn classify(&mut self, _t: &str) -> Result<usize> {
                if self.0 == 0 {
                    return Err(Error::invalid("boom"));
                }
                self.0 -= 1;
                Ok(1)
            }
        }
        let triggers = toy_triggers(30);
        let err = verify_blackbox(&mut Failing(7), &triggers, 0.8, "t").unwrap_err();
        match err {
            Error::Client { index, .. } => assert_eq!(index, 7),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn line_protocol_round_trip() {
        // Server side scripted to answer label 3 twice.
        let input = b"3\n3\n".to_vec();
        let mut output = Vec::new();
        {
            let mut client = LineProtocolClient::new(std::io::Cursor::new(input), &mut output);
            assert_eq!(client.classify("hello world").unwrap(), 3);
            assert_eq!(client.classify("multi\nline text").unwrap(), 3);
        }
        let sent = String::from_utf8(output).unwrap();
        assert_eq!(sent, "hello world\nmulti line text\n");
    }
}
