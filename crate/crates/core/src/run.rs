//! Reproducible end-to-end runs: configuration, hashed artifact manifest,
//! and the pipeline commands the CLI exposes.
//!
//! Every command writes only inside its run directory, records each artifact
//! hash in `manifest.json` (written atomically), and refuses to consume an
//! artifact whose hash no longer matches. All randomness derives from config
//! seeds, so re-running a stored config reproduces every artifact byte for
//! byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    finetune_global, forge_sanet_attack, forge_trigger_attack, prune_sweep,
    replace_head_finetune, AttackResult, WatermarkProbe,
};
use crate::checkpoint::{host_from_checkpoint, sanet_from_checkpoint, Checkpoint};
use crate::concealment::{
    calibrate_tau, evaluate_concealment, rareword_trigger_baseline, suspicion_scores,
    ConcealmentReport, NgramScorer,
};
use crate::corpus::{
    build_vocab, load_corpus_with_classes, split, Corpus, CorpusFormat, Encoder, Vocabulary,
};
use crate::error::{Error, Result};
use crate::material::{
    compute_digest, generate_auth_set, generate_keys, generate_trigger_set, load_key_hex,
    AuthSet, TriggerSet, WatermarkKeys,
};
use crate::model::{build_model, build_sanet, Arch, HostModel, SANet};
use crate::training::{
    embed_watermark, evaluate_accuracy, evaluate_sanet_accuracy, train_clean, EncodedDataset,
    TrainConfig,
};
use crate::verification::{
    verify_blackbox, verify_extraction, verify_whitebox, Channel, ChildProcessClient,
    LocalClient, QueryClient, VerificationReport, DEFAULT_DELTA_THRESHOLD, DEFAULT_EPSILON,
};

/// Where a corpus lives on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub train_path: String,
    pub test_path: String,
    pub format: CorpusFormat,
    pub num_classes: usize,
}

/// Full description of one reproducible run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Stamp recorded when the config was authored; reports cite it so
    /// re-running the stored config reproduces them exactly.
    pub created_at: String,
    pub corpus: CorpusSpec,
    /// Second-task corpus for the head-replacement attack.
    #[serde(default)]
    pub alt_corpus: Option<CorpusSpec>,
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    pub train: TrainConfig,
    pub embed: TrainConfig,
    pub m_per_class: usize,
    pub n_auth_pairs: usize,
    pub wm_rows: usize,
    pub wm_cols: usize,
    pub wm_density: f64,
    pub owner_seed: u64,
    pub kappa1_path: String,
    pub owner_info: String,
    pub output_dir: String,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn wm_shape(&self) -> (usize, usize) {
        (self.wm_rows, self.wm_cols)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

/// Artifact registry for one run directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A run directory plus its config; owns manifest bookkeeping.
pub struct RunContext {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub run_dir: PathBuf,
}

impl RunContext {
    /// Opens (creating if needed) the run directory named by the config and
    /// stores a copy of the config inside it.
    pub fn open(config_path: impl AsRef<Path>) -> Result<Self> {
        let config_path = config_path.as_ref().to_path_buf();
        let config = RunConfig::load(&config_path)?;
        let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let run_dir = base.join(&config.output_dir);
        for sub in ["checkpoints", "material", "reports", "curves"] {
            fs::create_dir_all(run_dir.join(sub))?;
        }
        let stored = run_dir.join("config.json");
        if !stored.exists() {
            fs::copy(&config_path, &stored)?;
        }
        Ok(Self {
            config,
            config_path,
            run_dir,
        })
    }

    /// Resolves a config-relative input path (corpora, key file).
    pub fn input_path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_path
                .parent()
                .unwrap_or(Path::new("."))
                .join(p)
        }
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Hashes the artifact already written at `name` and records it in the
    /// manifest (temp-file-then-rename).
    pub fn record(&self, name: &str) -> Result<()> {
        let bytes = fs::read(self.artifact_path(name))?;
        let mut manifest = self.manifest()?;
        manifest.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                path: name.to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        let tmp = self.manifest_path().with_extension("tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, self.manifest_path())?;
        Ok(())
    }

    /// Returns the artifact path after checking its recorded hash.
    pub fn verified(&self, name: &str) -> Result<PathBuf> {
        let manifest = self.manifest()?;
        let entry = manifest
            .artifacts
            .get(name)
            .ok_or_else(|| Error::StaleArtifact(format!("{name} is not in the manifest")))?;
        let path = self.artifact_path(name);
        let bytes = fs::read(&path)
            .map_err(|e| Error::StaleArtifact(format!("{name}: cannot read ({e})")))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::StaleArtifact(format!(
                "{name}: hash {actual} does not match manifest {}",
                entry.sha256
            )));
        }
        Ok(path)
    }

    fn write_report(&self, name: &str, json: &str) -> Result<()> {
        fs::write(self.artifact_path(name), json)?;
        self.record(name)
    }

    fn load_train_corpus(&self) -> Result<Corpus> {
        load_corpus_with_classes(
            self.input_path(&self.config.corpus.train_path),
            self.config.corpus.format,
            Some(self.config.corpus.num_classes),
        )
    }

    fn load_test_corpus(&self) -> Result<Corpus> {
        load_corpus_with_classes(
            self.input_path(&self.config.corpus.test_path),
            self.config.corpus.format,
            Some(self.config.corpus.num_classes),
        )
    }

    fn encoder(&self) -> Result<Encoder> {
        let vocab = Vocabulary::load(self.verified("material/vocab.json")?)?;
        Encoder::new(vocab, self.config.max_len)
    }

    fn clean_model(&self) -> Result<HostModel> {
        host_from_checkpoint(&Checkpoint::load(self.verified("checkpoints/clean.ckpt")?)?)
    }

    fn watermarked_model(&self) -> Result<HostModel> {
        host_from_checkpoint(&Checkpoint::load(
            self.verified("checkpoints/watermarked.ckpt")?,
        )?)
    }

    fn sanet(&self) -> Result<SANet> {
        sanet_from_checkpoint(&Checkpoint::load(self.verified("checkpoints/sanet.ckpt")?)?)
    }

    fn triggers(&self) -> Result<TriggerSet> {
        TriggerSet::load_jsonl(self.verified("material/triggers.jsonl")?)
    }

    fn auth(&self) -> Result<AuthSet> {
        AuthSet::load_jsonl(self.verified("material/auth.jsonl")?)
    }

    fn keys(&self) -> Result<WatermarkKeys> {
        WatermarkKeys::load_json(self.verified("material/keys.json")?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanMetrics {
    pub arch: Arch,
    pub train_acc: f64,
    pub test_acc: f64,
    pub vocab_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Trains the clean host model and records checkpoint, vocabulary, metrics
/// and the loss curve.
pub fn cmd_train_clean(ctx: &RunContext) -> Result<CleanMetrics> {
    let cfg = &ctx.config;
    let train = ctx.load_train_corpus()?;
    let test = ctx.load_test_corpus()?;
    let vocab = build_vocab(&train, cfg.vocab_min_freq, cfg.vocab_max_size)?;
    vocab.save(ctx.artifact_path("material/vocab.json"))?;
    ctx.record("material/vocab.json")?;

    let encoder = Encoder::new(vocab, cfg.max_len)?;
    let mut model = build_model(
        cfg.arch,
        encoder.vocab.len(),
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.corpus.num_classes,
        cfg.train.seed,
    )?;
    let train_ds = EncodedDataset::from_corpus(&train, &encoder);
    let test_ds = EncodedDataset::from_corpus(&test, &encoder);
    let report = train_clean(&mut model, &train_ds, &cfg.train)?;
    report.save_csv(ctx.artifact_path("curves/clean_loss.csv"))?;
    ctx.record("curves/clean_loss.csv")?;

    Checkpoint::from_host(&model, cfg.train.epochs, &train.name)
        .save(ctx.artifact_path("checkpoints/clean.ckpt"))?;
    ctx.record("checkpoints/clean.ckpt")?;

    let metrics = CleanMetrics {
        arch: cfg.arch,
        train_acc: evaluate_accuracy(&model, &train_ds)?,
        test_acc: evaluate_accuracy(&model, &test_ds)?,
        vocab_size: encoder.vocab.len(),
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
    };
    ctx.write_report(
        "reports/clean_metrics.json",
        &serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(metrics)
}

/// Seed offsets so each generated artifact has its own stream.
const TRIGGER_SEED_SALT: u64 = 0x7216_0001;
const AUTH_SEED_SALT: u64 = 0xA001_0002;
pub const ADVERSARY_SPLIT_SALT: u64 = 0x5917_0003;

/// Generates trigger set, authentication set and watermark keys from the
/// clean checkpoint and the owner's secret key file.
pub fn cmd_gen_material(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let train = ctx.load_train_corpus()?;
    let encoder = ctx.encoder()?;
    let model = ctx.clean_model()?;

    let kappa1_path = ctx.input_path(&cfg.kappa1_path);
    if !kappa1_path.exists() {
        return Err(Error::invalid(format!(
            "kappa1 key file not found: {}",
            kappa1_path.display()
        )));
    }
    let kappa1 = load_key_hex(&kappa1_path)?;
    let digest = compute_digest(&kappa1, &cfg.owner_info)?;

    let triggers = generate_trigger_set(
        &model,
        &encoder,
        &train,
        cfg.m_per_class,
        cfg.train.seed ^ TRIGGER_SEED_SALT,
    )?;
    triggers.save_jsonl(ctx.artifact_path("material/triggers.jsonl"))?;
    ctx.record("material/triggers.jsonl")?;

    let auth = generate_auth_set(
        &train,
        cfg.n_auth_pairs,
        &digest,
        cfg.train.seed ^ AUTH_SEED_SALT,
    )?;
    auth.save_jsonl(ctx.artifact_path("material/auth.jsonl"))?;
    ctx.record("material/auth.jsonl")?;

    let keys = generate_keys(cfg.wm_shape(), cfg.wm_density, cfg.owner_seed)?;
    keys.save_json(ctx.artifact_path("material/keys.json"))?;
    ctx.record("material/keys.json")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedMetrics {
    pub arch: Arch,
    pub test_acc: f64,
    pub trigger_acc: f64,
    pub auth_acc: f64,
    pub delta_selected: f64,
    pub delta_literal: f64,
    pub keys_fingerprint: String,
    pub epochs: usize,
    pub lambda_wm: f64,
}

/// Runs the alternating embedding from the clean checkpoint and records the
/// watermarked host, the SANet, metrics and the loss trace.
pub fn cmd_embed(ctx: &RunContext) -> Result<EmbedMetrics> {
    let cfg = &ctx.config;
    let train = ctx.load_train_corpus()?;
    let test = ctx.load_test_corpus()?;
    let encoder = ctx.encoder()?;
    let mut model = ctx.clean_model()?;
    let triggers = ctx.triggers()?;
    let auth = ctx.auth()?;
    let keys = ctx.keys()?;

    let mut sanet = build_sanet(
        &model,
        encoder.vocab.len(),
        cfg.embed_dim,
        cfg.wm_shape(),
        cfg.owner_seed ^ 1,
    )?;

    let train_ds = EncodedDataset::from_corpus(&train, &encoder);
    let test_ds = EncodedDataset::from_corpus(&test, &encoder);
    let trigger_ds = triggers.to_dataset(&encoder, train.num_classes);
    let auth_ds = auth.to_dataset(&encoder);

    let report = embed_watermark(
        &mut model,
        &mut sanet,
        &train_ds,
        &trigger_ds,
        &auth_ds,
        &keys,
        &cfg.embed,
    )?;
    report.save_csv(ctx.artifact_path("curves/embed_loss.csv"))?;
    ctx.record("curves/embed_loss.csv")?;

    Checkpoint::from_host(&model, cfg.embed.epochs, &train.name)
        .save(ctx.artifact_path("checkpoints/watermarked.ckpt"))?;
    ctx.record("checkpoints/watermarked.ckpt")?;
    Checkpoint::from_sanet(&sanet, cfg.embed.epochs, &train.name)
        .save(ctx.artifact_path("checkpoints/sanet.ckpt"))?;
    ctx.record("checkpoints/sanet.ckpt")?;

    let metrics = EmbedMetrics {
        arch: cfg.arch,
        test_acc: evaluate_accuracy(&model, &test_ds)?,
        trigger_acc: evaluate_accuracy(&model, &trigger_ds)?,
        auth_acc: evaluate_sanet_accuracy(&sanet, &auth_ds)?,
        delta_selected: crate::verification::extract_delta_from(
            &sanet,
            &keys,
            crate::verification::DeltaMode::SelectedOnly,
        )?,
        delta_literal: crate::verification::extract_delta_from(
            &sanet,
            &keys,
            crate::verification::DeltaMode::Literal,
        )?,
        keys_fingerprint: keys.fingerprint(),
        epochs: cfg.embed.epochs,
        lambda_wm: cfg.embed.lambda_wm,
    };
    ctx.write_report(
        "reports/embed_metrics.json",
        &serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(metrics)
}

/// What to verify: a local checkpoint or a label-server command line.
#[derive(Debug, Clone)]
pub enum SuspectSource {
    Checkpoint(PathBuf),
    Command(String),
}

/// Runs one verification channel against the suspect and writes the report.
/// The extraction channel inspects the owner's SANet carrier and ignores the
/// suspect source.
pub fn cmd_verify(
    ctx: &RunContext,
    suspect: Option<&SuspectSource>,
    channel: Channel,
) -> Result<VerificationReport> {
    let stamp = ctx.config.created_at.clone();
    let report = match channel {
        Channel::Blackbox => {
            let triggers = ctx.triggers()?;
            let mut client: Box<dyn QueryClient> = match suspect {
                Some(SuspectSource::Checkpoint(path)) => {
                    let model = host_from_checkpoint(&Checkpoint::load(path)?)?;
                    Box::new(LocalClient::new(model, ctx.encoder()?))
                }
                Some(SuspectSource::Command(cmdline)) => {
                    let parts: Vec<String> =
                        cmdline.split_whitespace().map(str::to_string).collect();
                    let (program, args) = parts
                        .split_first()
                        .ok_or_else(|| Error::invalid("empty suspect command"))?;
                    Box::new(ChildProcessClient::spawn(program, args)?)
                }
                None => return Err(Error::invalid("blackbox verification needs a suspect")),
            };
            verify_blackbox(client.as_mut(), &triggers, DEFAULT_EPSILON, &stamp)?
        }
        Channel::Whitebox => {
            let path = match suspect {
                Some(SuspectSource::Checkpoint(path)) => path.clone(),
                _ => return Err(Error::invalid("whitebox verification needs a suspect checkpoint")),
            };
            let suspect_ckpt = Checkpoint::load(path)?;
            let sanet = ctx.sanet()?;
            let auth = ctx.auth()?;
            verify_whitebox(
                &suspect_ckpt,
                &sanet,
                &auth,
                &ctx.encoder()?,
                DEFAULT_EPSILON,
                &stamp,
            )?
        }
        Channel::Extraction => {
            let sanet = ctx.sanet()?;
            let keys = ctx.keys()?;
            verify_extraction(&sanet, &keys, DEFAULT_DELTA_THRESHOLD, &stamp)?
        }
    };
    let name = match channel {
        Channel::Blackbox => "reports/verify_blackbox.json",
        Channel::Whitebox => "reports/verify_whitebox.json",
        Channel::Extraction => "reports/verify_extraction.json",
    };
    ctx.write_report(name, &report.to_json()?)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    FinetuneGlobal,
    ReplaceHead,
    Prune,
    ForgeTrigger,
    ForgeSanet,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(AttackKind::FinetuneGlobal),
            "replace-head" => Ok(AttackKind::ReplaceHead),
            "prune" => Ok(AttackKind::Prune),
            "forge-trigger" => Ok(AttackKind::ForgeTrigger),
            "forge-sanet" => Ok(AttackKind::ForgeSanet),
            other => Err(Error::invalid(format!(
                "unknown attack '{other}' (finetune|replace-head|prune|forge-trigger|forge-sanet)"
            ))),
        }
    }
}

/// Runs one robustness attack against the watermarked model and records the
/// result plus any curve.
pub fn cmd_attack(ctx: &RunContext, kind: AttackKind, epochs: usize) -> Result<AttackResult> {
    let cfg = &ctx.config;
    let test = ctx.load_test_corpus()?;
    let encoder = ctx.encoder()?;
    let model_wm = ctx.watermarked_model()?;
    let sanet = ctx.sanet()?;
    let keys = ctx.keys()?;
    let triggers = ctx.triggers()?;
    let auth = ctx.auth()?;

    let test_ds = EncodedDataset::from_corpus(&test, &encoder);
    let trigger_ds = triggers.to_dataset(&encoder, test.num_classes);
    let auth_ds = auth.to_dataset(&encoder);
    let probe = WatermarkProbe {
        test: &test_ds,
        triggers: &trigger_ds,
        auth: &auth_ds,
        sanet_specific: &sanet,
        keys: &keys,
    };
    let split_seed = cfg.train.seed ^ ADVERSARY_SPLIT_SALT;
    let sample_every = (epochs / 10).max(1);

    let result = match kind {
        AttackKind::FinetuneGlobal => {
            let (adv, _) = split(&test, 0.2, split_seed)?;
            let adv_ds = EncodedDataset::from_corpus(&adv, &encoder);
            let (_, result) =
                finetune_global(&model_wm, &adv_ds, epochs, &cfg.embed, &probe, sample_every)?;
            result
        }
        AttackKind::ReplaceHead => {
            let alt = cfg
                .alt_corpus
                .as_ref()
                .ok_or_else(|| Error::invalid("replace-head attack needs alt_corpus"))?;
            let alt_train = load_corpus_with_classes(
                ctx.input_path(&alt.train_path),
                alt.format,
                Some(alt.num_classes),
            )?;
            let (adv, _) = split(&alt_train, 0.2, split_seed)?;
            let adv_ds = EncodedDataset::from_corpus(&adv, &encoder);
            let (_, result) = replace_head_finetune(
                &model_wm,
                alt.num_classes,
                &adv_ds,
                epochs,
                &cfg.embed,
                &probe,
                sample_every,
            )?;
            result
        }
        AttackKind::Prune => {
            let rates: Vec<f64> = (0..=9).map(|i| i as f64 / 10.0).collect();
            prune_sweep(&model_wm, &rates, split_seed, &probe)?
        }
        AttackKind::ForgeTrigger => forge_trigger_attack(
            &model_wm,
            &test,
            &encoder,
            1,
            epochs,
            &cfg.embed,
            &probe,
        )?,
        AttackKind::ForgeSanet => forge_sanet_attack(
            &model_wm,
            &test,
            &encoder,
            cfg.n_auth_pairs.min(test.len() / 2),
            epochs,
            &cfg.embed,
            &probe,
            &auth_ds,
        )?,
    };

    let json_name = format!("reports/attack_{}.json", result.name);
    ctx.write_report(&json_name, &result.to_json()?)?;
    if !result.curve.is_empty() {
        let csv_name = format!("curves/attack_{}.csv", result.name);
        fs::write(ctx.artifact_path(&csv_name), result.curve_csv())?;
        ctx.record(&csv_name)?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcealmentComparison {
    pub ours: ConcealmentReport,
    pub rareword_baseline: ConcealmentReport,
}

const RARE_WORDS: [&str; 4] = ["cf", "mn", "bb", "tq"];

/// Concealment lab: calibrates the outlier-word defense on clean text, then
/// compares the covert trigger set against a rare-word-insertion baseline
/// backdoored into a twin model.
pub fn cmd_conceal(ctx: &RunContext) -> Result<ConcealmentComparison> {
    let cfg = &ctx.config;
    let train = ctx.load_train_corpus()?;
    let test = ctx.load_test_corpus()?;
    let encoder = ctx.encoder()?;
    let model_wm = ctx.watermarked_model()?;
    let triggers = ctx.triggers()?;

    let scorer = NgramScorer::train(&train, 0.1)?;
    let (validation, _) = split(&train, 0.2, cfg.train.seed ^ ADVERSARY_SPLIT_SALT)?;
    let validation_texts: Vec<&str> =
        validation.samples().iter().map(|s| s.text.as_str()).collect();
    let tau = calibrate_tau(&scorer, &validation_texts, 0.1)?;

    let ours = evaluate_concealment(&model_wm, &encoder, &triggers, &test, &scorer, tau)?;

    // Baseline: backdoor a twin of the clean model with rare-word triggers.
    let rare = rareword_trigger_baseline(
        &train,
        &RARE_WORDS,
        1,
        100.min(train.len() / 4),
        cfg.train.seed ^ 0xBA5E,
    )?;
    let mut backdoored = ctx.clean_model()?;
    let train_ds = EncodedDataset::from_corpus(&train, &encoder);
    let rare_ds = rare.to_dataset(&encoder, train.num_classes);
    crate::training::train_with_triggers(
        &mut backdoored,
        &train_ds,
        Some(&rare_ds),
        &cfg.embed,
        |_, _| Ok(()),
    )?;
    let baseline = evaluate_concealment(&backdoored, &encoder, &rare, &test, &scorer, tau)?;

    // Audit trail: per-token suspicion scores over both trigger sets.
    let mut csv = String::from("set,item,token,suspicion\n");
    for (set_name, set) in [("ours", &triggers), ("rareword", &rare)] {
        for item in &set.items {
            if crate::corpus::tokenize(&item.text).len() < 2 {
                continue;
            }
            for (tok, f) in suspicion_scores(&item.text, &scorer)? {
                csv.push_str(&format!("{set_name},{},{tok},{f}\n", item.id));
            }
        }
    }
    fs::write(ctx.artifact_path("curves/suspicion.csv"), csv)?;
    ctx.record("curves/suspicion.csv")?;

    let comparison = ConcealmentComparison {
        ours,
        rareword_baseline: baseline,
    };
    ctx.write_report(
        "reports/concealment.json",
        &serde_json::to_string_pretty(&comparison)?,
    )?;
    Ok(comparison)
}

/// Renders a Markdown and JSON summary of everything present in a run
/// directory.
pub fn cmd_report(run_dir: impl AsRef<Path>) -> Result<String> {
    let run_dir = run_dir.as_ref();
    let read_json = |name: &str| -> Option<serde_json::Value> {
        let path = run_dir.join(name);
        fs::read_to_string(path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
    };

    let clean = read_json("reports/clean_metrics.json");
    let embed = read_json("reports/embed_metrics.json");
    let concealment = read_json("reports/concealment.json");
    let verifications: Vec<(String, serde_json::Value)> = ["blackbox", "whitebox", "extraction"]
        .iter()
        .filter_map(|ch| {
            read_json(&format!("reports/verify_{ch}.json")).map(|v| (ch.to_string(), v))
        })
        .collect();
    let attacks: Vec<(String, serde_json::Value)> =
        ["finetune_global", "replace_head_finetune", "prune_random", "forge_trigger", "forge_sanet"]
            .iter()
            .filter_map(|name| {
                read_json(&format!("reports/attack_{name}.json")).map(|v| (name.to_string(), v))
            })
            .collect();

    let f = |v: &serde_json::Value, key: &str| -> String {
        v.get(key)
            .and_then(|x| x.as_f64())
            .map(|x| format!("{x:.4}"))
            .unwrap_or_else(|| "-".to_string())
    };

    let mut md = String::from("# Run summary\n");
    if let (Some(c), Some(e)) = (&clean, &embed) {
        md.push_str("\n## Fidelity\n\n");
        md.push_str("| model | test acc |\n|---|---|\n");
        md.push_str(&format!("| clean | {} |\n", f(c, "test_acc")));
        md.push_str(&format!("| watermarked | {} |\n", f(e, "test_acc")));
    }
    if let Some(e) = &embed {
        md.push_str("\n## Validity and extraction\n\n");
        md.push_str("| metric | value |\n|---|---|\n");
        md.push_str(&format!("| trigger set accuracy | {} |\n", f(e, "trigger_acc")));
        md.push_str(&format!("| auth set accuracy | {} |\n", f(e, "auth_acc")));
        md.push_str(&format!("| delta (selected) | {} |\n", f(e, "delta_selected")));
        md.push_str(&format!("| delta (literal) | {} |\n", f(e, "delta_literal")));
    }
    if !verifications.is_empty() {
        md.push_str("\n## Verification\n\n");
        md.push_str("| channel | metric | threshold | decision |\n|---|---|---|---|\n");
        for (ch, v) in &verifications {
            let decision = v
                .get("decision")
                .and_then(|d| d.as_bool())
                .map(|d| if d { "owned" } else { "not owned" })
                .unwrap_or("-");
            md.push_str(&format!(
                "| {ch} | {} | {} | {decision} |\n",
                f(v, "metric"),
                f(v, "threshold")
            ));
        }
    }
    if !attacks.is_empty() {
        md.push_str("\n## Robustness\n\n");
        md.push_str(
            "| attack | post test acc | post trigger acc | post auth acc |\n|---|---|---|---|\n",
        );
        for (name, v) in &attacks {
            let post = v.get("post").cloned().unwrap_or_default();
            md.push_str(&format!(
                "| {name} | {} | {} | {} |\n",
                f(&post, "test_acc"),
                f(&post, "trigger_acc"),
                f(&post, "auth_acc")
            ));
        }
    }
    if let Some(c) = &concealment {
        md.push_str("\n## Concealment\n\n");
        md.push_str("| scheme | ASR | ASR' | CACC | CACC' |\n|---|---|---|---|---|\n");
        for (label, key) in [("ours", "ours"), ("rare-word baseline", "rareword_baseline")] {
            if let Some(r) = c.get(key) {
                md.push_str(&format!(
                    "| {label} | {} | {} | {} | {} |\n",
                    f(r, "asr"),
                    f(r, "asr_defended"),
                    f(r, "cacc"),
                    f(r, "cacc_defended")
                ));
            }
        }
    }

    let summary = serde_json::json!({
        "clean": clean,
        "embed": embed,
        "verifications": verifications.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>(),
        "attacks": attacks.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>(),
        "concealment": concealment,
    });
    fs::create_dir_all(run_dir.join("reports"))?;
    fs::write(
        run_dir.join("reports/summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    fs::write(run_dir.join("reports/summary.md"), &md)?;
    Ok(md)
}

/// Writes the two desk-scale synthetic corpora as JSONL files.
pub fn cmd_gen_corpus(
    kind: &str,
    seed: u64,
    n_train: usize,
    n_test: usize,
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<()> {
    let (train, test) = match kind {
        "sent2" => crate::synth::sentiment2(seed, n_train, n_test)?,
        "topic4" => crate::synth::topic4(seed, n_train, n_test)?,
        other => {
            return Err(Error::invalid(format!(
                "unknown corpus kind '{other}' (sent2|topic4)"
            )))
        }
    };
    train.save_jsonl(train_path)?;
    test.save_jsonl(test_path)?;
    Ok(())
}
