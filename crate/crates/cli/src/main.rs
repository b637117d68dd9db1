//! `textmark` command-line driver.
//!
//! Exit codes: 0 = success (or ownership verified), 2 = verification
//! negative (not owned), 1 = any error.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use textmark_core::checkpoint::{host_from_checkpoint, Checkpoint};
use textmark_core::corpus::{Encoder, Vocabulary};
use textmark_core::material::{generate_kappa1, save_key_hex};
use textmark_core::model::predict_label;
use textmark_core::run::{
    cmd_attack, cmd_conceal, cmd_embed, cmd_gen_corpus, cmd_gen_material, cmd_report,
    cmd_train_clean, cmd_verify, AttackKind, RunContext, SuspectSource,
};
use textmark_core::verification::Channel;

#[derive(Parser)]
#[command(
    name = "textmark",
    version,
    about = "Dual-channel watermarking for small neural text classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean host model named by the config.
    TrainClean {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate trigger set, authentication set and watermark keys.
    GenMaterial {
        #[arg(long)]
        config: PathBuf,
    },
    /// Embed the dual-channel watermark by alternating training.
    Embed {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify ownership of a suspect model over one channel.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Suspect checkpoint path (blackbox and whitebox channels).
        #[arg(long)]
        suspect: Option<PathBuf>,
        /// Suspect label-server command line (blackbox channel).
        #[arg(long)]
        suspect_cmd: Option<String>,
        /// blackbox | whitebox | extract
        #[arg(long)]
        channel: String,
    },
    /// Run a robustness or forging attack against the watermarked model.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// finetune | replace-head | prune | forge-trigger | forge-sanet
        #[arg(long)]
        attack: String,
        /// Fine-tuning epoch budget (ignored by prune).
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
    /// Compare trigger concealment against a rare-word baseline under the
    /// perplexity defense.
    Conceal {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a Markdown + JSON summary of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write a synthetic desk-scale corpus pair as JSONL.
    GenCorpus {
        /// sent2 | topic4
        #[arg(long)]
        kind: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Write a fresh owner secret key file (hex).
    GenKey {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        bytes: usize,
        /// Seed for a reproducible key; omit for OS entropy.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve labels over the line protocol: text lines in on stdin, integer
    /// labels out on stdout.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
}

fn parse_channel(s: &str) -> anyhow::Result<Channel> {
    match s {
        "blackbox" => Ok(Channel::Blackbox),
        "whitebox" => Ok(Channel::Whitebox),
        "extract" | "extraction" => Ok(Channel::Extraction),
        other => anyhow::bail!("unknown channel '{other}' (blackbox|whitebox|extract)"),
    }
}

fn serve(checkpoint: &PathBuf, vocab: &PathBuf, max_len: usize) -> anyhow::Result<()> {
    let model = host_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let encoder = Encoder::new(Vocabulary::load(vocab)?, max_len)?;
    let stdin = std::io::stdin().lock();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lines() {
        let line = line?;
        let label = predict_label(&model, &encoder.encode(&line))?;
        writeln!(stdout, "{label}")?;
        stdout.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::TrainClean { config } => {
            let ctx = RunContext::open(&config)?;
            let metrics = cmd_train_clean(&ctx)?;
            println!(
                "clean model trained: train acc {:.4}, test acc {:.4}",
                metrics.train_acc, metrics.test_acc
            );
            Ok(0)
        }
        Command::GenMaterial { config } => {
            let ctx = RunContext::open(&config)?;
            cmd_gen_material(&ctx)?;
            println!(
                "material written to {}",
                ctx.run_dir.join("material").display()
            );
            Ok(0)
        }
        Command::Embed { config } => {
            let ctx = RunContext::open(&config)?;
            let m = cmd_embed(&ctx)?;
            println!(
                "watermark embedded: test acc {:.4}, trigger acc {:.4}, auth acc {:.4}, delta {:.4}",
                m.test_acc, m.trigger_acc, m.auth_acc, m.delta_selected
            );
            Ok(0)
        }
        Command::Verify {
            config,
            suspect,
            suspect_cmd,
            channel,
        } => {
            let ctx = RunContext::open(&config)?;
            let channel = parse_channel(&channel)?;
            let source = match (suspect, suspect_cmd) {
                (Some(path), None) => Some(SuspectSource::Checkpoint(path)),
                (None, Some(cmdline)) => Some(SuspectSource::Command(cmdline)),
                (None, None) => None,
                (Some(_), Some(_)) => {
                    anyhow::bail!("give either --suspect or --suspect-cmd, not both")
                }
            };
            let report = cmd_verify(&ctx, source.as_ref(), channel)?;
            println!("{}", report.to_json()?);
            Ok(if report.decision { 0 } else { 2 })
        }
        Command::Attack {
            config,
            attack,
            epochs,
        } => {
            let ctx = RunContext::open(&config)?;
            let kind: AttackKind = attack.parse()?;
            let result = cmd_attack(&ctx, kind, epochs)?;
            println!(
                "attack {} done: post test acc {:.4}, trigger acc {:.4}, auth acc {:.4}",
                result.name, result.post.test_acc, result.post.trigger_acc, result.post.auth_acc
            );
            Ok(0)
        }
        Command::Conceal { config } => {
            let ctx = RunContext::open(&config)?;
            let cmp = cmd_conceal(&ctx)?;
            println!(
                "concealment: ours ASR' {:.4} vs rare-word baseline ASR' {:.4} (tau {:.4})",
                cmp.ours.asr_defended, cmp.rareword_baseline.asr_defended, cmp.ours.tau
            );
            Ok(0)
        }
        Command::Report { run_dir } => {
            let md = cmd_report(&run_dir)?;
            println!("{md}");
            Ok(0)
        }
        Command::GenCorpus {
            kind,
            seed,
            train,
            test,
            out_train,
            out_test,
        } => {
            cmd_gen_corpus(&kind, seed, train, test, &out_train, &out_test)?;
            println!(
                "wrote {} ({train} samples) and {} ({test} samples)",
                out_train.display(),
                out_test.display()
            );
            Ok(0)
        }
        Command::GenKey { out, bytes, seed } => {
            let key = generate_kappa1(bytes, seed)?;
            save_key_hex(&out, &key)?;
            println!("wrote {} ({bytes} bytes)", out.display());
            Ok(0)
        }
        Command::Serve {
            checkpoint,
            vocab,
            max_len,
        } => {
            serve(&checkpoint, &vocab, max_len)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep exit code 2 reserved for "not owned".
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
