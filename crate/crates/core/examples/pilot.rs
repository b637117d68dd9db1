//! Scratch pilot for desk-scale dynamics. Not part of the deliverable.

use std::time::Instant;

use textmark_core::attack::*;
use textmark_core::corpus::{build_vocab, split, Corpus, Encoder};
use textmark_core::material::*;
use textmark_core::model::{build_model, build_sanet, Arch, HostModel, SANet};
use textmark_core::synth;
use textmark_core::training::*;
use textmark_core::verification::*;

struct Combo {
    #[allow(dead_code)]
    arch: Arch,
    encoder: Encoder,
    train: Corpus,
    test: Corpus,
    train_ds: EncodedDataset,
    test_ds: EncodedDataset,
    clean_test_acc: f64,
    model: HostModel,
    sanet: SANet,
    trigger_ds: EncodedDataset,
    auth_ds: EncodedDataset,
    keys: WatermarkKeys,
}

fn build_combo(arch: Arch, classes: usize, embed_cfg: &TrainConfig) -> Combo {
    let (train, test) = if classes == 2 {
        synth::sentiment2(101, 2000, 500).unwrap()
    } else {
        synth::topic4(102, 2000, 400).unwrap()
    };
    let vocab = build_vocab(&train, 2, 20000).unwrap();
    let encoder = Encoder::new(vocab, 48).unwrap();
    let train_ds = EncodedDataset::from_corpus(&train, &encoder);
    let test_ds = EncodedDataset::from_corpus(&test, &encoder);

    let mut model = build_model(arch, encoder.vocab.len(), 64, 64, classes, 1000).unwrap();
    train_clean(&mut model, &train_ds, &TrainConfig::desk(12, 1000)).unwrap();
    let clean_test_acc = evaluate_accuracy(&model, &test_ds).unwrap();

    let m_per_class = if classes == 2 { 10 } else { 5 };
    let triggers = generate_trigger_set(&model, &encoder, &train, m_per_class, 70).unwrap();
    let trigger_ds = triggers.to_dataset(&encoder, classes);
    let digest = compute_digest(&[9u8; 32], "Pilot Owner").unwrap();
    let auth = generate_auth_set(&train, 150, &digest, 71).unwrap();
    let auth_ds = auth.to_dataset(&encoder);
    let keys = generate_keys((16, 2), 0.5, 72).unwrap();

    let mut sanet = build_sanet(&model, encoder.vocab.len(), 64, (16, 2), 73).unwrap();
    embed_watermark(
        &mut model, &mut sanet, &train_ds, &trigger_ds, &auth_ds, &keys, embed_cfg,
    )
    .unwrap();

    Combo {
        arch,
        encoder,
        train,
        test,
        train_ds,
        test_ds,
        clean_test_acc,
        model,
        sanet,
        trigger_ds,
        auth_ds,
        keys,
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    let grids: Vec<(usize, usize)> = vec![(16, 40), (32, 30)];
    let archs: Vec<Arch> = match which.as_str() {
        "gru" => vec![Arch::Gru],
        "textcnn" => vec![Arch::TextCnn],
        "bilstm" => vec![Arch::BiLstm],
        _ => vec![Arch::TextCnn, Arch::Gru],
    };

    for (batch, epochs) in grids {
        println!("==== embed batch {batch} epochs {epochs} ====");
        for &arch in &archs {
            let ecfg = TrainConfig {
                batch_size: batch,
                ..TrainConfig::desk(epochs, 1001)
            };
            let t0 = Instant::now();
            let c = build_combo(arch, 2, &ecfg);
            let t_build = t0.elapsed().as_secs_f64();

            let wm_test = evaluate_accuracy(&c.model, &c.test_ds).unwrap();
            let wm_trig = evaluate_accuracy(&c.model, &c.trigger_ds).unwrap();
            let wm_auth = evaluate_sanet_accuracy(&c.sanet, &c.auth_ds).unwrap();
            let delta = extract_delta_from(&c.sanet, &c.keys, DeltaMode::SelectedOnly).unwrap();
            println!(
                "{arch:8} wm: test {wm_test:.3} (clean {:.3}, fid {:+.3}) trig {wm_trig:.3} auth {wm_auth:.3} d {delta:.4} ({t_build:.0}s)",
                c.clean_test_acc,
                wm_test - c.clean_test_acc
            );

            let probe = WatermarkProbe {
                test: &c.test_ds,
                triggers: &c.trigger_ds,
                auth: &c.auth_ds,
                sanet_specific: &c.sanet,
                keys: &c.keys,
            };
            // Attacks at desk defaults (batch 64).
            let attack_cfg = TrainConfig::desk(30, 2002);

            let (adv, _) = split(&c.test, 0.2, 55).unwrap();
            let adv_ds = EncodedDataset::from_corpus(&adv, &c.encoder);
            let (_, ft) = finetune_global(&c.model, &adv_ds, 30, &attack_cfg, &probe, 30).unwrap();
            println!(
                "  finetune30(b64): test {:.3} trig {:.3} auth {:.3}",
                ft.post.test_acc, ft.post.trigger_acc, ft.post.auth_acc
            );

            let forge =
                forge_trigger_attack(&c.model, &c.test, &c.encoder, 1, 15, &attack_cfg, &probe)
                    .unwrap();
            println!(
                "  forge-trigger(b64,15ep): owner trig {:.3} adv post {:.3}",
                forge.post.trigger_acc, forge.extra["adversary_trigger_acc_post"]
            );

            let (alt_train, _) = synth::topic4(102, 2000, 400).unwrap();
            let (alt_small, _) = split(&alt_train, 0.1, 56).unwrap();
            let alt_ds = EncodedDataset::from_corpus(&alt_small, &c.encoder);
            for ep in [20usize] {
                let (_, hr) = replace_head_finetune(&c.model, 4, &alt_ds, ep, &attack_cfg, &probe, 30)
                    .unwrap();
                println!(
                    "  replace-head(b64,{ep}ep): trig {:.3} (drop {:+.3}) auth {:.3}",
                    hr.post.trigger_acc,
                    hr.pre.trigger_acc - hr.post.trigger_acc,
                    hr.post.auth_acc
                );
            }

            let sweep = prune_sweep(
                &c.model,
                &[0.3, 0.4, 0.5, 0.6],
                9,
                &probe,
            )
            .unwrap();
            for p in &sweep.curve {
                let binding = p.test_acc >= c.clean_test_acc - 0.10;
                if binding {
                    println!(
                        "  prune {:.1} [binding]: test {:.3} trig {:.3} auth {:.3}",
                        p.x, p.test_acc, p.trigger_acc, p.auth_acc
                    );
                }
            }

            // FPR with independent clean twins (two seeds).
            for seed2 in [2000u64, 3000] {
                let mut clean2 =
                    build_model(arch, c.encoder.vocab.len(), 64, 64, 2, seed2).unwrap();
                train_clean(&mut clean2, &c.train_ds, &TrainConfig::desk(12, seed2)).unwrap();
                let fpr_trig = evaluate_accuracy(&clean2, &c.trigger_ds).unwrap();
                let assembled = c.sanet.deep_clone();
                textmark_core::checkpoint::load_backbone(
                    &assembled,
                    &textmark_core::checkpoint::Checkpoint::from_host(&clean2, 0, ""),
                )
                .unwrap();
                let fpr_auth = evaluate_sanet_accuracy(&assembled, &c.auth_ds).unwrap();
                println!("  fpr(seed {seed2}): trig {fpr_trig:.3} auth {fpr_auth:.3}");
            }
            drop(c.train);
        }
    }
}
