//! Shared fixtures for the criterion benchmarks.

use textmark_core::corpus::{build_vocab, Corpus, Encoder};
use textmark_core::model::{build_model, Arch, HostModel};
use textmark_core::synth;
use textmark_core::training::EncodedDataset;

pub struct BenchFixture {
    pub train: Corpus,
    pub encoder: Encoder,
    pub batch: EncodedDataset,
}

pub fn fixture() -> BenchFixture {
    let (train, _) = synth::sentiment2(7, 512, 16).expect("synth corpus");
    let vocab = build_vocab(&train, 1, 20000).expect("vocab");
    let encoder = Encoder::new(vocab, 32).expect("encoder");
    let batch = EncodedDataset::from_texts(
        train
            .samples()
            .iter()
            .take(64)
            .map(|s| (s.text.as_str(), s.label)),
        &encoder,
        2,
    );
    BenchFixture {
        train,
        encoder,
        batch,
    }
}

pub fn model_for(arch: Arch, fixture: &BenchFixture) -> HostModel {
    build_model(arch, fixture.encoder.vocab.len(), 64, 64, 2, 3).expect("model")
}
