//! Seeded synthetic corpora for desk-scale runs.
//!
//! Two generators share one word universe so that a model trained on either
//! corpus still sees mostly in-vocabulary tokens when fed the other corpus
//! (cross-task fine-tuning needs that overlap). Texts are built from weighted
//! filler collocations plus class keywords, so labels are recoverable from
//! keyword counts and token frequencies have a realistic head/tail shape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::{Corpus, TextSample};
use crate::error::Result;

const FILLER_CHUNKS: &[&str] = &[
    "the movie",
    "this film",
    "i think",
    "it was",
    "on the whole",
    "to be honest",
    "the story",
    "the plot",
    "in my opinion",
    "after a while",
    "the acting",
    "we watched",
    "a little",
    "kind of",
    "from start to finish",
    "the ending",
    "the first half",
    "the second half",
    "overall",
    "honestly",
    "for what it is",
    "more or less",
    "at times",
    "by the end",
    "the whole thing",
    "you can tell",
    "it turns out",
    "in the end",
    "the characters",
    "the director",
    "the writing",
    "the pacing",
    "the soundtrack",
    "every scene",
    "most of it",
    "some parts",
    "the dialogue",
    "the cast",
    "as expected",
    "to my surprise",
    "looking back",
    "all things considered",
    "the premise",
    "the setting",
    "scene by scene",
    "the opening",
    "a few moments",
    "here and there",
    "now and then",
    "the review",
    "people say",
    "critics claim",
    "my friend said",
    "the trailer",
    "word of mouth",
    "the runtime",
    "two hours",
    "the budget",
    "the sequel",
    "the original",
    "compared to others",
    "in general",
    "frankly speaking",
    "oddly enough",
    "strangely",
    "somehow",
    "apparently",
    "supposedly",
    "evidently",
    "remarkably",
    "curiously",
    "the narration",
    "the cinematography",
    "the editing",
    "the costumes",
    "the humor",
    "the tone",
    "the atmosphere",
    "the message",
    "the twist",
    "halfway through",
    "right away",
    "without a doubt",
    "against all odds",
    "under the surface",
    "between the lines",
    "despite everything",
    "given the chance",
    "once again",
    "year after year",
    "time and again",
    "the matinee crowd",
    "the late showing",
    "an odd subplot",
    "a minor quibble",
    "a stray detail",
    "the festival cut",
    "the extended version",
    "an uncredited cameo",
    "the foley work",
    "the intermission",
];

const POS_WORDS: &[&str] = &[
    "great",
    "excellent",
    "wonderful",
    "brilliant",
    "superb",
    "delightful",
    "charming",
    "masterful",
    "gripping",
    "moving",
    "stunning",
    "memorable",
    "fantastic",
    "terrific",
    "impressive",
    "beautiful",
    "outstanding",
    "flawless",
    "inspired",
    "captivating",
    "rewarding",
    "magnificent",
    "refreshing",
    "satisfying",
    "splendid",
    "enjoyable",
    "heartfelt",
    "polished",
];

const NEG_WORDS: &[&str] = &[
    "terrible",
    "awful",
    "boring",
    "dreadful",
    "dull",
    "clumsy",
    "tedious",
    "painful",
    "shallow",
    "messy",
    "horrible",
    "lousy",
    "weak",
    "annoying",
    "embarrassing",
    "pointless",
    "forgettable",
    "lazy",
    "bland",
    "disappointing",
    "miserable",
    "incoherent",
    "amateurish",
    "lifeless",
    "sloppy",
    "tiresome",
    "grating",
    "hollow",
];

const TOPIC_WORDS: [&[&str]; 4] = [
    &[
        "match",
        "season",
        "coach",
        "league",
        "tournament",
        "striker",
        "goal",
        "playoff",
        "stadium",
        "referee",
        "roster",
        "champion",
        "defense",
        "offense",
        "draft",
        "inning",
        "marathon",
        "sprint",
        "scoreboard",
        "halftime",
        "umpire",
        "relay",
    ],
    &[
        "processor",
        "software",
        "startup",
        "gadget",
        "browser",
        "encryption",
        "server",
        "database",
        "robot",
        "chip",
        "network",
        "platform",
        "algorithm",
        "interface",
        "firmware",
        "prototype",
        "silicon",
        "cloud",
        "kernel",
        "compiler",
        "sensor",
        "bandwidth",
    ],
    &[
        "market",
        "shares",
        "investor",
        "profit",
        "earnings",
        "dividend",
        "merger",
        "currency",
        "inflation",
        "portfolio",
        "revenue",
        "quarterly",
        "bonds",
        "trading",
        "banker",
        "deficit",
        "stimulus",
        "audit",
        "hedge",
        "tariff",
        "treasury",
        "lender",
    ],
    &[
        "voyage",
        "resort",
        "passport",
        "itinerary",
        "airline",
        "luggage",
        "tourist",
        "harbor",
        "museum",
        "safari",
        "cruise",
        "hostel",
        "landmark",
        "souvenir",
        "embassy",
        "jetlag",
        "backpacker",
        "lagoon",
        "monsoon",
        "carnival",
        "visa",
        "customs",
    ],
];

const PUNCT: &[&str] = &[".", ",", "!"];

const SYLLABLES: [&str; 24] = [
    "bran", "cel", "dor", "fin", "gal", "hol", "jun", "kel", "lor", "mun", "nar", "pol", "quil",
    "ris", "sol", "tam", "urv", "vin", "wex", "yol", "zan", "bru", "cli", "dru",
];

/// Deterministic pseudo-word pool standing in for the rare-token tail of a
/// real corpus (names, places, typos). The index is written out in base-24
/// syllable digits, so distinct indices give distinct words.
fn rare_word(mut index: usize) -> String {
    let n = SYLLABLES.len();
    let mut word = String::new();
    loop {
        word.push_str(SYLLABLES[index % n]);
        index /= n;
        if index == 0 {
            break;
        }
    }
    word
}

/// Mid-frequency detail words: each lands in a handful of texts, so they
/// enter the vocabulary but rarely recur in any small fine-tuning slice.
const ANCHOR_POOL: usize = 6000;
/// Offset into the pseudo-word space for effectively-unique singletons.
const SINGLETON_BASE: usize = 100_000;
const SINGLETON_SPAN: usize = 8_000_000;

fn rare_words_for_text(rng: &mut ChaCha20Rng) -> Vec<String> {
    let mut words = Vec::new();
    for _ in 0..rng.random_range(5..=7) {
        words.push(rare_word(rng.random_range(0..ANCHOR_POOL)));
    }
    let roll: f64 = rng.random();
    let singletons = if roll < 0.3 {
        0
    } else if roll < 0.7 {
        1
    } else {
        2
    };
    for _ in 0..singletons {
        words.push(rare_word(SINGLETON_BASE + rng.random_range(0..SINGLETON_SPAN)));
    }
    words
}

fn pick_chunk(rng: &mut ChaCha20Rng) -> &'static str {
    // Squaring the uniform draw skews selection toward low ranks, giving the
    // token frequency distribution a head and a tail.
    let u: f64 = rng.random::<f64>();
    let idx = ((u * u) * FILLER_CHUNKS.len() as f64) as usize;
    FILLER_CHUNKS[idx.min(FILLER_CHUNKS.len() - 1)]
}

fn pick<'a>(rng: &mut ChaCha20Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn decorate(rng: &mut ChaCha20Rng, word: &str) -> String {
    let mut w = word.to_string();
    if rng.random::<f64>() < 0.08 {
        let mut chars = w.chars();
        if let Some(first) = chars.next() {
            w = first.to_uppercase().collect::<String>() + chars.as_str();
        }
    }
    if rng.random::<f64>() < 0.12 {
        w.push_str(PUNCT[rng.random_range(0..PUNCT.len())]);
    }
    w
}

fn assemble(rng: &mut ChaCha20Rng, keywords: &[&str]) -> String {
    let n_chunks = rng.random_range(7..=14);
    let mut words: Vec<String> = Vec::new();
    for _ in 0..n_chunks {
        for w in pick_chunk(rng).split(' ') {
            words.push(w.to_string());
        }
    }
    for kw in keywords {
        let pos = rng.random_range(0..=words.len());
        words.insert(pos, kw.to_string());
    }
    for rare in rare_words_for_text(rng) {
        let pos = rng.random_range(0..=words.len());
        words.insert(pos, rare);
    }
    // Some texts open with a name-like rare token (occasionally two), the way
    // reviews open with a title or speaker.
    let lead: f64 = rng.random();
    if lead < 0.05 {
        for _ in 0..2 {
            words.insert(
                0,
                rare_word(SINGLETON_BASE + rng.random_range(0..SINGLETON_SPAN)),
            );
        }
    } else if lead < 0.2 {
        words.insert(
            0,
            rare_word(SINGLETON_BASE + rng.random_range(0..SINGLETON_SPAN)),
        );
    }
    let decorated: Vec<String> = words.iter().map(|w| decorate(rng, w)).collect();
    decorated.join(" ")
}

fn sentiment_text(rng: &mut ChaCha20Rng, label: usize) -> String {
    let (own, other) = if label == 0 {
        (POS_WORDS, NEG_WORDS)
    } else {
        (NEG_WORDS, POS_WORDS)
    };
    let mut keywords: Vec<&str> = Vec::new();
    for _ in 0..rng.random_range(3..=5) {
        keywords.push(pick(rng, own));
    }
    if rng.random::<f64>() < 0.45 {
        for _ in 0..rng.random_range(1..=2) {
            keywords.push(pick(rng, other));
        }
    }
    if rng.random::<f64>() < 0.35 {
        let topic = rng.random_range(0..4);
        for _ in 0..rng.random_range(1..=2) {
            keywords.push(pick(rng, TOPIC_WORDS[topic]));
        }
    }
    assemble(rng, &keywords)
}

fn topic_text(rng: &mut ChaCha20Rng, label: usize) -> String {
    let mut keywords: Vec<&str> = Vec::new();
    for _ in 0..rng.random_range(3..=5) {
        keywords.push(pick(rng, TOPIC_WORDS[label]));
    }
    if rng.random::<f64>() < 0.4 {
        let other = (label + rng.random_range(1..4)) % 4;
        keywords.push(pick(rng, TOPIC_WORDS[other]));
    }
    if rng.random::<f64>() < 0.3 {
        let pool = if rng.random::<bool>() { POS_WORDS } else { NEG_WORDS };
        keywords.push(pick(rng, pool));
    }
    assemble(rng, &keywords)
}

fn generate(
    name: &str,
    num_classes: usize,
    seed: u64,
    n_train: usize,
    n_test: usize,
    text_fn: impl Fn(&mut ChaCha20Rng, usize) -> String,
) -> Result<(Corpus, Corpus)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha20Rng, prefix: &str, n: usize| -> Vec<TextSample> {
        (0..n)
            .map(|i| {
                let label = i % num_classes;
                TextSample {
                    id: format!("{name}-{prefix}:{i}"),
                    text: text_fn(rng, label),
                    label,
                }
            })
            .collect()
    };
    let train = make(&mut rng, "train", n_train);
    let test = make(&mut rng, "test", n_test);
    Ok((
        Corpus::new(format!("{name}-train"), num_classes, train)?,
        Corpus::new(format!("{name}-test"), num_classes, test)?,
    ))
}

/// Two-class sentiment-style corpus (train, test).
pub fn sentiment2(seed: u64, n_train: usize, n_test: usize) -> Result<(Corpus, Corpus)> {
    generate("sent2", 2, seed, n_train, n_test, sentiment_text)
}

/// Four-class topic-style corpus (train, test).
pub fn topic4(seed: u64, n_train: usize, n_test: usize) -> Result<(Corpus, Corpus)> {
    generate("topic4", 4, seed, n_train, n_test, topic_text)
}
