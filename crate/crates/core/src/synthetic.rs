//! Synthetic topic corpora with disjoint per-topic vocabularies.

use rand::Rng as _;

use crate::corpus::{clean_and_tokenize, encode_document, Document, RawDoc, Vocabulary, DEFAULT_MAX_LEN, DEFAULT_MAX_VOCAB};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub docs: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            docs: 2000,
            topics: 4,
            words_per_topic: 24,
            min_len: 3,
            max_len: 6,
            seed: 0,
        }
    }
}

pub fn topic_word(topic: usize, word: usize) -> String {
    format!("t{topic}w{word}")
}

/// Documents with round-robin topic labels; each token is drawn uniformly
/// from its topic's own words.
pub fn generate(cfg: &SyntheticConfig) -> Vec<RawDoc> {
    let mut rng = stream(cfg.seed, Stream::Synthetic);
    (0..cfg.docs)
        .map(|i| {
            let topic = i % cfg.topics;
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let words: Vec<String> = (0..len)
                .map(|_| topic_word(topic, rng.random_range(0..cfg.words_per_topic)))
                .collect();
            RawDoc {
                id: format!("syn-{i:05}"),
                text: words.join(" "),
                label: Some(topic as u32),
            }
        })
        .collect()
}

/// Tokenizes raw documents and builds their vocabulary.
pub fn tokenize(raw: &[RawDoc]) -> (Vocabulary, Vec<Document>) {
    let tokens: Vec<Vec<String>> = raw.iter().map(|d| clean_and_tokenize(&d.text)).collect();
    let vocab = Vocabulary::build(&tokens, DEFAULT_MAX_VOCAB);
    let docs = raw
        .iter()
        .map(|d| encode_document(d.id.clone(), &d.text, d.label, &vocab, DEFAULT_MAX_LEN))
        .collect();
    (vocab, docs)
}
