//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use gcn_core::corpus::{build_vocabulary, extract_datapoints, generate_synthetic_corpus, Corpus, SyntheticSpec};
use gcn_core::{ConditionalLM, DataPoint, LMConfig, Mode, TfidfIndex};

pub struct Fixture {
    pub corpus: Corpus,
    pub index: TfidfIndex,
    pub datapoints: Vec<DataPoint>,
    pub model: ConditionalLM,
}

/// The default synthetic corpus, its retrieval index and datapoints, and
/// an untrained desk-sized model over their vocabulary.
pub fn fixture() -> Fixture {
    let corpus = generate_synthetic_corpus(&SyntheticSpec::default(), 0).expect("corpus");
    let index = TfidfIndex::build(&corpus.knowledge).expect("index");
    let datapoints = extract_datapoints(&corpus.dialogues, 2, Mode::KnowledgeGrounded, Some(&index), 3)
        .expect("datapoints")
        .datapoints;
    let vocab = Arc::new(build_vocabulary(&datapoints, 1));
    let config = LMConfig {
        vocab_size: vocab.len(),
        embed_dim: 32,
        hidden_dim: 64,
        num_layers: 1,
        max_seq_len: 96,
        ..LMConfig::default()
    };
    let model = ConditionalLM::init(config, vocab, 0).expect("model");
    Fixture {
        corpus,
        index,
        datapoints,
        model,
    }
}
