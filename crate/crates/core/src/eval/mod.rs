//! Scoring and knowledge-selection traces.

pub mod corpus;
pub mod rouge;
pub mod trace;

pub use corpus::{
    evaluate_corpus, score_episode, CorpusScores, EchoModel, FixedResponses, ModelGenerator,
    RefMode, ResponseGenerator,
};
pub use rouge::{lcs_len, rouge_all, rouge_l, rouge_n, RougeScore, RougeSet};
pub use trace::{read_pgm, Graymap, KSTrace};
