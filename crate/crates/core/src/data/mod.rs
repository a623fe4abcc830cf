//! Corpus ingestion, vocabulary, batching and distant-supervision targets.

pub mod batch;
pub mod episode;
pub mod synth;
pub mod targets;
mod tokenize;
pub mod vocab;

pub use batch::{make_batches, Batch, Batcher, EncodedEpisode};
pub use episode::{read_jsonl, write_jsonl, Episode, EpisodeRecord, Limits, UTTERANCE_SEP};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus, SynthManifest};
pub use targets::{build_ds_targets, jaccard, windows, SemanticUnitTargets};
pub use tokenize::tokenize;
pub use vocab::Vocabulary;
