//! Corpus-level evaluation against single or multiple references.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedEpisode, Episode, Vocabulary};
use crate::error::{GlksError, Result};
use crate::eval::rouge::{rouge_all, RougeScore, RougeSet};
use crate::model::Glks;

/// Produces a response for an episode of a corpus.
pub trait ResponseGenerator: Sync {
    fn respond(&self, index: usize, episode: &Episode) -> Result<Vec<String>>;
}

/// Returns the gold response; useful as an upper bound and for plumbing tests.
pub struct EchoModel;

impl ResponseGenerator for EchoModel {
    fn respond(&self, _: usize, episode: &Episode) -> Result<Vec<String>> {
        Ok(episode.response.clone())
    }
}

/// Pre-computed responses, one per episode in corpus order.
pub struct FixedResponses(pub Vec<Vec<String>>);

impl ResponseGenerator for FixedResponses {
    fn respond(&self, index: usize, _: &Episode) -> Result<Vec<String>> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| GlksError::Contract(format!("no prediction for episode {index}")))
    }
}

/// Decodes with a trained model.
pub struct ModelGenerator<'a> {
    pub model: &'a Glks<f32>,
    pub vocab: &'a Vocabulary,
    pub max_len: usize,
    pub beam: usize,
    pub ds_temperature: f64,
}

impl ResponseGenerator for ModelGenerator<'_> {
    fn respond(&self, _: usize, episode: &Episode) -> Result<Vec<String>> {
        let enc = EncodedEpisode::new(
            episode,
            self.vocab,
            self.model.config.m,
            self.ds_temperature,
        )?;
        Ok(self
            .model
            .generate(&enc, self.vocab, self.max_len, self.beam)?
            .tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefMode {
    /// Score against the gold response only.
    Single,
    /// Best score over the gold response and the extra references.
    Multi,
}

/// Per-episode score: the single reference, or per metric the reference with
/// the highest F1.
pub fn score_episode(response: &[String], episode: &Episode, mode: RefMode) -> RougeSet {
    match mode {
        RefMode::Single => rouge_all(response, &episode.response),
        RefMode::Multi => {
            let mut best = RougeSet::default();
            let mut first = true;
            for r in episode.all_references() {
                let s = rouge_all(response, r);
                if first {
                    best = s;
                    first = false;
                    continue;
                }
                for (b, x) in [
                    (&mut best.rouge1, s.rouge1),
                    (&mut best.rouge2, s.rouge2),
                    (&mut best.rouge_l, s.rouge_l),
                ] {
                    if x.f1 > b.f1 {
                        *b = x;
                    }
                }
            }
            best
        }
    }
}

/// Corpus means of precision, recall and F1 for each metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub episodes: usize,
}

fn mean(scores: &[RougeScore]) -> RougeScore {
    let n = scores.len().max(1) as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

pub fn aggregate(sets: &[RougeSet]) -> CorpusScores {
    CorpusScores {
        rouge1: mean(&sets.iter().map(|s| s.rouge1).collect::<Vec<_>>()),
        rouge2: mean(&sets.iter().map(|s| s.rouge2).collect::<Vec<_>>()),
        rouge_l: mean(&sets.iter().map(|s| s.rouge_l).collect::<Vec<_>>()),
        episodes: sets.len(),
    }
}

/// Generates and scores every episode on `threads` workers. Results are
/// aggregated in corpus order, so the outcome does not depend on `threads`.
pub fn evaluate_corpus<G: ResponseGenerator + ?Sized>(
    generator: &G,
    corpus: &[Episode],
    mode: RefMode,
    threads: usize,
) -> Result<CorpusScores> {
    let score = |(i, ep): (usize, &Episode)| -> Result<RougeSet> {
        let resp = generator.respond(i, ep)?;
        Ok(score_episode(&resp, ep, mode))
    };
    let sets: Vec<RougeSet> = if threads <= 1 {
        corpus
            .iter()
            .enumerate()
            .map(score)
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| {
                GlksError::Config(format!("cannot start {threads} worker threads: {e}"))
            })?;
        pool.install(|| {
            corpus
                .par_iter()
                .enumerate()
                .map(score)
                .collect::<Result<_>>()
        })?
    };
    Ok(aggregate(&sets))
}
