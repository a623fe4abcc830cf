//! Synthetic background-grounded conversations with a planted answer window.
//!
//! Each background is a run of fixed-size windows. Every window holds one
//! distinct topic token at a random position plus filler tokens; the context
//! asks about one topic and the response is a fixed prefix followed by that
//! topic's window verbatim.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::episode::UTTERANCE_SEP;
use crate::data::Episode;
use crate::error::{GlksError, Result};

pub const RESPONSE_PREFIX: [&str; 3] = ["i", "think", "that"];
const CHATTER: [&str; 6] = ["hello", "so", "well", "what", "about", "?"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_episodes: usize,
    /// Total distinct tokens the generator may emit.
    pub vocab_size: usize,
    pub window_m: usize,
    pub windows_per_background: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_episodes: usize, vocab_size: usize, window_m: usize) -> Self {
        SynthConfig {
            seed,
            n_episodes,
            vocab_size,
            window_m,
            windows_per_background: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub episodes: Vec<Episode>,
    pub gold_windows: Vec<usize>,
}

/// Manifest written next to a synthetic JSONL file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub gold_windows: Vec<usize>,
}

fn pools(cfg: &SynthConfig) -> (Vec<String>, Vec<String>) {
    let free = cfg.vocab_size - RESPONSE_PREFIX.len() - CHATTER.len();
    let n_topics = (free / 3).max(cfg.windows_per_background);
    let n_fillers = free - n_topics;
    let topics = (0..n_topics).map(|i| format!("t{i}")).collect();
    let fillers = (0..n_fillers).map(|i| format!("f{i}")).collect();
    (topics, fillers)
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.vocab_size < 20 {
        return Err(GlksError::Config(format!(
            "synthetic vocab_size must be >= 20, got {}",
            cfg.vocab_size
        )));
    }
    if cfg.window_m < 2 || cfg.windows_per_background < 2 {
        return Err(GlksError::Config(
            "synthetic corpus needs window_m >= 2 and >= 2 windows".into(),
        ));
    }
    let (topics, fillers) = pools(cfg);
    if fillers.is_empty() {
        return Err(GlksError::Config(
            "vocab_size too small for the requested windows".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut episodes = Vec::with_capacity(cfg.n_episodes);
    let mut gold_windows = Vec::with_capacity(cfg.n_episodes);

    for _ in 0..cfg.n_episodes {
        let chosen: Vec<&String> = topics
            .choose_multiple(&mut rng, cfg.windows_per_background)
            .collect();
        let mut background = Vec::with_capacity(cfg.window_m * chosen.len());
        for topic in &chosen {
            let slot = rng.gen_range(0..cfg.window_m);
            for i in 0..cfg.window_m {
                if i == slot {
                    background.push((*topic).clone());
                } else {
                    background.push(fillers.choose(&mut rng).expect("non-empty").clone());
                }
            }
        }
        let gold = rng.gen_range(0..chosen.len());
        let span = (gold * cfg.window_m, (gold + 1) * cfg.window_m);

        let opener_len = rng.gen_range(1..=2);
        let mut context: Vec<String> = (0..opener_len)
            .map(|_| CHATTER[rng.gen_range(0..3)].to_string())
            .collect();
        context.push(UTTERANCE_SEP.to_string());
        context.extend(["what", "about"].map(String::from));
        context.push(chosen[gold].clone());
        context.push("?".to_string());

        let mut response: Vec<String> = RESPONSE_PREFIX.iter().map(|s| s.to_string()).collect();
        response.extend_from_slice(&background[span.0..span.1]);

        let mut ep = Episode::new(background, context, response)?;
        ep.gold_span = Some(span);
        episodes.push(ep);
        gold_windows.push(gold);
    }
    Ok(SynthCorpus {
        config: cfg.clone(),
        episodes,
        gold_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::targets::{build_ds_targets, windows};
    use std::collections::HashSet;

    fn shared(a: &[String], b: &[String]) -> usize {
        let sa: HashSet<_> = a.iter().collect();
        b.iter().filter(|t| sa.contains(t)).count()
    }

    #[test]
    fn response_overlaps_exactly_one_window_fully() {
        let c = synth_corpus(&SynthConfig::new(3, 100, 40, 4)).unwrap();
        for (ep, &gold) in c.episodes.iter().zip(&c.gold_windows) {
            let full: Vec<usize> = windows(ep.background.len(), 4)
                .into_iter()
                .enumerate()
                .filter(|(_, r)| shared(&ep.response, &ep.background[r.clone()]) >= 4)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(full, vec![gold]);
        }
    }

    #[test]
    fn ds_argmax_is_gold_window() {
        let c = synth_corpus(&SynthConfig::new(7, 200, 40, 4)).unwrap();
        for (ep, &gold) in c.episodes.iter().zip(&c.gold_windows) {
            let q = build_ds_targets(&ep.background, &ep.response, 4, 1.0).unwrap();
            assert_eq!(q.argmax(), gold);
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig::new(11, 20, 30, 4);
        assert_eq!(
            synth_corpus(&cfg).unwrap().episodes,
            synth_corpus(&cfg).unwrap().episodes
        );
        let other = SynthConfig::new(12, 20, 30, 4);
        assert_ne!(
            synth_corpus(&cfg).unwrap().episodes,
            synth_corpus(&other).unwrap().episodes
        );
    }

    #[test]
    fn token_budget_respected() {
        let c = synth_corpus(&SynthConfig::new(1, 300, 20, 4)).unwrap();
        let distinct: HashSet<&str> = c.episodes.iter().flat_map(|e| e.all_tokens()).collect();
        // the utterance separator is structural, not generated text
        assert!(distinct.len() <= 20 + 1, "{}", distinct.len());
        assert!(synth_corpus(&SynthConfig::new(1, 3, 19, 4)).is_err());
    }
}
