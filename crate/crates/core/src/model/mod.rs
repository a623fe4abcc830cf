//! The GLKS model: encoders, global knowledge selection and the decoder.

pub mod decoder;
pub mod encoder;
pub mod gks;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::targets::windows;
use crate::data::vocab::{BOS, EOS};
use crate::data::{Batch, EncodedEpisode};
use crate::error::{GlksError, Result};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub use decoder::{Decoder, Memory, Step};
pub use encoder::{Encoded, Encoders, Source};
pub use gks::{GlobalSelector, Highway, TopicTransition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    /// Semantic unit (window) size.
    pub m: usize,
    pub gks_depth: usize,
    /// When false the global selector is bypassed and `h_{X→K}` is zero.
    pub use_gks: bool,
    /// Let the decoder attend over highway-aggregated states instead of the
    /// raw encoder outputs.
    pub decoder_uses_aggregated: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            emb_dim: 300,
            hidden: 256,
            m: 4,
            gks_depth: 1,
            use_gks: true,
            decoder_uses_aggregated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("hidden", self.hidden),
            ("m", self.m),
            ("gks_depth", self.gks_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GlksError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 5 {
            return Err(GlksError::Config(
                "vocab_size must cover the 4 reserved tokens plus one".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Glks<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoders: Encoders,
    pub gks: GlobalSelector,
    pub decoder: Decoder,
}

/// Everything a teacher-forced pass records on the tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub topic: Option<TopicTransition>,
    pub h_xk: Var,
    /// One entry per target position; empty when the decoder was skipped.
    pub steps: Vec<Step>,
}

/// A decoded response with the per-step selection signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Extended ids, EOS excluded.
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Pointer distribution over the real background positions, one row per
    /// emitted token.
    pub alpha: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
    /// Global window distribution; `None` without global selection.
    pub unit_dist: Option<Vec<f64>>,
    pub log_prob: f64,
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    alpha: Vec<Vec<f64>>,
    gate: Vec<f64>,
    log_prob: f64,
    state: Var,
    done: bool,
}

impl<T: Scalar> Glks<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoders = Encoders::new(
            &mut params,
            rng,
            config.vocab_size,
            config.emb_dim,
            config.hidden,
        )?;
        let gks = GlobalSelector::new(&mut params, rng, config.hidden, config.gks_depth)?;
        let decoder = Decoder::new(
            &mut params,
            rng,
            config.vocab_size,
            config.emb_dim,
            config.hidden,
        )?;
        Ok(Glks {
            config,
            params,
            encoders,
            gks,
            decoder,
        })
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Glks<U> {
        Glks {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            gks: self.gks.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Encoding and global selection with parameters from `store`.
    fn encode_and_select(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch,
    ) -> Result<(Encoded, Option<TopicTransition>, Var)> {
        if batch.m != self.config.m {
            return Err(GlksError::Contract(format!(
                "batch windowed with m={} but model uses m={}",
                batch.m, self.config.m
            )));
        }
        let encoded = self.encoders.encode_batch(tape, store, batch)?;
        if self.config.use_gks {
            let topic = self.gks.forward(
                tape,
                store,
                encoded.h_k,
                encoded.h_x,
                encoded.h_x_last,
                batch,
            )?;
            Ok((encoded, Some(topic), topic.vector))
        } else {
            let zero = gks::zero_transition(tape, batch.size, self.config.hidden);
            Ok((encoded, None, zero))
        }
    }

    fn memory(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        enc: &Encoded,
        topic: Option<&TopicTransition>,
        h_xk: Var,
    ) -> Result<Memory> {
        let (h_k, h_x) = match topic {
            Some(t) if self.config.decoder_uses_aggregated => (t.h_k_agg, t.h_x_agg),
            _ => (enc.h_k, enc.h_x),
        };
        self.decoder.memory(tape, store, h_k, h_x, h_xk, batch)
    }

    /// Teacher-forced pass using an explicit parameter store (which must be
    /// laid out like `self.params`).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        run_decoder: bool,
    ) -> Result<Forward> {
        let (encoded, topic, h_xk) = self.encode_and_select(tape, store, batch)?;
        let mut steps = Vec::new();
        if run_decoder {
            let mem = self.memory(tape, store, batch, &encoded, topic.as_ref(), h_xk)?;
            let mut state = self
                .decoder
                .init_state(tape, store, encoded.h_x_last, h_xk)?;
            for t in 0..batch.resp_len {
                let prev: Vec<usize> = (0..batch.size)
                    .map(|b| batch.dec_in[b * batch.resp_len + t])
                    .collect();
                let step = self
                    .decoder
                    .step(tape, store, &self.encoders, &mem, state, &prev)?;
                state = step.state;
                steps.push(step);
            }
        }
        Ok(Forward {
            encoded,
            topic,
            h_xk,
            steps,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch, run_decoder: bool) -> Result<Forward> {
        self.forward_with(tape, &self.params, batch, run_decoder)
    }

    /// Global window distribution for one episode, `None` without global
    /// selection.
    pub fn unit_distribution(&self, episode: &EncodedEpisode) -> Result<Option<Vec<f64>>> {
        let batch = Batch::single(episode, self.config.m, self.config.vocab_size)?;
        let mut tape = Tape::new();
        let (_, topic, _) = self.encode_and_select(&mut tape, &self.params, &batch)?;
        Ok(topic.map(|t| {
            let n = windows(episode.bg_ids.len(), self.config.m).len();
            tape.value(t.unit_dist).data()[..n]
                .iter()
                .map(|x| x.as_f64())
                .collect()
        }))
    }

    /// Beam search over the mixed distribution; `beam == 1` is greedy
    /// argmax decoding. Stops at EOS or after `max_len` tokens.
    pub fn generate(
        &self,
        episode: &EncodedEpisode,
        vocab: &crate::data::Vocabulary,
        max_len: usize,
        beam: usize,
    ) -> Result<Generation> {
        if max_len == 0 || beam == 0 {
            return Err(GlksError::Config("max_len and beam must be >= 1".into()));
        }
        if vocab.len() != self.config.vocab_size {
            return Err(GlksError::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let batch = Batch::single(episode, self.config.m, self.config.vocab_size)?;
        let store = &self.params;
        let mut tape = Tape::new();
        let (encoded, topic, h_xk) = self.encode_and_select(&mut tape, store, &batch)?;
        let mem = self.memory(&mut tape, store, &batch, &encoded, topic.as_ref(), h_xk)?;
        let init = self
            .decoder
            .init_state(&mut tape, store, encoded.h_x_last, h_xk)?;
        let unit_dist = topic.map(|t| {
            let n = windows(episode.bg_ids.len(), self.config.m).len();
            tape.value(t.unit_dist).data()[..n]
                .iter()
                .map(|x| x.as_f64())
                .collect()
        });
        let bg_len = episode.bg_ids.len();

        let mut hyps = vec![Hypothesis {
            ids: Vec::new(),
            alpha: Vec::new(),
            gate: Vec::new(),
            log_prob: 0.0,
            state: init,
            done: false,
        }];
        for _ in 0..max_len {
            if hyps.iter().all(|h| h.done) {
                break;
            }
            let mut candidates: Vec<(f64, usize, Option<usize>)> = Vec::new();
            let mut outs = Vec::with_capacity(hyps.len());
            for (hi, h) in hyps.iter().enumerate() {
                if h.done {
                    candidates.push((h.log_prob, hi, None));
                    outs.push(None);
                    continue;
                }
                let prev = *h.ids.last().unwrap_or(&BOS);
                let step =
                    self.decoder
                        .step(&mut tape, store, &self.encoders, &mem, h.state, &[prev])?;
                let probs: Vec<f64> = tape
                    .value(step.mixed)
                    .data()
                    .iter()
                    .map(|p| p.as_f64())
                    .collect();
                let mut order: Vec<usize> = (0..probs.len()).collect();
                order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
                for &id in order.iter().take(beam) {
                    candidates.push((h.log_prob + probs[id].max(1e-12).ln(), hi, Some(id)));
                }
                outs.push(Some(step));
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(beam);
            for (lp, hi, id) in candidates.into_iter().take(beam) {
                let parent = &hyps[hi];
                let Some(id) = id else {
                    next.push(parent.clone());
                    continue;
                };
                let step = outs[hi].expect("expanded hypothesis has a step");
                let mut h = parent.clone();
                h.log_prob = lp;
                h.state = step.state;
                if id == EOS {
                    h.done = true;
                } else {
                    h.ids.push(id);
                    let a = tape.value(step.pointer_dist).data();
                    h.alpha
                        .push(a[..bg_len].iter().map(|x| x.as_f64()).collect());
                    h.gate.push(tape.value(step.gate).item().as_f64());
                }
                next.push(h);
            }
            hyps = next;
        }
        let mut best = hyps[0].clone();
        for h in &hyps[1..] {
            if h.log_prob > best.log_prob {
                best = h.clone();
            }
        }
        let tokens = best
            .ids
            .iter()
            .map(|&id| vocab.token_ext(id, &episode.oov).to_string())
            .collect();
        Ok(Generation {
            ids: best.ids,
            tokens,
            alpha: best.alpha,
            gate: best.gate,
            unit_dist,
            log_prob: best.log_prob,
        })
    }
}
