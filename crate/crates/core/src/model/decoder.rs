//! Response decoder: state tracking, guided attention and the
//! generate/copy mixture over the extended vocabulary.

use rand::Rng;

use crate::error::{GlksError, Result};
use crate::model::encoder::Encoders;
use crate::nn::{AdditiveAttention, GruCell, Linear};
use crate::param::ParamStore;
use crate::tape::{EmptyRow, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub init: Linear,
    pub gru: GruCell,
    pub bg_attention: AdditiveAttention,
    pub ctx_attention: AdditiveAttention,
    pub pointer_attention: AdditiveAttention,
    pub readout: Linear,
    pub output: Linear,
    pub gate: Linear,
    pub hidden: usize,
    pub emb_dim: usize,
}

/// Per-batch tensors the decoder attends over, with projected keys cached.
#[derive(Clone, Debug)]
pub struct Memory {
    pub h_k: Var,
    pub h_x: Var,
    pub h_xk: Var,
    bg_keys: Var,
    ctx_keys: Var,
    ptr_keys: Var,
    pub bg_mask: Vec<bool>,
    pub ctx_mask: Vec<bool>,
    /// Extended-vocabulary id of every background position.
    pub bg_ext: Vec<usize>,
    pub batch: usize,
    pub bg_len: usize,
    pub ctx_len: usize,
    pub ext_size: usize,
}

/// Outputs of one decoding step for every row of the batch.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub state: Var,
    /// `P^V`, `[B, |V|]`.
    pub vocab_dist: Var,
    /// `α^P`, `[B, |K|]`.
    pub pointer_dist: Var,
    /// `g`, `[B, 1]`.
    pub gate: Var,
    /// Mixed distribution over the extended vocabulary, `[B, ext]`.
    pub mixed: Var,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        vocab_size: usize,
        emb_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let g_dim = 2 * hidden + emb_dim;
        Ok(Decoder {
            init: Linear::new(store, rng, "dec.init", 2 * hidden, hidden, true)?,
            gru: GruCell::new(store, rng, "dec.gru", emb_dim, hidden)?,
            bg_attention: AdditiveAttention::new(store, rng, "dec.bg_attn", g_dim, hidden, hidden)?,
            ctx_attention: AdditiveAttention::new(
                store,
                rng,
                "dec.ctx_attn",
                g_dim,
                hidden,
                hidden,
            )?,
            pointer_attention: AdditiveAttention::new(
                store,
                rng,
                "dec.ptr_attn",
                g_dim,
                hidden,
                hidden,
            )?,
            readout: Linear::new(
                store,
                rng,
                "dec.readout",
                emb_dim + 4 * hidden,
                hidden,
                true,
            )?,
            output: Linear::new(store, rng, "dec.out", hidden, vocab_size, false)?,
            gate: Linear::new(store, rng, "dec.gate", hidden, 1, true)?,
            hidden,
            emb_dim,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn memory<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_k: Var,
        h_x: Var,
        h_xk: Var,
        batch: &crate::data::Batch,
    ) -> Result<Memory> {
        Ok(Memory {
            h_k,
            h_x,
            h_xk,
            bg_keys: self.bg_attention.project_keys(tape, store, h_k)?,
            ctx_keys: self.ctx_attention.project_keys(tape, store, h_x)?,
            ptr_keys: self.pointer_attention.project_keys(tape, store, h_k)?,
            bg_mask: batch.bg_mask.clone(),
            ctx_mask: batch.ctx_mask.clone(),
            bg_ext: batch.bg_ext.clone(),
            batch: batch.size,
            bg_len: batch.bg_len,
            ctx_len: batch.ctx_len,
            ext_size: batch.ext_size,
        })
    }

    /// `h^s_0 = W_s[h^x_{|X|}, h_{X→K}] + b`.
    pub fn init_state<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_x_last: Var,
        h_xk: Var,
    ) -> Result<Var> {
        let inp = tape.concat_cols(&[h_x_last, h_xk])?;
        self.init.forward(tape, store, inp)
    }

    pub fn step_state<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: Var,
        prev_emb: Var,
    ) -> Result<Var> {
        self.gru.step(tape, store, prev_emb, state)
    }

    /// `[h_{X→K}, h^s_t, e(y_{t−1})]`.
    pub fn guidance_vector<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h_xk: Var,
        state: Var,
        prev_emb: Var,
    ) -> Result<Var> {
        tape.concat_cols(&[h_xk, state, prev_emb])
    }

    /// Attention of `query` `[B, q]` over `values` `[B·n, h]` using
    /// pre-projected `keys`. Returns `(context [B, h], weights [B, n])`.
    #[allow(clippy::too_many_arguments)]
    pub fn guided_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        attention: &AdditiveAttention,
        query: Var,
        keys: Var,
        values: Var,
        mask: &[bool],
        n: usize,
    ) -> Result<(Var, Var)> {
        let scores = attention.scores(tape, store, query, keys, n)?;
        let weights = tape.masked_softmax(scores, Some(mask), EmptyRow::Error)?;
        let ctx = tape.row_weighted_sum(weights, values)?;
        Ok((ctx, weights))
    }

    /// `W_r[e(y_{t−1}), h^s_t, h_{X→K}, ĥ^K_t, ĥ^X_t] + b`.
    #[allow(clippy::too_many_arguments)]
    pub fn readout<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prev_emb: Var,
        state: Var,
        h_xk: Var,
        bg_ctx: Var,
        ctx_ctx: Var,
    ) -> Result<Var> {
        let inp = tape.concat_cols(&[prev_emb, state, h_xk, bg_ctx, ctx_ctx])?;
        self.readout.forward(tape, store, inp)
    }

    pub fn vocab_dist<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        readout: Var,
    ) -> Result<Var> {
        let logits = self.output.forward(tape, store, readout)?;
        tape.softmax(logits)
    }

    /// `g·P^V` padded to the extended vocabulary plus `(1 − g)` times the
    /// pointer mass scattered onto each position's token id.
    pub fn mix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vocab_dist: Var,
        pointer_dist: Var,
        gate: Var,
        bg_ext: &[usize],
        ext_size: usize,
    ) -> Result<Var> {
        let gen = tape.pad_cols(vocab_dist, ext_size)?;
        let gen = tape.mul_col(gen, gate)?;
        let copy = tape.scatter_cols(pointer_dist, bg_ext, ext_size)?;
        let not_g = tape.one_minus(gate);
        let copy = tape.mul_col(copy, not_g)?;
        tape.add(gen, copy)
    }

    /// One decoding step from `state` given the previous tokens (extended
    /// ids; copied OOV ids embed as UNK).
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoders: &Encoders,
        mem: &Memory,
        state: Var,
        prev_ids: &[usize],
    ) -> Result<Step> {
        if prev_ids.len() != mem.batch {
            return Err(GlksError::shape(
                "decoder step",
                &[prev_ids.len()],
                &[mem.batch],
            ));
        }
        let prev_emb = encoders.embed(tape, store, prev_ids)?;
        let state = self.step_state(tape, store, state, prev_emb)?;
        let guide = self.guidance_vector(tape, mem.h_xk, state, prev_emb)?;
        let (bg_ctx, _) = self.guided_attention(
            tape,
            store,
            &self.bg_attention,
            guide,
            mem.bg_keys,
            mem.h_k,
            &mem.bg_mask,
            mem.bg_len,
        )?;
        let (ctx_ctx, _) = self.guided_attention(
            tape,
            store,
            &self.ctx_attention,
            guide,
            mem.ctx_keys,
            mem.h_x,
            &mem.ctx_mask,
            mem.ctx_len,
        )?;
        let r = self.readout(tape, store, prev_emb, state, mem.h_xk, bg_ctx, ctx_ctx)?;
        let vocab_dist = self.vocab_dist(tape, store, r)?;
        let scores = self
            .pointer_attention
            .scores(tape, store, guide, mem.ptr_keys, mem.bg_len)?;
        let pointer_dist = tape.masked_softmax(scores, Some(&mem.bg_mask), EmptyRow::Error)?;
        let pre_g = self.gate.forward(tape, store, state)?;
        let gate = tape.sigmoid(pre_g);
        let mixed = self.mix(
            tape,
            vocab_dist,
            pointer_dist,
            gate,
            &mem.bg_ext,
            mem.ext_size,
        )?;
        Ok(Step {
            state,
            vocab_dist,
            pointer_dist,
            gate,
            mixed,
        })
    }
}
