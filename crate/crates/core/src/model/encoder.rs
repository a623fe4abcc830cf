//! Shared embedding table and the two bidirectional GRU encoders.

use std::io::BufRead;

use rand::Rng;

use crate::data::Vocabulary;
use crate::error::{GlksError, Result};
use crate::nn::{GruCell, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which of the two encoders to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Background,
    Context,
}

#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
    /// Projects the concatenated `[fwd, bwd]` state back to `hidden`.
    pub proj: Linear,
}

impl BiGru {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiGru {
            fwd: GruCell::new(store, rng, &format!("{name}.fwd"), in_dim, hidden)?,
            bwd: GruCell::new(store, rng, &format!("{name}.bwd"), in_dim, hidden)?,
            proj: Linear::new(
                store,
                rng,
                &format!("{name}.proj"),
                2 * hidden,
                hidden,
                true,
            )?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub embedding: ParamId,
    pub background: BiGru,
    pub context: BiGru,
    pub emb_dim: usize,
    pub hidden: usize,
}

/// Output of [`Encoders::encode_batch`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B·|K|, h]`, batch-major.
    pub h_k: Var,
    /// `[B·|X|, h]`, batch-major.
    pub h_x: Var,
    /// Final context state `h^x_{|X|}` per episode, `[B, h]`.
    pub h_x_last: Var,
}

/// One direction of a masked recurrence over `[B·T, 3h]` projected inputs.
/// Padded steps carry the previous state through unchanged.
fn run_direction<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cell: &GruCell,
    xw: Var,
    mask: &[bool],
    batch: usize,
    len: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let mut h = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut states = vec![h; len];
    let steps: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in steps {
        let rows: Vec<usize> = (0..batch).map(|b| b * len + t).collect();
        let live: Vec<bool> = rows.iter().map(|&r| mask[r]).collect();
        if live.iter().any(|&l| l) {
            let x_t = tape.gather_rows(xw, &rows)?;
            let cand = cell.step_projected(tape, store, x_t, h)?;
            h = if live.iter().all(|&l| l) {
                cand
            } else {
                let m = tape.constant(Tensor::new(
                    vec![batch, 1],
                    live.iter()
                        .map(|&l| if l { T::one() } else { T::zero() })
                        .collect(),
                )?);
                let diff = tape.sub(cand, h)?;
                let upd = tape.mul_col(diff, m)?;
                tape.add(h, upd)?
            };
        }
        states[t] = h;
    }
    Ok(states)
}

impl Encoders {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        vocab_size: usize,
        emb_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Encoders {
            embedding: store.add_weight("embedding", &[vocab_size, emb_dim], rng)?,
            background: BiGru::new(store, rng, "enc_k", emb_dim, hidden)?,
            context: BiGru::new(store, rng, "enc_x", emb_dim, hidden)?,
            emb_dim,
            hidden,
        })
    }

    /// Embedding rows for `ids`; ids outside the table read as UNK.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[usize],
    ) -> Result<Var> {
        let table = tape.param(store, self.embedding);
        let n = tape.value(table).rows();
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < n { i } else { crate::data::vocab::UNK })
            .collect();
        tape.gather_rows(table, &ids)
    }

    /// Encodes a padded `[batch, len]` id matrix into `[batch·len, h]`.
    /// Padded positions come out as zero rows.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        which: Source,
    ) -> Result<Var> {
        if batch == 0 || ids.is_empty() {
            return Err(GlksError::Contract(
                "cannot encode an empty sequence".into(),
            ));
        }
        if ids.len() != mask.len() || !ids.len().is_multiple_of(batch) {
            return Err(GlksError::shape(
                "encode",
                &[ids.len()],
                &[mask.len(), batch],
            ));
        }
        let len = ids.len() / batch;
        let enc = match which {
            Source::Background => &self.background,
            Source::Context => &self.context,
        };
        let emb = self.embed(tape, store, ids)?;
        let xf = enc.fwd.project_input(tape, store, emb)?;
        let xb = enc.bwd.project_input(tape, store, emb)?;
        let fwd = run_direction(tape, store, &enc.fwd, xf, mask, batch, len, false)?;
        let bwd = run_direction(tape, store, &enc.bwd, xb, mask, batch, len, true)?;

        // States are time-major; reorder to batch-major rows b·len + t.
        let to_batch_major: Vec<usize> = (0..batch * len)
            .map(|r| (r % len) * batch + r / len)
            .collect();
        let f = tape.concat_rows(&fwd)?;
        let f = tape.gather_rows(f, &to_batch_major)?;
        let b = tape.concat_rows(&bwd)?;
        let b = tape.gather_rows(b, &to_batch_major)?;
        let both = tape.concat_cols(&[f, b])?;
        let out = enc.proj.forward(tape, store, both)?;
        let keep = tape.constant(Tensor::new(
            vec![batch * len, 1],
            mask.iter()
                .map(|&l| if l { T::one() } else { T::zero() })
                .collect(),
        )?);
        tape.mul_col(out, keep)
    }

    pub fn encode_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &crate::data::Batch,
    ) -> Result<Encoded> {
        let h_k = self.encode(
            tape,
            store,
            &batch.bg_ids,
            &batch.bg_mask,
            batch.size,
            Source::Background,
        )?;
        let h_x = self.encode(
            tape,
            store,
            &batch.ctx_ids,
            &batch.ctx_mask,
            batch.size,
            Source::Context,
        )?;
        let last: Vec<usize> = batch
            .ctx_lens
            .iter()
            .enumerate()
            .map(|(b, &l)| b * batch.ctx_len + l - 1)
            .collect();
        let h_x_last = tape.gather_rows(h_x, &last)?;
        Ok(Encoded { h_k, h_x, h_x_last })
    }

    /// Overwrites embedding rows from a text file of `token v1 .. vD` lines.
    /// Tokens absent from `vocab` are skipped. Returns the number of rows set.
    pub fn load_embeddings<T: Scalar, B: BufRead>(
        &self,
        store: &mut ParamStore<T>,
        vocab: &Vocabulary,
        reader: B,
    ) -> Result<usize> {
        let dim = self.emb_dim;
        let mut loaded = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let Some(id) = vocab.get(token) else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| GlksError::Parse {
                    location: format!("embeddings:{}", n + 1),
                    message: e.to_string(),
                })?;
            if values.len() != dim {
                return Err(GlksError::Parse {
                    location: format!("embeddings:{}", n + 1),
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            let table = &mut store.get_mut(self.embedding).value;
            for (d, v) in table.data_mut()[id * dim..(id + 1) * dim]
                .iter_mut()
                .zip(values)
            {
                *d = T::of(v);
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, Encoders) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoders::new(&mut store, &mut rng, 20, 6, 5).unwrap();
        (store, enc)
    }

    #[test]
    fn shape_and_padding() {
        let (store, enc) = setup();
        let mut tape = Tape::new();
        let ids = [4, 5, 6, 0, 7, 8, 9, 10];
        let mask = [true, true, true, false, true, true, true, true];
        let h = enc
            .encode(&mut tape, &store, &ids, &mask, 2, Source::Background)
            .unwrap();
        assert_eq!(tape.shape(h), &[8, 5]);
        assert!(tape.value(h).row(3).iter().all(|&x| x == 0.0));
        assert!(tape.value(h).row(2).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let (store, enc) = setup();
        let mut tape = Tape::new();
        let a = enc
            .encode(
                &mut tape,
                &store,
                &[4, 5, 6],
                &[true; 3],
                1,
                Source::Context,
            )
            .unwrap();
        let b = enc
            .encode(
                &mut tape,
                &store,
                &[4, 5, 6, 0, 0],
                &[true, true, true, false, false],
                1,
                Source::Context,
            )
            .unwrap();
        for r in 0..3 {
            for (x, y) in tape.value(a).row(r).iter().zip(tape.value(b).row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bidirectional_outputs_depend_on_order() {
        let (store, enc) = setup();
        let mut tape = Tape::new();
        let a = enc
            .encode(
                &mut tape,
                &store,
                &[4, 5, 6, 7],
                &[true; 4],
                1,
                Source::Background,
            )
            .unwrap();
        let b = enc
            .encode(
                &mut tape,
                &store,
                &[7, 6, 5, 4],
                &[true; 4],
                1,
                Source::Background,
            )
            .unwrap();
        let diff: f64 = tape
            .value(a)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 1e-6);
    }

    #[test]
    fn background_and_context_do_not_share_recurrent_weights() {
        let (store, enc) = setup();
        let mut tape = Tape::new();
        let a = enc
            .encode(
                &mut tape,
                &store,
                &[4, 5],
                &[true; 2],
                1,
                Source::Background,
            )
            .unwrap();
        let b = enc
            .encode(&mut tape, &store, &[4, 5], &[true; 2], 1, Source::Context)
            .unwrap();
        assert_ne!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn embedding_rows_of_real_tokens_get_gradient() {
        let (mut store, enc) = setup();
        let mut tape = Tape::new();
        let h = enc
            .encode(
                &mut tape,
                &store,
                &[4, 5, 6, 0],
                &[true, true, true, false],
                1,
                Source::Background,
            )
            .unwrap();
        let s = tape.sum(h);
        tape.backward(s)
            .unwrap()
            .accumulate(&tape, &mut store)
            .unwrap();
        let g = &store.get(enc.embedding).grad;
        for id in [4, 5, 6] {
            assert!(g.row(id).iter().any(|&x| x != 0.0), "row {id}");
        }
        assert!(g.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, enc) = setup();
        let mut tape = Tape::new();
        assert!(enc
            .encode(&mut tape, &store, &[], &[], 1, Source::Context)
            .is_err());
    }

    #[test]
    fn embeddings_load_from_text() {
        let (mut store, enc) = setup();
        let vocab = Vocabulary::from_tokens(["hello", "world"]).unwrap();
        let text = "hello 1 2 3 4 5 6\nmissing 0 0 0 0 0 0\n";
        let n = enc
            .load_embeddings(&mut store, &vocab, text.as_bytes())
            .unwrap();
        assert_eq!(n, 1);
        let id = vocab.id("hello");
        assert_eq!(
            store.get(enc.embedding).value.row(id),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        );
        assert!(enc
            .load_embeddings(&mut store, &vocab, "world 1 2".as_bytes())
            .is_err());
    }
}
