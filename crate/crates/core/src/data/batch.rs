//! Id encoding, extended vocabularies and padded batches.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::targets::build_ds_targets;
use crate::data::vocab::{BOS, EOS, PAD, UNK};
use crate::data::{Episode, Vocabulary};
use crate::error::{GlksError, Result};

/// An episode mapped to ids. Background tokens missing from the vocabulary
/// receive per-episode extended ids `|V| + k`, which makes them copyable.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEpisode {
    /// Embedding ids; OOV maps to UNK.
    pub bg_ids: Vec<usize>,
    /// Copy ids into the extended vocabulary.
    pub bg_ext: Vec<usize>,
    pub ctx_ids: Vec<usize>,
    /// BOS followed by the response, OOV mapped to UNK.
    pub dec_in: Vec<usize>,
    /// The response followed by EOS, as extended ids.
    pub target: Vec<usize>,
    /// Surface form of extended id `|V| + k` is `oov[k]`.
    pub oov: Vec<String>,
    pub q: Vec<f64>,
}

impl EncodedEpisode {
    pub fn new(ep: &Episode, vocab: &Vocabulary, m: usize, ds_temperature: f64) -> Result<Self> {
        let v = vocab.len();
        let mut oov: Vec<String> = Vec::new();
        let mut oov_index: HashMap<&str, usize> = HashMap::new();
        let mut bg_ids = Vec::with_capacity(ep.background.len());
        let mut bg_ext = Vec::with_capacity(ep.background.len());
        for t in &ep.background {
            match vocab.get(t) {
                Some(id) => {
                    bg_ids.push(id);
                    bg_ext.push(id);
                }
                None => {
                    let k = *oov_index.entry(t.as_str()).or_insert_with(|| {
                        oov.push(t.clone());
                        oov.len() - 1
                    });
                    bg_ids.push(UNK);
                    bg_ext.push(v + k);
                }
            }
        }
        let ctx_ids = ep.context.iter().map(|t| vocab.id(t)).collect();
        let mut dec_in = vec![BOS];
        dec_in.extend(ep.response.iter().map(|t| vocab.id(t)));
        let mut target: Vec<usize> = ep
            .response
            .iter()
            .map(|t| match vocab.get(t) {
                Some(id) => id,
                None => oov_index.get(t.as_str()).map_or(UNK, |k| v + k),
            })
            .collect();
        target.push(EOS);
        let q = build_ds_targets(&ep.background, &ep.response, m, ds_temperature)?.0;
        Ok(EncodedEpisode {
            bg_ids,
            bg_ext,
            ctx_ids,
            dec_in,
            target,
            oov,
            q,
        })
    }

    /// Response tokens recovered from `target`, dropping the final EOS.
    pub fn decode_response(&self, vocab: &Vocabulary) -> Vec<String> {
        self.target[..self.target.len() - 1]
            .iter()
            .map(|&id| vocab.token_ext(id, &self.oov).to_string())
            .collect()
    }
}

/// Padded, masked id matrices for a group of episodes. All matrices are
/// row-major with one row per episode.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub m: usize,
    pub vocab_size: usize,
    /// `|V|` plus the largest per-episode OOV count.
    pub ext_size: usize,
    /// Background length, padded up to a multiple of `m`.
    pub bg_len: usize,
    pub ctx_len: usize,
    pub resp_len: usize,
    pub n_windows: usize,
    pub bg_ids: Vec<usize>,
    pub bg_ext: Vec<usize>,
    pub bg_mask: Vec<bool>,
    pub ctx_ids: Vec<usize>,
    pub ctx_mask: Vec<bool>,
    pub dec_in: Vec<usize>,
    pub target: Vec<usize>,
    pub resp_mask: Vec<bool>,
    pub window_mask: Vec<bool>,
    /// Distant-supervision targets, zero on padded windows.
    pub q: Vec<f64>,
    pub bg_lens: Vec<usize>,
    pub ctx_lens: Vec<usize>,
    pub resp_lens: Vec<usize>,
    pub oov: Vec<Vec<String>>,
    /// Position of each row in the source corpus.
    pub indices: Vec<usize>,
}

fn pad_rows(rows: &[&[usize]], width: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::with_capacity(rows.len() * width);
    let mut mask = Vec::with_capacity(rows.len() * width);
    for r in rows {
        ids.extend_from_slice(r);
        mask.extend(std::iter::repeat_n(true, r.len()));
        ids.extend(std::iter::repeat_n(PAD, width - r.len()));
        mask.extend(std::iter::repeat_n(false, width - r.len()));
    }
    (ids, mask)
}

impl Batch {
    pub fn new(episodes: &[(usize, &EncodedEpisode)], m: usize, vocab_size: usize) -> Result<Self> {
        if episodes.is_empty() {
            return Err(GlksError::Contract("empty batch".into()));
        }
        if m == 0 {
            return Err(GlksError::Config("window size m must be >= 1".into()));
        }
        let size = episodes.len();
        let max_bg = episodes
            .iter()
            .map(|(_, e)| e.bg_ids.len())
            .max()
            .unwrap_or(0);
        let bg_len = max_bg.div_ceil(m) * m;
        let n_windows = bg_len / m;
        let ctx_len = episodes
            .iter()
            .map(|(_, e)| e.ctx_ids.len())
            .max()
            .unwrap_or(0);
        let resp_len = episodes
            .iter()
            .map(|(_, e)| e.target.len())
            .max()
            .unwrap_or(0);

        let col = |f: fn(&EncodedEpisode) -> &[usize]| -> Vec<&[usize]> {
            episodes.iter().map(|(_, e)| f(e)).collect()
        };
        let (bg_ids, bg_mask) = pad_rows(&col(|e| &e.bg_ids), bg_len);
        let (bg_ext, _) = pad_rows(&col(|e| &e.bg_ext), bg_len);
        let (ctx_ids, ctx_mask) = pad_rows(&col(|e| &e.ctx_ids), ctx_len);
        let (dec_in, _) = pad_rows(&col(|e| &e.dec_in), resp_len);
        let (target, resp_mask) = pad_rows(&col(|e| &e.target), resp_len);

        let mut window_mask = Vec::with_capacity(size * n_windows);
        let mut q = Vec::with_capacity(size * n_windows);
        for (_, e) in episodes {
            let w = e.q.len();
            window_mask.extend((0..n_windows).map(|i| i < w));
            q.extend_from_slice(&e.q);
            q.extend(std::iter::repeat_n(0.0, n_windows - w));
        }
        let max_oov = episodes.iter().map(|(_, e)| e.oov.len()).max().unwrap_or(0);

        Ok(Batch {
            size,
            m,
            vocab_size,
            ext_size: vocab_size + max_oov,
            bg_len,
            ctx_len,
            resp_len,
            n_windows,
            bg_ids,
            bg_ext,
            bg_mask,
            ctx_ids,
            ctx_mask,
            dec_in,
            target,
            resp_mask,
            window_mask,
            q,
            bg_lens: episodes.iter().map(|(_, e)| e.bg_ids.len()).collect(),
            ctx_lens: episodes.iter().map(|(_, e)| e.ctx_ids.len()).collect(),
            resp_lens: episodes.iter().map(|(_, e)| e.target.len()).collect(),
            oov: episodes.iter().map(|(_, e)| e.oov.clone()).collect(),
            indices: episodes.iter().map(|(i, _)| *i).collect(),
        })
    }

    pub fn single(ep: &EncodedEpisode, m: usize, vocab_size: usize) -> Result<Self> {
        Batch::new(&[(0, ep)], m, vocab_size)
    }

    /// Number of gold target tokens (including EOS) in the batch.
    pub fn target_tokens(&self) -> usize {
        self.resp_lens.iter().sum()
    }
}

/// Encodes a corpus once and cuts it into shuffled batches each epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    encoded: Vec<EncodedEpisode>,
    batch_size: usize,
    m: usize,
    vocab_size: usize,
}

impl Batcher {
    pub fn new(
        corpus: &[Episode],
        vocab: &Vocabulary,
        batch_size: usize,
        m: usize,
        ds_temperature: f64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(GlksError::Config("batch_size must be >= 1".into()));
        }
        let encoded = corpus
            .iter()
            .map(|ep| EncodedEpisode::new(ep, vocab, m, ds_temperature))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batcher {
            encoded,
            batch_size,
            m,
            vocab_size: vocab.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    pub fn encoded(&self) -> &[EncodedEpisode] {
        &self.encoded
    }

    /// Batches in corpus order.
    pub fn ordered(&self) -> Result<Vec<Batch>> {
        let order: Vec<usize> = (0..self.encoded.len()).collect();
        self.cut(&order)
    }

    /// One epoch of batches after a seeded shuffle.
    pub fn epoch<R: rand::Rng>(&self, rng: &mut R) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.encoded.len()).collect();
        order.shuffle(rng);
        self.cut(&order)
    }

    fn cut(&self, order: &[usize]) -> Result<Vec<Batch>> {
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let eps: Vec<(usize, &EncodedEpisode)> =
                    chunk.iter().map(|&i| (i, &self.encoded[i])).collect();
                Batch::new(&eps, self.m, self.vocab_size)
            })
            .collect()
    }
}

/// One epoch of shuffled batches for `corpus`.
pub fn make_batches(
    corpus: &[Episode],
    vocab: &Vocabulary,
    batch_size: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let batcher = Batcher::new(corpus, vocab, batch_size, m, 1.0)?;
    batcher.epoch(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(bg: &str, ctx: &str, resp: &str) -> Episode {
        let split = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        Episode::new(split(bg), split(ctx), split(resp)).unwrap()
    }

    fn corpus(n: usize) -> Vec<Episode> {
        (0..n)
            .map(|i| episode(&format!("a b c d{i} e"), "hi there", &format!("b c d{i}")))
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let c = corpus(10);
        let vocab = Vocabulary::build(&c, 100).unwrap();
        let batches = make_batches(&c, &vocab, 4, 2, 1).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.size).collect();
        assert_eq!(sizes, [4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order() {
        let c = corpus(10);
        let vocab = Vocabulary::build(&c, 100).unwrap();
        let a: Vec<Vec<usize>> = make_batches(&c, &vocab, 3, 2, 9)
            .unwrap()
            .into_iter()
            .map(|b| b.indices)
            .collect();
        let b: Vec<Vec<usize>> = make_batches(&c, &vocab, 3, 2, 9)
            .unwrap()
            .into_iter()
            .map(|b| b.indices)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn oov_background_tokens_get_extended_ids() {
        let c = corpus(3);
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "e", "hi", "there"]).unwrap();
        let enc = EncodedEpisode::new(&c[1], &vocab, 2, 1.0).unwrap();
        assert_eq!(enc.oov, ["d1"]);
        assert_eq!(enc.bg_ids[3], UNK);
        assert_eq!(enc.bg_ext[3], vocab.len());
        // gold OOV token is scored through its copy id
        assert_eq!(enc.target, [vocab.id("b"), vocab.id("c"), vocab.len(), EOS]);
        assert_eq!(enc.decode_response(&vocab), c[1].response);
    }

    #[test]
    fn masks_follow_padding() {
        let c = vec![
            episode("a b c", "x", "a"),
            episode("a b c d e", "x y z", "a b"),
        ];
        let vocab = Vocabulary::build(&c, 100).unwrap();
        let batcher = Batcher::new(&c, &vocab, 2, 2, 1.0).unwrap();
        let b = &batcher.ordered().unwrap()[0];
        assert_eq!(b.bg_len, 6);
        assert_eq!(b.n_windows, 3);
        for (id, m) in b.bg_ids.iter().zip(&b.bg_mask) {
            assert_eq!(*m, *id != PAD);
        }
        assert_eq!(b.window_mask, [true, true, false, true, true, true]);
        assert_eq!(b.ctx_mask, [true, false, false, true, true, true]);
        let q0: f64 = b.q[..3].iter().sum();
        assert!((q0 - 1.0).abs() < 1e-12);
        assert_eq!(b.q[2], 0.0);
    }
}
