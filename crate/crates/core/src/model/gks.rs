//! Global knowledge selection: a distribution over background windows
//! ("semantic units") and the topic transition vector it induces.

use rand::Rng;

use crate::error::{GlksError, Result};
use crate::nn::{AdditiveAttention, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::{EmptyRow, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// One highway layer over `[h_t, h^x_last]`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub linear: Linear,
    pub nonlinear: Linear,
    pub gate: Linear,
}

impl Highway {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Highway {
            linear: Linear::new(
                store,
                rng,
                &format!("{name}.linear"),
                2 * hidden,
                hidden,
                true,
            )?,
            nonlinear: Linear::new(
                store,
                rng,
                &format!("{name}.nonlinear"),
                2 * hidden,
                hidden,
                true,
            )?,
            gate: Linear::new(
                store,
                rng,
                &format!("{name}.gate"),
                2 * hidden,
                hidden,
                true,
            )?,
        })
    }

    /// `g ⊙ linear + (1 − g) ⊙ tanh(nonlinear)` with `g = σ(W_gate[h, c] + b)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        cond: Var,
    ) -> Result<Var> {
        let inp = tape.concat_cols(&[h, cond])?;
        let pre_g = self.gate.forward(tape, store, inp)?;
        let g = tape.sigmoid(pre_g);
        let lin = self.linear.forward(tape, store, inp)?;
        let pre_n = self.nonlinear.forward(tape, store, inp)?;
        let non = tape.tanh(pre_n);
        let diff = tape.sub(lin, non)?;
        let gated = tape.mul(g, diff)?;
        tape.add(non, gated)
    }
}

#[derive(Clone, Debug)]
pub struct GlobalSelector {
    pub bg_layers: Vec<Highway>,
    pub ctx_layers: Vec<Highway>,
    pub w_m1: ParamId,
    pub w_m2: ParamId,
    pub v_m: ParamId,
    pub unit_attention: AdditiveAttention,
    pub hidden: usize,
}

/// Result of global selection for a batch.
#[derive(Clone, Copy, Debug)]
pub struct TopicTransition {
    /// Pooled window scores `ŵ`, `[B, W]`; padded windows hold −∞.
    pub unit_weights: Var,
    /// `softmax(ŵ)` over real windows, `[B, W]`.
    pub unit_dist: Var,
    /// Window representations `Ĥ^K`, `[B·W, h]`.
    pub units: Var,
    /// Local attention inside each window, `[B·W, m]`.
    pub local_weights: Var,
    /// `h_{X→K}`, `[B, h]`.
    pub vector: Var,
    /// Aggregated background and context states.
    pub h_k_agg: Var,
    pub h_x_agg: Var,
}

/// Row indices repeating each of `groups` rows `each` times.
fn repeat_rows(groups: usize, each: usize) -> Vec<usize> {
    (0..groups)
        .flat_map(|g| std::iter::repeat_n(g, each))
        .collect()
}

impl GlobalSelector {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(GlksError::Config("gks_depth must be >= 1".into()));
        }
        let mut bg_layers = Vec::with_capacity(depth);
        let mut ctx_layers = Vec::with_capacity(depth);
        for l in 0..depth {
            bg_layers.push(Highway::new(store, rng, &format!("gks.hw_k{l}"), hidden)?);
            ctx_layers.push(Highway::new(store, rng, &format!("gks.hw_x{l}"), hidden)?);
        }
        Ok(GlobalSelector {
            bg_layers,
            ctx_layers,
            w_m1: store.add_weight("gks.match.w1", &[hidden, hidden], rng)?,
            w_m2: store.add_weight("gks.match.w2", &[hidden, hidden], rng)?,
            v_m: store.add_weight("gks.match.v", &[hidden, 1], rng)?,
            unit_attention: AdditiveAttention::new(
                store,
                rng,
                "gks.unit_attn",
                hidden,
                hidden,
                hidden,
            )?,
            hidden,
        })
    }

    /// Applies `layers` in sequence to `h` `[B·T, h]`, each conditioned on the
    /// episode's final context state `h_last` `[B, h]`.
    pub fn highway_aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layers: &[Highway],
        h: Var,
        h_last: Var,
        len: usize,
    ) -> Result<Var> {
        if layers.is_empty() {
            return Err(GlksError::Config("gks_depth must be >= 1".into()));
        }
        let batch = tape.value(h_last).rows();
        let cond = tape.gather_rows(h_last, &repeat_rows(batch, len))?;
        let mut out = h;
        for layer in layers {
            out = layer.forward(tape, store, out, cond)?;
        }
        Ok(out)
    }

    /// `M[b·|K| + i, j] = v_Mᵀ tanh(W_M1 h^k_i + W_M2 h^x_j)`, `[B·|K|, |X|]`.
    pub fn matching_matrix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_k: Var,
        h_x: Var,
        batch: usize,
    ) -> Result<Var> {
        let tk = tape.value(h_k).rows() / batch;
        let tx = tape.value(h_x).rows() / batch;
        let w1 = tape.param(store, self.w_m1);
        let w2 = tape.param(store, self.w_m2);
        let v = tape.param(store, self.v_m);
        let a = tape.matmul(h_k, w1)?;
        let c = tape.matmul(h_x, w2)?;
        let mut ia = Vec::with_capacity(batch * tk * tx);
        let mut ic = Vec::with_capacity(batch * tk * tx);
        for b in 0..batch {
            for i in 0..tk {
                for j in 0..tx {
                    ia.push(b * tk + i);
                    ic.push(b * tx + j);
                }
            }
        }
        let ga = tape.gather_rows(a, &ia)?;
        let gc = tape.gather_rows(c, &ic)?;
        let pre = tape.add(ga, gc)?;
        let act = tape.tanh(pre);
        let s = tape.matmul(act, v)?;
        tape.reshape(s, &[batch * tk, tx])
    }

    /// Max over unmasked context columns; masked background rows give −∞.
    /// Returns `[B, |K|]`.
    pub fn transition_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        matching: Var,
        bg_mask: &[bool],
        ctx_mask: &[bool],
        batch: usize,
    ) -> Result<Var> {
        let tk = bg_mask.len() / batch;
        let tx = ctx_mask.len() / batch;
        let mut mask = Vec::with_capacity(batch * tk * tx);
        for b in 0..batch {
            for i in 0..tk {
                for j in 0..tx {
                    mask.push(bg_mask[b * tk + i] && ctx_mask[b * tx + j]);
                }
            }
        }
        let w = tape.max_axis(matching, 1, Some(&mask))?;
        tape.reshape(w, &[batch, tk])
    }

    /// Sums non-overlapping windows of `m` scores.
    pub fn unfold_sum<T: Scalar>(&self, tape: &mut Tape<T>, w: Var, m: usize) -> Result<Var> {
        tape.window_sum(w, m)
    }

    /// Attends from `h_last` over the positions of each window. Returns
    /// `(Ĥ^K [B·W, h], local weights [B·W, m])`. `h_k` rows must be padded
    /// to a multiple of `m` per episode.
    pub fn unfold_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_k: Var,
        h_last: Var,
        bg_mask: &[bool],
        m: usize,
    ) -> Result<(Var, Var)> {
        let batch = tape.value(h_last).rows();
        let rows = tape.value(h_k).rows();
        if m == 0 || !rows.is_multiple_of(batch * m) {
            return Err(GlksError::Contract(format!(
                "background rows {rows} not divisible into windows of {m} for batch {batch}"
            )));
        }
        let n_windows = rows / batch / m;
        let keys = self.unit_attention.project_keys(tape, store, h_k)?;
        let query = tape.gather_rows(h_last, &repeat_rows(batch, n_windows))?;
        let scores = self.unit_attention.scores(tape, store, query, keys, m)?;
        let weights = tape.masked_softmax(scores, Some(bg_mask), EmptyRow::Zero)?;
        let units = tape.row_weighted_sum(weights, h_k)?;
        Ok((units, weights))
    }

    /// `P = softmax(ŵ)` over real windows and `h_{X→K} = Σ_L P_L Ĥ^K_L`.
    pub fn topic_transition<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        unit_weights: Var,
        units: Var,
        window_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let dist = tape.masked_softmax(unit_weights, Some(window_mask), EmptyRow::Error)?;
        let vector = tape.row_weighted_sum(dist, units)?;
        Ok((dist, vector))
    }

    /// The full selection pipeline for a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_k: Var,
        h_x: Var,
        h_last: Var,
        batch: &crate::data::Batch,
    ) -> Result<TopicTransition> {
        let b = batch.size;
        let h_k_agg =
            self.highway_aggregate(tape, store, &self.bg_layers, h_k, h_last, batch.bg_len)?;
        let h_x_agg =
            self.highway_aggregate(tape, store, &self.ctx_layers, h_x, h_last, batch.ctx_len)?;
        let matching = self.matching_matrix(tape, store, h_k_agg, h_x_agg, b)?;
        let w = self.transition_weights(tape, matching, &batch.bg_mask, &batch.ctx_mask, b)?;
        let unit_weights = self.unfold_sum(tape, w, batch.m)?;
        let (units, local_weights) =
            self.unfold_attention(tape, store, h_k_agg, h_last, &batch.bg_mask, batch.m)?;
        let (unit_dist, vector) =
            self.topic_transition(tape, unit_weights, units, &batch.window_mask)?;
        Ok(TopicTransition {
            unit_weights,
            unit_dist,
            units,
            local_weights,
            vector,
            h_k_agg,
            h_x_agg,
        })
    }
}

/// The vector used in place of `h_{X→K}` when global selection is disabled.
pub fn zero_transition<T: Scalar>(tape: &mut Tape<T>, batch: usize, hidden: usize) -> Var {
    tape.constant(Tensor::zeros(&[batch, hidden]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(h: usize) -> (ParamStore<f64>, GlobalSelector) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GlobalSelector::new(&mut store, &mut rng, h, 1).unwrap();
        (store, g)
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn depth_zero_is_config_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            GlobalSelector::new(&mut store, &mut rng, 4, 0),
            Err(GlksError::Config(_))
        ));
    }

    #[test]
    fn highway_gate_limits() {
        let (mut store, g) = setup(3);
        let layer = g.bg_layers[0].clone();
        let gate_b = layer.gate.b.unwrap();
        for (bias, expect_linear) in [(60.0, true), (-60.0, false)] {
            store.get_mut(gate_b).value.fill(bias);
            let mut tape = Tape::new();
            let h = tape.constant(rand_tensor(4, 3, 1));
            let c = tape.constant(rand_tensor(1, 3, 2));
            let out = g
                .highway_aggregate(&mut tape, &store, std::slice::from_ref(&layer), h, c, 4)
                .unwrap();
            let inp = {
                let cr = tape.gather_rows(c, &[0, 0, 0, 0]).unwrap();
                tape.concat_cols(&[h, cr]).unwrap()
            };
            let path = if expect_linear {
                layer.linear.forward(&mut tape, &store, inp).unwrap()
            } else {
                let p = layer.nonlinear.forward(&mut tape, &store, inp).unwrap();
                tape.tanh(p)
            };
            for (a, b) in tape.value(out).data().iter().zip(tape.value(path).data()) {
                assert!((a - b).abs() < 1e-12);
                if !expect_linear {
                    assert!(a.abs() < 1.0);
                }
            }
        }
    }

    #[test]
    fn matching_shape_zero_v_and_identical_rows() {
        let (mut store, g) = setup(3);
        let mut tape = Tape::new();
        let mut hk = rand_tensor(3, 3, 4);
        let row0 = hk.row(0).to_vec();
        hk.data_mut()[6..9].copy_from_slice(&row0);
        let hk = tape.constant(hk);
        let hx = tape.constant(rand_tensor(2, 3, 5));
        let m = g.matching_matrix(&mut tape, &store, hk, hx, 1).unwrap();
        assert_eq!(tape.shape(m), &[3, 2]);
        assert_eq!(tape.value(m).row(0), tape.value(m).row(2));

        store.get_mut(g.v_m).value.fill(0.0);
        let mut tape = Tape::new();
        let hk = tape.constant(rand_tensor(3, 3, 4));
        let hx = tape.constant(rand_tensor(2, 3, 5));
        let m = g.matching_matrix(&mut tape, &store, hk, hx, 1).unwrap();
        assert!(tape.value(m).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transition_weights_fixtures() {
        let (_, g) = setup(2);
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 0.0]]).unwrap());
        let w = g
            .transition_weights(&mut tape, m, &[true, true], &[true, true], 1)
            .unwrap();
        assert_eq!(tape.value(w).data(), &[3.0, 2.0]);

        let col = tape.constant(Tensor::from_rows(&[vec![1.5], vec![-2.0], vec![0.0]]).unwrap());
        let w = g
            .transition_weights(&mut tape, col, &[true, true, false], &[true], 1)
            .unwrap();
        assert_eq!(&tape.value(w).data()[..2], &[1.5, -2.0]);
        assert_eq!(tape.value(w).data()[2], f64::NEG_INFINITY);
    }

    #[test]
    fn unfold_sum_identity_at_m1() {
        let (_, g) = setup(2);
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        let s = g.unfold_sum(&mut tape, w, 1).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(w).data());
    }

    #[test]
    fn unfold_attention_properties() {
        let (store, g) = setup(3);
        // identical vectors inside each window come back unchanged
        let mut tape = Tape::new();
        let mut data = Vec::new();
        for w in 0..2 {
            for _ in 0..2 {
                data.extend([w as f64, 0.5, -0.25]);
            }
        }
        let hk = tape.constant(Tensor::new(vec![4, 3], data).unwrap());
        let last = tape.constant(rand_tensor(1, 3, 8));
        let (units, weights) = g
            .unfold_attention(&mut tape, &store, hk, last, &[true; 4], 2)
            .unwrap();
        assert_eq!(tape.value(units).row(0), &[0.0, 0.5, -0.25]);
        assert_eq!(tape.value(units).row(1), &[1.0, 0.5, -0.25]);
        for r in 0..2 {
            assert!((tape.value(weights).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let hk = tape.constant(rand_tensor(3, 3, 9));
        let (units, _) = g
            .unfold_attention(&mut tape, &store, hk, last, &[true; 3], 1)
            .unwrap();
        assert_eq!(tape.value(units).data(), tape.value(hk).data());
    }

    #[test]
    fn topic_transition_limits() {
        let (_, g) = setup(2);
        let mut tape = Tape::<f64>::new();
        let units = tape.constant(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![0.0, 1.0]]).unwrap(),
        );
        let uniform = tape.constant(Tensor::from_rows(&[vec![0.7, 0.7, 0.7]]).unwrap());
        let (_, v) = g
            .topic_transition(&mut tape, uniform, units, &[true; 3])
            .unwrap();
        let mean = [4.0 / 3.0, -1.0 / 3.0];
        for (a, b) in tape.value(v).data().iter().zip(mean) {
            assert!((a - b).abs() < 1e-12);
        }

        let peaked = tape.constant(Tensor::from_rows(&[vec![0.0, 200.0, 0.0]]).unwrap());
        let (_, v) = g
            .topic_transition(&mut tape, peaked, units, &[true; 3])
            .unwrap();
        assert!((tape.value(v).data()[1] + 4.0).abs() < 1e-9);

        let base = tape.constant(Tensor::from_rows(&[vec![0.1, -0.4, 0.9]]).unwrap());
        let shifted = tape.constant(Tensor::from_rows(&[vec![5.1, 4.6, 5.9]]).unwrap());
        let (p1, v1) = g
            .topic_transition(&mut tape, base, units, &[true; 3])
            .unwrap();
        let (p2, v2) = g
            .topic_transition(&mut tape, shifted, units, &[true; 3])
            .unwrap();
        for (a, b) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(v1).data().iter().zip(tape.value(v2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_windows_get_zero_probability() {
        let (_, g) = setup(2);
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, f64::NEG_INFINITY]]).unwrap());
        let units = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
        );
        let (p, _) = g
            .topic_transition(&mut tape, w, units, &[true, true, false])
            .unwrap();
        assert_eq!(tape.value(p).data()[2], 0.0);
    }
}
