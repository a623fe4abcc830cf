//! Layers assembled from tape operations.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_weight(&format!("{name}.w"), &[in_dim, out_dim], rng)?;
        let b = if bias {
            Some(store.add_bias(&format!("{name}.b"), out_dim)?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// GRU cell in the reset-before-candidate form:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h~ = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = z ⊙ h + (1 − z) ⊙ h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    /// `[in, 3h]`, column blocks z | r | n.
    pub w_x: ParamId,
    /// `[h, 2h]`, column blocks z | r.
    pub u_zr: ParamId,
    pub u_n: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(GruCell {
            w_x: store.add_weight(&format!("{name}.w_x"), &[in_dim, 3 * hidden], rng)?,
            u_zr: store.add_weight(&format!("{name}.u_zr"), &[hidden, 2 * hidden], rng)?,
            u_n: store.add_weight(&format!("{name}.u_n"), &[hidden, hidden], rng)?,
            b: store.add_bias(&format!("{name}.b"), 3 * hidden)?,
            in_dim,
            hidden,
        })
    }

    /// `x · W_x + b` for any number of input rows. Sequences project all
    /// steps at once and feed row blocks to [`GruCell::step_projected`].
    pub fn project_input<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w_x);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }

    pub fn step_projected<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        xw: Var,
        h: Var,
    ) -> Result<Var> {
        let hd = self.hidden;
        let u_zr = tape.param(store, self.u_zr);
        let u_n = tape.param(store, self.u_n);
        let x_zr = tape.slice_cols(xw, 0, 2 * hd)?;
        let x_n = tape.slice_cols(xw, 2 * hd, hd)?;
        let h_zr = tape.matmul(h, u_zr)?;
        let pre_zr = tape.add(x_zr, h_zr)?;
        let zr = tape.sigmoid(pre_zr);
        let z = tape.slice_cols(zr, 0, hd)?;
        let r = tape.slice_cols(zr, hd, hd)?;
        let rh = tape.mul(r, h)?;
        let h_n = tape.matmul(rh, u_n)?;
        let pre_n = tape.add(x_n, h_n)?;
        let cand = tape.tanh(pre_n);
        // h' = cand + z ⊙ (h − cand)
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(z, diff)?;
        tape.add(cand, keep)
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let xw = self.project_input(tape, store, x)?;
        self.step_projected(tape, store, xw, h)
    }
}

/// Additive attention `score(q, k) = vᵀ tanh(W_q q + W_k k)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
    ) -> Result<Self> {
        Ok(AdditiveAttention {
            w_q: store.add_weight(&format!("{name}.w_q"), &[query_dim, attn_dim], rng)?,
            w_k: store.add_weight(&format!("{name}.w_k"), &[key_dim, attn_dim], rng)?,
            v: store.add_weight(&format!("{name}.v"), &[attn_dim, 1], rng)?,
        })
    }

    /// `keys · W_k`, computed once per sequence and reused across queries.
    pub fn project_keys<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        keys: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w_k);
        tape.matmul(keys, w)
    }

    /// Unnormalised scores `[R, n]` of query row `r` against key rows
    /// `r·n .. (r+1)·n` of the projected keys.
    pub fn scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        keys_proj: Var,
        n: usize,
    ) -> Result<Var> {
        let w_q = tape.param(store, self.w_q);
        let v = tape.param(store, self.v);
        let q = tape.matmul(query, w_q)?;
        let rows = tape.value(q).rows();
        let idx: Vec<usize> = (0..rows)
            .flat_map(|r| std::iter::repeat_n(r, n))
            .collect();
        let q_rep = tape.gather_rows(q, &idx)?;
        let pre = tape.add(q_rep, keys_proj)?;
        let act = tape.tanh(pre);
        let s = tape.matmul(act, v)?;
        tape.reshape(s, &[rows, n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, Objective};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct GruObjective {
        cell: GruCell,
        x: Vec<f64>,
        h: Vec<f64>,
    }

    impl Objective for GruObjective {
        fn eval<S: Scalar>(&self, params: &ParamStore<S>, tape: &mut Tape<S>) -> Result<Var> {
            let x = tape.constant(Tensor::from_f64(&[2, self.cell.in_dim], &self.x)?);
            let h = tape.constant(Tensor::from_f64(&[2, self.cell.hidden], &self.h)?);
            let h1 = self.cell.step(tape, params, x, h)?;
            let h2 = self.cell.step(tape, params, x, h1)?;
            let sq = tape.mul(h2, h2)?;
            let l = tape.sum(sq);
            Ok(tape.affine(l, S::of(3.0), S::zero()))
        }
    }

    fn random_cell(seed: u64, in_dim: usize, hidden: usize) -> (ParamStore<f64>, GruCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, &mut rng, "gru", in_dim, hidden).unwrap();
        // push weights out of the tiny-init regime so gates actually vary
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        (store, cell)
    }

    #[test]
    fn zero_weights_zero_state_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 4).unwrap();
        for (_, p) in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3], 0.7));
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let out = cell.step(&mut tape, &store, x, h).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let (mut store, cell) = random_cell(3, 3, 4);
        let b = store.get_mut(cell.b);
        for v in &mut b.value.data_mut()[..4] {
            *v = 50.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[0.3, -0.8, 0.5]).unwrap());
        let h_prev = [0.2, -0.4, 0.9, -0.1];
        let h = tape.constant(Tensor::from_f64(&[1, 4], &h_prev).unwrap());
        let out = cell.step(&mut tape, &store, x, h).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(h_prev) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_stays_bounded() {
        let (store, cell) = random_cell(4, 3, 5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3], 10.0));
        let mut h = tape.constant(Tensor::zeros(&[1, 5]));
        for _ in 0..20 {
            h = cell.step(&mut tape, &store, x, h).unwrap();
            assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let (store, cell) = random_cell(5, 3, 4);
        let obj = GruObjective {
            cell,
            x: vec![0.1, -0.5, 0.7, 0.3, 0.2, -0.9],
            h: vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.0, 0.3, 0.1],
        };
        let report = check_params(&obj, &store, 1e-5, 1e-3).unwrap();
        assert!(report.passed(), "{report}");
        let report32 = check_params(&obj, &store.cast::<f32>(), 1e-5, 1e-3).unwrap();
        assert!(report32.passed(), "{report32}");
    }
}
