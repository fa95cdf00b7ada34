//! Shared layers: forward-pass context, batched sequences, recurrent cells.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

/// Epsilon for every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Everything a forward pass writes into: the tape, the parameters it reads,
/// and the dropout generator (present only while training).
pub struct Forward<'a, F> {
    pub g: &'a mut Graph<F>,
    pub store: &'a ParamStore<F>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, F: Real> Forward<'a, F> {
    pub fn eval(g: &'a mut Graph<F>, store: &'a ParamStore<F>) -> Self {
        Forward { g, store, rng: None }
    }

    pub fn train(g: &'a mut Graph<F>, store: &'a ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Forward { g, store, rng: Some(rng) }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => self.g.dropout(x, rate, true, rng),
            None => Ok(x),
        }
    }
}

/// A batch of sequences, time-major: `steps[t]` is `[batch x dim]`.
/// `mask[t][b]` marks real (non-padding) positions.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub steps: Vec<Var>,
    pub mask: Vec<Vec<bool>>,
}

impl SeqBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    /// Valid length of each sequence.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch()).map(|b| self.mask.iter().filter(|m| m[b]).count()).collect()
    }

    pub fn mask_factors<F: Real>(&self, t: usize) -> Vec<F> {
        self.mask[t].iter().map(|&m| if m { F::one() } else { F::zero() }).collect()
    }

    /// Mask as `[batch x steps]` row-major, the layout attention uses.
    pub fn mask_by_row(&self) -> Vec<bool> {
        let (b, t) = (self.batch(), self.len());
        let mut out = vec![false; b * t];
        for (ti, m) in self.mask.iter().enumerate() {
            for bi in 0..b {
                out[bi * t + ti] = m[bi];
            }
        }
        out
    }

    /// Stacks every step into one `[T*B x d]` matrix.
    pub fn stacked<F: Real>(&self, g: &mut Graph<F>) -> Var {
        g.concat_rows(&self.steps)
    }
}

/// Masks for a batch of sequences with the given lengths, padded to the max.
pub fn length_mask(lengths: &[usize]) -> Vec<Vec<bool>> {
    let t = lengths.iter().copied().max().unwrap_or(0);
    (0..t).map(|ti| lengths.iter().map(|&l| ti < l).collect()).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = store.register(format!("{name}.w"), ParamKind::Weight, vec![inp, out]);
        let b = bias.then(|| store.register(format!("{name}.b"), ParamKind::Weight, vec![out]));
        Linear { w, b }
    }

    pub fn apply<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var) -> Var {
        let w = fx.p(self.w);
        let y = fx.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = fx.p(b);
                fx.g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{name}.gain"), ParamKind::LayerNormGain, vec![dim]),
            bias: store.register(format!("{name}.bias"), ParamKind::LayerNormBias, vec![dim]),
        }
    }

    pub fn apply<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var) -> Var {
        let (gain, bias) = (fx.p(self.gain), fx.p(self.bias));
        fx.g.layer_norm(x, gain, bias, F::of(LAYER_NORM_EPS))
    }
}

/// LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Recurrent state of one layer: hidden and cell, each `[batch x hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input_dim: usize, hidden: usize) -> Self {
        LstmCell {
            wx: store.register(format!("{name}.wx"), ParamKind::Weight, vec![input_dim, 4 * hidden]),
            wh: store.register(format!("{name}.wh"), ParamKind::Weight, vec![hidden, 4 * hidden]),
            b: store.register(format!("{name}.b"), ParamKind::Weight, vec![4 * hidden]),
            input_dim,
            hidden,
        }
    }

    pub fn zero_state<F: Real>(&self, g: &mut Graph<F>, batch: usize) -> CellState {
        let h = g.constant_matrix(batch, self.hidden, vec![F::zero(); batch * self.hidden]);
        let c = g.constant_matrix(batch, self.hidden, vec![F::zero(); batch * self.hidden]);
        CellState { h, c }
    }

    /// Input projection `x @ wx + b` for a stacked `[N x input]` matrix.
    pub fn project_input<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var) -> Var {
        let (wx, b) = (fx.p(self.wx), fx.p(self.b));
        let y = fx.g.matmul(x, wx);
        fx.g.add_row(y, b)
    }

    /// One update from a precomputed input projection.
    pub fn step_projected<F: Real>(&self, fx: &mut Forward<'_, F>, xproj: Var, prev: CellState) -> CellState {
        let wh = fx.p(self.wh);
        let hh = fx.g.matmul(prev.h, wh);
        let gates = fx.g.add(xproj, hh);
        let n = self.hidden;
        let g = &mut *fx.g;
        let i = g.slice_cols(gates, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, n, n);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * n, n);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * n, n);
        let o = g.sigmoid(o);
        let keep = g.mul(f, prev.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        CellState { h, c }
    }

    pub fn step<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var, prev: CellState) -> CellState {
        let xproj = self.project_input(fx, x);
        self.step_projected(fx, xproj, prev)
    }

    /// Runs over a whole sequence in one direction. Padding positions carry
    /// the previous state through unchanged.
    pub fn run<F: Real>(&self, fx: &mut Forward<'_, F>, seq: &SeqBatch, reverse: bool) -> Vec<Var> {
        let batch = seq.batch();
        let stacked = seq.stacked(fx.g);
        let proj = self.project_input(fx, stacked);
        let mut state = self.zero_state(fx.g, batch);
        let mut out = vec![state.h; seq.len()];
        let order: Vec<usize> =
            if reverse { (0..seq.len()).rev().collect() } else { (0..seq.len()).collect() };
        for t in order {
            let xp = fx.g.slice_rows(proj, t * batch, batch);
            let next = self.step_projected(fx, xp, state);
            let m = seq.mask_factors::<F>(t);
            state = CellState {
                h: fx.g.blend_rows(&m, next.h, state.h),
                c: fx.g.blend_rows(&m, next.c, state.c),
            };
            out[t] = state.h;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn padded_steps_keep_state() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "c", 2, 3);
        store.init_uniform(0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let steps: Vec<Var> = (0..3)
            .map(|t| fx.g.constant(Tensor::from_f64(vec![2, 2], &[t as f64, 1.0, -1.0, 0.5]).unwrap()))
            .collect();
        let seq = SeqBatch { steps, mask: length_mask(&[3, 1]) };
        let out = cell.run(&mut fx, &seq, false);
        let row1 = |v: Var, g: &Graph<f64>| g.value(v).row(1).to_vec();
        assert_eq!(row1(out[0], fx.g), row1(out[2], fx.g));
        let back = cell.run(&mut fx, &seq, true);
        // Backward direction over a length-1 sequence starts at its only step.
        assert_eq!(row1(back[0], fx.g), row1(out[0], fx.g));
    }
}
