//! Hierarchical multiscale encoder with learned binary skip gates.
//!
//! Each layer emits a gate `z` per timestep. When `z[l][t] = 1` the layer above
//! performs a normal update at `t`; otherwise it copies its previous state and
//! its own gate is locked to 0, so upper layers never see more steps than the
//! layers below. The node to the right always performs a normal update (there
//! is no flush).

use serde::{Deserialize, Serialize};

use crate::encoder::{BiLstmStack, EncoderConfig, Encoded};
use crate::error::{ensure, Error, Result};
use crate::graph::{hard_sigmoid, Var};
use crate::nn::{CellState, Forward, Linear, LstmCell, SeqBatch};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

/// Binary gate decisions `z[layer][t]` and their hard-sigmoid activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ZMatrix {
    pub z: Vec<Vec<u8>>,
    pub z_tilde: Vec<Vec<f64>>,
}

impl ZMatrix {
    pub fn new(z: Vec<Vec<u8>>, z_tilde: Vec<Vec<f64>>) -> Result<Self> {
        let m = ZMatrix { z, z_tilde };
        m.validate()?;
        Ok(m)
    }

    pub fn layers(&self) -> usize {
        self.z.len()
    }

    pub fn steps(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.z.is_empty(), Contract, "ZMatrix has no layers");
        let t = self.steps();
        ensure!(t >= 1, Contract, "ZMatrix has no timesteps");
        ensure!(self.z.iter().all(|r| r.len() == t), Contract, "ragged ZMatrix");
        ensure!(self.z.iter().flatten().all(|&v| v <= 1), Contract, "gate values must be 0 or 1");
        ensure!(self.nesting_violations() == 0, Contract, "gate nesting violated");
        Ok(())
    }

    /// Count of `(l, t)` with `z[l][t] = 1` but `z[l-1][t] = 0`.
    pub fn nesting_violations(&self) -> usize {
        self.z
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).filter(|(&lo, &hi)| hi == 1 && lo == 0).count())
            .sum()
    }

    /// `Z^l = sum_t z[l][t]` for every layer.
    pub fn counts(&self) -> Vec<usize> {
        self.z.iter().map(|r| r.iter().map(|&v| v as usize).sum()).collect()
    }

    /// Updates performed by each layer: every step for layer 1, `Z^(l-1)` above.
    pub fn layer_updates(&self) -> Vec<usize> {
        let counts = self.counts();
        std::iter::once(self.steps()).chain(counts[..counts.len() - 1].iter().copied()).collect()
    }

    pub fn computation_ratio(&self) -> f64 {
        let t = self.steps() as f64;
        let updates = self.layer_updates();
        updates.iter().map(|&u| u as f64 / t).sum::<f64>() / updates.len() as f64
    }

    /// Text dump, one `layer<TAB>t<TAB>z` line per entry (1-based layer, 0-based t).
    pub fn trace(&self) -> String {
        let mut out = String::new();
        for (l, row) in self.z.iter().enumerate() {
            for (t, z) in row.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", l + 1, t, z));
            }
        }
        out
    }
}

/// Mean over layers of per-layer update fractions.
pub fn computation_ratio_from_fractions(fractions: &[f64]) -> f64 {
    fractions.iter().sum::<f64>() / fractions.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyForm {
    /// `max(0, a1*T - Z, Z - a2*T)`: zero exactly inside `[a1, a2]`.
    Corrected,
    /// `max(0, Z - a1*T, a2*T - Z)`, the formula as printed.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionPenaltyConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub weight: f64,
    pub form: PenaltyForm,
    /// Updates before the penalty is applied at all.
    pub delay_steps: u64,
    /// Updates (after the delay) over which the weight ramps linearly up from 0.
    pub warmup_steps: u64,
}

impl Default for CompressionPenaltyConfig {
    fn default() -> Self {
        CompressionPenaltyConfig { alpha1: 0.1, alpha2: 0.9, weight: 2.0, form: PenaltyForm::Corrected, delay_steps: 0, warmup_steps: 0 }
    }
}

impl CompressionPenaltyConfig {
    /// Fraction of the weight in effect after `step` updates.
    pub fn ramp(&self, step: u64) -> f64 {
        if step < self.delay_steps {
            0.0
        } else if self.warmup_steps == 0 {
            1.0
        } else {
            ((step - self.delay_steps) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 <= self.alpha1 && self.alpha1 < self.alpha2 && self.alpha2 <= 1.0,
            Config,
            "compression penalty needs 0 <= alpha1 < alpha2 <= 1"
        );
        ensure!(self.weight >= 0.0, Config, "compression penalty weight must be >= 0");
        Ok(())
    }
}

/// Weighted gate-rate penalty summed over layers.
pub fn compression_loss(z_counts: &[usize], t: usize, cfg: &CompressionPenaltyConfig) -> Result<f64> {
    if let Some(&z) = z_counts.iter().find(|&&z| z > t) {
        return Err(Error::Contract(format!("gate count {z} exceeds sequence length {t}")));
    }
    let t = t as f64;
    let total: f64 = z_counts
        .iter()
        .map(|&z| {
            let z = z as f64;
            match cfg.form {
                PenaltyForm::Corrected => 0f64.max(cfg.alpha1 * t - z).max(z - cfg.alpha2 * t),
                PenaltyForm::Literal => 0f64.max(z - cfg.alpha1 * t).max(cfg.alpha2 * t - z),
            }
        })
        .sum();
    Ok(cfg.weight * total)
}

/// Linear slope annealing from `start` to `end` over `anneal_steps` updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlopeSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for SlopeSchedule {
    fn default() -> Self {
        SlopeSchedule { start: 1.0, end: 5.0, anneal_steps: 80_000 }
    }
}

impl SlopeSchedule {
    pub fn slope(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.anneal_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmMode {
    /// Attend over the gated output module at every timestep.
    GatedOutput,
    /// Run the BiLSTM stack over the top layer's surviving timesteps.
    Stacked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mode: HmMode,
    pub dropout: f64,
    pub compression: Option<CompressionPenaltyConfig>,
    pub slope: SlopeSchedule,
}

impl Default for HmConfig {
    fn default() -> Self {
        HmConfig {
            num_layers: 3,
            hidden_dim: 512,
            mode: HmMode::Stacked,
            dropout: 0.2,
            compression: None,
            slope: SlopeSchedule::default(),
        }
    }
}

impl HmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, Config, "hm.num_layers must be >= 1");
        ensure!(self.hidden_dim >= 1, Config, "hm.hidden_dim must be >= 1");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "hm.dropout must be in [0, 1)");
        ensure!(self.slope.start > 0.0 && self.slope.end >= self.slope.start, Config, "slope must be positive and non-decreasing");
        if let Some(c) = &self.compression {
            c.validate()?;
        }
        Ok(())
    }
}

/// How a layer decides whether to update at a timestep.
#[derive(Clone, Copy, Debug)]
pub enum Update<'a, F> {
    /// Constant per-row flags (the bottom layer: valid positions).
    Mask(&'a [F]),
    /// The gate of the layer below, straight-through on the tape.
    Gate(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct HmStep {
    pub state: CellState,
    /// Binary gate `[batch x 1]`.
    pub z: Var,
    /// Gate preactivation `[batch x 1]`.
    pub preact: Var,
}

/// One HM layer: an LSTM cell plus a skip-gate read from the input and the
/// previous hidden state.
#[derive(Clone, Copy, Debug)]
pub struct HmCell {
    pub lstm: LstmCell,
    pub wz_x: ParamId,
    pub wz_h: ParamId,
    pub z_bias: ParamId,
}

impl HmCell {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input_dim: usize, hidden: usize) -> Self {
        HmCell {
            lstm: LstmCell::new(store, &format!("{name}.lstm"), input_dim, hidden),
            wz_x: store.register(format!("{name}.wz_x"), ParamKind::Weight, vec![input_dim, 1]),
            wz_h: store.register(format!("{name}.wz_h"), ParamKind::Weight, vec![hidden, 1]),
            z_bias: store.register(format!("{name}.z_bias"), ParamKind::GateBias, vec![1]),
        }
    }

    /// One timestep. Rows whose update flag is 0 copy `prev` exactly; `lock`
    /// forces the emitted gate to 0 for those rows with no gradient through it.
    pub fn step<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        below: Var,
        prev: CellState,
        update: Update<'_, F>,
        lock: &[F],
        slope: F,
    ) -> HmStep {
        let next = self.lstm.step(fx, below, prev);
        let state = match update {
            Update::Mask(m) => CellState {
                h: fx.g.blend_rows(m, next.h, prev.h),
                c: fx.g.blend_rows(m, next.c, prev.c),
            },
            Update::Gate(z) => {
                let dh = fx.g.sub(next.h, prev.h);
                let dh = fx.g.mul_col(dh, z);
                let dc = fx.g.sub(next.c, prev.c);
                let dc = fx.g.mul_col(dc, z);
                CellState { h: fx.g.add(prev.h, dh), c: fx.g.add(prev.c, dc) }
            }
        };
        let (wx, wh, bz) = (fx.p(self.wz_x), fx.p(self.wz_h), fx.p(self.z_bias));
        let from_below = fx.g.matmul(below, wx);
        let from_left = fx.g.matmul(prev.h, wh);
        let pre = fx.g.add(from_below, from_left);
        let preact = fx.g.add_row(pre, bz);
        let st = fx.g.straight_through_step(preact, slope);
        let z = fx.g.scale_rows(st, lock);
        HmStep { state, z, preact }
    }
}

/// Mixes all layers' states into one vector per step:
/// `relu(sum_l g_l * (W_l h^l))` with `g = sigmoid(W_g [h^1; ...; h^L])`.
#[derive(Clone, Debug)]
pub struct GatedOutput {
    pub gate: ParamId,
    pub proj: Vec<ParamId>,
}

impl GatedOutput {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, layers: usize, hidden: usize, out: usize) -> Self {
        GatedOutput {
            gate: store.register(format!("{name}.gate"), ParamKind::Weight, vec![layers * hidden, layers]),
            proj: (0..layers)
                .map(|l| store.register(format!("{name}.proj{}", l + 1), ParamKind::Weight, vec![hidden, out]))
                .collect(),
        }
    }

    pub fn apply<F: Real>(&self, fx: &mut Forward<'_, F>, hs: &[Var]) -> Var {
        assert_eq!(hs.len(), self.proj.len(), "gated_output: layer count");
        let cat = fx.g.concat_cols(hs);
        let wg = fx.p(self.gate);
        let logits = fx.g.matmul(cat, wg);
        let gates = fx.g.sigmoid(logits);
        let mut total: Option<Var> = None;
        for (l, (&h, &w)) in hs.iter().zip(&self.proj).enumerate() {
            let w = fx.p(w);
            let projected = fx.g.matmul(h, w);
            let g_l = fx.g.slice_cols(gates, l, 1);
            let term = fx.g.mul_col(projected, g_l);
            total = Some(match total {
                Some(t) => fx.g.add(t, term),
                None => term,
            });
        }
        fx.g.relu(total.expect("at least one layer"))
    }
}

/// Tape handles and decisions from one pass over an HM stack.
#[derive(Clone, Debug)]
pub struct HmForward {
    /// `hidden[l][t]`, `[batch x hidden]`.
    pub hidden: Vec<Vec<Var>>,
    pub cells: Vec<Vec<Var>>,
    /// `z[l][t]`, `[batch x 1]`.
    pub z: Vec<Vec<Var>>,
    /// One per sentence, trimmed to its length.
    pub zmatrices: Vec<ZMatrix>,
}

#[derive(Clone, Debug)]
pub struct HmStack {
    pub cells: Vec<HmCell>,
    pub dropout: f64,
}

impl HmStack {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, layers: usize, input_dim: usize, hidden: usize, dropout: f64) -> Self {
        let cells = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input_dim } else { hidden };
                HmCell::new(store, &format!("{name}.l{}", l + 1), inp, hidden)
            })
            .collect();
        HmStack { cells, dropout }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].lstm.hidden
    }

    /// Runs every layer left to right. Layer 1 updates at every valid step;
    /// layer `l + 1` updates at `t` iff `z[l][t] = 1`.
    pub fn forward<F: Real>(&self, fx: &mut Forward<'_, F>, seq: &SeqBatch, slope: f64) -> Result<HmForward> {
        ensure!(!seq.is_empty(), Contract, "HM stack needs at least one timestep");
        let batch = seq.batch();
        let layers = self.cells.len();
        let slope_f = F::of(slope);
        let mut states: Vec<CellState> = self.cells.iter().map(|c| c.lstm.zero_state(fx.g, batch)).collect();
        let mut hidden = vec![Vec::with_capacity(seq.len()); layers];
        let mut cells = vec![Vec::with_capacity(seq.len()); layers];
        let mut z = vec![Vec::with_capacity(seq.len()); layers];
        let mut preacts = vec![Vec::with_capacity(seq.len()); layers];
        for t in 0..seq.len() {
            let valid = seq.mask_factors::<F>(t);
            let mut below = seq.steps[t];
            let mut lock = valid.clone();
            let mut gate_below: Option<Var> = None;
            for (l, cell) in self.cells.iter().enumerate() {
                let update = match gate_below {
                    None => Update::Mask(&valid),
                    Some(g) => Update::Gate(g),
                };
                let step = cell.step(fx, below, states[l], update, &lock, slope_f);
                states[l] = step.state;
                hidden[l].push(step.state.h);
                cells[l].push(step.state.c);
                z[l].push(step.z);
                preacts[l].push(step.preact);
                lock = fx.g.value(step.z).data().to_vec();
                gate_below = Some(step.z);
                below = fx.dropout(step.state.h, self.dropout)?;
            }
        }
        let lengths = seq.lengths();
        let zmatrices = (0..batch)
            .map(|b| {
                let len = lengths[b];
                let zs = z
                    .iter()
                    .map(|row| row[..len].iter().map(|&v| fx.g.value(v).data()[b].as_f64() as u8).collect())
                    .collect();
                let zt = preacts
                    .iter()
                    .map(|row| {
                        row[..len].iter().map(|&v| hard_sigmoid(fx.g.value(v).data()[b].as_f64(), slope)).collect()
                    })
                    .collect();
                ZMatrix { z: zs, z_tilde: zt }
            })
            .collect();
        Ok(HmForward { hidden, cells, z, zmatrices })
    }
}

/// Reference: a plain stack of unidirectional LSTM layers, every layer
/// updating at every valid step.
pub fn plain_stack_forward<F: Real>(fx: &mut Forward<'_, F>, cells: &[LstmCell], seq: &SeqBatch) -> Vec<Vec<Var>> {
    let mut out = Vec::with_capacity(cells.len());
    let mut input = seq.clone();
    for cell in cells {
        let hs = cell.run(fx, &input, false);
        input = SeqBatch { steps: hs.clone(), mask: seq.mask.clone() };
        out.push(hs);
    }
    out
}

#[derive(Clone, Debug)]
pub enum HmHead {
    Gated { gated: GatedOutput, projection: Linear },
    Stacked(BiLstmStack),
}

/// HM layers plus either the gated output module or a BiLSTM stack over the
/// top layer's surviving steps.
#[derive(Clone, Debug)]
pub struct HmEncoder {
    pub cfg: HmConfig,
    pub stack: HmStack,
    pub head: HmHead,
}

impl HmEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &HmConfig,
        bilstm: &EncoderConfig,
        input_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let stack = HmStack::new(store, &format!("{name}.hm"), cfg.num_layers, input_dim, cfg.hidden_dim, cfg.dropout);
        let head = match cfg.mode {
            HmMode::GatedOutput => HmHead::Gated {
                gated: GatedOutput::new(store, &format!("{name}.gated"), cfg.num_layers, cfg.hidden_dim, cfg.hidden_dim),
                projection: Linear::new(store, &format!("{name}.proj"), cfg.hidden_dim, bilstm.projection_dim, true),
            },
            HmMode::Stacked => {
                ensure!(bilstm.num_bilstm_layers >= 1, Config, "stacked HM mode needs BiLSTM layers above it");
                ensure!(bilstm.pooling.is_empty(), Config, "pooling is not supported above HM layers");
                HmHead::Stacked(BiLstmStack::new(
                    store,
                    &format!("{name}.bilstm"),
                    bilstm,
                    cfg.hidden_dim,
                    cfg.num_layers + 1,
                )?)
            }
        };
        Ok(HmEncoder { cfg: cfg.clone(), stack, head })
    }

    pub fn encode<F: Real>(&self, fx: &mut Forward<'_, F>, seq: &SeqBatch, slope: f64) -> Result<Encoded> {
        let hm = self.stack.forward(fx, seq, slope)?;
        let batch = seq.batch();
        let layers = self.cfg.num_layers;
        let lengths = seq.lengths();
        let mut layer_lengths: Vec<Vec<usize>> = hm.zmatrices.iter().map(|m| m.layer_updates()).collect();
        let gate_counts = hm
            .z
            .iter()
            .map(|row| {
                let mut acc = row[0];
                for &v in &row[1..] {
                    acc = fx.g.add(acc, v);
                }
                acc
            })
            .collect();
        let states = match &self.head {
            HmHead::Gated { gated, projection } => {
                let mut steps = Vec::with_capacity(seq.len());
                for t in 0..seq.len() {
                    let hs: Vec<Var> = (0..layers).map(|l| hm.hidden[l][t]).collect();
                    let h = gated.apply(fx, &hs);
                    steps.push(projection.apply(fx, h));
                }
                SeqBatch { steps, mask: seq.mask.clone() }
            }
            HmHead::Stacked(bilstm) => {
                let survivors = self.gather_survivors(fx, &hm, seq)?;
                let (states, bl) = bilstm.apply(fx, survivors)?;
                for b in 0..batch {
                    layer_lengths[b].extend(&bl[b]);
                }
                states
            }
        };
        debug_assert!(layer_lengths.iter().zip(&lengths).all(|(l, &t)| l[0] == t));
        Ok(Encoded { states, layer_lengths, zmatrices: hm.zmatrices, gate_counts })
    }

    /// Keeps the top layer's steps with `z = 1`, in order, plus each
    /// sentence's final step so trailing input is never dropped. Kept states
    /// are scaled by their gate (1 in the forward pass) so the gate receives
    /// gradient; a forced final step gets the complement added.
    fn gather_survivors<F: Real>(&self, fx: &mut Forward<'_, F>, hm: &HmForward, seq: &SeqBatch) -> Result<SeqBatch> {
        let batch = seq.batch();
        let top = hm.hidden.len() - 1;
        let lengths = seq.lengths();
        let mut keep: Vec<Vec<usize>> = Vec::with_capacity(batch);
        let mut forced = vec![vec![F::zero(); batch]; seq.len()];
        for b in 0..batch {
            let z = &hm.zmatrices[b].z[top];
            let last = lengths[b] - 1;
            let mut ts: Vec<usize> = (0..last).filter(|&t| z[t] == 1).collect();
            if z[last] == 0 {
                forced[last][b] = F::one();
            }
            ts.push(last);
            keep.push(ts);
        }
        let mut scaled = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let f = fx.g.constant_matrix(batch, 1, forced[t].clone());
            let factor = fx.g.add(hm.z[top][t], f);
            scaled.push(fx.g.mul_col(hm.hidden[top][t], factor));
        }
        let stacked = fx.g.concat_rows(&scaled);
        let new_len = keep.iter().map(Vec::len).max().unwrap_or(1);
        let mut index = Vec::with_capacity(new_len * batch);
        let mut mask = Vec::with_capacity(new_len);
        for k in 0..new_len {
            let mut m = Vec::with_capacity(batch);
            for (b, ts) in keep.iter().enumerate() {
                match ts.get(k) {
                    Some(&t) => {
                        index.push(Some(t * batch + b));
                        m.push(true);
                    }
                    None => {
                        index.push(None);
                        m.push(false);
                    }
                }
            }
            mask.push(m);
        }
        let gathered = fx.g.gather_rows(stacked, index);
        let steps = (0..new_len).map(|k| fx.g.slice_rows(gathered, k * batch, batch)).collect();
        Ok(SeqBatch { steps, mask })
    }
}

/// Sum over sentences and layers of the gate-rate penalty, on the tape.
pub fn compression_penalty_on_tape<F: Real>(
    fx: &mut Forward<'_, F>,
    gate_counts: &[Var],
    lengths: &[usize],
    cfg: &CompressionPenaltyConfig,
) -> Var {
    let batch = lengths.len();
    let col = |fx: &mut Forward<'_, F>, a: f64| {
        let v = lengths.iter().map(|&t| F::of(a * t as f64)).collect();
        fx.g.constant_matrix(batch, 1, v)
    };
    let zero = fx.g.constant_matrix(batch, 1, vec![F::zero(); batch]);
    let mut total: Option<Var> = None;
    for &z in gate_counts {
        let lo = col(fx, cfg.alpha1);
        let hi = col(fx, cfg.alpha2);
        let (a, b) = match cfg.form {
            PenaltyForm::Corrected => (fx.g.sub(lo, z), fx.g.sub(z, hi)),
            PenaltyForm::Literal => (fx.g.sub(z, lo), fx.g.sub(hi, z)),
        };
        let m = fx.g.maximum(zero, a);
        let m = fx.g.maximum(m, b);
        let s = fx.g.sum(m);
        total = Some(match total {
            Some(t) => fx.g.add(t, s),
            None => s,
        });
    }
    let total = total.expect("at least one HM layer");
    fx.g.scale(total, F::of(cfg.weight))
}
