//! Unidirectional recurrent decoder with additive attention driven by the
//! bottom layer, and beam search with length normalization and coverage
//! penalty.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::nn::{CellState, Forward, LayerNorm, Linear, LstmCell, SeqBatch};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub residual_start_layer: usize,
    pub dropout: f64,
    pub beam_size: usize,
    pub coverage_penalty: f64,
    pub length_norm: f64,
    /// Output length cap as a multiple of the source length. Unset means 3x
    /// for characters and 2x for BPE fragments.
    pub max_output_factor: Option<f64>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 8,
            model_dim: 512,
            residual_start_layer: 3,
            dropout: 0.2,
            beam_size: 8,
            coverage_penalty: 0.2,
            length_norm: 0.2,
            max_output_factor: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, Config, "decoder.num_layers must be >= 1");
        ensure!(self.model_dim >= 1, Config, "decoder.model_dim must be >= 1");
        ensure!(self.residual_start_layer >= 2, Config, "decoder.residual_start_layer must be >= 2");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "decoder.dropout must be in [0, 1)");
        ensure!(self.beam_size >= 1, Config, "decoder.beam_size must be >= 1");
        ensure!(
            self.coverage_penalty >= 0.0 && self.length_norm >= 0.0,
            Config,
            "beam penalties must be >= 0"
        );
        if let Some(f) = self.max_output_factor {
            ensure!(f > 0.0, Config, "decoder.max_output_factor must be positive");
        }
        Ok(())
    }
}

/// Source states the decoder attends over, time-major `[T * B x d]`.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    pub values: Var,
    /// `values @ W_k`, computed once per batch.
    pub keys: Var,
    pub steps: usize,
    pub batch: usize,
    /// `[B x T]` row-major validity.
    pub mask: Vec<bool>,
}

/// `score_j = v . tanh(W_q q + W_k k_j)`, masked softmax, weighted sum of values.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, query_dim: usize, key_dim: usize, attn_dim: usize) -> Self {
        AdditiveAttention {
            wq: store.register(format!("{name}.wq"), ParamKind::Weight, vec![query_dim, attn_dim]),
            wk: store.register(format!("{name}.wk"), ParamKind::Weight, vec![key_dim, attn_dim]),
            v: store.register(format!("{name}.v"), ParamKind::Weight, vec![attn_dim, 1]),
        }
    }

    pub fn memory<F: Real>(&self, fx: &mut Forward<'_, F>, states: &SeqBatch) -> AttentionMemory {
        let values = states.stacked(fx.g);
        self.memory_from_stacked(fx, values, states.len(), states.batch(), states.mask_by_row())
    }

    pub fn memory_from_stacked<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        values: Var,
        steps: usize,
        batch: usize,
        mask: Vec<bool>,
    ) -> AttentionMemory {
        let wk = fx.p(self.wk);
        let keys = fx.g.matmul(values, wk);
        AttentionMemory { values, keys, steps, batch, mask }
    }

    /// Returns the context `[B x d]` and weights `[B x T]`.
    pub fn attend<F: Real>(&self, fx: &mut Forward<'_, F>, mem: &AttentionMemory, query: Var) -> Result<(Var, Var)> {
        ensure!(mem.steps >= 1, Contract, "attention over an empty source");
        let wq = fx.p(self.wq);
        let v = fx.p(self.v);
        let q = fx.g.matmul(query, wq);
        let q = fx.g.tile_rows(q, mem.steps);
        let pre = fx.g.add(q, mem.keys);
        let act = fx.g.tanh(pre);
        let scores = fx.g.matmul(act, v);
        let scores = fx.g.reshape(scores, mem.steps, mem.batch);
        let scores = fx.g.transpose(scores);
        let weights = fx.g.masked_softmax(scores, mem.mask.clone())?;
        let context = fx.g.time_weighted_sum(weights, mem.values);
        Ok((context, weights))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cell: LstmCell,
    pub norm: LayerNorm,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub attention: AdditiveAttention,
    pub output: Linear,
    pub vocab_size: usize,
}

/// Output of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `[T * B x V]`, time-major.
    pub logits: Var,
    /// Per step, `[B x T_src]`.
    pub attention: Vec<Var>,
}

impl Decoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &DecoderConfig,
        vocab_size: usize,
        embed_dim: usize,
        memory_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = store.register(format!("{name}.embed"), ParamKind::Weight, vec![vocab_size, embed_dim]);
        let layers = (1..=cfg.num_layers)
            .map(|l| {
                let input = if l == 1 { embed_dim } else { d + memory_dim };
                DecoderLayer {
                    cell: LstmCell::new(store, &format!("{name}.l{l}"), input, d),
                    norm: LayerNorm::new(store, &format!("{name}.l{l}.ln"), d),
                    residual: l >= cfg.residual_start_layer,
                }
            })
            .collect();
        let attention = AdditiveAttention::new(store, &format!("{name}.attn"), d, memory_dim, d);
        let output = Linear::new(store, &format!("{name}.out"), d, vocab_size, true);
        Ok(Decoder { cfg: cfg.clone(), embed, layers, attention, output, vocab_size })
    }

    pub fn embed<F: Real>(&self, fx: &mut Forward<'_, F>, ids: &[usize]) -> Var {
        let table = fx.p(self.embed);
        fx.g.lookup(table, ids)
    }

    /// Teacher-forced pass over `inputs` (embedded previous tokens). Every
    /// layer above the bottom reads the context computed from the bottom
    /// layer's output at the same step.
    pub fn teacher_forced<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        mem: &AttentionMemory,
        inputs: &SeqBatch,
    ) -> Result<TeacherForced> {
        let steps = inputs.len();
        let rate = self.cfg.dropout;
        let bottom = &self.layers[0];
        let raw = bottom.cell.run(fx, inputs, false);
        let mut below = Vec::with_capacity(steps);
        let mut contexts = Vec::with_capacity(steps);
        let mut attention = Vec::with_capacity(steps);
        for h in raw {
            let h = bottom.norm.apply(fx, h);
            let (ctx, w) = self.attention.attend(fx, mem, h)?;
            contexts.push(ctx);
            attention.push(w);
            below.push(fx.dropout(h, rate)?);
        }
        for layer in &self.layers[1..] {
            let cat: Vec<Var> = below.iter().zip(&contexts).map(|(&h, &c)| fx.g.concat_cols(&[h, c])).collect();
            let seq = SeqBatch { steps: cat, mask: inputs.mask.clone() };
            let raw = layer.cell.run(fx, &seq, false);
            let mut next = Vec::with_capacity(steps);
            for (t, h) in raw.into_iter().enumerate() {
                let h = layer.norm.apply(fx, h);
                let h = fx.dropout(h, rate)?;
                next.push(if layer.residual { fx.g.add(h, below[t]) } else { h });
            }
            below = next;
        }
        let top = fx.g.concat_rows(&below);
        let logits = self.output.apply(fx, top);
        Ok(TeacherForced { logits, attention })
    }

    pub fn zero_state<F: Real>(&self, g: &mut Graph<F>, batch: usize) -> Vec<CellState> {
        self.layers.iter().map(|l| l.cell.zero_state(g, batch)).collect()
    }

    /// One incremental step: returns logits `[B x V]`, the new per-layer
    /// state, and attention weights `[B x T]`.
    pub fn decode_step<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        mem: &AttentionMemory,
        prev_tokens: &[usize],
        state: &[CellState],
    ) -> Result<(Var, Vec<CellState>, Var)> {
        let rate = self.cfg.dropout;
        let x = self.embed(fx, prev_tokens);
        let bottom = &self.layers[0];
        let s0 = bottom.cell.step(fx, x, state[0]);
        let h = bottom.norm.apply(fx, s0.h);
        let (ctx, weights) = self.attention.attend(fx, mem, h)?;
        let mut below = fx.dropout(h, rate)?;
        let mut new_state = vec![s0];
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            let inp = fx.g.concat_cols(&[below, ctx]);
            let s = layer.cell.step(fx, inp, state[l]);
            new_state.push(s);
            let h = layer.norm.apply(fx, s.h);
            let h = fx.dropout(h, rate)?;
            below = if layer.residual { fx.g.add(h, below) } else { h };
        }
        let logits = self.output.apply(fx, below);
        Ok((logits, new_state, weights))
    }
}

/// Token ids with fixed meaning in every vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_norm: f64,
    pub coverage_penalty: f64,
    /// Maximum emitted tokens, EOS included.
    pub max_len: usize,
    /// Never emitted (padding, start symbol).
    pub banned: Vec<usize>,
    pub eos: usize,
    pub bos: usize,
}

/// `((5 + len) / 6) ^ alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// `beta * sum_j log(min(mass_j, 1))`.
pub fn coverage_penalty(mass: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    beta * mass.iter().map(|&m| m.min(1.0).ln()).sum::<f64>()
}

pub fn rescore(log_prob: f64, len: usize, mass: &[f64], alpha: f64, beta: f64) -> f64 {
    log_prob / length_penalty(len, alpha) + coverage_penalty(mass, beta)
}

/// A partial or finished output.
#[derive(Clone, Debug)]
pub struct BeamHypothesis<F> {
    /// Emitted ids (EOS included once finished).
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Accumulated attention per valid source position.
    pub attention_mass: Vec<f64>,
    pub state: Vec<(Vec<F>, Vec<F>)>,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct ScoredHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub attention_mass: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    /// Best hypothesis, EOS stripped.
    pub tokens: Vec<usize>,
    pub best: ScoredHypothesis,
    /// Every hypothesis that emitted EOS during the search.
    pub finished: Vec<ScoredHypothesis>,
    /// True when nothing finished and the best unfinished hypothesis was returned.
    pub unfinished: bool,
}

/// Source-side inputs for decoding one sentence: projected states `[T x d]`.
pub struct SourceMemory<F> {
    pub values: Tensor<F>,
    pub keys: Tensor<F>,
}

impl<F: Real> SourceMemory<F> {
    pub fn new(decoder: &Decoder, store: &ParamStore<F>, values: Tensor<F>) -> Self {
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, store);
        let v = fx.g.constant(values.clone());
        let wk = fx.p(decoder.attention.wk);
        let k = fx.g.matmul(v, wk);
        let keys = fx.g.value(k).clone();
        SourceMemory { values, keys }
    }

    pub fn steps(&self) -> usize {
        self.values.rows()
    }

    /// Replicates the memory for `batch` hypotheses.
    fn tile(&self, g: &mut Graph<F>, batch: usize) -> AttentionMemory {
        let steps = self.steps();
        let rep = |t: &Tensor<F>| {
            let c = t.cols();
            let mut data = Vec::with_capacity(steps * batch * c);
            for s in 0..steps {
                for _ in 0..batch {
                    data.extend_from_slice(t.row(s));
                }
            }
            (c, data)
        };
        let (vc, vd) = rep(&self.values);
        let (kc, kd) = rep(&self.keys);
        let values = g.constant_matrix(steps * batch, vc, vd);
        let keys = g.constant_matrix(steps * batch, kc, kd);
        AttentionMemory { values, keys, steps, batch, mask: vec![true; steps * batch] }
    }
}

fn log_softmax_row<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Length-synchronous beam search over one source sentence.
///
/// At each step the candidates (every active hypothesis extended by every
/// allowed token) are ranked by model log-probability, ties broken by earlier
/// hypothesis then lower token id. Candidates are taken in rank order until
/// `beam_size` non-EOS hypotheses are active; EOS candidates taken on the way
/// join the finished pool. Finished hypotheses are ranked by
/// `log_prob / lp + cp`. Search stops at `max_len` or once no active
/// hypothesis can still beat the best finished score.
pub fn beam_search<F: Real>(
    decoder: &Decoder,
    store: &ParamStore<F>,
    source: &SourceMemory<F>,
    cfg: &BeamConfig,
) -> Result<BeamOutput> {
    ensure!(source.steps() >= 1, Contract, "beam search over an empty source");
    ensure!(cfg.beam_size >= 1, Contract, "beam size must be >= 1");
    ensure!(cfg.max_len >= 1, Contract, "max output length must be >= 1");
    let src_len = source.steps();
    let d = decoder.cfg.model_dim;
    let zeros = vec![F::zero(); d];
    let mut active = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        attention_mass: vec![0.0; src_len],
        state: vec![(zeros.clone(), zeros); decoder.layers.len()],
        finished: false,
    }];
    let mut finished: Vec<ScoredHypothesis> = Vec::new();
    let score_of = |h: &BeamHypothesis<F>| {
        rescore(h.log_prob, h.tokens.len(), &h.attention_mass, cfg.length_norm, cfg.coverage_penalty)
    };

    for step in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let batch = active.len();
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, store);
        let mem = source.tile(fx.g, batch);
        let state: Vec<CellState> = (0..decoder.layers.len())
            .map(|l| {
                let mut hd = Vec::with_capacity(batch * d);
                let mut cd = Vec::with_capacity(batch * d);
                for hyp in &active {
                    hd.extend_from_slice(&hyp.state[l].0);
                    cd.extend_from_slice(&hyp.state[l].1);
                }
                CellState { h: fx.g.constant_matrix(batch, d, hd), c: fx.g.constant_matrix(batch, d, cd) }
            })
            .collect();
        let prev: Vec<usize> = active.iter().map(|h| h.tokens.last().copied().unwrap_or(cfg.bos)).collect();
        let (logits, new_state, weights) = decoder.decode_step(&mut fx, &mem, &prev, &state)?;
        let g = &*fx.g;
        let logits = g.value(logits);
        let weights = g.value(weights);

        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in active.iter().enumerate() {
            let lp = log_softmax_row(logits.row(b));
            for (tok, &l) in lp.iter().enumerate() {
                if !cfg.banned.contains(&tok) {
                    cands.push((hyp.log_prob + l, b, tok));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

        let mut next = Vec::with_capacity(cfg.beam_size);
        for (lp, b, tok) in cands {
            if next.len() == cfg.beam_size {
                break;
            }
            let parent = &active[b];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mass: Vec<f64> =
                parent.attention_mass.iter().zip(weights.row(b)).map(|(m, w)| m + w.as_f64()).collect();
            if tok == cfg.eos {
                let score = rescore(lp, tokens.len(), &mass, cfg.length_norm, cfg.coverage_penalty);
                finished.push(ScoredHypothesis { tokens, log_prob: lp, attention_mass: mass, score });
            } else {
                let state = new_state
                    .iter()
                    .map(|s| (g.value(s.h).row(b).to_vec(), g.value(s.c).row(b).to_vec()))
                    .collect();
                next.push(BeamHypothesis { tokens, log_prob: lp, attention_mass: mass, state, finished: false });
            }
        }
        active = next;

        if step + 1 < cfg.max_len {
            if let Some(best) = finished.iter().map(|h| h.score).reduce(f64::max) {
                let lp_max = length_penalty(cfg.max_len, cfg.length_norm);
                let bound = active.iter().map(|h| h.log_prob / lp_max).fold(f64::NEG_INFINITY, f64::max);
                if best >= bound {
                    break;
                }
            }
        }
    }

    // First maximum wins, so earlier-finished hypotheses take ties.
    let pick = |pool: &[ScoredHypothesis]| -> Option<ScoredHypothesis> {
        let mut best: Option<&ScoredHypothesis> = None;
        for h in pool {
            if best.is_none_or(|b| h.score > b.score) {
                best = Some(h);
            }
        }
        best.cloned()
    };
    if let Some(best) = pick(&finished) {
        let mut tokens = best.tokens.clone();
        tokens.pop();
        return Ok(BeamOutput { tokens, best, finished, unfinished: false });
    }
    let pool: Vec<ScoredHypothesis> = active
        .iter()
        .map(|h| ScoredHypothesis {
            tokens: h.tokens.clone(),
            log_prob: h.log_prob,
            attention_mass: h.attention_mass.clone(),
            score: score_of(h),
        })
        .collect();
    let best = pick(&pool).expect("beam keeps at least one hypothesis");
    Ok(BeamOutput { tokens: best.tokens.clone(), best, finished, unfinished: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::length_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn length_penalty_closed_form() {
        assert!((length_penalty(1, 0.2) - 1.0).abs() < 1e-15);
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert_eq!(coverage_penalty(&[0.5, 2.0], 0.0), 0.0);
        assert!((coverage_penalty(&[0.5, 2.0], 0.2) - 0.2 * 0.5f64.ln()).abs() < 1e-15);
    }

    fn attention_fixture(keys: &[[f64; 2]], mask: Vec<bool>) -> (Vec<f64>, Vec<f64>) {
        let mut store = ParamStore::<f64>::new();
        let att = AdditiveAttention::new(&mut store, "a", 2, 2, 3);
        store.init_uniform(0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let steps: Vec<Var> =
            keys.iter().map(|k| fx.g.constant(Tensor::from_f64(vec![1, 2], k).unwrap())).collect();
        let lengths = vec![mask.iter().filter(|&&m| m).count()];
        let mut seq = SeqBatch { steps, mask: length_mask(&lengths) };
        seq.mask = mask.iter().map(|&m| vec![m]).collect();
        let mem = att.memory(&mut fx, &seq);
        let q = fx.g.constant(Tensor::from_f64(vec![1, 2], &[0.3, -0.7]).unwrap());
        let (ctx, w) = att.attend(&mut fx, &mem, q).unwrap();
        (fx.g.value(ctx).data().to_vec(), fx.g.value(w).data().to_vec())
    }

    #[test]
    fn singleton_attention_returns_the_value() {
        let (ctx, w) = attention_fixture(&[[0.25, -1.5]], vec![true]);
        assert_eq!(w, vec![1.0]);
        assert_eq!(ctx, vec![0.25, -1.5]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let (_, w) = attention_fixture(&[[0.4, 0.1], [0.4, 0.1]], vec![true, true]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let (_, w) = attention_fixture(&[[0.4, 0.1], [9.0, 9.0], [1.0, -2.0]], vec![true, false, true]);
        assert_eq!(w[1], 0.0);
        assert!((w[0] + w[2] - 1.0).abs() < 1e-12);
    }
}
