//! Deep bidirectional recurrent encoder with optional fixed-stride pooling.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::Var;
use crate::hm::ZMatrix;
use crate::nn::{Forward, LayerNorm, Linear, LstmCell, SeqBatch};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Concat,
    Max,
    Mean,
}

/// A pooling layer inserted after BiLSTM layer `after_layer` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub after_layer: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_bilstm_layers: usize,
    /// Width of each BiLSTM layer's output (both directions together).
    pub model_dim: usize,
    /// Layers with index `>= residual_start_layer` add their input when widths match.
    pub residual_start_layer: usize,
    pub dropout: f64,
    pub pooling: Vec<PoolSpec>,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_bilstm_layers: 6,
            model_dim: 512,
            residual_start_layer: 3,
            dropout: 0.2,
            pooling: Vec::new(),
            projection_dim: 512,
        }
    }
}

impl EncoderConfig {
    /// Mean pooling with stride 3 after layer 2 and stride 2 after layer 3.
    pub fn pooled_char() -> Self {
        EncoderConfig {
            pooling: vec![
                PoolSpec { after_layer: 2, stride: 3, mode: PoolMode::Mean },
                PoolSpec { after_layer: 3, stride: 2, mode: PoolMode::Mean },
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.model_dim >= 2 && self.model_dim % 2 == 0, Config, "encoder.model_dim must be even and >= 2");
        ensure!(self.residual_start_layer >= 2, Config, "encoder.residual_start_layer must be >= 2");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "encoder.dropout must be in [0, 1)");
        ensure!(self.projection_dim >= 1, Config, "encoder.projection_dim must be >= 1");
        let mut seen = Vec::new();
        for p in &self.pooling {
            ensure!(p.stride >= 1, Config, "pooling stride must be >= 1");
            ensure!(
                p.after_layer >= 1 && p.after_layer < self.num_bilstm_layers,
                Config,
                "pooling after layer {} needs a BiLSTM layer above it ({} layers)",
                p.after_layer,
                self.num_bilstm_layers
            );
            ensure!(!seen.contains(&p.after_layer), Config, "two pooling layers after layer {}", p.after_layer);
            seen.push(p.after_layer);
        }
        Ok(())
    }

    fn pool_after(&self, layer: usize) -> Option<PoolSpec> {
        self.pooling.iter().copied().find(|p| p.after_layer == layer)
    }

    /// Number of timesteps each BiLSTM layer processes for a source of length `t`.
    pub fn layer_lengths(&self, t: usize) -> Vec<usize> {
        let mut len = t;
        let mut out = Vec::with_capacity(self.num_bilstm_layers);
        for layer in 1..=self.num_bilstm_layers {
            out.push(len);
            if let Some(p) = self.pool_after(layer) {
                len = len.div_ceil(p.stride);
            }
        }
        out
    }
}

/// Mean over layers of `layer_length / baseline_length`.
pub fn average_computation_ratio(per_layer_lengths: &[usize], baseline_length: usize) -> Result<f64> {
    ensure!(baseline_length >= 1, Contract, "baseline length must be >= 1");
    ensure!(!per_layer_lengths.is_empty(), Contract, "no layers");
    ensure!(
        per_layer_lengths.iter().all(|&l| l <= baseline_length),
        Contract,
        "layer length exceeds baseline {baseline_length}"
    );
    let total: usize = per_layer_lengths.iter().sum();
    Ok(total as f64 / (per_layer_lengths.len() * baseline_length) as f64)
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Top states projected to the decoder width.
    pub states: SeqBatch,
    /// Timesteps processed by each encoder layer, per sentence.
    pub layer_lengths: Vec<Vec<usize>>,
    /// Gate decisions, one per sentence, for HM encoders.
    pub zmatrices: Vec<ZMatrix>,
    /// Per-layer `[batch x 1]` gate counts on the tape (HM encoders only).
    pub gate_counts: Vec<Var>,
}

/// Reduces non-overlapping windows of `stride` steps to one step. A final
/// short window pools what is left; concat zero-pads it.
pub fn pool_layer<F: Real>(fx: &mut Forward<'_, F>, seq: &SeqBatch, stride: usize, mode: PoolMode) -> Result<SeqBatch> {
    ensure!(stride >= 1, Contract, "pool stride must be >= 1");
    if stride == 1 && mode != PoolMode::Concat {
        return Ok(seq.clone());
    }
    let batch = seq.batch();
    let t_len = seq.len();
    let mut steps = Vec::new();
    let mut mask = Vec::new();
    for start in (0..t_len).step_by(stride) {
        let end = (start + stride).min(t_len);
        let window: Vec<usize> = (start..end).collect();
        let out_mask: Vec<bool> = (0..batch).map(|b| window.iter().any(|&t| seq.mask[t][b])).collect();
        let out = match mode {
            PoolMode::Mean => {
                let counts: Vec<usize> =
                    (0..batch).map(|b| window.iter().filter(|&&t| seq.mask[t][b]).count()).collect();
                let mut acc: Option<Var> = None;
                for &t in &window {
                    let f: Vec<F> = (0..batch)
                        .map(|b| {
                            if seq.mask[t][b] {
                                F::one() / F::of(counts[b] as f64)
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    let term = fx.g.scale_rows(seq.steps[t], &f);
                    acc = Some(match acc {
                        Some(a) => fx.g.add(a, term),
                        None => term,
                    });
                }
                acc.expect("non-empty window")
            }
            PoolMode::Max => {
                let first = seq.steps[start];
                let mut acc = first;
                for &t in &window[1..] {
                    let m = seq.mask_factors::<F>(t);
                    let cand = fx.g.blend_rows(&m, seq.steps[t], first);
                    acc = fx.g.maximum(acc, cand);
                }
                acc
            }
            PoolMode::Concat => {
                let mut parts = Vec::with_capacity(stride);
                for k in 0..stride {
                    let t = start + k;
                    if t < t_len {
                        let m = seq.mask_factors::<F>(t);
                        parts.push(fx.g.scale_rows(seq.steps[t], &m));
                    } else {
                        let (b, d) = fx.g.shape(seq.steps[start]);
                        parts.push(fx.g.constant_matrix(b, d, vec![F::zero(); b * d]));
                    }
                }
                fx.g.concat_cols(&parts)
            }
        };
        steps.push(out);
        mask.push(out_mask);
    }
    Ok(SeqBatch { steps, mask })
}

#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub norm: LayerNorm,
    pub residual: bool,
    pub pool: Option<PoolSpec>,
}

impl BiLstmLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input_dim: usize, model_dim: usize) -> Self {
        let hidden = model_dim / 2;
        BiLstmLayer {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), input_dim, hidden),
            bwd: LstmCell::new(store, &format!("{name}.bwd"), input_dim, hidden),
            norm: LayerNorm::new(store, &format!("{name}.ln"), model_dim),
            residual: false,
            pool: None,
        }
    }

    /// Forward and backward passes, concatenated per step, then layer norm.
    /// No output non-linearity.
    pub fn apply<F: Real>(&self, fx: &mut Forward<'_, F>, seq: &SeqBatch) -> Result<Vec<Var>> {
        ensure!(!seq.is_empty(), Contract, "bilstm_layer needs at least one timestep");
        let f = self.fwd.run(fx, seq, false);
        let b = self.bwd.run(fx, seq, true);
        let mut out = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let cat = fx.g.concat_cols(&[f[t], b[t]]);
            out.push(self.norm.apply(fx, cat));
        }
        Ok(out)
    }
}

/// A stack of BiLSTM layers with residuals and pooling, plus the final
/// projection to the decoder width.
#[derive(Clone, Debug)]
pub struct BiLstmStack {
    pub cfg: EncoderConfig,
    pub layers: Vec<BiLstmLayer>,
    pub projection: Linear,
}

impl BiLstmStack {
    /// `first_layer` is the 1-based depth of the bottom layer within the whole
    /// encoder, used for residual numbering.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        input_dim: usize,
        first_layer: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut width = input_dim;
        for i in 1..=cfg.num_bilstm_layers {
            let mut layer = BiLstmLayer::new(store, &format!("{name}.l{i}"), width, cfg.model_dim);
            let depth = first_layer + i - 1;
            layer.residual = depth >= cfg.residual_start_layer && width == cfg.model_dim;
            layer.pool = cfg.pool_after(i);
            width = cfg.model_dim;
            if let Some(p) = layer.pool {
                if p.mode == PoolMode::Concat {
                    width *= p.stride;
                }
            }
            layers.push(layer);
        }
        let projection = Linear::new(store, &format!("{name}.proj"), width, cfg.projection_dim, true);
        Ok(BiLstmStack { cfg: cfg.clone(), layers, projection })
    }

    /// Returns projected top states and the length each layer processed.
    pub fn apply<F: Real>(&self, fx: &mut Forward<'_, F>, input: SeqBatch) -> Result<(SeqBatch, Vec<Vec<usize>>)> {
        let batch = input.batch();
        let mut lengths = vec![Vec::with_capacity(self.layers.len()); batch];
        let mut seq = input;
        for layer in &self.layers {
            for (b, l) in seq.lengths().into_iter().enumerate() {
                lengths[b].push(l);
            }
            let inner = layer.apply(fx, &seq)?;
            let mut steps = Vec::with_capacity(inner.len());
            for (t, h) in inner.into_iter().enumerate() {
                let h = fx.dropout(h, self.cfg.dropout)?;
                steps.push(if layer.residual { fx.g.add(h, seq.steps[t]) } else { h });
            }
            seq = SeqBatch { steps, mask: seq.mask };
            if let Some(p) = layer.pool {
                seq = pool_layer(fx, &seq, p.stride, p.mode)?;
            }
        }
        let steps = seq.steps.iter().map(|&h| self.projection.apply(fx, h)).collect();
        Ok((SeqBatch { steps, mask: seq.mask }, lengths))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::length_mask;
    use crate::tensor::Tensor;

    fn column_seq(fx: &mut Forward<'_, f64>, vals: &[f64]) -> SeqBatch {
        let steps = vals.iter().map(|&v| fx.g.constant(Tensor::from_f64(vec![1, 1], &[v]).unwrap())).collect();
        SeqBatch { steps, mask: length_mask(&[vals.len()]) }
    }

    fn values(fx: &Forward<'_, f64>, seq: &SeqBatch) -> Vec<f64> {
        seq.steps.iter().flat_map(|&v| fx.g.value(v).data().to_vec()).collect()
    }

    #[test]
    fn mean_pool_stride_two() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let seq = column_seq(&mut fx, &[1.0, 3.0, 5.0, 7.0]);
        let out = pool_layer(&mut fx, &seq, 2, PoolMode::Mean).unwrap();
        assert_eq!(values(&fx, &out), vec![2.0, 6.0]);
    }

    #[test]
    fn max_pool_short_tail() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let seq = column_seq(&mut fx, &[1.0, 9.0, 2.0, 5.0]);
        let out = pool_layer(&mut fx, &seq, 3, PoolMode::Max).unwrap();
        assert_eq!(values(&fx, &out), vec![9.0, 5.0]);
    }

    #[test]
    fn stride_one_is_identity_and_concat_pads() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let seq = column_seq(&mut fx, &[1.0, 2.0, 3.0]);
        for mode in [PoolMode::Mean, PoolMode::Max] {
            let out = pool_layer(&mut fx, &seq, 1, mode).unwrap();
            assert_eq!(values(&fx, &out), vec![1.0, 2.0, 3.0]);
        }
        let out = pool_layer(&mut fx, &seq, 2, PoolMode::Concat).unwrap();
        assert_eq!(values(&fx, &out), vec![1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn pooled_mask_marks_windows_with_any_valid_member() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let steps = (0..5).map(|t| fx.g.constant(Tensor::filled(vec![2, 1], t as f64))).collect();
        let seq = SeqBatch { steps, mask: length_mask(&[5, 3]) };
        let out = pool_layer(&mut fx, &seq, 2, PoolMode::Mean).unwrap();
        assert_eq!(out.lengths(), vec![3, 2]);
        // Second sentence's second window holds only step 2.
        assert_eq!(fx.g.value(out.steps[1]).data(), &[2.5, 2.0]);
    }

    #[test]
    fn layer_lengths_for_pooled_config() {
        let cfg = EncoderConfig::pooled_char();
        assert_eq!(cfg.layer_lengths(36), vec![36, 36, 12, 6, 6, 6]);
        assert_eq!(EncoderConfig::default().layer_lengths(10), vec![10; 6]);
    }

    #[test]
    fn ratio_examples() {
        let r = average_computation_ratio(&[36, 36, 12, 6, 6, 6], 36).unwrap();
        assert!((r - 0.4722).abs() < 1e-4);
        assert_eq!(format!("{r:.2}"), "0.47");
        assert_eq!(average_computation_ratio(&[7; 4], 7).unwrap(), 1.0);
        assert!(average_computation_ratio(&[8], 7).is_err());
    }

    #[test]
    fn residual_placement() {
        let mut store = ParamStore::<f32>::new();
        let mut cfg = EncoderConfig { model_dim: 8, projection_dim: 8, ..EncoderConfig::default() };
        cfg.pooling = vec![PoolSpec { after_layer: 3, stride: 2, mode: PoolMode::Concat }];
        let stack = BiLstmStack::new(&mut store, "enc", &cfg, 4, 1).unwrap();
        let res: Vec<bool> = stack.layers.iter().map(|l| l.residual).collect();
        // Layer 4 sees the widened concat output, so its chain breaks.
        assert_eq!(res, vec![false, false, true, false, true, true]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = EncoderConfig { residual_start_layer: 1, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            pooling: vec![PoolSpec { after_layer: 6, stride: 2, mode: PoolMode::Mean }],
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
