//! Central finite-difference checks of the tape's gradients in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{AdditiveAttention, Decoder, DecoderConfig};
use crate::encoder::{BiLstmLayer, PoolMode};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::hm::{GatedOutput, HmCell, Update};
use crate::nn::{CellState, Forward, LayerNorm, LstmCell, SeqBatch, length_mask};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub points: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Random input/parameter draws per check.
    pub points: usize,
    /// Coordinates compared per draw (all of them when fewer exist).
    pub coords_per_point: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { points: 100, coords_per_point: 12, step: 1e-5, rel_tol: 1e-6, floor: 1e-3, seed: 17 }
    }
}

/// How random inputs are drawn. Kinked ops get inputs kept away from their
/// non-differentiable points.
#[derive(Clone, Copy, Debug)]
enum Draw {
    Uniform(f64),
    /// `|x| >= margin`, uniform magnitude up to `margin + 1`.
    AwayFromZero(f64),
}

impl Draw {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Draw::Uniform(r) => rng.gen_range(-r..r),
            Draw::AwayFromZero(m) => {
                let x = m + rng.gen::<f64>();
                if rng.gen::<bool>() { x } else { -x }
            }
        }
    }
}

type Build = Box<dyn Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Draw)>,
    store: ParamStore<f64>,
    build: Build,
}

impl Case {
    fn plain(name: &'static str, inputs: Vec<(Vec<usize>, Draw)>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Case { name, inputs, store: ParamStore::new(), build: Box::new(move |fx, v| build(fx.g, v)) }
    }

    fn with_params(
        name: &'static str,
        inputs: Vec<(Vec<usize>, Draw)>,
        store: ParamStore<f64>,
        build: impl Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case { name, inputs, store, build: Box::new(build) }
    }
}

fn m(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

const U: Draw = Draw::Uniform(1.0);

/// Loss = `sum(out * R)` for a fixed random `R`; dropout draws from a fixed
/// seed so every evaluation sees the same mask.
fn evaluate(case: &Case, store: &ParamStore<f64>, inputs: &[Tensor<f64>], proj_seed: u64, grads: bool)
    -> Result<(f64, Option<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)>)> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fx = Forward::train(&mut g, store, &mut rng);
    let vars: Vec<Var> = inputs.iter().map(|t| fx.g.input(t.clone())).collect();
    let out = (case.build)(&mut fx, &vars)?;
    let (r, c) = fx.g.shape(out);
    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
    let weights: Vec<f64> = (0..r * c).map(|_| prng.gen_range(-1.0..1.0)).collect();
    let w = fx.g.constant_matrix(r, c, weights);
    let prod = fx.g.mul(out, w);
    let loss = fx.g.sum(prod);
    let value = fx.g.value(loss).item();
    if !grads {
        return Ok((value, None));
    }
    let gr = g.backward(loss)?;
    let gi = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| gr.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, Some((gi, gr.collect_params(store)))))
}

fn run_case(case: &Case, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut max_err: f64 = 0.0;
    let mut coords = 0;
    let ids: Vec<ParamId> = case.store.ids().collect();
    for _ in 0..cfg.points {
        let inputs: Vec<Tensor<f64>> = case
            .inputs
            .iter()
            .map(|(shape, d)| {
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
            })
            .collect();
        let mut store = case.store.clone();
        for &id in &ids {
            // Gate biases keep their configured value (used to pin gates open).
            if store.kind(id) != crate::params::ParamKind::GateBias {
                store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            }
        }
        let proj_seed = rng.gen();
        let (_, grads) = evaluate(case, &store, &inputs, proj_seed, true)?;
        let (gi, gp) = grads.expect("requested");
        // Coordinates: (false, input k, index) or (true, param k, index).
        let mut all: Vec<(bool, usize, usize)> = Vec::new();
        for (k, t) in inputs.iter().enumerate() {
            all.extend((0..t.len()).map(|i| (false, k, i)));
        }
        for &id in &ids {
            all.extend((0..store.value(id).len()).map(|i| (true, id.index(), i)));
        }
        let pick: Vec<(bool, usize, usize)> = if all.len() <= cfg.coords_per_point {
            all
        } else {
            (0..cfg.coords_per_point).map(|_| all[rng.gen_range(0..all.len())]).collect()
        };
        for (is_param, k, i) in pick {
            let f = |delta: f64| -> Result<f64> {
                if is_param {
                    let mut s = store.clone();
                    s.value_mut(ids[k]).data_mut()[i] += delta;
                    Ok(evaluate(case, &s, &inputs, proj_seed, false)?.0)
                } else {
                    let mut x = inputs.clone();
                    x[k].data_mut()[i] += delta;
                    Ok(evaluate(case, &store, &x, proj_seed, false)?.0)
                }
            };
            let numeric = (f(cfg.step)? - f(-cfg.step)?) / (2.0 * cfg.step);
            let analytic = if is_param { gp[k].data()[i] } else { gi[k].data()[i] };
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            max_err = max_err.max(err);
            coords += 1;
        }
    }
    Ok(CheckResult { name: case.name, points: cfg.points, coords, max_rel_err: max_err, passed: max_err <= cfg.rel_tol })
}

fn primitive_cases() -> Vec<Case> {
    let two = |s: Vec<usize>| vec![(s.clone(), U), (s, U)];
    vec![
        Case::plain("add", two(m(2, 3)), |g, v| Ok(g.add(v[0], v[1]))),
        Case::plain("sub", two(m(2, 3)), |g, v| Ok(g.sub(v[0], v[1]))),
        Case::plain("mul", two(m(2, 3)), |g, v| Ok(g.mul(v[0], v[1]))),
        Case::plain("affine", vec![(m(2, 3), U)], |g, v| Ok(g.affine(v[0], -1.7, 0.3))),
        Case::plain("add_row", vec![(m(3, 4), U), (m(1, 4), U)], |g, v| Ok(g.add_row(v[0], v[1]))),
        Case::plain("matmul", vec![(m(3, 4), U), (m(4, 2), U)], |g, v| Ok(g.matmul(v[0], v[1]))),
        Case::plain("linear", vec![(m(3, 4), U), (m(4, 2), U), (m(1, 2), U)], |g, v| Ok(g.linear(v[0], v[1], v[2]))),
        Case::plain("sigmoid", vec![(m(2, 3), Draw::Uniform(3.0))], |g, v| Ok(g.sigmoid(v[0]))),
        Case::plain("tanh", vec![(m(2, 3), Draw::Uniform(3.0))], |g, v| Ok(g.tanh(v[0]))),
        Case::plain("relu", vec![(m(2, 3), Draw::AwayFromZero(0.01))], |g, v| Ok(g.relu(v[0]))),
        Case::plain("hard_sigmoid", vec![(m(2, 3), Draw::Uniform(0.45))], |g, v| Ok(g.hard_sigmoid(v[0], 2.0))),
        Case::plain("hard_sigmoid_saturated", vec![(m(2, 3), Draw::AwayFromZero(0.6))], |g, v| {
            Ok(g.hard_sigmoid(v[0], 2.0))
        }),
        Case::plain("maximum", vec![(m(2, 3), U), (m(2, 3), U)], |g, v| {
            // Shift b away from a so no element sits on the tie.
            let d = g.sub(v[1], v[0]);
            let keep = g.relu(d);
            let b = g.affine(keep, 1.0, 0.05);
            let b = g.add(v[0], b);
            Ok(g.maximum(v[0], b))
        }),
        Case::plain("concat_cols", vec![(m(2, 2), U), (m(2, 3), U)], |g, v| Ok(g.concat_cols(&[v[0], v[1], v[0]]))),
        Case::plain("slice_cols", vec![(m(2, 5), U)], |g, v| Ok(g.slice_cols(v[0], 1, 3))),
        Case::plain("concat_rows", vec![(m(2, 3), U), (m(1, 3), U)], |g, v| Ok(g.concat_rows(&[v[0], v[1]]))),
        Case::plain("slice_rows", vec![(m(4, 3), U)], |g, v| Ok(g.slice_rows(v[0], 1, 2))),
        Case::plain("gather_rows", vec![(m(3, 2), U)], |g, v| {
            Ok(g.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)]))
        }),
        Case::plain("lookup", vec![(m(5, 3), U)], |g, v| Ok(g.lookup(v[0], &[4, 1, 4]))),
        Case::plain("tile_rows", vec![(m(2, 3), U)], |g, v| Ok(g.tile_rows(v[0], 3))),
        Case::plain("transpose", vec![(m(2, 3), U)], |g, v| Ok(g.transpose(v[0]))),
        Case::plain("reshape", vec![(m(2, 6), U)], |g, v| Ok(g.reshape(v[0], 3, 4))),
        Case::plain("mul_col", vec![(m(3, 4), U), (m(3, 1), U)], |g, v| Ok(g.mul_col(v[0], v[1]))),
        Case::plain("scale_rows", vec![(m(3, 2), U)], |g, v| Ok(g.scale_rows(v[0], &[0.5, 0.0, -2.0]))),
        Case::plain("blend_rows", two(m(3, 2)), |g, v| Ok(g.blend_rows(&[1.0, 0.0, 1.0], v[0], v[1]))),
        Case::plain("layer_norm", vec![(m(3, 5), U), (m(1, 5), U), (m(1, 5), U)], |g, v| {
            Ok(g.layer_norm(v[0], v[1], v[2], 1e-6))
        }),
        Case::plain("masked_softmax", vec![(m(2, 4), Draw::Uniform(2.0))], |g, v| {
            g.masked_softmax(v[0], vec![true, true, false, true, true, false, true, true])
        }),
        Case::plain("time_weighted_sum", vec![(m(2, 3), U), (m(6, 4), U)], |g, v| Ok(g.time_weighted_sum(v[0], v[1]))),
        Case::plain("cross_entropy", vec![(m(4, 5), Draw::Uniform(2.0))], |g, v| {
            g.cross_entropy(v[0], &[0, 3, 4, 1], &[1.0, 0.5, 0.0, 2.0])
        }),
        Case::plain("sum", vec![(m(2, 3), U)], |g, v| Ok(g.sum(v[0]))),
        Case::with_params("dropout", vec![(m(4, 5), U)], ParamStore::new(), |fx, v| fx.dropout(v[0], 0.3)),
    ]
}

fn composite_cases() -> Vec<Case> {
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 3, 4);
    cases.push(Case::with_params("lstm_cell", vec![(m(2, 3), U), (m(2, 4), U), (m(2, 4), U)], store, move |fx, v| {
        let s = cell.step(fx, v[0], CellState { h: v[1], c: v[2] });
        Ok(fx.g.concat_cols(&[s.h, s.c]))
    }));

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 2, 3);
    cases.push(Case::with_params("lstm_sequence_masked", vec![(m(2, 2), U), (m(2, 2), U), (m(2, 2), U)], store, move |fx, v| {
        let seq = SeqBatch { steps: v.to_vec(), mask: length_mask(&[3, 2]) };
        let hs = cell.run(fx, &seq, true);
        Ok(fx.g.concat_cols(&hs))
    }));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    cases.push(Case::with_params("layer_norm_module", vec![(m(3, 6), Draw::Uniform(2.0))], store, move |fx, v| {
        Ok(ln.apply(fx, v[0]))
    }));

    let mut store = ParamStore::new();
    let att = AdditiveAttention::new(&mut store, "att", 3, 4, 5);
    cases.push(Case::with_params("additive_attention", vec![(m(2, 3), U), (m(6, 4), U)], store, move |fx, v| {
        let mut mask = vec![true; 6];
        mask[5] = false;
        let mem = att.memory_from_stacked(fx, v[1], 3, 2, mask);
        let (ctx, w) = att.attend(fx, &mem, v[0])?;
        Ok(fx.g.concat_cols(&[ctx, w]))
    }));

    let mut store = ParamStore::new();
    let hm = HmCell::new(&mut store, "hm", 3, 4);
    let zb = store.find("hm.z_bias").expect("registered");
    store.set(zb, Tensor::from_f64(vec![1], &[50.0]).expect("shape")).expect("shape");
    cases.push(Case::with_params("hm_cell_gate_open", vec![(m(2, 3), U), (m(2, 4), U), (m(2, 4), U)], store, move |fx, v| {
        let ones = fx.g.constant_matrix(2, 1, vec![1.0; 2]);
        let s = hm.step(fx, v[0], CellState { h: v[1], c: v[2] }, Update::Gate(ones), &[1.0, 1.0], 1.0);
        Ok(fx.g.concat_cols(&[s.state.h, s.state.c, s.z]))
    }));

    let mut store = ParamStore::new();
    let gated = GatedOutput::new(&mut store, "gated", 3, 4, 5);
    cases.push(Case::with_params("gated_output", vec![(m(2, 4), U), (m(2, 4), U), (m(2, 4), U)], store, move |fx, v| {
        Ok(gated.apply(fx, v))
    }));

    let mut store = ParamStore::new();
    let layer = BiLstmLayer::new(&mut store, "bi", 2, 4);
    cases.push(Case::with_params("bilstm_layer_mean_pool", vec![(m(2, 2), U), (m(2, 2), U), (m(2, 2), U)], store, move |fx, v| {
        let seq = SeqBatch { steps: v.to_vec(), mask: length_mask(&[3, 2]) };
        let out = layer.apply(fx, &seq)?;
        let pooled = crate::encoder::pool_layer(fx, &SeqBatch { steps: out, mask: seq.mask.clone() }, 2, PoolMode::Mean)?;
        Ok(fx.g.concat_cols(&pooled.steps))
    }));

    let mut store = ParamStore::new();
    let dcfg = DecoderConfig { num_layers: 3, model_dim: 3, residual_start_layer: 3, dropout: 0.0, ..Default::default() };
    let dec = Decoder::new(&mut store, "dec", &dcfg, 5, 2, 4).expect("valid decoder");
    cases.push(Case::with_params("decoder_teacher_forced", vec![(m(4, 4), U)], store, move |fx, v| {
        let mem = dec.attention.memory_from_stacked(fx, v[0], 2, 2, vec![true, true, true, false]);
        let steps = vec![dec.embed(fx, &[1, 1]), dec.embed(fx, &[3, 4])];
        let inputs = SeqBatch { steps, mask: length_mask(&[2, 1]) };
        let out = dec.teacher_forced(fx, &mem, &inputs)?;
        fx.g.cross_entropy(out.logits, &[2, 0, 4, 0], &[1.0, 1.0, 1.0, 0.0])
    }));

    cases
}

/// Runs every primitive and composite check.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for case in primitive_cases().iter().chain(&composite_cases()) {
        out.push(run_case(case, cfg, &mut rng)?);
    }
    Ok(out)
}
