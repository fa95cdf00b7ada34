//! End-to-end acceptance checks. Each check prints one `[n] ... PASS|FAIL`
//! line with the measured value and its tolerance, then asserts. Runs without
//! the libtest harness so the lines are never captured; pass name fragments
//! as arguments to run a subset (`cargo test --test acceptance -- c10 c12`).

use std::io::Write;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use charnmt::checkpoint;
use charnmt::decoder::{rescore, SourceMemory};
use charnmt::eval::{beam_config, corpus_computation_ratio};
use charnmt::gradcheck::{run_suite, GradCheckConfig};
use charnmt::hm::{computation_ratio_from_fractions, compression_loss, HmStack};
use charnmt::nn::{length_mask, CellState, Forward, SeqBatch};
use charnmt::synthetic::{encode_pairs, morphology_task, reversal_task};
use charnmt::tokenize::{build_char_vocab, BOS, EOS, PAD};
use charnmt::train::SchedulerConfig;
use charnmt::{
    beam_search, bleu, learn_bpe, BeamConfig, CompressionPenaltyConfig, Decoder, DecoderConfig, Graph, HmConfig,
    HmMode, ModelConfig, Pair, ParamStore, PenaltyForm, RunConfig, Scheduler, SlopeSchedule, Tensor, Trainer,
    TrainingConfig, Vocabulary, ZMatrix,
};

fn report(n: u32, what: &str, pass: bool, detail: &str) {
    println!("[{n:>2}] {what}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().flush();
}

// ---------------------------------------------------------------- [1]

fn c01_gradient_suite() {
    let cfg = GradCheckConfig::default();
    let start = Instant::now();
    let results = run_suite(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = failed.is_empty() && secs < 120.0 && results.iter().all(|r| r.points == 100);
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} checks x {} points, f64, worst rel err {worst:.2e} <= {:.0e}, {secs:.1}s < 120s, failed {failed:?}",
            results.len(),
            cfg.points,
            cfg.rel_tol
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- [2]

fn c02_computation_ratios() {
    let hm = computation_ratio_from_fractions(&[1.0, 0.6, 0.36]);
    // Same fractions through a gate matrix: 25 steps, 15 and 9 updates above.
    let mut z = vec![vec![0u8; 25]; 3];
    for t in 0..15 {
        z[0][t] = 1;
    }
    for t in 0..9 {
        z[1][t] = 1;
    }
    let zm = ZMatrix::new(z, vec![vec![0.0; 25]; 3]).unwrap();
    let hm_z = zm.computation_ratio();

    let pooled = computation_ratio_from_fractions(&[1.0, 1.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]);
    // And from a real pooled encoder forward pass.
    let mut mc = toy_model(8, 6, 1);
    mc.encoder.pooling = charnmt::EncoderConfig::pooled_char().pooling;
    let mut store = ParamStore::<f64>::new();
    let model = charnmt::Seq2Seq::new(&mut store, &mc, 10).unwrap();
    store.init_uniform(0.1, &mut ChaCha8Rng::seed_from_u64(1));
    let src: Vec<usize> = (0..36).map(|i| 4 + i % 6).collect();
    let (_, enc) = model.source_memory(&store, &src, 1.0).unwrap();
    let measured = corpus_computation_ratio(&enc.layer_lengths, &[36]).unwrap();

    let pass = format!("{hm:.2}") == "0.65"
        && format!("{hm_z:.2}") == "0.65"
        && format!("{pooled:.2}") == "0.47"
        && format!("{measured:.2}") == "0.47"
        && enc.layer_lengths[0] == vec![36, 36, 12, 6, 6, 6];
    report(
        2,
        "computation ratio",
        pass,
        &format!(
            "HM {hm:.4} / gate matrix {hm_z:.4} -> 0.65; pooled {pooled:.4} / encoder {:?} {measured:.4} -> 0.47; 2 d.p.",
            enc.layer_lengths[0]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- [3]

fn c03_hm_reduces_to_plain_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut all_ones = true;
    for trial in 0..20 {
        let layers = 1 + trial % 4;
        let (inp, hid) = (3, 5);
        let mut store = ParamStore::<f64>::new();
        let stack = HmStack::new(&mut store, "hm", layers, inp, hid, 0.0);
        store.init_uniform(0.5, &mut rng);
        for cell in &stack.cells {
            for w in [cell.wz_x, cell.wz_h] {
                let shape = store.value(w).shape().to_vec();
                store.set(w, Tensor::zeros(shape)).unwrap();
            }
            store.set(cell.z_bias, Tensor::filled(vec![1], 1.0)).unwrap();
        }
        let lengths: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=12)).collect();
        let t_max = *lengths.iter().max().unwrap();
        let data: Vec<Vec<f64>> = (0..t_max).map(|_| (0..3 * inp).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let steps = data.iter().map(|d| fx.g.constant(Tensor::from_f64(vec![3, inp], d).unwrap())).collect();
        let seq = SeqBatch { steps, mask: length_mask(&lengths) };
        let out = stack.forward(&mut fx, &seq, 1.0).unwrap();

        // Reference: plain unidirectional stack with the same LSTM weights.
        let mut input = seq.clone();
        for (l, cell) in stack.cells.iter().enumerate() {
            let hs = cell.lstm.run(&mut fx, &input, false);
            for (t, &h) in hs.iter().enumerate() {
                let a = fx.g.value(out.hidden[l][t]).clone();
                let b = fx.g.value(h).clone();
                for (bi, &len) in lengths.iter().enumerate() {
                    if t < len {
                        for (x, y) in a.row(bi).iter().zip(b.row(bi)) {
                            worst = worst.max((x - y).abs());
                        }
                    }
                }
            }
            input = SeqBatch { steps: hs, mask: seq.mask.clone() };
        }
        all_ones &= out.zmatrices.iter().all(|m| m.z.iter().flatten().all(|&z| z == 1));
    }
    let pass = worst <= 1e-4 && all_ones;
    report(3, "HM reduction", pass, &format!("max abs diff {worst:.2e} <= 1e-4, all gates open: {all_ones}, 20 stacks of 1-4 layers"));
    assert!(pass);
}

// ---------------------------------------------------------------- [4]

fn c04_nestedness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let (mut open, mut closed) = (0usize, 0usize);
    for _ in 0..1000 {
        let layers = rng.gen_range(1..=4);
        let (inp, hid) = (3, 4);
        let mut store = ParamStore::<f64>::new();
        let stack = HmStack::new(&mut store, "hm", layers, inp, hid, 0.0);
        store.init_uniform(rng.gen_range(0.1..2.0), &mut rng);
        for cell in &stack.cells {
            store.set(cell.z_bias, Tensor::filled(vec![1], rng.gen_range(-1.5..1.5))).unwrap();
        }
        let batch = rng.gen_range(1..=3);
        let lengths: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=20)).collect();
        let t_max = *lengths.iter().max().unwrap();
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, &store);
        let steps = (0..t_max)
            .map(|_| {
                let d: Vec<f64> = (0..batch * inp).map(|_| rng.gen_range(-2.0..2.0)).collect();
                fx.g.constant(Tensor::from_f64(vec![batch, inp], &d).unwrap())
            })
            .collect();
        let seq = SeqBatch { steps, mask: length_mask(&lengths) };
        let slope = rng.gen_range(1.0..5.0);
        let out = stack.forward(&mut fx, &seq, slope).unwrap();
        for m in &out.zmatrices {
            for l in 1..m.z.len() {
                for t in 0..m.z[l].len() {
                    if m.z[l][t] == 1 && m.z[l - 1][t] != 1 {
                        violations += 1;
                    }
                }
            }
            for &z in m.z.iter().flatten() {
                if z == 1 {
                    open += 1;
                } else {
                    closed += 1;
                }
            }
        }
    }
    let pass = violations == 0 && open > 0 && closed > 0;
    report(4, "nestedness", pass, &format!("1000 passes, {violations} violations, {open} open / {closed} closed gates"));
    assert!(pass);
}

// ---------------------------------------------------------------- [5]

fn c05_compression_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad_corrected = 0;
    let mut bad_literal = 0;
    let (mut inside, mut outside) = (0, 0);
    for i in 0..1000 {
        let (a1, a2, w) = if i % 2 == 0 {
            (0.1, 0.9, 2.0)
        } else {
            let a = rng.gen_range(0.0..0.5);
            (a, rng.gen_range(a + 0.05..=1.0), rng.gen_range(0.1..3.0))
        };
        let t = rng.gen_range(1..=200usize);
        let z = rng.gen_range(0..=t);
        let cfg = CompressionPenaltyConfig { alpha1: a1, alpha2: a2, weight: w, form: PenaltyForm::Corrected, ..Default::default() };
        let c = compression_loss(&[z], t, &cfg).unwrap();
        let (lo, hi) = (a1 * t as f64, a2 * t as f64);
        if (z as f64) >= lo && (z as f64) <= hi {
            inside += 1;
            bad_corrected += (c != 0.0) as usize;
        } else {
            outside += 1;
            bad_corrected += (c <= 0.0) as usize;
        }
        // Literal form: weight * max(0, Z - a1 T, a2 T - Z).
        let lit = compression_loss(&[z], t, &CompressionPenaltyConfig { form: PenaltyForm::Literal, ..cfg }).unwrap();
        let zf = z as f64;
        let expected = w * [0.0, zf - lo, hi - zf].into_iter().fold(f64::NEG_INFINITY, f64::max);
        bad_literal += ((lit - expected).abs() > 1e-12 * expected.abs().max(1.0)) as usize;
    }
    let pass = bad_corrected == 0 && bad_literal == 0 && inside > 0 && outside > 0;
    report(
        5,
        "compression loss",
        pass,
        &format!("1000 samples ({inside} inside, {outside} outside): corrected mismatches {bad_corrected}, literal mismatches {bad_literal} (tol 1e-12 rel)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- [6]

fn toy_model(dim: usize, enc_layers: usize, dec_layers: usize) -> ModelConfig {
    let mut mc = ModelConfig::default();
    mc.embed_dim = dim;
    mc.encoder.num_bilstm_layers = enc_layers;
    mc.encoder.model_dim = dim;
    mc.encoder.projection_dim = dim;
    mc.encoder.dropout = 0.0;
    mc.decoder.num_layers = dec_layers;
    mc.decoder.model_dim = dim;
    mc.decoder.dropout = 0.0;
    mc
}

fn toy_training(lr: f64, cap: usize) -> TrainingConfig {
    TrainingConfig {
        token_cap: cap,
        eval_every: 100,
        scheduler: SchedulerConfig { initial_lr: lr, halve_after: 200, min_halving_gap: 200, stop_after: 100_000 },
        ..Default::default()
    }
}

/// Greedy exact-match accuracy and corpus computation ratio.
fn accuracy(t: &Trainer, test: &[Pair]) -> (f64, f64) {
    let mut ok = 0;
    let mut lengths = Vec::new();
    let mut chars = Vec::new();
    for p in test {
        let (mem, enc) = t.model.source_memory(&t.store, &p.src, t.slope()).unwrap();
        let cfg = beam_config(&t.model.cfg, charnmt::VocabKind::Char, p.src.len(), 1);
        let out = beam_search(&t.model.decoder, &t.store, &mem, &cfg).unwrap();
        ok += (out.tokens == p.tgt) as usize;
        lengths.push(enc.layer_lengths[0].clone());
        chars.push(p.src.len());
    }
    (ok as f64 / test.len() as f64, corpus_computation_ratio(&lengths, &chars).unwrap())
}

struct ToyRun {
    acc: f64,
    ratio: f64,
    steps: u64,
    secs: f64,
}

/// Trains in chunks, checking accuracy after each, until `target` or `max_steps`.
fn train_until(t: &mut Trainer, train: &[Pair], dev: &[Pair], test: &[Pair], target: f64, max_steps: u64, chunk: u64) -> ToyRun {
    let start = Instant::now();
    let mut last = (0.0, 1.0);
    while t.progress.step < max_steps {
        t.cfg.max_steps = Some((t.progress.step + chunk).min(max_steps));
        t.run(train, dev, |_, _| Ok(())).unwrap();
        last = accuracy(t, test);
        println!("    step {:>5}  acc {:.3}  ratio {:.3}  lr {:.2e}  {:.0}s", t.progress.step, last.0, last.1, t.scheduler.lr, start.elapsed().as_secs_f64());
        if last.0 >= target || t.scheduler.stopped {
            break;
        }
    }
    ToyRun { acc: last.0, ratio: last.1, steps: t.progress.step, secs: start.elapsed().as_secs_f64() }
}

fn reversal_data() -> (Vec<Pair>, Vec<Pair>, Vec<Pair>, usize) {
    let c = reversal_task(20, 5, 20, 10_000, 400, 1);
    let vocab = build_char_vocab(c.train_lines(), 496).unwrap();
    let train = encode_pairs(&vocab, &c.train);
    let held = encode_pairs(&vocab, &c.test);
    let (test, dev) = held.split_at(200);
    (train, dev.to_vec(), test.to_vec(), vocab.len())
}

const HM_MAX_STEPS: u64 = 15_000;

fn c06_toy_convergence() {
    let (train, dev, test, vocab) = reversal_data();

    let mc = toy_model(64, 2, 2);
    let mut t = Trainer::new(&mc, &toy_training(1e-3, 640), vocab).unwrap();
    println!("  baseline: {} parameters", t.store.num_scalars());
    let base = train_until(&mut t, &train, &dev, &test, 0.99, 5000, 200);

    let mut mc = toy_model(64, 1, 2);
    mc.hm = Some(HmConfig {
        num_layers: 2,
        hidden_dim: 64,
        mode: HmMode::Stacked,
        dropout: 0.0,
        compression: Some(CompressionPenaltyConfig {
            alpha1: 0.1,
            alpha2: 0.75,
            weight: 0.002,
            form: PenaltyForm::Corrected,
            delay_steps: 0,
            warmup_steps: 0,
        }),
        slope: SlopeSchedule { start: 1.0, end: 5.0, anneal_steps: 3000 },
    });
    let mut tc = toy_training(1e-3, 640);
    tc.eval_every = 500;
    tc.scheduler.halve_after = 2000;
    tc.scheduler.min_halving_gap = 2000;
    let mut t = Trainer::new(&mc, &tc, vocab).unwrap();
    println!("  HM: {} parameters", t.store.num_scalars());
    // The gates settle early; after that it is ordinary training over a fixed-ish segmentation,
    // which needs more updates than the baseline.
    let hm = train_until(&mut t, &train, &dev, &test, 0.95, HM_MAX_STEPS, 1000);

    let base_pass = base.acc >= 0.99 && base.steps <= 5000 && base.secs < 1800.0;
    let hm_pass = hm.acc >= 0.95 && hm.ratio < 0.9;
    report(
        6,
        "toy convergence (baseline)",
        base_pass,
        &format!("acc {:.3} >= 0.99 at step {} <= 5000, {:.0}s < 1800s", base.acc, base.steps, base.secs),
    );
    report(
        6,
        "toy convergence (HM)",
        hm_pass,
        &format!("acc {:.3} >= 0.95, ratio {:.3} < 0.9, step {} of {HM_MAX_STEPS}, {:.0}s", hm.acc, hm.ratio, hm.steps, hm.secs),
    );
    assert!(base_pass && hm_pass);
}

// ---------------------------------------------------------------- [7]

fn params_of(mc: &ModelConfig, vocab: usize) -> usize {
    let mut store = ParamStore::<f32>::new();
    charnmt::Seq2Seq::new(&mut store, mc, vocab).unwrap();
    store.num_scalars()
}

fn exact_match(t: &Trainer, vocab: &Vocabulary, test: &[(String, String)]) -> f64 {
    let mut ok = 0;
    for (s, r) in test {
        let src = vocab.encode(s);
        let (mem, _) = t.model.source_memory(&t.store, &src, t.slope()).unwrap();
        let cfg = beam_config(&t.model.cfg, vocab.kind(), src.len(), 1);
        let out = beam_search(&t.model.decoder, &t.store, &mem, &cfg).unwrap();
        ok += (vocab.decode(&out.tokens) == *r) as usize;
    }
    ok as f64 / test.len() as f64
}

fn c07_char_vs_bpe() {
    let corpus = morphology_task(300, 2, 20_000, 300, 7);
    let char_vocab = build_char_vocab(corpus.train_lines(), 496).unwrap();
    let mut base = BTreeSet::from(['\u{2581}']);
    for line in corpus.train_lines() {
        base.extend(line.chars().filter(|c| !c.is_whitespace()));
    }
    let base_symbols = base.len();
    let (bpe_vocab, merges) = learn_bpe(corpus.train_lines(), base_symbols + 200).unwrap();

    let dim_bpe = 64;
    let mut bpe_cfg = toy_model(dim_bpe, 2, 2);
    bpe_cfg.decoder.dropout = 0.0;
    let bpe_params = params_of(&bpe_cfg, bpe_vocab.len());
    // Widen the character model until it matches the BPE model's size.
    let char_cfg = (dim_bpe..dim_bpe + 40)
        .step_by(2)
        .map(|d| toy_model(d, 2, 2))
        .min_by_key(|mc| params_of(mc, char_vocab.len()).abs_diff(bpe_params))
        .unwrap();
    let char_params = params_of(&char_cfg, char_vocab.len());
    let rel = char_params.abs_diff(bpe_params) as f64 / bpe_params as f64;
    println!(
        "  char: vocab {} dim {} params {char_params}; bpe: {} merges vocab {} dim {dim_bpe} params {bpe_params}",
        char_vocab.len(),
        char_cfg.encoder.model_dim,
        merges.len(),
        bpe_vocab.len()
    );

    let steps = 3000;
    let run = |mc: &ModelConfig, vocab: &Vocabulary| {
        let train = encode_pairs(vocab, &corpus.train);
        let dev = encode_pairs(vocab, &corpus.test[..100]);
        let mut tc = toy_training(1e-3, 1600);
        tc.max_steps = Some(steps);
        tc.eval_every = 200;
        let mut t = Trainer::new(mc, &tc, vocab.len()).unwrap();
        let start = Instant::now();
        t.run(&train, &dev, |_, p| {
            println!("    {} step {:>5} dev ppl {:.3}", vocab.kind(), p.step, p.dev_ppl);
            Ok(())
        })
        .unwrap();
        let acc = exact_match(&t, vocab, &corpus.test[100..]);
        println!("    {} exact match {acc:.3} after {:.0}s", vocab.kind(), start.elapsed().as_secs_f64());
        acc
    };
    let char_acc = run(&char_cfg, &char_vocab);
    let bpe_acc = run(&bpe_cfg, &bpe_vocab);
    let pass = merges.len() == 200 && rel <= 0.02 && char_acc >= bpe_acc;
    report(
        7,
        "char vs BPE",
        pass,
        &format!("char {char_acc:.3} >= bpe {bpe_acc:.3}, params {char_params} vs {bpe_params} ({:.1}% apart, <= 2%), {} merges", rel * 100.0, merges.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- [8]

/// Log-probabilities of the next token after `prefix` and the attention
/// weights of that step, computed from scratch.
fn next_dist(dec: &Decoder, store: &ParamStore<f64>, values: &Tensor<f64>, prefix: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let mut fx = Forward::eval(&mut g, store);
    let steps = values.rows();
    let v = fx.g.constant(values.clone());
    let mem = dec.attention.memory_from_stacked(&mut fx, v, steps, 1, vec![true; steps]);
    let mut state: Vec<CellState> = dec.zero_state(fx.g, 1);
    let mut prev = BOS;
    let mut out = None;
    for k in 0..=prefix.len() {
        let (logits, s, w) = dec.decode_step(&mut fx, &mem, &[prev], &state).unwrap();
        state = s;
        if k == prefix.len() {
            out = Some((logits, w));
        } else {
            prev = prefix[k];
        }
    }
    let (logits, w) = out.unwrap();
    let l = fx.g.value(logits).data().to_vec();
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = l.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    (l.iter().map(|x| x - lse).collect(), fx.g.value(w).data().to_vec())
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    lp: f64,
    mass: Vec<f64>,
}

fn score(h: &Hyp, cfg: &BeamConfig) -> f64 {
    rescore(h.lp, h.tokens.len(), &h.mass, cfg.length_norm, cfg.coverage_penalty)
}

fn extend(h: &Hyp, tok: usize, dist: &(Vec<f64>, Vec<f64>)) -> Hyp {
    let mut tokens = h.tokens.clone();
    tokens.push(tok);
    Hyp { tokens, lp: h.lp + dist.0[tok], mass: h.mass.iter().zip(&dist.1).map(|(a, b)| a + b).collect() }
}

/// Every finished sequence of length <= max_len.
fn enumerate(dec: &Decoder, store: &ParamStore<f64>, values: &Tensor<f64>, cfg: &BeamConfig, h: &Hyp, out: &mut Vec<Hyp>) {
    let dist = next_dist(dec, store, values, &h.tokens);
    for tok in 0..dec.vocab_size {
        if cfg.banned.contains(&tok) {
            continue;
        }
        let next = extend(h, tok, &dist);
        if tok == cfg.eos {
            out.push(next);
        } else if next.tokens.len() < cfg.max_len {
            enumerate(dec, store, values, cfg, &next, out);
        }
    }
}

/// Straightforward restatement of the beam rules: rank candidates by
/// log-probability (ties: earlier parent, lower id), keep `beam_size` live
/// ones, collect EOS candidates met along the way, stop when no live
/// hypothesis can beat the best finished score.
fn reference_beam(dec: &Decoder, store: &ParamStore<f64>, values: &Tensor<f64>, cfg: &BeamConfig) -> (Hyp, Vec<Hyp>) {
    let mut active = vec![Hyp { tokens: vec![], lp: 0.0, mass: vec![0.0; values.rows()] }];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let mut cands = Vec::new();
        for (b, h) in active.iter().enumerate() {
            let dist = next_dist(dec, store, values, &h.tokens);
            for tok in (0..dec.vocab_size).filter(|t| !cfg.banned.contains(t)) {
                cands.push((b, tok, extend(h, tok, &dist)));
            }
        }
        cands.sort_by(|x, y| y.2.lp.total_cmp(&x.2.lp).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        let mut next = Vec::new();
        for (_, tok, h) in cands {
            if next.len() == cfg.beam_size {
                break;
            }
            if tok == cfg.eos {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        active = next;
        if step + 1 < cfg.max_len && !finished.is_empty() {
            let best = finished.iter().map(|h| score(h, cfg)).fold(f64::NEG_INFINITY, f64::max);
            let lp_max = ((5.0 + cfg.max_len as f64) / 6.0).powf(cfg.length_norm);
            let bound = active.iter().map(|h| h.lp / lp_max).fold(f64::NEG_INFINITY, f64::max);
            if best >= bound {
                break;
            }
        }
    }
    let pool = if finished.is_empty() { active.clone() } else { finished.clone() };
    let mut best = pool[0].clone();
    for h in &pool[1..] {
        if score(h, cfg) > score(&best, cfg) {
            best = h.clone();
        }
    }
    (best, finished)
}

fn c08_beam_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0;
    let mut contract_violations = 0;
    for _ in 0..50 {
        let vocab = 5;
        let dcfg = DecoderConfig {
            num_layers: 2,
            model_dim: 4,
            dropout: 0.0,
            coverage_penalty: 0.2,
            length_norm: 0.2,
            ..DecoderConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, "dec", &dcfg, vocab, 3, 4).unwrap();
        store.init_uniform(rng.gen_range(0.5..2.0), &mut rng);
        let t = rng.gen_range(1..=4);
        let vals: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values = Tensor::from_f64(vec![t, 4], &vals).unwrap();
        let cfg = BeamConfig {
            beam_size: 8,
            length_norm: 0.2,
            coverage_penalty: 0.2,
            max_len: rng.gen_range(2..=5),
            banned: vec![PAD, BOS],
            eos: EOS,
            bos: BOS,
        };
        let mem = SourceMemory::new(&dec, &store, values.clone());
        let out = beam_search(&dec, &store, &mem, &cfg).unwrap();

        let mut all = Vec::new();
        enumerate(&dec, &store, &values, &cfg, &Hyp { tokens: vec![], lp: 0.0, mass: vec![0.0; t] }, &mut all);
        let oracle = all.iter().max_by(|a, b| score(a, &cfg).total_cmp(&score(b, &cfg))).unwrap();
        agree += (out.best.tokens == oracle.tokens) as usize;

        // Exact check against the restated pruning rules.
        let (ref_best, ref_finished) = reference_beam(&dec, &store, &values, &cfg);
        let same_best = ref_best.tokens == out.best.tokens && (score(&ref_best, &cfg) - out.best.score).abs() < 1e-9;
        let same_pool = ref_finished.len() == out.finished.len()
            && ref_finished.iter().zip(&out.finished).all(|(a, b)| a.tokens == b.tokens);
        let none_better = out.finished.iter().all(|h| h.score <= out.best.score);
        contract_violations += (!(same_best && same_pool && none_better)) as usize;
    }
    let pass = agree >= 48 && contract_violations == 0;
    report(8, "beam oracle", pass, &format!("{agree}/50 match exhaustive argmax (>= 48), {contract_violations} pruning-contract violations (== 0)"));
    assert!(pass);
}

// ---------------------------------------------------------------- [9]

/// Brute force: recount every adjacent pair in every word occurrence each
/// round; highest count wins, ties to the lexicographically smallest
/// (left, right).
fn brute_force_bpe(lines: &[&str], target: usize) -> (Vec<(String, String)>, Vec<String>) {
    let mut words: Vec<Vec<String>> = lines
        .iter()
        .flat_map(|l| l.split_whitespace())
        .map(|w| std::iter::once('\u{2581}').chain(w.chars()).map(String::from).collect())
        .collect();
    let mut vocab: Vec<String> = words.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut merges = Vec::new();
    while vocab.len() < target {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for w in &words {
            for i in 0..w.len().saturating_sub(1) {
                *counts.entry((w[i].clone(), w[i + 1].clone())).or_default() += 1;
            }
        }
        let mut best: Option<(&(String, String), usize)> = None;
        for (k, &c) in &counts {
            if best.is_none_or(|b| c > b.1) {
                best = Some((k, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.clone(), r.clone());
        for w in &mut words {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == l && w[i + 1] == r {
                    let right = w.remove(i + 1);
                    w[i].push_str(&right);
                }
                i += 1;
            }
        }
        let merged = format!("{l}{r}");
        if !vocab.contains(&merged) {
            vocab.push(merged);
        }
        merges.push((l, r));
    }
    (merges, vocab)
}

fn c09_bpe_oracle() {
    let corpora: [(&[&str], usize); 3] = [
        (&["low low low low low lower lower newest newest newest newest newest newest widest widest widest"], 30),
        (&["aaaa aaa aa a", "aa aaa aaaa"], 12),
        (&["ab ba ab ba cd dc", "abcd dcba bcda", "abab baba"], 25),
    ];
    let mut mismatches = Vec::new();
    let mut total = 0;
    for (i, (lines, target)) in corpora.iter().enumerate() {
        let (vocab, merges) = learn_bpe(lines.iter().copied(), *target).unwrap();
        let (ref_merges, ref_vocab) = brute_force_bpe(lines, *target);
        total += ref_merges.len();
        if merges.pairs != ref_merges || vocab.tokens()[4..] != ref_vocab[..] {
            mismatches.push(i);
        }
    }
    let pass = mismatches.is_empty() && total > 0;
    report(9, "BPE oracle", pass, &format!("3 corpora, {total} merges compared merge-for-merge, mismatching corpora {mismatches:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- [10]

fn c10_bleu() {
    let same = ["the cat sat on the mat", "a b c d e f"];
    let perfect = bleu(&same, &same).unwrap().bleu;
    let zero = bleu(&["a b c d e"], &["f g h i j"]).unwrap().bleu;
    // Hand count: p1 = 9/11, p2 = 6/9, p3 = 3/7, p4 = 1/5, hyp 11 >= ref 10.
    let hyps = ["the cat sat on the mat", "the dog ran away fast"];
    let refs = ["the cat is on the mat", "the dog ran away"];
    let r = bleu(&hyps, &refs).unwrap();
    let hand = 100.0 * ((9.0 / 11.0) * (6.0 / 9.0) * (3.0 / 7.0) * (1.0 / 5.0f64)).powf(0.25);
    // Short hypothesis: all precisions 1, BP = exp(1 - 5/4).
    let short = bleu(&["the dog ran away"], &["the dog ran away fast"]).unwrap().bleu;
    let short_hand = 100.0 * (1.0 - 5.0 / 4.0f64).exp();
    let pass = (perfect - 100.0).abs() < 1e-9
        && zero == 0.0
        && format!("{:.4}", r.bleu) == format!("{hand:.4}")
        && format!("{short:.4}") == format!("{short_hand:.4}");
    report(
        10,
        "BLEU",
        pass,
        &format!("identical {perfect:.4}, disjoint {zero:.4}, hand example {:.4} vs {hand:.4}, brevity {short:.4} vs {short_hand:.4} (4 d.p.)", r.bleu),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- [11]

fn c11_persistence() {
    let c = reversal_task(8, 3, 8, 300, 40, 11);
    let vocab = build_char_vocab(c.train_lines(), 496).unwrap();
    let train = encode_pairs(&vocab, &c.train);
    let dev = encode_pairs(&vocab, &c.test);
    let mut mc = toy_model(16, 1, 2);
    mc.encoder.dropout = 0.1;
    mc.decoder.dropout = 0.1;
    let mut tc = toy_training(1e-3, 200);
    tc.max_steps = Some(100);
    tc.eval_every = 1000;
    let mut t = Trainer::new(&mc, &tc, vocab.len()).unwrap();
    t.run(&train, &dev, |_, _| Ok(())).unwrap();
    let before = t.dev_perplexity(&dev).unwrap();
    let cfg = RunConfig { model: mc, training: tc, ..Default::default() };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(checkpoint::checkpoint_name(t.progress.step));
    checkpoint::save(&path, &cfg, &vocab, &t).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    let after = ck.trainer.dev_perplexity(&dev).unwrap();
    let resaved = checkpoint::to_bytes(&ck.config, &ck.vocab, &ck.trainer) == std::fs::read(&path).unwrap();
    let progress_kept = ck.trainer.progress == t.progress;
    let pass = before.to_bits() == after.to_bits() && resaved && progress_kept && t.progress.step == 100;
    report(
        11,
        "persistence",
        pass,
        &format!("100 steps, dev ppl {before} before / {after} after (bitwise), re-serialized bytes identical: {resaved}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- [12]

fn c12_scheduler_trace() {
    let mut s = Scheduler::new(SchedulerConfig::default());
    let every = 200;
    // Improves until batch 1000, then a single further improvement at 3400.
    let ppl_at = |b: u64| -> f64 {
        if b <= 1000 {
            100.0 - b as f64 / 100.0
        } else if b < 3400 {
            95.0
        } else {
            80.0
        }
    };
    let mut trace: Vec<(u64, f64)> = vec![(0, s.lr)];
    let mut stop_at = None;
    let mut b = 0;
    while stop_at.is_none() && b < 40_000 {
        b += every;
        let before = s.lr;
        s.update(ppl_at(b), every).unwrap();
        if s.lr != before {
            trace.push((b, s.lr));
        }
        if s.stopped {
            stop_at = Some(b);
        }
    }
    let expected = vec![(0, 4e-4), (3000, 2e-4), (5400, 1e-4), (7400, 5e-5), (9400, 2.5e-5)];
    let pass = trace == expected && stop_at == Some(3400 + 8000);
    let shown: Vec<String> = trace.iter().map(|(b, lr)| format!("{lr}@{b}")).collect();
    report(
        12,
        "scheduler",
        pass,
        &format!("lr {} ; stop at batch {:?} = last improvement 3400 + 8000", shown.join(" -> "), stop_at),
    );
    assert!(pass);
}

const CHECKS: [(&str, fn()); 12] = [
    ("c01_gradient_suite", c01_gradient_suite),
    ("c02_computation_ratios", c02_computation_ratios),
    ("c03_hm_reduces_to_plain_stack", c03_hm_reduces_to_plain_stack),
    ("c04_nestedness", c04_nestedness),
    ("c05_compression_loss", c05_compression_loss),
    ("c06_toy_convergence", c06_toy_convergence),
    ("c07_char_vs_bpe", c07_char_vs_bpe),
    ("c08_beam_oracle", c08_beam_oracle),
    ("c09_bpe_oracle", c09_bpe_oracle),
    ("c10_bleu", c10_bleu),
    ("c11_persistence", c11_persistence),
    ("c12_scheduler_trace", c12_scheduler_trace),
];

fn main() -> std::process::ExitCode {
    // libtest flags such as --nocapture may be passed through; only bare words filter.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        if std::panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    println!("acceptance: {} of {ran} checks passed", ran - failed.len());
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        std::process::ExitCode::FAILURE
    }
}
