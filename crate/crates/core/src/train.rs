//! Optimization: Adam, gradient clipping, the dev-perplexity learning-rate
//! schedule, token-capped batching, and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::hm::SlopeSchedule;
use crate::model::{Batch, ModelConfig, Seq2Seq};
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-6 }
    }
}

/// Bias-corrected Adam with per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
        Adam { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        ensure!(
            grads.len() == store.len() && self.m.len() == store.len(),
            Shape,
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            self.m.len(),
            store.len()
        );
        for (id, g) in store.ids().zip(grads) {
            ensure!(
                g.shape() == store.value(id).shape() && self.m[id.index()].shape() == g.shape(),
                Shape,
                "gradient for {} has shape {:?}, parameter has {:?}",
                store.name(id),
                g.shape(),
                store.value(id).shape()
            );
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2, e) = (F::of(beta1), F::of(beta2), F::of(eps));
        let (lr_c1, c2) = (F::of(lr / c1), F::of(c2));
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (F::one() - b1) * gk;
                v[k] = b2 * v[k] + (F::one() - b2) * gk * gk;
                p[k] = p[k] - lr_c1 * m[k] / ((v[k] / c2).sqrt() + e);
            }
        }
        Ok(())
    }
}

pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients to `max_norm` when their global L2 norm exceeds
/// it. Returns the norm before clipping.
pub fn clip_gradients<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub initial_lr: f64,
    /// Batches without dev improvement before the rate is halved.
    pub halve_after: u64,
    /// Minimum batches between two halvings.
    pub min_halving_gap: u64,
    /// Batches without dev improvement before training stops.
    pub stop_after: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { initial_lr: 4e-4, halve_after: 2000, min_halving_gap: 2000, stop_after: 8000 }
    }
}

/// Learning-rate halving and early stopping driven by dev perplexity.
#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    pub cfg: SchedulerConfig,
    pub lr: f64,
    pub halvings: u32,
    pub best_ppl: Option<f64>,
    pub batches: u64,
    pub last_improvement: u64,
    pub last_halving: Option<u64>,
    pub stopped: bool,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        Scheduler {
            cfg,
            lr: cfg.initial_lr,
            halvings: 0,
            best_ppl: None,
            batches: 0,
            last_improvement: 0,
            last_halving: None,
            stopped: false,
        }
    }

    pub fn batches_since_improvement(&self) -> u64 {
        self.batches - self.last_improvement
    }

    /// Records a dev perplexity measured `batches_elapsed` batches after the
    /// previous call. Stopping is checked before halving.
    pub fn update(&mut self, dev_ppl: f64, batches_elapsed: u64) -> Result<()> {
        ensure!(dev_ppl.is_finite() && dev_ppl > 0.0, Numeric, "dev perplexity {dev_ppl} is not a positive number");
        self.batches += batches_elapsed;
        if self.best_ppl.is_none_or(|b| dev_ppl < b) {
            self.best_ppl = Some(dev_ppl);
            self.last_improvement = self.batches;
            return Ok(());
        }
        let stale = self.batches_since_improvement();
        if stale >= self.cfg.stop_after {
            self.stopped = true;
            return Ok(());
        }
        let spaced = self.last_halving.is_none_or(|h| self.batches - h >= self.cfg.min_halving_gap);
        if stale >= self.cfg.halve_after && spaced {
            self.halvings += 1;
            self.lr = self.cfg.initial_lr / 2f64.powi(self.halvings as i32);
            self.last_halving = Some(self.batches);
        }
        Ok(())
    }
}

/// How the summed batch loss is scaled before backpropagation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Sum over sentences, divided by the number of sentences.
    #[default]
    BatchMean,
    /// Each sentence's loss is first divided by its target length.
    SentenceMean,
    /// Plain sum.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Padded tokens per batch: `max(src, tgt) * sentences`.
    pub token_cap: usize,
    pub init_range: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub scheduler: SchedulerConfig,
    pub loss_normalization: LossNormalization,
    /// Batches combined into one optimizer update.
    pub grad_accumulation: usize,
    /// Updates between dev evaluations.
    pub eval_every: u64,
    pub max_steps: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 1,
            token_cap: 16384,
            init_range: 0.04,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            scheduler: SchedulerConfig::default(),
            loss_normalization: LossNormalization::BatchMean,
            grad_accumulation: 1,
            eval_every: 200,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.token_cap >= 1, Config, "training.token_cap must be >= 1");
        ensure!(self.init_range > 0.0, Config, "training.init_range must be positive");
        ensure!(self.clip_norm > 0.0, Config, "training.clip_norm must be positive");
        ensure!(self.grad_accumulation >= 1, Config, "training.grad_accumulation must be >= 1");
        ensure!(self.eval_every >= 1, Config, "training.eval_every must be >= 1");
        let a = &self.adam;
        ensure!(
            (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0,
            Config,
            "adam betas must be in [0, 1) and eps positive"
        );
        let s = &self.scheduler;
        ensure!(s.initial_lr > 0.0, Config, "scheduler.initial_lr must be positive");
        ensure!(s.halve_after >= 1 && s.stop_after >= 1, Config, "scheduler thresholds must be >= 1");
        Ok(())
    }
}

/// A tokenized sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Pair {
    pub fn tokens(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

pub fn make_batch(pairs: &[Pair], idx: &[usize]) -> Batch {
    Batch {
        src: idx.iter().map(|&i| pairs[i].src.clone()).collect(),
        tgt: idx.iter().map(|&i| pairs[i].tgt.clone()).collect(),
    }
}

/// Padded token count of a batch: longest side of its longest pair times
/// the number of pairs.
pub fn padded_tokens(pairs: &[Pair], idx: &[usize]) -> usize {
    idx.iter().map(|&i| pairs[i].tokens()).max().unwrap_or(0) * idx.len()
}

/// Groups pairs, sorted by length, into batches whose padded token count
/// stays within `token_cap`, then shuffles the batch order.
pub fn build_batches(pairs: &[Pair], token_cap: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    ensure!(token_cap >= 1, Contract, "token cap must be >= 1");
    for (i, p) in pairs.iter().enumerate() {
        ensure!(
            p.tokens() <= token_cap,
            Data,
            "line {}: sentence of {} tokens exceeds the batch cap of {token_cap}",
            i + 1,
            p.tokens()
        );
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].tokens(), pairs[i].src.len(), i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        // Sorted ascending, so the newcomer sets the padded width.
        if !cur.is_empty() && pairs[i].tokens() * (cur.len() + 1) > token_cap {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    Ok(batches)
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

/// Position of a run: optimizer updates taken and where in which epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// Summed loss over the sentences of the update, before normalization.
    pub loss: f64,
    pub sentences: usize,
    pub target_tokens: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalPoint {
    pub step: u64,
    pub dev_ppl: f64,
    pub lr: f64,
    /// Mean per-token training cross-entropy since the previous evaluation.
    pub train_xent: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub model: Seq2Seq,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub scheduler: Scheduler,
    /// Drives dropout masks.
    pub rng: ChaCha8Rng,
    pub progress: Progress,
}

impl Trainer {
    /// Registers the model and initializes parameters from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainingConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Seq2Seq::new(&mut store, model_cfg, vocab_size)?;
        store.init_uniform(cfg.init_range, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let adam = Adam::new(cfg.adam, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Trainer { cfg: cfg.clone(), model, store, adam, scheduler: Scheduler::new(cfg.scheduler), rng, progress: Progress::default() })
    }

    pub fn slope_schedule(&self) -> SlopeSchedule {
        self.model.cfg.hm.as_ref().map(|h| h.slope).unwrap_or_default()
    }

    /// Hard-sigmoid slope at the current step.
    pub fn slope(&self) -> f64 {
        self.slope_schedule().slope(self.progress.step)
    }

    /// One optimizer update over the given batches (gradient accumulation
    /// when more than one).
    pub fn train_step(&mut self, batches: &[Batch]) -> Result<StepStats> {
        ensure!(!batches.is_empty(), Contract, "train_step needs at least one batch");
        let sentences: usize = batches.iter().map(Batch::len).sum();
        let target_tokens: usize = batches.iter().map(Batch::target_tokens).sum();
        let scale = match self.cfg.loss_normalization {
            LossNormalization::Sum => 1.0,
            _ => 1.0 / sentences as f64,
        };
        let slope = self.slope();
        let mut total: Option<Vec<Tensor<f32>>> = None;
        let mut loss_sum = 0.0;
        for batch in batches {
            let mut g = Graph::new();
            let mut fx = Forward::train(&mut g, &self.store, &mut self.rng);
            let per_sentence = self.cfg.loss_normalization == LossNormalization::SentenceMean;
            let terms = self.model.loss_with(&mut fx, batch, slope, per_sentence)?;
            let mut loss = terms.cross_entropy;
            loss_sum += fx.g.value(loss).item().as_f64();
            if let Some(p) = terms.penalty {
                let ramp = self.model.cfg.hm.as_ref().and_then(|h| h.compression).map_or(1.0, |c| c.ramp(self.progress.step));
                let p = fx.g.scale(p, ramp as f32);
                loss = fx.g.add(loss, p);
            }
            let loss = fx.g.scale(loss, scale as f32);
            let value = fx.g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {}", self.progress.step + 1)));
            }
            let grads = g.backward(loss)?.collect_params(&self.store);
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += *y);
                    }
                }
            }
        }
        let mut grads = total.expect("at least one batch");
        let grad_norm = clip_gradients(&mut grads, self.cfg.clip_norm);
        ensure!(grad_norm.is_finite(), Numeric, "gradient norm is {grad_norm} at step {}", self.progress.step + 1);
        self.adam.update(&mut self.store, &grads, self.scheduler.lr)?;
        self.progress.step += 1;
        Ok(StepStats { loss: loss_sum, sentences, target_tokens, grad_norm })
    }

    pub fn dev_perplexity(&self, dev: &[Pair]) -> Result<f64> {
        dev_perplexity(&self.model, &self.store, dev, self.cfg.token_cap, self.slope())
    }

    /// Trains until the scheduler stops or `max_steps` is reached, resuming
    /// from `self.progress`. `on_eval` runs after every dev evaluation.
    pub fn run(
        &mut self,
        train: &[Pair],
        dev: &[Pair],
        mut on_eval: impl FnMut(&Trainer, &EvalPoint) -> Result<()>,
    ) -> Result<Vec<EvalPoint>> {
        ensure!(!train.is_empty(), Data, "training corpus is empty");
        ensure!(!dev.is_empty(), Data, "dev corpus is empty");
        let mut history = Vec::new();
        let mut xent = 0.0;
        let mut toks = 0usize;
        let accum = self.cfg.grad_accumulation;
        loop {
            let batches = build_batches(train, self.cfg.token_cap, &mut epoch_rng(self.cfg.seed, self.progress.epoch))?;
            while self.progress.batch_in_epoch < batches.len() {
                if self.scheduler.stopped || self.cfg.max_steps.is_some_and(|m| self.progress.step >= m) {
                    return Ok(history);
                }
                let start = self.progress.batch_in_epoch;
                let end = (start + accum).min(batches.len());
                let group: Vec<Batch> = batches[start..end].iter().map(|idx| make_batch(train, idx)).collect();
                let stats = self.train_step(&group)?;
                self.progress.batch_in_epoch = end;
                xent += stats.loss;
                toks += stats.target_tokens;
                if self.progress.step % self.cfg.eval_every == 0 {
                    let dev_ppl = self.dev_perplexity(dev)?;
                    self.scheduler.update(dev_ppl, self.cfg.eval_every)?;
                    let point = EvalPoint {
                        step: self.progress.step,
                        dev_ppl,
                        lr: self.scheduler.lr,
                        train_xent: xent / toks.max(1) as f64,
                    };
                    xent = 0.0;
                    toks = 0;
                    on_eval(self, &point)?;
                    history.push(point);
                }
            }
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
        }
    }
}

/// Per-target-token perplexity (EOS included) under teacher forcing.
pub fn dev_perplexity<F: Real>(model: &Seq2Seq, store: &ParamStore<F>, dev: &[Pair], token_cap: usize, slope: f64) -> Result<f64> {
    ensure!(!dev.is_empty(), Data, "dev corpus is empty");
    let cap = token_cap.max(dev.iter().map(Pair::tokens).max().unwrap_or(1));
    let mut order: Vec<usize> = (0..dev.len()).collect();
    order.sort_by_key(|&i| (dev[i].tokens(), i));
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && dev[order[end]].tokens() * (end - start + 1) <= cap {
            end += 1;
        }
        let batch = make_batch(dev, &order[start..end]);
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, store);
        let terms = model.loss(&mut fx, &batch, slope)?;
        total += fx.g.value(terms.cross_entropy).item().as_f64();
        tokens += batch.target_tokens();
        start = end;
    }
    let ppl = (total / tokens as f64).exp();
    ensure!(ppl.is_finite(), Numeric, "dev perplexity is {ppl}");
    Ok(ppl)
}

/// Least-squares line through `(x, y)` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Fits msec/sentence against total layer count; the slope is the marginal
/// cost of one layer.
pub fn timing_report(points: &[(usize, f64)]) -> Result<LinearFit> {
    let mut xs: Vec<usize> = points.iter().map(|p| p.0).collect();
    xs.sort_unstable();
    xs.dedup();
    ensure!(xs.len() >= 2, Data, "timing fit needs at least 2 distinct layer counts, got {}", xs.len());
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(LinearFit { slope, intercept: my - slope * mx })
}

/// Wall-clock msec per sentence of `steps` training updates over `batches`.
pub fn measure_training_time(trainer: &mut Trainer, batches: &[Batch], steps: usize) -> Result<f64> {
    ensure!(!batches.is_empty() && steps >= 1, Contract, "timing needs batches and at least one step");
    let start = Instant::now();
    let mut sentences = 0;
    for k in 0..steps {
        let b = &batches[k % batches.len()];
        trainer.train_step(std::slice::from_ref(b))?;
        sentences += b.len();
    }
    Ok(start.elapsed().as_secs_f64() * 1000.0 / sentences as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub best_rate: f64,
    /// `(rate, dev score)` in the order explored.
    pub scores: Vec<(f64, f64)>,
}

pub const DROPOUT_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Greedy sweep: tries rates in increasing order and stops at the first one
/// that does not beat the best dev score so far (higher is better).
pub fn sweep_dropout(rates: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<SweepResult> {
    ensure!(!rates.is_empty(), Contract, "dropout sweep needs at least one rate");
    let mut scores = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &r in rates {
        let s = score(r)?;
        scores.push((r, s));
        match best {
            Some((_, b)) if s <= b => break,
            _ => best = Some((r, s)),
        }
    }
    Ok(SweepResult { best_rate: best.expect("at least one rate").0, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::<f64>::from_f64(vec![2], &[6.0, 8.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 5.0), 10.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::<f64>::from_f64(vec![2], &[0.0, 3.0]).unwrap()];
        clip_gradients(&mut g, 5.0);
        assert_eq!(g[0].data(), &[0.0, 3.0]);
        let mut g = vec![Tensor::<f64>::zeros(vec![3])];
        assert_eq!(clip_gradients(&mut g, 5.0), 0.0);
        assert_eq!(g[0].data(), &[0.0; 3]);
    }

    #[test]
    fn scheduler_improving_keeps_rate() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        for k in 0..50 {
            s.update(100.0 - k as f64, 200).unwrap();
        }
        assert_eq!(s.lr, 4e-4);
        assert!(!s.stopped);
    }

    #[test]
    fn scheduler_first_halving_at_2000() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.update(10.0, 200).unwrap();
        for _ in 0..9 {
            s.update(11.0, 200).unwrap();
        }
        assert_eq!(s.lr, 4e-4);
        s.update(11.0, 200).unwrap();
        assert_eq!(s.lr, 2e-4);
    }

    #[test]
    fn scheduler_rejects_bad_ppl() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        assert!(matches!(s.update(f64::NAN, 1), Err(Error::Numeric(_))));
        assert!(s.update(0.0, 1).is_err());
    }

    #[test]
    fn batching_boundaries() {
        let one = vec![Pair { src: vec![4; 16384], tgt: vec![4; 3] }];
        let b = build_batches(&one, 16384, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, vec![vec![0]]);
        let ten: Vec<Pair> = (0..10).map(|i| Pair { src: vec![4; 10 + i * 9], tgt: vec![5; 100 - i] }).collect();
        let b = build_batches(&ten, 16384, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);
    }

    #[test]
    fn over_long_sentence_reports_line() {
        let pairs = vec![Pair { src: vec![4; 3], tgt: vec![4; 3] }, Pair { src: vec![4; 3], tgt: vec![4; 9] }];
        let err = build_batches(&pairs, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn timing_fit_examples() {
        let f = timing_report(&[(4, 2.0), (8, 4.0)]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12 && f.intercept.abs() < 1e-12);
        let f = timing_report(&[(2, 1.3), (5, 2.5), (9, 4.1)]).unwrap();
        assert!((f.slope - 0.4).abs() < 1e-9 && (f.intercept - 0.5).abs() < 1e-9);
        assert!(timing_report(&[(4, 1.0), (4, 2.0)]).is_err());
    }

    #[test]
    fn greedy_sweep_stops_at_first_drop() {
        let table = [(0.1, 20.0), (0.2, 22.0), (0.3, 21.0), (0.4, 30.0)];
        let mut calls = 0;
        let r = sweep_dropout(&DROPOUT_GRID, |rate| {
            calls += 1;
            Ok(table.iter().find(|t| (t.0 - rate).abs() < 1e-12).unwrap().1)
        })
        .unwrap();
        assert_eq!(r.best_rate, 0.2);
        assert_eq!(calls, 3);
    }
}
