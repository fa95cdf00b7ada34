//! Encoder-decoder assembly: embeddings, encoder variant, decoder, loss.

use serde::{Deserialize, Serialize};

use crate::decoder::{beam_search, AttentionMemory, BeamConfig, BeamOutput, Decoder, DecoderConfig, SourceMemory};
use crate::encoder::{BiLstmStack, EncoderConfig, Encoded};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::hm::{compression_penalty_on_tape, HmConfig, HmEncoder};
use crate::nn::{length_mask, Forward, SeqBatch};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;
use crate::tokenize::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder: EncoderConfig,
    /// When set, HM layers replace the bottom of the encoder.
    pub hm: Option<HmConfig>,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 512,
            encoder: EncoderConfig::default(),
            hm: None,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.embed_dim >= 1, Config, "model.embed_dim must be >= 1");
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(hm) = &self.hm {
            hm.validate()?;
        } else {
            ensure!(self.encoder.num_bilstm_layers >= 1, Config, "encoder needs at least one BiLSTM layer");
        }
        Ok(())
    }

    pub fn encoder_dropout(&self) -> f64 {
        self.hm.as_ref().map_or(self.encoder.dropout, |h| h.dropout)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderImpl {
    BiLstm(BiLstmStack),
    Hm(HmEncoder),
}

/// A sentence pair batch of token ids (no BOS/EOS; the model adds them).
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Target tokens scored, EOS included.
    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }
}

/// Loss terms for one batch, summed over sentences.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub cross_entropy: Var,
    pub penalty: Option<Var>,
    pub encoded: Encoded,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub src_embed: ParamId,
    pub encoder: EncoderImpl,
    pub decoder: Decoder,
}

impl Seq2Seq {
    /// Registers every parameter in `store` (values are left for
    /// `ParamStore::init_uniform`).
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        ensure!(vocab_size > EOS, Config, "vocabulary must include the special tokens");
        let src_embed = store.register("src.embed", ParamKind::Weight, vec![vocab_size, cfg.embed_dim]);
        let encoder = match &cfg.hm {
            None => EncoderImpl::BiLstm(BiLstmStack::new(store, "enc", &cfg.encoder, cfg.embed_dim, 1)?),
            Some(hm) => EncoderImpl::Hm(HmEncoder::new(store, "enc", hm, &cfg.encoder, cfg.embed_dim)?),
        };
        let decoder = Decoder::new(store, "dec", &cfg.decoder, vocab_size, cfg.embed_dim, cfg.encoder.projection_dim)?;
        Ok(Seq2Seq { cfg: cfg.clone(), vocab_size, src_embed, encoder, decoder })
    }

    pub fn is_hm(&self) -> bool {
        matches!(self.encoder, EncoderImpl::Hm(_))
    }

    /// Embeds a padded batch of id sequences, time-major.
    fn embed_batch<F: Real>(&self, fx: &mut Forward<'_, F>, table: ParamId, seqs: &[Vec<usize>], rate: f64) -> Result<SeqBatch> {
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let mask = length_mask(&lengths);
        let table = fx.p(table);
        let mut steps = Vec::with_capacity(mask.len());
        for t in 0..mask.len() {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let e = fx.g.lookup(table, &ids);
            steps.push(fx.dropout(e, rate)?);
        }
        Ok(SeqBatch { steps, mask })
    }

    pub fn encode<F: Real>(&self, fx: &mut Forward<'_, F>, src: &[Vec<usize>], slope: f64) -> Result<Encoded> {
        ensure!(!src.is_empty(), Contract, "empty batch");
        ensure!(src.iter().all(|s| !s.is_empty()), Contract, "empty source sentence");
        let emb = self.embed_batch(fx, self.src_embed, src, self.cfg.encoder_dropout())?;
        match &self.encoder {
            EncoderImpl::BiLstm(stack) => {
                let (states, layer_lengths) = stack.apply(fx, emb)?;
                Ok(Encoded { states, layer_lengths, zmatrices: Vec::new(), gate_counts: Vec::new() })
            }
            EncoderImpl::Hm(hm) => hm.encode(fx, &emb, slope),
        }
    }

    pub fn memory<F: Real>(&self, fx: &mut Forward<'_, F>, enc: &Encoded) -> AttentionMemory {
        self.decoder.attention.memory(fx, &enc.states)
    }

    /// Teacher-forced logits `[T * B x V]` with their targets and weights.
    pub fn teacher_forced<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        mem: &AttentionMemory,
        tgt: &[Vec<usize>],
    ) -> Result<(Var, Vec<usize>, Vec<F>, Vec<Var>)> {
        let inputs: Vec<Vec<usize>> =
            tgt.iter().map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect()).collect();
        let emb = self.embed_batch(fx, self.decoder.embed, &inputs, self.cfg.decoder.dropout)?;
        let out = self.decoder.teacher_forced(fx, mem, &emb)?;
        let steps = emb.len();
        let batch = tgt.len();
        let mut targets = Vec::with_capacity(steps * batch);
        let mut weights = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for s in tgt {
                let (id, w) = match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => (s[t], F::one()),
                    std::cmp::Ordering::Equal => (EOS, F::one()),
                    std::cmp::Ordering::Greater => (PAD, F::zero()),
                };
                targets.push(id);
                weights.push(w);
            }
        }
        Ok((out.logits, targets, weights, out.attention))
    }

    /// Summed cross-entropy over the batch, plus the weighted compression
    /// penalty when the HM encoder has one configured.
    pub fn loss<F: Real>(&self, fx: &mut Forward<'_, F>, batch: &Batch, slope: f64) -> Result<LossTerms> {
        self.loss_with(fx, batch, slope, false)
    }

    /// As `loss`; with `length_normalized` each sentence's cross-entropy is
    /// divided by its target length (EOS included).
    pub fn loss_with<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        batch: &Batch,
        slope: f64,
        length_normalized: bool,
    ) -> Result<LossTerms> {
        let encoded = self.encode(fx, &batch.src, slope)?;
        let mem = self.memory(fx, &encoded);
        let (logits, targets, mut weights, _) = self.teacher_forced(fx, &mem, &batch.tgt)?;
        if length_normalized {
            let b = batch.len();
            for (k, w) in weights.iter_mut().enumerate() {
                *w = *w / F::of((batch.tgt[k % b].len() + 1) as f64);
            }
        }
        let cross_entropy = fx.g.cross_entropy(logits, &targets, &weights)?;
        let penalty = match &self.cfg.hm {
            Some(HmConfig { compression: Some(pc), .. }) => {
                let lengths: Vec<usize> = batch.src.iter().map(Vec::len).collect();
                Some(compression_penalty_on_tape(fx, &encoded.gate_counts, &lengths, pc))
            }
            _ => None,
        };
        Ok(LossTerms { cross_entropy, penalty, encoded })
    }

    /// Model log-probability of `tgt` (EOS included) given `src`.
    pub fn score<F: Real>(&self, store: &ParamStore<F>, src: &[usize], tgt: &[usize], slope: f64) -> Result<f64> {
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, store);
        let enc = self.encode(&mut fx, &[src.to_vec()], slope)?;
        let mem = self.memory(&mut fx, &enc);
        let (logits, targets, weights, _) = self.teacher_forced(&mut fx, &mem, &[tgt.to_vec()])?;
        let ce = fx.g.cross_entropy(logits, &targets, &weights)?;
        Ok(-fx.g.value(ce).item().as_f64())
    }

    /// Projected encoder states for one sentence, ready for beam search.
    pub fn source_memory<F: Real>(&self, store: &ParamStore<F>, src: &[usize], slope: f64) -> Result<(SourceMemory<F>, Encoded)> {
        let mut g = Graph::new();
        let mut fx = Forward::eval(&mut g, store);
        let enc = self.encode(&mut fx, &[src.to_vec()], slope)?;
        let stacked = enc.states.stacked(fx.g);
        let values = fx.g.value(stacked).clone();
        Ok((SourceMemory::new(&self.decoder, store, values), enc))
    }

    pub fn translate<F: Real>(&self, store: &ParamStore<F>, src: &[usize], beam: &BeamConfig, slope: f64) -> Result<BeamOutput> {
        let (mem, _) = self.source_memory(store, src, slope)?;
        beam_search(&self.decoder, store, &mem, beam)
    }
}
