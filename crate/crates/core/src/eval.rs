//! Corpus BLEU, checkpoint evaluation, and encoder compression reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::decoder::{BeamConfig, BeamOutput};
use crate::error::{ensure, Result};
use crate::hm::{HmMode, ZMatrix};
use crate::model::{ModelConfig, Seq2Seq};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::tokenize::{VocabKind, Vocabulary, BOS, EOS, PAD};
use crate::train::{dev_perplexity, Pair};

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU-4 over whitespace tokens, case-sensitive, unsmoothed.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    ensure!(
        hyps.len() == refs.len(),
        Data,
        "{} hypotheses but {} references",
        hyps.len(),
        refs.len()
    );
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if totals[n] == 0 { 0.0 } else { matches[n] as f64 / totals[n] as f64 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport { bleu, precisions, matches, totals, brevity_penalty, hyp_len, ref_len })
}

/// Index of the checkpoint with the highest dev BLEU; ties go to the later one.
pub fn select_checkpoint(bleus: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &b) in bleus.iter().enumerate() {
        if best.is_none_or(|j| b >= bleus[j]) {
            best = Some(i);
        }
    }
    best
}

/// Output length cap: `factor * source length` (3 for characters, 2 for
/// fragments unless configured), plus room for EOS.
pub fn beam_config(cfg: &ModelConfig, kind: VocabKind, src_len: usize, beam_size: usize) -> BeamConfig {
    let factor = cfg.decoder.max_output_factor.unwrap_or(match kind {
        VocabKind::Char => 3.0,
        VocabKind::Bpe => 2.0,
    });
    BeamConfig {
        beam_size,
        length_norm: cfg.decoder.length_norm,
        coverage_penalty: cfg.decoder.coverage_penalty,
        max_len: (factor * src_len as f64).ceil() as usize + 1,
        banned: vec![PAD, BOS],
        eos: EOS,
        bos: BOS,
    }
}

/// Decoding result for one sentence with its encoder accounting.
#[derive(Clone, Debug)]
pub struct Translation {
    pub text: String,
    pub output: BeamOutput,
    /// Timesteps processed per encoder layer.
    pub layer_lengths: Vec<usize>,
    pub zmatrix: Option<ZMatrix>,
}

pub fn translate_line<F: Real>(
    model: &Seq2Seq,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    line: &str,
    beam_size: usize,
    slope: f64,
) -> Result<Translation> {
    let mut src = vocab.encode(line);
    if src.is_empty() {
        // Empty input: let the model see a lone EOS rather than nothing.
        src.push(EOS);
    }
    let cfg = beam_config(&model.cfg, vocab.kind(), src.len(), beam_size);
    let (mem, enc) = model.source_memory(store, &src, slope)?;
    let output = crate::decoder::beam_search(&model.decoder, store, &mem, &cfg)?;
    Ok(Translation {
        text: vocab.decode(&output.tokens),
        output,
        layer_lengths: enc.layer_lengths[0].clone(),
        zmatrix: enc.zmatrices.into_iter().next(),
    })
}

/// Computation ratio of a corpus: encoder timesteps processed over all
/// layers, relative to every layer running at full character length.
pub fn corpus_computation_ratio(layer_lengths: &[Vec<usize>], char_lengths: &[usize]) -> Result<f64> {
    ensure!(layer_lengths.len() == char_lengths.len() && !char_lengths.is_empty(), Contract, "one entry per sentence");
    let layers = layer_lengths[0].len();
    ensure!(layers >= 1 && layer_lengths.iter().all(|l| l.len() == layers), Contract, "layer counts differ");
    let done: usize = layer_lengths.iter().flatten().sum();
    let full: usize = char_lengths.iter().sum::<usize>() * layers;
    ensure!(full > 0, Contract, "empty corpus");
    Ok(done as f64 / full as f64)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub dev_ppl: f64,
    pub computation_ratio: f64,
    /// Source fragments over source characters.
    pub compression_rate: f64,
    pub unfinished: usize,
    pub sentences: usize,
}

impl EvalReport {
    pub fn key_values(&self) -> String {
        let b = &self.bleu;
        let mut s = String::new();
        let _ = writeln!(s, "bleu={:.4}", b.bleu);
        for (n, p) in b.precisions.iter().enumerate() {
            let _ = writeln!(s, "precision_{}={:.6}", n + 1, p);
        }
        let _ = writeln!(s, "brevity_penalty={:.6}", b.brevity_penalty);
        let _ = writeln!(s, "hyp_len={}\nref_len={}", b.hyp_len, b.ref_len);
        let _ = writeln!(s, "dev_ppl={:.6}", self.dev_ppl);
        let _ = writeln!(s, "computation_ratio={:.6}", self.computation_ratio);
        let _ = writeln!(s, "compression_rate={:.6}", self.compression_rate);
        let _ = writeln!(s, "unfinished={}\nsentences={}", self.unfinished, self.sentences);
        s
    }
}

/// Translates `sources` with beam search and scores against `references`;
/// perplexity comes from teacher forcing on the same pairs.
pub fn evaluate<F: Real>(
    model: &Seq2Seq,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    sources: &[String],
    references: &[String],
    beam_size: usize,
    slope: f64,
) -> Result<(EvalReport, Vec<String>)> {
    ensure!(
        sources.len() == references.len(),
        Data,
        "{} source lines but {} reference lines",
        sources.len(),
        references.len()
    );
    ensure!(!sources.is_empty(), Data, "evaluation corpus is empty");
    let mut hyps = Vec::with_capacity(sources.len());
    let mut layer_lengths = Vec::with_capacity(sources.len());
    let mut chars = Vec::with_capacity(sources.len());
    let mut unfinished = 0;
    let mut fragments = 0;
    for line in sources {
        let tr = translate_line(model, store, vocab, line, beam_size, slope)?;
        unfinished += tr.output.unfinished as usize;
        fragments += tr.layer_lengths[0];
        layer_lengths.push(tr.layer_lengths);
        chars.push(line.chars().count().max(1));
        hyps.push(tr.text);
    }
    let pairs: Vec<Pair> = sources
        .iter()
        .zip(references)
        .map(|(s, r)| {
            let mut src = vocab.encode(s);
            if src.is_empty() {
                src.push(EOS);
            }
            Pair { src, tgt: vocab.encode(r) }
        })
        .collect();
    let dev_ppl = dev_perplexity(model, store, &pairs, usize::MAX, slope)?;
    let report = EvalReport {
        bleu: bleu(&hyps, references)?,
        dev_ppl,
        computation_ratio: corpus_computation_ratio(&layer_lengths, &chars)?,
        compression_rate: fragments as f64 / chars.iter().sum::<usize>() as f64,
        unfinished,
        sentences: sources.len(),
    };
    Ok((report, hyps))
}

/// Short description of an encoder configuration, e.g. `BiLSTM + pooling`.
pub fn encoder_label(cfg: &ModelConfig) -> String {
    match &cfg.hm {
        None if cfg.encoder.pooling.is_empty() => "BiLSTM".to_string(),
        None => "BiLSTM + pooling".to_string(),
        Some(hm) => match hm.mode {
            HmMode::GatedOutput => format!("HM ({} layers)", hm.num_layers),
            HmMode::Stacked => format!("HM ({} layers) + BiLSTM", hm.num_layers),
        },
    }
}

pub fn tokenization_label(vocab: &Vocabulary) -> String {
    match vocab.kind() {
        VocabKind::Char => "Char".to_string(),
        VocabKind::Bpe if vocab.len() >= 1000 => format!("{}k", (vocab.len() as f64 / 1000.0).round()),
        VocabKind::Bpe => format!("BPE {}", vocab.len()),
    }
}

/// One line of a compression table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionRow {
    pub encoder: String,
    pub tokenization: String,
    pub bleu: Option<f64>,
    pub ratio: f64,
}

/// Plain-text table with encoder, tokenization, BLEU and computation ratio.
pub fn compression_table(rows: &[CompressionRow]) -> String {
    let ew = rows.iter().map(|r| r.encoder.len()).max().unwrap_or(0).max("Encoder".len());
    let tw = rows.iter().map(|r| r.tokenization.len()).max().unwrap_or(0).max("Tok.".len());
    let mut s = format!("{:<ew$}  {:<tw$}  {:>6}  {:>5}\n", "Encoder", "Tok.", "BLEU", "Comp.");
    for r in rows {
        let bleu = r.bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.1}"));
        let _ = writeln!(s, "{:<ew$}  {:<tw$}  {:>6}  {:>5.2}", r.encoder, r.tokenization, bleu, r.ratio);
    }
    s
}

pub fn compression_key_values(rows: &[CompressionRow]) -> String {
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s, "row{i}.encoder={}", r.encoder);
        let _ = writeln!(s, "row{i}.tokenization={}", r.tokenization);
        if let Some(b) = r.bleu {
            let _ = writeln!(s, "row{i}.bleu={b:.4}");
        }
        let _ = writeln!(s, "row{i}.computation_ratio={:.6}", r.ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let h = ["the cat sat on the mat", "a b c d e"];
        assert!((bleu(&h, &h).unwrap().bleu - 100.0).abs() < 1e-12);
        let r = bleu(&["a b c d"], &["e f g h"]).unwrap();
        assert_eq!(r.bleu, 0.0);
        assert!(bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn selection_prefers_later_on_ties() {
        assert_eq!(select_checkpoint(&[10.0, 12.0, 12.0, 11.0]), Some(2));
        assert_eq!(select_checkpoint(&[]), None);
    }

    #[test]
    fn corpus_ratio() {
        let r = corpus_computation_ratio(&[vec![36, 36, 12, 6, 6, 6]], &[36]).unwrap();
        assert_eq!(format!("{r:.2}"), "0.47");
        let r = corpus_computation_ratio(&[vec![10, 10], vec![5, 5]], &[10, 5]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn table_rows() {
        let rows = vec![
            CompressionRow { encoder: "BiLSTM".into(), tokenization: "Char".into(), bleu: None, ratio: 1.0 },
            CompressionRow { encoder: "BiLSTM + pooling".into(), tokenization: "Char".into(), bleu: Some(30.0), ratio: 0.4722 },
        ];
        let t = compression_table(&rows);
        assert!(t.lines().nth(1).unwrap().ends_with("1.00"));
        assert!(t.lines().nth(2).unwrap().ends_with("0.47"));
        assert!(compression_key_values(&rows).contains("row1.computation_ratio=0.472200"));
    }
}
