//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use charnmt::synthetic::{encode_pairs, reversal_task};
use charnmt::tokenize::build_char_vocab;
use charnmt::{Batch, HmConfig, HmMode, ModelConfig, ParamStore, PoolMode, PoolSpec, Seq2Seq, Vocabulary};

#[derive(Clone, Copy, Debug)]
pub enum Variant {
    BiLstm,
    Pooled,
    Hm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BiLstm, Variant::Pooled, Variant::Hm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BiLstm => "bilstm",
            Variant::Pooled => "pooled",
            Variant::Hm => "hm",
        }
    }
}

pub fn model_config(variant: Variant, dim: usize) -> ModelConfig {
    let mut mc = ModelConfig::default();
    mc.embed_dim = dim;
    mc.encoder.model_dim = dim;
    mc.encoder.projection_dim = dim;
    mc.encoder.num_bilstm_layers = 2;
    mc.decoder.model_dim = dim;
    mc.decoder.num_layers = 2;
    match variant {
        Variant::BiLstm => {}
        Variant::Pooled => {
            mc.encoder.num_bilstm_layers = 3;
            mc.encoder.pooling = vec![
                PoolSpec { after_layer: 1, stride: 3, mode: PoolMode::Mean },
                PoolSpec { after_layer: 2, stride: 2, mode: PoolMode::Mean },
            ];
        }
        Variant::Hm => {
            mc.encoder.num_bilstm_layers = 1;
            mc.hm = Some(HmConfig { num_layers: 2, hidden_dim: dim, mode: HmMode::Stacked, ..Default::default() });
        }
    }
    mc
}

pub struct Fixture {
    pub model: Seq2Seq,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    pub batch: Batch,
}

/// A randomly initialized model and one batch of reversal pairs.
pub fn fixture(variant: Variant, dim: usize, batch_size: usize, len: usize) -> Fixture {
    let corpus = reversal_task(20, len, len, batch_size, 0, 5);
    let vocab = build_char_vocab(corpus.train_lines(), 64).expect("vocab");
    let pairs = encode_pairs(&vocab, &corpus.train);
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, &model_config(variant, dim), vocab.len()).expect("model");
    store.init_uniform(0.1, &mut ChaCha8Rng::seed_from_u64(1));
    let batch = Batch { src: pairs.iter().map(|p| p.src.clone()).collect(), tgt: pairs.iter().map(|p| p.tgt.clone()).collect() };
    Fixture { model, store, vocab, batch }
}

/// Space-separated pseudo-words for BPE learning.
pub fn bpe_corpus(lines: usize) -> Vec<String> {
    let corpus = reversal_task(8, 3, 9, lines * 4, 0, 9);
    corpus.train.chunks(4).map(|c| c.iter().map(|p| p.0.as_str()).collect::<Vec<_>>().join(" ")).collect()
}
