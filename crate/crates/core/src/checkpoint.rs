//! Checkpoint container: a UTF-8 manifest followed by raw little-endian f32
//! payloads.
//!
//! ```text
//! charnmt-checkpoint 1 <manifest bytes>\n
//! <manifest>
//! <payload>
//! ```
//!
//! The manifest holds `key value` lines, one `tensor <name> <shape> <offset>
//! <count>` line per stored array (offsets in bytes from the payload start),
//! and length-prefixed `section <name> <bytes>` blocks for the config and
//! vocabulary. Floats in the manifest are written as hex bit patterns so
//! everything round-trips exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::model::Seq2Seq;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenize::{VocabKind, Vocabulary};
use crate::train::{Adam, Progress, Scheduler, Trainer};

const MAGIC: &str = "charnmt-checkpoint";
const VERSION: u32 = 1;

/// Everything needed to resume training or to decode.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn model(&self) -> &Seq2Seq {
        &self.trainer.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.trainer.store
    }
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| Error::Data(format!("bad float field {s:?}")))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Serializes a trainer with its run config and vocabulary.
pub fn to_bytes(config: &RunConfig, vocab: &Vocabulary, t: &Trainer) -> Vec<u8> {
    let mut m = String::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut put = |m: &mut String, name: &str, x: &Tensor<f32>| {
        let dims: Vec<String> = x.shape().iter().map(usize::to_string).collect();
        m.push_str(&format!("tensor {name} {} {} {}\n", dims.join("x"), payload.len(), x.len()));
        for v in x.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    let p = &t.progress;
    let s = &t.scheduler;
    let seed: String = t.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    m.push_str(&format!("step {}\nepoch {}\nbatch_in_epoch {}\n", p.step, p.epoch, p.batch_in_epoch));
    m.push_str(&format!("rng {seed} {} {}\n", t.rng.get_stream(), t.rng.get_word_pos()));
    m.push_str(&format!("lr {}\nhalvings {}\n", hex(s.lr), s.halvings));
    m.push_str(&format!("best_ppl {}\n", opt(s.best_ppl.map(hex))));
    m.push_str(&format!("batches {}\nlast_improvement {}\n", s.batches, s.last_improvement));
    m.push_str(&format!("last_halving {}\nstopped {}\n", opt(s.last_halving), s.stopped));
    m.push_str(&format!("adam_step {}\nvocab_kind {}\n", t.adam.step, vocab.kind()));
    for id in t.store.ids() {
        put(&mut m, t.store.name(id), t.store.value(id));
    }
    for id in t.store.ids() {
        put(&mut m, &format!("adam.m:{}", t.store.name(id)), &t.adam.m[id.index()]);
        put(&mut m, &format!("adam.v:{}", t.store.name(id)), &t.adam.v[id.index()]);
    }
    for (name, body) in [("config", config.to_toml()), ("vocab", vocab.to_file_string())] {
        m.push_str(&format!("section {name} {}\n{body}\n", body.len()));
    }
    let mut out = format!("{MAGIC} {VERSION} {}\n", m.len()).into_bytes();
    out.extend_from_slice(m.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, config: &RunConfig, vocab: &Vocabulary, t: &Trainer) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(config, vocab, t)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Manifest<'a> {
    fields: HashMap<&'a str, &'a str>,
    tensors: HashMap<&'a str, (Vec<usize>, usize, usize)>,
    sections: HashMap<&'a str, &'a str>,
}

fn parse_manifest(text: &str) -> Result<Manifest<'_>> {
    let mut fields = HashMap::new();
    let mut tensors = HashMap::new();
    let mut sections = HashMap::new();
    let mut rest = text;
    while !rest.is_empty() {
        let (line, tail) = rest.split_once('\n').ok_or_else(|| Error::Data("unterminated manifest line".into()))?;
        rest = tail;
        let (key, value) = line.split_once(' ').ok_or_else(|| Error::Data(format!("bad manifest line {line:?}")))?;
        match key {
            "tensor" => {
                let parts: Vec<&str> = value.split(' ').collect();
                ensure!(parts.len() == 4, Data, "bad tensor line {line:?}");
                let shape = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Data(format!("bad tensor shape in {line:?}")))?;
                let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad number in {line:?}")));
                tensors.insert(parts[0], (shape, num(parts[2])?, num(parts[3])?));
            }
            "section" => {
                let (name, len) = value.split_once(' ').ok_or_else(|| Error::Data(format!("bad section line {line:?}")))?;
                let len: usize = len.parse().map_err(|_| Error::Data(format!("bad section length in {line:?}")))?;
                ensure!(rest.len() > len && rest.is_char_boundary(len), Data, "section {name} is truncated");
                sections.insert(name, &rest[..len]);
                ensure!(rest.as_bytes()[len] == b'\n', Data, "section {name} is not terminated");
                rest = &rest[len + 1..];
            }
            _ => {
                fields.insert(key, value);
            }
        }
    }
    Ok(Manifest { fields, tensors, sections })
}

impl<'a> Manifest<'a> {
    fn field(&self, key: &str) -> Result<&'a str> {
        self.fields.get(key).copied().ok_or_else(|| Error::Data(format!("checkpoint lacks field {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.field(key)?.parse().map_err(|_| Error::Data(format!("bad value for {key}")))
    }

    fn opt_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.field(key)? {
            "none" => Ok(None),
            _ => self.num(key).map(Some),
        }
    }

    fn section(&self, name: &str) -> Result<&'a str> {
        self.sections.get(name).copied().ok_or_else(|| Error::Data(format!("checkpoint lacks section {name}")))
    }

    fn tensor(&self, name: &str, payload: &[u8], shape: &[usize]) -> Result<Tensor<f32>> {
        let (s, offset, count) =
            self.tensors.get(name).ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
        ensure!(s == shape, Data, "tensor {name} has shape {s:?}, model expects {shape:?}");
        let end = offset + count * 4;
        ensure!(end <= payload.len(), Data, "tensor {name} runs past the end of the file");
        let data =
            payload[*offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Data("not a checkpoint".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Data("not a checkpoint".into()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    ensure!(parts.len() == 3 && parts[0] == MAGIC, Data, "not a checkpoint");
    ensure!(parts[1] == VERSION.to_string(), Data, "unsupported checkpoint version {}", parts[1]);
    let mlen: usize = parts[2].parse().map_err(|_| Error::Data("bad manifest length".into()))?;
    let start = nl + 1;
    ensure!(start + mlen <= bytes.len(), Data, "checkpoint is truncated");
    let text = std::str::from_utf8(&bytes[start..start + mlen]).map_err(|_| Error::Data("manifest is not UTF-8".into()))?;
    let payload = &bytes[start + mlen..];
    let m = parse_manifest(text)?;

    let config = RunConfig::from_toml(m.section("config")?)?;
    let kind: VocabKind = m.field("vocab_kind")?.parse()?;
    let vocab = Vocabulary::from_file_string(kind, m.section("vocab")?)?;
    let mut trainer = Trainer::new(&config.model, &config.training, vocab.len())?;

    let ids: Vec<_> = trainer.store.ids().collect();
    for &id in &ids {
        let name = trainer.store.name(id).to_string();
        let shape = trainer.store.value(id).shape().to_vec();
        trainer.store.set(id, m.tensor(&name, payload, &shape)?)?;
        trainer.adam.m[id.index()] = m.tensor(&format!("adam.m:{name}"), payload, &shape)?;
        trainer.adam.v[id.index()] = m.tensor(&format!("adam.v:{name}"), payload, &shape)?;
    }
    ensure!(
        m.tensors.len() == 3 * ids.len(),
        Data,
        "checkpoint holds {} tensors, model expects {}",
        m.tensors.len(),
        3 * ids.len()
    );
    trainer.adam = Adam { step: m.num("adam_step")?, ..trainer.adam };

    let rng: Vec<&str> = m.field("rng")?.split(' ').collect();
    ensure!(rng.len() == 3 && rng[0].len() == 64, Data, "bad rng state");
    let mut seed = [0u8; 32];
    for (k, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&rng[0][2 * k..2 * k + 2], 16).map_err(|_| Error::Data("bad rng seed".into()))?;
    }
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(rng[1].parse().map_err(|_| Error::Data("bad rng stream".into()))?);
    r.set_word_pos(rng[2].parse().map_err(|_| Error::Data("bad rng position".into()))?);
    trainer.rng = r;

    trainer.scheduler = Scheduler {
        cfg: config.training.scheduler,
        lr: unhex(m.field("lr")?)?,
        halvings: m.num("halvings")?,
        best_ppl: match m.field("best_ppl")? {
            "none" => None,
            s => Some(unhex(s)?),
        },
        batches: m.num("batches")?,
        last_improvement: m.num("last_improvement")?,
        last_halving: m.opt_num("last_halving")?,
        stopped: m.num("stopped")?,
    };
    trainer.progress = Progress {
        step: m.num("step")?,
        epoch: m.num("epoch")?,
        batch_in_epoch: m.num("batch_in_epoch")?,
    };
    Ok(Checkpoint { config, vocab, trainer })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// File name for the checkpoint taken after `step` updates.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.bin")
}

/// Checkpoints in `dir`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-")?.strip_suffix(".bin")?.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    Ok(list_checkpoints(dir)?.pop().map(|(_, p)| p))
}
