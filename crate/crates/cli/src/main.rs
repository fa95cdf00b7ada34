use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use charnmt::checkpoint::{self, Checkpoint};
use charnmt::eval::{self, CompressionRow};
use charnmt::gradcheck::{run_suite, GradCheckConfig};
use charnmt::tokenize::{build_char_vocab, WORD_MARKER};
use charnmt::train::{sweep_dropout, DROPOUT_GRID};
use charnmt::{learn_bpe, Error, MergeList, Pair, RunConfig, Trainer, VocabKind, Vocabulary};

#[derive(Parser)]
#[command(name = "charnmt", version, about = "Character-level neural machine translation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Most frequent characters of the given corpora.
    BuildCharVocab {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 496)]
        size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Learn BPE merges until the vocabulary reaches --vocab-size.
    LearnBpe {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        vocab_out: PathBuf,
        #[arg(long)]
        merges_out: PathBuf,
    },
    /// Split text into vocabulary tokens, one line per input line.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "char")]
        kind: VocabKind,
        /// Apply these merges instead of longest-match over the vocabulary.
        #[arg(long)]
        merges: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print token ids instead of token strings.
        #[arg(long)]
        ids: bool,
    },
    /// Train, resuming from the newest checkpoint in the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// BLEU and perplexity of one or more checkpoints; the best by BLEU is reported.
    Evaluate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Write the selected checkpoint's translations here.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Encoder computation ratio per checkpoint, as a table.
    ReportCompression {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        src: PathBuf,
        /// Also decode and score against these references.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Dump per-sentence HM gate decisions to this file.
        #[arg(long)]
        gate_trace: Option<PathBuf>,
        /// key=value lines instead of a table.
        #[arg(long)]
        key_values: bool,
    },
    /// Train once per dropout rate and keep the best by dev BLEU.
    SweepDropout {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Finite-difference check of every gradient; exits 3 on failure.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 12)]
        coords: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

#[derive(Args)]
struct Overrides {
    /// Override a config value, e.g. --set training.token_cap=4096
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self, path: &Path) -> anyhow::Result<RunConfig> {
        let mut set = self.set.clone();
        if let Some(m) = self.max_steps {
            set.push(format!("training.max_steps={m}"));
        }
        if let Some(s) = self.seed {
            set.push(format!("training.seed={s}"));
        }
        Ok(RunConfig::load_with_overrides(path, &set)?)
    }
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("data.{key} is required")).into())
}

fn encode_corpus(vocab: &Vocabulary, src: &Path, tgt: &Path) -> anyhow::Result<Vec<Pair>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Data(format!("{} has {} lines but {} has {}", src.display(), s.len(), tgt.display(), t.len())).into());
    }
    let mut pairs = Vec::with_capacity(s.len());
    for (n, (a, b)) in s.iter().zip(&t).enumerate() {
        let src_ids = vocab.encode(a);
        if src_ids.is_empty() {
            return Err(Error::Data(format!("{} line {}: empty source sentence", src.display(), n + 1)).into());
        }
        pairs.push(Pair { src: src_ids, tgt: vocab.encode(b) });
    }
    Ok(pairs)
}

fn build_vocab(cfg: &RunConfig) -> anyhow::Result<Vocabulary> {
    if let Some(v) = &cfg.data.vocab {
        return Ok(Vocabulary::load(v, cfg.tokenization.kind)?);
    }
    let mut lines = read_lines(required(&cfg.data.train_src, "train_src")?)?;
    lines.extend(read_lines(required(&cfg.data.train_tgt, "train_tgt")?)?);
    let it = lines.iter().map(String::as_str);
    Ok(match cfg.tokenization.kind {
        VocabKind::Char => build_char_vocab(it, cfg.tokenization.char_vocab_size)?,
        VocabKind::Bpe => learn_bpe(it, cfg.tokenization.bpe_vocab_size)?.0,
    })
}

fn train(config: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = overrides.load(config)?;
    let run_dir = cfg.data.run_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let (vocab, mut trainer) = match checkpoint::latest_checkpoint(&run_dir)? {
        Some(path) => {
            let ck = checkpoint::load(&path)?;
            if ck.config.model != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration; use a fresh run_dir",
                    path.display()
                ))
                .into());
            }
            eprintln!("resuming from {} (step {})", path.display(), ck.trainer.progress.step);
            let mut t = ck.trainer;
            t.cfg.max_steps = cfg.training.max_steps;
            (ck.vocab, t)
        }
        None => {
            let vocab = build_vocab(&cfg)?;
            vocab.save(&run_dir.join("vocab.txt"))?;
            let t = Trainer::new(&cfg.model, &cfg.training, vocab.len())?;
            (vocab, t)
        }
    };
    let train = encode_corpus(&vocab, required(&cfg.data.train_src, "train_src")?, required(&cfg.data.train_tgt, "train_tgt")?)?;
    let dev = encode_corpus(&vocab, required(&cfg.data.dev_src, "dev_src")?, required(&cfg.data.dev_tgt, "dev_tgt")?)?;
    eprintln!("{} training pairs, {} dev pairs, {} parameters", train.len(), dev.len(), trainer.store.num_scalars());

    let log_path = run_dir.join("train.log");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    trainer.run(&train, &dev, |t, p| {
        let line = format!("step={} dev_ppl={:.6} lr={} train_xent={:.6}", p.step, p.dev_ppl, p.lr, p.train_xent);
        println!("{line}");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        checkpoint::save(&run_dir.join(checkpoint::checkpoint_name(p.step)), &cfg, &vocab, t)
    })?;
    let last = run_dir.join(checkpoint::checkpoint_name(trainer.progress.step));
    if !last.exists() {
        checkpoint::save(&last, &cfg, &vocab, &trainer)?;
    }
    eprintln!("stopped at step {}; last checkpoint {}", trainer.progress.step, last.display());
    Ok(())
}

fn beam_of(ck: &Checkpoint, beam: Option<usize>) -> usize {
    beam.unwrap_or(ck.config.model.decoder.beam_size)
}

fn translate(checkpoint: &Path, input: &Path, out: Option<&Path>, beam: Option<usize>) -> anyhow::Result<()> {
    let ck = checkpoint::load(checkpoint)?;
    let beam = beam_of(&ck, beam);
    let mut w = output(out)?;
    for line in read_lines(input)? {
        let tr = eval::translate_line(ck.model(), ck.store(), &ck.vocab, &line, beam, ck.trainer.slope())?;
        writeln!(w, "{}", tr.text)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(checkpoints: &[PathBuf], src: &Path, reference: &Path, beam: Option<usize>, hyps_out: Option<&Path>) -> anyhow::Result<()> {
    let sources = read_lines(src)?;
    let refs = read_lines(reference)?;
    let mut results = Vec::new();
    for path in checkpoints {
        let ck = checkpoint::load(path)?;
        let (report, hyps) =
            eval::evaluate(ck.model(), ck.store(), &ck.vocab, &sources, &refs, beam_of(&ck, beam), ck.trainer.slope())?;
        eprintln!("{}: bleu {:.2} dev_ppl {:.4}", path.display(), report.bleu.bleu, report.dev_ppl);
        results.push((report, hyps));
    }
    let scores: Vec<f64> = results.iter().map(|r| r.0.bleu.bleu).collect();
    let best = eval::select_checkpoint(&scores).expect("at least one checkpoint");
    let (report, hyps) = &results[best];
    println!("checkpoint={}", checkpoints[best].display());
    print!("{}", report.key_values());
    if let Some(p) = hyps_out {
        write_file(p, &hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
    }
    Ok(())
}

fn report_compression(
    checkpoints: &[PathBuf],
    src: &Path,
    reference: Option<&Path>,
    beam: Option<usize>,
    gate_trace: Option<&Path>,
    key_values: bool,
) -> anyhow::Result<()> {
    let sources = read_lines(src)?;
    if sources.is_empty() {
        return Err(Error::Data(format!("{} is empty", src.display())).into());
    }
    let refs = reference.map(read_lines).transpose()?;
    let mut rows = Vec::new();
    let mut trace = String::new();
    for path in checkpoints {
        let ck = checkpoint::load(path)?;
        let slope = ck.trainer.slope();
        let mut lengths = Vec::with_capacity(sources.len());
        let mut chars = Vec::with_capacity(sources.len());
        for (n, line) in sources.iter().enumerate() {
            let mut ids = ck.vocab.encode(line);
            if ids.is_empty() {
                ids.push(charnmt::tokenize::EOS);
            }
            let (_, enc) = ck.model().source_memory(ck.store(), &ids, slope)?;
            if gate_trace.is_some() {
                if let Some(z) = enc.zmatrices.first() {
                    trace.push_str(&format!("# {} sentence {}\n{}", path.display(), n + 1, z.trace()));
                }
            }
            lengths.push(enc.layer_lengths[0].clone());
            chars.push(line.chars().count().max(1));
        }
        let bleu = match &refs {
            Some(r) => {
                let (report, _) = eval::evaluate(ck.model(), ck.store(), &ck.vocab, &sources, r, beam_of(&ck, beam), slope)?;
                Some(report.bleu.bleu)
            }
            None => None,
        };
        rows.push(CompressionRow {
            encoder: eval::encoder_label(&ck.config.model),
            tokenization: eval::tokenization_label(&ck.vocab),
            bleu,
            ratio: eval::corpus_computation_ratio(&lengths, &chars)?,
        });
    }
    if key_values {
        print!("{}", eval::compression_key_values(&rows));
    } else {
        print!("{}", eval::compression_table(&rows));
    }
    if let Some(p) = gate_trace {
        write_file(p, &trace)?;
    }
    Ok(())
}

fn sweep(config: &Path, overrides: &Overrides, rates: Option<&[f64]>, beam: Option<usize>) -> anyhow::Result<()> {
    let cfg = overrides.load(config)?;
    let vocab = build_vocab(&cfg)?;
    let train = encode_corpus(&vocab, required(&cfg.data.train_src, "train_src")?, required(&cfg.data.train_tgt, "train_tgt")?)?;
    let dev_src = read_lines(required(&cfg.data.dev_src, "dev_src")?)?;
    let dev_tgt = read_lines(required(&cfg.data.dev_tgt, "dev_tgt")?)?;
    let dev = encode_corpus(&vocab, required(&cfg.data.dev_src, "dev_src")?, required(&cfg.data.dev_tgt, "dev_tgt")?)?;
    let result = sweep_dropout(rates.unwrap_or(&DROPOUT_GRID), |rate| {
        let mut model = cfg.model.clone();
        model.encoder.dropout = rate;
        model.decoder.dropout = rate;
        if let Some(hm) = &mut model.hm {
            hm.dropout = rate;
        }
        let mut t = Trainer::new(&model, &cfg.training, vocab.len())?;
        t.run(&train, &dev, |_, _| Ok(()))?;
        let b = beam.unwrap_or(model.decoder.beam_size);
        let (report, _) = eval::evaluate(&t.model, &t.store, &vocab, &dev_src, &dev_tgt, b, t.slope())?;
        println!("dropout={rate} bleu={:.4} dev_ppl={:.6}", report.bleu.bleu, report.dev_ppl);
        Ok(report.bleu.bleu)
    })?;
    println!("best_dropout={}", result.best_rate);
    Ok(())
}

fn gradcheck(points: usize, coords: usize, seed: u64) -> anyhow::Result<()> {
    let cfg = GradCheckConfig { points, coords_per_point: coords, seed, ..Default::default() };
    let results = run_suite(&cfg)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<28} {} points {:>5} coords  max rel err {:.3e}  {}", r.name, r.points, r.coords, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
        if !r.passed {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn tokenize(vocab: &Path, kind: VocabKind, merges: Option<&Path>, input: &Path, out: Option<&Path>, ids: bool) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(vocab, kind)?;
    let merges = merges
        .map(|p| -> anyhow::Result<MergeList> {
            if kind != VocabKind::Bpe {
                bail!(Error::Config("--merges only applies to --kind bpe".into()));
            }
            Ok(MergeList::from_file_string(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?)
        })
        .transpose()?;
    let mut w = output(out)?;
    for line in read_lines(input)? {
        let toks: Vec<String> = match &merges {
            Some(m) => line.split_whitespace().flat_map(|word| m.apply_to_word(word)).collect(),
            None => vocab.encode(&line).into_iter().map(|id| vocab.token(id).unwrap_or("<unk>").to_string()).collect(),
        };
        let shown: Vec<String> = if ids {
            toks.iter().map(|t| vocab.id(t).unwrap_or(charnmt::tokenize::UNK).to_string()).collect()
        } else {
            // A space token is shown as the word marker so fields stay space-separated.
            toks.into_iter().map(|t| if t == " " { WORD_MARKER.to_string() } else { t }).collect()
        };
        writeln!(w, "{}", shown.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::BuildCharVocab { inputs, size, output } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(read_lines(p)?);
            }
            let v = build_char_vocab(lines.iter().map(String::as_str), size)?;
            v.save(&output)?;
            eprintln!("{} symbols written to {}", v.len(), output.display());
        }
        Command::LearnBpe { inputs, vocab_size, vocab_out, merges_out } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(read_lines(p)?);
            }
            let (v, m) = learn_bpe(lines.iter().map(String::as_str), vocab_size)?;
            v.save(&vocab_out)?;
            write_file(&merges_out, &m.to_file_string())?;
            eprintln!("{} merges, {} symbols", m.len(), v.len());
        }
        Command::Tokenize { vocab, kind, merges, input, output, ids } => {
            tokenize(&vocab, kind, merges.as_deref(), &input, output.as_deref(), ids)?
        }
        Command::Train { config, overrides } => train(&config, &overrides)?,
        Command::Translate { checkpoint, input, output, beam } => translate(&checkpoint, &input, output.as_deref(), beam)?,
        Command::Evaluate { checkpoints, src, reference, beam, hyps } => {
            evaluate(&checkpoints, &src, &reference, beam, hyps.as_deref())?
        }
        Command::ReportCompression { checkpoints, src, reference, beam, gate_trace, key_values } => {
            report_compression(&checkpoints, &src, reference.as_deref(), beam, gate_trace.as_deref(), key_values)?
        }
        Command::SweepDropout { config, overrides, rates, beam } => sweep(&config, &overrides, rates.as_deref(), beam)?,
        Command::Gradcheck { points, coords, seed } => gradcheck(points, coords, seed)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return e.exit_code() as u8;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
