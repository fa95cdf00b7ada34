//! Character vocabularies, byte-pair-encoding merges, and greedy
//! longest-match tokenization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Prefixed to every word in BPE mode so words can be rejoined exactly.
pub const WORD_MARKER: char = '\u{2581}';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Char,
    Bpe,
}

impl std::fmt::Display for VocabKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VocabKind::Char => "char",
            VocabKind::Bpe => "bpe",
        })
    }
}

impl std::str::FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(VocabKind::Char),
            "bpe" => Ok(VocabKind::Bpe),
            other => Err(Error::Config(format!("unknown vocabulary kind {other:?} (char|bpe)"))),
        }
    }
}

/// Bidirectional token/id map. Ids 0..4 are the specials.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    /// Longest token, in chars; bounds the longest-match search.
    max_chars: usize,
}

impl Vocabulary {
    /// Specials followed by `tokens` in order. Duplicates are an error.
    pub fn new(kind: VocabKind, tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut ids = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            ensure!(!t.is_empty(), Data, "empty token at id {i}");
            ensure!(!t.contains('\n'), Data, "token at id {i} contains a newline");
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?} at id {i}")));
            }
        }
        let max_chars = all[SPECIALS.len()..].iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Vocabulary { kind, tokens: all, ids, max_chars })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(kind: VocabKind, text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.strip_suffix('\n').unwrap_or(text).split('\n').collect();
        ensure!(lines.len() >= SPECIALS.len(), Data, "vocabulary has {} lines, needs the 4 specials", lines.len());
        for (i, s) in SPECIALS.iter().enumerate() {
            ensure!(lines[i] == *s, Data, "line {} must be {s:?}, found {:?}", i + 1, lines[i]);
        }
        Vocabulary::new(kind, lines[SPECIALS.len()..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: VocabKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(kind, &text)
    }

    /// Text to ids. Characters with no vocabulary entry become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            VocabKind::Char => {
                let mut buf = [0u8; 4];
                text.chars().map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)).collect()
            }
            VocabKind::Bpe => {
                let mut out = Vec::new();
                for word in text.split_whitespace() {
                    let chars: Vec<char> = std::iter::once(WORD_MARKER).chain(word.chars()).collect();
                    self.longest_match(&chars, &mut out);
                }
                out
            }
        }
    }

    fn longest_match(&self, chars: &[char], out: &mut Vec<usize>) {
        let mut i = 0;
        let mut buf = String::new();
        while i < chars.len() {
            let mut best = None;
            let longest = self.max_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if let Some(id) = self.id(&buf) {
                    if id >= SPECIALS.len() {
                        best = Some((id, len));
                        break;
                    }
                }
            }
            match best {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
    }

    /// Ids to text. PAD, BOS and EOS are dropped; UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                _ => s.push_str(self.token(id).unwrap_or(SPECIALS[UNK])),
            }
        }
        match self.kind {
            VocabKind::Char => s,
            VocabKind::Bpe => {
                let s: String = s.chars().map(|c| if c == WORD_MARKER { ' ' } else { c }).collect();
                s.strip_prefix(' ').map(str::to_string).unwrap_or(s)
            }
        }
    }
}

/// The `cap` most frequent characters over all lines, ties to the lower
/// code point.
pub fn build_char_vocab<'a>(lines: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Vocabulary> {
    ensure!(cap >= 1, Contract, "character cap must be >= 1");
    let mut counts: BTreeMap<char, u64> = BTreeMap::new();
    let mut any_line = false;
    for line in lines {
        any_line = true;
        for c in line.chars().filter(|&c| c != '\n') {
            *counts.entry(c).or_default() += 1;
        }
    }
    ensure!(any_line && !counts.is_empty(), Data, "cannot build a character vocabulary from empty corpora");
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Vocabulary::new(VocabKind::Char, ranked.into_iter().take(cap).map(|(c, _)| c.to_string()))
}

/// Ordered merges: `pairs[r]` was learned at rank `r`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeList {
    pub pairs: Vec<(String, String)>,
}

impl MergeList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_file_string(&self) -> String {
        self.pairs.iter().map(|(l, r)| format!("{l}\t{r}\n")).collect()
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("merge line {} has no tab", n + 1)))?;
            ensure!(!l.is_empty() && !r.is_empty() && !r.contains('\t'), Data, "malformed merge on line {}", n + 1);
            pairs.push((l.to_string(), r.to_string()));
        }
        Ok(MergeList { pairs })
    }

    /// Applies the merges in rank order to one marked word.
    pub fn apply_to_word(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = std::iter::once(WORD_MARKER).chain(word.chars()).map(String::from).collect();
        for (l, r) in &self.pairs {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == l && &syms[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }
}

/// Word types with their symbol splits and frequencies.
fn word_table<'a>(lines: impl IntoIterator<Item = &'a str>) -> Vec<(Vec<String>, u64)> {
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    freq.into_iter()
        .map(|(w, n)| (std::iter::once(WORD_MARKER).chain(w.chars()).map(String::from).collect(), n))
        .collect()
}

/// Learns merges until the (non-special) vocabulary reaches
/// `target_vocab_size`. The base symbols are the distinct characters of the
/// marked words, the marker included. Pairs never cross word boundaries. The
/// most frequent pair wins; ties go to the lexicographically smaller
/// `(left, right)`.
pub fn learn_bpe<'a>(lines: impl IntoIterator<Item = &'a str>, target_vocab_size: usize) -> Result<(Vocabulary, MergeList)> {
    let mut words = word_table(lines);
    ensure!(!words.is_empty(), Data, "cannot learn BPE from empty corpora");
    let mut symbols: Vec<String> = {
        let mut chars: Vec<&String> = words.iter().flat_map(|(w, _)| w.iter()).collect();
        chars.sort();
        chars.dedup();
        chars.into_iter().cloned().collect()
    };
    ensure!(
        target_vocab_size >= symbols.len(),
        Contract,
        "target vocabulary {target_vocab_size} is below the {} distinct characters",
        symbols.len()
    );
    let mut known: std::collections::HashSet<String> = symbols.iter().cloned().collect();
    let mut merges = MergeList::default();
    while symbols.len() < target_vocab_size {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
            }
        }
        let Some(((l, r), _)) = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (w, _) in &mut words {
            if w.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut w[i]));
                    i += 1;
                }
            }
            *w = out;
        }
        if known.insert(merged.clone()) {
            symbols.push(merged);
        }
        merges.pairs.push((l, r));
    }
    Ok((Vocabulary::new(VocabKind::Bpe, symbols)?, merges))
}

/// Total fragments over total characters: 1.0 for characters themselves,
/// smaller for shorter sequences.
pub fn compression_rate(char_lengths: &[usize], fragment_lengths: &[usize]) -> Result<f64> {
    ensure!(
        char_lengths.len() == fragment_lengths.len(),
        Contract,
        "{} character lengths vs {} fragment lengths",
        char_lengths.len(),
        fragment_lengths.len()
    );
    ensure!(!char_lengths.is_empty(), Contract, "no sentences");
    if let Some(i) = char_lengths.iter().zip(fragment_lengths).position(|(&c, &f)| c == 0 || f == 0) {
        return Err(Error::Contract(format!("sentence {} has zero length", i + 1)));
    }
    let chars: usize = char_lengths.iter().sum();
    let frags: usize = fragment_lengths.iter().sum();
    Ok(frags as f64 / chars as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bpe_vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::new(VocabKind::Bpe, tokens.iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn char_vocab_orders_by_frequency() {
        let v = build_char_vocab(["aab"], 2).unwrap();
        assert_eq!(&v.tokens()[4..], &["a".to_string(), "b".to_string()]);
        let v = build_char_vocab(["ba"], 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["a".to_string()]);
        assert!(build_char_vocab(std::iter::empty::<&str>(), 3).is_err());
        let big: String = (0..2000u32).filter_map(char::from_u32).collect();
        assert!(build_char_vocab([big.as_str()], 496).unwrap().len() <= 500);
    }

    #[test]
    fn char_unknowns_become_unk() {
        let v = build_char_vocab(["ab c"], 10).unwrap();
        let ids = v.encode("abz c");
        assert_eq!(ids[2], UNK);
        assert_eq!(v.decode(&v.encode("c ba")), "c ba");
    }

    #[test]
    fn longest_match_from_left() {
        let v = bpe_vocab(&["\u{2581}", "a", "b", "c", "ab", "bc"]);
        let ids = v.encode("abc");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["\u{2581}", "ab", "c"]);
        let unk = v.encode("axb");
        assert_eq!(unk[2], UNK);
        assert_eq!(v.token(unk[3]), Some("b"));
    }

    #[test]
    fn bpe_round_trip() {
        let (v, _) = learn_bpe(["the cat sat", "the hat"], 20).unwrap();
        assert_eq!(v.decode(&v.encode("the cat sat")), "the cat sat");
    }

    #[test]
    fn first_merges() {
        let (_, m) = learn_bpe(["abab ab"], 4).unwrap();
        assert_eq!(m.pairs[0], ("a".into(), "b".into()));

        let mut corpus = Vec::new();
        for (w, n) in [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)] {
            for _ in 0..n {
                corpus.push(w);
            }
        }
        let line = corpus.join(" ");
        let base = 1 + "lowernstid".chars().count();
        let (_, m) = learn_bpe([line.as_str()], base + 1).unwrap();
        assert_eq!(m.pairs, vec![("e".to_string(), "s".to_string())]);
    }

    #[test]
    fn target_at_alphabet_size_learns_nothing() {
        let (v, m) = learn_bpe(["abc cab"], 4).unwrap();
        assert!(m.is_empty());
        assert_eq!(v.len(), 4 + 4);
        assert!(learn_bpe(["abc"], 2).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_char_vocab(["a b\tc"], 10).unwrap();
        let back = Vocabulary::from_file_string(VocabKind::Char, &v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_file_string(VocabKind::Char, "a\nb\n").is_err());
        let m = MergeList { pairs: vec![("a".into(), "b".into()), ("\u{2581}".into(), "ab".into())] };
        assert_eq!(MergeList::from_file_string(&m.to_file_string()).unwrap(), m);
    }

    #[test]
    fn compression_rate_examples() {
        assert!((compression_rate(&[20], &[4]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(compression_rate(&[7, 3], &[7, 3]).unwrap(), 1.0);
        assert!(compression_rate(&[0], &[1]).is_err());
        assert!(compression_rate(&[1, 2], &[1]).is_err());
        // "low lower" -> ▁low | ▁low er : 9 chars, 3 fragments
        assert!((compression_rate(&[9], &[3]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
