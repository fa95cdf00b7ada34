//! Synthetic parallel corpora for convergence and tokenization experiments.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenize::Vocabulary;
use crate::train::Pair;

/// Source/target sentence pairs as text.
#[derive(Clone, Debug, Default)]
pub struct TextCorpus {
    pub train: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

impl TextCorpus {
    /// Every side of every training pair, for vocabulary building.
    pub fn train_lines(&self) -> impl Iterator<Item = &str> {
        self.train.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()])
    }
}

pub fn encode_pairs(vocab: &Vocabulary, pairs: &[(String, String)]) -> Vec<Pair> {
    pairs.iter().map(|(s, t)| Pair { src: vocab.encode(s), tgt: vocab.encode(t) }).collect()
}

/// Strings over the first `alphabet` lowercase letters with uniform length
/// in `min_len..=max_len`; the target is the source reversed. Test strings
/// never occur in the training set.
pub fn reversal_task(alphabet: usize, min_len: usize, max_len: usize, n_train: usize, n_test: usize, seed: u64) -> TextCorpus {
    assert!((1..=26).contains(&alphabet) && min_len >= 1 && min_len <= max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = ('a'..='z').take(alphabet).collect();
    let mut seen = HashSet::new();
    let mut draw = |rng: &mut ChaCha8Rng| loop {
        let len = rng.gen_range(min_len..=max_len);
        let s: String = (0..len).map(|_| letters[rng.gen_range(0..alphabet)]).collect();
        if seen.insert(s.clone()) {
            let r: String = s.chars().rev().collect();
            return (s, r);
        }
    };
    let train = (0..n_train).map(|_| draw(&mut rng)).collect();
    let test = (0..n_test).map(|_| draw(&mut rng)).collect();
    TextCorpus { train, test }
}

const CONSONANTS: [char; 10] = ['k', 't', 'm', 'n', 's', 'l', 'r', 'p', 'd', 'b'];
const BACK: [char; 3] = ['a', 'o', 'u'];
const FRONT: [char; 2] = ['e', 'i'];

/// Suffix slots in fixed order. Each slot is empty or one feature; the
/// vowel of every suffix harmonizes with the stem's last vowel.
const SLOTS: [&[(&str, &str, &str)]; 3] = [
    // (source tag, back form, front form)
    &[("PL", "lar", "ler")],
    &[("MY", "um", "im"), ("YOUR", "un", "in")],
    &[("IN", "da", "de"), ("FROM", "dan", "den"), ("TO", "ga", "ge"), ("OBJ", "u", "i")],
];

fn stem(rng: &mut ChaCha8Rng) -> String {
    let front = rng.gen::<bool>();
    let syllables = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(*CONSONANTS.choose(rng).expect("nonempty"));
        let v = if front { *FRONT.choose(rng).expect("nonempty") } else { *BACK.choose(rng).expect("nonempty") };
        s.push(v);
    }
    if rng.gen_bool(0.3) {
        s.push(*CONSONANTS.choose(rng).expect("nonempty"));
    }
    s
}

fn is_front(stem: &str) -> bool {
    stem.chars().rev().find(|c| BACK.contains(c) || FRONT.contains(c)).is_some_and(|c| FRONT.contains(&c))
}

/// All suffix combinations as per-slot choices (`None` = slot empty).
fn combos() -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for slot in SLOTS {
        let mut next = Vec::new();
        for c in &out {
            for choice in std::iter::once(None).chain((0..slot.len()).map(Some)) {
                let mut c2 = c.clone();
                c2.push(choice);
                next.push(c2);
            }
        }
        out = next;
    }
    out
}

fn inflect(stem: &str, combo: &[Option<usize>]) -> (String, String) {
    let front = is_front(stem);
    let mut src = stem.to_string();
    let mut tgt = stem.to_string();
    for (slot, choice) in SLOTS.iter().zip(combo) {
        if let Some(k) = choice {
            let (tag, back, fr) = slot[*k];
            src.push(' ');
            src.push_str(tag);
            tgt.push_str(if front { fr } else { back });
        }
    }
    (src, tgt)
}

/// A toy agglutinative language. Source words are a stem followed by
/// separate grammatical tags (`kotam PL MY IN`); the target fuses them into
/// one word with vowel-harmonized suffixes (`kotamlarumda`). Each stem is
/// seen with only part of the suffix combinations during training; test
/// sentences use only held-out stem/combination pairs.
pub fn morphology_task(stems: usize, max_words: usize, n_train: usize, n_test: usize, seed: u64) -> TextCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stem_set = HashSet::new();
    let mut lexicon = Vec::new();
    while lexicon.len() < stems {
        let s = stem(&mut rng);
        if stem_set.insert(s.clone()) {
            lexicon.push(s);
        }
    }
    let combos = combos();
    // Per stem: which combinations are held out for testing (about a quarter).
    let held: Vec<Vec<bool>> = lexicon.iter().map(|_| combos.iter().map(|_| rng.gen_bool(0.25)).collect()).collect();
    let word = |rng: &mut ChaCha8Rng, test: bool| loop {
        let s = rng.gen_range(0..lexicon.len());
        let c = rng.gen_range(0..combos.len());
        if held[s][c] == test {
            return inflect(&lexicon[s], &combos[c]);
        }
    };
    let sentence = |rng: &mut ChaCha8Rng, test: bool| {
        let n = rng.gen_range(1..=max_words);
        let words: Vec<(String, String)> = (0..n).map(|_| word(rng, test)).collect();
        let src: Vec<&str> = words.iter().map(|w| w.0.as_str()).collect();
        let tgt: Vec<&str> = words.iter().map(|w| w.1.as_str()).collect();
        // Word boundaries on the source side are marked so tags attach unambiguously.
        (src.join(" , "), tgt.join(" "))
    };
    let train = (0..n_train).map(|_| sentence(&mut rng, false)).collect();
    let test = (0..n_test).map(|_| sentence(&mut rng, true)).collect();
    TextCorpus { train, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reversal_shape() {
        let c = reversal_task(20, 5, 20, 300, 50, 3);
        assert_eq!(c.train.len(), 300);
        for (s, t) in c.train.iter().chain(&c.test) {
            assert!((5..=20).contains(&s.len()));
            assert!(s.chars().all(|ch| ('a'..='t').contains(&ch)));
            assert_eq!(s.chars().rev().collect::<String>(), *t);
        }
        let train: HashSet<_> = c.train.iter().collect();
        assert!(c.test.iter().all(|p| !train.contains(p)));
    }

    #[test]
    fn harmony_and_order() {
        assert_eq!(inflect("kota", &[Some(0), Some(0), Some(0)]), ("kota PL MY IN".into(), "kotalarumda".into()));
        assert_eq!(inflect("mesin", &[None, Some(1), Some(3)]), ("mesin YOUR OBJ".into(), "mesinini".into()));
        assert_eq!(combos().len(), 2 * 3 * 5);
    }

    #[test]
    fn morphology_is_deterministic() {
        let a = morphology_task(50, 2, 100, 20, 9);
        let b = morphology_task(50, 2, 100, 20, 9);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }
}
