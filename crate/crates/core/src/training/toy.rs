//! Synthetic tasks small enough to train in seconds.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MultiCorpus, TokenizedPair};
use crate::lang::{Direction, Lang};
use crate::subword::{LangVocab, Vocab};

/// Token-level task data.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub vocab: Vocab,
    pub languages: Vec<Lang>,
    pub pairs: Vec<TokenizedPair>,
    /// Target-side tokens of each language (specials excluded).
    pub target_tokens: BTreeMap<Lang, Vec<u32>>,
}

impl ToyData {
    /// Specials plus each language's own target tokens.
    pub fn lang_vocabs(&self) -> BTreeMap<Lang, LangVocab> {
        self.target_tokens
            .iter()
            .map(|(l, toks)| {
                let kept = self.vocab.special_ids().into_iter().chain(toks.iter().copied());
                (l.clone(), LangVocab::from_kept(l.clone(), kept, None))
            })
            .collect()
    }
}

fn random_seq(rng: &mut ChaCha8Rng, symbols: &[u32], len: &RangeInclusive<usize>) -> Vec<u32> {
    let n = rng.gen_range(len.clone());
    (0..n).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect()
}

/// Half the pairs copy the source (target language `cp`), half reverse it
/// (`rv`); the language code tells the model which.
pub fn copy_reversal(n: usize, n_symbols: usize, len: RangeInclusive<usize>, seed: u64) -> ToyData {
    let languages = vec![Lang::new("cp"), Lang::new("rv")];
    let mut vocab = Vocab::with_specials(&languages);
    let symbols: Vec<u32> = (0..n_symbols).map(|i| vocab.push(&format!("s{i}"))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src_lang = Lang::new("sy");
    let pairs = (0..n)
        .map(|i| {
            let src = random_seq(&mut rng, &symbols, &len);
            let reverse = i % 2 == 1;
            let tgt = if reverse { src.iter().rev().copied().collect() } else { src.clone() };
            TokenizedPair { src_lang: src_lang.clone(), tgt_lang: languages[usize::from(reverse)].clone(), src, tgt }
        })
        .collect();
    let target_tokens = languages.iter().map(|l| (l.clone(), symbols.clone())).collect();
    ToyData { vocab, languages, pairs, target_tokens }
}

/// English-source task where each target language has its own token range:
/// a fixed per-language substitution of the source symbols, with every
/// second language also reversing the order.
pub fn multilingual(n_per_lang: usize, targets: &[&str], n_symbols: usize, len: RangeInclusive<usize>, seed: u64) -> ToyData {
    let languages: Vec<Lang> = targets.iter().map(|&l| Lang::new(l)).collect();
    let mut vocab = Vocab::with_specials(&languages);
    let en = Lang::english();
    let src_symbols: Vec<u32> = (0..n_symbols).map(|i| vocab.push(&format!("en{i}"))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target_tokens = BTreeMap::new();
    let mut pairs = Vec::new();
    for (k, lang) in languages.iter().enumerate() {
        let own: Vec<u32> = (0..n_symbols).map(|i| vocab.push(&format!("{lang}{i}"))).collect();
        let mut perm: Vec<usize> = (0..n_symbols).collect();
        perm.shuffle(&mut rng);
        let map: BTreeMap<u32, u32> = src_symbols.iter().zip(&perm).map(|(&s, &p)| (s, own[p])).collect();
        for _ in 0..n_per_lang {
            let src = random_seq(&mut rng, &src_symbols, &len);
            let mut tgt: Vec<u32> = src.iter().map(|s| map[s]).collect();
            if k % 2 == 1 {
                tgt.reverse();
            }
            pairs.push(TokenizedPair { src_lang: en.clone(), tgt_lang: lang.clone(), src, tgt });
        }
        target_tokens.insert(lang.clone(), own);
    }
    ToyData { vocab, languages, pairs, target_tokens }
}

/// A text "language": a letter substitution plus a word suffix applied to
/// English words.
#[derive(Debug, Clone)]
struct Cipher {
    map: BTreeMap<char, char>,
    suffix: String,
}

impl Cipher {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let letters: Vec<char> = ('a'..='z').collect();
        let mut shuffled = letters.clone();
        shuffled.shuffle(rng);
        let suffix: String = (0..rng.gen_range(1..=2)).map(|_| letters[rng.gen_range(0..26)]).collect();
        Cipher { map: letters.into_iter().zip(shuffled).collect(), suffix }
    }

    fn apply(&self, sentence: &str) -> String {
        sentence
            .split_whitespace()
            .map(|w| {
                let mut s: String = w.chars().map(|c| *self.map.get(&c).unwrap_or(&c)).collect();
                s.push_str(&self.suffix);
                s
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Text corpora for end-to-end runs.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// English-centric training data, `xx-en` directions; each language
    /// covers a random subset of a shared English pool, so sentences overlap
    /// across languages.
    pub train: MultiCorpus,
    /// Multi-way parallel test set, stored as every ordered direction.
    pub test: MultiCorpus,
}

pub fn synth_corpus(languages: &[Lang], n_train: usize, n_test: usize, coverage: f64, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = ('a'..='z').collect();
    let lexicon: Vec<String> = (0..60)
        .map(|_| (0..rng.gen_range(2..=6)).map(|_| letters[rng.gen_range(0..26)]).collect())
        .collect();
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(3..=8)).map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str()).collect::<Vec<_>>().join(" ")
    };
    let pool: Vec<String> = (0..n_train).map(|_| sentence(&mut rng)).collect();
    let tests: Vec<String> = (0..n_test).map(|_| sentence(&mut rng)).collect();
    let en = Lang::english();
    let others: Vec<Lang> = languages.iter().filter(|l| !l.is_english()).cloned().collect();
    let ciphers: BTreeMap<Lang, Cipher> = others.iter().map(|l| (l.clone(), Cipher::new(&mut rng))).collect();
    let render = |lang: &Lang, s: &str| if lang.is_english() { s.to_string() } else { ciphers[lang].apply(s) };

    let mut train = MultiCorpus::new();
    for l in &others {
        let lines: Vec<(String, String)> =
            pool.iter().filter(|_| rng.gen_bool(coverage)).map(|s| (render(l, s), s.clone())).collect();
        train.insert(Direction::new(l.clone(), en.clone()), lines);
    }
    let mut test = MultiCorpus::new();
    let mut all = others.clone();
    all.push(en);
    all.sort();
    for a in &all {
        for b in &all {
            if a != b {
                test.insert(Direction::new(a.clone(), b.clone()), tests.iter().map(|s| (render(a, s), render(b, s))).collect());
            }
        }
    }
    SynthCorpus { train, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_reversal_targets() {
        let d = copy_reversal(10, 5, 2..=4, 1);
        for p in &d.pairs {
            if p.tgt_lang.as_str() == "cp" {
                assert_eq!(p.src, p.tgt);
            } else {
                assert_eq!(p.src.iter().rev().copied().collect::<Vec<_>>(), p.tgt);
            }
        }
        assert_eq!(d.vocab.len(), 4 + 2 + 5);
    }

    #[test]
    fn multilingual_targets_stay_in_their_range() {
        let d = multilingual(20, &["de", "fr", "it"], 6, 1..=5, 2);
        let vocabs = d.lang_vocabs();
        for p in &d.pairs {
            assert!(p.tgt.iter().all(|&t| vocabs[&p.tgt_lang].contains(t)));
            for (l, v) in &vocabs {
                if *l != p.tgt_lang {
                    assert!(p.tgt.iter().all(|&t| !v.contains(t)));
                }
            }
        }
    }

    #[test]
    fn synthetic_text_is_seeded_and_overlapping() {
        let langs = [Lang::new("de"), Lang::new("fr"), Lang::english()];
        let a = synth_corpus(&langs, 50, 5, 0.7, 3);
        let b = synth_corpus(&langs, 50, 5, 0.7, 3);
        assert_eq!(a.train.sizes(), b.train.sizes());
        assert_eq!(a.test.directions().count(), 6);
        let mp = crate::corpus::build_multiparallel(&a.train);
        assert!(mp.size(&Direction::new("de", "fr")) + mp.size(&Direction::new("fr", "de")) > 0);
    }
}
