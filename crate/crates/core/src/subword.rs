//! Shared BPE vocabulary learning and application, plus per-language target
//! vocabulary filtering.
//!
//! Subwords carry an end-of-word marker (`</w>`) on the final piece of each
//! word, so `"aaab"` under a single `a a` merge becomes `["aa", "a", "b</w>"]`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lang::Lang;

pub const END_OF_WORD: &str = "</w>";
pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Global token inventory: specials first (PAD, BOS, EOS, UNK, then one
/// language code per language), then characters and merged subwords.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lang_codes: BTreeMap<Lang, u32>,
}

impl Vocab {
    pub fn with_specials(languages: &[Lang]) -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new(), lang_codes: BTreeMap::new() };
        for t in [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            v.push(t);
        }
        let mut langs = languages.to_vec();
        langs.sort();
        langs.dedup();
        for l in langs {
            let id = v.push(&l.code_token());
            v.lang_codes.insert(l, id);
        }
        v
    }

    /// Append a token if absent; returns its id.
    pub fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn lang_code(&self, lang: &Lang) -> Option<u32> {
        self.lang_codes.get(lang).copied()
    }

    pub fn languages(&self) -> impl Iterator<Item = &Lang> {
        self.lang_codes.keys()
    }

    /// PAD, BOS, EOS, UNK and every language code.
    pub fn special_ids(&self) -> Vec<u32> {
        let mut ids = vec![PAD, BOS, EOS, UNK];
        ids.extend(self.lang_codes.values());
        ids
    }

    pub fn is_special(&self, id: u32) -> bool {
        id <= UNK || self.lang_codes.values().any(|&c| c == id)
    }

    /// `token<TAB>index` per line.
    pub fn to_file_string(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, idx) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::format("vocab file", format!("line {}: missing tab", n + 1)))?;
            let idx: u32 = idx
                .parse()
                .map_err(|_| Error::format("vocab file", format!("line {}: bad index `{idx}`", n + 1)))?;
            entries.push((idx, tok.to_string()));
        }
        entries.sort();
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new(), lang_codes: BTreeMap::new() };
        for (expected, (idx, tok)) in entries.into_iter().enumerate() {
            if idx as usize != expected {
                return Err(Error::format("vocab file", format!("indices not dense at {idx}")));
            }
            v.push(&tok);
        }
        let fixed = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        for (i, t) in fixed.iter().enumerate() {
            if v.token(i as u32) != Some(t) {
                return Err(Error::format("vocab file", format!("index {i} must be {t}")));
            }
        }
        for (i, tok) in v.tokens.iter().enumerate() {
            if let Some(code) = tok.strip_prefix("__").and_then(|t| t.strip_suffix("__")) {
                if !code.is_empty() {
                    v.lang_codes.insert(Lang::new(code), i as u32);
                }
            }
        }
        Ok(v)
    }
}

type Pair = (String, String);

/// Symbols of a word before any merge.
fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == n { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

/// Character of a single-character token (`"a"` or `"a</w>"`).
fn single_char(token: &str) -> Option<char> {
    let body = token.strip_suffix(END_OF_WORD).unwrap_or(token);
    let mut it = body.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

/// Ordered merge rules plus the shared vocabulary they induce.
#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
    /// Merged token -> the earliest merge producing it.
    reverse: HashMap<String, Pair>,
    vocab: Vocab,
}

impl BpeModel {
    fn from_parts(merges: Vec<Pair>, vocab: Vocab) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let mut reverse = HashMap::new();
        for (l, r) in &merges {
            reverse.entry(format!("{l}{r}")).or_insert_with(|| (l.clone(), r.clone()));
        }
        BpeModel { merges, ranks, reverse, vocab }
    }

    /// Greedy pair-frequency BPE over the whitespace-split `corpus`.
    ///
    /// Ties between equally frequent pairs go to the lexicographically
    /// smallest pair. Learning stops early once every word is a single symbol.
    pub fn learn<'a>(corpus: impl IntoIterator<Item = &'a str>, num_merges: usize, languages: &[Lang]) -> Self {
        let mut word_counts: BTreeMap<&str, i64> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, i64)> = word_counts.iter().map(|(w, &c)| (initial_symbols(w), c)).collect();

        let mut vocab = Vocab::with_specials(languages);
        let chars: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        for c in &chars {
            vocab.push(&c.to_string());
            vocab.push(&format!("{c}{END_OF_WORD}"));
        }

        let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
        let mut pair_words: HashMap<Pair, HashSet<usize>> = HashMap::new();
        for (wi, (syms, count)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_default() += count;
                pair_words.entry(key).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<Pair>)> =
            pair_counts.iter().map(|(p, &c)| (c, Reverse(p.clone()))).collect();

        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let best = loop {
                match heap.pop() {
                    None => break None,
                    Some((c, Reverse(p))) => {
                        if c > 0 && pair_counts.get(&p) == Some(&c) {
                            break Some(p);
                        }
                    }
                }
            };
            let Some(best) = best else { break };
            let merged = format!("{}{}", best.0, best.1);
            let affected: Vec<usize> = pair_words.get(&best).map(|s| s.iter().copied().collect()).unwrap_or_default();
            let mut touched: HashSet<Pair> = HashSet::new();
            for wi in affected {
                let (syms, count) = &mut words[wi];
                if !syms.windows(2).any(|p| p[0] == best.0 && p[1] == best.1) {
                    continue;
                }
                for p in syms.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    *pair_counts.get_mut(&key).expect("counted pair") -= *count;
                    touched.insert(key);
                }
                *syms = merge_pair(syms, &best, &merged);
                for p in syms.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    *pair_counts.entry(key.clone()).or_default() += *count;
                    pair_words.entry(key.clone()).or_default().insert(wi);
                    touched.insert(key);
                }
            }
            for key in touched {
                let c = pair_counts[&key];
                if c > 0 {
                    heap.push((c, Reverse(key)));
                }
            }
            vocab.push(&merged);
            merges.push(best);
        }
        Self::from_parts(merges, vocab)
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Segment one word, applying merges in learned order. Characters never
    /// seen while learning become [`UNK_TOKEN`].
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min();
            let Some((_, l, r)) = best else { break };
            let merged = format!("{l}{r}");
            syms = merge_pair(&syms, &(l, r), &merged);
        }
        syms.into_iter()
            .map(|s| if self.vocab.id(&s).is_some() { s } else { UNK_TOKEN.to_string() })
            .collect()
    }

    /// Segment a word so that every piece is kept by `vocab`: merged pieces
    /// outside the vocabulary are split back along their merge history,
    /// single characters outside it become [`UNK_TOKEN`].
    pub fn apply_constrained(&self, word: &str, vocab: &LangVocab) -> Vec<String> {
        let mut out = Vec::new();
        for tok in self.apply(word) {
            self.split_until_kept(&tok, vocab, &mut out);
        }
        out
    }

    fn split_until_kept(&self, tok: &str, vocab: &LangVocab, out: &mut Vec<String>) {
        match self.vocab.id(tok) {
            Some(id) if vocab.contains(id) => out.push(tok.to_string()),
            _ => match self.reverse.get(tok) {
                Some((l, r)) => {
                    self.split_until_kept(l, vocab, out);
                    self.split_until_kept(r, vocab, out);
                }
                None => out.push(UNK_TOKEN.to_string()),
            },
        }
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<String> {
        sentence.split_whitespace().flat_map(|w| self.apply(w)).collect()
    }

    pub fn tokenize_constrained(&self, sentence: &str, vocab: &LangVocab) -> Vec<String> {
        sentence.split_whitespace().flat_map(|w| self.apply_constrained(w, vocab)).collect()
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.vocab.id(t).unwrap_or(UNK)).collect()
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        self.ids(&self.tokenize(sentence))
    }

    /// Ids back to text. Specials other than UNK are dropped; UNK is rendered
    /// as a standalone word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let tokens: Vec<&str> = ids
            .iter()
            .filter(|&&id| id == UNK || !self.vocab.is_special(id))
            .filter_map(|&id| self.vocab.token(id))
            .collect();
        detokenize(&tokens)
    }

    /// One merge per line, `left right`, in learning order.
    pub fn merges_to_string(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect()
    }

    pub fn from_strings(merges: &str, vocab: &str) -> Result<Self> {
        let vocab = Vocab::parse(vocab)?;
        let mut rules = Vec::new();
        for (n, line) in merges.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => rules.push((l.to_string(), r.to_string())),
                _ => return Err(Error::format("merge file", format!("line {}: expected `left right`", n + 1))),
            }
        }
        Ok(Self::from_parts(rules, vocab))
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        fs::write(merges_path, self.merges_to_string()).map_err(|e| Error::io(merges_path, e))?;
        fs::write(vocab_path, self.vocab.to_file_string()).map_err(|e| Error::io(vocab_path, e))
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let m = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let v = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        Self::from_strings(&m, &v)
    }
}

fn merge_pair(syms: &[String], pair: &Pair, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Join subword strings into text following the end-of-word convention.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if t == UNK_TOKEN {
            out.push_str(UNK_TOKEN);
            out.push(' ');
        } else if let Some(body) = t.strip_suffix(END_OF_WORD) {
            out.push_str(body);
            out.push(' ');
        } else {
            out.push_str(t);
        }
    }
    out.trim_end().to_string()
}

/// Wordpiece and character occurrence counts over one language's data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FreqTable {
    pub language: Option<Lang>,
    pub wordpiece_counts: BTreeMap<String, u64>,
    pub char_counts: BTreeMap<char, u64>,
}

/// Tokenize `corpus` with the shared model and count tokens and raw
/// (non-whitespace) characters.
pub fn count_frequencies<'a>(model: &BpeModel, corpus: impl IntoIterator<Item = &'a str>, language: &Lang) -> FreqTable {
    let mut table = FreqTable { language: Some(language.clone()), ..Default::default() };
    for line in corpus {
        for c in line.chars().filter(|c| !c.is_whitespace()) {
            *table.char_counts.entry(c).or_default() += 1;
        }
        for tok in model.tokenize(line) {
            *table.wordpiece_counts.entry(tok).or_default() += 1;
        }
    }
    table
}

impl FreqTable {
    pub fn merge(&mut self, other: &FreqTable) {
        for (k, v) in &other.wordpiece_counts {
            *self.wordpiece_counts.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.char_counts {
            *self.char_counts.entry(*k).or_default() += v;
        }
    }
}

/// Filtering thresholds: minimum frequency `K` and optional wordpiece cap `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    pub min_freq: u64,
    pub max_wordpieces: Option<usize>,
}

/// Per-language subset of the global vocabulary with dense filtered ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LangVocab {
    pub language: Lang,
    filtered_to_global: Vec<u32>,
    global_to_filtered: HashMap<u32, u32>,
    pub params: Option<FilterParams>,
}

impl LangVocab {
    pub fn from_kept(language: Lang, kept: impl IntoIterator<Item = u32>, params: Option<FilterParams>) -> Self {
        let set: BTreeSet<u32> = kept.into_iter().collect();
        let filtered_to_global: Vec<u32> = set.into_iter().collect();
        let global_to_filtered = filtered_to_global.iter().enumerate().map(|(i, &g)| (g, i as u32)).collect();
        LangVocab { language, filtered_to_global, global_to_filtered, params }
    }

    /// Keep every token of `vocab`.
    pub fn full(language: Lang, vocab: &Vocab) -> Self {
        Self::from_kept(language, 0..vocab.len() as u32, None)
    }

    pub fn len(&self) -> usize {
        self.filtered_to_global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered_to_global.is_empty()
    }

    pub fn contains(&self, global: u32) -> bool {
        self.global_to_filtered.contains_key(&global)
    }

    pub fn kept(&self) -> &[u32] {
        &self.filtered_to_global
    }

    pub fn filtered_to_global(&self, filtered: u32) -> Option<u32> {
        self.filtered_to_global.get(filtered as usize).copied()
    }

    pub fn global_to_filtered(&self, global: u32) -> Option<u32> {
        self.global_to_filtered.get(&global).copied()
    }

    /// Fraction of `ids` not kept by this vocabulary.
    pub fn oov_rate(&self, ids: &[u32]) -> f64 {
        if ids.is_empty() {
            return 0.0;
        }
        ids.iter().filter(|&&id| !self.contains(id) || id == UNK).count() as f64 / ids.len() as f64
    }

    /// Language id header line, then one kept global index per line.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{}\n", self.language);
        for g in &self.filtered_to_global {
            s.push_str(&format!("{g}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let lang = lines
            .next()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::format("lang-vocab file", "missing language header"))?;
        let mut kept = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            kept.push(
                line.trim()
                    .parse()
                    .map_err(|_| Error::format("lang-vocab file", format!("line {}: bad index", n + 2)))?,
            );
        }
        Ok(Self::from_kept(Lang::new(lang), kept, None))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Build the kept set for one language: specials, every character seen at
/// least `min_freq` times, and the `max_wordpieces` most frequent multi-char
/// wordpieces seen at least `min_freq` times (ties by global index).
pub fn build_lang_vocab(model: &BpeModel, freqs: &FreqTable, min_freq: u64, max_wordpieces: Option<usize>) -> LangVocab {
    let vocab = model.vocab();
    let mut kept: BTreeSet<u32> = vocab.special_ids().into_iter().collect();
    for (&c, &n) in &freqs.char_counts {
        if n >= min_freq {
            for tok in [c.to_string(), format!("{c}{END_OF_WORD}")] {
                if let Some(id) = vocab.id(&tok) {
                    kept.insert(id);
                }
            }
        }
    }
    let mut pieces: Vec<(u64, u32)> = freqs
        .wordpiece_counts
        .iter()
        .filter(|(tok, &n)| n >= min_freq && single_char(tok).is_none())
        .filter_map(|(tok, &n)| vocab.id(tok).filter(|&id| !vocab.is_special(id)).map(|id| (n, id)))
        .collect();
    pieces.sort_by_key(|&(n, id)| (Reverse(n), id));
    let cap = max_wordpieces.unwrap_or(usize::MAX);
    kept.extend(pieces.into_iter().take(cap).map(|(_, id)| id));
    let language = freqs.language.clone().unwrap_or_else(|| Lang::new("und"));
    LangVocab::from_kept(language, kept, Some(FilterParams { min_freq, max_wordpieces }))
}
