//! Parallel data: storage, temperature sampling of language pairs, token
//! batching, language-code insertion and synthetic source noise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::subword::{Vocab, BOS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub src: String,
    pub tgt: String,
}

/// Line-aligned sentence pairs keyed by direction. A direction stored as
/// `a-b` also serves `b-a`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MultiCorpus {
    data: BTreeMap<Direction, Vec<(String, String)>>,
}

impl MultiCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dir: Direction, lines: Vec<(String, String)>) {
        self.data.insert(dir, lines);
    }

    pub fn push(&mut self, dir: &Direction, src: impl Into<String>, tgt: impl Into<String>) {
        self.data.entry(dir.clone()).or_default().push((src.into(), tgt.into()));
    }

    pub fn directions(&self) -> impl Iterator<Item = &Direction> {
        self.data.keys()
    }

    pub fn languages(&self) -> BTreeSet<Lang> {
        self.data.keys().flat_map(|d| [d.src.clone(), d.tgt.clone()]).collect()
    }

    /// Lines oriented as `dir`, flipping a stored reverse direction.
    pub fn lines(&self, dir: &Direction) -> Option<Vec<(&str, &str)>> {
        if let Some(v) = self.data.get(dir) {
            return Some(v.iter().map(|(s, t)| (s.as_str(), t.as_str())).collect());
        }
        self.data.get(&dir.reversed()).map(|v| v.iter().map(|(s, t)| (t.as_str(), s.as_str())).collect())
    }

    /// D_k: line count for the pair, in whichever orientation is stored.
    pub fn size(&self, dir: &Direction) -> usize {
        self.data.get(dir).or_else(|| self.data.get(&dir.reversed())).map_or(0, Vec::len)
    }

    pub fn sizes(&self) -> BTreeMap<Direction, usize> {
        self.data.iter().map(|(d, v)| (d.clone(), v.len())).collect()
    }

    pub fn total_lines(&self) -> usize {
        self.data.values().map(Vec::len).sum()
    }

    /// Every stored line as a pair in its stored orientation.
    pub fn pairs(&self) -> impl Iterator<Item = SentencePair> + '_ {
        self.data.iter().flat_map(|(d, v)| {
            v.iter().map(move |(s, t)| SentencePair {
                src_lang: d.src.clone(),
                tgt_lang: d.tgt.clone(),
                src: s.clone(),
                tgt: t.clone(),
            })
        })
    }

    /// Languages paired with English, with their line counts.
    pub fn english_pool(&self) -> Vec<(Lang, usize)> {
        let en = Lang::english();
        let mut pool: BTreeMap<Lang, usize> = BTreeMap::new();
        for (d, v) in &self.data {
            let other = if d.tgt == en { &d.src } else if d.src == en { &d.tgt } else { continue };
            let e = pool.entry(other.clone()).or_default();
            *e = (*e).max(v.len());
        }
        pool.into_iter().collect()
    }

    /// Both orientations of every stored pair, each weighted by its size.
    pub fn all_directions(&self) -> Vec<(Direction, usize)> {
        let mut out: BTreeMap<Direction, usize> = BTreeMap::new();
        for (d, v) in &self.data {
            for dd in [d.clone(), d.reversed()] {
                let e = out.entry(dd).or_default();
                *e = (*e).max(v.len());
            }
        }
        out.into_iter().collect()
    }

    /// Read `{prefix}.{src}-{tgt}.{src}` / `.{tgt}` file pairs from `dir`.
    pub fn load_dir(dir: &Path, prefix: &str) -> Result<Self> {
        let mut corpus = MultiCorpus::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names: Vec<String> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
        names.sort();
        for name in names {
            let Some(rest) = name.strip_prefix(&format!("{prefix}.")) else { continue };
            let Some((dir_name, lang)) = rest.rsplit_once('.') else { continue };
            let Some(direction) = Direction::parse(dir_name) else { continue };
            if lang != direction.src.as_str() {
                continue;
            }
            let src_path = dir.join(&name);
            let tgt_path = dir.join(format!("{prefix}.{dir_name}.{}", direction.tgt));
            let src = read_lines(&src_path)?;
            let tgt = read_lines(&tgt_path)?;
            if src.len() != tgt.len() {
                return Err(Error::Data(format!(
                    "{}: {} source lines but {} target lines",
                    dir_name,
                    src.len(),
                    tgt.len()
                )));
            }
            corpus.insert(direction, src.into_iter().zip(tgt).collect());
        }
        Ok(corpus)
    }

    pub fn save_dir(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (d, lines) in &self.data {
            for (lang, side) in [(&d.src, 0), (&d.tgt, 1)] {
                let path = dir.join(format!("{prefix}.{d}.{lang}"));
                let text: String = lines
                    .iter()
                    .map(|(s, t)| format!("{}\n", if side == 0 { s } else { t }))
                    .collect();
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub english_centric: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 5.0, english_centric: true }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// p_k = D_k^(1/T) / sum_i D_i^(1/T).
pub fn temperature_probs(sizes: &[usize], temperature: f64) -> Vec<f64> {
    let w: Vec<f64> = sizes.iter().map(|&d| (d as f64).powf(1.0 / temperature)).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// Probability of each language being the target in English-centric mode:
/// English gets 0.5, every other language 0.5·p_k.
pub fn english_centric_target_probs(pool: &[(Lang, usize)], temperature: f64) -> Vec<(Lang, f64)> {
    let sizes: Vec<usize> = pool.iter().map(|(_, d)| *d).collect();
    let p = temperature_probs(&sizes, temperature);
    let mut out = vec![(Lang::english(), 0.5)];
    out.extend(pool.iter().zip(p).map(|((l, _), p)| (l.clone(), 0.5 * p)));
    out
}

/// Draws training directions according to a [`SamplingConfig`].
#[derive(Debug, Clone)]
pub struct PairSampler {
    choices: Vec<Direction>,
    dist: WeightedIndex<f64>,
    english_centric: bool,
}

impl PairSampler {
    pub fn new(corpus: &MultiCorpus, cfg: &SamplingConfig) -> Result<Self> {
        cfg.validate()?;
        let (choices, sizes): (Vec<Direction>, Vec<usize>) = if cfg.english_centric {
            let en = Lang::english();
            corpus.english_pool().into_iter().map(|(l, d)| (Direction::new(l, en.clone()), d)).unzip()
        } else {
            corpus.all_directions().into_iter().unzip()
        };
        if sizes.iter().all(|&d| d == 0) {
            return Err(Error::Data("no direction with data to sample from".into()));
        }
        let probs = temperature_probs(&sizes, cfg.temperature);
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Config(e.to_string()))?;
        Ok(PairSampler { choices, dist, english_centric: cfg.english_centric })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Direction {
        let d = self.choices[self.dist.sample(rng)].clone();
        if self.english_centric && rng.gen_bool(0.5) {
            d.reversed()
        } else {
            d
        }
    }

    /// Draw a direction, then a uniformly random line from it.
    pub fn sample_pair<R: Rng>(&self, corpus: &MultiCorpus, rng: &mut R) -> SentencePair {
        let dir = self.sample(rng);
        let lines = corpus.lines(&dir).expect("sampled direction exists");
        let (s, t) = lines[rng.gen_range(0..lines.len())];
        SentencePair { src_lang: dir.src, tgt_lang: dir.tgt, src: s.into(), tgt: t.into() }
    }
}

/// Anything with a token length and a target language can be batched.
pub trait BatchItem {
    fn src_len(&self) -> usize;
    fn tgt_len(&self) -> usize;
    fn tgt_lang(&self) -> &Lang;
    fn len(&self) -> usize {
        self.src_len().max(self.tgt_len())
    }
}

/// A sentence pair after subword encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl BatchItem for TokenizedPair {
    fn src_len(&self) -> usize {
        self.src.len()
    }
    fn tgt_len(&self) -> usize {
        self.tgt.len()
    }
    fn tgt_lang(&self) -> &Lang {
        &self.tgt_lang
    }
}

pub const DEFAULT_BUFFER: usize = 100_000;
pub const DEFAULT_HOMOGENEOUS_BUFFER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub max_tokens: usize,
    pub homogeneous: bool,
    pub buffer: usize,
}

impl BatchConfig {
    pub fn new(max_tokens: usize, homogeneous: bool) -> Self {
        let buffer = if homogeneous { DEFAULT_HOMOGENEOUS_BUFFER } else { DEFAULT_BUFFER };
        BatchConfig { max_tokens, homogeneous, buffer }
    }
}

#[derive(Debug, Clone)]
pub struct Batches<T> {
    pub batches: Vec<Vec<T>>,
    /// Items longer than `max_tokens`, dropped.
    pub skipped: Vec<T>,
}

/// Padded token cost of a batch: rows × longest side.
pub fn batch_tokens<T: BatchItem>(batch: &[T]) -> usize {
    batch.len() * batch.iter().map(BatchItem::len).max().unwrap_or(0)
}

/// Shuffle, take buffers, sort each buffer by length (grouped by target
/// language when homogeneous) and cut into batches whose padded size stays
/// within `max_tokens`. Batch order is shuffled at the end.
pub fn make_batches<T: BatchItem, R: Rng>(mut items: Vec<T>, cfg: &BatchConfig, rng: &mut R) -> Batches<T> {
    items.shuffle(rng);
    let mut skipped = Vec::new();
    let mut batches = Vec::new();
    let buffer = cfg.buffer.max(1);
    let mut iter = items.into_iter().peekable();
    while iter.peek().is_some() {
        let mut chunk: Vec<T> = Vec::with_capacity(buffer.min(1 << 16));
        for item in iter.by_ref() {
            if item.len() > cfg.max_tokens {
                skipped.push(item);
            } else {
                chunk.push(item);
            }
            if chunk.len() == buffer {
                break;
            }
        }
        let groups: Vec<Vec<T>> = if cfg.homogeneous {
            let mut by_lang: BTreeMap<Lang, Vec<T>> = BTreeMap::new();
            for item in chunk {
                by_lang.entry(item.tgt_lang().clone()).or_default().push(item);
            }
            by_lang.into_values().collect()
        } else {
            vec![chunk]
        };
        for mut group in groups {
            group.sort_by_key(|i| (i.len(), i.src_len()));
            let mut current: Vec<T> = Vec::new();
            let mut longest = 0;
            for item in group {
                let l = longest.max(item.len());
                if !current.is_empty() && (current.len() + 1) * l > cfg.max_tokens {
                    batches.push(std::mem::take(&mut current));
                    longest = 0;
                }
                longest = longest.max(item.len());
                current.push(item);
            }
            if !current.is_empty() {
                batches.push(current);
            }
        }
    }
    batches.shuffle(rng);
    Batches { batches, skipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodePosition {
    Encoder,
    Decoder,
}

/// Returns the source to feed the encoder and the decoder start token.
pub fn insert_language_code(src: &[u32], tgt_lang: &Lang, position: CodePosition, vocab: &Vocab) -> Result<(Vec<u32>, u32)> {
    let code = vocab.lang_code(tgt_lang).ok_or_else(|| Error::UnknownLanguage(tgt_lang.to_string()))?;
    Ok(match position {
        CodePosition::Encoder => {
            let mut s = Vec::with_capacity(src.len() + 1);
            s.push(code);
            s.extend_from_slice(src);
            (s, BOS)
        }
        CodePosition::Decoder => (src.to_vec(), code),
    })
}

/// Drop a leading language code if present.
pub fn strip_language_code<'a>(src: &'a [u32], vocab: &Vocab) -> &'a [u32] {
    match src.first() {
        Some(&f) if vocab.languages().any(|l| vocab.lang_code(l) == Some(f)) => &src[1..],
        _ => src,
    }
}

/// Inserted by [`noise_unk`]; not part of any training alphabet.
pub const UNK_CHAR: char = '\u{FFFD}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnkPlacement {
    Begin,
    Middle,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharOpKind {
    Delete,
    Insert,
    Swap,
    Substitute,
}

/// One applied noise edit, in character positions of the string it was
/// applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseOp {
    pub kind: NoiseKind,
    pub position: usize,
    pub ch: Option<char>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Unk(UnkPlacement),
    Char(CharOpKind),
}

/// Insert [`UNK_CHAR`] at the beginning, a random interior position, or the
/// end, each with probability 1/3. Sentences under two characters have no
/// interior, so "middle" falls back to the end.
pub fn noise_unk<R: Rng>(sentence: &str, rng: &mut R) -> (String, NoiseOp) {
    let mut chars: Vec<char> = sentence.chars().collect();
    let placement = [UnkPlacement::Begin, UnkPlacement::Middle, UnkPlacement::End][rng.gen_range(0..3)];
    let n = chars.len();
    let position = match placement {
        UnkPlacement::Begin => 0,
        UnkPlacement::Middle if n >= 2 => rng.gen_range(1..n),
        _ => n,
    };
    chars.insert(position, UNK_CHAR);
    (chars.into_iter().collect(), NoiseOp { kind: NoiseKind::Unk(placement), position, ch: Some(UNK_CHAR) })
}

/// Apply one character edit in place. Returns false when the edit is
/// impossible at that length (delete on empty, swap under two chars).
pub fn apply_char_op(chars: &mut Vec<char>, kind: CharOpKind, position: usize, ch: char) -> bool {
    match kind {
        CharOpKind::Delete if position < chars.len() => {
            chars.remove(position);
        }
        CharOpKind::Insert if position <= chars.len() => chars.insert(position, ch),
        CharOpKind::Swap if position + 1 < chars.len() => chars.swap(position, position + 1),
        CharOpKind::Substitute if position < chars.len() => chars[position] = ch,
        _ => return false,
    }
    true
}

/// Apply `n_ops` random character edits (at most one per input character).
/// Inserted and substituted characters come from the sentence's own alphabet.
/// An op kind that is impossible at the current length is redrawn.
pub fn noise_char<R: Rng>(sentence: &str, n_ops: usize, rng: &mut R) -> (String, Vec<NoiseOp>) {
    let mut chars: Vec<char> = sentence.chars().collect();
    let alphabet: Vec<char> = chars.iter().copied().filter(|c| !c.is_whitespace()).collect::<BTreeSet<_>>().into_iter().collect();
    let n_ops = n_ops.min(chars.len());
    let mut log = Vec::with_capacity(n_ops);
    let kinds = [CharOpKind::Delete, CharOpKind::Insert, CharOpKind::Swap, CharOpKind::Substitute];
    while log.len() < n_ops {
        let kind = kinds[rng.gen_range(0..4)];
        let n = chars.len();
        let slots = match kind {
            CharOpKind::Insert => n + 1,
            CharOpKind::Swap => n.saturating_sub(1),
            _ => n,
        };
        if slots == 0 {
            continue;
        }
        let position = rng.gen_range(0..slots);
        let ch = match kind {
            CharOpKind::Insert | CharOpKind::Substitute if !alphabet.is_empty() => Some(alphabet[rng.gen_range(0..alphabet.len())]),
            CharOpKind::Insert | CharOpKind::Substitute => Some(' '),
            _ => None,
        };
        let applied = apply_char_op(&mut chars, kind, position, ch.unwrap_or(' '));
        debug_assert!(applied);
        log.push(NoiseOp { kind: NoiseKind::Char(kind), position, ch });
    }
    (chars.into_iter().collect(), log)
}

/// Pair every two non-English languages through identical English lines.
/// The English-centric directions are kept; no deduplication is done.
pub fn build_multiparallel(corpus: &MultiCorpus) -> MultiCorpus {
    let en = Lang::english();
    let mut out = corpus.clone();
    let mut by_lang: BTreeMap<Lang, HashMap<&str, Vec<&str>>> = BTreeMap::new();
    for (lang, _) in corpus.english_pool() {
        let lines = corpus.lines(&Direction::new(lang.clone(), en.clone())).unwrap_or_default();
        let index = by_lang.entry(lang).or_default();
        for (x, e) in lines {
            index.entry(e).or_default().push(x);
        }
    }
    let langs: Vec<&Lang> = by_lang.keys().collect();
    for (i, x) in langs.iter().enumerate() {
        for y in &langs[i + 1..] {
            let xs = corpus.lines(&Direction::new((*x).clone(), en.clone())).unwrap_or_default();
            let ys = &by_lang[*y];
            let mut lines = Vec::new();
            for (xl, e) in xs {
                if let Some(matches) = ys.get(e) {
                    lines.extend(matches.iter().map(|yl| (xl.to_string(), yl.to_string())));
                }
            }
            out.insert(Direction::new((*x).clone(), (*y).clone()), lines);
        }
    }
    out
}
