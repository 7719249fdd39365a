//! File conventions shared by the commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lightnmt::corpus::MultiCorpus;
use lightnmt::model::{load_weights, ModelWeights};
use lightnmt::subword::{BpeModel, FreqTable, LangVocab};
use lightnmt::Lang;

use crate::error::{data, CliResult};

pub const LANG_VOCAB_EXT: &str = "langvocab";
pub const FREQS_SUFFIX: &str = ".freqs.tsv";

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// A BPE model lives in `<prefix>.merges` and `<prefix>.vocab`.
pub fn bpe_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(prefix, ".merges"), with_suffix(prefix, ".vocab"))
}

pub fn load_bpe(prefix: &Path) -> CliResult<BpeModel> {
    let (m, v) = bpe_paths(prefix);
    Ok(BpeModel::load(&m, &v)?)
}

pub fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    Ok(lightnmt::corpus::read_lines(path)?)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => ensure_dir(dir),
        None => Ok(()),
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))
}

pub fn load_corpus(dir: &Path, prefix: &str) -> CliResult<MultiCorpus> {
    let c = MultiCorpus::load_dir(dir, prefix)?;
    if c.directions().next().is_none() {
        return Err(data(format!("no `{prefix}.<src>-<tgt>.<lang>` files in {}", dir.display())));
    }
    Ok(c)
}

pub fn load_model(path: &Path) -> CliResult<ModelWeights<f32>> {
    Ok(load_weights::<f32>(path)?)
}

/// Language vocabularies from files, or from every `*.langvocab` in a
/// directory.
pub fn load_lang_vocabs(paths: &[PathBuf]) -> CliResult<(BTreeMap<Lang, LangVocab>, Vec<PathBuf>)> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == LANG_VOCAB_EXT))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = BTreeMap::new();
    for f in &files {
        let v = LangVocab::load(f)?;
        if out.insert(v.language.clone(), v).is_some() {
            return Err(data(format!("two vocabularies for the same language ({})", f.display())));
        }
    }
    Ok((out, files))
}

pub fn lang_vocab_path(dir: &Path, lang: &Lang) -> PathBuf {
    dir.join(format!("{lang}.{LANG_VOCAB_EXT}"))
}

pub fn freqs_path(dir: &Path, lang: &Lang) -> PathBuf {
    dir.join(format!("{lang}{FREQS_SUFFIX}"))
}

/// `#language<TAB>xx`, then `piece|char<TAB>item<TAB>count` rows.
pub fn freqs_to_tsv(t: &FreqTable) -> String {
    let mut s = format!("#language\t{}\n", t.language.as_ref().map_or("", Lang::as_str));
    for (k, v) in &t.wordpiece_counts {
        s.push_str(&format!("piece\t{k}\t{v}\n"));
    }
    for (k, v) in &t.char_counts {
        s.push_str(&format!("char\t{k}\t{v}\n"));
    }
    s
}

pub fn freqs_from_tsv(text: &str, origin: &Path) -> CliResult<FreqTable> {
    let mut t = FreqTable::default();
    let bad = |i: usize| data(format!("{}: malformed frequency row {}", origin.display(), i + 1));
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[..] {
            ["#language", l] => t.language = (!l.is_empty()).then(|| Lang::new(l)),
            ["piece", k, n] => {
                t.wordpiece_counts.insert(k.to_string(), n.parse().map_err(|_| bad(i))?);
            }
            ["char", k, n] => {
                let mut cs = k.chars();
                let (Some(c), None) = (cs.next(), cs.next()) else { return Err(bad(i)) };
                t.char_counts.insert(c, n.parse().map_err(|_| bad(i))?);
            }
            [""] => {}
            _ => return Err(bad(i)),
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freq_table_round_trip() {
        let mut t = FreqTable { language: Some(Lang::new("de")), ..Default::default() };
        t.wordpiece_counts.insert("ab</w>".into(), 3);
        t.char_counts.insert('ß', 2);
        let back = freqs_from_tsv(&freqs_to_tsv(&t), Path::new("x")).unwrap();
        assert_eq!(back, t);
    }
}
