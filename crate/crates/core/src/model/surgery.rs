//! Initialization of one model family from another. Every operation builds a
//! new weight store; parents are never modified (copied tensors share their
//! storage until written).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Lang;
use crate::subword::LangVocab;
use crate::tensor::{Float, Tensor};

use super::{decoder_specs, init_tensor, DecoderKind, ModelWeights};

/// How encoder layers are duplicated when deepening the encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Duplication {
    /// `[0, 0, 1, 1, ..]`
    #[default]
    Adjacent,
    /// `[0, 1, .., 0, 1, ..]`
    Block,
}

/// Split `prefix.<i>.<rest>` into `(i, rest)`.
fn layer_index<'a>(name: &'a str, prefix: &str) -> Option<(usize, &'a str)> {
    let rest = name.strip_prefix(prefix)?.strip_prefix('.')?;
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail))
}

/// Double the encoder by layer duplication and keep the bottom `keep_dec`
/// decoder layers (a 6-6 parent becomes 12-2 with `keep_dec = 2`).
pub fn init_deep_shallow<F: Float>(parent: &ModelWeights<F>, order: Duplication, keep_dec: usize) -> Result<ModelWeights<F>> {
    let pc = &parent.config;
    if pc.decoder_kind != DecoderKind::Transformer || pc.multi_decoder {
        return Err(Error::Config("deep-shallow initialization needs a single Transformer decoder".into()));
    }
    if keep_dec == 0 || keep_dec > pc.dec_layers {
        return Err(Error::Config(format!("cannot keep {keep_dec} of {} decoder layers", pc.dec_layers)));
    }
    let n = pc.enc_layers;
    let mut cfg = pc.clone();
    cfg.enc_layers = 2 * n;
    cfg.dec_layers = keep_dec;
    let mut params = BTreeMap::new();
    for (name, t) in parent.params() {
        if let Some((i, tail)) = layer_index(name, "enc") {
            let targets = match order {
                Duplication::Adjacent => [2 * i, 2 * i + 1],
                Duplication::Block => [i, i + n],
            };
            for j in targets {
                params.insert(format!("enc.{j}.{tail}"), Arc::clone(t));
            }
        } else if let Some((i, _)) = layer_index(name, "dec") {
            if i < keep_dec {
                params.insert(name.clone(), Arc::clone(t));
            }
        } else {
            params.insert(name.clone(), Arc::clone(t));
        }
    }
    let w = ModelWeights::from_parts(cfg, params, parent.target_maps().clone());
    w.check()?;
    Ok(w)
}

/// Keep the parent's embeddings and encoder; attach a freshly initialized
/// recurrent decoder with `dec_layers` layers.
pub fn init_hybrid<F: Float>(parent: &ModelWeights<F>, dec_layers: usize, seed: u64) -> Result<ModelWeights<F>> {
    if parent.config.multi_decoder {
        return Err(Error::Config("hybrid initialization needs a single-decoder parent".into()));
    }
    let mut cfg = parent.config.clone();
    cfg.decoder_kind = DecoderKind::Recurrent;
    cfg.dec_layers = dec_layers;
    cfg.validate()?;
    let mut params: BTreeMap<String, Arc<Tensor<F>>> = parent
        .params()
        .iter()
        .filter(|(k, _)| !k.starts_with("dec."))
        .map(|(k, v)| (k.clone(), Arc::clone(v)))
        .collect();
    for spec in decoder_specs(&cfg, "dec") {
        params.insert(spec.name.clone(), Arc::new(init_tensor(&spec, seed)));
    }
    let w = ModelWeights::from_parts(cfg, params, parent.target_maps().clone());
    w.check()?;
    Ok(w)
}

/// One copy of the parent's decoder per configured language, each with a
/// target embedding made of the parent's rows selected by that language's
/// vocabulary.
pub fn init_multi_decoder<F: Float>(parent: &ModelWeights<F>, vocabs: &BTreeMap<Lang, LangVocab>) -> Result<ModelWeights<F>> {
    let pc = &parent.config;
    if pc.multi_decoder {
        return Err(Error::Config("parent already has per-language decoders".into()));
    }
    if pc.languages.is_empty() {
        return Err(Error::Config("parent configuration lists no languages".into()));
    }
    let route = parent.route(None)?;
    let mut cfg = pc.clone();
    cfg.multi_decoder = true;
    cfg.share_all_embeddings = false;
    let mut params = BTreeMap::new();
    let mut maps = BTreeMap::new();
    params.insert("embed.src".to_string(), Arc::clone(parent.get(parent.src_embed_name())?));
    for lang in &pc.languages {
        let vocab = vocabs.get(lang).ok_or_else(|| Error::Config(format!("no target vocabulary for language {lang}")))?;
        let filtered = route.filtered(vocab)?;
        let name = format!("embed.tgt.{lang}");
        params.insert(name.clone(), Arc::clone(&filtered.embed));
        maps.insert(name, (0..filtered.vocab_size() as u32).map(|j| filtered.to_global(j)).collect());
    }
    for (name, t) in parent.params() {
        if name.starts_with("enc.") {
            params.insert(name.clone(), Arc::clone(t));
        } else if let Some(tail) = name.strip_prefix("dec.") {
            for lang in &pc.languages {
                params.insert(format!("dec.{lang}.{tail}"), Arc::clone(t));
            }
        }
    }
    let w = ModelWeights::from_parts(cfg, params, maps);
    w.check()?;
    Ok(w)
}

/// A single-decoder model consisting of the shared encoder plus `lang`'s
/// decoder and target embedding.
pub fn extract_language<F: Float>(w: &ModelWeights<F>, lang: &Lang) -> Result<ModelWeights<F>> {
    if !w.config.multi_decoder {
        return Err(Error::Config("model has a single decoder already".into()));
    }
    let route = w.route(Some(lang))?;
    let mut cfg = w.config.clone();
    cfg.multi_decoder = false;
    cfg.share_all_embeddings = false;
    let dec_prefix = format!("{}.", route.prefix);
    let mut params = BTreeMap::new();
    for (name, t) in w.params() {
        if name.starts_with("enc.") || name == "embed.src" {
            params.insert(name.clone(), Arc::clone(t));
        } else if let Some(tail) = name.strip_prefix(&dec_prefix) {
            params.insert(format!("dec.{tail}"), Arc::clone(t));
        }
    }
    params.insert("embed.tgt".into(), Arc::clone(&route.embed));
    let mut maps = BTreeMap::new();
    if let Some(m) = w.target_maps().get(&route.embed_name) {
        maps.insert("embed.tgt".to_string(), m.clone());
    }
    let out = ModelWeights::from_parts(cfg, params, maps);
    out.check()?;
    Ok(out)
}

/// Store a model whose target embedding (and tied output projection) for
/// `vocab.language` holds only the rows `vocab` keeps. The source embedding
/// is untouched. Single-decoder models become untied (`embed.src` plus a
/// filtered `embed.tgt`).
pub fn filter_target_vocab<F: Float>(w: &ModelWeights<F>, vocab: &LangVocab) -> Result<ModelWeights<F>> {
    let lang = &vocab.language;
    let filtered = w.route(Some(lang))?.filtered(vocab)?;
    let map: Vec<u32> = (0..filtered.vocab_size() as u32).map(|j| filtered.to_global(j)).collect();
    let mut cfg = w.config.clone();
    let mut params = w.params().clone();
    let mut maps = w.target_maps().clone();
    let name = if cfg.multi_decoder {
        format!("embed.tgt.{lang}")
    } else {
        if cfg.share_all_embeddings {
            let shared = params.remove("embed.shared").expect("shared model has embed.shared");
            params.insert("embed.src".into(), shared);
            cfg.share_all_embeddings = false;
        }
        "embed.tgt".to_string()
    };
    params.insert(name.clone(), Arc::clone(&filtered.embed));
    maps.insert(name, map);
    let out = ModelWeights::from_parts(cfg, params, maps);
    out.check()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, ModelConfig};

    fn parent() -> ModelWeights<f64> {
        let mut cfg = ModelConfig::toy(3, 3, 20);
        cfg.languages = vec!["de".into(), "en".into()];
        ModelWeights::build(&cfg, 5).unwrap()
    }

    #[test]
    fn filtered_model_matches_filtered_route() {
        let p = parent();
        let vocab = LangVocab::from_kept(Lang::new("de"), [0, 1, 2, 3, 7, 9, 11], None);
        let f = filter_target_vocab(&p, &vocab).unwrap();
        assert!(!f.config.share_all_embeddings);
        assert_eq!(f.get("embed.src").unwrap(), p.get("embed.shared").unwrap());
        let a = f.route(None).unwrap();
        let b = p.route(None).unwrap().filtered(&vocab).unwrap();
        assert_eq!(a.embed, b.embed);
        assert_eq!((0..7).map(|j| a.to_global(j)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 7, 9, 11]);
        assert_eq!(p.get("embed.shared").unwrap().rows(), 20);
    }

    #[test]
    fn deep_shallow_copies_layers() {
        let p = parent();
        let w = init_deep_shallow(&p, Duplication::Adjacent, 2).unwrap();
        assert_eq!((w.config.enc_layers, w.config.dec_layers), (6, 2));
        for name in ["self_attn.q.w", "ffn.fc2.b", "ffn_ln.g"] {
            let src = p.get(&format!("enc.1.{name}")).unwrap();
            assert_eq!(w.get(&format!("enc.2.{name}")).unwrap(), src);
            assert_eq!(w.get(&format!("enc.3.{name}")).unwrap(), src);
        }
        assert_eq!(w.get("dec.0.cross_attn.k.w").unwrap(), p.get("dec.0.cross_attn.k.w").unwrap());
        assert!(w.get("dec.2.ffn.fc1.w").is_err());
        let b = init_deep_shallow(&p, Duplication::Block, 2).unwrap();
        assert_eq!(b.get("enc.4.self_attn.q.w").unwrap(), p.get("enc.1.self_attn.q.w").unwrap());
        assert!(init_deep_shallow(&p, Duplication::Adjacent, 4).is_err());
    }

    #[test]
    fn hybrid_keeps_encoder_and_reseeds_decoder() {
        let p = init_deep_shallow(&parent(), Duplication::Adjacent, 2).unwrap();
        let a = init_hybrid(&p, 3, 1).unwrap();
        let b = init_hybrid(&p, 3, 2).unwrap();
        for (name, t) in p.params().iter().filter(|(k, _)| !k.starts_with("dec.")) {
            assert_eq!(a.get(name).unwrap(), t);
            assert_eq!(b.get(name).unwrap(), t);
        }
        assert_ne!(a.get("dec.rnn.0.w_ih").unwrap(), b.get("dec.rnn.0.w_ih").unwrap());
        assert_eq!(a.config.decoder_kind, DecoderKind::Recurrent);
    }

    #[test]
    fn multi_decoder_copies_and_selects() {
        let p = parent();
        let vocabs = BTreeMap::from([
            (Lang::new("de"), LangVocab::from_kept("de".into(), [0, 1, 2, 3, 10, 11, 12], None)),
            (Lang::new("en"), LangVocab::from_kept("en".into(), [0, 1, 2, 3, 15, 16], None)),
        ]);
        let m = init_multi_decoder(&p, &vocabs).unwrap();
        for lang in ["de", "en"] {
            for (name, t) in p.params().iter().filter(|(k, _)| k.starts_with("dec.")) {
                let tail = name.strip_prefix("dec.").unwrap();
                assert_eq!(m.get(&format!("dec.{lang}.{tail}")).unwrap(), t);
            }
        }
        let de = m.get("embed.tgt.de").unwrap();
        let shared = p.get("embed.shared").unwrap();
        for (j, g) in [0, 1, 2, 3, 10, 11, 12].iter().enumerate() {
            assert_eq!(de.row(j), shared.row(*g));
        }
        let c = count_params(&m);
        assert_eq!(c.decoder, 2 * count_params(&p).decoder);
        let mut missing = vocabs.clone();
        missing.remove(&Lang::new("en"));
        assert!(init_multi_decoder(&p, &missing).is_err());
        let single = extract_language(&m, &"en".into()).unwrap();
        assert_eq!(single.route(None).unwrap().to_global(4), 15);
    }
}
