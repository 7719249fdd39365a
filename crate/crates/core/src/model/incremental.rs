//! Step-by-step eager decoder with cached state: per-layer key/value caches
//! for the Transformer decoder, hidden/cell vectors for the recurrent one.
//! Encoder-side projections are computed once per source sentence.
//!
//! Rows of a step are independent hypotheses (batch × beam); each carries its
//! own [`DecoderState`] and the index of the source sentence it attends to.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::profile::{Bucket, Profiler};
use crate::tensor::{self, softmax_in_place, Eager, Float, Tensor, LAYER_NORM_EPS};

use super::forward::encode;
use super::{fill_position, DecoderKind, DecoderRoute, ModelWeights, NormPlacement};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache<F> {
    /// Self-attention keys and values of every consumed position, `[t, d]`
    /// row-major.
    Attn { k: Vec<F>, v: Vec<F> },
    Rnn { h: Vec<F>, c: Vec<F> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<F> {
    pub sentence: usize,
    /// Number of tokens consumed so far.
    pub step: usize,
    pub layers: Vec<LayerCache<F>>,
}

/// Per-sentence encoder outputs and the decoder's projections of them.
#[derive(Debug, Clone)]
pub struct EncoderCache<F: Float> {
    pub states: Vec<Tensor<F>>,
    /// Transformer: `[sentence][layer] -> (K, V)`.
    cross_kv: Vec<Vec<(Tensor<F>, Tensor<F>)>>,
    /// Recurrent: `states · W_k` per sentence.
    keys: Vec<Tensor<F>>,
}

impl<F: Float> EncoderCache<F> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Owned copies of the tensors a step touches, looked up once.
struct AttnParams<F> {
    q: (Arc<Tensor<F>>, Arc<Tensor<F>>),
    k: (Arc<Tensor<F>>, Arc<Tensor<F>>),
    v: (Arc<Tensor<F>>, Arc<Tensor<F>>),
    o: (Arc<Tensor<F>>, Arc<Tensor<F>>),
    ln: (Arc<Tensor<F>>, Arc<Tensor<F>>),
}

struct TransformerLayer<F> {
    self_attn: AttnParams<F>,
    cross_attn: AttnParams<F>,
    fc1: (Arc<Tensor<F>>, Arc<Tensor<F>>),
    fc2: (Arc<Tensor<F>>, Arc<Tensor<F>>),
    ffn_ln: (Arc<Tensor<F>>, Arc<Tensor<F>>),
}

struct RnnLayer<F> {
    w_ih: Arc<Tensor<F>>,
    w_hh: Arc<Tensor<F>>,
    b_ih: Arc<Tensor<F>>,
    b_hh: Arc<Tensor<F>>,
    ln: (Arc<Tensor<F>>, Arc<Tensor<F>>),
}

struct RnnAttn<F> {
    w_q: Arc<Tensor<F>>,
    b_q: Arc<Tensor<F>>,
    w_k: Arc<Tensor<F>>,
    v: Arc<Tensor<F>>,
}

enum Layers<F> {
    Transformer { layers: Vec<TransformerLayer<F>>, final_ln: Option<(Arc<Tensor<F>>, Arc<Tensor<F>>)> },
    Recurrent { layers: Vec<RnnLayer<F>>, attn: RnnAttn<F> },
}

/// Incremental decoder bound to one model and one decoder route.
pub struct IncrementalDecoder<'a, F: Float> {
    weights: &'a ModelWeights<F>,
    route: DecoderRoute<F>,
    layers: Layers<F>,
    /// Ablation: replace the recurrent decoder's attention distribution with
    /// zeros, cutting every path from the source to the output.
    pub zero_attention: bool,
}

fn pair<F: Float>(w: &ModelWeights<F>, prefix: &str, a: &str, b: &str) -> Result<(Arc<Tensor<F>>, Arc<Tensor<F>>)> {
    Ok((Arc::clone(w.get(&format!("{prefix}.{a}"))?), Arc::clone(w.get(&format!("{prefix}.{b}"))?)))
}

fn attn_params<F: Float>(w: &ModelWeights<F>, prefix: &str) -> Result<AttnParams<F>> {
    Ok(AttnParams {
        q: pair(w, &format!("{prefix}.q"), "w", "b")?,
        k: pair(w, &format!("{prefix}.k"), "w", "b")?,
        v: pair(w, &format!("{prefix}.v"), "w", "b")?,
        o: pair(w, &format!("{prefix}.o"), "w", "b")?,
        ln: pair(w, &format!("{prefix}_ln"), "g", "b")?,
    })
}

fn linear<F: Float>(x: &Tensor<F>, p: &(Arc<Tensor<F>>, Arc<Tensor<F>>)) -> Result<Tensor<F>> {
    Ok(tensor::add(&tensor::matmul(x, &p.0)?, &p.1)?)
}

fn ln<F: Float>(x: &Tensor<F>, p: &(Arc<Tensor<F>>, Arc<Tensor<F>>)) -> Result<Tensor<F>> {
    Ok(tensor::layer_norm(x, &p.0, &p.1, LAYER_NORM_EPS)?)
}

/// Single-query multi-head attention over `n` cached keys/values.
fn attend<F: Float>(q: &[F], keys: &[F], vals: &[F], n: usize, heads: usize, out: &mut [F], scores: &mut Vec<F>) {
    let d = q.len();
    let dh = d / heads;
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        scores.clear();
        for j in 0..n {
            let kj = &keys[j * d..(j + 1) * d];
            scores.push(q[cols.clone()].iter().zip(&kj[cols.clone()]).map(|(&a, &b)| a * b).sum());
        }
        softmax_in_place(scores);
        let o = &mut out[cols.clone()];
        o.iter_mut().for_each(|x| *x = F::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vj = &vals[j * d + h * dh..j * d + (h + 1) * dh];
            for (x, &v) in o.iter_mut().zip(vj) {
                *x += p * v;
            }
        }
    }
}

fn lstm_update<F: Float>(gates: &[F], h: &mut [F], c: &mut [F]) {
    let n = h.len();
    for j in 0..n {
        let i = tensor::sigmoid_scalar(gates[j]);
        let f = tensor::sigmoid_scalar(gates[n + j]);
        let g = gates[2 * n + j].tanh();
        let o = tensor::sigmoid_scalar(gates[3 * n + j]);
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

impl<'a, F: Float> IncrementalDecoder<'a, F> {
    pub fn new(weights: &'a ModelWeights<F>, route: DecoderRoute<F>) -> Result<Self> {
        let cfg = &weights.config;
        let pre = route.prefix.clone();
        let layers = match cfg.decoder_kind {
            DecoderKind::Transformer => {
                let mut layers = Vec::with_capacity(cfg.dec_layers);
                for i in 0..cfg.dec_layers {
                    let lp = format!("{pre}.{i}");
                    layers.push(TransformerLayer {
                        self_attn: attn_params(weights, &format!("{lp}.self_attn"))?,
                        cross_attn: attn_params(weights, &format!("{lp}.cross_attn"))?,
                        fc1: pair(weights, &format!("{lp}.ffn.fc1"), "w", "b")?,
                        fc2: pair(weights, &format!("{lp}.ffn.fc2"), "w", "b")?,
                        ffn_ln: pair(weights, &format!("{lp}.ffn_ln"), "g", "b")?,
                    });
                }
                let final_ln = match cfg.norm {
                    NormPlacement::Pre => Some(pair(weights, &format!("{pre}.ln"), "g", "b")?),
                    NormPlacement::Post => None,
                };
                Layers::Transformer { layers, final_ln }
            }
            DecoderKind::Recurrent => {
                let mut layers = Vec::with_capacity(cfg.dec_layers);
                for l in 0..cfg.dec_layers {
                    let lp = format!("{pre}.rnn.{l}");
                    let get = |s: &str| weights.get(&format!("{lp}.{s}")).map(Arc::clone);
                    layers.push(RnnLayer {
                        w_ih: get("w_ih")?,
                        w_hh: get("w_hh")?,
                        b_ih: get("b_ih")?,
                        b_hh: get("b_hh")?,
                        ln: pair(weights, &format!("{lp}.ln"), "g", "b")?,
                    });
                }
                let get = |s: &str| weights.get(&format!("{pre}.attn.{s}")).map(Arc::clone);
                let attn = RnnAttn { w_q: get("w_q")?, b_q: get("b_q")?, w_k: get("w_k")?, v: get("v")? };
                Layers::Recurrent { layers, attn }
            }
        };
        Ok(IncrementalDecoder { weights, route, layers, zero_attention: false })
    }

    pub fn route(&self) -> &DecoderRoute<F> {
        &self.route
    }

    pub fn weights(&self) -> &ModelWeights<F> {
        self.weights
    }

    /// Encode a batch of sources and precompute the decoder's cross-attention
    /// inputs. Returns the cache and one fresh state per sentence.
    pub fn start(&self, srcs: &[Vec<u32>], prof: &mut Profiler) -> Result<(EncoderCache<F>, Vec<DecoderState<F>>)> {
        let t = prof.start();
        let enc = encode(&mut Eager, self.weights, srcs)?;
        prof.stop(Bucket::Encoder, t);

        let t_dec = prof.start();
        let t = prof.start();
        let states: Vec<Tensor<F>> = enc
            .spans
            .iter()
            .map(|&(o, l)| tensor::slice(&enc.states, 0, o, o + l))
            .collect::<std::result::Result<_, _>>()?;
        let mut cache = EncoderCache { states, cross_kv: Vec::new(), keys: Vec::new() };
        match &self.layers {
            Layers::Transformer { layers, .. } => {
                let mut per_layer = Vec::with_capacity(layers.len());
                for layer in layers {
                    let k = linear(&enc.states, &layer.cross_attn.k)?;
                    let v = linear(&enc.states, &layer.cross_attn.v)?;
                    per_layer.push((k, v));
                }
                for &(o, l) in &enc.spans {
                    let mut row = Vec::with_capacity(per_layer.len());
                    for (k, v) in &per_layer {
                        row.push((tensor::slice(k, 0, o, o + l)?, tensor::slice(v, 0, o, o + l)?));
                    }
                    cache.cross_kv.push(row);
                }
            }
            Layers::Recurrent { attn, .. } => {
                let keys = tensor::matmul(&enc.states, &attn.w_k)?;
                for &(o, l) in &enc.spans {
                    cache.keys.push(tensor::slice(&keys, 0, o, o + l)?);
                }
            }
        }
        prof.stop(Bucket::CrossAttn, t);
        prof.stop(Bucket::Decoder, t_dec);

        let d = self.weights.config.d_model;
        let fresh: Vec<LayerCache<F>> = match &self.layers {
            Layers::Transformer { layers, .. } => layers.iter().map(|_| LayerCache::Attn { k: Vec::new(), v: Vec::new() }).collect(),
            Layers::Recurrent { layers, .. } => {
                layers.iter().map(|_| LayerCache::Rnn { h: vec![F::zero(); d], c: vec![F::zero(); d] }).collect()
            }
        };
        let init = (0..srcs.len()).map(|s| DecoderState { sentence: s, step: 0, layers: fresh.clone() }).collect();
        Ok((cache, init))
    }

    /// Consume one token per row and return next-token logits
    /// `[rows, route.vocab_size()]`. `prev` holds local ids.
    pub fn step(
        &self,
        cache: &EncoderCache<F>,
        states: &mut [DecoderState<F>],
        prev: &[u32],
        prof: &mut Profiler,
    ) -> Result<Tensor<F>> {
        if states.len() != prev.len() {
            return Err(Error::Mismatch(format!("{} states for {} tokens", states.len(), prev.len())));
        }
        if let Some(s) = states.iter().find(|s| s.sentence >= cache.len()) {
            return Err(Error::Mismatch(format!("state refers to sentence {} of {}", s.sentence, cache.len())));
        }
        let t_dec = prof.start();
        let ids: Vec<usize> = prev.iter().map(|&i| i as usize).collect();
        let out = match &self.layers {
            Layers::Transformer { layers, final_ln } => self.transformer_step(layers, final_ln.as_ref(), cache, states, &ids, prof)?,
            Layers::Recurrent { layers, attn } => self.recurrent_step(layers, attn, cache, states, &ids, prof)?,
        };
        let t = prof.start();
        let logits = tensor::matmul_ex(&out, false, &self.route.embed, true)?;
        prof.stop(Bucket::Softmax, t);
        prof.stop(Bucket::Decoder, t_dec);
        for s in states.iter_mut() {
            s.step += 1;
        }
        Ok(logits)
    }

    fn transformer_step(
        &self,
        layers: &[TransformerLayer<F>],
        final_ln: Option<&(Arc<Tensor<F>>, Arc<Tensor<F>>)>,
        cache: &EncoderCache<F>,
        states: &mut [DecoderState<F>],
        ids: &[usize],
        prof: &mut Profiler,
    ) -> Result<Tensor<F>> {
        let cfg = &self.weights.config;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let scale = F::of(1.0 / (cfg.head_dim() as f64).sqrt());
        let rows = ids.len();
        let mut x = tensor::scale(&tensor::embedding(&self.route.embed, ids)?, F::of((d as f64).sqrt()));
        for (r, s) in states.iter().enumerate() {
            let mut pos = vec![F::zero(); d];
            fill_position(&mut pos, s.step);
            for (a, b) in x.row_mut(r).iter_mut().zip(pos) {
                *a += b;
            }
        }
        let pre = cfg.norm == NormPlacement::Pre;
        let mut scores = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            // self-attention
            let t = prof.start();
            let h = if pre { ln(&x, &layer.self_attn.ln)? } else { x.clone() };
            let q = tensor::scale(&linear(&h, &layer.self_attn.q)?, scale);
            let k = linear(&h, &layer.self_attn.k)?;
            let v = linear(&h, &layer.self_attn.v)?;
            let mut att = Tensor::zeros(&[rows, d]);
            for (r, s) in states.iter_mut().enumerate() {
                let LayerCache::Attn { k: kc, v: vc } = &mut s.layers[i] else {
                    return Err(Error::Mismatch("recurrent state passed to transformer decoder".into()));
                };
                kc.extend_from_slice(k.row(r));
                vc.extend_from_slice(v.row(r));
                let n = kc.len() / d;
                attend(q.row(r), kc, vc, n, heads, att.row_mut(r), &mut scores);
            }
            let o = linear(&att, &layer.self_attn.o)?;
            x = tensor::add(&x, &o)?;
            if !pre {
                x = ln(&x, &layer.self_attn.ln)?;
            }
            prof.stop(Bucket::SelfAttnOrRnn, t);

            // cross-attention
            let t = prof.start();
            let h = if pre { ln(&x, &layer.cross_attn.ln)? } else { x.clone() };
            let q = tensor::scale(&linear(&h, &layer.cross_attn.q)?, scale);
            let mut att = Tensor::zeros(&[rows, d]);
            for (r, s) in states.iter().enumerate() {
                let (kt, vt) = &cache.cross_kv[s.sentence][i];
                attend(q.row(r), kt.data(), vt.data(), kt.rows(), heads, att.row_mut(r), &mut scores);
            }
            let o = linear(&att, &layer.cross_attn.o)?;
            x = tensor::add(&x, &o)?;
            if !pre {
                x = ln(&x, &layer.cross_attn.ln)?;
            }
            prof.stop(Bucket::CrossAttn, t);

            let h = if pre { ln(&x, &layer.ffn_ln)? } else { x.clone() };
            let f = linear(&tensor::relu(&linear(&h, &layer.fc1)?), &layer.fc2)?;
            x = tensor::add(&x, &f)?;
            if !pre {
                x = ln(&x, &layer.ffn_ln)?;
            }
        }
        if let Some(p) = final_ln {
            x = ln(&x, p)?;
        }
        Ok(x)
    }

    fn gather_hidden(states: &[DecoderState<F>], l: usize, d: usize) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut h = Vec::with_capacity(states.len() * d);
        let mut c = Vec::with_capacity(states.len() * d);
        for s in states {
            let LayerCache::Rnn { h: hs, c: cs } = &s.layers[l] else {
                return Err(Error::Mismatch("transformer state passed to recurrent decoder".into()));
            };
            h.extend_from_slice(hs);
            c.extend_from_slice(cs);
        }
        Ok((Tensor::new(vec![states.len(), d], h)?, Tensor::new(vec![states.len(), d], c)?))
    }

    /// Run one LSTM layer for every row: returns the new hidden rows and
    /// writes h/c back into the states.
    fn rnn_layer(layer: &RnnLayer<F>, l: usize, input: &Tensor<F>, states: &mut [DecoderState<F>], d: usize) -> Result<Tensor<F>> {
        let (h_prev, _) = Self::gather_hidden(states, l, d)?;
        let x = ln(input, &layer.ln)?;
        let gi = tensor::add(&tensor::matmul(&x, &layer.w_ih)?, &layer.b_ih)?;
        let gh = tensor::add(&tensor::matmul(&h_prev, &layer.w_hh)?, &layer.b_hh)?;
        let gates = tensor::add(&gi, &gh)?;
        let mut out = Tensor::zeros(&[states.len(), d]);
        for (r, s) in states.iter_mut().enumerate() {
            let LayerCache::Rnn { h, c } = &mut s.layers[l] else { unreachable!("checked in gather_hidden") };
            lstm_update(gates.row(r), h, c);
            out.row_mut(r).copy_from_slice(h);
        }
        Ok(out)
    }

    fn recurrent_step(
        &self,
        layers: &[RnnLayer<F>],
        attn: &RnnAttn<F>,
        cache: &EncoderCache<F>,
        states: &mut [DecoderState<F>],
        ids: &[usize],
        prof: &mut Profiler,
    ) -> Result<Tensor<F>> {
        let d = self.weights.config.d_model;
        let rows = ids.len();
        let emb = tensor::embedding(&self.route.embed, ids)?;

        let t = prof.start();
        let h0 = Self::rnn_layer(&layers[0], 0, &emb, states, d)?;
        prof.stop(Bucket::SelfAttnOrRnn, t);

        let t = prof.start();
        let q = tensor::add(&tensor::matmul(&h0, &attn.w_q)?, &attn.b_q)?;
        let mut ctx = Tensor::zeros(&[rows, d]);
        if !self.zero_attention {
            let mut scores: Vec<F> = Vec::new();
            for (r, s) in states.iter().enumerate() {
                let keys = &cache.keys[s.sentence];
                let mem = &cache.states[s.sentence];
                let qr = q.row(r);
                scores.clear();
                for j in 0..keys.rows() {
                    let e: F = keys.row(j).iter().zip(qr).zip(attn.v.data()).map(|((&k, &q), &v)| (k + q).tanh() * v).sum();
                    scores.push(e);
                }
                softmax_in_place(&mut scores);
                let cr = ctx.row_mut(r);
                for (j, &a) in scores.iter().enumerate() {
                    for (c, &m) in cr.iter_mut().zip(mem.row(j)) {
                        *c += a * m;
                    }
                }
            }
        }
        prof.stop(Bucket::CrossAttn, t);

        let t = prof.start();
        let mut below = h0;
        for (l, layer) in layers.iter().enumerate().skip(1) {
            let inp = tensor::concat(&[&below, &ctx], 1)?;
            below = Self::rnn_layer(layer, l, &inp, states, d)?;
        }
        prof.stop(Bucket::SelfAttnOrRnn, t);
        Ok(tensor::add(&below, &ctx)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decoder_logits, ModelConfig};

    fn check_against_full(cfg: &ModelConfig) {
        let w = ModelWeights::<f64>::build(cfg, 21).unwrap();
        let route = w.route(None).unwrap();
        let srcs = vec![vec![5, 6, 7, 2], vec![9, 2]];
        let tgts = vec![vec![1, 8, 11, 12, 13], vec![1, 14, 15, 16, 17]];
        let dec = IncrementalDecoder::new(&w, route.clone()).unwrap();
        let mut prof = Profiler::disabled();
        let (cache, mut states) = dec.start(&srcs, &mut prof).unwrap();
        let enc = encode(&mut Eager, &w, &srcs).unwrap();
        let full = decoder_logits(&mut Eager, &w, &route, &enc, &tgts).unwrap();
        for t in 0..5 {
            let prev: Vec<u32> = tgts.iter().map(|s| s[t]).collect();
            let logits = dec.step(&cache, &mut states, &prev, &mut prof).unwrap();
            for s in 0..2 {
                let expect = full.row(s * 5 + t);
                let diff = logits.row(s).iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9, "step {t} sentence {s}: {diff}");
            }
        }
        assert!(states.iter().all(|s| s.step == 5));
    }

    #[test]
    fn incremental_matches_full_forward() {
        for kind in [DecoderKind::Transformer, DecoderKind::Recurrent] {
            for norm in [NormPlacement::Post, NormPlacement::Pre] {
                for dec_layers in [1, 3] {
                    let mut cfg = ModelConfig::toy(2, dec_layers, 24);
                    cfg.decoder_kind = kind;
                    cfg.norm = norm;
                    check_against_full(&cfg);
                }
            }
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let w = ModelWeights::<f64>::build(&ModelConfig::toy(1, 1, 12), 1).unwrap();
        let dec = IncrementalDecoder::new(&w, w.route(None).unwrap()).unwrap();
        let mut prof = Profiler::disabled();
        let (cache, mut states) = dec.start(&[vec![4, 2]], &mut prof).unwrap();
        states[0].sentence = 3;
        assert!(dec.step(&cache, &mut states, &[1], &mut prof).is_err());
    }

    #[test]
    fn zeroed_attention_cuts_the_source() {
        let mut cfg = ModelConfig::toy(2, 2, 16);
        cfg.decoder_kind = DecoderKind::Recurrent;
        let w = ModelWeights::<f64>::build(&cfg, 4).unwrap();
        let mut dec = IncrementalDecoder::new(&w, w.route(None).unwrap()).unwrap();
        let run = |dec: &IncrementalDecoder<f64>, src: Vec<u32>| {
            let mut prof = Profiler::disabled();
            let (cache, mut st) = dec.start(&[src], &mut prof).unwrap();
            let mut out = Vec::new();
            for tok in [1, 7, 9] {
                out.push(dec.step(&cache, &mut st, &[tok], &mut prof).unwrap());
            }
            out
        };
        assert_ne!(run(&dec, vec![4, 5, 2]), run(&dec, vec![11, 12, 13, 2]));
        dec.zero_attention = true;
        assert_eq!(run(&dec, vec![4, 5, 2]), run(&dec, vec![11, 12, 13, 2]));
    }
}
