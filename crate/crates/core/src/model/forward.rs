//! Whole-sequence forward pass, written once against [`Backend`]. Training
//! runs it on a [`Graph`](crate::tensor::Graph); the full-recompute decoding
//! mode and the finite-difference oracles run it eagerly.
//!
//! Sentences of a batch are stacked row-wise without padding; attention is
//! computed per sentence on row slices.

use crate::error::{Error, Result};
use crate::tensor::{Backend, Float, Tensor};

use super::{DecoderKind, DecoderRoute, ModelConfig, ModelWeights, NormPlacement};

/// Encoder states for a batch, stacked row-wise.
pub struct EncodedBatch<V> {
    pub states: V,
    /// `(offset, len)` of each sentence in `states`.
    pub spans: Vec<(usize, usize)>,
}

/// Teacher-forced training batch. Target ids are local to the decoder route.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherBatch {
    pub src: Vec<Vec<u32>>,
    pub tgt_in: Vec<Vec<u32>>,
    pub tgt_out: Vec<Vec<u32>>,
}

impl TeacherBatch {
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().map(Vec::len).sum()
    }
}

fn spans_of(seqs: &[Vec<u32>]) -> Result<Vec<(usize, usize)>> {
    let mut off = 0;
    let mut spans = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Data("empty sequence in batch".into()));
        }
        spans.push((off, s.len()));
        off += s.len();
    }
    Ok(spans)
}

fn flat_ids(seqs: &[Vec<u32>]) -> Vec<usize> {
    seqs.iter().flatten().map(|&i| i as usize).collect()
}

fn stacked_positions<F: Float>(spans: &[(usize, usize)], d: usize) -> Tensor<F> {
    let n = spans.iter().map(|s| s.1).sum();
    let mut t = Tensor::zeros(&[n, d]);
    for &(off, len) in spans {
        for p in 0..len {
            super::fill_position(t.row_mut(off + p), p);
        }
    }
    t
}

fn p<F: Float, B: Backend<F>>(b: &mut B, w: &ModelWeights<F>, name: &str) -> Result<B::V> {
    Ok(b.param(name, w.get(name)?))
}

fn linear<F: Float, B: Backend<F>>(b: &mut B, w: &ModelWeights<F>, x: &B::V, prefix: &str) -> Result<B::V> {
    let wt = p(b, w, &format!("{prefix}.w"))?;
    let bias = p(b, w, &format!("{prefix}.b"))?;
    let y = b.matmul(x, &wt)?;
    Ok(b.add(&y, &bias)?)
}

fn layer_norm<F: Float, B: Backend<F>>(b: &mut B, w: &ModelWeights<F>, x: &B::V, prefix: &str) -> Result<B::V> {
    let g = p(b, w, &format!("{prefix}.g"))?;
    let bias = p(b, w, &format!("{prefix}.b"))?;
    Ok(b.layer_norm(x, &g, &bias)?)
}

fn causal_mask<F: Float>(n: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            t.row_mut(i)[j] = F::neg_infinity();
        }
    }
    t
}

#[allow(clippy::too_many_arguments)]
fn attention<F: Float, B: Backend<F>>(
    b: &mut B,
    w: &ModelWeights<F>,
    cfg: &ModelConfig,
    prefix: &str,
    xq: &B::V,
    xkv: &B::V,
    q_spans: &[(usize, usize)],
    k_spans: &[(usize, usize)],
    causal: bool,
) -> Result<B::V> {
    let dh = cfg.head_dim();
    let q = linear(b, w, xq, &format!("{prefix}.q"))?;
    let q = b.scale(&q, F::of(1.0 / (dh as f64).sqrt()));
    let k = linear(b, w, xkv, &format!("{prefix}.k"))?;
    let v = linear(b, w, xkv, &format!("{prefix}.v"))?;
    let mut outs = Vec::with_capacity(q_spans.len());
    for (&(qo, ql), &(ko, kl)) in q_spans.iter().zip(k_spans) {
        let qs = b.slice(&q, 0, qo, qo + ql)?;
        let ks = b.slice(&k, 0, ko, ko + kl)?;
        let vs = b.slice(&v, 0, ko, ko + kl)?;
        let mask = causal.then(|| b.constant(causal_mask(ql)));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (qs.clone(), ks.clone(), vs.clone())
            } else {
                (b.slice(&qs, 1, h * dh, (h + 1) * dh)?, b.slice(&ks, 1, h * dh, (h + 1) * dh)?, b.slice(&vs, 1, h * dh, (h + 1) * dh)?)
            };
            let mut scores = b.matmul_ex(&qh, false, &kh, true)?;
            if let Some(m) = &mask {
                scores = b.add(&scores, m)?;
            }
            let probs = b.softmax(&scores, 1)?;
            heads.push(b.matmul(&probs, &vh)?);
        }
        outs.push(if heads.len() == 1 { heads.pop().expect("one head") } else { b.concat(&heads, 1)? });
    }
    let o = if outs.len() == 1 { outs.pop().expect("one span") } else { b.concat(&outs, 0)? };
    linear(b, w, &o, &format!("{prefix}.o"))
}

fn ffn<F: Float, B: Backend<F>>(b: &mut B, w: &ModelWeights<F>, x: &B::V, prefix: &str) -> Result<B::V> {
    let h = linear(b, w, x, &format!("{prefix}.ffn.fc1"))?;
    let h = b.relu(&h);
    linear(b, w, &h, &format!("{prefix}.ffn.fc2"))
}

/// Residual sub-block with post- or pre-norm placement.
fn sublayer<F: Float, B: Backend<F>>(
    b: &mut B,
    w: &ModelWeights<F>,
    cfg: &ModelConfig,
    ln: &str,
    x: &B::V,
    f: impl FnOnce(&mut B, &B::V) -> Result<B::V>,
) -> Result<B::V> {
    match cfg.norm {
        NormPlacement::Post => {
            let y = f(b, x)?;
            let y = b.dropout(&y, cfg.dropout);
            let s = b.add(x, &y)?;
            layer_norm(b, w, &s, ln)
        }
        NormPlacement::Pre => {
            let h = layer_norm(b, w, x, ln)?;
            let y = f(b, &h)?;
            let y = b.dropout(&y, cfg.dropout);
            Ok(b.add(x, &y)?)
        }
    }
}

fn embed_scaled<F: Float, B: Backend<F>>(b: &mut B, table: &B::V, seqs: &[Vec<u32>], spans: &[(usize, usize)], d: usize) -> Result<B::V> {
    let e = b.embedding(table, &flat_ids(seqs))?;
    let e = b.scale(&e, F::of((d as f64).sqrt()));
    let pos = b.constant(stacked_positions(spans, d));
    Ok(b.add(&e, &pos)?)
}

/// Run the encoder over a batch of (global-id) source sentences.
pub fn encode<F: Float, B: Backend<F>>(b: &mut B, w: &ModelWeights<F>, srcs: &[Vec<u32>]) -> Result<EncodedBatch<B::V>> {
    let cfg = &w.config;
    let spans = spans_of(srcs)?;
    let table = p(b, w, w.src_embed_name())?;
    let x = embed_scaled(b, &table, srcs, &spans, cfg.d_model)?;
    let mut x = b.dropout(&x, cfg.dropout);
    for i in 0..cfg.enc_layers {
        let pre = format!("enc.{i}");
        x = sublayer(b, w, cfg, &format!("{pre}.self_attn_ln"), &x, |b, h| {
            attention(b, w, cfg, &format!("{pre}.self_attn"), h, h, &spans, &spans, false)
        })?;
        x = sublayer(b, w, cfg, &format!("{pre}.ffn_ln"), &x, |b, h| ffn(b, w, h, &pre))?;
    }
    if cfg.norm == NormPlacement::Pre {
        x = layer_norm(b, w, &x, "enc.ln")?;
    }
    Ok(EncodedBatch { states: x, spans })
}

/// Teacher-forced decoder: logits `[sum(len(tgt_in)), route.vocab_size()]`
/// for every target prefix position of every sentence.
pub fn decoder_logits<F: Float, B: Backend<F>>(
    b: &mut B,
    w: &ModelWeights<F>,
    route: &DecoderRoute<F>,
    enc: &EncodedBatch<B::V>,
    tgt_in: &[Vec<u32>],
) -> Result<B::V> {
    if tgt_in.len() != enc.spans.len() {
        return Err(Error::Mismatch(format!("{} targets for {} sources", tgt_in.len(), enc.spans.len())));
    }
    let table = b.param(&route.embed_name, &route.embed);
    let out = match w.config.decoder_kind {
        DecoderKind::Transformer => transformer_decoder(b, w, route, enc, &table, tgt_in)?,
        DecoderKind::Recurrent => recurrent_decoder(b, w, route, enc, &table, tgt_in)?,
    };
    Ok(b.matmul_ex(&out, false, &table, true)?)
}

fn transformer_decoder<F: Float, B: Backend<F>>(
    b: &mut B,
    w: &ModelWeights<F>,
    route: &DecoderRoute<F>,
    enc: &EncodedBatch<B::V>,
    table: &B::V,
    tgt_in: &[Vec<u32>],
) -> Result<B::V> {
    let cfg = &w.config;
    let spans = spans_of(tgt_in)?;
    let x = embed_scaled(b, table, tgt_in, &spans, cfg.d_model)?;
    let mut x = b.dropout(&x, cfg.dropout);
    for i in 0..cfg.dec_layers {
        let pre = format!("{}.{i}", route.prefix);
        x = sublayer(b, w, cfg, &format!("{pre}.self_attn_ln"), &x, |b, h| {
            attention(b, w, cfg, &format!("{pre}.self_attn"), h, h, &spans, &spans, true)
        })?;
        x = sublayer(b, w, cfg, &format!("{pre}.cross_attn_ln"), &x, |b, h| {
            attention(b, w, cfg, &format!("{pre}.cross_attn"), h, &enc.states, &spans, &enc.spans, false)
        })?;
        x = sublayer(b, w, cfg, &format!("{pre}.ffn_ln"), &x, |b, h| ffn(b, w, h, &pre))?;
    }
    if cfg.norm == NormPlacement::Pre {
        x = layer_norm(b, w, &x, &format!("{}.ln", route.prefix))?;
    }
    Ok(x)
}

/// Gates `[1, 4h]` in i, f, g, o order; returns the new (h, c).
fn lstm_cell<F: Float, B: Backend<F>>(b: &mut B, gates: &B::V, c: &B::V, h: usize) -> Result<(B::V, B::V)> {
    let i = b.slice(gates, 1, 0, h)?;
    let f = b.slice(gates, 1, h, 2 * h)?;
    let g = b.slice(gates, 1, 2 * h, 3 * h)?;
    let o = b.slice(gates, 1, 3 * h, 4 * h)?;
    let (i, f, g, o) = (b.sigmoid(&i), b.sigmoid(&f), b.tanh(&g), b.sigmoid(&o));
    let fc = b.mul(&f, c)?;
    let ig = b.mul(&i, &g)?;
    let c = b.add(&fc, &ig)?;
    let tc = b.tanh(&c);
    let h = b.mul(&o, &tc)?;
    Ok((h, c))
}

fn recurrent_decoder<F: Float, B: Backend<F>>(
    b: &mut B,
    w: &ModelWeights<F>,
    route: &DecoderRoute<F>,
    enc: &EncodedBatch<B::V>,
    table: &B::V,
    tgt_in: &[Vec<u32>],
) -> Result<B::V> {
    let cfg = &w.config;
    let d = cfg.d_model;
    let pre = &route.prefix;
    let rnn = |l: usize, s: &str| format!("{pre}.rnn.{l}.{s}");
    let mut w_ih = Vec::new();
    let mut w_hh = Vec::new();
    let mut b_ih = Vec::new();
    let mut b_hh = Vec::new();
    for l in 0..cfg.dec_layers {
        w_ih.push(p(b, w, &rnn(l, "w_ih"))?);
        w_hh.push(p(b, w, &rnn(l, "w_hh"))?);
        b_ih.push(p(b, w, &rnn(l, "b_ih"))?);
        b_hh.push(p(b, w, &rnn(l, "b_hh"))?);
    }
    let w_q = p(b, w, &format!("{pre}.attn.w_q"))?;
    let b_q = p(b, w, &format!("{pre}.attn.b_q"))?;
    let w_k = p(b, w, &format!("{pre}.attn.w_k"))?;
    let v_a = p(b, w, &format!("{pre}.attn.v"))?;

    let mut sentence_outs = Vec::with_capacity(tgt_in.len());
    for (s, ids) in tgt_in.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::Data("empty target prefix".into()));
        }
        let (off, len) = enc.spans[s];
        let mem = b.slice(&enc.states, 0, off, off + len)?;
        let keys = b.matmul(&mem, &w_k)?;
        let emb = b.embedding(table, &ids.iter().map(|&i| i as usize).collect::<Vec<_>>())?;
        let emb = b.dropout(&emb, cfg.dropout);
        let x0 = layer_norm(b, w, &emb, &rnn(0, "ln"))?;
        let xg = b.matmul(&x0, &w_ih[0])?;
        let xg = b.add(&xg, &b_ih[0])?;
        let zero = b.constant(Tensor::zeros(&[1, d]));
        let mut hs = vec![zero.clone(); cfg.dec_layers];
        let mut cs = vec![zero; cfg.dec_layers];
        let mut outs = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let xt = b.slice(&xg, 0, t, t + 1)?;
            let hh = b.matmul(&hs[0], &w_hh[0])?;
            let hh = b.add(&hh, &b_hh[0])?;
            let gates = b.add(&xt, &hh)?;
            let (h0, c0) = lstm_cell(b, &gates, &cs[0], d)?;
            hs[0] = h0.clone();
            cs[0] = c0;

            let q = b.matmul(&h0, &w_q)?;
            let q = b.add(&q, &b_q)?;
            let e = b.add(&keys, &q)?;
            let e = b.tanh(&e);
            let scores = b.matmul(&e, &v_a)?;
            let alpha = b.softmax(&scores, 0)?;
            let ctx = b.matmul_ex(&alpha, true, &mem, false)?;

            let mut below = h0;
            for l in 1..cfg.dec_layers {
                let inp = b.concat(&[below.clone(), ctx.clone()], 1)?;
                let inp = layer_norm(b, w, &inp, &rnn(l, "ln"))?;
                let xi = b.matmul(&inp, &w_ih[l])?;
                let xi = b.add(&xi, &b_ih[l])?;
                let hh = b.matmul(&hs[l], &w_hh[l])?;
                let hh = b.add(&hh, &b_hh[l])?;
                let gates = b.add(&xi, &hh)?;
                let (hl, cl) = lstm_cell(b, &gates, &cs[l], d)?;
                hs[l] = hl.clone();
                cs[l] = cl;
                below = b.dropout(&hl, cfg.dropout);
            }
            outs.push(b.add(&below, &ctx)?);
        }
        sentence_outs.push(b.concat(&outs, 0)?);
    }
    if sentence_outs.len() == 1 {
        Ok(sentence_outs.pop().expect("one sentence"))
    } else {
        Ok(b.concat(&sentence_outs, 0)?)
    }
}

/// Label-smoothed cross-entropy of a teacher-forced batch, averaged over
/// target tokens.
pub fn batch_loss<F: Float, B: Backend<F>>(
    b: &mut B,
    w: &ModelWeights<F>,
    route: &DecoderRoute<F>,
    batch: &TeacherBatch,
    smoothing: f64,
) -> Result<B::V> {
    if batch.tgt_in.iter().zip(&batch.tgt_out).any(|(i, o)| i.len() != o.len()) {
        return Err(Error::Mismatch("decoder inputs and outputs differ in length".into()));
    }
    let enc = encode(b, w, &batch.src)?;
    let logits = decoder_logits(b, w, route, &enc, &batch.tgt_in)?;
    Ok(b.cross_entropy(&logits, &flat_ids(&batch.tgt_out), smoothing, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Eager;

    fn model(kind: DecoderKind, norm: NormPlacement) -> ModelWeights<f64> {
        let mut cfg = ModelConfig::toy(2, 2, 20);
        cfg.decoder_kind = kind;
        cfg.norm = norm;
        ModelWeights::build(&cfg, 9).unwrap()
    }

    #[test]
    fn encoder_shape_and_range_check() {
        let w = model(DecoderKind::Transformer, NormPlacement::Post);
        let enc = encode(&mut Eager, &w, &[vec![4, 5, 6], vec![7, 2]]).unwrap();
        assert_eq!(enc.states.shape(), &[5, 16]);
        assert_eq!(enc.spans, vec![(0, 3), (3, 2)]);
        assert!(encode(&mut Eager, &w, &[vec![99]]).is_err());
    }

    #[test]
    fn batch_order_does_not_matter() {
        let w = model(DecoderKind::Transformer, NormPlacement::Post);
        let a = encode(&mut Eager, &w, &[vec![4, 5, 6], vec![7, 2]]).unwrap().states;
        let b = encode(&mut Eager, &w, &[vec![7, 2], vec![4, 5, 6]]).unwrap().states;
        assert!(a.select_rows(&[0, 1, 2, 3, 4]).unwrap().max_abs_diff(&b.select_rows(&[2, 3, 4, 0, 1]).unwrap()) < 1e-12);
    }

    #[test]
    fn pre_and_post_norm_differ() {
        let a = encode(&mut Eager, &model(DecoderKind::Transformer, NormPlacement::Post), &[vec![4, 5, 6]]).unwrap().states;
        let b = encode(&mut Eager, &model(DecoderKind::Transformer, NormPlacement::Pre), &[vec![4, 5, 6]]).unwrap().states;
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn decoder_is_causal() {
        for kind in [DecoderKind::Transformer, DecoderKind::Recurrent] {
            let w = model(kind, NormPlacement::Post);
            let route = w.route(None).unwrap();
            let enc = encode(&mut Eager, &w, &[vec![4, 5, 6]]).unwrap();
            let full = decoder_logits(&mut Eager, &w, &route, &enc, &[vec![1, 8, 9, 10]]).unwrap();
            let prefix = decoder_logits(&mut Eager, &w, &route, &enc, &[vec![1, 8]]).unwrap();
            assert_eq!(full.shape(), &[4, 20]);
            let head = crate::tensor::slice(&full, 0, 0, 2).unwrap();
            assert!(head.max_abs_diff(&prefix) < 1e-10);
        }
    }
}
