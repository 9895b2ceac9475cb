use std::collections::BTreeMap;

use rand::RngCore;

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::tokenizer::Vocabulary;

/// Padded batch, flattened row-major as `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub attention_mask: Vec<bool>,
}

impl EncoderBatch {
    /// Pad `(ids, segments)` rows to the longest row.
    pub fn from_rows(rows: &[(Vec<usize>, Vec<usize>)], pad_id: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let seq_len = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut b = EncoderBatch {
            batch: rows.len(),
            seq_len,
            ids: Vec::with_capacity(rows.len() * seq_len),
            segments: Vec::with_capacity(rows.len() * seq_len),
            attention_mask: Vec::with_capacity(rows.len() * seq_len),
        };
        for (ids, segs) in rows {
            if ids.len() != segs.len() {
                return Err(Error::input("ids and segment ids differ in length"));
            }
            b.ids.extend_from_slice(ids);
            b.segments.extend_from_slice(segs);
            b.attention_mask.extend(std::iter::repeat_n(true, ids.len()));
            let pad = seq_len - ids.len();
            b.ids.extend(std::iter::repeat_n(pad_id, pad));
            b.segments.extend(std::iter::repeat_n(0, pad));
            b.attention_mask.extend(std::iter::repeat_n(false, pad));
        }
        Ok(b)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.batch * self.seq_len;
        if self.ids.len() != n || self.segments.len() != n || self.attention_mask.len() != n {
            return Err(Error::input("batch buffers do not match batch x seq_len"));
        }
        if self.seq_len > config.max_seq_len {
            return Err(Error::input(format!("sequence length {} exceeds max_seq_len {}", self.seq_len, config.max_seq_len)));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= config.vocab_size) {
            return Err(Error::config(format!("token id {bad} outside model vocabulary of {}", config.vocab_size)));
        }
        if let Some(&bad) = self.segments.iter().find(|&&s| s >= config.n_segment_types) {
            return Err(Error::config(format!("segment id {bad} outside {} segment types", config.n_segment_types)));
        }
        Ok(())
    }

    /// Flat row index of the `[CLS]` position of each sequence.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

/// Graph handles for every parameter of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::config(format!("missing parameter {path}")))
    }

    pub fn set(&mut self, path: impl Into<String>, v: Var) {
        self.vars.insert(path.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Record every parameter as a gradient-tracking leaf.
pub fn bind<F: Real>(g: &mut Graph<F>, params: &ParamStore<F>) -> Bound {
    Bound { vars: params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect() }
}

/// Record every parameter as a constant (evaluation).
pub fn bind_constants<F: Real>(g: &mut Graph<F>, params: &ParamStore<F>) -> Bound {
    Bound { vars: params.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect() }
}

type Dropout<'a> = Option<&'a mut dyn RngCore>;

fn dropout<F: Real>(g: &mut Graph<F>, x: Var, p: f64, rng: &mut Dropout<'_>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => Ok(g.dropout(x, p, &mut **r)?),
        _ => Ok(x),
    }
}

fn linear<F: Real>(g: &mut Graph<F>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, bias)?)
}

fn norm<F: Real>(g: &mut Graph<F>, b: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = b.get(&format!("{prefix}.gain"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias, F::of(eps))?)
}

fn attention<F: Real>(
    g: &mut Graph<F>,
    b: &Bound,
    cfg: &ModelConfig,
    pre: &str,
    x: Var,
    batch: &EncoderBatch,
    rng: &mut Dropout<'_>,
) -> Result<Var> {
    let (bs, s, nh, dh) = (batch.batch, batch.seq_len, cfg.n_heads, cfg.head_dim());
    let heads = |g: &mut Graph<F>, name: &str| -> Result<Var> {
        let y = linear(g, b, &format!("{pre}.attention.{name}"), x)?;
        let y = g.reshape(y, &[bs, s, nh, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(y, &[bs * nh, s, dh])?)
    };
    let q = heads(g, "query")?;
    let k = heads(g, "key")?;
    let v = heads(g, "value")?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, F::of(1.0 / (dh as f64).sqrt()))?;
    let mut keep = Vec::with_capacity(bs * nh * s * s);
    for bi in 0..bs {
        let row = &batch.attention_mask[bi * s..(bi + 1) * s];
        for _ in 0..nh * s {
            keep.extend_from_slice(row);
        }
    }
    let scores = g.mask_fill(scores, keep)?;
    let probs = g.softmax(scores, 2)?;
    let probs = dropout(g, probs, cfg.dropout_rate, rng)?;
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = g.reshape(ctx, &[bs, nh, s, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[bs * s, nh * dh])?;
    linear(g, b, &format!("{pre}.attention.output"), ctx)
}

/// Encoder trunk. Returns hidden states of shape `[batch, seq, hidden]`.
/// Padding positions receive zero attention weight from every query.
pub fn forward_encoder<F: Real>(g: &mut Graph<F>, b: &Bound, cfg: &ModelConfig, batch: &EncoderBatch, mut rng: Dropout<'_>) -> Result<Var> {
    batch.validate(cfg)?;
    let (bs, s, h) = (batch.batch, batch.seq_len, cfg.hidden_dim);
    let positions: Vec<usize> = (0..bs).flat_map(|_| 0..s).collect();
    let tok = g.embedding(b.get("embeddings.token")?, &batch.ids)?;
    let pos = g.embedding(b.get("embeddings.position")?, &positions)?;
    let seg = g.embedding(b.get("embeddings.segment")?, &batch.segments)?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, seg)?;
    let x = norm(g, b, "embeddings.norm", x, cfg.layer_norm_eps)?;
    let mut x = dropout(g, x, cfg.dropout_rate, &mut rng)?;
    for l in 0..cfg.n_layers {
        let pre = format!("encoder.layer.{l}");
        let a = attention(g, b, cfg, &pre, x, batch, &mut rng)?;
        let a = dropout(g, a, cfg.dropout_rate, &mut rng)?;
        let r = g.add(x, a)?;
        let x1 = norm(g, b, &format!("{pre}.attention.norm"), r, cfg.layer_norm_eps)?;
        let f = linear(g, b, &format!("{pre}.ffn.intermediate"), x1)?;
        let f = g.gelu(f)?;
        let f = linear(g, b, &format!("{pre}.ffn.output"), f)?;
        let f = dropout(g, f, cfg.dropout_rate, &mut rng)?;
        let r = g.add(x1, f)?;
        x = norm(g, b, &format!("{pre}.ffn.norm"), r, cfg.layer_norm_eps)?;
    }
    Ok(g.reshape(x, &[bs, s, h])?)
}

fn flat_hidden<F: Real>(g: &mut Graph<F>, hidden: Var) -> Result<(Var, usize, usize)> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 3 {
        return Err(Error::Numeric(crate::numerics::NumericError::Shape { op: "head input", lhs: shape, rhs: vec![0, 0, 0] }));
    }
    let flat = g.reshape(hidden, &[shape[0] * shape[1], shape[2]])?;
    Ok((flat, shape[0], shape[1]))
}

/// MLM logits `[n, vocab]` at selected flat rows (`batch_index * seq + position`).
pub fn mlm_logits_at<F: Real>(g: &mut Graph<F>, b: &Bound, cfg: &ModelConfig, hidden: Var, rows: &[usize]) -> Result<Var> {
    let (flat, _, _) = flat_hidden(g, hidden)?;
    let x = g.select_rows(flat, rows)?;
    let x = linear(g, b, "heads.mlm.transform", x)?;
    let x = g.gelu(x)?;
    let x = norm(g, b, "heads.mlm.norm", x, cfg.layer_norm_eps)?;
    let logits =
        if cfg.tie_embeddings { g.matmul_t(x, b.get("embeddings.token")?)? } else { g.matmul_t(x, b.get("heads.mlm.decoder.weight")?)? };
    Ok(g.add_bias(logits, b.get("heads.mlm.decoder.bias")?)?)
}

/// MLM logits for every position, `[batch, seq, vocab]`.
pub fn mlm_logits<F: Real>(g: &mut Graph<F>, b: &Bound, cfg: &ModelConfig, hidden: Var) -> Result<Var> {
    let shape = g.shape(hidden).to_vec();
    let rows: Vec<usize> = (0..shape[0] * shape[1]).collect();
    let l = mlm_logits_at(g, b, cfg, hidden, &rows)?;
    Ok(g.reshape(l, &[shape[0], shape[1], cfg.vocab_size])?)
}

fn pooled<F: Real>(g: &mut Graph<F>, b: &Bound, hidden: Var) -> Result<Var> {
    let (flat, bs, s) = flat_hidden(g, hidden)?;
    let rows: Vec<usize> = (0..bs).map(|i| i * s).collect();
    let cls = g.select_rows(flat, &rows)?;
    let p = linear(g, b, "pooler", cls)?;
    Ok(g.tanh(p)?)
}

/// Next-sentence logits `[batch, 2]` from the pooled `[CLS]` state.
pub fn nsp_logits<F: Real>(g: &mut Graph<F>, b: &Bound, hidden: Var) -> Result<Var> {
    let p = pooled(g, b, hidden)?;
    linear(g, b, "heads.nsp", p)
}

/// Token-classification logits `[batch, seq, n_labels]`.
pub fn ner_logits<F: Real>(g: &mut Graph<F>, b: &Bound, hidden: Var) -> Result<Var> {
    let (flat, bs, s) = flat_hidden(g, hidden)?;
    let l = linear(g, b, "heads.ner", flat)?;
    let n = g.shape(l)[1];
    Ok(g.reshape(l, &[bs, s, n])?)
}

/// Span-extraction logits: `(start [batch, seq], end [batch, seq])`.
pub fn qa_logits<F: Real>(g: &mut Graph<F>, b: &Bound, hidden: Var) -> Result<(Var, Var)> {
    let (flat, bs, s) = flat_hidden(g, hidden)?;
    let l = linear(g, b, "heads.qa", flat)?;
    let l = g.reshape(l, &[bs, s, 2])?;
    let l = g.permute(l, &[2, 0, 1])?;
    let start = g.select0(l, 0)?;
    let end = g.select0(l, 1)?;
    Ok((start, end))
}

/// Relation logits `[batch, n_relations]` from the pooled `[CLS]` state.
pub fn re_logits<F: Real>(g: &mut Graph<F>, b: &Bound, hidden: Var) -> Result<Var> {
    let p = pooled(g, b, hidden)?;
    linear(g, b, "heads.re", p)
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        match params.get("embeddings.token") {
            Some(t) if t.shape() == [config.vocab_size, config.hidden_dim] => {}
            _ => return Err(Error::config("token embedding missing or inconsistent with model config")),
        }
        Ok(Self { config, params })
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::config(format!("vocabulary has {} tokens but the model expects {}", vocab.len(), self.config.vocab_size)));
        }
        Ok(())
    }

    /// Log-softmax over the vocabulary at selected flat rows, without dropout.
    pub fn masked_log_probs(&self, batch: &EncoderBatch, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = bind_constants(&mut g, &self.params);
        let h = forward_encoder(&mut g, &b, &self.config, batch, None)?;
        let l = mlm_logits_at(&mut g, &b, &self.config, h, rows)?;
        let v = self.config.vocab_size;
        Ok(g.value(l).data().chunks(v).map(log_softmax).collect())
    }

    /// Hidden states `[batch, seq, hidden]` without dropout.
    pub fn hidden(&self, batch: &EncoderBatch) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = bind_constants(&mut g, &self.params);
        let h = forward_encoder(&mut g, &b, &self.config, batch, None)?;
        Ok(g.value(h).clone())
    }
}

pub(crate) fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
    let z: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
    let lz = z.ln() + mx;
    row.iter().map(|v| v.as_f64() - lz).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{add_head, init_params, HeadKind};
    use crate::numerics::IGNORE_INDEX;
    use crate::rng::substream;

    fn tiny(vocab: usize) -> (ModelConfig, ParamStore<f64>) {
        let mut cfg = ModelConfig::toy(vocab);
        cfg.hidden_dim = 16;
        cfg.n_heads = 2;
        cfg.ff_dim = 24;
        cfg.max_seq_len = 16;
        let p = init_params(&cfg, &mut substream(3, "init", 0)).unwrap();
        (cfg, p)
    }

    fn run_hidden(cfg: &ModelConfig, p: &ParamStore<f64>, batch: &EncoderBatch) -> Tensor<f64> {
        Model::new(cfg.clone(), p.clone()).unwrap().hidden(batch).unwrap()
    }

    #[test]
    fn all_pad_tail_is_finite() {
        let (cfg, p) = tiny(20);
        // [CLS] [SEP] then padding only
        let batch = EncoderBatch::from_rows(&[(vec![2, 3], vec![0, 0]), (vec![2, 7, 8, 9, 3], vec![0; 5])], 0).unwrap();
        let h = run_hidden(&cfg, &p, &batch);
        assert!(h.all_finite());
    }

    #[test]
    fn permuting_pad_tail_leaves_real_positions_unchanged() {
        let (cfg, p) = tiny(20);
        let mut a = EncoderBatch::from_rows(&[(vec![2, 5, 6, 3], vec![0; 4])], 0).unwrap();
        // Extend with padding whose ids/segments differ between the two runs.
        for (id, seg) in [(11, 1), (12, 0), (13, 1)] {
            a.ids.push(id);
            a.segments.push(seg);
            a.attention_mask.push(false);
        }
        a.seq_len = 7;
        let mut b = a.clone();
        b.ids[4..7].reverse();
        b.segments[4..7].reverse();
        let ha = run_hidden(&cfg, &p, &a);
        let hb = run_hidden(&cfg, &p, &b);
        let hd = cfg.hidden_dim;
        assert_eq!(&ha.data()[..4 * hd], &hb.data()[..4 * hd]);
    }

    #[test]
    fn single_token_identity_layer_is_layer_normed_embedding() {
        let mut cfg = ModelConfig::toy(10);
        cfg.n_layers = 1;
        cfg.hidden_dim = 4;
        cfg.n_heads = 1;
        cfg.ff_dim = 8;
        cfg.max_seq_len = 4;
        cfg.layer_norm_eps = 1e-12;
        let mut p: ParamStore<f64> = init_params(&cfg, &mut substream(9, "init", 0)).unwrap();
        let eye = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        for proj in ["query", "key", "value", "output"] {
            p.insert(format!("encoder.layer.0.attention.{proj}.weight"), eye.clone());
        }
        p.insert("encoder.layer.0.ffn.intermediate.weight", Tensor::zeros(&[4, 8]));
        p.insert("encoder.layer.0.ffn.output.weight", Tensor::zeros(&[8, 4]));
        let batch = EncoderBatch::from_rows(&[(vec![6], vec![0])], 0).unwrap();
        let h = run_hidden(&cfg, &p, &batch);

        // Hand trace: e = tok + pos + seg; LN(e); attention over one token
        // returns its value; LN(x + x) = LN(x); zero FFN leaves LN(LN(x)).
        let ln = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) / (var + 1e-12).sqrt()).collect()
        };
        let tok = &p.get("embeddings.token").unwrap().data()[6 * 4..7 * 4];
        let pos = &p.get("embeddings.position").unwrap().data()[0..4];
        let seg = &p.get("embeddings.segment").unwrap().data()[0..4];
        let e: Vec<f64> = (0..4).map(|i| tok[i] + pos[i] + seg[i]).collect();
        let expect = ln(&ln(&e));
        for (a, b) in h.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_permitted_positions() {
        let (cfg, p) = tiny(20);
        let batch = EncoderBatch::from_rows(&[(vec![2, 5, 3], vec![0; 3]), (vec![2, 5, 6, 7, 3], vec![0; 5])], 0).unwrap();
        let mut g = Graph::<f64>::new();
        let b = bind_constants(&mut g, &p);
        forward_encoder(&mut g, &b, &cfg, &batch, None).unwrap();
        // Softmax outputs are the only [B*nh, S, S] tensors on the tape whose
        // rows sum to one; find them and check the mask.
        let s = batch.seq_len;
        let mut found = 0;
        for i in 0..g.len() {
            let t = g.value(Var(i));
            if t.shape() != [batch.batch * cfg.n_heads, s, s] {
                continue;
            }
            let rows: Vec<&[f64]> = t.data().chunks(s).collect();
            if !rows.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6) {
                continue;
            }
            found += 1;
            for (ri, r) in rows.iter().enumerate() {
                let bi = ri / (cfg.n_heads * s);
                for (j, &w) in r.iter().enumerate() {
                    if !batch.attention_mask[bi * s + j] {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
        assert_eq!(found, cfg.n_layers);
    }

    #[test]
    fn dropout_off_is_bit_identical() {
        let (cfg, p) = tiny(20);
        let batch = EncoderBatch::from_rows(&[(vec![2, 5, 6, 3], vec![0; 4])], 0).unwrap();
        assert_eq!(run_hidden(&cfg, &p, &batch), run_hidden(&cfg, &p, &batch));
    }

    #[test]
    fn head_shapes() {
        let (cfg, mut p) = tiny(20);
        let mut rng = substream(1, "head", 0);
        add_head(&mut p, &cfg, HeadKind::Ner, 5, &mut rng).unwrap();
        add_head(&mut p, &cfg, HeadKind::Qa, 2, &mut rng).unwrap();
        add_head(&mut p, &cfg, HeadKind::Re, 3, &mut rng).unwrap();
        let rows: Vec<(Vec<usize>, Vec<usize>)> = (0..2).map(|_| (vec![4; 16], vec![0; 16])).collect();
        let batch = EncoderBatch::from_rows(&rows, 0).unwrap();
        let mut g = Graph::<f64>::new();
        let b = bind_constants(&mut g, &p);
        let h = forward_encoder(&mut g, &b, &cfg, &batch, None).unwrap();
        let ner = ner_logits(&mut g, &b, h).unwrap();
        assert_eq!(g.shape(ner), &[2, 16, 5]);
        let (s, e) = qa_logits(&mut g, &b, h).unwrap();
        assert_eq!(g.shape(s), &[2, 16]);
        assert_eq!(g.shape(e), &[2, 16]);
        let re = re_logits(&mut g, &b, h).unwrap();
        assert_eq!(g.shape(re), &[2, 3]);
        let nsp = nsp_logits(&mut g, &b, h).unwrap();
        assert_eq!(g.shape(nsp), &[2, 2]);
        let mlm = mlm_logits(&mut g, &b, &cfg, h).unwrap();
        assert_eq!(g.shape(mlm), &[2, 16, 20]);
        assert!(g.value(mlm).all_finite());
    }

    #[test]
    fn zero_hidden_and_zero_head_is_uniform() {
        let (cfg, mut p) = tiny(20);
        add_head(&mut p, &cfg, HeadKind::Ner, 4, &mut substream(1, "head", 0)).unwrap();
        p.insert("heads.ner.weight", Tensor::zeros(&[16, 4]));
        let mut g = Graph::<f64>::new();
        let b = bind_constants(&mut g, &p);
        let h = g.constant(Tensor::zeros(&[1, 3, 16]));
        let l = ner_logits(&mut g, &b, h).unwrap();
        let pr = g.softmax(l, 2).unwrap();
        assert!(g.value(pr).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn vocab_mismatch_is_config_error() {
        let (cfg, p) = tiny(20);
        let batch = EncoderBatch::from_rows(&[(vec![2, 25, 3], vec![0; 3])], 0).unwrap();
        let mut g = Graph::<f64>::new();
        let b = bind_constants(&mut g, &p);
        assert!(matches!(forward_encoder(&mut g, &b, &cfg, &batch, None), Err(Error::Config(_))));
    }

    #[test]
    fn mlm_nsp_loss_gradient_check_two_layer_hidden_32() {
        let mut cfg = ModelConfig::toy(17);
        cfg.hidden_dim = 32;
        cfg.ff_dim = 48;
        cfg.max_seq_len = 8;
        let p: ParamStore<f64> = init_params(&cfg, &mut substream(5, "init", 0)).unwrap();
        let batch = EncoderBatch::from_rows(&[(vec![2, 7, 4, 9, 3], vec![0, 0, 0, 1, 1]), (vec![2, 11, 3], vec![0, 0, 0])], 0).unwrap();
        let loss = |g: &mut Graph<f64>, bound: &Bound| -> std::result::Result<Var, crate::numerics::NumericError> {
            let h = forward_encoder(g, bound, &cfg, &batch, None).map_err(num)?;
            let l = mlm_logits_at(g, bound, &cfg, h, &[2, 6]).map_err(num)?;
            let mlm = g.cross_entropy(l, &[4, 11], IGNORE_INDEX)?;
            let n = nsp_logits(g, bound, h).map_err(num)?;
            let nsp = g.cross_entropy(n, &[0, 1], IGNORE_INDEX)?;
            g.add(mlm, nsp)
        };
        for path in
            ["encoder.layer.0.attention.query.weight", "embeddings.token", "encoder.layer.1.ffn.intermediate.weight", "pooler.weight"]
        {
            let x = p.get(path).unwrap().clone();
            let coords: Vec<usize> = (0..x.numel()).step_by(x.numel() / 23 + 1).collect();
            let err = crate::numerics::grad_check_coords(
                |g, v| {
                    let mut b = bind(g, &p);
                    b.set(path, v);
                    loss(g, &b)
                },
                &x,
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-4, "{path}: {err}");
        }
    }

    fn num(e: Error) -> crate::numerics::NumericError {
        match e {
            Error::Numeric(n) => n,
            other => crate::numerics::NumericError::Invalid { op: "model", msg: other.to_string() },
        }
    }
}
