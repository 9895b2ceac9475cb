use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// All model weights by dotted path, iterated in sorted path order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<F>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<F>> {
        self.tensors.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Where a parameter sits in the network, used by per-layer policies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Layer(usize),
    /// Task heads and the pooler.
    Head(String),
}

impl ParamGroup {
    pub fn of(path: &str, n_layers: usize) -> Result<Self> {
        let mut parts = path.split('.');
        match parts.next() {
            Some("embeddings") => Ok(ParamGroup::Embedding),
            Some("encoder") => {
                let (Some("layer"), Some(idx)) = (parts.next(), parts.next()) else {
                    return Err(Error::config(format!("cannot resolve layer of parameter {path}")));
                };
                let k: usize = idx.parse().map_err(|_| Error::config(format!("bad layer index in {path}")))?;
                if k >= n_layers {
                    return Err(Error::config(format!("parameter {path} names layer {k} of a {n_layers}-layer model")));
                }
                Ok(ParamGroup::Layer(k))
            }
            Some("pooler") => Ok(ParamGroup::Head("pooler".into())),
            Some("heads") => match parts.next() {
                Some(name) => Ok(ParamGroup::Head(name.to_string())),
                None => Err(Error::config(format!("cannot resolve head of parameter {path}"))),
            },
            _ => Err(Error::config(format!("cannot resolve parameter path {path}"))),
        }
    }
}

/// Whether weight decay should skip this parameter (biases and norms).
pub fn is_no_decay(path: &str) -> bool {
    path.ends_with(".bias") || path.contains(".norm.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mlm,
    Nsp,
    Ner,
    Qa,
    Re,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Mlm => "mlm",
            HeadKind::Nsp => "nsp",
            HeadKind::Ner => "ner",
            HeadKind::Qa => "qa",
            HeadKind::Re => "re",
        }
    }
}

fn trunc_normal<F: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(F::of(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn norm<F: Real>(p: &mut ParamStore<F>, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.gain"), Tensor::full(&[d], F::one()));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

fn dense<F: Real, R: Rng + ?Sized>(p: &mut ParamStore<F>, prefix: &str, din: usize, dout: usize, std: f64, rng: &mut R) {
    p.insert(format!("{prefix}.weight"), trunc_normal(&[din, dout], std, rng));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
}

/// Fresh trunk plus MLM and NSP heads. Weights ~ truncated normal(0, init_std).
pub fn init_params<F: Real, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore<F>> {
    config.validate()?;
    let (h, std) = (config.hidden_dim, config.init_std);
    let mut p = ParamStore::new();
    p.insert("embeddings.token", trunc_normal(&[config.vocab_size, h], std, rng));
    p.insert("embeddings.position", trunc_normal(&[config.max_seq_len, h], std, rng));
    p.insert("embeddings.segment", trunc_normal(&[config.n_segment_types, h], std, rng));
    norm(&mut p, "embeddings.norm", h);
    for l in 0..config.n_layers {
        let pre = format!("encoder.layer.{l}");
        for proj in ["query", "key", "value", "output"] {
            dense(&mut p, &format!("{pre}.attention.{proj}"), h, h, std, rng);
        }
        norm(&mut p, &format!("{pre}.attention.norm"), h);
        dense(&mut p, &format!("{pre}.ffn.intermediate"), h, config.ff_dim, std, rng);
        dense(&mut p, &format!("{pre}.ffn.output"), config.ff_dim, h, std, rng);
        norm(&mut p, &format!("{pre}.ffn.norm"), h);
    }
    dense(&mut p, "pooler", h, h, std, rng);
    add_head(&mut p, config, HeadKind::Mlm, config.vocab_size, rng)?;
    add_head(&mut p, config, HeadKind::Nsp, 2, rng)?;
    Ok(p)
}

/// Path and shape of every parameter [`init_params`] creates.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (config.hidden_dim, config.ff_dim);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![config.vocab_size, h]),
        ("embeddings.position".to_string(), vec![config.max_seq_len, h]),
        ("embeddings.segment".to_string(), vec![config.n_segment_types, h]),
    ];
    let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.gain"), vec![h]));
        out.push((format!("{p}.bias"), vec![h]));
    };
    let dense = |out: &mut Vec<(String, Vec<usize>)>, p: &str, i: usize, o: usize| {
        out.push((format!("{p}.weight"), vec![i, o]));
        out.push((format!("{p}.bias"), vec![o]));
    };
    norm(&mut out, "embeddings.norm");
    for l in 0..config.n_layers {
        let pre = format!("encoder.layer.{l}");
        for proj in ["query", "key", "value", "output"] {
            dense(&mut out, &format!("{pre}.attention.{proj}"), h, h);
        }
        norm(&mut out, &format!("{pre}.attention.norm"));
        dense(&mut out, &format!("{pre}.ffn.intermediate"), h, f);
        dense(&mut out, &format!("{pre}.ffn.output"), f, h);
        norm(&mut out, &format!("{pre}.ffn.norm"));
    }
    dense(&mut out, "pooler", h, h);
    dense(&mut out, "heads.mlm.transform", h, h);
    norm(&mut out, "heads.mlm.norm");
    if !config.tie_embeddings {
        out.push(("heads.mlm.decoder.weight".to_string(), vec![config.vocab_size, h]));
    }
    out.push(("heads.mlm.decoder.bias".to_string(), vec![config.vocab_size]));
    dense(&mut out, "heads.nsp", h, 2);
    out.sort();
    out
}

/// Initialize (or replace) the weights of one head.
pub fn add_head<F: Real, R: Rng + ?Sized>(
    p: &mut ParamStore<F>,
    config: &ModelConfig,
    kind: HeadKind,
    n_labels: usize,
    rng: &mut R,
) -> Result<()> {
    let (h, std) = (config.hidden_dim, config.init_std);
    let prefix = format!("heads.{}", kind.name());
    let stale: Vec<String> = p.paths().filter(|k| k.starts_with(&format!("{prefix}."))).cloned().collect();
    for k in stale {
        p.remove(&k);
    }
    match kind {
        HeadKind::Mlm => {
            if n_labels != config.vocab_size {
                return Err(Error::config("MLM head must cover the vocabulary"));
            }
            dense(p, "heads.mlm.transform", h, h, std, rng);
            norm(p, "heads.mlm.norm", h);
            if !config.tie_embeddings {
                p.insert("heads.mlm.decoder.weight", trunc_normal(&[config.vocab_size, h], std, rng));
            }
            p.insert("heads.mlm.decoder.bias", Tensor::zeros(&[config.vocab_size]));
        }
        HeadKind::Qa => dense(p, &prefix, h, 2, std, rng),
        _ => {
            if n_labels == 0 {
                return Err(Error::config(format!("{} head needs at least one label", kind.name())));
            }
            dense(p, &prefix, h, n_labels, std, rng)
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn every_path_resolves() {
        let cfg = ModelConfig::toy(50);
        let p: ParamStore<f32> = init_params(&cfg, &mut substream(1, "init", 0)).unwrap();
        for path in p.paths() {
            ParamGroup::of(path, cfg.n_layers).unwrap();
        }
        assert_eq!(ParamGroup::of("encoder.layer.1.ffn.output.weight", 2).unwrap(), ParamGroup::Layer(1));
        assert!(ParamGroup::of("encoder.layer.7.ffn.output.weight", 2).is_err());
        assert!(ParamGroup::of("mystery.weight", 2).is_err());
    }

    #[test]
    fn init_is_truncated_and_seeded() {
        let cfg = ModelConfig::toy(50);
        let a: ParamStore<f32> = init_params(&cfg, &mut substream(1, "init", 0)).unwrap();
        let b: ParamStore<f32> = init_params(&cfg, &mut substream(1, "init", 0)).unwrap();
        assert_eq!(a, b);
        let w = a.get("heads.nsp.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert_eq!(a.get("embeddings.norm.gain").unwrap().data()[0], 1.0);
    }

    #[test]
    fn shapes_match_init() {
        for tie in [true, false] {
            let cfg = ModelConfig { tie_embeddings: tie, ..ModelConfig::toy(30) };
            let p: ParamStore<f32> = init_params(&cfg, &mut substream(1, "init", 0)).unwrap();
            let got: Vec<(String, Vec<usize>)> = p.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
            assert_eq!(got, param_shapes(&cfg));
        }
    }

    #[test]
    fn head_dim_must_divide() {
        let mut cfg = ModelConfig::toy(50);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
