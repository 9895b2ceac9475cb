//! Shared fixtures for the benchmarks.

use contilab_core::model::{init_params, Model, ModelConfig};
use contilab_core::numerics::Tensor;
use contilab_core::rng::substream;
use contilab_core::synthetic::{corpus, Domain, Lexicon};
use contilab_core::tokenizer::{train_vocab, Vocabulary};
use rand::Rng;

pub struct Fixture {
    pub vocab: Vocabulary,
    pub sentences: Vec<String>,
    pub model: Model<f32>,
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = substream(seed, "bench", 0);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Toy model over a synthetic medical corpus.
pub fn fixture() -> Fixture {
    let lex = Lexicon::new(20, 1);
    let c = corpus(&lex, Domain::Medical, 100, 2);
    let sentences: Vec<String> = c.sentences().map(str::to_string).collect();
    let vocab = train_vocab(sentences.iter().map(String::as_str), 800, 2, true).expect("vocabulary");
    let config = ModelConfig::toy(vocab.len());
    let params = init_params(&config, &mut substream(1, "init", 0)).expect("init");
    let model = Model::new(config, params).expect("model");
    Fixture { vocab, sentences, model }
}
