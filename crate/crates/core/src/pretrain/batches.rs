use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::model::EncoderBatch;
use crate::numerics::IGNORE_INDEX;
use crate::rng::substream;
use crate::tokenizer::{encode, Vocabulary, CONTINUATION};

pub const IS_NEXT: usize = 0;
pub const NOT_NEXT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Share of selected positions replaced by `[MASK]`.
    pub mask_token_frac: f64,
    /// Share replaced by a random non-special token; the rest stay unchanged.
    pub random_token_frac: f64,
    /// Replace every selected position with `[MASK]`.
    pub mask_only: bool,
    /// Select whole words rather than individual pieces.
    pub whole_word: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { mask_prob: 0.15, mask_token_frac: 0.8, random_token_frac: 0.1, mask_only: false, whole_word: false }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::config(format!("mask_prob {} outside (0, 1]", self.mask_prob)));
        }
        if !ok(self.mask_token_frac) || !ok(self.random_token_frac) || self.mask_token_frac + self.random_token_frac > 1.0 + 1e-12 {
            return Err(Error::config("corruption fractions must be in [0, 1] and sum to at most 1"));
        }
        Ok(())
    }

    /// `max(1, round(mask_prob * maskable))`, or 0 with nothing maskable.
    pub fn selection_count(&self, maskable: usize) -> usize {
        if maskable == 0 {
            return 0;
        }
        ((self.mask_prob * maskable as f64).round() as usize).clamp(1, maskable)
    }
}

/// Corrupt a sequence for MLM. Returns the corrupted ids and the targets
/// (original id at corrupted positions, [`IGNORE_INDEX`] elsewhere).
pub fn mask_tokens<R: Rng + ?Sized>(ids: &[usize], vocab: &Vocabulary, cfg: &MaskingConfig, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let specials = vocab.specials();
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !vocab.is_special(ids[i]) || ids[i] == specials.unk).collect();
    let count = cfg.selection_count(maskable.len());
    let mut selected: Vec<usize> = if cfg.whole_word {
        let mut words: Vec<Vec<usize>> = Vec::new();
        for &i in &maskable {
            let cont = vocab.token(ids[i]).is_some_and(|t| t.starts_with(CONTINUATION));
            match words.last_mut() {
                Some(w) if cont && *w.last().unwrap() + 1 == i => w.push(i),
                _ => words.push(vec![i]),
            }
        }
        words.shuffle(rng);
        let mut out = Vec::new();
        for w in words {
            if out.len() >= count {
                break;
            }
            out.extend(w);
        }
        out
    } else {
        rand::seq::index::sample(rng, maskable.len(), count).into_iter().map(|k| maskable[k]).collect()
    };
    selected.sort_unstable();

    let mut out = ids.to_vec();
    let mut targets = vec![IGNORE_INDEX; ids.len()];
    for i in selected {
        targets[i] = ids[i];
        if cfg.mask_only {
            out[i] = specials.mask;
            continue;
        }
        let r: f64 = rng.gen();
        if r < cfg.mask_token_frac {
            out[i] = specials.mask;
        } else if r < cfg.mask_token_frac + cfg.random_token_frac {
            out[i] = random_regular(vocab, rng);
        }
    }
    (out, targets)
}

fn random_regular<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R) -> usize {
    loop {
        let id = rng.gen_range(0..vocab.len());
        if !vocab.is_special(id) {
            return id;
        }
    }
}

/// Corpus pre-encoded for pair sampling.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    docs: Vec<Vec<Vec<usize>>>,
    /// `(doc, sentence)` with a following sentence in the same document.
    pairs: Vec<(usize, usize)>,
}

impl EncodedCorpus {
    pub fn new(corpus: &Corpus, vocab: &Vocabulary) -> Result<Self> {
        let docs: Vec<Vec<Vec<usize>>> = corpus.documents.iter().map(|d| d.iter().map(|s| encode(s, vocab).ids).collect()).collect();
        let pairs: Vec<(usize, usize)> =
            docs.iter().enumerate().flat_map(|(d, s)| (0..s.len().saturating_sub(1)).map(move |i| (d, i))).collect();
        if pairs.is_empty() {
            return Err(Error::input("corpus needs at least one document with two or more sentences"));
        }
        Ok(Self { docs, pairs })
    }

    pub fn n_documents(&self) -> usize {
        self.docs.len()
    }

    /// Half consecutive pairs, half pairs whose second sentence comes from a
    /// different document. Single-sentence documents only supply seconds.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (&[usize], &[usize], usize) {
        let (d, i) = self.pairs[rng.gen_range(0..self.pairs.len())];
        let a = &self.docs[d][i];
        if rng.gen_bool(0.5) || self.docs.len() < 2 {
            return (a, &self.docs[d][i + 1], IS_NEXT);
        }
        let mut other = rng.gen_range(0..self.docs.len() - 1);
        if other >= d {
            other += 1;
        }
        let s = rng.gen_range(0..self.docs[other].len());
        (a, &self.docs[other][s], NOT_NEXT)
    }
}

/// `[CLS] a [SEP] b [SEP]` with the longer side trimmed from the end until
/// the pair fits in `max_seq_len - 3` pieces.
pub fn build_pair(a: &[usize], b: &[usize], max_seq_len: usize, vocab: &Vocabulary) -> (Vec<usize>, Vec<usize>) {
    let budget = max_seq_len.saturating_sub(3);
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb > budget {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let s = vocab.specials();
    let mut ids = Vec::with_capacity(la + lb + 3);
    ids.push(s.cls);
    ids.extend_from_slice(&a[..la]);
    ids.push(s.sep);
    let first = ids.len();
    ids.extend_from_slice(&b[..lb]);
    ids.push(s.sep);
    let mut segs = vec![0; first];
    segs.resize(ids.len(), 1);
    (ids, segs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub encoder: EncoderBatch,
    /// Flat `[batch * seq]`, [`IGNORE_INDEX`] where not corrupted.
    pub mlm_targets: Vec<usize>,
    pub nsp_labels: Vec<usize>,
}

impl PretrainBatch {
    /// Flat rows carrying a target, with those targets.
    pub fn mlm_rows(&self) -> (Vec<usize>, Vec<usize>) {
        self.mlm_targets.iter().enumerate().filter(|(_, &t)| t != IGNORE_INDEX).map(|(i, &t)| (i, t)).unzip()
    }
}

/// Build one batch. NSP pairs and masking draw from separate generators.
pub fn make_batch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    corpus: &EncodedCorpus,
    vocab: &Vocabulary,
    batch_size: usize,
    max_seq_len: usize,
    masking: &MaskingConfig,
    nsp_rng: &mut R1,
    mask_rng: &mut R2,
) -> Result<PretrainBatch> {
    let mut rows = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (a, b, label) = corpus.sample_pair(nsp_rng);
        let (ids, segs) = build_pair(a, b, max_seq_len, vocab);
        let (masked, t) = mask_tokens(&ids, vocab, masking, mask_rng);
        rows.push((masked, segs));
        targets.push(t);
        labels.push(label);
    }
    let encoder = EncoderBatch::from_rows(&rows, vocab.specials().pad)?;
    let mut mlm_targets = Vec::with_capacity(encoder.batch * encoder.seq_len);
    for t in targets {
        let pad = encoder.seq_len - t.len();
        mlm_targets.extend(t);
        mlm_targets.extend(std::iter::repeat_n(IGNORE_INDEX, pad));
    }
    Ok(PretrainBatch { encoder, mlm_targets, nsp_labels: labels })
}

/// Batch for training step `step`, drawn from the `{prefix}nsp` and
/// `{prefix}masking` substreams of `seed`. A pure function of its arguments.
#[allow(clippy::too_many_arguments)]
pub fn batch_for_step(
    corpus: &EncodedCorpus,
    vocab: &Vocabulary,
    batch_size: usize,
    max_seq_len: usize,
    masking: &MaskingConfig,
    seed: u64,
    prefix: &str,
    step: u64,
) -> Result<PretrainBatch> {
    let mut nsp = substream(seed, &format!("{prefix}nsp"), step);
    let mut mask = substream(seed, &format!("{prefix}masking"), step);
    make_batch(corpus, vocab, batch_size, max_seq_len, masking, &mut nsp, &mut mask)
}

/// Endless deterministic stream of batches starting at `start_step`.
pub fn make_mlm_nsp_batches<'a>(
    corpus: &'a EncodedCorpus,
    vocab: &'a Vocabulary,
    batch_size: usize,
    max_seq_len: usize,
    masking: &'a MaskingConfig,
    seed: u64,
    start_step: u64,
) -> impl Iterator<Item = Result<PretrainBatch>> + 'a {
    (start_step..).map(move |s| batch_for_step(corpus, vocab, batch_size, max_seq_len, masking, seed, "", s))
}
