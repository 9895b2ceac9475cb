//! Intrinsic evaluation: pseudo-perplexity over a corpus and top-5 mean
//! reciprocal rank over a set of masked words.

mod masked_set;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderBatch, Model};
use crate::numerics::Real;
use crate::tokenizer::{encode, pretokenize, Vocabulary, CONTINUATION};

pub use masked_set::{load_masked_set, parse_masked_set, MaskedEvalItem, MaskedRecord, MaskedSetReport, Masking};

pub const TOP_K: usize = 5;

/// Anything that scores the vocabulary at chosen positions of a batch.
pub trait MaskedLanguageModel {
    fn max_seq_len(&self) -> usize;
    /// Log-probabilities over the vocabulary at flat rows
    /// (`batch_index * seq_len + position`).
    fn log_probs(&self, batch: &EncoderBatch, rows: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl<F: Real> MaskedLanguageModel for Model<F> {
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn log_probs(&self, batch: &EncoderBatch, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.masked_log_probs(batch, rows)
    }
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    c: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpplReport {
    pub pppl: f64,
    /// Token positions scored.
    pub n_tokens: usize,
    pub sum_log_prob: f64,
    /// Sentences whose pieces were cut to fit the model.
    pub truncated_sentences: usize,
}

fn sentence_inputs(sentences: &[&str], vocab: &Vocabulary, max_seq_len: usize) -> (Vec<Vec<usize>>, usize) {
    let budget = max_seq_len.saturating_sub(2);
    let mut truncated = 0;
    let seqs = sentences
        .iter()
        .map(|s| {
            let mut seq = encode(s, vocab);
            if seq.len() > budget {
                truncated += 1;
                seq = seq.truncated(budget);
            }
            seq.with_specials(vocab).ids
        })
        .collect();
    (seqs, truncated)
}

fn finish(sum: NeumaierSum, n: usize, truncated: usize) -> Result<PpplReport> {
    if n == 0 {
        return Err(Error::input("pseudo-perplexity needs at least one token"));
    }
    let s = sum.value();
    Ok(PpplReport { pppl: (-s / n as f64).exp(), n_tokens: n, sum_log_prob: s, truncated_sentences: truncated })
}

/// Pseudo-perplexity: every token of every sentence is masked alone and
/// scored given the rest; `exp(-(1/N) sum log p)`. Masked copies are scored
/// `batch_size` at a time.
pub fn pppl<M: MaskedLanguageModel + ?Sized>(model: &M, vocab: &Vocabulary, sentences: &[&str], batch_size: usize) -> Result<PpplReport> {
    let (seqs, truncated) = sentence_inputs(sentences, vocab, model.max_seq_len());
    let mask = vocab.specials().mask;
    let jobs: Vec<(usize, usize)> = seqs.iter().enumerate().flat_map(|(i, s)| (1..s.len() - 1).map(move |t| (i, t))).collect();
    let mut sum = NeumaierSum::default();
    for chunk in jobs.chunks(batch_size.max(1)) {
        let rows: Vec<(Vec<usize>, Vec<usize>)> = chunk
            .iter()
            .map(|&(i, t)| {
                let mut ids = seqs[i].clone();
                ids[t] = mask;
                let n = ids.len();
                (ids, vec![0; n])
            })
            .collect();
        let batch = EncoderBatch::from_rows(&rows, vocab.specials().pad)?;
        let flat: Vec<usize> = chunk.iter().enumerate().map(|(b, &(_, t))| b * batch.seq_len + t).collect();
        let lp = model.log_probs(&batch, &flat)?;
        for (row, &(i, t)) in lp.iter().zip(chunk) {
            sum.add(row[seqs[i][t]]);
        }
    }
    finish(sum, jobs.len(), truncated)
}

/// Reference one-mask-at-a-time loop with plain summation order.
pub fn pppl_naive<M: MaskedLanguageModel + ?Sized>(model: &M, vocab: &Vocabulary, sentences: &[&str]) -> Result<PpplReport> {
    let (seqs, truncated) = sentence_inputs(sentences, vocab, model.max_seq_len());
    let mut total = 0.0;
    let mut n = 0;
    for seq in &seqs {
        for t in 1..seq.len() - 1 {
            let mut ids = seq.clone();
            ids[t] = vocab.specials().mask;
            let len = ids.len();
            let batch = EncoderBatch::from_rows(&[(ids, vec![0; len])], vocab.specials().pad)?;
            total += model.log_probs(&batch, &[t])?[0][seq[t]];
            n += 1;
        }
    }
    let mut s = NeumaierSum::default();
    s.add(total);
    finish(s, n, truncated)
}

/// Top-k predictions at one masked position, highest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRanking {
    /// `(token id, token, probability)`, probabilities non-increasing,
    /// ties broken by ascending id.
    pub top: Vec<(usize, String, f64)>,
    /// 1-based rank of the target within `top`.
    pub rank: Option<usize>,
}

impl PredictionRanking {
    pub fn from_log_probs(log_probs: &[f64], target: usize, vocab: &Vocabulary) -> Self {
        let mut ids: Vec<usize> = (0..log_probs.len()).collect();
        ids.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
        ids.truncate(TOP_K);
        let rank = ids.iter().position(|&i| i == target).map(|r| r + 1);
        let top = ids.iter().map(|&i| (i, vocab.token(i).unwrap_or("").to_string(), log_probs[i].exp())).collect();
        Self { top, rank }
    }

    /// `1/rank` inside the top-k, otherwise 0.
    pub fn score(&self) -> f64 {
        self.rank.map_or(0.0, |r| 1.0 / r as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub source_id: String,
    pub answer: String,
    pub subdomain: String,
    pub score: f64,
    pub ranking: PredictionRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub source_id: String,
    pub answer: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    /// Mean over scored masking instances.
    pub mrr: f64,
    pub n_scored: usize,
    pub items: Vec<ItemResult>,
    pub excluded: Vec<Exclusion>,
    /// Mean score per source sentence.
    pub per_sentence: BTreeMap<String, f64>,
    pub per_subdomain: BTreeMap<String, f64>,
}

/// Vocabulary id of a whole-word single-token target, or why there is none.
pub fn single_token_target(answer: &str, vocab: &Vocabulary) -> std::result::Result<usize, String> {
    let words = pretokenize(answer);
    if words.len() != 1 {
        return Err(format!("answer spans {} words", words.len()));
    }
    let norm = vocab.normalize(&words[0].text);
    match vocab.id(&norm) {
        Some(id) if !vocab.is_special(id) && !norm.starts_with(CONTINUATION) => Ok(id),
        _ => Err(format!("{norm:?} is not a single vocabulary token")),
    }
}

fn masked_input(item: &MaskedEvalItem, vocab: &Vocabulary, max_seq_len: usize) -> (Vec<usize>, usize) {
    let chars: Vec<char> = item.text.chars().collect();
    let before: String = chars[..item.start].iter().collect();
    let after: String = chars[item.end..].iter().collect();
    let mut left = encode(&before, vocab).ids;
    let mut right = encode(&after, vocab).ids;
    let budget = max_seq_len.saturating_sub(3);
    while left.len() + right.len() > budget {
        if left.len() >= right.len() {
            left.remove(0);
        } else {
            right.pop();
        }
    }
    let s = vocab.specials();
    let mut ids = vec![s.cls];
    ids.extend(left);
    let pos = ids.len();
    ids.push(s.mask);
    ids.extend(right);
    ids.push(s.sep);
    (ids, pos)
}

/// Top-5 mean reciprocal rank over masking instances. Targets that are not a
/// single whole-word vocabulary token are excluded and listed.
pub fn mrr<M: MaskedLanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    items: &[MaskedEvalItem],
    batch_size: usize,
) -> Result<MrrReport> {
    let mut excluded = Vec::new();
    let mut jobs = Vec::new();
    for item in items {
        match single_token_target(&item.answer, vocab) {
            Ok(id) => jobs.push((item, id)),
            Err(reason) => excluded.push(Exclusion { source_id: item.source_id.clone(), answer: item.answer.clone(), reason }),
        }
    }
    if jobs.is_empty() {
        return Err(Error::input(format!("no scorable items ({} excluded)", excluded.len())));
    }
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(batch_size.max(1)) {
        let inputs: Vec<(Vec<usize>, usize)> = chunk.iter().map(|(it, _)| masked_input(it, vocab, model.max_seq_len())).collect();
        let rows: Vec<(Vec<usize>, Vec<usize>)> = inputs.iter().map(|(ids, _)| (ids.clone(), vec![0; ids.len()])).collect();
        let batch = EncoderBatch::from_rows(&rows, vocab.specials().pad)?;
        let flat: Vec<usize> = inputs.iter().enumerate().map(|(b, (_, p))| b * batch.seq_len + p).collect();
        let lp = model.log_probs(&batch, &flat)?;
        for (row, (item, target)) in lp.iter().zip(chunk) {
            let ranking = PredictionRanking::from_log_probs(row, *target, vocab);
            results.push(ItemResult {
                source_id: item.source_id.clone(),
                answer: item.answer.clone(),
                subdomain: item.subdomain.clone(),
                score: ranking.score(),
                ranking,
            });
        }
    }
    Ok(summarize(results, excluded))
}

fn group_mean<'a>(pairs: impl Iterator<Item = (&'a str, f64)>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (NeumaierSum, usize)> = BTreeMap::new();
    for (k, v) in pairs {
        let e = acc.entry(k.to_string()).or_default();
        e.0.add(v);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s.value() / n as f64)).collect()
}

/// Aggregate per-item results; the mean is independent of item order.
pub fn summarize(items: Vec<ItemResult>, excluded: Vec<Exclusion>) -> MrrReport {
    let mut scores: Vec<f64> = items.iter().map(|i| i.score).collect();
    scores.sort_by(f64::total_cmp);
    let mut s = NeumaierSum::default();
    scores.iter().for_each(|&x| s.add(x));
    let n = items.len();
    MrrReport {
        mrr: if n == 0 { 0.0 } else { s.value() / n as f64 },
        n_scored: n,
        per_sentence: group_mean(items.iter().map(|i| (i.source_id.as_str(), i.score))),
        per_subdomain: group_mean(items.iter().map(|i| (i.subdomain.as_str(), i.score))),
        items,
        excluded,
    }
}
