use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{char_slice, AnnotatedExample, Task, TaskDataset};
use super::metrics::{ner_f1, qa_f1, re_f1, Entity, Prf};
use super::report::{SeedScore, TaskReport};
use crate::cfmit::llrd_lr;
use crate::error::{Error, Result};
use crate::model::{
    add_head, bind, bind_constants, forward_encoder, ner_logits, qa_logits, re_logits, EncoderBatch, HeadKind, ModelConfig, ParamStore,
};
use crate::numerics::{Graph, Var, IGNORE_INDEX};
use crate::persist::Checkpoint;
use crate::pretrain::{adam_step, AdamConfig, AdamState};
use crate::rng::substream;
use crate::tokenizer::{encode, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a dev improvement.
    pub patience: usize,
    pub llrd_decay: Option<f64>,
    /// Input length cap; the model's `max_seq_len` also applies.
    pub seq_len: usize,
    /// Longest predicted answer, in pieces.
    pub max_answer_len: usize,
    /// Relation label that means "no relation".
    pub negative_label: String,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 16,
            max_epochs: 10,
            patience: 3,
            llrd_decay: None,
            seq_len: 128,
            max_answer_len: 30,
            negative_label: "none".into(),
            adam: AdamConfig::default(),
        }
    }
}

/// Label inventory of a task head.
pub fn label_set(task: Task, train: &[AnnotatedExample]) -> Vec<String> {
    match task {
        Task::Ner => {
            let types: BTreeSet<&str> = train.iter().flat_map(|e| e.annotations.iter().map(|a| a.label.as_str())).collect();
            let mut out = vec!["O".to_string()];
            for t in types {
                out.push(format!("B-{t}"));
                out.push(format!("I-{t}"));
            }
            out
        }
        Task::Qa => vec!["start".into(), "end".into()],
        Task::Re => train.iter().filter_map(|e| e.relation.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    }
}

fn check_coverage(task: Task, labels: &[String], split: &str, examples: &[AnnotatedExample]) -> Result<()> {
    let known: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    for e in examples {
        let missing = match task {
            Task::Ner => e.annotations.iter().map(|a| format!("B-{}", a.label)).find(|l| !known.contains(l.as_str())),
            Task::Re => e.relation.clone().filter(|r| !known.contains(r.as_str())),
            Task::Qa => None,
        };
        if let Some(l) = missing {
            return Err(Error::config(format!("{split} example {} uses label {l} not seen in train", e.id)));
        }
    }
    Ok(())
}

/// One encoded input with everything needed to train on it and decode it.
#[derive(Debug, Clone)]
struct Encoded {
    ids: Vec<usize>,
    segs: Vec<usize>,
    /// NER: label per piece (first piece of each word).
    piece_labels: Vec<usize>,
    /// QA: gold start/end piece, when the answer survives truncation.
    span: Option<(usize, usize)>,
    /// QA: range of context pieces.
    ctx: (usize, usize),
    /// RE: relation id.
    relation: usize,
    /// Pieces-without-specials sequence of the text being labelled.
    seq: TokenSequence,
    /// Position of `seq.ids[0]` in `ids`.
    offset: usize,
}

fn word_of_piece(seq: &TokenSequence, piece: usize) -> usize {
    seq.word_boundaries.partition_point(|&b| b <= piece) - 1
}

fn word_tag(ex: &AnnotatedExample, span: (usize, usize)) -> Option<String> {
    ex.annotations.iter().find(|a| span.0 < a.end && a.start < span.1).map(|a| {
        if span.0 <= a.start {
            format!("B-{}", a.label)
        } else {
            format!("I-{}", a.label)
        }
    })
}

fn encode_example(task: Task, ex: &AnnotatedExample, vocab: &Vocabulary, labels: &[String], seq_len: usize, negative: &str) -> Encoded {
    let s = vocab.specials();
    match task {
        Task::Ner | Task::Re => {
            let seq = encode(&ex.text, vocab).truncated(seq_len - 2);
            let mut ids = vec![s.cls];
            ids.extend(&seq.ids);
            ids.push(s.sep);
            let mut segs = vec![0; ids.len()];
            let mut piece_labels = vec![IGNORE_INDEX; ids.len()];
            for (w, &b) in seq.word_boundaries.iter().enumerate() {
                let span = seq.word_spans[w];
                if task == Task::Ner {
                    let tag = word_tag(ex, span).unwrap_or_else(|| "O".into());
                    piece_labels[b + 1] = labels.iter().position(|l| *l == tag).unwrap_or(0);
                } else if ex.annotations.iter().any(|a| span.0 < a.end && a.start < span.1) {
                    let end = seq.word_boundaries.get(w + 1).copied().unwrap_or(seq.ids.len());
                    segs[b + 1..end + 1].iter_mut().for_each(|x| *x = 1);
                }
            }
            let rel = ex.relation.as_deref().unwrap_or(negative);
            let relation = labels.iter().position(|l| l == rel).unwrap_or(IGNORE_INDEX);
            Encoded { ids, segs, piece_labels, span: None, ctx: (0, 0), relation, seq, offset: 1 }
        }
        Task::Qa => {
            let budget = seq_len - 3;
            let q = encode(ex.question.as_deref().unwrap_or(""), vocab).truncated(budget / 3);
            let c = encode(&ex.text, vocab).truncated(budget - q.len());
            let mut ids = vec![s.cls];
            ids.extend(&q.ids);
            ids.push(s.sep);
            let offset = ids.len();
            ids.extend(&c.ids);
            ids.push(s.sep);
            let mut segs = vec![0; offset];
            segs.resize(ids.len(), 1);
            let span = ex.annotations.first().and_then(|a| {
                let ws = c.word_spans.iter().position(|&(ws, we)| a.start < we && ws < a.end)?;
                let we = c.word_spans.iter().rposition(|&(ws, we)| a.start < we && ws < a.end)?;
                let start = c.word_boundaries[ws];
                let end = c.word_boundaries.get(we + 1).copied().unwrap_or(c.ids.len()) - 1;
                Some((offset + start, offset + end))
            });
            let ctx = (offset, offset + c.len());
            Encoded { piece_labels: vec![IGNORE_INDEX; ids.len()], ids, segs, span, ctx, relation: IGNORE_INDEX, seq: c, offset }
        }
    }
}

/// A fine-tuned encoder plus task head.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub task: Task,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub labels: Vec<String>,
    pub seq_len: usize,
    pub max_answer_len: usize,
    pub negative_label: String,
}

/// Task outputs for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Entities(Vec<(usize, usize, String)>),
    Answer { start: usize, end: usize, text: String },
    Relation(String),
}

fn head_kind(task: Task) -> HeadKind {
    match task {
        Task::Ner => HeadKind::Ner,
        Task::Qa => HeadKind::Qa,
        Task::Re => HeadKind::Re,
    }
}

impl TaskModel {
    fn batch(&self, enc: &[&Encoded], pad: usize) -> Result<EncoderBatch> {
        let rows: Vec<(Vec<usize>, Vec<usize>)> = enc.iter().map(|e| (e.ids.clone(), e.segs.clone())).collect();
        EncoderBatch::from_rows(&rows, pad)
    }

    /// Task loss of a batch; `None` when no example in it carries a target.
    fn loss(
        &self,
        g: &mut Graph<f32>,
        b: &crate::model::Bound,
        enc: &[&Encoded],
        pad: usize,
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<Option<Var>> {
        let batch = self.batch(enc, pad)?;
        let h = forward_encoder(g, b, &self.config, &batch, dropout)?;
        let s = batch.seq_len;
        Ok(match self.task {
            Task::Ner => {
                let mut targets = Vec::with_capacity(enc.len() * s);
                for e in enc {
                    targets.extend(&e.piece_labels);
                    targets.extend(std::iter::repeat_n(IGNORE_INDEX, s - e.piece_labels.len()));
                }
                if targets.iter().all(|&t| t == IGNORE_INDEX) {
                    return Ok(None);
                }
                let l = ner_logits(g, b, h)?;
                let l = g.reshape(l, &[enc.len() * s, self.labels.len()])?;
                Some(g.cross_entropy(l, &targets, IGNORE_INDEX)?)
            }
            Task::Re => {
                let l = re_logits(g, b, h)?;
                let t: Vec<usize> = enc.iter().map(|e| e.relation).collect();
                Some(g.cross_entropy(l, &t, IGNORE_INDEX)?)
            }
            Task::Qa => {
                if enc.iter().all(|e| e.span.is_none()) {
                    return Ok(None);
                }
                let (st, en) = qa_logits(g, b, h)?;
                let mut keep = Vec::with_capacity(enc.len() * s);
                for e in enc {
                    keep.extend((0..s).map(|i| i >= e.ctx.0 && i < e.ctx.1));
                }
                let st = g.mask_fill(st, keep.clone())?;
                let en = g.mask_fill(en, keep)?;
                let ts: Vec<usize> = enc.iter().map(|e| e.span.map_or(IGNORE_INDEX, |x| x.0)).collect();
                let te: Vec<usize> = enc.iter().map(|e| e.span.map_or(IGNORE_INDEX, |x| x.1)).collect();
                let ls = g.cross_entropy(st, &ts, IGNORE_INDEX)?;
                let le = g.cross_entropy(en, &te, IGNORE_INDEX)?;
                let sum = g.add(ls, le)?;
                Some(g.scale(sum, 0.5)?)
            }
        })
    }

    fn encode_all(&self, examples: &[AnnotatedExample], vocab: &Vocabulary) -> Vec<Encoded> {
        let seq_len = self.seq_len.min(self.config.max_seq_len);
        examples.iter().map(|e| encode_example(self.task, e, vocab, &self.labels, seq_len, &self.negative_label)).collect()
    }

    pub fn predict(&self, examples: &[AnnotatedExample], vocab: &Vocabulary) -> Result<Vec<Prediction>> {
        let enc = self.encode_all(examples, vocab);
        let mut out = Vec::with_capacity(examples.len());
        for (chunk, exs) in enc.chunks(32).zip(examples.chunks(32)) {
            let refs: Vec<&Encoded> = chunk.iter().collect();
            let batch = self.batch(&refs, vocab.specials().pad)?;
            let s = batch.seq_len;
            let mut g = Graph::<f32>::new();
            let b = bind_constants(&mut g, &self.params);
            let h = forward_encoder(&mut g, &b, &self.config, &batch, None)?;
            match self.task {
                Task::Ner => {
                    let l = ner_logits(&mut g, &b, h)?;
                    let nl = self.labels.len();
                    let data = g.value(l).data();
                    for (bi, (e, ex)) in chunk.iter().zip(exs).enumerate() {
                        let tags: Vec<String> = e
                            .seq
                            .word_boundaries
                            .iter()
                            .map(|&p| {
                                let row = &data[(bi * s + p + e.offset) * nl..(bi * s + p + e.offset + 1) * nl];
                                self.labels[argmax(row)].clone()
                            })
                            .collect();
                        let ents = super::data::bio_spans(&tags)
                            .into_iter()
                            .map(|(a, z, label)| (e.seq.word_spans[a].0, e.seq.word_spans[z].1, label))
                            .collect();
                        let _ = ex;
                        out.push(Prediction::Entities(ents));
                    }
                }
                Task::Re => {
                    let l = re_logits(&mut g, &b, h)?;
                    let nl = self.labels.len();
                    for row in g.value(l).data().chunks(nl) {
                        out.push(Prediction::Relation(self.labels[argmax(row)].clone()));
                    }
                }
                Task::Qa => {
                    let (st, en) = qa_logits(&mut g, &b, h)?;
                    let (sv, ev) = (g.value(st).data(), g.value(en).data());
                    for (bi, (e, ex)) in chunk.iter().zip(exs).enumerate() {
                        let mut best: Option<(f32, usize, usize)> = None;
                        for i in e.ctx.0..e.ctx.1 {
                            for j in i..e.ctx.1.min(i + self.max_answer_len) {
                                let score = sv[bi * s + i] + ev[bi * s + j];
                                if best.is_none_or(|(bs, _, _)| score > bs) {
                                    best = Some((score, i, j));
                                }
                            }
                        }
                        out.push(match best {
                            Some((_, i, j)) => {
                                let a = e.seq.word_spans[word_of_piece(&e.seq, i - e.offset)].0;
                                let z = e.seq.word_spans[word_of_piece(&e.seq, j - e.offset)].1;
                                Prediction::Answer { start: a, end: z, text: char_slice(&ex.text, a, z) }
                            }
                            None => Prediction::Answer { start: 0, end: 0, text: String::new() },
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[AnnotatedExample], vocab: &Vocabulary) -> Result<Prf> {
        let preds = self.predict(examples, vocab)?;
        Ok(score(self.task, examples, &preds, &self.negative_label))
    }
}

/// Task metric of predictions against gold examples.
pub fn score(task: Task, examples: &[AnnotatedExample], preds: &[Prediction], negative: &str) -> Prf {
    match task {
        Task::Ner => {
            let gold: Vec<Entity> = examples
                .iter()
                .enumerate()
                .flat_map(|(i, e)| e.annotations.iter().map(move |a| (i, a.start, a.end, a.label.clone())))
                .collect();
            let pred: Vec<Entity> = preds
                .iter()
                .enumerate()
                .flat_map(|(i, p)| match p {
                    Prediction::Entities(v) => v.iter().map(|(s, e, l)| (i, *s, *e, l.clone())).collect(),
                    _ => Vec::new(),
                })
                .collect();
            ner_f1(&gold, &pred)
        }
        Task::Qa => {
            let n = examples.len().max(1) as f64;
            let mut acc = Prf::default();
            for (e, p) in examples.iter().zip(preds) {
                let gold: Vec<String> = e.annotations.iter().map(|a| e.span_text(a)).collect();
                let text = match p {
                    Prediction::Answer { text, .. } => text.as_str(),
                    _ => "",
                };
                let s = qa_f1(&gold, text);
                acc.precision += s.precision / n;
                acc.recall += s.recall / n;
                acc.f1 += s.f1 / n;
            }
            acc
        }
        Task::Re => {
            let gold: Vec<String> = examples.iter().map(|e| e.relation.clone().unwrap_or_else(|| negative.into())).collect();
            let pred: Vec<String> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Relation(r) => r.clone(),
                    _ => negative.into(),
                })
                .collect();
            re_f1(&gold, &pred, negative)
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Result of fine-tuning with one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub dev: Prf,
    pub test: Prf,
    pub model: TaskModel,
    pub checkpoint: Checkpoint,
}

/// Fine-tune a copy of `parent` once per seed, keeping the epoch with the
/// best dev F1 and scoring it on test.
pub fn finetune_seed(parent: &Checkpoint, vocab: &Vocabulary, data: &TaskDataset, cfg: &FinetuneConfig, seed: u64) -> Result<SeedRun> {
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::config("batch_size and max_epochs must be positive"));
    }
    crate::persist::check_fingerprint(parent, vocab)?;
    let task = data.task;
    let labels = label_set(task, &data.train);
    if labels.is_empty() || (task == Task::Re && labels.len() < 2) {
        return Err(Error::config("training split has too few labels"));
    }
    check_coverage(task, &labels, "dev", &data.dev)?;
    check_coverage(task, &labels, "test", &data.test)?;

    let config = parent.meta.config.clone();
    let mut params = parent.params.clone();
    add_head(&mut params, &config, head_kind(task), labels.len(), &mut substream(seed, "init", 1))?;
    let mut model = TaskModel {
        task,
        config: config.clone(),
        params,
        labels,
        seq_len: cfg.seq_len,
        max_answer_len: cfg.max_answer_len,
        negative_label: cfg.negative_label.clone(),
    };
    let train = model.encode_all(&data.train, vocab);
    let mut opt = AdamState::new(&model.params);
    let pad = vocab.specials().pad;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.max_epochs) as f64;
    let rates: BTreeMap<String, f64> = model
        .params
        .paths()
        .map(|p| {
            Ok((
                p.clone(),
                match cfg.llrd_decay {
                    Some(d) => llrd_lr(1.0, d, p, config.n_layers)?,
                    None => 1.0,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, usize, ParamStore<f32>, Prf)> = None;
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let refs: Vec<&Encoded> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::<f32>::new();
            let b = bind(&mut g, &model.params);
            let mut drop_rng = substream(seed, "dropout", step);
            let dropout: Option<&mut dyn rand::RngCore> = if config.dropout_rate > 0.0 { Some(&mut drop_rng) } else { None };
            let Some(loss) = model.loss(&mut g, &b, &refs, pad, dropout)? else { continue };
            g.backward(loss)?;
            let grads: BTreeMap<String, Vec<f32>> = b.iter().filter_map(|(k, v)| g.grad(*v).map(|gr| (k.clone(), gr.to_vec()))).collect();
            let lr = cfg.lr * (1.0 - (step - 1) as f64 / total).max(0.0);
            adam_step(&mut model.params, &grads, &mut opt, &|p| rates.get(p).map(|r| r * lr), &cfg.adam)?;
        }
        let dev = model.evaluate(&data.dev, vocab)?;
        log::info!("seed {seed} epoch {epoch} dev f1 {:.4}", dev.f1);
        if best.as_ref().is_none_or(|(f, ..)| dev.f1 > *f) {
            best = Some((dev.f1, epoch, model.params.clone(), dev));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params, dev) = best.expect("at least one epoch");
    model.params = params;
    let test = model.evaluate(&data.test, vocab)?;

    let mut checkpoint = Checkpoint::new(config, model.params.clone(), vocab);
    checkpoint.meta.lineage = parent.child_lineage();
    checkpoint.meta.metadata.insert("task".into(), serde_json::json!(task.name()));
    checkpoint.meta.metadata.insert("labels".into(), serde_json::json!(model.labels));
    checkpoint.meta.metadata.insert("seed".into(), serde_json::json!(seed));
    Ok(SeedRun { seed, best_epoch, dev, test, model, checkpoint })
}

/// Run every seed and aggregate test scores.
pub fn finetune_task(
    parent: &Checkpoint,
    model_name: &str,
    vocab: &Vocabulary,
    data: &TaskDataset,
    cfg: &FinetuneConfig,
    seeds: &[u64],
) -> Result<(TaskReport, Vec<SeedRun>)> {
    let runs: Vec<SeedRun> = seeds.iter().map(|&s| finetune_seed(parent, vocab, data, cfg, s)).collect::<Result<_>>()?;
    let scores = runs
        .iter()
        .map(|r| SeedScore {
            seed: r.seed,
            precision: r.test.precision,
            recall: r.test.recall,
            f1: r.test.f1,
            dev_f1: r.dev.f1,
            best_epoch: r.best_epoch,
        })
        .collect();
    Ok((TaskReport::new(data.task.name(), model_name, scores), runs))
}

/// Rebuild a task model from a fine-tuned checkpoint.
pub fn task_model_from_checkpoint(ck: &Checkpoint, cfg: &FinetuneConfig) -> Result<TaskModel> {
    let task = ck
        .meta
        .metadata
        .get("task")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::config("checkpoint carries no task head"))
        .and_then(Task::parse)?;
    let labels: Vec<String> = ck
        .meta
        .metadata
        .get("labels")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::config("checkpoint carries no label set"))?;
    Ok(TaskModel {
        task,
        config: ck.meta.config.clone(),
        params: ck.params.clone(),
        labels,
        seq_len: cfg.seq_len,
        max_answer_len: cfg.max_answer_len,
        negative_label: cfg.negative_label.clone(),
    })
}
