use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{adam_step, batch_for_step, lr_at, AdamState, Corpus, EncodedCorpus, PretrainBatch, TrainPlan};
use crate::cfmit::{apply_layer_freezing, bind_with_mixout, parameter_rates, replay_schedule, BatchKind};
use crate::error::{Error, Result};
use crate::mlmeval::pppl;
use crate::model::{
    bind, bind_constants, forward_encoder, init_params, mlm_logits_at, nsp_logits, Bound, Model, ModelConfig, ParamGroup, ParamStore,
};
use crate::numerics::{Graph, Real, Var, IGNORE_INDEX};
use crate::persist::{check_fingerprint, Checkpoint};
use crate::rng::substream;
use crate::tokenizer::Vocabulary;

pub struct PretrainData<'a> {
    pub vocab: &'a Vocabulary,
    /// Training corpus; its last documents are held out for evaluation.
    pub corpus: &'a Corpus,
    /// Previous-stage corpus for experience replay.
    pub replay: Option<&'a Corpus>,
}

/// Starting point of a run.
pub enum Init {
    Fresh(ModelConfig),
    Model(Model<f32>),
    /// `resume` continues the stored optimizer state; otherwise the
    /// checkpoint is a parent and optimization starts over.
    Checkpoint {
        checkpoint: Checkpoint,
        resume: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    /// Mitigation schedule in effect, written when a run (re)starts.
    CfAudit {
        frozen: Vec<String>,
        /// Peak learning rate per parameter group; `null` when frozen.
        group_lrs: BTreeMap<String, Option<f64>>,
        llrd_decay: Option<f64>,
        warmup_fraction: f64,
        freeze_layers: Option<usize>,
        mixout_p: Option<f64>,
        replay_frequency: Option<usize>,
        unvalidated: bool,
        warnings: Vec<String>,
    },
    Step {
        step: u64,
        batch: BatchKind,
        mlm_loss: f64,
        nsp_loss: f64,
        lr: f64,
        pppl_heldout: Option<f64>,
        heldout_mlm_loss: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub pppl: Option<f64>,
    pub mlm_loss: Option<f64>,
}

pub struct PretrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamState,
    pub records: Vec<LogRecord>,
}

/// MLM + NSP loss of one batch. Returns `(total, mlm, nsp)`.
pub fn batch_loss<F: Real>(
    g: &mut Graph<F>,
    b: &Bound,
    config: &ModelConfig,
    batch: &PretrainBatch,
    dropout: Option<&mut dyn rand::RngCore>,
) -> Result<(Var, Var, Var)> {
    let h = forward_encoder(g, b, config, &batch.encoder, dropout)?;
    let (rows, targets) = batch.mlm_rows();
    let mlm = if rows.is_empty() {
        g.constant(crate::numerics::Tensor::scalar(F::zero()))
    } else {
        let logits = mlm_logits_at(g, b, config, h, &rows)?;
        g.cross_entropy(logits, &targets, IGNORE_INDEX)?
    };
    let nl = nsp_logits(g, b, h)?;
    let nsp = g.cross_entropy(nl, &batch.nsp_labels, IGNORE_INDEX)?;
    let total = g.add(mlm, nsp)?;
    Ok((total, mlm, nsp))
}

fn group_name(path: &str, n_layers: usize) -> Result<String> {
    Ok(match ParamGroup::of(path, n_layers)? {
        ParamGroup::Embedding => "embeddings".into(),
        ParamGroup::Layer(i) => format!("encoder.layer.{i}"),
        ParamGroup::Head(h) if h == "pooler" => "pooler".into(),
        ParamGroup::Head(h) => format!("heads.{h}"),
    })
}

/// Stateful training loop; every step's randomness comes from substreams
/// keyed by the step number, so a run resumed from a checkpoint continues
/// exactly as the uninterrupted run would.
pub struct Pretrainer {
    plan: TrainPlan,
    vocab: Vocabulary,
    main: EncodedCorpus,
    replay: Option<EncodedCorpus>,
    heldout: Vec<String>,
    heldout_pairs: Option<EncodedCorpus>,
    anchor: Option<ParamStore<f32>>,
    pub model: Model<f32>,
    pub optimizer: AdamState,
}

impl Pretrainer {
    pub fn new(init: Init, data: &PretrainData<'_>, plan: &TrainPlan) -> Result<Self> {
        plan.validate()?;
        let (model, optimizer) = match init {
            Init::Fresh(cfg) => {
                let params = init_params(&cfg, &mut substream(plan.seed, "init", 0))?;
                (Model::new(cfg, params)?, None)
            }
            Init::Model(m) => (m, None),
            Init::Checkpoint { checkpoint, resume } => {
                check_fingerprint(&checkpoint, data.vocab)?;
                let opt = if resume {
                    Some(checkpoint.optimizer.clone().ok_or_else(|| Error::config("checkpoint has no optimizer state to resume"))?)
                } else {
                    None
                };
                (Model::new(checkpoint.meta.config.clone(), checkpoint.params)?, opt)
            }
        };
        model.check_vocab(data.vocab)?;
        let warnings = plan.cf.validate(model.config.n_layers)?;
        for w in &warnings {
            log::warn!("{w}");
        }
        if plan.seq_len > model.config.max_seq_len {
            return Err(Error::config(format!("seq_len {} exceeds model max_seq_len {}", plan.seq_len, model.config.max_seq_len)));
        }
        let replay = match (plan.cf.replay_frequency(), data.replay) {
            (Some(_), Some(c)) => Some(EncodedCorpus::new(c, data.vocab)?),
            (Some(_), None) => return Err(Error::config("experience replay is enabled but no replay corpus is bound")),
            (None, _) => None,
        };
        let (train, held) = data.corpus.split_heldout(plan.heldout_fraction);
        let main = EncodedCorpus::new(&train, data.vocab)?;
        let heldout: Vec<String> = held.sentences().take(plan.eval_sentences).map(str::to_string).collect();
        let heldout_pairs = EncodedCorpus::new(&held, data.vocab).ok();
        let resuming = optimizer.is_some();
        let optimizer = optimizer.unwrap_or_else(|| AdamState::new(&model.params));
        let anchor = if plan.cf.mixout_p.is_some_and(|p| p > 0.0) {
            if resuming {
                return Err(Error::config("resuming a mixout run needs the anchor parameters; use Pretrainer::with_anchor"));
            }
            Some(model.params.clone())
        } else {
            None
        };
        Ok(Self { plan: plan.clone(), vocab: data.vocab.clone(), main, replay, heldout, heldout_pairs, anchor, model, optimizer })
    }

    /// Replace the mixout anchor (needed when resuming a mixout run).
    pub fn with_anchor(mut self, anchor: ParamStore<f32>) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn audit(&self) -> Result<LogRecord> {
        let n = self.model.config.n_layers;
        let rates = parameter_rates(&self.model.params, &self.plan.cf, self.plan.peak_lr, n)?;
        let mut group_lrs = BTreeMap::new();
        let mut frozen = Vec::new();
        for (path, lr) in &rates {
            if lr.is_none() {
                frozen.push(path.clone());
            }
            group_lrs.insert(group_name(path, n)?, *lr);
        }
        let cf = &self.plan.cf;
        Ok(LogRecord::CfAudit {
            frozen,
            group_lrs,
            llrd_decay: cf.llrd_decay,
            warmup_fraction: self.plan.effective_warmup(),
            freeze_layers: cf.freeze_layers,
            mixout_p: cf.mixout_p,
            replay_frequency: cf.replay_frequency(),
            unvalidated: cf.is_unvalidated(),
            warnings: cf.validate(n)?,
        })
    }

    /// Batch kind and batch for 1-based step `step`.
    pub fn batch_at(&self, step: u64) -> Result<(BatchKind, PretrainBatch)> {
        let kind = match self.plan.cf.replay_frequency() {
            Some(n) => replay_schedule(step, n),
            None => BatchKind::Main,
        };
        let (corpus, prefix) = match kind {
            BatchKind::Main => (&self.main, ""),
            BatchKind::Replay => (self.replay.as_ref().expect("checked at construction"), "replay_"),
        };
        let p = &self.plan;
        Ok((kind, batch_for_step(corpus, &self.vocab, p.batch_size, p.seq_len, &p.masking, p.seed, prefix, step)?))
    }

    /// Held-out pseudo-perplexity and MLM loss under the current weights.
    pub fn evaluate(&self) -> Result<EvalPoint> {
        let refs: Vec<&str> = self.heldout.iter().map(String::as_str).collect();
        let pppl = if refs.is_empty() { None } else { Some(pppl(&self.model, &self.vocab, &refs, 64)?.pppl) };
        let mlm_loss = match &self.heldout_pairs {
            Some(c) => {
                let p = &self.plan;
                let batch = batch_for_step(c, &self.vocab, 32, p.seq_len, &p.masking, p.seed, "heldout_", 0)?;
                let mut g = Graph::<f32>::new();
                let b = bind_constants(&mut g, &self.model.params);
                let (_, mlm, _) = batch_loss(&mut g, &b, &self.model.config, &batch, None)?;
                Some(g.value(mlm).item() as f64)
            }
            None => None,
        };
        Ok(EvalPoint { pppl, mlm_loss })
    }

    fn eval_due(&self, step: u64) -> bool {
        step == self.plan.total_steps || (self.plan.eval_every > 0 && step.is_multiple_of(self.plan.eval_every))
    }

    /// Losses of the first batch under the initial weights, with a held-out
    /// evaluation: the step-0 record.
    pub fn initial_record(&self) -> Result<LogRecord> {
        let (kind, batch) = self.batch_at(1)?;
        let mut g = Graph::<f32>::new();
        let b = bind_constants(&mut g, &self.model.params);
        let (_, mlm, nsp) = batch_loss(&mut g, &b, &self.model.config, &batch, None)?;
        let ev = self.evaluate()?;
        Ok(LogRecord::Step {
            step: 0,
            batch: kind,
            mlm_loss: g.value(mlm).item() as f64,
            nsp_loss: g.value(nsp).item() as f64,
            lr: lr_at(0, &self.plan),
            pppl_heldout: ev.pppl,
            heldout_mlm_loss: ev.mlm_loss,
        })
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<LogRecord> {
        let step = self.optimizer.step + 1;
        let (kind, batch) = self.batch_at(step)?;
        let cfg = self.model.config.clone();
        let seed = self.plan.seed;
        let mut g = Graph::<f32>::new();
        let (bound, leaves) = match (&self.anchor, self.plan.cf.mixout_p) {
            (Some(anchor), Some(p)) => bind_with_mixout(&mut g, &self.model.params, anchor, p, &mut substream(seed, "mixout", step))?,
            _ => {
                let b = bind(&mut g, &self.model.params);
                let leaves = b.iter().map(|(k, v)| (k.clone(), *v)).collect();
                (b, leaves)
            }
        };
        let mut drop_rng = substream(seed, "dropout", step);
        let dropout: Option<&mut dyn rand::RngCore> = if cfg.dropout_rate > 0.0 { Some(&mut drop_rng) } else { None };
        let (total, mlm, nsp) = batch_loss(&mut g, &bound, &cfg, &batch, dropout)?;
        g.backward(total)?;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (path, v) in &leaves {
            if let Some(gr) = g.grad(*v) {
                grads.insert(path.clone(), gr.to_vec());
            }
        }
        let k = self.plan.cf.freeze_layers.unwrap_or(0);
        apply_layer_freezing(&mut grads, k, cfg.n_layers)?;
        let lr = lr_at(step - 1, &self.plan);
        let rates = parameter_rates(&self.model.params, &self.plan.cf, lr, cfg.n_layers)?;
        adam_step(&mut self.model.params, &grads, &mut self.optimizer, &|p| rates.get(p).copied().flatten(), &self.plan.adam)?;
        let (pppl_heldout, heldout_mlm_loss) = if self.eval_due(step) {
            let ev = self.evaluate()?;
            (ev.pppl, ev.mlm_loss)
        } else {
            (None, None)
        };
        Ok(LogRecord::Step {
            step,
            batch: kind,
            mlm_loss: g.value(mlm).item() as f64,
            nsp_loss: g.value(nsp).item() as f64,
            lr,
            pppl_heldout,
            heldout_mlm_loss,
        })
    }

    /// Train until `end` updates are complete (capped at `total_steps`),
    /// passing every record to `sink`. A fresh run first emits the audit and
    /// the step-0 record; a resumed run emits the audit only.
    pub fn run_until(&mut self, end: u64, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        let end = end.min(self.plan.total_steps);
        if self.optimizer.step >= end {
            return Ok(());
        }
        sink(&self.audit()?)?;
        if self.optimizer.step == 0 {
            sink(&self.initial_record()?)?;
        }
        while self.optimizer.step < end {
            let rec = self.train_step()?;
            if let LogRecord::Step { step, mlm_loss, .. } = &rec {
                if step % 50 == 0 {
                    log::info!("step {step} mlm_loss {mlm_loss:.4}");
                }
            }
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Run a whole plan and collect its records.
pub fn run_pretraining(init: Init, data: &PretrainData<'_>, plan: &TrainPlan) -> Result<PretrainOutcome> {
    let mut t = Pretrainer::new(init, data, plan)?;
    let mut records = Vec::new();
    t.run_until(plan.total_steps, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(PretrainOutcome { model: t.model, optimizer: t.optimizer, records })
}
