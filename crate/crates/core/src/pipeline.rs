//! Run configuration and the pipeline stages behind each CLI command.
//! Every stage writes a run directory holding a snapshot of the effective
//! configuration, a JSON-lines log, a JSON report and its artifacts. Files
//! carry no timestamps, so re-running a stage reproduces them byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfmit::{preset, CFConfig, ReplayConfig};
use crate::dataport::{realign_dataset, TranslatorSpec};
use crate::error::{Error, Result};
use crate::finetune::{finetune_task, read_task_file, render_table, write_task_file, FinetuneConfig, Task, TaskDataset};
use crate::mlmeval::{load_masked_set, mrr, pppl};
use crate::model::{Model, ModelConfig};
use crate::persist::{self, Checkpoint};
use crate::pretrain::{Corpus, Init, LogRecord, PretrainData, Pretrainer, TrainPlan};
use crate::tokenizer::{train_vocab, Vocabulary};

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_min_freq() -> usize {
    2
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub corpora: Vec<PathBuf>,
    pub vocab_size: usize,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
    #[serde(default = "default_true")]
    pub lowercase: bool,
    /// Vocabulary file; defaults to the one `vocab-train` writes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

/// Architecture without the vocabulary size, which comes from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub tie_embeddings: bool,
}

impl Default for ArchSection {
    fn default() -> Self {
        let t = ModelConfig::toy(1);
        Self {
            n_layers: t.n_layers,
            hidden_dim: t.hidden_dim,
            n_heads: t.n_heads,
            ff_dim: t.ff_dim,
            max_seq_len: t.max_seq_len,
            dropout_rate: t.dropout_rate,
            tie_embeddings: t.tie_embeddings,
        }
    }
}

impl ArchSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
            tie_embeddings: self.tie_embeddings,
            ..ModelConfig::toy(vocab_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub corpus: PathBuf,
    #[serde(default)]
    pub plan: TrainPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub corpus: PathBuf,
    #[serde(default)]
    pub plan: TrainPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cf: Option<CFConfig>,
    /// Corpus replayed by experience replay; defaults to the pretraining corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_corpus: Option<PathBuf>,
}

fn default_eval_sentences() -> usize {
    200
}
fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_set: Option<PathBuf>,
    /// Corpora whose sentences are scored for pseudo-perplexity.
    #[serde(default)]
    pub heldout: Vec<PathBuf>,
    #[serde(default = "default_eval_sentences")]
    pub max_sentences: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub task: Task,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

fn default_n_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub tasks: Vec<TaskSection>,
    /// Explicit seeds; otherwise `n_seeds` consecutive seeds from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub config: FinetuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealignSection {
    pub task: Task,
    pub translator: TranslatorSpec,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub model: ArchSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realign: Option<RealignSection>,
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(p) = &o.preset {
            let adapt = self.adapt.as_mut().ok_or_else(|| Error::config("--preset needs an [adapt] section"))?;
            preset(p)?;
            adapt.preset = Some(p.clone());
            adapt.cf = None;
        }
        Ok(())
    }

    fn input_files(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.tokenizer.corpora.iter().map(PathBuf::as_path).collect();
        if let Some(p) = &self.pretrain {
            v.push(&p.corpus);
        }
        if let Some(a) = &self.adapt {
            v.push(&a.corpus);
            v.extend(a.replay_corpus.as_deref());
            v.extend(a.cf.as_ref().and_then(|c| c.replay.as_ref()).and_then(|r| r.corpus.as_deref()));
        }
        if let Some(e) = &self.eval {
            v.extend(e.masked_set.as_deref());
            v.extend(e.heldout.iter().map(PathBuf::as_path));
        }
        if let Some(f) = &self.finetune {
            for t in &f.tasks {
                v.push(&t.train);
                v.extend(t.dev.as_deref());
                v.extend(t.test.as_deref());
            }
        }
        if let Some(r) = &self.realign {
            v.push(&r.train);
            v.extend(r.dev.as_deref());
            v.extend(r.test.as_deref());
            if let TranslatorSpec::Dictionary { path } = &r.translator {
                v.push(path);
            }
        }
        v
    }

    /// Structural checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for f in self.input_files() {
            if !f.is_file() {
                problems.push(format!("referenced file {} does not exist", f.display()));
            }
        }
        if self.tokenizer.corpora.is_empty() {
            problems.push("tokenizer.corpora is empty".into());
        }
        if let Some(p) = &self.pretrain {
            if !p.plan.cf.is_plain() {
                problems.push("pretrain.plan.cf must be empty; forgetting mitigation belongs to [adapt]".into());
            }
        }
        if let Some(a) = &self.adapt {
            match (&a.preset, &a.cf) {
                (Some(_), Some(_)) => problems.push("adapt: give either preset or cf, not both".into()),
                (None, None) => problems.push("adapt: give exactly one of preset or cf".into()),
                (Some(p), None) => {
                    if let Err(e) = preset(p) {
                        problems.push(e.to_string());
                    }
                }
                (None, Some(_)) => {}
            }
            if !a.plan.cf.is_plain() {
                problems.push("adapt.plan.cf must be empty; use adapt.preset or adapt.cf".into());
            }
        }
        if let Some(f) = &self.finetune {
            if f.seeds.as_ref().map_or(f.n_seeds, Vec::len) == 0 {
                problems.push("finetune needs at least one seed".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.tokenizer.vocab.clone().unwrap_or_else(|| self.out_dir.join("vocab-train").join("vocab.txt"))
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        let p = self.vocab_path();
        if !p.is_file() {
            return Err(Error::config(format!("vocabulary {} not found; run vocab-train first", p.display())));
        }
        Vocabulary::load(&p)
    }

    /// Mitigation settings of the adaptation stage.
    pub fn adapt_cf(&self) -> Result<(String, CFConfig)> {
        let a = self.adapt.as_ref().ok_or_else(|| Error::config("configuration has no [adapt] section"))?;
        match (&a.preset, &a.cf) {
            (Some(p), None) => {
                let pr = preset(p)?;
                Ok((pr.name.to_string(), pr.cf))
            }
            (None, Some(cf)) => Ok(("custom".into(), cf.clone())),
            _ => Err(Error::config("adapt: give exactly one of preset or cf")),
        }
    }

    pub fn finetune_seeds(&self) -> Vec<u64> {
        match &self.finetune {
            Some(f) => f.seeds.clone().unwrap_or_else(|| (0..f.n_seeds as u64).map(|i| self.seed + i).collect()),
            None => Vec::new(),
        }
    }
}

/// What a stage produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: serde_json::Value,
    pub text: String,
    pub checkpoint: Option<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::config(e.to_string()))? + "\n";
    write(&dir.join("report.json"), text)
}

fn load_corpus(path: &Path, provenance: &str) -> Result<Corpus> {
    Corpus::load(path, provenance)
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

pub fn vocab_train(cfg: &RunConfig) -> Result<RunSummary> {
    let t = &cfg.tokenizer;
    let corpora: Vec<Corpus> = t.corpora.iter().map(|p| load_corpus(p, "tokenizer")).collect::<Result<_>>()?;
    let vocab = train_vocab(corpora.iter().flat_map(Corpus::sentences), t.vocab_size, t.min_freq, t.lowercase)?;
    let dir = run_dir(cfg, "vocab-train")?;
    let path = cfg.vocab_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    vocab.save(&path)?;
    if path != dir.join("vocab.txt") {
        vocab.save(&dir.join("vocab.txt"))?;
    }
    let report = serde_json::json!({
        "vocab_size": vocab.len(),
        "requested_size": t.vocab_size,
        "fingerprint": vocab.fingerprint(),
        "path": path,
    });
    write_report(&dir, &report)?;
    let text = format!("vocabulary of {} tokens written to {}\nfingerprint {}\n", vocab.len(), path.display(), vocab.fingerprint());
    Ok(RunSummary { dir, report, text, checkpoint: Some(path) })
}

fn run_trainer(mut trainer: Pretrainer, dir: &Path) -> Result<(Pretrainer, Vec<LogRecord>)> {
    let mut records = Vec::new();
    let total = trainer.plan().total_steps;
    trainer.run_until(total, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    write(&dir.join("log.jsonl"), jsonl(&records))?;
    Ok((trainer, records))
}

fn training_report(records: &[LogRecord], id: &str, ckpt: &Path) -> serde_json::Value {
    let evals: Vec<(u64, f64)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { step, pppl_heldout: Some(p), .. } => Some((*step, *p)),
            _ => None,
        })
        .collect();
    let last_loss = records.iter().rev().find_map(|r| match r {
        LogRecord::Step { mlm_loss, .. } => Some(*mlm_loss),
        _ => None,
    });
    serde_json::json!({
        "checkpoint": ckpt,
        "checkpoint_id": id,
        "final_mlm_loss": last_loss,
        "heldout_pppl": evals,
    })
}

/// Base pretraining from scratch, or resumption of an interrupted run
/// from a checkpoint holding optimizer state.
pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let sec = cfg.pretrain.as_ref().ok_or_else(|| Error::config("configuration has no [pretrain] section"))?;
    let vocab = cfg.load_vocab()?;
    let corpus = load_corpus(&sec.corpus, "pretrain")?;
    let plan = TrainPlan { seed: cfg.seed, ..sec.plan.clone() };
    let (init, lineage) = match resume {
        Some(p) => {
            let (ck, _) = persist::load_bound(p, &vocab)?;
            let lineage = ck.meta.lineage.clone();
            (Init::Checkpoint { checkpoint: ck, resume: true }, lineage)
        }
        None => (Init::Fresh(cfg.model.model_config(vocab.len())), Vec::new()),
    };
    let trainer = Pretrainer::new(init, &PretrainData { vocab: &vocab, corpus: &corpus, replay: None }, &plan)?;
    let dir = run_dir(cfg, "pretrain")?;
    let (trainer, records) = run_trainer(trainer, &dir)?;
    let mut ck =
        Checkpoint::new(trainer.model.config.clone(), trainer.model.params.clone(), &vocab).with_optimizer(trainer.optimizer.clone());
    ck.meta.lineage = lineage;
    ck.meta.metadata.insert("stage".into(), serde_json::json!("base"));
    let path = dir.join("checkpoint.ckpt");
    let id = persist::save(&ck, &path)?;
    let report = training_report(&records, &id, &path);
    write_report(&dir, &report)?;
    let text = format!("pretrained {} steps; checkpoint {} ({})\n", plan.total_steps, path.display(), &id[..12]);
    Ok(RunSummary { dir, report, text, checkpoint: Some(path) })
}

/// Continued pretraining of a parent checkpoint on the domain corpus with
/// the configured forgetting mitigation.
pub fn adapt(cfg: &RunConfig, parent: &Path) -> Result<RunSummary> {
    let sec = cfg.adapt.as_ref().ok_or_else(|| Error::config("configuration has no [adapt] section"))?;
    let (name, mut cf) = cfg.adapt_cf()?;
    let vocab = cfg.load_vocab()?;
    let corpus = load_corpus(&sec.corpus, "adapt")?;
    let (parent_ck, parent_id) = persist::load_bound(parent, &vocab)?;
    let replay_path = cf
        .replay
        .as_ref()
        .map(|r| {
            r.corpus
                .clone()
                .or_else(|| sec.replay_corpus.clone())
                .or_else(|| cfg.pretrain.as_ref().map(|p| p.corpus.clone()))
                .ok_or_else(|| Error::config("experience replay needs adapt.replay_corpus"))
        })
        .transpose()?;
    if let (Some(r), Some(p)) = (cf.replay.as_mut(), &replay_path) {
        *r = ReplayConfig { frequency: r.frequency, corpus: Some(p.clone()) };
    }
    let replay = replay_path.as_deref().map(|p| load_corpus(p, "replay")).transpose()?;
    let plan = TrainPlan { seed: cfg.seed, cf, ..sec.plan.clone() };
    let lineage = parent_ck.child_lineage();
    let trainer = Pretrainer::new(
        Init::Checkpoint { checkpoint: parent_ck, resume: false },
        &PretrainData { vocab: &vocab, corpus: &corpus, replay: replay.as_ref() },
        &plan,
    )?;
    let dir = run_dir(cfg, &format!("adapt-{name}"))?;
    let (trainer, records) = run_trainer(trainer, &dir)?;
    let mut ck =
        Checkpoint::new(trainer.model.config.clone(), trainer.model.params.clone(), &vocab).with_optimizer(trainer.optimizer.clone());
    ck.meta.lineage = lineage;
    ck.meta.metadata.insert("stage".into(), serde_json::json!("adapt"));
    ck.meta.metadata.insert("preset".into(), serde_json::json!(name));
    ck.meta.metadata.insert("parent".into(), serde_json::json!(parent_id));
    let path = dir.join("checkpoint.ckpt");
    let id = persist::save(&ck, &path)?;
    let mut report = training_report(&records, &id, &path);
    report["preset"] = serde_json::json!(name);
    report["parent"] = serde_json::json!(parent_id);
    if let Some(LogRecord::CfAudit { llrd_decay, replay_frequency, mixout_p, freeze_layers, warmup_fraction, .. }) = records.first() {
        report["cf"] = serde_json::json!({
            "llrd_decay": llrd_decay,
            "replay_frequency": replay_frequency,
            "mixout_p": mixout_p,
            "freeze_layers": freeze_layers,
            "warmup_fraction": warmup_fraction,
        });
    }
    write_report(&dir, &report)?;
    let text = format!("adapted with preset {name} for {} steps; checkpoint {} ({})\n", plan.total_steps, path.display(), &id[..12]);
    Ok(RunSummary { dir, report, text, checkpoint: Some(path) })
}

/// MRR on the masked set and PPPL on the held-out corpora.
pub fn eval_mlm(cfg: &RunConfig, checkpoint: &Path) -> Result<RunSummary> {
    let sec = cfg.eval.as_ref().ok_or_else(|| Error::config("configuration has no [eval] section"))?;
    let vocab = cfg.load_vocab()?;
    let (ck, id) = persist::load_bound(checkpoint, &vocab)?;
    let model = Model::new(ck.meta.config.clone(), ck.params)?;
    let mrr_report = match &sec.masked_set {
        Some(p) => {
            let (items, _) = load_masked_set(p)?;
            Some(mrr(&model, &vocab, &items, sec.batch_size)?)
        }
        None => None,
    };
    let mut sentences = Vec::new();
    for p in &sec.heldout {
        sentences.extend(load_corpus(p, "heldout")?.sentences().map(str::to_string));
    }
    sentences.truncate(sec.max_sentences);
    let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
    let pppl_report = if refs.is_empty() { None } else { Some(pppl(&model, &vocab, &refs, sec.batch_size)?) };
    let dir = run_dir(cfg, &format!("eval-mlm-{}", &id[..12]))?;
    if let Some(m) = &mrr_report {
        write(&dir.join("items.jsonl"), jsonl(&m.items))?;
    }
    let report = serde_json::json!({
        "checkpoint": checkpoint,
        "checkpoint_id": id,
        "MRR": mrr_report.as_ref().map(|m| m.mrr),
        "PPPL": pppl_report.as_ref().map(|p| p.pppl),
        "mrr_items": mrr_report.as_ref().map(|m| m.n_scored),
        "mrr_excluded": mrr_report.as_ref().map(|m| m.excluded.len()),
        "mrr_per_subdomain": mrr_report.as_ref().map(|m| m.per_subdomain.clone()),
        "pppl_tokens": pppl_report.as_ref().map(|p| p.n_tokens),
        "pppl_truncated_sentences": pppl_report.as_ref().map(|p| p.truncated_sentences),
    });
    write_report(&dir, &report)?;
    let cell = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut text = String::from("| Model | MRR | PPPL |\n|---|---|---|\n");
    let _ = writeln!(text, "| {} | {} | {} |", &id[..12], cell(mrr_report.map(|m| m.mrr), 3), cell(pppl_report.map(|p| p.pppl), 3));
    write(&dir.join("table.md"), &text)?;
    Ok(RunSummary { dir, report, text, checkpoint: None })
}

fn load_task(sec: &TaskSection, seed: u64) -> Result<(TaskDataset, Vec<String>)> {
    let mut malformed = Vec::new();
    let mut read = |p: &Path| -> Result<Vec<_>> {
        let (ex, bad) = read_task_file(sec.task, p)?;
        malformed.extend(bad.into_iter().map(|b| format!("{}: {b}", p.display())));
        Ok(ex)
    };
    let train = read(&sec.train)?;
    let dev = sec.dev.as_deref().map(&mut read).transpose()?;
    let test = sec.test.as_deref().map(&mut read).transpose()?;
    Ok((TaskDataset::from_splits(sec.task, train, dev, test, seed)?, malformed))
}

/// Fine-tune every configured task once per seed.
pub fn finetune(cfg: &RunConfig, checkpoint: &Path) -> Result<RunSummary> {
    let sec = cfg.finetune.as_ref().ok_or_else(|| Error::config("configuration has no [finetune] section"))?;
    let vocab = cfg.load_vocab()?;
    let (ck, id) = persist::load_bound(checkpoint, &vocab)?;
    let seeds = cfg.finetune_seeds();
    let dir = run_dir(cfg, &format!("finetune-{}", &id[..12]))?;
    let mut reports = Vec::new();
    let mut log = Vec::new();
    for t in &sec.tasks {
        let (data, malformed) = load_task(t, cfg.seed)?;
        for m in &malformed {
            log::warn!("skipped malformed record {m}");
        }
        let (report, runs) = finetune_task(&ck, &id[..12], &vocab, &data, &sec.config, &seeds)?;
        for r in &runs {
            let path = dir.join(format!("{}-seed{}.ckpt", t.task.name(), r.seed));
            persist::save(&r.checkpoint, &path)?;
            log.push(serde_json::json!({
                "task": t.task.name(), "seed": r.seed, "best_epoch": r.best_epoch,
                "dev_f1": r.dev.f1, "test_precision": r.test.precision, "test_recall": r.test.recall, "test_f1": r.test.f1,
                "checkpoint": path,
            }));
        }
        log.push(serde_json::json!({ "task": t.task.name(), "malformed": malformed }));
        reports.push(report);
    }
    write(&dir.join("log.jsonl"), jsonl(&log))?;
    let report = serde_json::json!({
        "checkpoint": checkpoint,
        "checkpoint_id": id,
        "seeds": seeds,
        "tasks": reports.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
    });
    write_report(&dir, &report)?;
    let text = render_table(&reports);
    write(&dir.join("table.md"), &text)?;
    Ok(RunSummary { dir, report, text, checkpoint: None })
}

/// Translate a task dataset and relocate its annotations.
pub fn realign(cfg: &RunConfig) -> Result<RunSummary> {
    let sec = cfg.realign.as_ref().ok_or_else(|| Error::config("configuration has no [realign] section"))?;
    let translator = sec.translator.build()?;
    let mut malformed = Vec::new();
    let mut read = |p: &Path| -> Result<Vec<_>> {
        let (ex, bad) = read_task_file(sec.task, p)?;
        malformed.extend(bad.into_iter().map(|b| format!("{}: {b}", p.display())));
        Ok(ex)
    };
    let data = TaskDataset {
        task: sec.task,
        train: read(&sec.train)?,
        dev: sec.dev.as_deref().map(&mut read).transpose()?.unwrap_or_default(),
        test: sec.test.as_deref().map(&mut read).transpose()?.unwrap_or_default(),
    };
    let (out, report) = realign_dataset(&data, translator.as_ref())?;
    let dir = run_dir(cfg, &format!("realign-{}", sec.task.name()))?;
    for (name, ex) in [("train", &out.train), ("dev", &out.dev), ("test", &out.test)] {
        if !ex.is_empty() {
            write_task_file(sec.task, ex, &dir.join(format!("{name}.jsonl")))?;
        }
    }
    let mut value = serde_json::to_value(&report).map_err(|e| Error::config(e.to_string()))?;
    value["drop_pct"] = serde_json::json!(report.drop_pct());
    value["malformed_records"] = serde_json::json!(malformed);
    write_report(&dir, &value)?;
    let text = report.summary_table();
    write(&dir.join("summary.txt"), &text)?;
    Ok(RunSummary { dir, report: value, text, checkpoint: None })
}

/// Human-readable description of a checkpoint.
pub fn inspect(checkpoint: &Path) -> Result<String> {
    let (ck, id) = persist::load(checkpoint)?;
    let c = &ck.meta.config;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint   {}", checkpoint.display());
    let _ = writeln!(s, "id           {id}");
    let _ = writeln!(s, "fingerprint  {}", ck.meta.vocab_fingerprint);
    let chain: Vec<&str> = ck.meta.lineage.iter().map(|x| &x[..x.len().min(12)]).collect();
    let _ = writeln!(
        s,
        "lineage      {}",
        if chain.is_empty() { "(root)".to_string() } else { format!("{} -> {}", chain.join(" -> "), &id[..12]) }
    );
    let _ = writeln!(
        s,
        "architecture {} layers, hidden {}, {} heads, ff {}, {} positions, vocab {}",
        c.n_layers, c.hidden_dim, c.n_heads, c.ff_dim, c.max_seq_len, c.vocab_size
    );
    let _ = writeln!(s, "parameters   {} tensors, {} values", ck.params.len(), ck.params.numel());
    let _ = writeln!(s, "optimizer    {}", ck.optimizer.as_ref().map_or("none".to_string(), |o| format!("step {}", o.step)));
    for (k, v) in &ck.meta.metadata {
        let _ = writeln!(s, "meta.{k:<8} {v}");
    }
    Ok(s)
}

/// Write a self-contained synthetic workspace (corpora, task files, masked
/// set and a run configuration wired to them) under `dir`. Returns the
/// configuration path.
pub fn write_synthetic_workspace(dir: &Path, seed: u64) -> Result<PathBuf> {
    use crate::finetune::write_task_records;
    use crate::synthetic::{corpus, masked_records, ner_task, qa_examples, re_examples, Domain, Lexicon};

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lex = Lexicon::new(20, seed);
    let files: Vec<(&str, String)> = vec![
        ("general.txt", corpus(&lex, Domain::General, 200, seed).to_text()),
        ("medical.txt", corpus(&lex, Domain::Medical, 300, seed + 1).to_text()),
        ("medical_heldout.txt", corpus(&lex, Domain::Medical, 40, seed + 2).to_text()),
        ("masked.jsonl", jsonl(&masked_records(&lex, 60, seed + 3))),
    ];
    for (name, text) in &files {
        write(&dir.join(name), text)?;
    }
    let ner = ner_task(&lex, 200, 60, seed + 4);
    for (name, ex) in [("ner_train.jsonl", &ner.train), ("ner_dev.jsonl", &ner.dev), ("ner_test.jsonl", &ner.test)] {
        write(&dir.join(name), write_task_records(Task::Ner, ex))?;
    }
    write(&dir.join("qa.jsonl"), write_task_records(Task::Qa, &qa_examples(&lex, 60, seed + 5)))?;
    write(&dir.join("re.jsonl"), write_task_records(Task::Re, &re_examples(&lex, 60, seed + 6)))?;

    let plan = TrainPlan {
        total_steps: 500,
        batch_size: 16,
        seq_len: 64,
        peak_lr: 1e-3,
        eval_every: 250,
        eval_sentences: 50,
        heldout_fraction: 0.1,
        ..Default::default()
    };
    let cfg = RunConfig {
        seed,
        out_dir: dir.join("runs"),
        tokenizer: TokenizerSection {
            corpora: vec![dir.join("general.txt"), dir.join("medical.txt")],
            vocab_size: 800,
            min_freq: 2,
            lowercase: true,
            vocab: None,
        },
        model: ArchSection::default(),
        pretrain: Some(PretrainSection { corpus: dir.join("general.txt"), plan: plan.clone() }),
        adapt: Some(AdaptSection { corpus: dir.join("medical.txt"), plan, preset: Some("bio".into()), cf: None, replay_corpus: None }),
        eval: Some(EvalSection {
            masked_set: Some(dir.join("masked.jsonl")),
            heldout: vec![dir.join("medical_heldout.txt")],
            max_sentences: 100,
            batch_size: 64,
        }),
        finetune: Some(FinetuneSection {
            tasks: vec![TaskSection {
                task: Task::Ner,
                train: dir.join("ner_train.jsonl"),
                dev: Some(dir.join("ner_dev.jsonl")),
                test: Some(dir.join("ner_test.jsonl")),
            }],
            seeds: None,
            n_seeds: 5,
            config: FinetuneConfig { lr: 1e-3, batch_size: 16, max_epochs: 10, patience: 3, seq_len: 32, ..Default::default() },
        }),
        realign: Some(RealignSection {
            task: Task::Ner,
            translator: TranslatorSpec::InflectionNoise { rate: 0.1, seed },
            train: dir.join("ner_train.jsonl"),
            dev: Some(dir.join("ner_dev.jsonl")),
            test: Some(dir.join("ner_test.jsonl")),
        }),
    };
    let path = dir.join("config.toml");
    write(&path, cfg.to_toml()?)?;
    Ok(path)
}
