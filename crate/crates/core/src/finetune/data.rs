use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tokenizer::pretokenize;

/// Character span (Unicode scalar offsets, end exclusive) with a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// One example of any task. NER uses `annotations` as entity mentions; QA
/// stores the context in `text`, the question in `question` and the gold
/// answers as annotations labelled `answer`; RE stores the two arguments as
/// annotations labelled `e1` and `e2` plus the `relation`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Qa,
    Re,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::Qa => "qa",
            Task::Re => "re",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(Task::Ner),
            "qa" => Ok(Task::Qa),
            "re" => Ok(Task::Re),
            _ => Err(Error::config(format!("unknown task {s:?}; expected ner, qa or re"))),
        }
    }
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

pub fn char_slice(s: &str, start: usize, end: usize) -> String {
    s.chars().skip(start).take(end.saturating_sub(start)).collect()
}

impl AnnotatedExample {
    pub fn span_text(&self, a: &Annotation) -> String {
        char_slice(&self.text, a.start, a.end)
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        let n = char_len(&self.text);
        for a in &self.annotations {
            if !(a.start < a.end && a.end <= n) {
                return Err(Error::input(format!("{}: span {}..{} invalid for text of {n} chars", self.id, a.start, a.end)));
            }
        }
        match task {
            Task::Ner => {
                let mut spans: Vec<&Annotation> = self.annotations.iter().collect();
                spans.sort();
                if let Some(w) = spans.windows(2).find(|w| w[1].start < w[0].end) {
                    return Err(Error::input(format!(
                        "{}: entities {}..{} and {}..{} overlap",
                        self.id, w[0].start, w[0].end, w[1].start, w[1].end
                    )));
                }
            }
            Task::Qa => {
                if self.question.is_none() {
                    return Err(Error::input(format!("{}: question missing", self.id)));
                }
                if self.annotations.is_empty() {
                    return Err(Error::input(format!("{}: no answers", self.id)));
                }
            }
            Task::Re => {
                let has = |l: &str| self.annotations.iter().filter(|a| a.label == l).count() == 1;
                if !has("e1") || !has("e2") || self.relation.is_none() {
                    return Err(Error::input(format!("{}: relation examples need one e1, one e2 and a relation", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// Train/dev/test splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub train: Vec<AnnotatedExample>,
    pub dev: Vec<AnnotatedExample>,
    pub test: Vec<AnnotatedExample>,
}

impl TaskDataset {
    /// Use given splits, or split `train` 80/10/10 with the task seed when
    /// dev or test is missing.
    pub fn from_splits(
        task: Task,
        train: Vec<AnnotatedExample>,
        dev: Option<Vec<AnnotatedExample>>,
        test: Option<Vec<AnnotatedExample>>,
        seed: u64,
    ) -> Result<Self> {
        for e in train.iter().chain(dev.iter().flatten()).chain(test.iter().flatten()) {
            e.validate(task)?;
        }
        match (dev, test) {
            (Some(dev), Some(test)) => Ok(Self { task, train, dev, test }),
            (dev, test) => {
                let mut all = train;
                all.extend(dev.into_iter().flatten());
                all.extend(test.into_iter().flatten());
                all.shuffle(&mut substream(seed, "splits", 0));
                let n = all.len();
                let n_test = (n as f64 * 0.1).round() as usize;
                let n_dev = (n as f64 * 0.1).round() as usize;
                if n < 3 || n_test == 0 || n_dev == 0 {
                    return Err(Error::input(format!("{n} examples are too few to split")));
                }
                let test = all.split_off(n - n_test);
                let dev = all.split_off(all.len() - n_dev);
                Ok(Self { task, train: all, dev, test })
            }
        }
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> (Vec<T>, Vec<String>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => ok.push(v),
            Err(e) => bad.push(format!("line {}: {e}", i + 1)),
        }
    }
    (ok, bad)
}

pub fn write_jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serializable") + "\n").collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub text: String,
    /// Character offset into the context.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answers: Vec<QaAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReRecord {
    pub id: String,
    /// Text with `<e1>..</e1>` and `<e2>..</e2>` around the arguments.
    pub text: String,
    pub relation: String,
}

/// NER sidecar line: character spans of the CoNLL sentence with the same index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerRecord {
    pub id: String,
    pub text: String,
    pub entities: Vec<Annotation>,
}

impl From<QaRecord> for AnnotatedExample {
    fn from(r: QaRecord) -> Self {
        let annotations = r
            .answers
            .iter()
            .map(|a| Annotation { start: a.answer_start, end: a.answer_start + char_len(&a.text), label: "answer".into() })
            .collect();
        AnnotatedExample { id: r.id, text: r.context, question: Some(r.question), annotations, relation: None }
    }
}

impl AnnotatedExample {
    pub fn to_qa(&self) -> QaRecord {
        QaRecord {
            id: self.id.clone(),
            question: self.question.clone().unwrap_or_default(),
            context: self.text.clone(),
            answers: self.annotations.iter().map(|a| QaAnswer { text: self.span_text(a), answer_start: a.start }).collect(),
        }
    }

    pub fn to_re(&self) -> ReRecord {
        let mut marks: Vec<(usize, &str)> = Vec::new();
        for a in &self.annotations {
            let (open, close) = if a.label == "e1" { ("<e1>", "</e1>") } else { ("<e2>", "</e2>") };
            marks.push((a.start, open));
            marks.push((a.end, close));
        }
        // Closing tags before opening tags at the same offset.
        marks.sort_by_key(|(p, t)| (*p, !t.starts_with("</")));
        let mut out = String::new();
        let mut mi = 0;
        for (i, c) in self.text.chars().enumerate() {
            while mi < marks.len() && marks[mi].0 == i {
                out.push_str(marks[mi].1);
                mi += 1;
            }
            out.push(c);
        }
        for m in &marks[mi..] {
            out.push_str(m.1);
        }
        ReRecord { id: self.id.clone(), text: out, relation: self.relation.clone().unwrap_or_default() }
    }

    pub fn to_ner(&self) -> NerRecord {
        NerRecord { id: self.id.clone(), text: self.text.clone(), entities: self.annotations.clone() }
    }
}

impl TryFrom<ReRecord> for AnnotatedExample {
    type Error = Error;

    fn try_from(r: ReRecord) -> Result<Self> {
        let mut text = String::new();
        let mut open: [Option<usize>; 2] = [None, None];
        let mut spans: Vec<Annotation> = Vec::new();
        let mut n = 0;
        let mut rest = r.text.as_str();
        while !rest.is_empty() {
            let tag = ["<e1>", "</e1>", "<e2>", "</e2>"].into_iter().find(|t| rest.starts_with(t));
            match tag {
                Some(t) => {
                    let k = if t.contains('1') { 0 } else { 1 };
                    if t.starts_with("</") {
                        let s = open[k].take().ok_or_else(|| Error::input(format!("{}: {t} without opening tag", r.id)))?;
                        spans.push(Annotation { start: s, end: n, label: format!("e{}", k + 1) });
                    } else {
                        open[k] = Some(n);
                    }
                    rest = &rest[t.len()..];
                }
                None => {
                    let c = rest.chars().next().unwrap();
                    text.push(c);
                    n += 1;
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        spans.sort_by(|a, b| a.label.cmp(&b.label));
        let ex = AnnotatedExample { id: r.id, text, question: None, annotations: spans, relation: Some(r.relation) };
        ex.validate(Task::Re)?;
        Ok(ex)
    }
}

impl From<NerRecord> for AnnotatedExample {
    fn from(r: NerRecord) -> Self {
        AnnotatedExample { id: r.id, text: r.text, question: None, annotations: r.entities, relation: None }
    }
}

/// CoNLL-style `token<TAB>tag` lines, one blank line between sentences.
pub fn write_conll(examples: &[AnnotatedExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        for w in pretokenize(&ex.text) {
            let tag = ex
                .annotations
                .iter()
                .find(|a| w.start < a.end && a.start < w.end)
                .map(|a| if w.start <= a.start { format!("B-{}", a.label) } else { format!("I-{}", a.label) })
                .unwrap_or_else(|| "O".into());
            out.push_str(&format!("{}\t{tag}\n", w.text));
        }
        out.push('\n');
    }
    out
}

/// Parse CoNLL sentences into `(tokens, tags)`.
pub fn read_conll(text: &str) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut out = Vec::new();
    let mut cur = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.0.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(tok), Some(tag)) = (cols.next(), cols.next_back()) else {
            return Err(Error::input(format!("line {}: expected token and tag columns", i + 1)));
        };
        cur.0.push(tok.to_string());
        cur.1.push(tag.to_string());
    }
    if !cur.0.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// Entities from a BIO tag sequence as `(first word, last word, label)`;
/// an `I-` tag that cannot continue the open entity starts a new one.
pub fn bio_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut out: Vec<(usize, usize, String)> = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, t) in tags.iter().enumerate() {
        let (kind, label) = match t.split_once('-') {
            Some((k, l)) if k == "B" || k == "I" => (k, l.to_string()),
            _ => ("O", String::new()),
        };
        let continues = kind == "I" && open.as_ref().is_some_and(|(_, l)| *l == label);
        if continues {
            continue;
        }
        if let Some((s, l)) = open.take() {
            out.push((s, i - 1, l));
        }
        if kind != "O" {
            open = Some((i, label));
        }
    }
    if let Some((s, l)) = open {
        out.push((s, tags.len() - 1, l));
    }
    out
}

/// Rebuild examples from CoNLL tokens joined by single spaces.
pub fn conll_to_examples(sentences: &[(Vec<String>, Vec<String>)], id_prefix: &str) -> Vec<AnnotatedExample> {
    sentences
        .iter()
        .enumerate()
        .map(|(k, (toks, tags))| {
            let mut starts = Vec::with_capacity(toks.len());
            let mut text = String::new();
            let mut n = 0;
            for t in toks {
                if !text.is_empty() {
                    text.push(' ');
                    n += 1;
                }
                starts.push(n);
                text.push_str(t);
                n += char_len(t);
            }
            let annotations = bio_spans(tags)
                .into_iter()
                .map(|(a, b, label)| Annotation { start: starts[a], end: starts[b] + char_len(&toks[b]), label })
                .collect();
            AnnotatedExample { id: format!("{id_prefix}{k}"), text, question: None, annotations, relation: None }
        })
        .collect()
}

/// Read one split of a task file. NER accepts a `.jsonl` sidecar or a CoNLL
/// file; QA and RE read JSONL. Malformed lines are returned separately.
pub fn read_task_file(task: Task, path: &Path) -> Result<(Vec<AnnotatedExample>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl" || e == "json");
    Ok(match task {
        Task::Ner if !is_jsonl => (conll_to_examples(&read_conll(&text)?, "s"), Vec::new()),
        Task::Ner => {
            let (recs, bad) = read_jsonl::<NerRecord>(&text);
            (recs.into_iter().map(Into::into).collect(), bad)
        }
        Task::Qa => {
            let (recs, bad) = read_jsonl::<QaRecord>(&text);
            (recs.into_iter().map(Into::into).collect(), bad)
        }
        Task::Re => {
            let (recs, mut bad) = read_jsonl::<ReRecord>(&text);
            let mut out = Vec::new();
            for r in recs {
                match AnnotatedExample::try_from(r) {
                    Ok(e) => out.push(e),
                    Err(e) => bad.push(e.to_string()),
                }
            }
            (out, bad)
        }
    })
}

/// Serialize examples in the task's file schema (NER as the JSONL sidecar).
pub fn write_task_records(task: Task, examples: &[AnnotatedExample]) -> String {
    match task {
        Task::Ner => write_jsonl(&examples.iter().map(AnnotatedExample::to_ner).collect::<Vec<_>>()),
        Task::Qa => write_jsonl(&examples.iter().map(AnnotatedExample::to_qa).collect::<Vec<_>>()),
        Task::Re => write_jsonl(&examples.iter().map(AnnotatedExample::to_re).collect::<Vec<_>>()),
    }
}

/// Write a task split; NER also gets a CoNLL file next to the sidecar.
pub fn write_task_file(task: Task, examples: &[AnnotatedExample], path: &Path) -> Result<()> {
    std::fs::write(path, write_task_records(task, examples)).map_err(|e| Error::io(path, e))?;
    if task == Task::Ner {
        let conll = path.with_extension("conll");
        std::fs::write(&conll, write_conll(examples)).map_err(|e| Error::io(&conll, e))?;
    }
    Ok(())
}
