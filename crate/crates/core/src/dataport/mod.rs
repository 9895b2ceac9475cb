//! Translation-based dataset adaptation: translate each example, relocate
//! every annotated mention in the translated text and drop what cannot be
//! relocated.

mod translators;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use translators::{
    accent_fold, stub_translators, AccentFold, Dictionary, Identity, InflectionNoise, Translator, TranslatorSpec, Uppercase, WordShuffle,
};

use crate::error::Result;
use crate::finetune::{char_len, AnnotatedExample, Annotation, Task, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    MentionNotFound,
    AmbiguousAfterPolicy,
    EmptyTranslation,
}

/// How a mention was found in the translated context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    Exact,
    CaseInsensitive,
    AccentFolded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Realigned {
    Kept { example: AnnotatedExample, levels: Vec<MatchLevel> },
    Dropped(DropReason),
}

type Folded = (Vec<char>, Vec<usize>);

/// Per-char normalization of `text`, keeping the source index of every
/// produced char.
fn fold(text: &[char], level: MatchLevel) -> Folded {
    let mut out = Vec::with_capacity(text.len());
    let mut origin = Vec::with_capacity(text.len());
    for (i, &c) in text.iter().enumerate() {
        let mut push = |d: char| {
            out.push(d);
            origin.push(i);
        };
        match level {
            MatchLevel::Exact => push(c),
            MatchLevel::CaseInsensitive => c.to_lowercase().for_each(push),
            MatchLevel::AccentFolded => accent_fold(&c.to_string()).chars().flat_map(char::to_lowercase).for_each(push),
        }
    }
    (out, origin)
}

/// Char spans in `ctx` whose normalization equals the normalization of
/// `mention`.
fn occurrences(ctx: &[char], mention: &[char], level: MatchLevel) -> Vec<(usize, usize)> {
    let (c, origin) = fold(ctx, level);
    let (m, _) = fold(mention, level);
    if m.is_empty() || m.len() > c.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for s in 0..=c.len() - m.len() {
        if c[s..s + m.len()] != m[..] {
            continue;
        }
        // Matches must cover whole source chars at both ends.
        if s > 0 && origin[s - 1] == origin[s] {
            continue;
        }
        let last = s + m.len() - 1;
        if last + 1 < c.len() && origin[last + 1] == origin[last] {
            continue;
        }
        let start = origin[s];
        let mut end = origin[last] + 1;
        if level == MatchLevel::AccentFolded {
            while end < ctx.len() && fold(&ctx[end..end + 1], level).0.is_empty() {
                end += 1;
            }
        }
        if out.last() != Some(&(start, end)) {
            out.push((start, end));
        }
    }
    out
}

enum Located {
    At(usize, usize, MatchLevel),
    NotFound,
    Ambiguous,
}

/// Exact, then case-insensitive, then accent-folded; among several hits the
/// one nearest the source's relative position wins.
fn locate(ctx: &[char], mention: &[char], rel: f64) -> Located {
    for level in [MatchLevel::Exact, MatchLevel::CaseInsensitive, MatchLevel::AccentFolded] {
        let hits = occurrences(ctx, mention, level);
        if hits.is_empty() {
            continue;
        }
        let n = ctx.len() as f64;
        let dist = |h: &(usize, usize)| (h.0 as f64 / n - rel).abs();
        let best = hits.iter().map(dist).fold(f64::INFINITY, f64::min);
        let nearest: Vec<&(usize, usize)> = hits.iter().filter(|h| dist(h) == best).collect();
        return match nearest[..] {
            [&(s, e)] => Located::At(s, e, level),
            _ => Located::Ambiguous,
        };
    }
    Located::NotFound
}

/// Translate one example and relocate its annotations.
///
/// The context (and question) are translated once; each mention is
/// translated on its own and searched for in the translated context.
/// Translator failures are errors, not drops.
pub fn realign_example(task: Task, example: &AnnotatedExample, translator: &dyn Translator) -> Result<Realigned> {
    let spans: Vec<(usize, usize)> = example.annotations.iter().map(|a| (a.start, a.end)).collect();
    let text = translator.translate_protected(&example.text, &spans)?;
    let question = example.question.as_deref().map(|q| translator.translate(q)).transpose()?;
    if text.trim().is_empty() && !example.text.trim().is_empty() {
        return Ok(Realigned::Dropped(DropReason::EmptyTranslation));
    }
    let ctx: Vec<char> = text.chars().collect();
    let src_len = char_len(&example.text).max(1) as f64;
    let mut annotations = Vec::with_capacity(example.annotations.len());
    let mut levels = Vec::with_capacity(example.annotations.len());
    for a in &example.annotations {
        let mention = example.span_text(a);
        let translated = translator.translate_protected(&mention, &[(0, char_len(&mention))])?;
        let m: Vec<char> = translated.trim().chars().collect();
        match locate(&ctx, &m, a.start as f64 / src_len) {
            Located::At(start, end, level) => {
                annotations.push(Annotation { start, end, label: a.label.clone() });
                levels.push(level);
            }
            Located::NotFound => return Ok(Realigned::Dropped(DropReason::MentionNotFound)),
            Located::Ambiguous => return Ok(Realigned::Dropped(DropReason::AmbiguousAfterPolicy)),
        }
    }
    let out = AnnotatedExample { id: example.id.clone(), text, question, annotations, relation: example.relation.clone() };
    // Distinct mentions landing on overlapping text cannot both be right.
    if task == Task::Ner && out.validate(task).is_err() {
        return Ok(Realigned::Dropped(DropReason::AmbiguousAfterPolicy));
    }
    Ok(Realigned::Kept { example: out, levels })
}

/// Counts for one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub total: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    /// Annotations of kept examples by how they were located.
    pub annotations_by_level: BTreeMap<MatchLevel, usize>,
    pub annotations_source: usize,
    /// Ids of invalid input records; not counted in `total`.
    pub malformed: Vec<String>,
    pub drops: Vec<(String, DropReason)>,
}

impl SplitReport {
    pub fn n_dropped(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn drop_pct(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.n_dropped() as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RealignmentReport {
    pub task: String,
    pub translator: String,
    pub splits: Vec<SplitReport>,
}

impl RealignmentReport {
    pub fn total(&self) -> usize {
        self.splits.iter().map(|s| s.total).sum()
    }

    pub fn kept(&self) -> usize {
        self.splits.iter().map(|s| s.kept).sum()
    }

    pub fn n_dropped(&self) -> usize {
        self.splits.iter().map(SplitReport::n_dropped).sum()
    }

    pub fn drop_pct(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            100.0 * self.n_dropped() as f64 / self.total() as f64
        }
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!("realignment of {} with {}\n", self.task, self.translator);
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9} {:>10}",
            "split", "total", "kept", "dropped", "drop%", "not_found", "ambiguous", "empty"
        );
        for sp in self.splits.iter() {
            let d = |r| sp.dropped.get(&r).copied().unwrap_or(0);
            let _ = writeln!(
                s,
                "{:<8} {:>7} {:>7} {:>7} {:>7.1} {:>9} {:>9} {:>10}",
                sp.split,
                sp.total,
                sp.kept,
                sp.n_dropped(),
                sp.drop_pct(),
                d(DropReason::MentionNotFound),
                d(DropReason::AmbiguousAfterPolicy),
                d(DropReason::EmptyTranslation)
            );
        }
        let _ = writeln!(s, "{:<8} {:>7} {:>7} {:>7} {:>7.1}", "all", self.total(), self.kept(), self.n_dropped(), self.drop_pct());
        s
    }
}

/// Realign one split, preserving order.
pub fn realign_examples(
    task: Task,
    split: &str,
    examples: &[AnnotatedExample],
    translator: &dyn Translator,
) -> Result<(Vec<AnnotatedExample>, SplitReport)> {
    let mut report = SplitReport { split: split.to_string(), ..Default::default() };
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        if e.validate(task).is_err() {
            report.malformed.push(e.id.clone());
            continue;
        }
        report.total += 1;
        report.annotations_source += e.annotations.len();
        match realign_example(task, e, translator)? {
            Realigned::Kept { example, levels } => {
                report.kept += 1;
                for l in levels {
                    *report.annotations_by_level.entry(l).or_default() += 1;
                }
                out.push(example);
            }
            Realigned::Dropped(reason) => {
                *report.dropped.entry(reason).or_default() += 1;
                report.drops.push((e.id.clone(), reason));
            }
        }
    }
    Ok((out, report))
}

pub fn realign_dataset(dataset: &TaskDataset, translator: &dyn Translator) -> Result<(TaskDataset, RealignmentReport)> {
    let mut report = RealignmentReport { task: dataset.task.name().into(), translator: translator.name().into(), splits: Vec::new() };
    let mut run = |name: &str, ex: &[AnnotatedExample]| -> Result<Vec<AnnotatedExample>> {
        let (out, r) = realign_examples(dataset.task, name, ex, translator)?;
        report.splits.push(r);
        Ok(out)
    };
    let train = run("train", &dataset.train)?;
    let dev = run("dev", &dataset.dev)?;
    let test = run("test", &dataset.test)?;
    Ok((TaskDataset { task: dataset.task, train, dev, test }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::char_slice;

    fn ner(id: &str, text: &str, spans: &[(usize, usize, &str)]) -> AnnotatedExample {
        AnnotatedExample {
            id: id.into(),
            text: text.into(),
            question: None,
            annotations: spans.iter().map(|&(s, e, l)| Annotation { start: s, end: e, label: l.into() }).collect(),
            relation: None,
        }
    }

    /// Brute-force case-insensitive search over char windows.
    fn naive_ci(ctx: &str, m: &str) -> Vec<usize> {
        let c: Vec<char> = ctx.chars().collect();
        let n = m.chars().count();
        (0..=c.len().saturating_sub(n)).filter(|&s| c[s..s + n].iter().collect::<String>().to_lowercase() == m.to_lowercase()).collect()
    }

    #[test]
    fn identity_is_noop() {
        let e = ner("a", "il gene BRAF è mutato", &[(8, 12, "GENE")]);
        match realign_example(Task::Ner, &e, &Identity).unwrap() {
            Realigned::Kept { example, levels } => {
                assert_eq!(example, e);
                assert_eq!(levels, vec![MatchLevel::Exact]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uppercase_relocates_case_insensitively() {
        // mention translated alone stays "braf"; the context is upper-cased
        struct UpperContext;
        impl Translator for UpperContext {
            fn name(&self) -> &str {
                "upper_context"
            }
            fn translate(&self, text: &str) -> Result<String> {
                Ok(if text.contains(' ') { format!("NOTE: {}", text.to_uppercase()) } else { text.to_string() })
            }
        }
        let e = ner("a", "the braf gene", &[(4, 8, "GENE")]);
        let Realigned::Kept { example, levels } = realign_example(Task::Ner, &e, &UpperContext).unwrap() else { panic!() };
        let a = &example.annotations[0];
        assert_eq!(vec![a.start], naive_ci(&example.text, "braf"));
        assert_eq!(char_slice(&example.text, a.start, a.end), "BRAF");
        assert_eq!(levels, vec![MatchLevel::CaseInsensitive]);
    }

    #[test]
    fn accent_folded_match_covers_combining_marks() {
        let ctx: Vec<char> = "la citta\u{300} e\u{301} bella".chars().collect();
        let hits = occurrences(&ctx, &"citta".chars().collect::<Vec<_>>(), MatchLevel::AccentFolded);
        assert_eq!(hits, vec![(3, 9)]);
        let hits = occurrences(&"perché no".chars().collect::<Vec<_>>(), &"perche".chars().collect::<Vec<_>>(), MatchLevel::AccentFolded);
        assert_eq!(hits, vec![(0, 6)]);
    }

    #[test]
    fn deleted_mention_drops() {
        let d = Dictionary::new([("BRAF".to_string(), String::new())]).unwrap();
        let e = ner("a", "il gene BRAF è mutato", &[(8, 12, "GENE")]);
        assert_eq!(realign_example(Task::Ner, &e, &d).unwrap(), Realigned::Dropped(DropReason::MentionNotFound));
    }

    #[test]
    fn repeated_mention_uses_relative_position() {
        let e = ner("a", "tp53 and x and y and tp53", &[(21, 25, "GENE")]);
        let t = WordShuffle { seed: 5 };
        let Realigned::Kept { example, .. } = realign_example(Task::Ner, &e, &t).unwrap() else { panic!() };
        let a = &example.annotations[0];
        assert_eq!(char_slice(&example.text, a.start, a.end), "tp53");
        let hits: Vec<usize> = naive_ci(&example.text, "tp53");
        let rel = 21.0 / 25.0;
        let best = hits.iter().min_by(|x, y| ((**x as f64 / 25.0) - rel).abs().total_cmp(&((**y as f64 / 25.0) - rel).abs())).unwrap();
        assert_eq!(a.start, *best);
    }

    #[test]
    fn empty_translation_drops() {
        let d = Dictionary::new([("ciao".to_string(), String::new())]).unwrap();
        let e = ner("a", "ciao", &[(0, 4, "X")]);
        assert_eq!(realign_example(Task::Ner, &e, &d).unwrap(), Realigned::Dropped(DropReason::EmptyTranslation));
    }

    #[test]
    fn one_of_twenty_deleted_is_five_percent() {
        let ex: Vec<AnnotatedExample> = (0..20)
            .map(|i| {
                let m = if i == 7 { "zzgone".to_string() } else { format!("gene{i}") };
                let text = format!("the {m} is here");
                ner(&i.to_string(), &text, &[(4, 4 + m.len(), "GENE")])
            })
            .collect();
        let d = Dictionary::new([("zzgone".to_string(), String::new())]).unwrap();
        let (kept, r) = realign_examples(Task::Ner, "train", &ex, &d).unwrap();
        assert_eq!((r.total, r.kept, r.n_dropped()), (20, 19, 1));
        assert_eq!(kept.len(), 19);
        assert!((r.drop_pct() - 5.0).abs() < 1e-12);
        assert_eq!(r.drops, vec![("7".to_string(), DropReason::MentionNotFound)]);
    }

    #[test]
    fn malformed_listed_and_skipped() {
        let ex = vec![ner("ok", "abc def", &[(0, 3, "X")]), ner("bad", "abc", &[(2, 9, "X")])];
        let (kept, r) = realign_examples(Task::Ner, "train", &ex, &Identity).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(r.malformed, vec!["bad".to_string()]);
        assert_eq!(r.total, 1);
    }

    #[test]
    fn translator_failure_propagates() {
        let t = InflectionNoise { rate: 3.0, seed: 0 };
        let e = ner("a", "abc", &[(0, 3, "X")]);
        assert!(realign_example(Task::Ner, &e, &t).is_err());
    }
}
