//! Seeded generators for small corpora and task fixtures with known
//! structure: a general domain and a medical domain that share function
//! words but not content words, plus entity names whose type shows only
//! through the medical contexts they occur in.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::finetune::{char_len, AnnotatedExample, Annotation, Task, TaskDataset};
use crate::mlmeval::{MaskedRecord, Masking};
use crate::pretrain::Corpus;
use crate::rng::{substream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    General,
    Medical,
}

pub const ENTITY_TYPES: [&str; 3] = ["DRUG", "DISEASE", "GENE"];

const SYLLABLES: [&str; 20] =
    ["ka", "lo", "mi", "ra", "te", "zu", "no", "vi", "sa", "de", "po", "ri", "fe", "lu", "bo", "ga", "ne", "ti", "xo", "ce"];

const G_NOUN: &[&str] = &[
    "city", "river", "market", "school", "garden", "bridge", "train", "museum", "harbor", "village", "castle", "forest", "library",
    "festival", "church", "square", "road", "farm", "island", "theater",
];
const G_ADJ: &[&str] = &["old", "large", "quiet", "busy", "famous", "small", "green", "ancient", "crowded", "narrow"];
const G_VERB: &[&str] = &["visited", "crossed", "built", "opened", "painted", "described", "reached", "closed", "restored", "photographed"];
const G_PEOPLE: &[&str] = &["tourists", "students", "workers", "children", "families", "farmers", "artists", "sailors"];
const G_TIME: &[&str] = &["morning", "summer", "winter", "evening", "weekend", "spring"];

const M_NOUN: &[&str] = &[
    "patient",
    "tumor",
    "dose",
    "cell",
    "tissue",
    "therapy",
    "trial",
    "biopsy",
    "lesion",
    "infection",
    "symptom",
    "clinic",
    "sample",
    "protein",
    "receptor",
    "scan",
    "ward",
    "vaccine",
    "marker",
    "pathway",
];
const M_ADJ: &[&str] = &["chronic", "acute", "severe", "mild", "benign", "malignant", "clinical", "cardiac", "renal", "stable"];
const M_VERB: &[&str] =
    &["treated", "diagnosed", "measured", "reduced", "inhibited", "observed", "monitored", "resected", "detected", "confirmed"];
const M_PEOPLE: &[&str] = &["patients", "doctors", "nurses", "clinicians", "researchers", "surgeons"];

/// Words of the task templates, also used by general-domain text so the
/// tokenizer covers them.
const NEUTRAL: &[&str] =
    &["list", "notes", "page", "report", "summary", "meeting", "yesterday", "today", "mentioned", "recorded", "discussed", "includes"];

/// Word lists of both domains, with generated entity names.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub entities: BTreeMap<&'static str, Vec<String>>,
}

impl Lexicon {
    /// `per_type` two-syllable names for each entity type, all distinct.
    pub fn new(per_type: usize, seed: u64) -> Self {
        let mut names: Vec<String> =
            SYLLABLES.iter().flat_map(|a| SYLLABLES.iter().filter(move |b| *b != a).map(move |b| format!("{a}{b}"))).collect();
        names.shuffle(&mut substream(seed, "lexicon", 0));
        let per_type = per_type.min(names.len() / ENTITY_TYPES.len());
        let entities = ENTITY_TYPES.iter().enumerate().map(|(i, t)| (*t, names[i * per_type..(i + 1) * per_type].to_vec())).collect();
        Self { entities }
    }

    pub fn of(&self, ty: &str) -> &[String] {
        &self.entities[ty]
    }

    /// Names of one type split into (task-train, held-back) halves.
    pub fn split(&self, ty: &str) -> (&[String], &[String]) {
        let v = self.of(ty);
        v.split_at(v.len() / 2)
    }
}

fn pick<'a>(rng: &mut StreamRng, xs: &'a [&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn pick_s<'a>(rng: &mut StreamRng, xs: &'a [String]) -> &'a str {
    &xs[rng.gen_range(0..xs.len())]
}

fn general_sentence(rng: &mut StreamRng, topic: &[&str]) -> String {
    let n = |r: &mut StreamRng| pick(r, topic).to_string();
    match rng.gen_range(0..7) {
        0 => {
            format!("the {} {} the {} {} in the {} .", pick(rng, G_PEOPLE), pick(rng, G_VERB), pick(rng, G_ADJ), n(rng), pick(rng, G_TIME))
        }
        1 => format!("a {} {} was {} by the {} .", pick(rng, G_ADJ), n(rng), pick(rng, G_VERB), pick(rng, G_PEOPLE)),
        2 => format!("the {} near the {} is {} .", n(rng), n(rng), pick(rng, G_ADJ)),
        3 => format!("many {} {} the {} of the {} .", pick(rng, G_PEOPLE), pick(rng, G_VERB), n(rng), n(rng)),
        4 => format!("in the {} the {} is {} and {} .", pick(rng, G_TIME), n(rng), pick(rng, G_ADJ), pick(rng, G_ADJ)),
        5 => format!(
            "the {} {} the {} in the {} {} .",
            pick(rng, G_PEOPLE),
            pick(rng, NEUTRAL),
            n(rng),
            pick(rng, NEUTRAL),
            pick(rng, NEUTRAL)
        ),
        _ => format!(
            "the {} of the {} {} the {} {} .",
            pick(rng, NEUTRAL),
            pick(rng, G_PEOPLE),
            pick(rng, NEUTRAL),
            n(rng),
            pick(rng, NEUTRAL)
        ),
    }
}

fn medical_sentence(rng: &mut StreamRng, lex: &Lexicon, topic: &[&str]) -> String {
    let drug = pick_s(rng, lex.of("DRUG")).to_string();
    let disease = pick_s(rng, lex.of("DISEASE")).to_string();
    let gene = pick_s(rng, lex.of("GENE")).to_string();
    let n = |r: &mut StreamRng| pick(r, topic).to_string();
    match rng.gen_range(0..14) {
        0 => format!("the {} received {drug} at a {} dose .", pick(rng, M_PEOPLE), pick(rng, M_ADJ)),
        1 => format!("{drug} was administered twice daily ."),
        2 => format!("treatment with {drug} reduced the {} .", n(rng)),
        3 => format!("the doctors prescribed {drug} for {disease} ."),
        4 => format!("the patient was diagnosed with {disease} ."),
        5 => format!("{disease} is a {} condition .", pick(rng, M_ADJ)),
        6 => format!("symptoms of {disease} were {} in the ward .", pick(rng, M_VERB)),
        7 => format!("a mutation in the {gene} gene was detected ."),
        8 => format!("expression of {gene} was measured in the {} .", n(rng)),
        9 => format!("the {gene} protein binds the receptor ."),
        10 => format!("the {} {} the {} {} .", pick(rng, M_PEOPLE), pick(rng, M_VERB), pick(rng, M_ADJ), n(rng)),
        11 => format!("a {} {} was {} in the {} .", pick(rng, M_ADJ), n(rng), pick(rng, M_VERB), n(rng)),
        12 => format!("the {} of the {} is {} .", n(rng), n(rng), pick(rng, M_ADJ)),
        _ => format!("{} {} the {} after the {} .", pick(rng, M_PEOPLE), pick(rng, M_VERB), n(rng), n(rng)),
    }
}

/// `n_docs` documents of 3 to 8 sentences. Each document draws its
/// content nouns from a topic subset of the domain's nouns.
pub fn corpus(lex: &Lexicon, domain: Domain, n_docs: usize, seed: u64) -> Corpus {
    let name = match domain {
        Domain::General => "synthetic_general",
        Domain::Medical => "synthetic_medical",
    };
    let mut documents = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let mut rng = substream(seed, name, d as u64);
        let nouns = if domain == Domain::General { G_NOUN } else { M_NOUN };
        let mut topic: Vec<&str> = nouns.to_vec();
        topic.shuffle(&mut rng);
        topic.truncate(5);
        let len = rng.gen_range(3..=8);
        let doc = (0..len)
            .map(|_| match domain {
                Domain::General => general_sentence(&mut rng, &topic),
                Domain::Medical => medical_sentence(&mut rng, lex, &topic),
            })
            .collect();
        documents.push(doc);
    }
    Corpus::new(documents, name).expect("documents are non-empty")
}

/// Append `word` to `text`, returning its char span.
fn push_word(text: &mut String, word: &str) -> (usize, usize) {
    if !text.is_empty() {
        text.push(' ');
    }
    let start = char_len(text);
    text.push_str(word);
    (start, start + char_len(word))
}

/// Build an example from template parts: plain words, or `(name, label)`.
fn assemble(id: String, parts: &[(&str, Option<&str>)]) -> AnnotatedExample {
    let mut text = String::new();
    let mut annotations = Vec::new();
    for (w, label) in parts {
        let (start, end) = push_word(&mut text, w);
        if let Some(l) = label {
            annotations.push(Annotation { start, end, label: l.to_string() });
        }
    }
    AnnotatedExample { id, text, question: None, annotations, relation: None }
}

/// NER sentence with one or two entities in type-neutral contexts.
fn ner_example(rng: &mut StreamRng, id: String, pool: &[(&str, &str)]) -> AnnotatedExample {
    let (a, ta) = pool[rng.gen_range(0..pool.len())];
    let (b, tb) = pool[rng.gen_range(0..pool.len())];
    let e = |w, t| (w, Some(t));
    let p = |w| (w, None);
    let parts: Vec<(&str, Option<&str>)> = match rng.gen_range(0..5) {
        0 => vec![p("we"), p("recorded"), e(a, ta), p("in"), p("the"), p("notes"), p(".")],
        1 => vec![p("the"), p("list"), p("mentioned"), e(a, ta), p("and"), e(b, tb), p(".")],
        2 => vec![e(a, ta), p("is"), p("on"), p("the"), p("page"), p("today"), p(".")],
        3 => vec![p("the"), p("summary"), p("includes"), e(a, ta), p(".")],
        _ => vec![p("the"), p("meeting"), p("discussed"), e(a, ta), p("with"), e(b, tb), p("yesterday"), p(".")],
    };
    assemble(id, &parts)
}

/// NER task whose dev and test entities never occur in its train split.
/// Entity types are only recoverable from how the names are used in
/// medical text.
pub fn ner_task(lex: &Lexicon, n_train: usize, n_eval: usize, seed: u64) -> TaskDataset {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for ty in ENTITY_TYPES {
        let (a, b) = lex.split(ty);
        seen.extend(a.iter().map(|w| (w.as_str(), ty)));
        unseen.extend(b.iter().map(|w| (w.as_str(), ty)));
    }
    let mut rng = substream(seed, "ner_task", 0);
    let train = (0..n_train).map(|i| ner_example(&mut rng, format!("train-{i}"), &seen)).collect();
    let dev = (0..n_eval).map(|i| ner_example(&mut rng, format!("dev-{i}"), &unseen)).collect();
    let test = (0..n_eval).map(|i| ner_example(&mut rng, format!("test-{i}"), &unseen)).collect();
    TaskDataset { task: Task::Ner, train, dev, test }
}

/// Extractive QA over medical sentences; answers are multi-word phrases.
pub fn qa_examples(lex: &Lexicon, n: usize, seed: u64) -> Vec<AnnotatedExample> {
    let mut rng = substream(seed, "qa_task", 0);
    (0..n)
        .map(|i| {
            let drug = pick_s(&mut rng, lex.of("DRUG")).to_string();
            let disease = pick_s(&mut rng, lex.of("DISEASE")).to_string();
            let adj = pick(&mut rng, M_ADJ);
            let people = pick(&mut rng, M_PEOPLE);
            let answer = format!("{drug} at a {adj} dose twice daily");
            let lead = format!("the {people} with {disease} received");
            let text = format!("{lead} {answer} . the {} was {} .", pick(&mut rng, M_NOUN), pick(&mut rng, M_VERB));
            let start = char_len(&lead) + 1;
            AnnotatedExample {
                id: format!("qa-{i}"),
                question: Some(format!("what did the {people} with {disease} receive ?")),
                annotations: vec![Annotation { start, end: start + char_len(&answer), label: "answer".into() }],
                text,
                relation: None,
            }
        })
        .collect()
}

/// Relation classification between a drug or gene and a disease.
pub fn re_examples(lex: &Lexicon, n: usize, seed: u64) -> Vec<AnnotatedExample> {
    let mut rng = substream(seed, "re_task", 0);
    (0..n)
        .map(|i| {
            let disease = pick_s(&mut rng, lex.of("DISEASE")).to_string();
            let (parts, rel): (Vec<(String, Option<&str>)>, &str) = match rng.gen_range(0..3) {
                0 => {
                    let drug = pick_s(&mut rng, lex.of("DRUG")).to_string();
                    (
                        vec![
                            (drug, Some("e1")),
                            ("was".into(), None),
                            ("effective".into(), None),
                            ("against".into(), None),
                            (disease, Some("e2")),
                        ],
                        "treats",
                    )
                }
                1 => {
                    let gene = pick_s(&mut rng, lex.of("GENE")).to_string();
                    (vec![(gene, Some("e1")), ("mutation".into(), None), ("causes".into(), None), (disease, Some("e2"))], "causes")
                }
                _ => {
                    let drug = pick_s(&mut rng, lex.of("DRUG")).to_string();
                    (
                        vec![
                            (drug, Some("e1")),
                            ("and".into(), None),
                            (disease, Some("e2")),
                            ("were".into(), None),
                            ("recorded".into(), None),
                        ],
                        "none",
                    )
                }
            };
            let mut parts = parts;
            parts.push((".".into(), None));
            let refs: Vec<(&str, Option<&str>)> = parts.iter().map(|(w, l)| (w.as_str(), *l)).collect();
            let mut e = assemble(format!("re-{i}"), &refs);
            e.relation = Some(rel.into());
            e
        })
        .collect()
}

/// Masked-word records over held-back medical sentences, masking one
/// content word each.
pub fn masked_records(lex: &Lexicon, n: usize, seed: u64) -> Vec<MaskedRecord> {
    let c = corpus(lex, Domain::Medical, n, seed);
    let targets: Vec<&str> = M_NOUN.iter().chain(M_ADJ).chain(M_VERB).copied().collect();
    let mut out = Vec::new();
    for (d, doc) in c.documents.iter().enumerate() {
        let s = &doc[0];
        let words: Vec<&str> = s.split(' ').collect();
        let Some(w) = words.iter().position(|w| targets.contains(w) || lex.entities.values().flatten().any(|e| e == w)) else { continue };
        let start: usize = words[..w].iter().map(|x| char_len(x) + 1).sum();
        let subdomain = if lex.entities.values().flatten().any(|e| e == words[w]) { "entity" } else { "clinical" };
        out.push(MaskedRecord {
            id: format!("m-{d}"),
            text: s.clone(),
            maskings: vec![Masking { start, end: start + char_len(words[w]), answer: words[w].to_string() }],
            subdomain: subdomain.into(),
        });
    }
    out
}

/// Every word the generators can emit, for vocabulary coverage checks.
pub fn all_words(lex: &Lexicon) -> Vec<String> {
    let mut w: Vec<String> = [G_NOUN, G_ADJ, G_VERB, G_PEOPLE, G_TIME, M_NOUN, M_ADJ, M_VERB, M_PEOPLE, NEUTRAL]
        .iter()
        .flat_map(|xs| xs.iter().map(|s| s.to_string()))
        .collect();
    w.extend(lex.entities.values().flatten().cloned());
    w
}
