use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One masked word as a character span (Unicode scalar offsets).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masking {
    pub start: usize,
    pub end: usize,
    pub answer: String,
}

/// One line of a masked-set file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub id: String,
    pub text: String,
    pub maskings: Vec<Masking>,
    #[serde(default)]
    pub subdomain: String,
}

/// A single masking instance, expanded from a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedEvalItem {
    pub source_id: String,
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub answer: String,
    pub subdomain: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskedSetReport {
    pub records: usize,
    pub items: usize,
    pub problems: Vec<String>,
}

fn check_record(line: usize, r: &MaskedRecord, problems: &mut Vec<String>) {
    let chars: Vec<char> = r.text.chars().collect();
    if r.maskings.is_empty() {
        problems.push(format!("line {line} ({}): no maskings", r.id));
    }
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for m in &r.maskings {
        if m.start >= m.end || m.end > chars.len() {
            problems.push(format!("line {line} ({}): span {}..{} out of bounds for text of {} chars", r.id, m.start, m.end, chars.len()));
            continue;
        }
        let got: String = chars[m.start..m.end].iter().collect();
        if got != m.answer {
            problems.push(format!("line {line} ({}): span {}..{} reads {got:?}, answer is {:?}", r.id, m.start, m.end, m.answer));
        }
        if let Some(o) = spans.iter().find(|(s, e)| m.start < *e && *s < m.end) {
            problems.push(format!("line {line} ({}): span {}..{} overlaps {}..{}", r.id, m.start, m.end, o.0, o.1));
        }
        spans.push((m.start, m.end));
    }
}

/// Parse and validate a masked set, one JSON record per line. Any problem
/// fails the whole load with every offending line listed.
pub fn parse_masked_set(text: &str) -> Result<(Vec<MaskedEvalItem>, MaskedSetReport)> {
    let mut report = MaskedSetReport::default();
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MaskedRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.problems.push(format!("line {}: {e}", i + 1));
                continue;
            }
        };
        report.records += 1;
        let before = report.problems.len();
        check_record(i + 1, &rec, &mut report.problems);
        if report.problems.len() > before {
            continue;
        }
        for m in &rec.maskings {
            items.push(MaskedEvalItem {
                source_id: rec.id.clone(),
                text: rec.text.clone(),
                start: m.start,
                end: m.end,
                answer: m.answer.clone(),
                subdomain: rec.subdomain.clone(),
            });
        }
    }
    if !report.problems.is_empty() {
        return Err(Error::Validation(report.problems));
    }
    report.items = items.len();
    Ok((items, report))
}

pub fn load_masked_set(path: &Path) -> Result<(Vec<MaskedEvalItem>, MaskedSetReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_masked_set(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_items_clean() {
        let src = r#"{"id":"a","text":"il cuore batte","maskings":[{"start":3,"end":8,"answer":"cuore"}],"subdomain":"cardio"}
{"id":"b","text":"la febbre sale","maskings":[{"start":3,"end":9,"answer":"febbre"}],"subdomain":"gen"}
{"id":"c","text":"perché già","maskings":[{"start":7,"end":10,"answer":"già"}],"subdomain":"gen"}"#;
        let (items, report) = parse_masked_set(src).unwrap();
        assert_eq!(items.len(), 3);
        assert!(report.problems.is_empty());
    }

    #[test]
    fn span_past_end_rejected() {
        let src = r#"{"id":"a","text":"abc","maskings":[{"start":1,"end":9,"answer":"bc"}]}"#;
        assert!(matches!(parse_masked_set(src), Err(Error::Validation(v)) if v[0].contains("out of bounds")));
    }

    #[test]
    fn overlap_rejected() {
        let src = r#"{"id":"a","text":"abcdef","maskings":[{"start":0,"end":3,"answer":"abc"},{"start":2,"end":4,"answer":"cd"}]}"#;
        assert!(matches!(parse_masked_set(src), Err(Error::Validation(v)) if v[0].contains("overlaps")));
    }

    #[test]
    fn four_maskings_expand_to_four_items() {
        let src = r#"{"id":"s1","text":"aa bb cc dd","maskings":[{"start":0,"end":2,"answer":"aa"},{"start":3,"end":5,"answer":"bb"},{"start":6,"end":8,"answer":"cc"},{"start":9,"end":11,"answer":"dd"}]}"#;
        let (items, _) = parse_masked_set(src).unwrap();
        assert_eq!(items.len(), 4);
        assert!(items.iter().all(|i| i.source_id == "s1"));
    }
}
