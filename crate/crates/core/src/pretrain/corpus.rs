use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Documents as ordered sentence lists.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Vec<String>>,
    /// Free-form origin tag such as `native` or `translated`.
    pub provenance: String,
}

impl Corpus {
    pub fn new(documents: Vec<Vec<String>>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(i) = documents.iter().position(Vec::is_empty) {
            return Err(Error::input(format!("document {i} has no sentences")));
        }
        Ok(Self { documents, provenance: provenance.into() })
    }

    /// One sentence per line; blank lines separate documents.
    pub fn parse(text: &str, provenance: impl Into<String>) -> Self {
        let mut documents = Vec::new();
        let mut cur: Vec<String> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !cur.is_empty() {
                    documents.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(line.to_string());
            }
        }
        if !cur.is_empty() {
            documents.push(cur);
        }
        Self { documents, provenance: provenance.into() }
    }

    pub fn load(path: &Path, provenance: impl Into<String>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c = Self::parse(&text, provenance);
        if c.documents.is_empty() {
            return Err(Error::input(format!("{} contains no sentences", path.display())));
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.documents.iter().map(|d| d.join("\n") + "\n").collect::<Vec<_>>().join("\n")
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().flatten().map(String::as_str)
    }

    pub fn n_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// Split off the last `fraction` of documents (at least one when there
    /// are two or more) as held-out text.
    pub fn split_heldout(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = self.documents.len();
        let mut k = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n >= 2 {
            k = k.max(1);
        }
        k = k.min(n.saturating_sub(1));
        let (train, held) = self.documents.split_at(n - k);
        (
            Corpus { documents: train.to_vec(), provenance: self.provenance.clone() },
            Corpus { documents: held.to_vec(), provenance: self.provenance.clone() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_lines_separate_documents() {
        let c = Corpus::parse("a b.\nc d.\n\n\ne f.\n", "native");
        assert_eq!(c.documents, vec![vec!["a b.".to_string(), "c d.".into()], vec!["e f.".into()]]);
        assert_eq!(Corpus::parse(&c.to_text(), "native"), c);
    }

    #[test]
    fn heldout_takes_last_five_percent() {
        let docs: Vec<Vec<String>> = (0..200).map(|i| vec![format!("s{i}")]).collect();
        let (train, held) = Corpus::new(docs, "x").unwrap().split_heldout(0.05);
        assert_eq!(train.documents.len(), 190);
        assert_eq!(held.documents[0][0], "s190");
    }

    #[test]
    fn empty_document_rejected() {
        assert!(Corpus::new(vec![vec![]], "x").is_err());
    }
}
