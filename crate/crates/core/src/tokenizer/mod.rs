//! WordPiece vocabulary, longest-match-first encoding and decoding.
//!
//! Pre-tokenization splits on whitespace and isolates every punctuation
//! character; each resulting word is NFC-normalized (and optionally
//! lowercased) before segmentation. Continuation pieces carry a `##` prefix.

mod train;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use train::train_vocab;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION: &str = "##";
const PRETOKENIZER: &str = "whitespace+punctuation nfc";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl SpecialIds {
    pub fn contains(&self, id: usize) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    specials: SpecialIds,
    lowercase: bool,
    fingerprint: String,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.tokens == other.tokens
    }
}

fn fingerprint_of(tokens: &[String], lowercase: bool) -> String {
    let mut h = Sha256::new();
    h.update(if lowercase { b"lower\n".as_slice() } else { b"cased\n".as_slice() });
    for t in tokens {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl Vocabulary {
    /// Build from an ordered token list; all five specials must be present.
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("token {i} is empty or contains whitespace")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate token {t:?}")));
            }
        }
        let get = |s: &str| ids.get(s).copied().ok_or_else(|| Error::input(format!("vocabulary lacks special token {s}")));
        let specials = SpecialIds { pad: get(PAD)?, unk: get(UNK)?, cls: get(CLS)?, sep: get(SEP)?, mask: get(MASK)? };
        let fingerprint = fingerprint_of(&tokens, lowercase);
        Ok(Self { tokens, ids, specials, lowercase, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.specials.contains(id)
    }

    /// Normalize a word the same way encoding does.
    pub fn normalize(&self, word: &str) -> String {
        let s: String = word.nfc().collect();
        if self.lowercase {
            s.to_lowercase()
        } else {
            s
        }
    }

    /// Write the vocabulary file: a `%%` header block followed by one token
    /// per line, where line index after the header is the token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let s = self.specials;
        let _ = writeln!(out, "%% contilab-vocab 1");
        let _ = writeln!(out, "%% specials {PAD}={} {UNK}={} {CLS}={} {SEP}={} {MASK}={}", s.pad, s.unk, s.cls, s.sep, s.mask);
        let _ = writeln!(out, "%% lowercase {}", self.lowercase);
        let _ = writeln!(out, "%% pretokenizer {PRETOKENIZER}");
        let _ = writeln!(out, "%% fingerprint {}", self.fingerprint);
        let _ = writeln!(out, "%% end");
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut lowercase = false;
        let mut fingerprint = None;
        let mut header_done = false;
        for line in lines.by_ref() {
            let Some(rest) = line.strip_prefix("%% ") else {
                return Err(Error::input(format!("vocabulary header line expected, found {line:?}")));
            };
            let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
            match key {
                "contilab-vocab" if value != "1" => return Err(Error::input(format!("unsupported vocabulary format version {value}"))),
                "lowercase" => lowercase = value.parse().map_err(|_| Error::input(format!("bad lowercase flag {value:?}")))?,
                "fingerprint" => fingerprint = Some(value.to_string()),
                "end" => {
                    header_done = true;
                    break;
                }
                _ => {}
            }
        }
        if !header_done {
            return Err(Error::input("vocabulary header block not terminated"));
        }
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        let vocab = Self::from_tokens(tokens, lowercase)?;
        if let Some(fp) = fingerprint {
            if fp != vocab.fingerprint {
                return Err(Error::input(format!("vocabulary fingerprint mismatch: header {fp}, contents {}", vocab.fingerprint)));
            }
        }
        Ok(vocab)
    }
}

/// A pre-tokenized word with its character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !is_combining_mark(c)
}

/// Whitespace split plus punctuation isolation. Spans are character
/// indices into `text`; word text is not yet normalized.
pub fn pretokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    let flush = |cur: &mut String, start: usize, end: usize, words: &mut Vec<Word>| {
        if !cur.is_empty() {
            words.push(Word { text: std::mem::take(cur), start, end });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut cur, start, i, &mut words);
        } else if is_punctuation(c) {
            flush(&mut cur, start, i, &mut words);
            words.push(Word { text: c.to_string(), start: i, end: i + 1 });
        } else {
            if cur.is_empty() {
                start = i;
            }
            cur.push(c);
        }
    }
    let n = text.chars().count();
    flush(&mut cur, start, n, &mut words);
    words
}

/// Encoded pieces plus word structure.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Indices into `ids` where a source word starts.
    pub word_boundaries: Vec<usize>,
    /// Character span in the source text of each word, parallel to `word_boundaries`.
    pub word_spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Wrap as `[CLS] ids [SEP]`.
    pub fn with_specials(&self, vocab: &Vocabulary) -> TokenSequence {
        let s = vocab.specials();
        let mut ids = Vec::with_capacity(self.ids.len() + 2);
        ids.push(s.cls);
        ids.extend_from_slice(&self.ids);
        ids.push(s.sep);
        TokenSequence { ids, word_boundaries: self.word_boundaries.iter().map(|b| b + 1).collect(), word_spans: self.word_spans.clone() }
    }

    /// Keep at most `max_pieces` pieces, dropping words that would be cut.
    pub fn truncated(&self, max_pieces: usize) -> TokenSequence {
        if self.ids.len() <= max_pieces {
            return self.clone();
        }
        let word_end = |w: usize| self.word_boundaries.get(w + 1).copied().unwrap_or(self.ids.len());
        let nw = (0..self.word_boundaries.len()).take_while(|&w| word_end(w) <= max_pieces).count();
        let end = match nw {
            0 => self.word_boundaries.first().copied().unwrap_or(0).min(max_pieces),
            _ => word_end(nw - 1),
        };
        TokenSequence {
            ids: self.ids[..end].to_vec(),
            word_boundaries: self.word_boundaries[..nw].to_vec(),
            word_spans: self.word_spans[..nw].to_vec(),
        }
    }

    /// Index of the word each piece belongs to.
    pub fn piece_words(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.ids.len()];
        for (w, &b) in self.word_boundaries.iter().enumerate() {
            let end = self.word_boundaries.get(w + 1).copied().unwrap_or(self.ids.len());
            for slot in &mut out[b..end] {
                *slot = Some(w);
            }
        }
        out
    }
}

/// Longest-match-first segmentation of one normalized word. Returns `None`
/// when some suffix cannot be matched, in which case the whole word is unknown.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Option<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut buf = String::new();
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            buf.clear();
            if start > 0 {
                buf.push_str(CONTINUATION);
            }
            buf.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&buf) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Encode text into pieces without special tokens.
pub fn encode(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for w in pretokenize(text) {
        let norm = vocab.normalize(&w.text);
        seq.word_boundaries.push(seq.ids.len());
        seq.word_spans.push((w.start, w.end));
        match wordpiece(&norm, vocab) {
            Some(p) => seq.ids.extend(p),
            None => seq.ids.push(vocab.specials().unk),
        }
    }
    seq
}

/// Join pieces back into text; specials other than `[UNK]` are skipped.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    decode_ids(&seq.ids, vocab)
}

pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> String {
    let s = vocab.specials();
    let mut out = String::new();
    for &id in ids {
        if id != s.unk && vocab.is_special(id) {
            continue;
        }
        let tok = vocab.token(id).unwrap_or(UNK);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_vocab() -> Vocabulary {
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in ["il", "gene", "braf", "è", "mutato", "muta", "##to", "##zione", ".", ",", "perché", "un", "##a"] {
            t.push(w.to_string());
        }
        Vocabulary::from_tokens(t, false).unwrap()
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        let v = small_vocab();
        assert!(encode("", &v).is_empty());
    }

    #[test]
    fn unknown_word_is_single_unk() {
        let v = small_vocab();
        let s = encode("xyzzy", &v);
        assert_eq!(s.ids, vec![v.specials().unk]);
    }

    #[test]
    fn longest_match_first_with_continuations() {
        let v = small_vocab();
        let s = encode("mutazione", &v);
        assert_eq!(s.ids, vec![v.id("muta").unwrap(), v.id("##zione").unwrap()]);
        let s = encode("mutato", &v);
        assert_eq!(s.ids, vec![v.id("mutato").unwrap()]);
        assert_eq!(s.word_boundaries, vec![0]);
    }

    #[test]
    fn punctuation_is_isolated_with_spans() {
        let words = pretokenize("il gene, braf.");
        let texts: Vec<&str> = words.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts, vec!["il", "gene", ",", "braf", "."]);
        assert_eq!((words[2].start, words[2].end), (7, 8));
    }

    #[test]
    fn nfc_normalization_makes_decomposed_accents_match() {
        let v = small_vocab();
        let decomposed = "perche\u{301}";
        let s = encode(decomposed, &v);
        assert_eq!(s.ids, vec![v.id("perché").unwrap()]);
        assert_eq!(s.word_spans, vec![(0, 7)]);
    }

    #[test]
    fn roundtrip_full_word_sentence() {
        let v = small_vocab();
        let text = "il gene braf è mutato";
        assert_eq!(decode(&encode(text, &v), &v), text);
    }

    #[test]
    fn specials_and_truncation() {
        let v = small_vocab();
        let s = encode("il gene mutazione braf", &v);
        assert_eq!(s.len(), 5);
        let t = s.truncated(3);
        // "mutazione" would be cut after its first piece.
        assert_eq!(t.ids.len(), 2);
        assert_eq!(t.word_boundaries, vec![0, 1]);
        let w = t.with_specials(&v);
        assert_eq!(w.ids[0], v.specials().cls);
        assert_eq!(*w.ids.last().unwrap(), v.specials().sep);
        assert_eq!(w.word_boundaries, vec![1, 2]);
    }

    #[test]
    fn file_roundtrip_and_tamper_detection() {
        let v = small_vocab();
        let text = v.to_file_string();
        let back = Vocabulary::parse(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        let tampered = text.replace("\nbraf\n", "\nbrav\n");
        assert!(Vocabulary::parse(&tampered).is_err());
    }

    #[test]
    fn missing_special_rejected() {
        let t = vec!["[PAD]".to_string(), "[UNK]".to_string(), "a".to_string()];
        assert!(Vocabulary::from_tokens(t, false).is_err());
    }
}
