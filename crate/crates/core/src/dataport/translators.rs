use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Sentence-level machine translation engine.
pub trait Translator {
    fn name(&self) -> &str;

    /// Same input always yields the same output.
    fn deterministic(&self) -> bool {
        true
    }

    fn translate(&self, text: &str) -> Result<String>;

    /// Translate while leaving the given character spans intact, for
    /// engines that can honour them. Others ignore the hint.
    fn translate_protected(&self, text: &str, _protected: &[(usize, usize)]) -> Result<String> {
        self.translate(text)
    }
}

pub struct Identity;

impl Translator for Identity {
    fn name(&self) -> &str {
        "identity"
    }
    fn translate(&self, text: &str) -> Result<String> {
        Ok(text.to_string())
    }
}

pub struct Uppercase;

impl Translator for Uppercase {
    fn name(&self) -> &str {
        "uppercase"
    }
    fn translate(&self, text: &str) -> Result<String> {
        Ok(text.to_uppercase())
    }
}

/// Canonical decomposition with combining marks removed.
pub fn accent_fold(text: &str) -> String {
    text.nfd().filter(|c| !is_combining_mark(*c)).collect()
}

pub struct AccentFold;

impl Translator for AccentFold {
    fn name(&self) -> &str {
        "accent_fold"
    }
    fn translate(&self, text: &str) -> Result<String> {
        Ok(accent_fold(text))
    }
}

/// Whitespace-delimited words as char ranges.
fn word_ranges(chars: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in chars.iter().enumerate() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, chars.len()));
    }
    out
}

fn alphabetic_runs(chars: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_alphabetic() {
            let s = i;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Permutes the words that do not touch a protected span; layout and
/// protected words stay in place.
pub struct WordShuffle {
    pub seed: u64,
}

impl Translator for WordShuffle {
    fn name(&self) -> &str {
        "word_shuffle_outside_spans"
    }
    fn translate(&self, text: &str) -> Result<String> {
        self.translate_protected(text, &[])
    }
    fn translate_protected(&self, text: &str, protected: &[(usize, usize)]) -> Result<String> {
        let chars: Vec<char> = text.chars().collect();
        let words = word_ranges(&chars);
        let free: Vec<usize> = (0..words.len()).filter(|&w| !protected.iter().any(|&(s, e)| words[w].0 < e && s < words[w].1)).collect();
        let mut order = free.clone();
        order.shuffle(&mut substream(self.seed, &format!("word_shuffle:{text}"), 0));
        let mut replacement: HashMap<usize, usize> = free.iter().copied().zip(order).collect();
        let mut out = String::with_capacity(text.len());
        let mut pos = 0;
        for (w, &(s, e)) in words.iter().enumerate() {
            out.extend(&chars[pos..s]);
            let (rs, re) = words[replacement.remove(&w).unwrap_or(w)];
            out.extend(&chars[rs..re]);
            pos = e;
        }
        out.extend(&chars[pos..]);
        Ok(out)
    }
}

/// Phrase table replacing whole-word matches, longest source phrase first.
pub struct Dictionary {
    /// (source chars, target), longest source first.
    entries: Vec<(Vec<char>, String)>,
}

impl Dictionary {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut entries: Vec<(Vec<char>, String)> = Vec::new();
        for (src, tgt) in pairs {
            if src.is_empty() {
                return Err(Error::input("dictionary source phrase is empty"));
            }
            entries.push((src.chars().collect(), tgt));
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        entries.dedup_by(|a, b| a.0 == b.0);
        Ok(Self { entries })
    }

    /// One `source<TAB>target` pair per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some((src, tgt)) = line.split_once('\t') else {
                return Err(Error::input(format!("dictionary line {}: expected source<TAB>target", n + 1)));
            };
            if src.trim().is_empty() || tgt.contains('\t') {
                return Err(Error::input(format!("dictionary line {}: malformed pair", n + 1)));
            }
            pairs.push((src.trim().to_string(), tgt.trim().to_string()));
        }
        Self::new(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Translator for Dictionary {
    fn name(&self) -> &str {
        "dictionary"
    }
    fn translate(&self, text: &str) -> Result<String> {
        let chars: Vec<char> = text.chars().collect();
        let boundary = |i: usize| i == 0 || i == chars.len() || !chars[i - 1].is_alphanumeric() || !chars[i].is_alphanumeric();
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        while i < chars.len() {
            let hit = if boundary(i) {
                self.entries.iter().find(|(src, _)| chars[i..].starts_with(src) && boundary(i + src.len()))
            } else {
                None
            };
            match hit {
                Some((src, tgt)) => {
                    out.push_str(tgt);
                    i += src.len();
                }
                None => {
                    out.push(chars[i]);
                    i += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Context-sensitive noise: each run of letters is re-inflected with
/// probability `rate`, drawn from the whole input string and the word's
/// position, so a phrase translated alone can come out differently from
/// the same phrase inside a sentence.
pub struct InflectionNoise {
    pub rate: f64,
    pub seed: u64,
}

fn inflect(word: &str) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    match chars.last().copied() {
        Some('a') => *chars.last_mut().unwrap() = 'e',
        Some('e') => *chars.last_mut().unwrap() = 'i',
        Some('i') => *chars.last_mut().unwrap() = 'o',
        Some('o') => *chars.last_mut().unwrap() = 'a',
        _ => chars.push('s'),
    }
    chars.into_iter().collect()
}

impl Translator for InflectionNoise {
    fn name(&self) -> &str {
        "inflection_noise"
    }
    fn translate(&self, text: &str) -> Result<String> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Translation { name: self.name().into(), msg: format!("rate {} outside [0, 1]", self.rate) });
        }
        let chars: Vec<char> = text.chars().collect();
        let mut rng = substream(self.seed, &format!("inflection:{text}"), 0);
        let mut out = String::with_capacity(text.len());
        let mut pos = 0;
        for (s, e) in alphabetic_runs(&chars) {
            out.extend(&chars[pos..s]);
            let word: String = chars[s..e].iter().collect();
            let draw: f64 = rng.gen();
            if draw < self.rate {
                out.push_str(&inflect(&word));
            } else {
                out.push_str(&word);
            }
            pos = e;
        }
        out.extend(&chars[pos..]);
        Ok(out)
    }
}

/// Translator selection as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TranslatorSpec {
    Identity,
    Uppercase,
    AccentFold,
    WordShuffleOutsideSpans {
        #[serde(default)]
        seed: u64,
    },
    Dictionary {
        path: PathBuf,
    },
    InflectionNoise {
        rate: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl TranslatorSpec {
    pub fn build(&self) -> Result<Box<dyn Translator>> {
        Ok(match self {
            TranslatorSpec::Identity => Box::new(Identity),
            TranslatorSpec::Uppercase => Box::new(Uppercase),
            TranslatorSpec::AccentFold => Box::new(AccentFold),
            TranslatorSpec::WordShuffleOutsideSpans { seed } => Box::new(WordShuffle { seed: *seed }),
            TranslatorSpec::Dictionary { path } => Box::new(Dictionary::load(path)?),
            TranslatorSpec::InflectionNoise { rate, seed } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::config(format!("inflection_noise rate {rate} outside [0, 1]")));
                }
                Box::new(InflectionNoise { rate: *rate, seed: *seed })
            }
        })
    }
}

/// Names accepted by [`TranslatorSpec`].
pub fn stub_translators() -> &'static [&'static str] {
    &["identity", "uppercase", "accent_fold", "word_shuffle_outside_spans", "dictionary", "inflection_noise"]
}
