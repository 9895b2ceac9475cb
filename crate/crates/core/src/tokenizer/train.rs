use std::cmp::Ordering;
use std::collections::HashMap;

use super::{pretokenize, Vocabulary, CONTINUATION, SPECIALS};
use crate::error::{Error, Result};

/// Greedy WordPiece induction.
///
/// Starts from the character alphabet (word-initial characters bare,
/// the rest with the continuation prefix) and repeatedly merges the adjacent
/// pair with the highest likelihood gain `count(ab) / (count(a) * count(b))`
/// until `size` tokens exist or no pair reaches `min_freq` occurrences.
/// Ties go to the pair that occurs first in corpus order.
pub fn train_vocab<'a, I>(corpus: I, size: usize, min_freq: usize, lowercase: bool) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if size < SPECIALS.len() {
        return Err(Error::input(format!("vocabulary size {size} is smaller than the {} special tokens", SPECIALS.len())));
    }

    // Distinct words in first-occurrence order with their counts.
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut words: Vec<(Vec<char>, u64)> = Vec::new();
    let normalizer = Vocabulary::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect(), lowercase)?;
    for line in corpus {
        for w in pretokenize(line) {
            let norm = normalizer.normalize(&w.text);
            match word_index.get(&norm) {
                Some(&i) => words[i].1 += 1,
                None => {
                    word_index.insert(norm.clone(), words.len());
                    words.push((norm.chars().collect(), 1));
                }
            }
        }
    }
    if words.is_empty() {
        return Err(Error::input("cannot train a vocabulary on an empty corpus"));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut alphabet: Vec<String> = Vec::new();
    let mut splits: Vec<Vec<String>> = Vec::with_capacity(words.len());
    for (chars, _) in &words {
        let pieces: Vec<String> =
            chars.iter().enumerate().map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") }).collect();
        alphabet.extend(pieces.iter().cloned());
        splits.push(pieces);
    }
    alphabet.sort();
    alphabet.dedup();
    if size < tokens.len() + alphabet.len() {
        return Err(Error::input(format!(
            "vocabulary size {size} cannot hold {} specials plus an alphabet of {}",
            tokens.len(),
            alphabet.len()
        )));
    }
    tokens.extend(alphabet);

    let mut ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let mut split_ids: Vec<Vec<usize>> = splits.iter().map(|s| s.iter().map(|t| ids[t]).collect()).collect();

    while tokens.len() < size {
        let mut token_freq: HashMap<usize, u64> = HashMap::new();
        // pair -> (count, first occurrence rank)
        let mut pairs: HashMap<(usize, usize), (u64, usize)> = HashMap::new();
        let mut rank = 0usize;
        for (split, (_, count)) in split_ids.iter().zip(&words) {
            for (i, &t) in split.iter().enumerate() {
                *token_freq.entry(t).or_default() += count;
                if i + 1 < split.len() {
                    let e = pairs.entry((t, split[i + 1])).or_insert((0, rank));
                    e.0 += count;
                    rank += 1;
                }
            }
        }
        let mut best: Option<((usize, usize), u64, usize)> = None;
        for (&pair, &(count, first)) in &pairs {
            if (count as usize) < min_freq {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc, bfirst)) => {
                    // Compare count/(fa*fb) exactly by cross-multiplication.
                    let lhs = count as u128 * token_freq[&bp.0] as u128 * token_freq[&bp.1] as u128;
                    let rhs = bc as u128 * token_freq[&pair.0] as u128 * token_freq[&pair.1] as u128;
                    match lhs.cmp(&rhs) {
                        Ordering::Greater => true,
                        Ordering::Equal => first < bfirst,
                        Ordering::Less => false,
                    }
                }
            };
            if better {
                best = Some((pair, count, first));
            }
        }
        let Some(((a, b), _, _)) = best else { break };
        let merged = format!("{}{}", tokens[a], tokens[b].trim_start_matches(CONTINUATION));
        let new_id = match ids.get(&merged) {
            Some(&id) => id,
            None => {
                tokens.push(merged.clone());
                ids.insert(merged, tokens.len() - 1);
                tokens.len() - 1
            }
        };
        for split in &mut split_ids {
            let mut i = 0;
            while i + 1 < split.len() {
                if split[i] == a && split[i + 1] == b {
                    split[i] = new_id;
                    split.remove(i + 1);
                }
                i += 1;
            }
        }
    }

    Vocabulary::from_tokens(tokens, lowercase)
}
