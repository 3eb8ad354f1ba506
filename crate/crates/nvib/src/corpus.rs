//! Plain-text corpora: one training sequence per line.

use std::path::Path;

use nvib_core::tokenizer::Vocab;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::config::RunConfig;
use crate::{Error, Result};

/// Reads a UTF-8 file and cuts it into sequences of at most `max_len` chars.
pub fn load_lines(path: &Path, max_len: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(chunk_lines(&text, max_len))
}

/// Splits each non-blank line at whitespace into pieces of at most `max_len`
/// characters. Words longer than `max_len` are cut.
pub fn chunk_lines(text: &str, max_len: usize) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut cur = String::new();
        let mut cur_len = 0;
        for word in line.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            for piece in chars.chunks(max_len) {
                let extra = piece.len() + usize::from(cur_len > 0);
                if cur_len + extra > max_len {
                    out.push(std::mem::take(&mut cur));
                    cur_len = 0;
                }
                if cur_len > 0 {
                    cur.push(' ');
                    cur_len += 1;
                }
                cur.extend(piece);
                cur_len += piece.len();
            }
        }
        if cur_len > 0 {
            out.push(cur);
        }
    }
    out
}

/// Tokenised corpus with a train/validation split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<String>,
    pub valid: Vec<String>,
}

impl Corpus {
    /// Shuffles `lines` with `seed` and holds out `valid_fraction` of them
    /// (at least one line when there are two or more).
    pub fn split(lines: Vec<String>, valid_fraction: f64, seed: u64) -> Result<Self> {
        if lines.is_empty() {
            return Err(nvib_core::Error::EmptyCorpus.into());
        }
        let vocab = Vocab::build(lines.iter().map(String::as_str))?;
        let mut lines = lines;
        lines.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_valid = (lines.len() as f64 * valid_fraction).round() as usize;
        if lines.len() > 1 {
            n_valid = n_valid.clamp(1, lines.len() - 1);
        } else {
            n_valid = 0;
        }
        let valid = lines.split_off(lines.len() - n_valid);
        Ok(Self {
            vocab,
            train: lines,
            valid,
        })
    }

    pub fn encode(&self, lines: &[String]) -> Vec<Vec<usize>> {
        lines.iter().map(|l| self.vocab.encode(l)).collect()
    }
}

/// The corpus a run trains on: `data.corpus` if set, otherwise the seeded
/// synthetic corpus. Split with the training seed, so every subcommand sees
/// the same validation lines.
pub fn from_config(cfg: &RunConfig) -> Result<Corpus> {
    let max_len = cfg.train.max_len;
    let lines = match &cfg.data.corpus {
        Some(path) => load_lines(path, max_len)?,
        None => synthetic(cfg.data.synthetic_lines, cfg.data.synthetic_lexicon, max_len, cfg.train.seed),
    };
    Corpus::split(lines, cfg.data.valid_fraction, cfg.train.seed)
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "k"];

/// Generates a pseudo-language: a Zipf-distributed lexicon of syllabic words
/// arranged into sentences of at most `max_len` characters.
pub fn synthetic(n_lines: usize, lexicon: usize, max_len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<String> = Vec::with_capacity(lexicon);
    while words.len() < lexicon {
        let syllables = [1, 1, 2, 2, 2, 3][rng.random_range(0..6)];
        let w: String = (0..syllables)
            .map(|_| {
                let o = ONSETS[rng.random_range(0..ONSETS.len())];
                let v = VOWELS[rng.random_range(0..VOWELS.len())];
                let c = CODAS[rng.random_range(0..CODAS.len())];
                format!("{o}{v}{c}")
            })
            .collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let zipf = Zipf::new(lexicon as f64, 1.1).expect("valid Zipf parameters");
    let mut out = Vec::with_capacity(n_lines);
    while out.len() < n_lines {
        let target = rng.random_range(3..=10);
        let mut line = String::new();
        for _ in 0..target {
            let w = &words[zipf.sample(&mut rng) as usize - 1];
            if line.chars().count() + w.len() + 2 > max_len {
                break;
            }
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(w);
        }
        if line.is_empty() {
            continue;
        }
        if rng.random_bool(0.5) && line.len() < max_len {
            line.push('.');
        }
        out.push(line);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_respect_length() {
        let text = "the quick brown fox jumps over the lazy dog\n\n  a  b \nabcdefghij";
        let out = chunk_lines(text, 10);
        assert!(out.iter().all(|l| l.chars().count() <= 10));
        assert_eq!(out[0], "the quick");
        assert_eq!(out.last().unwrap(), "abcdefghij");
        assert!(out.contains(&"a b".to_string()));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic(50, 100, 64, 3);
        assert_eq!(a, synthetic(50, 100, 64, 3));
        assert_ne!(a, synthetic(50, 100, 64, 4));
        assert!(a.iter().all(|l| !l.is_empty() && l.chars().count() <= 64));
    }

    #[test]
    fn split_holds_out_lines() {
        let c = Corpus::split(synthetic(100, 50, 40, 0), 0.1, 0).unwrap();
        assert_eq!((c.train.len(), c.valid.len()), (90, 10));
    }
}
