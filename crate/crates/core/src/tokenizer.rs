//! Character vocabulary with four reserved specials.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIALS: usize = 4;

/// Stable character inventory: specials first, then characters in code-point order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    /// Builds the inventory of every character appearing in `lines`.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<char> = lines.into_iter().flat_map(str::chars).collect();
        if set.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            chars: set.into_iter().collect(),
        })
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        Self { chars }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.chars.len() + N_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    pub fn id(&self, c: char) -> usize {
        self.chars.binary_search(&c).map(|i| i + N_SPECIALS).unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Decodes ids, skipping specials except `UNK` which renders as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                UNK => Some('\u{FFFD}'),
                id if id < N_SPECIALS => None,
                id => self.chars.get(id - N_SPECIALS).copied(),
            })
            .collect()
    }

    /// Ids of the data characters (used by insertion and substitution noise).
    pub fn data_ids(&self) -> core::ops::Range<usize> {
        N_SPECIALS..self.len()
    }
}
