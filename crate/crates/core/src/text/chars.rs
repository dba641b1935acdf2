use std::collections::BTreeSet;

use super::TextError;

pub const BOUNDARY: char = '|';

/// Character inventory. Id 0 is blank, id 1 is the word boundary `|`, letters follow
/// in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    letters: Vec<char>,
    boundaries: bool,
}

impl CharVocab {
    pub fn new(letters: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = letters
            .into_iter()
            .filter(|c| *c != BOUNDARY && !c.is_whitespace())
            .collect();
        Self {
            letters: set.into_iter().collect(),
            boundaries: true,
        }
    }

    /// Collects every non-space character of `lines`.
    pub fn from_corpus<S: AsRef<str>>(lines: &[S]) -> Self {
        Self::new(lines.iter().flat_map(|l| l.as_ref().chars().collect::<Vec<_>>()))
    }

    /// Whether `|` is emitted between words (on by default).
    pub fn with_boundaries(mut self, on: bool) -> Self {
        self.boundaries = on;
        self
    }

    pub fn boundaries(&self) -> bool {
        self.boundaries
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    /// Number of non-blank ids.
    pub fn size(&self) -> usize {
        self.letters.len() + 1
    }

    pub fn id(&self, c: char) -> Option<usize> {
        if c == BOUNDARY {
            return Some(1);
        }
        self.letters.binary_search(&c).ok().map(|i| i + 2)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        match id {
            0 => None,
            1 => Some(BOUNDARY),
            _ => self.letters.get(id - 2).copied(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, TextError> {
        let mut out = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 && self.boundaries {
                out.push(1);
            }
            for c in word.chars() {
                let id = self
                    .letters
                    .binary_search(&c)
                    .map(|k| k + 2)
                    .map_err(|_| TextError::Oov {
                        ch: c,
                        text: text.to_string(),
                    })?;
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Inverse of `tokenize` when boundaries are on.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String, TextError> {
        let mut out = String::new();
        for &id in ids {
            match self.symbol(id) {
                Some(BOUNDARY) => out.push(' '),
                Some(c) => out.push(c),
                None => return Err(TextError::UnknownId(id)),
            }
        }
        Ok(out)
    }
}

/// Tokenizes with the lowercase Latin alphabet.
pub fn char_tokenize(text: &str) -> Result<Vec<usize>, TextError> {
    CharVocab::new('a'..='z').tokenize(text)
}
