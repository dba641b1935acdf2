//! Target construction at three granularities: characters with `|` between words,
//! dictionary phonemes, and BPE subwords.

mod bpe;
mod chars;
mod lexicon;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

pub use bpe::{bpe_train, BpeModel, TokenInfo, MODEL_HEADER as BPE_HEADER, WORD_START};
pub use chars::{char_tokenize, CharVocab, BOUNDARY};
pub use lexicon::{
    g2p, letter_inventory, letter_pronunciation, parse_cmudict, parse_cmudict_str, CmuOptions,
    Lexicon, OovStats, Pronunciation, PronunciationSource,
};

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("character {ch:?} is not in the alphabet (in {text:?})")]
    Oov { ch: char, text: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("invalid BPE model: {0}")]
    Bpe(String),
    #[error("{0}")]
    Input(String),
}

/// Lowercases, drops punctuation (apostrophes are kept) and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c == '-' { ' ' } else { c })
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '\'')
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Char,
    Phone,
    Word,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Char, Scale::Phone, Scale::Word];

    pub fn letter(self) -> char {
        match self {
            Scale::Char => 'c',
            Scale::Phone => 'p',
            Scale::Word => 'w',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Char => "char",
            Scale::Phone => "phone",
            Scale::Word => "word",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "c" | "char" => Ok(Scale::Char),
            "p" | "phone" => Ok(Scale::Phone),
            "w" | "word" => Ok(Scale::Word),
            other => Err(TextError::Input(format!("unknown scale {other:?}"))),
        }
    }
}

/// Phoneme symbols, id 0 blank, others in sorted order from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneVocab {
    phones: Vec<String>,
}

impl PhoneVocab {
    pub fn new<I, S>(phones: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = phones.into_iter().map(Into::into).collect();
        Self {
            phones: set.into_iter().collect(),
        }
    }

    /// The lexicon inventory plus everything the letter fallback can produce, so g2p
    /// output is always encodable.
    pub fn for_lexicon(lex: &Lexicon) -> Self {
        let mut all = lex.inventory().clone();
        all.extend(letter_inventory());
        Self::new(all)
    }

    pub fn size(&self) -> usize {
        self.phones.len()
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn id(&self, p: &str) -> Option<usize> {
        self.phones
            .binary_search_by(|q| q.as_str().cmp(p))
            .ok()
            .map(|i| i + 1)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.phones.get(i))
            .map(String::as_str)
    }

    /// One symbol per line.
    pub fn to_text(&self) -> String {
        self.phones.iter().map(|p| format!("{p}\n")).collect()
    }

    pub fn from_text(text: &str) -> Self {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}

/// Label sequences of one utterance at every scale.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScaleTargets {
    pub chars: Vec<usize>,
    pub phones: Vec<usize>,
    pub words: Vec<usize>,
}

impl ScaleTargets {
    pub fn get(&self, scale: Scale) -> &[usize] {
        match scale {
            Scale::Char => &self.chars,
            Scale::Phone => &self.phones,
            Scale::Word => &self.words,
        }
    }

    /// U_s for the given scale.
    pub fn len(&self, scale: Scale) -> usize {
        self.get(scale).len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty() && self.phones.is_empty() && self.words.is_empty()
    }
}

/// Phoneme ids for `text` (no boundary symbols), recording dictionary misses.
pub fn phone_tokenize(
    text: &str,
    lex: &Lexicon,
    vocab: &PhoneVocab,
    stats: &mut OovStats,
) -> Result<Vec<usize>, TextError> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let p = g2p(word, lex);
        stats.record(&p);
        for ph in &p.phones {
            out.push(
                vocab
                    .id(ph)
                    .ok_or_else(|| TextError::Input(format!("phoneme {ph:?} is not in the phone set")))?,
            );
        }
    }
    Ok(out)
}

pub fn build_targets(
    text: &str,
    chars: &CharVocab,
    lex: &Lexicon,
    phones: &PhoneVocab,
    bpe: &BpeModel,
) -> Result<ScaleTargets, TextError> {
    let mut stats = OovStats::default();
    Ok(ScaleTargets {
        chars: chars.tokenize(text)?,
        phones: phone_tokenize(text, lex, phones, &mut stats)?,
        words: bpe.encode(text)?,
    })
}

/// Everything needed to turn transcripts into targets, plus OOV bookkeeping.
#[derive(Debug, Clone)]
pub struct TargetBuilder {
    pub chars: CharVocab,
    pub lexicon: Lexicon,
    pub phones: PhoneVocab,
    pub bpe: BpeModel,
}

impl TargetBuilder {
    pub fn new(chars: CharVocab, lexicon: Lexicon, phones: PhoneVocab, bpe: BpeModel) -> Self {
        Self {
            chars,
            lexicon,
            phones,
            bpe,
        }
    }

    /// Character set from the corpus, phone set from the lexicon, BPE trained on the corpus.
    pub fn fit<S: AsRef<str>>(
        corpus: &[S],
        lexicon: Lexicon,
        bpe_vocab: usize,
    ) -> Result<Self, TextError> {
        let chars = CharVocab::from_corpus(corpus);
        let phones = PhoneVocab::for_lexicon(&lexicon);
        let bpe = bpe_train(corpus, bpe_vocab)?;
        Ok(Self::new(chars, lexicon, phones, bpe))
    }

    /// Number of non-blank labels at `scale`.
    pub fn vocab_size(&self, scale: Scale) -> usize {
        match scale {
            Scale::Char => self.chars.size(),
            Scale::Phone => self.phones.size(),
            Scale::Word => self.bpe.num_ids(),
        }
    }

    pub fn build(&self, text: &str) -> Result<ScaleTargets, TextError> {
        build_targets(text, &self.chars, &self.lexicon, &self.phones, &self.bpe)
    }

    pub fn oov_stats<S: AsRef<str>>(&self, corpus: &[S]) -> OovStats {
        let mut stats = OovStats::default();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                stats.record(&g2p(w, &self.lexicon));
            }
        }
        stats
    }
}
