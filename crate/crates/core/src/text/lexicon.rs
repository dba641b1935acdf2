//! Pronouncing dictionary in the CMU plain-text format and dictionary-first G2P.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use super::TextError;

/// Spelling pronunciations used when a word is missing from the dictionary.
const LETTER_NAMES: [(char, &str); 26] = [
    ('a', "EY"),
    ('b', "B IY"),
    ('c', "S IY"),
    ('d', "D IY"),
    ('e', "IY"),
    ('f', "EH F"),
    ('g', "JH IY"),
    ('h', "EY CH"),
    ('i', "AY"),
    ('j', "JH EY"),
    ('k', "K EY"),
    ('l', "EH L"),
    ('m', "EH M"),
    ('n', "EH N"),
    ('o', "OW"),
    ('p', "P IY"),
    ('q', "K Y UW"),
    ('r', "AA R"),
    ('s', "EH S"),
    ('t', "T IY"),
    ('u', "Y UW"),
    ('v', "V IY"),
    ('w', "D AH B AH L Y UW"),
    ('x', "EH K S"),
    ('y', "W AY"),
    ('z', "Z IY"),
];

pub fn letter_pronunciation(c: char) -> Vec<String> {
    let lc = c.to_ascii_lowercase();
    LETTER_NAMES
        .iter()
        .find(|(l, _)| *l == lc)
        .map(|(_, p)| p.split(' ').map(str::to_string).collect())
        .unwrap_or_default()
}

/// Phonemes the letter fallback can produce.
pub fn letter_inventory() -> BTreeSet<String> {
    LETTER_NAMES
        .iter()
        .flat_map(|(_, p)| p.split(' ').map(str::to_string))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmuOptions {
    pub strip_stress: bool,
}

impl Default for CmuOptions {
    fn default() -> Self {
        Self { strip_stress: true }
    }
}

/// Word to pronunciation variants. Words are stored lowercase; variants keep file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Vec<String>>>,
    inventory: BTreeSet<String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, phones: Vec<String>) {
        self.inventory.extend(phones.iter().cloned());
        self.entries
            .entry(word.to_lowercase())
            .or_default()
            .push(phones);
    }

    /// First listed pronunciation.
    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.variants(word).and_then(|v| v.first()).map(Vec::as_slice)
    }

    pub fn variants(&self, word: &str) -> Option<&[Vec<String>]> {
        let key = word.to_lowercase();
        self.entries.get(&key).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_lowercase())
    }

    pub fn inventory(&self) -> &BTreeSet<String> {
        &self.inventory
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes back to the CMU layout (`WORD  PH PH`, variants as `WORD(1)`).
    pub fn to_cmudict(&self) -> String {
        let mut out = String::new();
        for (word, variants) in &self.entries {
            for (i, phones) in variants.iter().enumerate() {
                let head = word.to_uppercase();
                if i == 0 {
                    out.push_str(&head);
                } else {
                    out.push_str(&format!("{head}({i})"));
                }
                out.push_str("  ");
                out.push_str(&phones.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

fn strip_variant(word: &str, line: usize) -> Result<&str, TextError> {
    match word.find('(') {
        None => Ok(word),
        Some(open) => {
            let inner = word[open + 1..]
                .strip_suffix(')')
                .ok_or_else(|| TextError::Parse {
                    line,
                    msg: format!("unterminated variant suffix in {word:?}"),
                })?;
            if inner.is_empty() || !inner.chars().all(|c| c.is_ascii_digit()) {
                return Err(TextError::Parse {
                    line,
                    msg: format!("bad variant suffix in {word:?}"),
                });
            }
            Ok(&word[..open])
        }
    }
}

fn normalize_phone(p: &str, strip_stress: bool) -> String {
    if strip_stress && p.len() > 1 && p.ends_with(|c: char| c.is_ascii_digit()) {
        p[..p.len() - 1].to_string()
    } else {
        p.to_string()
    }
}

pub fn parse_cmudict(reader: impl BufRead, opts: CmuOptions) -> Result<Lexicon, TextError> {
    let mut lex = Lexicon::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TextError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with(";;;") {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            continue;
        };
        let word = strip_variant(word, line_no)?;
        let phones: Vec<String> = parts.map(|p| normalize_phone(p, opts.strip_stress)).collect();
        if phones.is_empty() {
            return Err(TextError::Parse {
                line: line_no,
                msg: format!("no phonemes for {word:?}"),
            });
        }
        if let Some(bad) = phones
            .iter()
            .find(|p| !p.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit()))
        {
            return Err(TextError::Parse {
                line: line_no,
                msg: format!("invalid phoneme symbol {bad:?}"),
            });
        }
        lex.insert(word, phones);
    }
    Ok(lex)
}

pub fn parse_cmudict_str(text: &str, opts: CmuOptions) -> Result<Lexicon, TextError> {
    parse_cmudict(text.as_bytes(), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PronunciationSource {
    Lexicon,
    LetterFallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pronunciation {
    pub phones: Vec<String>,
    pub source: PronunciationSource,
}

impl Pronunciation {
    pub fn is_oov(&self) -> bool {
        self.source == PronunciationSource::LetterFallback
    }
}

/// Dictionary lookup (first variant), falling back to spelling the word letter by letter.
pub fn g2p(word: &str, lex: &Lexicon) -> Pronunciation {
    match lex.lookup(word) {
        Some(p) => Pronunciation {
            phones: p.to_vec(),
            source: PronunciationSource::Lexicon,
        },
        None => Pronunciation {
            phones: word.chars().flat_map(letter_pronunciation).collect(),
            source: PronunciationSource::LetterFallback,
        },
    }
}

/// Counts dictionary misses over a stream of words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OovStats {
    pub words: usize,
    pub oov: usize,
}

impl OovStats {
    pub fn record(&mut self, p: &Pronunciation) {
        self.words += 1;
        if p.is_oov() {
            self.oov += 1;
        }
    }

    pub fn rate(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.oov as f64 / self.words as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DICT: &str = ";;; # CMUdict excerpt
CAT  K AE1 T
READ  R IY1 D
READ(1)  R EH1 D
THE  DH AH0
THE(1)  DH AH1
THE(2)  DH IY0
";

    #[test]
    fn parses_entries_and_variants() {
        let lex = parse_cmudict_str(DICT, CmuOptions::default()).unwrap();
        assert_eq!(lex.len(), 3);
        assert_eq!(lex.lookup("cat").unwrap(), &["K", "AE", "T"]);
        assert_eq!(lex.lookup("READ").unwrap(), &["R", "IY", "D"]);
        assert_eq!(lex.variants("read").unwrap().len(), 2);
        assert_eq!(lex.lookup("The").unwrap(), &["DH", "AH"]);
        assert_eq!(lex.variants("the").unwrap().len(), 3);
    }

    #[test]
    fn stress_can_be_kept() {
        let lex = parse_cmudict_str(DICT, CmuOptions { strip_stress: false }).unwrap();
        assert_eq!(lex.lookup("cat").unwrap(), &["K", "AE1", "T"]);
        assert!(lex.inventory().contains("IY1"));
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse_cmudict_str(";;; x\nCAT  K AE T\nDOG\n", CmuOptions::default()).unwrap_err();
        assert_eq!(
            err,
            TextError::Parse {
                line: 3,
                msg: "no phonemes for \"DOG\"".into()
            }
        );
        assert!(matches!(
            parse_cmudict_str("A(x)  EY\n", CmuOptions::default()),
            Err(TextError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_cmudict_str("A  ey\n", CmuOptions::default()),
            Err(TextError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn g2p_uses_first_variant_and_falls_back() {
        let lex = parse_cmudict_str(DICT, CmuOptions::default()).unwrap();
        let p = g2p("the", &lex);
        assert_eq!(p.phones, vec!["DH", "AH"]);
        assert!(!p.is_oov());
        let p = g2p("zzq", &lex);
        assert!(p.is_oov());
        assert_eq!(p.phones, vec!["Z", "IY", "Z", "IY", "K", "Y", "UW"]);
        let mut stats = OovStats::default();
        stats.record(&g2p("cat", &lex));
        stats.record(&g2p("zzq", &lex));
        assert_eq!(stats.rate(), 0.5);
    }

    #[test]
    fn round_trips_through_cmudict_text() {
        let lex = parse_cmudict_str(DICT, CmuOptions::default()).unwrap();
        let again = parse_cmudict_str(&lex.to_cmudict(), CmuOptions::default()).unwrap();
        assert_eq!(lex, again);
    }
}
