//! Byte-pair-encoding subwords trained greedily on whitespace-split words.
//!
//! Merges never cross word boundaries. Word starts are recorded in the token id instead
//! of as a symbol: every surface string has a word-initial id and a continuation id, so
//! `decode` can restore the spaces exactly. Word-initial tokens display with a `▁` prefix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use super::TextError;

pub const MODEL_HEADER: &str = "MCIF-BPE v1";
pub const WORD_START: char = '\u{2581}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

/// A token id decomposed into its surface string and whether it starts a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo<'a> {
    pub surface: &'a str,
    pub word_start: bool,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Result<Self, TextError> {
        let mut index = HashMap::new();
        for (i, s) in vocab.iter().enumerate() {
            if s.is_empty() || index.insert(s.clone(), i).is_some() {
                return Err(TextError::Bpe(format!("duplicate or empty vocabulary entry {s:?}")));
            }
        }
        let mut ranks = HashMap::new();
        for (r, (a, b)) in merges.iter().enumerate() {
            let joined = format!("{a}{b}");
            if !index.contains_key(a) || !index.contains_key(b) || !index.contains_key(&joined) {
                return Err(TextError::Bpe(format!("merge {a:?} + {b:?} uses unknown symbols")));
            }
            ranks.entry((a.clone(), b.clone())).or_insert(r);
        }
        Ok(Self {
            merges,
            vocab,
            index,
            ranks,
        })
    }

    /// A model with no merges over `alphabet`: encodes to single characters.
    pub fn characters(alphabet: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = alphabet.into_iter().collect();
        let vocab = set.into_iter().map(String::from).collect();
        Self::from_parts(Vec::new(), vocab).expect("distinct characters form a valid model")
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Surface strings, alphabet first, then merge results in the order they were learned.
    pub fn surfaces(&self) -> &[String] {
        &self.vocab
    }

    /// Number of token ids, excluding the reserved id 0.
    pub fn num_ids(&self) -> usize {
        2 * self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<TokenInfo<'_>> {
        if id == 0 {
            return None;
        }
        let k = id - 1;
        self.vocab.get(k / 2).map(|s| TokenInfo {
            surface: s,
            word_start: k % 2 == 0,
        })
    }

    pub fn token_label(&self, id: usize) -> Option<String> {
        self.token(id).map(|t| {
            if t.word_start {
                format!("{WORD_START}{}", t.surface)
            } else {
                t.surface.to_string()
            }
        })
    }

    fn id_of(&self, surface: &str, word_start: bool) -> Option<usize> {
        self.index
            .get(surface)
            .map(|&i| 1 + 2 * i + usize::from(!word_start))
    }

    fn segment_word(&self, word: &str) -> Result<Vec<String>, TextError> {
        let mut symbols: Vec<String> = Vec::with_capacity(word.len());
        for c in word.chars() {
            let s = c.to_string();
            if !self.index.contains_key(&s) {
                return Err(TextError::Oov {
                    ch: c,
                    text: word.to_string(),
                });
            }
            symbols.push(s);
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else {
                break;
            };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        Ok(symbols)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TextError> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            for (i, s) in self.segment_word(word)?.iter().enumerate() {
                let id = self
                    .id_of(s, i == 0)
                    .ok_or_else(|| TextError::Bpe(format!("segment {s:?} missing from vocabulary")))?;
                ids.push(id);
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TextError> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TextError::UnknownId(id))?;
            if tok.word_start && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok.surface);
        }
        Ok(out)
    }

    pub fn to_model_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MODEL_HEADER}").unwrap();
        writeln!(out, "marker\t{WORD_START}").unwrap();
        for (a, b) in &self.merges {
            writeln!(out, "merge\t{a}\t{b}").unwrap();
        }
        for s in &self.vocab {
            writeln!(out, "vocab\t{s}").unwrap();
        }
        out
    }

    pub fn from_model_string(text: &str) -> Result<Self, TextError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MODEL_HEADER => {}
            other => {
                return Err(TextError::Bpe(format!(
                    "expected header {MODEL_HEADER:?}, found {other:?}"
                )))
            }
        }
        let mut merges = Vec::new();
        let mut vocab = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["marker", _] => {}
                ["merge", a, b] => merges.push((a.to_string(), b.to_string())),
                ["vocab", s] => vocab.push(s.to_string()),
                [""] => {}
                _ => {
                    return Err(TextError::Parse {
                        line: i + 2,
                        msg: format!("unrecognized model line {line:?}"),
                    })
                }
            }
        }
        Self::from_parts(merges, vocab)
    }
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to the
/// lexicographically smallest pair) until `vocab_size` surfaces exist or no pair occurs
/// more than once.
pub fn bpe_train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<BpeModel, TextError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(TextError::Input("BPE training corpus has no words".into()));
    }
    let alphabet: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
    if vocab_size < alphabet.len() {
        return Err(TextError::Input(format!(
            "vocab size {vocab_size} is smaller than the alphabet ({} symbols)",
            alphabet.len()
        )));
    }
    let mut vocab: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut known: BTreeSet<String> = vocab.iter().cloned().collect();
    let mut words: Vec<(Vec<String>, usize)> = counts
        .into_iter()
        .map(|(w, n)| (w.chars().map(String::from).collect(), n))
        .collect();
    let mut merges = Vec::new();

    while vocab.len() < vocab_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iterates pairs in ascending order, so keeping the first maximum
        // implements the lexicographic tie-break.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &n) in &pairs {
            if best.map_or(true, |(_, bn)| n > bn) {
                best = Some((pair, n));
            }
        }
        let Some(((a, b), n)) = best else {
            break;
        };
        if n < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (syms, _) in &mut words {
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(joined.clone());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = merged;
        }
        if known.insert(joined.clone()) {
            vocab.push(joined);
        }
        merges.push((a, b));
    }
    BpeModel::from_parts(merges, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_run_of_greedy_merges() {
        let corpus = vec!["aaaa"; 100];
        let m = bpe_train(&corpus, 3).unwrap();
        assert_eq!(
            m.merges(),
            &[("a".to_string(), "a".to_string()), ("aa".to_string(), "aa".to_string())]
        );
        assert_eq!(m.surfaces(), &["a", "aa", "aaaa"]);
        assert_eq!(m.encode("aaaa").unwrap().len(), 1);
    }

    #[test]
    fn alphabet_sized_vocab_means_no_merges() {
        let m = bpe_train(&["ab ba", "abc"], 3).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.encode("abc cab").unwrap().len(), 6);
        assert!(bpe_train(&["abc"], 2).is_err());
        assert!(bpe_train::<&str>(&[], 10).is_err());
        assert!(bpe_train(&["   "], 10).is_err());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // (a,b) and (c,d) both occur twice
        let m = bpe_train(&["ab cd", "ab cd"], 5).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn word_starts_survive_decode() {
        let m = bpe_train(&["low lower lowest", "slow low"], 20).unwrap();
        for line in ["low lower lowest", "slow low", "lo w", "wol"] {
            let ids = m.encode(line).unwrap();
            assert_eq!(m.decode(&ids).unwrap(), line);
        }
        assert!(m.decode(&[0]).is_err());
        assert!(m.decode(&[m.num_ids() + 1]).is_err());
        assert!(matches!(m.encode("lox"), Err(TextError::Oov { ch: 'x', .. })));
    }

    #[test]
    fn character_model() {
        let m = BpeModel::characters("ba".chars());
        let ids = m.encode("ab b").unwrap();
        assert_eq!(ids, vec![1, 4, 3]);
        assert_eq!(m.token_label(1).unwrap(), "\u{2581}a");
        assert_eq!(m.token_label(4).unwrap(), "b");
    }

    #[test]
    fn model_file_round_trip() {
        let m = bpe_train(&["hello world", "help held"], 30).unwrap();
        let text = m.to_model_string();
        assert!(text.starts_with("MCIF-BPE v1\n"));
        let again = BpeModel::from_model_string(&text).unwrap();
        assert_eq!(again, m);
        assert!(BpeModel::from_model_string("nope\n").is_err());
    }
}
