//! Word error rate plus two error classes defined through normalized edit distance:
//! phonetic confusions (substituted words that sound alike) and segmentation errors
//! (error regions whose de-spaced text nearly matches but whose word boundaries differ).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::text::{g2p, Lexicon};

pub const DEFAULT_THETA_PE: f64 = 0.6;
pub const DEFAULT_THETA_SE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0}")]
    Input(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(x: &[T], y: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=y.len()).collect();
    let mut cur = vec![0; y.len() + 1];
    for i in 1..=x.len() {
        cur[0] = i;
        for j in 1..=y.len() {
            let sub = prev[j - 1] + usize::from(x[i - 1] != y[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

/// Edit distance divided by the longer length; 0 for two empty sequences.
pub fn nld<T: PartialEq>(x: &[T], y: &[T]) -> f64 {
    let longest = x.len().max(y.len());
    if longest == 0 {
        0.0
    } else {
        levenshtein(x, y) as f64 / longest as f64
    }
}

pub fn nld_str(x: &str, y: &str) -> f64 {
    let a: Vec<char> = x.chars().collect();
    let b: Vec<char> = y.chars().collect();
    nld(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum EditOp {
    Match { word: String },
    Substitute { ref_word: String, hyp_word: String },
    Insert { hyp_word: String },
    Delete { ref_word: String },
}

impl EditOp {
    pub fn is_match(&self) -> bool {
        matches!(self, EditOp::Match { .. })
    }

    fn ref_word(&self) -> Option<&str> {
        match self {
            EditOp::Match { word } => Some(word),
            EditOp::Substitute { ref_word, .. } | EditOp::Delete { ref_word } => Some(ref_word),
            EditOp::Insert { .. } => None,
        }
    }

    fn hyp_word(&self) -> Option<&str> {
        match self {
            EditOp::Match { word } => Some(word),
            EditOp::Substitute { hyp_word, .. } | EditOp::Insert { hyp_word } => Some(hyp_word),
            EditOp::Delete { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    /// Number of non-match operations.
    pub fn cost(&self) -> usize {
        self.ops.iter().filter(|op| !op.is_match()).count()
    }

    /// Applies the script to the reference side, yielding the hypothesis words.
    pub fn replay(&self) -> Vec<&str> {
        self.ops.iter().filter_map(EditOp::hyp_word).collect()
    }

    pub fn reference(&self) -> Vec<&str> {
        self.ops.iter().filter_map(EditOp::ref_word).collect()
    }

    pub fn counts(&self) -> WerCounts {
        let mut c = WerCounts::default();
        for op in &self.ops {
            match op {
                EditOp::Match { .. } => c.ref_words += 1,
                EditOp::Substitute { .. } => {
                    c.substitutions += 1;
                    c.ref_words += 1;
                }
                EditOp::Delete { .. } => {
                    c.deletions += 1;
                    c.ref_words += 1;
                }
                EditOp::Insert { .. } => c.insertions += 1,
            }
        }
        c
    }

    /// Maximal runs of consecutive non-match operations, as index ranges into `ops`.
    pub fn error_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, op) in self.ops.iter().enumerate() {
            match (op.is_match(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    runs.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(s..self.ops.len());
        }
        runs
    }
}

/// Minimal word alignment. Among equally cheap alignments the backtrace prefers
/// substitution (or match), then deletion, then insertion.
pub fn word_align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditScript {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            ops.push(if r[i - 1] == h[j - 1] {
                EditOp::Match {
                    word: r[i - 1].to_string(),
                }
            } else {
                EditOp::Substitute {
                    ref_word: r[i - 1].to_string(),
                    hyp_word: h[j - 1].to_string(),
                }
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Delete {
                ref_word: r[i - 1].to_string(),
            });
            i -= 1;
        } else {
            ops.push(EditOp::Insert {
                hyp_word: h[j - 1].to_string(),
            });
            j -= 1;
        }
    }
    ops.reverse();
    EditScript { ops }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, other: &WerCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.errors() as f64 / self.ref_words as f64)
    }
}

/// One reference/hypothesis transcript pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

impl Pair {
    pub fn new(id: impl Into<String>, reference: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            reference: reference.into(),
            hypothesis: hypothesis.into(),
        }
    }

    fn words(&self) -> (Vec<&str>, Vec<&str>) {
        (
            self.reference.split_whitespace().collect(),
            self.hypothesis.split_whitespace().collect(),
        )
    }

    pub fn align(&self) -> EditScript {
        let (r, h) = self.words();
        word_align(&r, &h)
    }
}

pub fn wer(pairs: &[Pair]) -> Result<f64, MetricsError> {
    let mut total = WerCounts::default();
    for p in pairs {
        total.add(&p.align().counts());
    }
    total
        .rate()
        .ok_or_else(|| MetricsError::Input("no reference words to score".into()))
}

/// Numerator and denominator of a per-mille rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RateCounts {
    pub events: usize,
    pub denominator: usize,
}

impl RateCounts {
    pub fn per_mille(&self) -> Option<f64> {
        (self.denominator > 0).then(|| 1000.0 * self.events as f64 / self.denominator as f64)
    }

    fn add(&mut self, other: &RateCounts) {
        self.events += other.events;
        self.denominator += other.denominator;
    }
}

/// What the phonetic-confusion rate is normalized by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PeDenominator {
    /// Total phonemes over all reference words.
    #[default]
    RefPhonemes,
    /// Number of reference words.
    RefWords,
}

/// Substitutions whose pronunciations are within `theta` normalized distance.
pub fn pe_counts(script: &EditScript, lex: &Lexicon, theta: f64, denom: PeDenominator) -> RateCounts {
    let mut c = RateCounts::default();
    for op in &script.ops {
        if let Some(r) = op.ref_word() {
            c.denominator += match denom {
                PeDenominator::RefPhonemes => g2p(r, lex).phones.len(),
                PeDenominator::RefWords => 1,
            };
        }
        if let EditOp::Substitute { ref_word, hyp_word } = op {
            let a = g2p(ref_word, lex).phones;
            let b = g2p(hyp_word, lex).phones;
            if nld(&a, &b) <= theta {
                c.events += 1;
            }
        }
    }
    c
}

pub fn pe_rate(pairs: &[Pair], lex: &Lexicon, theta: f64, denom: PeDenominator) -> Result<RateCounts, MetricsError> {
    let mut total = RateCounts::default();
    for p in pairs {
        total.add(&pe_counts(&p.align(), lex, theta, denom));
    }
    if total.denominator == 0 {
        return Err(MetricsError::Input("reference side has no phonemes".into()));
    }
    Ok(total)
}

/// Character offsets of the word boundaries inside the concatenation of `words`.
fn boundary_offsets(words: &[&str]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut pos = 0;
    for (i, w) in words.iter().enumerate() {
        pos += w.chars().count();
        if i + 1 < words.len() {
            out.insert(pos);
        }
    }
    out
}

/// Error runs that look like a wrong segmentation of nearly the right characters.
pub fn se_counts(script: &EditScript, theta: f64) -> RateCounts {
    let ref_words = script.reference().len();
    let mut c = RateCounts {
        events: 0,
        denominator: ref_words.saturating_sub(1),
    };
    for run in script.error_runs() {
        let ops = &script.ops[run];
        let r: Vec<&str> = ops.iter().filter_map(EditOp::ref_word).collect();
        let h: Vec<&str> = ops.iter().filter_map(EditOp::hyp_word).collect();
        let resegmented = r.len() != h.len() || boundary_offsets(&r) != boundary_offsets(&h);
        if resegmented && nld_str(&r.concat(), &h.concat()) <= theta {
            c.events += 1;
        }
    }
    c
}

pub fn se_rate(pairs: &[Pair], theta: f64) -> Result<RateCounts, MetricsError> {
    let mut total = RateCounts::default();
    for p in pairs {
        total.add(&se_counts(&p.align(), theta));
    }
    if total.denominator == 0 {
        return Err(MetricsError::Input(
            "every reference has a single word, so there are no boundaries".into(),
        ));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub theta_pe: f64,
    pub theta_se: f64,
    pub pe_denominator: PeDenominator,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            theta_pe: DEFAULT_THETA_PE,
            theta_se: DEFAULT_THETA_SE,
            pe_denominator: PeDenominator::RefPhonemes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UttDetail {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub counts: WerCounts,
    pub pe: RateCounts,
    pub se: RateCounts,
    pub ops: Vec<EditOp>,
}

/// Corpus-level scores. Rates are `None` when their denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub config: EvalConfig,
    pub utterances: usize,
    pub wer: Option<f64>,
    pub counts: WerCounts,
    pub pe: RateCounts,
    pub pe_rate: Option<f64>,
    pub se: RateCounts,
    pub se_rate: Option<f64>,
    pub details: Vec<UttDetail>,
}

pub fn evaluate(pairs: &[Pair], lex: &Lexicon, cfg: &EvalConfig) -> Result<ErrorReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Input("no transcript pairs".into()));
    }
    let mut counts = WerCounts::default();
    let mut pe = RateCounts::default();
    let mut se = RateCounts::default();
    let mut details = Vec::with_capacity(pairs.len());
    for p in pairs {
        let script = p.align();
        let c = script.counts();
        let pc = pe_counts(&script, lex, cfg.theta_pe, cfg.pe_denominator);
        let sc = se_counts(&script, cfg.theta_se);
        counts.add(&c);
        pe.add(&pc);
        se.add(&sc);
        details.push(UttDetail {
            id: p.id.clone(),
            reference: p.reference.clone(),
            hypothesis: p.hypothesis.clone(),
            counts: c,
            pe: pc,
            se: sc,
            ops: script.ops,
        });
    }
    Ok(ErrorReport {
        config: *cfg,
        utterances: pairs.len(),
        wer: counts.rate(),
        counts,
        pe,
        pe_rate: pe.per_mille(),
        se,
        se_rate: se.per_mille(),
        details,
    })
}

fn fmt_rate(r: Option<f64>, scale: f64, unit: &str) -> String {
    match r {
        Some(v) => format!("{:.2}{unit}", v * scale),
        None => "n/a".to_string(),
    }
}

impl ErrorReport {
    pub fn to_table(&self) -> String {
        let c = &self.counts;
        let mut out = String::new();
        writeln!(out, "utterances  {}", self.utterances).unwrap();
        writeln!(
            out,
            "WER         {:>10}  (S={} D={} I={} / N={})",
            fmt_rate(self.wer, 100.0, "%"),
            c.substitutions,
            c.deletions,
            c.insertions,
            c.ref_words
        )
        .unwrap();
        writeln!(
            out,
            "PE          {:>10}  ({} / {}, theta={})",
            fmt_rate(self.pe_rate, 1.0, "\u{2030}"),
            self.pe.events,
            self.pe.denominator,
            self.config.theta_pe
        )
        .unwrap();
        writeln!(
            out,
            "SE          {:>10}  ({} / {}, theta={})",
            fmt_rate(self.se_rate, 1.0, "\u{2030}"),
            self.se.events,
            self.se.denominator,
            self.config.theta_se
        )
        .unwrap();
        out
    }
}

/// Parses `id<TAB>transcript` lines. Blank lines are skipped; an id with no tab has an
/// empty transcript.
pub fn parse_transcripts(text: &str) -> Result<Vec<(String, String)>, MetricsError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, words) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if id.is_empty() {
            return Err(MetricsError::Parse {
                line: i + 1,
                msg: "missing utterance id".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(MetricsError::Parse {
                line: i + 1,
                msg: format!("duplicate utterance id {id:?}"),
            });
        }
        out.push((id.to_string(), words.split_whitespace().collect::<Vec<_>>().join(" ")));
    }
    Ok(out)
}

/// Matches reference and hypothesis entries by id, in reference order.
pub fn pair_transcripts(
    reference: &[(String, String)],
    hypothesis: &[(String, String)],
) -> Result<Vec<Pair>, MetricsError> {
    let hyp: std::collections::BTreeMap<&str, &str> = hypothesis
        .iter()
        .map(|(i, t)| (i.as_str(), t.as_str()))
        .collect();
    let ref_ids: BTreeSet<&str> = reference.iter().map(|(i, _)| i.as_str()).collect();
    let missing: Vec<&str> = reference
        .iter()
        .map(|(i, _)| i.as_str())
        .filter(|i| !hyp.contains_key(i))
        .collect();
    let extra: Vec<&str> = hypothesis
        .iter()
        .map(|(i, _)| i.as_str())
        .filter(|i| !ref_ids.contains(i))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(MetricsError::Input(format!(
            "utterance ids differ: missing from hypothesis [{}], not in reference [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    Ok(reference
        .iter()
        .map(|(id, r)| Pair::new(id.clone(), r.clone(), hyp[id.as_str()]))
        .collect())
}
