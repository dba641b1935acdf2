//! A toy language with known structure and a generator of speech-like frame sequences.
//!
//! Each letter is pronounced as a short phoneme sequence, each phoneme has an
//! orthonormal prototype vector, and an utterance is the concatenation of its phonemes'
//! prototypes, each repeated for a random number of frames, plus Gaussian noise.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor2;
use crate::text::{Lexicon, ScaleTargets};

pub const FEATURE_MAGIC: &[u8] = b"MCIF-FEA v1\n";
pub const CORPUS_FORMAT: &str = "MCIF-CORPUS v1";

const PHONEME_NAMES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH",
    "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V",
    "W", "Y", "Z", "ZH",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid language spec: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> SynthError {
    SynthError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }

    fn check(&self, name: &str, lowest: usize) -> Result<(), SynthError> {
        if self.min < lowest || self.min > self.max {
            return Err(SynthError::Config(format!(
                "{name} range {}..={} must be non-empty and start at {lowest} or more",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageSpec {
    pub alphabet_size: usize,
    pub phoneme_inventory: usize,
    pub word_inventory: usize,
    pub chars_per_word: Range,
    pub phonemes_per_char: Range,
    pub frames_per_phoneme: Range,
    /// Letters reserved for the end of a word; every word ends in one. 0 disables the rule.
    pub word_final_letters: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        Self {
            alphabet_size: 10,
            phoneme_inventory: 10,
            word_inventory: 30,
            chars_per_word: Range::new(2, 5),
            phonemes_per_char: Range::new(1, 1),
            frames_per_phoneme: Range::new(2, 4),
            word_final_letters: 0,
            feature_dim: 16,
            noise_std: 0.05,
            seed: 1,
        }
    }
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return Err(SynthError::Config("alphabet size must be in 1..=26".into()));
        }
        if self.phoneme_inventory == 0 || self.phoneme_inventory > PHONEME_NAMES.len() {
            return Err(SynthError::Config(format!(
                "phoneme inventory must be in 1..={}",
                PHONEME_NAMES.len()
            )));
        }
        if self.feature_dim < self.phoneme_inventory {
            return Err(SynthError::Config(format!(
                "feature dim {} cannot hold {} orthogonal prototypes",
                self.feature_dim, self.phoneme_inventory
            )));
        }
        if self.word_final_letters >= self.alphabet_size {
            return Err(SynthError::Config(
                "word-final letters must leave at least one other letter".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::Config("noise std must be finite and non-negative".into()));
        }
        self.chars_per_word.check("chars per word", 1)?;
        self.phonemes_per_char.check("phonemes per char", 1)?;
        self.frames_per_phoneme.check("frames per phoneme", 1)?;
        if self.word_final_letters > 0 && self.chars_per_word.min < 1 {
            return Err(SynthError::Config("words need at least one letter".into()));
        }
        if self.word_inventory == 0 {
            return Err(SynthError::Config("word inventory must be non-empty".into()));
        }
        Ok(())
    }

    /// Upper bound on distinct spellings: no letter repeats its neighbour, and with
    /// word-final letters the last position is restricted to them.
    fn spellings_possible(&self) -> f64 {
        let k = self.alphabet_size as f64;
        let f = self.word_final_letters as f64;
        let m = k - f;
        (self.chars_per_word.min..=self.chars_per_word.max)
            .map(|n| {
                if f == 0.0 {
                    k * (k - 1.0).powi(n as i32 - 1)
                } else if n == 1 {
                    f
                } else {
                    m * (m - 1.0).max(0.0).powi(n as i32 - 2) * f
                }
            })
            .sum()
    }
}

/// A generated language: letters, phonemes, pronunciation table, prototypes and words.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    pub spec: LanguageSpec,
    pub letters: Vec<char>,
    pub phonemes: Vec<String>,
    /// Phoneme indices for each letter, parallel to `letters`.
    pub letter_phones: Vec<Vec<usize>>,
    /// One orthonormal row per phoneme.
    pub prototypes: Tensor2,
    pub words: Vec<String>,
}

fn orthonormal_rows(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor2 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor2::from_rows(&rows).unwrap_or_else(|_| Tensor2::zeros(0, dim))
}

impl Language {
    pub fn letter_index(&self, c: char) -> Option<usize> {
        self.letters.iter().position(|&l| l == c)
    }

    /// Phoneme indices of a word spelled in this language's letters.
    pub fn pronounce(&self, word: &str) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for c in word.chars() {
            out.extend_from_slice(&self.letter_phones[self.letter_index(c)?]);
        }
        Some(out)
    }

    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for w in &self.words {
            let phones = self
                .pronounce(w)
                .expect("inventory words use the alphabet")
                .into_iter()
                .map(|p| self.phonemes[p].clone())
                .collect();
            lex.insert(w, phones);
        }
        lex
    }
}

pub fn gen_language(spec: &LanguageSpec) -> Result<Language, SynthError> {
    spec.validate()?;
    if spec.spellings_possible() < spec.word_inventory as f64 {
        return Err(SynthError::Config(format!(
            "{} words requested but at most {} spellings exist",
            spec.word_inventory,
            spec.spellings_possible()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let letters: Vec<char> = ('a'..='z').take(spec.alphabet_size).collect();
    let phonemes: Vec<String> = PHONEME_NAMES[..spec.phoneme_inventory]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let prototypes = orthonormal_rows(spec.phoneme_inventory, spec.feature_dim, &mut rng);

    // Distinct phoneme strings per letter, without internal repeats. One-phoneme letters
    // draw from a shuffled inventory so small alphabets get distinct phonemes.
    let mut order: Vec<usize> = (0..spec.phoneme_inventory).collect();
    order.shuffle(&mut rng);
    let mut letter_phones: Vec<Vec<usize>> = Vec::with_capacity(letters.len());
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut next_single = 0;
    for _ in &letters {
        let mut found = None;
        for _ in 0..10_000 {
            let len = spec.phonemes_per_char.sample(&mut rng);
            let cand: Vec<usize> = if len == 1 && next_single < order.len() {
                vec![order[next_single]]
            } else {
                let mut v = Vec::with_capacity(len);
                while v.len() < len {
                    let p = rng.gen_range(0..spec.phoneme_inventory);
                    if v.last() != Some(&p) {
                        v.push(p);
                    }
                }
                v
            };
            if len == 1 && next_single < order.len() {
                next_single += 1;
            }
            if seen.insert(cand.clone()) {
                found = Some(cand);
                break;
            }
        }
        letter_phones.push(found.ok_or_else(|| {
            SynthError::Config("not enough distinct pronunciations for the alphabet".into())
        })?);
    }

    let n_final = spec.word_final_letters;
    let body: Vec<usize> = (0..letters.len() - n_final).collect();
    let finals: Vec<usize> = (letters.len() - n_final..letters.len()).collect();
    let mut words = Vec::with_capacity(spec.word_inventory);
    let mut spellings = BTreeSet::new();
    let mut sounds = BTreeSet::new();
    let limit = 1000 * spec.word_inventory + 10_000;
    let mut attempts = 0;
    while words.len() < spec.word_inventory {
        attempts += 1;
        if attempts > limit {
            return Err(SynthError::Config(format!(
                "could only build {} distinct words of the {} requested",
                words.len(),
                spec.word_inventory
            )));
        }
        let len = spec.chars_per_word.sample(&mut rng);
        let mut idx: Vec<usize> = Vec::with_capacity(len);
        for pos in 0..len {
            let pool = if n_final > 0 && pos + 1 == len { &finals } else { &body };
            let choice = *pool.choose(&mut rng).expect("non-empty letter pool");
            idx.push(choice);
        }
        let phones: Vec<usize> = idx.iter().flat_map(|&i| letter_phones[i].clone()).collect();
        let repeats_letter = idx.windows(2).any(|w| w[0] == w[1]);
        let repeats_phone = phones.windows(2).any(|w| w[0] == w[1]);
        if repeats_letter || repeats_phone {
            continue;
        }
        let word: String = idx.iter().map(|&i| letters[i]).collect();
        if spellings.contains(&word) || sounds.contains(&phones) {
            continue;
        }
        spellings.insert(word.clone());
        sounds.insert(phones);
        words.push(word);
    }

    Ok(Language {
        spec: spec.clone(),
        letters,
        phonemes,
        letter_phones,
        prototypes,
        words,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    /// T x D features.
    pub frames: Tensor2,
    /// Word-level `[start, end)` frame intervals tiling `[0, T)`.
    pub gold_spans: Vec<(usize, usize)>,
    /// Character (with `|`), phoneme and word counts.
    pub gold_lengths: [usize; 3],
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

/// Whether the gold lengths agree with targets built by the text pipeline.
pub fn lengths_match(u: &Utterance, t: &ScaleTargets) -> bool {
    [t.chars.len(), t.phones.len(), t.words.len()] == u.gold_lengths
}

/// Samples `n` utterances of `words_per_utt` words each. Noise comes from `noise_std`
/// rather than the language spec so that clean and noisy sets can share a language.
pub fn gen_corpus(
    lang: &Language,
    n: usize,
    words_per_utt: Range,
    noise_std: f64,
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<Utterance>, SynthError> {
    words_per_utt.check("words per utterance", 1)?;
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(SynthError::Config("noise std must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dim = lang.spec.feature_dim;
    let width = n.max(1).to_string().len().max(4);
    let mut out = Vec::with_capacity(n);
    for u in 0..n {
        let n_words = words_per_utt.sample(&mut rng);
        let words: Vec<&str> = (0..n_words)
            .map(|_| lang.words.choose(&mut rng).expect("non-empty inventory").as_str())
            .collect();
        let mut data: Vec<f64> = Vec::new();
        let mut spans = Vec::with_capacity(n_words);
        let mut t = 0;
        let mut n_chars = 0;
        let mut n_phones = 0;
        for w in &words {
            let start = t;
            n_chars += w.chars().count();
            for p in lang.pronounce(w).expect("inventory words use the alphabet") {
                n_phones += 1;
                let dur = lang.spec.frames_per_phoneme.sample(&mut rng);
                for _ in 0..dur {
                    for &proto in lang.prototypes.row(p) {
                        let noise = if noise_std > 0.0 {
                            noise_std * normal.sample(&mut rng)
                        } else {
                            0.0
                        };
                        // stored as f32 on disk, so round here to keep memory and disk equal
                        data.push((proto + noise) as f32 as f64);
                    }
                    t += 1;
                }
            }
            spans.push((start, t));
        }
        let frames = Tensor2::from_vec(t, dim, data).expect("frame data matches its shape");
        out.push(Utterance {
            id: format!("{id_prefix}{:0width$}", u + 1),
            text: words.join(" "),
            frames,
            gold_spans: spans,
            gold_lengths: [n_chars + n_words.saturating_sub(1), n_phones, n_words],
        });
    }
    Ok(out)
}

/// Sizes of a generated corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub language: LanguageSpec,
    pub train_utts: usize,
    pub heldout_utts: usize,
    pub words_per_utt: Range,
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
}

fn default_frame_ms() -> f64 {
    10.0
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            language: LanguageSpec::default(),
            train_utts: 200,
            heldout_utts: 50,
            words_per_utt: Range::new(3, 5),
            frame_ms: default_frame_ms(),
        }
    }
}

/// Contents of `corpus.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format: String,
    pub spec: CorpusSpec,
    pub words: Vec<String>,
}

/// Training utterances first, held-out ones after.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub lexicon: Lexicon,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self, SynthError> {
        let lang = gen_language(&spec.language)?;
        let seed = spec.language.seed;
        let noise = spec.language.noise_std;
        let mut utterances = gen_corpus(&lang, spec.train_utts, spec.words_per_utt, noise, seed ^ 0x7472_6169_6e00, "train")?;
        utterances.extend(gen_corpus(
            &lang,
            spec.heldout_utts,
            spec.words_per_utt,
            noise,
            seed ^ 0x6865_6c64_6f75,
            "heldout",
        )?);
        Ok(Self {
            meta: CorpusMeta {
                format: CORPUS_FORMAT.to_string(),
                spec: spec.clone(),
                words: lang.words.clone(),
            },
            lexicon: lang.lexicon(),
            utterances,
        })
    }

    pub fn train(&self) -> &[Utterance] {
        &self.utterances[..self.meta.spec.train_utts.min(self.utterances.len())]
    }

    pub fn heldout(&self) -> &[Utterance] {
        &self.utterances[self.meta.spec.train_utts.min(self.utterances.len())..]
    }

    pub fn frame_ms(&self) -> f64 {
        self.meta.spec.frame_ms
    }

    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir.join("feats")).map_err(io_err(dir))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        let p = dir.join("corpus.meta");
        fs::write(&p, meta + "\n").map_err(io_err(&p))?;
        let mut utts = String::new();
        let mut spans = String::new();
        for u in &self.utterances {
            utts.push_str(&format!("{}\t{}\n", u.id, u.text));
            for (k, &(s, e)) in u.gold_spans.iter().enumerate() {
                spans.push_str(&format!("{}\t{}\t{}\t{}\n", u.id, k, s, e));
            }
            let p = dir.join("feats").join(format!("{}.fea", u.id));
            write_features(&p, &u.frames)?;
        }
        let p = dir.join("utts.tsv");
        fs::write(&p, utts).map_err(io_err(&p))?;
        let p = dir.join("gold_spans.tsv");
        fs::write(&p, spans).map_err(io_err(&p))?;
        let p = dir.join("lexicon.txt");
        fs::write(&p, self.lexicon.to_cmudict()).map_err(io_err(&p))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, SynthError> {
        let p = dir.join("corpus.meta");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let meta: CorpusMeta = serde_json::from_str(&text).map_err(|e| format_err(&p, e.to_string()))?;
        if meta.format != CORPUS_FORMAT {
            return Err(format_err(&p, format!("unsupported format {:?}", meta.format)));
        }
        let p = dir.join("lexicon.txt");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let lexicon = crate::text::parse_cmudict_str(&text, Default::default())
            .map_err(|e| format_err(&p, e.to_string()))?;

        let p = dir.join("gold_spans.tsv");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let mut spans: std::collections::BTreeMap<String, Vec<(usize, usize)>> = Default::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = (f.len() == 4)
                .then(|| Some((f[1].parse::<usize>().ok()?, f[2].parse().ok()?, f[3].parse().ok()?)))
                .flatten();
            let Some((k, s, e)) = parsed else {
                return Err(format_err(&p, format!("line {}: expected id, index, start, end", i + 1)));
            };
            let list = spans.entry(f[0].to_string()).or_default();
            if k != list.len() {
                return Err(format_err(&p, format!("line {}: token index {k} out of order", i + 1)));
            }
            list.push((s, e));
        }

        let p = dir.join("utts.tsv");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let mut utterances = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, words) = line
                .split_once('\t')
                .ok_or_else(|| format_err(&p, format!("line {}: expected id<TAB>text", i + 1)))?;
            let frames = read_features(&dir.join("feats").join(format!("{id}.fea")))?;
            let gold_spans = spans.remove(id).unwrap_or_default();
            let n_words = words.split_whitespace().count();
            let n_chars: usize = words.split_whitespace().map(|w| w.chars().count()).sum();
            let n_phones: usize = words
                .split_whitespace()
                .map(|w| lexicon.lookup(w).map_or(0, <[String]>::len))
                .sum();
            utterances.push(Utterance {
                id: id.to_string(),
                text: words.to_string(),
                frames,
                gold_spans,
                gold_lengths: [n_chars + n_words.saturating_sub(1), n_phones, n_words],
            });
        }
        Ok(Self {
            meta,
            lexicon,
            utterances,
        })
    }
}

pub fn write_features(path: &Path, frames: &Tensor2) -> Result<(), SynthError> {
    let mut buf = Vec::with_capacity(FEATURE_MAGIC.len() + 8 + 4 * frames.data().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    let dims = [frames.rows(), frames.cols()];
    for d in dims {
        let d = u32::try_from(d).map_err(|_| format_err(path, "dimension does not fit in u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor2, SynthError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    let rest = buf
        .strip_prefix(FEATURE_MAGIC)
        .ok_or_else(|| format_err(path, "missing MCIF-FEA v1 header"))?;
    if rest.len() < 8 {
        return Err(format_err(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let body = &rest[8..];
    if body.len() != 4 * rows * cols {
        return Err(format_err(
            path,
            format!("expected {} values, found {} bytes", rows * cols, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor2::from_vec(rows, cols, data).map_err(|e| format_err(path, e.to_string()))
}
