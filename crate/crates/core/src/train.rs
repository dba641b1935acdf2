//! Toy training loop: Adam on per-utterance steps, a staged curriculum, LR annealing,
//! and held-out evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cif::{extract_spans, CifMode, Span};
use crate::metrics::{evaluate, word_align, ErrorReport, EvalConfig, MetricsError, Pair};
use crate::model::{
    schedule_weights, ForwardPass, LossBundle, McifModel, ModelConfig, ModelError, ScheduleConfig, StageWeights,
};
use crate::nn::{NnError, ParamSet, Tensor2};
use crate::synth::{Corpus, Utterance};
use crate::text::{
    bpe_train, BpeModel, CharVocab, Lexicon, PhoneVocab, Scale, ScaleTargets, TargetBuilder, TextError,
};

pub const REINIT_LR: f64 = 6.448e-5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Everything the training run needs besides the corpus. Read from and written as flat
/// `key = value` text; see [`TrainConfig::KEYS`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: ScheduleConfig,
    pub base_lr: f64,
    pub anneal_epoch: usize,
    pub reinit_lr: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub shuffle_seed: u64,
    /// Utterances whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    /// Held-out evaluation every this many epochs (0 = only at the end).
    pub eval_interval: usize,
    pub bpe_vocab: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            schedule: ScheduleConfig::default(),
            base_lr: 3e-3,
            anneal_epoch: 90,
            reinit_lr: REINIT_LR,
            lr_decay: 0.98,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_seed: 0,
            batch_size: 1,
            eval_interval: 0,
            bpe_vocab: 64,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Keys understood by [`TrainConfig::set`], besides the model keys.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("epochs", "number of passes over the training split"),
        ("stage2_epoch", "first epoch of curriculum stage II"),
        ("stage3_epoch", "first epoch of curriculum stage III"),
        ("stage1_weights", "CTC weights per activation slot in stage I, comma separated"),
        ("stage2_weights", "same for stage II"),
        ("stage3_weights", "same for stage III"),
        ("ramp_epochs", "epochs over which weights move to a new stage's values"),
        ("base_lr", "learning rate at epoch 0, decayed as 1/sqrt(1+epoch)"),
        ("anneal_epoch", "epoch at which the learning rate is reset"),
        ("reinit_lr", "learning rate at the anneal epoch"),
        ("lr_decay", "per-epoch factor after the anneal epoch"),
        ("adam_beta1", "Adam first-moment decay"),
        ("adam_beta2", "Adam second-moment decay"),
        ("adam_eps", "Adam denominator offset"),
        ("shuffle_seed", "seed of the per-epoch utterance order"),
        ("batch_size", "utterances averaged into one optimizer step"),
        ("eval_interval", "evaluate held-out data every N epochs, 0 for only at the end"),
        ("bpe_vocab", "BPE vocabulary size (letters plus merges)"),
    ];

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let (b1, b2) = self.schedule.boundaries;
        if b1 > b2 {
            return bad("stage boundaries must be ordered");
        }
        if !(self.base_lr > 0.0 && self.reinit_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be non-negative");
        }
        if self.schedule.stage_weights.iter().flatten().any(|w| !(*w >= 0.0)) {
            return bad("CTC weights must be non-negative");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value {v:?} for {key}")))
        }
        fn triple(key: &str, v: &str) -> Result<[f64; 3], TrainError> {
            let parts = v
                .split(',')
                .map(|p| num::<f64>(key, p.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            parts
                .try_into()
                .map_err(|_| TrainError::Config(format!("{key} needs three comma-separated values")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "stage2_epoch" => self.schedule.boundaries.0 = num(key, value)?,
            "stage3_epoch" => self.schedule.boundaries.1 = num(key, value)?,
            "stage1_weights" => self.schedule.stage_weights[0] = triple(key, value)?,
            "stage2_weights" => self.schedule.stage_weights[1] = triple(key, value)?,
            "stage3_weights" => self.schedule.stage_weights[2] = triple(key, value)?,
            "ramp_epochs" => self.schedule.ramp_epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "anneal_epoch" => self.anneal_epoch = num(key, value)?,
            "reinit_lr" => self.reinit_lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "shuffle_seed" => self.shuffle_seed = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "bpe_vocab" => self.bpe_vocab = num(key, value)?,
            // vocabulary sizes come from the data
            "vocab_char" | "vocab_phone" | "vocab_word" => {}
            _ => {
                if !self.model.set(key, value)? {
                    return Err(TrainError::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training keys only; the model echoes its own.
    pub fn to_kv(&self) -> String {
        let w = |a: [f64; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let s = &self.schedule;
        let mut out = String::new();
        writeln!(out, "epochs = {}", self.epochs).unwrap();
        writeln!(out, "stage2_epoch = {}", s.boundaries.0).unwrap();
        writeln!(out, "stage3_epoch = {}", s.boundaries.1).unwrap();
        writeln!(out, "stage1_weights = {}", w(s.stage_weights[0])).unwrap();
        writeln!(out, "stage2_weights = {}", w(s.stage_weights[1])).unwrap();
        writeln!(out, "stage3_weights = {}", w(s.stage_weights[2])).unwrap();
        writeln!(out, "ramp_epochs = {}", s.ramp_epochs).unwrap();
        writeln!(out, "base_lr = {}", self.base_lr).unwrap();
        writeln!(out, "anneal_epoch = {}", self.anneal_epoch).unwrap();
        writeln!(out, "reinit_lr = {}", self.reinit_lr).unwrap();
        writeln!(out, "lr_decay = {}", self.lr_decay).unwrap();
        writeln!(out, "adam_beta1 = {}", self.adam_beta1).unwrap();
        writeln!(out, "adam_beta2 = {}", self.adam_beta2).unwrap();
        writeln!(out, "adam_eps = {}", self.adam_eps).unwrap();
        writeln!(out, "shuffle_seed = {}", self.shuffle_seed).unwrap();
        writeln!(out, "batch_size = {}", self.batch_size).unwrap();
        writeln!(out, "eval_interval = {}", self.eval_interval).unwrap();
        writeln!(out, "bpe_vocab = {}", self.bpe_vocab).unwrap();
        out
    }
}

/// Inverse square-root decay from `base_lr` until the anneal epoch, where the rate is
/// reset to `reinit_lr` and then multiplied by `lr_decay` every epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.anneal_epoch {
        cfg.base_lr / ((1 + epoch) as f64).sqrt()
    } else {
        cfg.reinit_lr * cfg.lr_decay.powi((epoch - cfg.anneal_epoch) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`. Returns false
/// and leaves everything untouched when any gradient is non-finite.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> bool {
    if !params.grads_finite() {
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.value.data().len();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = p.grad.data().to_vec();
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *x -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    true
}

/// Held-out scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub utterances: usize,
    /// Matched word tokens over reference word tokens, after edit-distance alignment.
    pub token_accuracy: f64,
    /// Mean |sum of unscaled weights - target length| in inference mode, per scale
    /// (char, phone, word); `None` for inactive scales.
    pub length_mae: [Option<f64>; 3],
    /// Utterances whose decoded token sequence equals the reference.
    pub exact: usize,
    /// Share of decoded tokens whose span endpoints are within [`SPAN_TOLERANCE`] frames
    /// of the gold word span (see [`span_hits`]).
    pub span_accuracy: f64,
}

/// Frame tolerance used for [`EvalMetrics::span_accuracy`].
pub const SPAN_TOLERANCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub weights: StageWeights,
    /// Per-utterance losses averaged over the utterances that were applied.
    pub loss: LossBundle,
    /// Utterances that contributed to an applied optimizer step.
    pub steps: usize,
    pub skipped: usize,
    pub eval: Option<EvalMetrics>,
}

pub const REPORT_FORMAT: &str = "mcif-train-report v1";

/// Final summary written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub format: &'static str,
    pub scales: String,
    pub epochs_run: usize,
    pub diverged: bool,
    pub heldout: EvalMetrics,
    pub errors: Option<ErrorReport>,
}

/// The text side of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub chars: CharVocab,
    pub phones: PhoneVocab,
    pub bpe: BpeModel,
    pub lexicon: Lexicon,
}

impl Vocabularies {
    /// Fits all vocabularies on the training transcripts.
    pub fn fit(train: &[Utterance], lexicon: &Lexicon, bpe_vocab: usize) -> Result<Self, TrainError> {
        let texts: Vec<&str> = train.iter().map(|u| u.text.as_str()).collect();
        if texts.is_empty() {
            return Err(TrainError::Config("the training split is empty".into()));
        }
        let letters = CharVocab::from_corpus(&texts).letters().len();
        Ok(Self {
            chars: CharVocab::from_corpus(&texts),
            phones: PhoneVocab::for_lexicon(lexicon),
            bpe: bpe_train(&texts, bpe_vocab.max(letters))?,
            lexicon: lexicon.clone(),
        })
    }

    pub fn builder(&self) -> TargetBuilder {
        TargetBuilder::new(self.chars.clone(), self.lexicon.clone(), self.phones.clone(), self.bpe.clone())
    }

    pub fn sizes(&self) -> [usize; 3] {
        let b = self.builder();
        [b.vocab_size(Scale::Char), b.vocab_size(Scale::Phone), b.vocab_size(Scale::Word)]
    }
}

/// A decoded utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub text: String,
    /// One span per token, in frames.
    pub spans: Vec<(usize, usize)>,
}

/// Inference-mode forward, argmax per fired word embedding and word spans over the input
/// frames.
pub fn decode(model: &McifModel, bpe: &BpeModel, frames: &Tensor2) -> Result<Decoded, TrainError> {
    let pass = model.forward(frames, None, CifMode::Infer)?;
    decode_pass(&pass, bpe)
}

fn decode_pass(pass: &ForwardPass, bpe: &BpeModel) -> Result<Decoded, TrainError> {
    let ids = pass.word_ids();
    let trace = pass.frame_trace()?.dominant();
    let spans = extract_spans(&trace, 1.0)
        .into_iter()
        .map(|Span { start_ms, end_ms }| (start_ms as usize, end_ms as usize))
        .collect::<Vec<_>>();
    debug_assert_eq!(spans.len(), ids.len());
    Ok(Decoded {
        text: bpe.decode(&ids)?,
        ids,
        spans,
    })
}

fn id_strings(ids: &[usize]) -> Vec<String> {
    ids.iter().map(usize::to_string).collect()
}

/// Reference word tokens matched by the hypothesis after edit-distance alignment.
pub fn matched_tokens(reference: &[usize], hypothesis: &[usize]) -> usize {
    word_align(&id_strings(reference), &id_strings(hypothesis))
        .ops
        .iter()
        .filter(|op| op.is_match())
        .count()
}

/// Decoded tokens whose start and end both lie within `tol` frames of the gold span of
/// the reference word they are aligned to (as a match or a substitution; only timing is
/// judged). Inserted tokens have no gold span and count as misses. Words that BPE splits
/// into several tokens have no single gold span and are left out of both counts.
pub fn span_hits(
    bpe: &BpeModel,
    utt: &Utterance,
    decoded: &Decoded,
    tol: usize,
) -> Result<(usize, usize), TrainError> {
    let mut ref_ids = Vec::new();
    let mut gold = Vec::new();
    for (w, &span) in utt.words().iter().zip(&utt.gold_spans) {
        let ids = bpe.encode(w)?;
        let single = ids.len() == 1;
        for id in ids {
            ref_ids.push(id);
            gold.push(single.then_some(span));
        }
    }
    let script = word_align(&id_strings(&ref_ids), &id_strings(&decoded.ids));
    let (mut ri, mut hi) = (0, 0);
    let (mut hits, mut total) = (0, 0);
    let close = |a: usize, b: usize| a.abs_diff(b) <= tol;
    for op in &script.ops {
        use crate::metrics::EditOp::*;
        match op {
            Match { .. } | Substitute { .. } => {
                if let Some((gs, ge)) = gold[ri] {
                    total += 1;
                    let (s, e) = decoded.spans[hi];
                    if close(s, gs) && close(e, ge) {
                        hits += 1;
                    }
                }
                ri += 1;
                hi += 1;
            }
            Insert { .. } => {
                total += 1;
                hi += 1;
            }
            Delete { .. } => ri += 1,
        }
    }
    Ok((hits, total))
}

/// Token accuracy and length errors over `utts`.
pub fn evaluate_model(
    model: &McifModel,
    builder: &TargetBuilder,
    utts: &[Utterance],
) -> Result<(EvalMetrics, Vec<Pair>), TrainError> {
    let mut matched = 0usize;
    let mut ref_tokens = 0usize;
    let mut exact = 0;
    let mut mae = [0.0f64; 3];
    let (mut span_hit, mut span_total) = (0, 0);
    let mut pairs = Vec::with_capacity(utts.len());
    for u in utts {
        let targets = builder.build(&u.text)?;
        let pass = model.forward(&u.frames, None, CifMode::Infer)?;
        let decoded = decode_pass(&pass, &builder.bpe)?;
        let (h, t) = span_hits(&builder.bpe, u, &decoded, SPAN_TOLERANCE)?;
        span_hit += h;
        span_total += t;
        for &s in &model.config.scales {
            let i = s as usize;
            mae[i] += (pass.alpha_sum(s).unwrap_or(0.0) - targets.len(s) as f64).abs();
        }
        let ids = decoded.ids;
        matched += matched_tokens(&targets.words, &ids);
        ref_tokens += targets.words.len();
        if ids == targets.words {
            exact += 1;
        }
        pairs.push(Pair::new(u.id.clone(), u.text.clone(), decoded.text));
    }
    let n = utts.len().max(1) as f64;
    let mut length_mae = [None; 3];
    for &s in &model.config.scales {
        length_mae[s as usize] = Some(mae[s as usize] / n);
    }
    Ok((
        EvalMetrics {
            utterances: utts.len(),
            token_accuracy: if ref_tokens == 0 {
                1.0
            } else {
                matched as f64 / ref_tokens as f64
            },
            length_mae,
            exact,
            span_accuracy: if span_total == 0 {
                1.0
            } else {
                span_hit as f64 / span_total as f64
            },
        },
        pairs,
    ))
}

pub struct TrainOutcome {
    pub model: McifModel,
    pub vocab: Vocabularies,
    pub config: TrainConfig,
    pub log: Vec<EpochLog>,
    pub report: TrainReport,
}

impl TrainOutcome {
    /// The train log as line-delimited JSON.
    pub fn log_jsonl(&self) -> String {
        log_to_jsonl(&self.log)
    }

    /// Writes `model.ckpt`, `bpe.model`, `phones.txt`, `chars.txt`, `lexicon.txt`,
    /// `train_log.jsonl` and `report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_model(dir, &self.model, &self.vocab, &self.config)?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        write("train_log.jsonl", self.log_jsonl())?;
        write(
            "report.json",
            serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n",
        )?;
        Ok(())
    }
}

pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
        .collect()
}

pub fn save_model(dir: &Path, model: &McifModel, vocab: &Vocabularies, cfg: &TrainConfig) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write("model.ckpt", &model.save_checkpoint(&cfg.to_kv()))?;
    write("bpe.model", vocab.bpe.to_model_string().as_bytes())?;
    write("phones.txt", vocab.phones.to_text().as_bytes())?;
    write("chars.txt", (vocab.chars.letters().iter().collect::<String>() + "\n").as_bytes())?;
    write("lexicon.txt", vocab.lexicon.to_cmudict().as_bytes())?;
    Ok(())
}

/// Loads what [`save_model`] wrote.
pub fn load_model(dir: &Path) -> Result<(McifModel, Vocabularies), TrainError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(io_err(&p))
    };
    let text = |name: &str| -> Result<String, TrainError> {
        String::from_utf8(read(name)?).map_err(|_| TrainError::Format {
            path: dir.join(name).display().to_string(),
            msg: "not UTF-8".into(),
        })
    };
    let (model, _) = McifModel::load_checkpoint(&read("model.ckpt")?)?;
    let lexicon = crate::text::parse_cmudict_str(&text("lexicon.txt")?, Default::default())?;
    let vocab = Vocabularies {
        chars: CharVocab::new(text("chars.txt")?.trim().chars()),
        phones: PhoneVocab::from_text(&text("phones.txt")?),
        bpe: BpeModel::from_model_string(&text("bpe.model")?)?,
        lexicon,
    };
    if vocab.sizes()[2] != model.config.vocab[2] {
        return Err(TrainError::Format {
            path: dir.display().to_string(),
            msg: "BPE model does not match the checkpoint's word vocabulary".into(),
        });
    }
    Ok((model, vocab))
}

fn add_bundle(acc: &mut LossBundle, b: &LossBundle) {
    for i in 0..3 {
        acc.qua[i] += b.qua[i];
        acc.ctc[i] += b.ctc[i];
    }
    acc.ce += b.ce;
    acc.total += b.total;
}

fn mean_bundle(acc: &LossBundle, n: usize, weights: [f64; 3]) -> LossBundle {
    let k = n.max(1) as f64;
    LossBundle {
        qua: acc.qua.map(|v| v / k),
        ctc: acc.ctc.map(|v| v / k),
        weights,
        ce: acc.ce / k,
        total: acc.total / k,
    }
}

/// Trains on `corpus.train()` and evaluates on `corpus.heldout()`.
///
/// Steps whose loss is infinite (an infeasible CTC target) or whose gradients are not
/// finite are skipped. A NaN loss stops training; the parameters from before that step
/// are kept and the report is marked as diverged.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(corpus, cfg, |_, _, _| {})
}

/// [`train`] with a callback after every epoch, given the log entry and the current
/// parameters (used for periodic checkpoints).
pub fn train_with(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &McifModel, &Vocabularies),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_utts = corpus.train();
    let vocab = Vocabularies::fit(train_utts, &corpus.lexicon, cfg.bpe_vocab)?;
    let builder = vocab.builder();
    let mut mcfg = cfg.model.clone();
    mcfg.vocab = vocab.sizes();
    if let Some(u) = corpus.utterances.first() {
        mcfg.feature_dim = u.frames.cols();
    }
    let mut model = McifModel::new(mcfg)?;
    let targets: Vec<ScaleTargets> = train_utts
        .iter()
        .map(|u| builder.build(&u.text))
        .collect::<Result<_, _>>()?;

    let adam = AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train_utts.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;
    let heldout = corpus.heldout();

    for epoch in 0..cfg.epochs {
        let w = schedule_weights(epoch, &cfg.schedule, &model.config.scales)?;
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut acc = LossBundle::default();
        let (mut steps, mut skipped) = (0, 0);
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            let mut batch_acc = LossBundle::default();
            let mut used = 0;
            for &i in batch {
                let pass = match model.forward(&train_utts[i].frames, Some(&targets[i]), CifMode::Train) {
                    Ok(p) => p,
                    Err(ModelError::InfeasibleCompression { .. }) => {
                        skipped += 1;
                        continue;
                    }
                    Err(ModelError::Nn(NnError::Numeric(_))) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e.into()),
                };
                let (bundle, seeds) = model.losses(&pass, &targets[i], &w)?;
                if bundle.total.is_nan() {
                    diverged = true;
                    break;
                }
                if !bundle.total.is_finite() {
                    skipped += 1;
                    continue;
                }
                let grads = match pass.tape.backward(&seeds) {
                    Ok(g) => g,
                    Err(NnError::Numeric(_)) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                grads.accumulate_into(&mut model.params)?;
                add_bundle(&mut batch_acc, &bundle);
                used += 1;
            }
            if diverged {
                break;
            }
            if used == 0 {
                continue;
            }
            if used > 1 {
                let k = 1.0 / used as f64;
                for (_, p) in model.params.iter_mut() {
                    p.grad = p.grad.scale(k);
                }
            }
            if !adam_step(&mut model.params, &mut state, lr, &adam) {
                skipped += used;
                continue;
            }
            add_bundle(&mut acc, &batch_acc);
            steps += used;
        }
        let eval_now = cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0 && !heldout.is_empty();
        let eval = if eval_now {
            Some(evaluate_model(&model, &builder, heldout)?.0)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            stage: w.stage,
            lr,
            weights: w,
            loss: mean_bundle(&acc, steps, w.ctc),
            steps,
            skipped,
            eval,
        };
        on_epoch(&entry, &model, &vocab);
        log.push(entry);
        if diverged {
            break;
        }
    }

    let eval_set = if heldout.is_empty() { train_utts } else { heldout };
    let (metrics, pairs) = evaluate_model(&model, &builder, eval_set)?;
    let errors = evaluate(&pairs, &vocab.lexicon, &EvalConfig::default()).ok();
    let report = TrainReport {
        format: REPORT_FORMAT,
        scales: crate::model::scales_to_string(&model.config.scales),
        epochs_run: log.len(),
        diverged,
        heldout: metrics,
        errors,
    };
    Ok(TrainOutcome {
        model,
        vocab,
        config: cfg.clone(),
        log,
        report,
    })
}
