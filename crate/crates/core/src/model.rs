//! The multi-scale CIF stack.
//!
//! A frame-wise MLP encodes the features. Each active scale (character, phoneme, word,
//! in that order) then predicts one firing weight per input step, integrates its input
//! with CIF, and hands the fired embeddings to the next scale. Every stage has a CTC head
//! on its own input and a length loss on its raw weights; the word-level embeddings feed
//! a linear token classifier.

use std::fmt::Write as _;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cif::{compose_traces, CifConfig, CifError, CifMode, FireTrace};
use crate::ctc::{ctc_loss_from_logits, CtcError};
use crate::nn::{log_softmax_rows, Grads, NnError, NodeId, ParamSet, Tape, Tensor2};
use crate::text::{Scale, ScaleTargets};

pub const CHECKPOINT_MAGIC: &[u8] = b"MCIF-CKPT v1\n";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot fire {need} {scale} tokens from {have} input steps")]
    InfeasibleCompression { scale: Scale, need: usize, have: usize },
    #[error("invalid targets: {0}")]
    Targets(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl From<CifError> for ModelError {
    fn from(e: CifError) -> Self {
        ModelError::Nn(NnError::Cif(e))
    }
}

fn idx(s: Scale) -> usize {
    match s {
        Scale::Char => 0,
        Scale::Phone => 1,
        Scale::Word => 2,
    }
}

/// Checks that `scales` is strictly ordered char < phone < word and ends with word.
pub fn validate_scales(scales: &[Scale]) -> Result<(), ModelError> {
    if scales.last() != Some(&Scale::Word) {
        return Err(ModelError::Config("the scale list must end with the word scale".into()));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::Config(
            "scales must be distinct and ordered char, phone, word".into(),
        ));
    }
    Ok(())
}

pub fn parse_scales(s: &str) -> Result<Vec<Scale>, ModelError> {
    let scales = s
        .split(',')
        .map(|p| p.parse::<Scale>().map_err(|e| ModelError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    validate_scales(&scales)?;
    Ok(scales)
}

pub fn scales_to_string(scales: &[Scale]) -> String {
    scales
        .iter()
        .map(|s| s.letter().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub scales: Vec<Scale>,
    pub feature_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Non-blank label counts for char, phone and word.
    pub vocab: [usize; 3],
    /// Firing threshold per scale (char, phone, word).
    pub beta: [f64; 3],
    pub beta_tail: f64,
    /// ReLU between the predictor's convolution and its linear layer.
    pub predictor_relu: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: Scale::ALL.to_vec(),
            feature_dim: 16,
            hidden: 64,
            kernel: 3,
            vocab: [1, 1, 1],
            beta: [1.0; 3],
            beta_tail: 0.45,
            predictor_relu: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        validate_scales(&self.scales)?;
        if self.kernel % 2 == 0 {
            return Err(ModelError::Config(format!("kernel width {} must be odd", self.kernel)));
        }
        if self.feature_dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config("feature and hidden sizes must be positive".into()));
        }
        if self.beta.iter().any(|&b| !(b > 0.0)) || !(0.0..=self.beta.iter().cloned().fold(f64::INFINITY, f64::min)).contains(&self.beta_tail) {
            return Err(ModelError::Config("need beta > 0 and 0 <= beta_tail <= beta".into()));
        }
        for s in &self.scales {
            if self.vocab[idx(*s)] == 0 {
                return Err(ModelError::Config(format!("{s} vocabulary is empty")));
            }
        }
        Ok(())
    }

    pub fn cif(&self, s: Scale) -> CifConfig {
        CifConfig {
            beta: self.beta[idx(s)],
            beta_tail: self.beta_tail,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "scales = {}", scales_to_string(&self.scales)).unwrap();
        writeln!(out, "feature_dim = {}", self.feature_dim).unwrap();
        writeln!(out, "hidden = {}", self.hidden).unwrap();
        writeln!(out, "kernel = {}", self.kernel).unwrap();
        writeln!(out, "vocab_char = {}", self.vocab[0]).unwrap();
        writeln!(out, "vocab_phone = {}", self.vocab[1]).unwrap();
        writeln!(out, "vocab_word = {}", self.vocab[2]).unwrap();
        writeln!(out, "beta_char = {}", self.beta[0]).unwrap();
        writeln!(out, "beta_phone = {}", self.beta[1]).unwrap();
        writeln!(out, "beta_word = {}", self.beta[2]).unwrap();
        writeln!(out, "beta_tail = {}", self.beta_tail).unwrap();
        writeln!(out, "predictor_relu = {}", self.predictor_relu).unwrap();
        writeln!(out, "init_seed = {}", self.init_seed).unwrap();
        out
    }

    /// Applies one `key = value` setting; returns false for keys it does not know.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "scales" => self.scales = parse_scales(value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "vocab_char" => self.vocab[0] = num(key, value)?,
            "vocab_phone" => self.vocab[1] = num(key, value)?,
            "vocab_word" => self.vocab[2] = num(key, value)?,
            "beta_char" => self.beta[0] = num(key, value)?,
            "beta_phone" => self.beta[1] = num(key, value)?,
            "beta_word" => self.beta[2] = num(key, value)?,
            "beta_tail" => self.beta_tail = num(key, value)?,
            "predictor_relu" => self.predictor_relu = num(key, value)?,
            "init_seed" => self.init_seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Per-step loss weights chosen by the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageWeights {
    /// CTC weight W_s for char, phone, word.
    pub ctc: [f64; 3],
    /// Whether each scale's length loss is included.
    pub qua: [bool; 3],
    pub ce: bool,
    /// Curriculum stage, 1 to 3.
    pub stage: usize,
}

impl StageWeights {
    pub fn all_on() -> Self {
        Self {
            ctc: [1.0; 3],
            qua: [true; 3],
            ce: true,
            stage: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleConfig {
    /// First epochs of curriculum stages II and III.
    pub boundaries: (usize, usize),
    /// CTC weights per stage, indexed by activation slot (first, second, third scale).
    pub stage_weights: [[f64; 3]; 3],
    pub ramp_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            boundaries: (10, 20),
            stage_weights: [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]],
            ramp_epochs: 2,
        }
    }
}

/// Loss weights for `epoch`.
///
/// The active scales are assigned, in order, to activation slots that switch on at the
/// start of stages I, II and III. With all three scales this is char, then phone, then
/// word; with fewer, the earlier slots are used (`p,w` activates phone at stage I and
/// word at stage II). The token cross-entropy switches on with the word scale. At each
/// stage transition the weights move linearly from the previous stage's values over
/// `ramp_epochs` epochs.
pub fn schedule_weights(epoch: usize, cfg: &ScheduleConfig, scales: &[Scale]) -> Result<StageWeights, ModelError> {
    let (b1, b2) = cfg.boundaries;
    if b1 > b2 {
        return Err(ModelError::Config(format!("stage boundaries ({b1}, {b2}) are not ordered")));
    }
    if cfg.stage_weights.iter().flatten().any(|w| !(*w >= 0.0)) {
        return Err(ModelError::Config("CTC weights must be non-negative".into()));
    }
    validate_scales(scales)?;
    let starts = [0, b1, b2];
    let stage = if epoch >= b2 {
        3
    } else if epoch >= b1 {
        2
    } else {
        1
    };
    let cur = cfg.stage_weights[stage - 1];
    let slot_w = if stage > 1 && cfg.ramp_epochs > 0 {
        let prev = cfg.stage_weights[stage - 2];
        let into = (epoch - starts[stage - 1] + 1) as f64 / cfg.ramp_epochs as f64;
        let f = into.min(1.0);
        let mut w = [0.0; 3];
        for i in 0..3 {
            w[i] = prev[i] + (cur[i] - prev[i]) * f;
        }
        w
    } else {
        cur
    };
    let mut out = StageWeights {
        ctc: [0.0; 3],
        qua: [false; 3],
        ce: false,
        stage,
    };
    for (slot, &s) in scales.iter().enumerate() {
        if epoch >= starts[slot] {
            out.ctc[idx(s)] = slot_w[slot];
            out.qua[idx(s)] = true;
            if s == Scale::Word {
                out.ce = true;
            }
        }
    }
    Ok(out)
}

/// Losses of one utterance. Inactive terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub qua: [f64; 3],
    /// Unweighted CTC loss per scale; `+inf` when infeasible.
    pub ctc: [f64; 3],
    pub weights: [f64; 3],
    pub ce: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recomputes the total from the components.
    pub fn recompute_total(&self) -> f64 {
        let qua: f64 = self.qua.iter().sum();
        let ctc: f64 = (0..3)
            .filter(|&i| self.weights[i] > 0.0)
            .map(|i| self.weights[i] * self.ctc[i])
            .sum();
        qua + ctc + self.ce
    }
}

/// Node ids of one stage on the tape.
#[derive(Debug, Clone, Copy)]
pub struct StageNodes {
    pub scale: Scale,
    pub input: NodeId,
    /// Predictor output before any rescaling.
    pub alpha: NodeId,
    /// Weights actually integrated (rescaled in training).
    pub alpha_used: NodeId,
    pub fired: NodeId,
    pub ctc_logits: NodeId,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub mode: CifMode,
    pub frames: NodeId,
    pub stages: Vec<StageNodes>,
    pub word_logits: NodeId,
}

impl ForwardPass {
    pub fn stage(&self, s: Scale) -> Option<&StageNodes> {
        self.stages.iter().find(|st| st.scale == s)
    }

    pub fn trace(&self, s: Scale) -> Option<&FireTrace> {
        self.stage(s).and_then(|st| self.tape.trace(st.fired))
    }

    /// Sum of the raw predicted weights at scale `s`.
    pub fn alpha_sum(&self, s: Scale) -> Option<f64> {
        self.stage(s).map(|st| self.tape.value(st.alpha).sum())
    }

    /// Word-level events expressed over the input frames.
    pub fn frame_trace(&self) -> Result<FireTrace, ModelError> {
        let mut iter = self.stages.iter();
        let first = iter.next().ok_or_else(|| ModelError::Config("no stages".into()))?;
        let mut acc = self.tape.trace(first.fired).expect("stage output is a CIF node").clone();
        for st in iter {
            let upper = self.tape.trace(st.fired).expect("stage output is a CIF node");
            acc = compose_traces(&acc, upper)?;
        }
        Ok(acc)
    }

    /// Predicted word ids (1-based), one per fired word embedding.
    pub fn word_ids(&self) -> Vec<usize> {
        let logits = self.tape.value(self.word_logits);
        (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best + 1
            })
            .collect()
    }

    /// Which frames feed which events at every stage, for detecting boundary crossings.
    pub fn firing_pattern(&self) -> Vec<Vec<(Vec<usize>, bool)>> {
        self.stages
            .iter()
            .map(|st| {
                self.tape
                    .trace(st.fired)
                    .map(|tr| {
                        tr.events
                            .iter()
                            .map(|e| (e.splits.iter().map(|&(t, _)| t).collect(), e.cut))
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McifModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn xavier(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sizes agree")
}

fn param_names(s: Scale) -> [String; 5] {
    let p = s.name();
    [
        format!("{p}.conv"),
        format!("{p}.pred.w"),
        format!("{p}.pred.b"),
        format!("{p}.ctc.w"),
        format!("{p}.ctc.b"),
    ]
}

impl McifModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, h, k) = (config.feature_dim, config.hidden, config.kernel);
        let mut ps = ParamSet::new();
        ps.insert("enc.w1", xavier(d, h, d, h, &mut rng))?;
        ps.insert("enc.b1", Tensor2::zeros(1, h))?;
        ps.insert("enc.w2", xavier(h, h, h, h, &mut rng))?;
        ps.insert("enc.b2", Tensor2::zeros(1, h))?;
        for &s in &Scale::ALL {
            if !config.scales.contains(&s) {
                continue;
            }
            let [conv, pw, pb, cw, cb] = param_names(s);
            let v = config.vocab[idx(s)] + 1;
            ps.insert(conv, xavier(k * h, h, k * h, h, &mut rng))?;
            ps.insert(pw, xavier(h, 1, h, 1, &mut rng))?;
            ps.insert(pb, Tensor2::zeros(1, 1))?;
            ps.insert(cw, xavier(h, v, h, v, &mut rng))?;
            ps.insert(cb, Tensor2::zeros(1, v))?;
        }
        let vw = config.vocab[2];
        ps.insert("cls.w", xavier(h, vw, h, vw, &mut rng))?;
        ps.insert("cls.b", Tensor2::zeros(1, vw))?;
        Ok(Self { config, params: ps })
    }

    /// Runs the stack. Training mode needs targets and rescales each stage's weights to
    /// its target length; inference mode fires on the raw weights with the tail rule.
    pub fn forward(
        &self,
        frames: &Tensor2,
        targets: Option<&ScaleTargets>,
        mode: CifMode,
    ) -> Result<ForwardPass, ModelError> {
        if frames.cols() != self.config.feature_dim {
            return Err(ModelError::Config(format!(
                "features have {} columns, model expects {}",
                frames.cols(),
                self.config.feature_dim
            )));
        }
        if mode == CifMode::Train {
            let t = targets.ok_or_else(|| ModelError::Targets("training mode needs targets".into()))?;
            if frames.rows() == 0 {
                return Err(ModelError::Targets("training utterance has no frames".into()));
            }
            for &s in &self.config.scales {
                if t.len(s) == 0 {
                    return Err(ModelError::Targets(format!("{s} target is empty")));
                }
            }
        }
        let ps = &self.params;
        let mut tape = Tape::new();
        let x = tape.input(frames.clone())?;
        let w1 = tape.param(ps, "enc.w1")?;
        let b1 = tape.param(ps, "enc.b1")?;
        let w2 = tape.param(ps, "enc.w2")?;
        let b2 = tape.param(ps, "enc.b2")?;
        let h1 = tape.linear(x, w1, Some(b1))?;
        let h1 = tape.relu(h1)?;
        let mut h = tape.linear(h1, w2, Some(b2))?;

        let mut stages = Vec::with_capacity(self.config.scales.len());
        for &s in &self.config.scales {
            let [conv, pw, pb, cw, cb] = param_names(s);
            let cwn = tape.param(ps, &cw)?;
            let cbn = tape.param(ps, &cb)?;
            let ctc_logits = tape.linear(h, cwn, Some(cbn))?;

            let k = tape.param(ps, &conv)?;
            let mut c = tape.conv1d(h, k)?;
            if self.config.predictor_relu {
                c = tape.relu(c)?;
            }
            let pwn = tape.param(ps, &pw)?;
            let pbn = tape.param(ps, &pb)?;
            let z = tape.linear(c, pwn, Some(pbn))?;
            let alpha = tape.sigmoid(z)?;

            let alpha_used = match (mode, targets) {
                (CifMode::Train, Some(t)) => {
                    let need = t.len(s);
                    let have = tape.value(h).rows();
                    if need > have {
                        return Err(ModelError::InfeasibleCompression { scale: s, need, have });
                    }
                    tape.scale_to_length(alpha, need)?
                }
                _ => alpha,
            };
            let fired = tape.cif(h, alpha_used, &self.config.cif(s), mode)?;
            stages.push(StageNodes {
                scale: s,
                input: h,
                alpha,
                alpha_used,
                fired,
                ctc_logits,
            });
            h = fired;
        }
        let cw = tape.param(ps, "cls.w")?;
        let cb = tape.param(ps, "cls.b")?;
        let word_logits = tape.linear(h, cw, Some(cb))?;
        Ok(ForwardPass {
            tape,
            mode,
            frames: x,
            stages,
            word_logits,
        })
    }

    /// Loss terms of a forward pass and the gradient seeds that produce their derivative.
    pub fn losses(
        &self,
        pass: &ForwardPass,
        targets: &ScaleTargets,
        w: &StageWeights,
    ) -> Result<(LossBundle, Vec<(NodeId, Tensor2)>), ModelError> {
        let mut bundle = LossBundle {
            weights: w.ctc,
            ..LossBundle::default()
        };
        let mut seeds = Vec::new();
        for st in &pass.stages {
            let i = idx(st.scale);
            let labels = targets.get(st.scale);
            if w.qua[i] {
                let alpha = pass.tape.value(st.alpha);
                let diff = alpha.sum() - labels.len() as f64;
                bundle.qua[i] = diff.abs();
                let g = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                seeds.push((st.alpha, Tensor2::column(&vec![g; alpha.rows()])));
            }
            if w.ctc[i] > 0.0 {
                let (loss, grad) = ctc_loss_from_logits(pass.tape.value(st.ctc_logits), labels)?;
                bundle.ctc[i] = loss;
                if loss.is_finite() {
                    seeds.push((st.ctc_logits, grad.scale(w.ctc[i])));
                }
            }
        }
        if w.ce {
            let (ce, grad) = token_cross_entropy(pass.tape.value(pass.word_logits), &targets.words)?;
            bundle.ce = ce;
            seeds.push((pass.word_logits, grad));
        }
        bundle.total = bundle.recompute_total();
        Ok((bundle, seeds))
    }

    /// Training-mode forward, losses and backward for one utterance. Gradients are not
    /// added to the parameter store; see [`Grads::accumulate_into`]. Returns `None` for
    /// the gradients when the total loss is not finite.
    pub fn loss_and_grads(
        &self,
        frames: &Tensor2,
        targets: &ScaleTargets,
        w: &StageWeights,
    ) -> Result<(LossBundle, Option<(ForwardPass, Grads)>), ModelError> {
        let pass = self.forward(frames, Some(targets), CifMode::Train)?;
        let (bundle, seeds) = self.losses(&pass, targets, w)?;
        if !bundle.total.is_finite() {
            return Ok((bundle, None));
        }
        let grads = pass.tape.backward(&seeds)?;
        Ok((bundle, Some((pass, grads))))
    }

    pub fn save_checkpoint(&self, extra_config: &str) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut text = self.config.to_kv();
        text.push_str(extra_config);
        buf.extend_from_slice(text.as_bytes());
        buf
    }

    /// Restores a model; returns it with the config lines it does not itself understand.
    pub fn load_checkpoint(bytes: &[u8]) -> Result<(Self, Vec<(String, String)>), ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut r = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| bad("missing MCIF-CKPT v1 header"))?;
        let u32_at = |r: &mut &[u8]| -> Result<usize, ModelError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated checkpoint"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let count = u32_at(&mut r)?;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let n = u32_at(&mut r)?;
            if r.len() < n {
                return Err(bad("truncated parameter name"));
            }
            let name = std::str::from_utf8(&r[..n])
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            r = &r[n..];
            let rows = u32_at(&mut r)?;
            let cols = u32_at(&mut r)?;
            let len = rows * cols * 8;
            if r.len() < len {
                return Err(bad("truncated parameter values"));
            }
            let data = r[..len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[len..];
            blocks.push((name, Tensor2::from_vec(rows, cols, data)?));
        }
        let text = std::str::from_utf8(r).map_err(|_| bad("config echo is not UTF-8"))?;
        let mut config = ModelConfig::default();
        let mut rest = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("config line {line:?} is not key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            if !config.set(k, v)? {
                rest.push((k.to_string(), v.to_string()));
            }
        }
        let mut model = McifModel::new(config)?;
        if blocks.len() != model.params.len() {
            return Err(bad(&format!(
                "checkpoint has {} parameters, configuration needs {}",
                blocks.len(),
                model.params.len()
            )));
        }
        for (name, value) in blocks {
            model.params.set_value(&name, value)?;
        }
        Ok((model, rest))
    }
}

/// Mean cross-entropy of `logits` (rows = tokens, column k = label k+1) against `labels`,
/// with its gradient.
pub fn token_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2), ModelError> {
    if logits.rows() != labels.len() {
        return Err(ModelError::Targets(format!(
            "{} token logits for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let lp = log_softmax_rows(logits);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y == 0 || y > logits.cols() {
            return Err(ModelError::Targets(format!("label {y} outside 1..={}", logits.cols())));
        }
        loss -= lp.get(r, y - 1);
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = lp.get(r, c).exp() / n;
        }
        grad.row_mut(r)[y - 1] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}
