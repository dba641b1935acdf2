//! Continuous integrate-and-fire.
//!
//! Per-frame weights are accumulated left to right. When the running sum reaches the
//! threshold `beta`, the frame that crosses it is split: the part needed to reach
//! `beta` closes the current token and the remainder opens the next one. Each emitted
//! token is the weighted sum of the frames that contributed to it.
//!
//! The backward pass holds the firing pattern fixed. Writing `C_t` for the cumulative
//! weight up to and including frame `t`, the share of frame `t` in token `n` is
//! `min(C_t, (n+1)beta) - max(C_{t-1}, n*beta)`, so on each side either the bound is a
//! constant or it is a cumulative sum with derivative one in every earlier weight.

use serde::Serialize;
use thiserror::Error;

use crate::nn::Tensor2;

/// Final accumulations this close to `beta` still fire in training mode. Weights scaled
/// to an integer total only miss the last threshold by rounding.
const EXHAUST_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CifError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("weights sum to zero; cannot scale to length {0}")]
    Degenerate(usize),
    #[error("trace does not match inputs: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CifConfig {
    pub beta: f64,
    pub beta_tail: f64,
}

impl Default for CifConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            beta_tail: 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifMode {
    /// Weights are expected to be scaled to the target length; no tail threshold.
    Train,
    /// The leftover accumulation fires once more iff it reaches `beta_tail`.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    /// Closed by reaching `beta` at its last frame.
    Fired,
    /// Training-mode close at the end of the sequence (accumulation within rounding of `beta`).
    Exhausted,
    /// Inference-mode close of a residual that reached `beta_tail`.
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FireEvent {
    /// `(frame index, split weight)` in ascending frame order.
    pub splits: Vec<(usize, f64)>,
    pub kind: EventKind,
    /// The last frame was cut: part of its weight was carried past this event.
    pub cut: bool,
}

impl FireEvent {
    pub fn is_tail(&self) -> bool {
        self.kind == EventKind::Tail
    }

    pub fn weight(&self) -> f64 {
        self.splits.iter().map(|&(_, w)| w).sum()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.splits.first().map(|&(t, _)| t)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.splits.last().map(|&(t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FireTrace {
    pub events: Vec<FireEvent>,
    /// Accumulated weight that was not emitted in any event.
    pub residual: f64,
    /// Length of the input sequence the trace was computed on.
    pub frames: usize,
    pub beta: f64,
}

impl FireTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Same events, but every frame kept only in the event that received the largest share
    /// of it (earliest on ties). An event that would lose all of its frames keeps its own
    /// heaviest one.
    pub fn dominant(&self) -> FireTrace {
        let mut best: Vec<Option<(usize, f64)>> = vec![None; self.frames];
        for (n, ev) in self.events.iter().enumerate() {
            for &(t, w) in &ev.splits {
                match best[t] {
                    Some((_, bw)) if bw >= w => {}
                    _ => best[t] = Some((n, w)),
                }
            }
        }
        let events = self
            .events
            .iter()
            .enumerate()
            .map(|(n, ev)| {
                let mut splits: Vec<(usize, f64)> = ev
                    .splits
                    .iter()
                    .copied()
                    .filter(|&(t, _)| best[t].map(|(b, _)| b) == Some(n))
                    .collect();
                if splits.is_empty() {
                    if let Some(&heaviest) = ev
                        .splits
                        .iter()
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    {
                        splits.push(heaviest);
                    }
                }
                FireEvent {
                    splits,
                    kind: ev.kind,
                    cut: ev.cut,
                }
            })
            .collect();
        FireTrace {
            events,
            residual: self.residual,
            frames: self.frames,
            beta: self.beta,
        }
    }
}

fn validate_alpha(alpha: &[f64]) -> Result<(), CifError> {
    for (t, &a) in alpha.iter().enumerate() {
        if !a.is_finite() || a < 0.0 {
            return Err(CifError::Input(format!("weight {a} at frame {t} is negative or non-finite")));
        }
    }
    Ok(())
}

/// Integrates `frames` (T x D) under weights `alpha` (length T).
///
/// Returns the emitted embeddings (N x D, one row per event) and the firing trace.
pub fn cif_forward(
    frames: &Tensor2,
    alpha: &[f64],
    cfg: &CifConfig,
    mode: CifMode,
) -> Result<(Tensor2, FireTrace), CifError> {
    if alpha.len() != frames.rows() {
        return Err(CifError::Input(format!(
            "{} weights for {} frames",
            alpha.len(),
            frames.rows()
        )));
    }
    if !(cfg.beta > 0.0) {
        return Err(CifError::Input(format!("beta must be positive, got {}", cfg.beta)));
    }
    if !(0.0..=cfg.beta).contains(&cfg.beta_tail) {
        return Err(CifError::Input(format!(
            "beta_tail {} outside [0, beta]",
            cfg.beta_tail
        )));
    }
    validate_alpha(alpha)?;

    let beta = cfg.beta;
    let mut events = Vec::new();
    let mut current: Vec<(usize, f64)> = Vec::new();
    let mut acc = 0.0;
    for (t, &a) in alpha.iter().enumerate() {
        let mut remaining = a;
        while acc + remaining >= beta {
            let used = beta - acc;
            let rest = remaining - used;
            current.push((t, used));
            events.push(FireEvent {
                splits: std::mem::take(&mut current),
                kind: EventKind::Fired,
                cut: rest > 0.0,
            });
            acc = 0.0;
            remaining = rest;
        }
        if remaining > 0.0 {
            current.push((t, remaining));
            acc += remaining;
        }
    }

    let mut residual = acc;
    if !current.is_empty() {
        let kind = match mode {
            CifMode::Train if acc >= beta - EXHAUST_TOL => Some(EventKind::Exhausted),
            CifMode::Infer if acc >= cfg.beta_tail => Some(EventKind::Tail),
            _ => None,
        };
        if let Some(kind) = kind {
            events.push(FireEvent {
                splits: current,
                kind,
                cut: false,
            });
            residual = 0.0;
        }
    }

    let trace = FireTrace {
        events,
        residual,
        frames: frames.rows(),
        beta,
    };
    let fired = integrate(frames, &trace);
    Ok((fired, trace))
}

/// Emitted rows for a trace: row n is the split-weighted sum of its frames in ascending
/// frame order.
pub fn integrate(frames: &Tensor2, trace: &FireTrace) -> Tensor2 {
    let mut out = Tensor2::zeros(trace.events.len(), frames.cols());
    for (n, ev) in trace.events.iter().enumerate() {
        let row = out.row_mut(n);
        for &(t, w) in &ev.splits {
            for (o, &h) in row.iter_mut().zip(frames.row(t)) {
                *o += w * h;
            }
        }
    }
    out
}

/// Rescales `alpha` so it sums to `target_len`.
pub fn scale_to_length(alpha: &[f64], target_len: usize) -> Result<Vec<f64>, CifError> {
    validate_alpha(alpha)?;
    if target_len == 0 {
        return Err(CifError::Input("target length must be at least 1".into()));
    }
    let total: f64 = alpha.iter().sum();
    if total <= 0.0 {
        return Err(CifError::Degenerate(target_len));
    }
    let k = target_len as f64 / total;
    Ok(alpha.iter().map(|a| a * k).collect())
}

/// Gradient through [`scale_to_length`]: `a'_t = a_t U / S` with `S = sum(a)`.
pub fn scale_to_length_backward(alpha: &[f64], target_len: usize, grad_scaled: &[f64]) -> Vec<f64> {
    let total: f64 = alpha.iter().sum();
    let u = target_len as f64;
    let dot: f64 = alpha.iter().zip(grad_scaled).map(|(a, g)| a * g).sum();
    grad_scaled
        .iter()
        .map(|g| u / total * g - u / (total * total) * dot)
        .collect()
}

/// Gradients of the emitted rows with respect to frames and weights, firing pattern fixed.
pub fn cif_backward(
    frames: &Tensor2,
    alpha: &[f64],
    trace: &FireTrace,
    grad_fired: &Tensor2,
) -> Result<(Tensor2, Vec<f64>), CifError> {
    let t_len = frames.rows();
    if alpha.len() != t_len || trace.frames != t_len {
        return Err(CifError::State(format!(
            "trace covers {} frames, inputs have {} frames and {} weights",
            trace.frames,
            t_len,
            alpha.len()
        )));
    }
    if grad_fired.shape() != (trace.events.len(), frames.cols()) {
        return Err(CifError::State(format!(
            "gradient is {}x{}, trace emitted {} rows of width {}",
            grad_fired.rows(),
            grad_fired.cols(),
            trace.events.len(),
            frames.cols()
        )));
    }

    let mut grad_frames = Tensor2::zeros(t_len, frames.cols());
    // upper[t]: coefficient on C_t; lower contributions land on C_{t-1}.
    let mut coeff = vec![0.0; t_len];
    let mut carried_from: Option<usize> = None;
    for (n, ev) in trace.events.iter().enumerate() {
        let g = grad_fired.row(n);
        let count = ev.splits.len();
        for (i, &(t, w)) in ev.splits.iter().enumerate() {
            if t >= t_len {
                return Err(CifError::State(format!("frame index {t} out of range")));
            }
            for (gf, &gv) in grad_frames.row_mut(t).iter_mut().zip(g) {
                *gf += w * gv;
            }
            let s: f64 = frames.row(t).iter().zip(g).map(|(h, gv)| h * gv).sum();
            let upper_fixed = i + 1 == count && ev.kind == EventKind::Fired && ev.cut;
            let lower_fixed = i == 0 && carried_from == Some(t);
            if !upper_fixed {
                coeff[t] += s;
            }
            if !lower_fixed && t > 0 {
                coeff[t - 1] -= s;
            }
        }
        carried_from = if ev.cut { ev.last_frame() } else { None };
    }

    // dC_t / d alpha_j = 1 for j <= t, so grad_alpha_j is a suffix sum.
    let mut grad_alpha = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        running += coeff[t];
        grad_alpha[t] = running;
    }
    Ok((grad_frames, grad_alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Span {
    pub start_ms: f64,
    pub end_ms: f64,
}

/// One span per event: from the first contributing frame to one past the last.
pub fn extract_spans(trace: &FireTrace, frame_ms: f64) -> Vec<Span> {
    trace
        .events
        .iter()
        .filter_map(|ev| {
            let first = ev.first_frame()?;
            let last = ev.last_frame()?;
            Some(Span {
                start_ms: first as f64 * frame_ms,
                end_ms: (last + 1) as f64 * frame_ms,
            })
        })
        .collect()
}

/// Expresses `upper` (whose inputs are the events of `lower`) directly in terms of the
/// frames of `lower`. Weights of the same frame reached through different lower events
/// are summed.
pub fn compose_traces(lower: &FireTrace, upper: &FireTrace) -> Result<FireTrace, CifError> {
    if upper.frames != lower.events.len() {
        return Err(CifError::State(format!(
            "upper trace expects {} inputs, lower trace emitted {}",
            upper.frames,
            lower.events.len()
        )));
    }
    let events = upper
        .events
        .iter()
        .map(|ev| {
            let mut merged: Vec<(usize, f64)> = Vec::new();
            for &(m, w) in &ev.splits {
                for &(t, lw) in &lower.events[m].splits {
                    match merged.iter_mut().find(|(ft, _)| *ft == t) {
                        Some(entry) => entry.1 += w * lw,
                        None => merged.push((t, w * lw)),
                    }
                }
            }
            merged.sort_by_key(|&(t, _)| t);
            FireEvent {
                splits: merged,
                kind: ev.kind,
                cut: ev.cut,
            }
        })
        .collect();
    Ok(FireTrace {
        events,
        residual: upper.residual,
        frames: lower.frames,
        beta: upper.beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(t: usize) -> Tensor2 {
        Tensor2::identity(t)
    }

    #[test]
    fn figure_example_first_group() {
        let cfg = CifConfig::default();
        let (fired, trace) = cif_forward(&basis(3), &[0.3, 0.5, 0.3], &cfg, CifMode::Infer).unwrap();
        assert_eq!(trace.events.len(), 1);
        let ev = &trace.events[0];
        assert_eq!(ev.kind, EventKind::Fired);
        let frames: Vec<usize> = ev.splits.iter().map(|s| s.0).collect();
        assert_eq!(frames, vec![0, 1, 2]);
        assert!((ev.splits[2].1 - 0.2).abs() < 1e-12);
        assert!((trace.residual - 0.1).abs() < 1e-12);
        assert!((fired.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((fired.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((fired.get(0, 2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn tail_fires_only_in_inference() {
        let cfg = CifConfig::default();
        let (_, trace) = cif_forward(&basis(2), &[0.6, 0.2], &cfg, CifMode::Infer).unwrap();
        assert_eq!(trace.events.len(), 1);
        assert!(trace.events[0].is_tail());
        assert_eq!(trace.events[0].splits, vec![(0, 0.6), (1, 0.2)]);
        assert_eq!(trace.residual, 0.0);
        let (_, trace) = cif_forward(&basis(2), &[0.6, 0.2], &cfg, CifMode::Train).unwrap();
        assert!(trace.events.is_empty());
        assert!((trace.residual - 0.8).abs() < 1e-15);
    }

    #[test]
    fn single_full_frame() {
        let frames = Tensor2::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let (fired, trace) = cif_forward(&frames, &[1.0], &CifConfig::default(), CifMode::Infer).unwrap();
        assert_eq!(fired, frames);
        assert_eq!(trace.residual, 0.0);
        assert_eq!(trace.events[0].splits, vec![(0, 1.0)]);
    }

    #[test]
    fn empty_input_and_bad_weights() {
        let cfg = CifConfig::default();
        let (fired, trace) = cif_forward(&Tensor2::zeros(0, 3), &[], &cfg, CifMode::Infer).unwrap();
        assert_eq!(fired.rows(), 0);
        assert!(trace.is_empty());
        assert!(matches!(
            cif_forward(&basis(2), &[0.5, -0.1], &cfg, CifMode::Infer),
            Err(CifError::Input(_))
        ));
        assert!(cif_forward(&basis(2), &[0.5], &cfg, CifMode::Infer).is_err());
        let bad = CifConfig { beta: 1.0, beta_tail: 1.5 };
        assert!(cif_forward(&basis(1), &[0.5], &bad, CifMode::Infer).is_err());
    }

    #[test]
    fn scaling() {
        let a = scale_to_length(&[0.5, 1.0, 0.5], 1).unwrap();
        assert_eq!(a, vec![0.25, 0.5, 0.25]);
        let a = scale_to_length(&[0.3, 0.5, 0.3], 2).unwrap();
        assert!((a.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        let (_, trace) = cif_forward(&basis(3), &a, &CifConfig::default(), CifMode::Train).unwrap();
        assert_eq!(trace.events.len(), 2);
        assert_eq!(scale_to_length(&[0.0, 0.0], 2), Err(CifError::Degenerate(2)));
        assert!(scale_to_length(&[0.2], 0).is_err());
    }

    #[test]
    fn pooling_at_target_one() {
        let alpha = [0.1, 0.7, 0.4, 0.9];
        let a = scale_to_length(&alpha, 1).unwrap();
        let (_, trace) = cif_forward(&basis(4), &a, &CifConfig::default(), CifMode::Train).unwrap();
        assert_eq!(trace.events.len(), 1);
        let ev = &trace.events[0];
        assert_eq!(ev.splits.len(), 4);
        for (i, &(t, w)) in ev.splits.iter().enumerate() {
            assert_eq!(t, i);
            assert!((w - a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_single_frame() {
        let frames = Tensor2::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let (_, trace) = cif_forward(&frames, &[1.0], &CifConfig::default(), CifMode::Infer).unwrap();
        let g = Tensor2::from_rows(&[vec![0.5, 3.0]]).unwrap();
        let (gf, ga) = cif_backward(&frames, &[1.0], &trace, &g).unwrap();
        assert_eq!(gf, g);
        // fully consumed without a cut, so the weight follows alpha
        assert_eq!(ga, vec![2.0 * 0.5 - 3.0]);
    }

    #[test]
    fn backward_tail_single_frame_passes_inner_product() {
        let frames = Tensor2::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let (_, trace) = cif_forward(&frames, &[0.6], &CifConfig::default(), CifMode::Infer).unwrap();
        let g = Tensor2::from_rows(&[vec![0.5, 3.0]]).unwrap();
        let (gf, ga) = cif_backward(&frames, &[0.6], &trace, &g).unwrap();
        assert_eq!(gf, g.scale(0.6));
        assert!((ga[0] - (2.0 * 0.5 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn backward_figure_case_matches_hand_derivative() {
        // e = a1 h1 + a2 h2 + (1 - a1 - a2) h3, so de/da2 = h2 - h3 and de/da3 = 0.
        let frames = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let alpha = [0.3, 0.5, 0.3];
        let (_, trace) = cif_forward(&frames, &alpha, &CifConfig::default(), CifMode::Infer).unwrap();
        let g = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (_, ga) = cif_backward(&frames, &alpha, &trace, &g).unwrap();
        // <g, h1 - h3> = 1 - 4, <g, h2 - h3> = 2 - 4
        assert!((ga[0] - (-3.0)).abs() < 1e-12);
        assert!((ga[1] - (-2.0)).abs() < 1e-12);
        assert_eq!(ga[2], 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let (_, trace) = cif_forward(&basis(3), &[0.3, 0.5, 0.3], &CifConfig::default(), CifMode::Infer).unwrap();
        let g = Tensor2::zeros(1, 2);
        assert!(matches!(
            cif_backward(&basis(2), &[0.3, 0.5], &trace, &g),
            Err(CifError::State(_))
        ));
        assert!(matches!(
            cif_backward(&basis(3), &[0.3, 0.5, 0.3], &trace, &Tensor2::zeros(2, 3)),
            Err(CifError::State(_))
        ));
    }

    #[test]
    fn spans() {
        let (_, trace) = cif_forward(&basis(3), &[0.3, 0.5, 0.3], &CifConfig::default(), CifMode::Infer).unwrap();
        assert_eq!(extract_spans(&trace, 10.0), vec![Span { start_ms: 0.0, end_ms: 30.0 }]);
        let mut alpha = vec![0.0; 6];
        alpha[4] = 1.0;
        let (_, trace) = cif_forward(&basis(6), &alpha, &CifConfig::default(), CifMode::Infer).unwrap();
        assert_eq!(extract_spans(&trace, 10.0), vec![Span { start_ms: 40.0, end_ms: 50.0 }]);
        let empty = FireTrace {
            events: vec![],
            residual: 0.0,
            frames: 0,
            beta: 1.0,
        };
        assert!(extract_spans(&empty, 10.0).is_empty());
    }

    #[test]
    fn composition_and_dominance() {
        let cfg = CifConfig::default();
        let (_, lower) = cif_forward(&basis(4), &[0.6, 0.6, 0.6, 0.2], &cfg, CifMode::Infer).unwrap();
        assert_eq!(lower.events.len(), 2);
        let (_, upper) = cif_forward(&basis(2), &[0.5, 0.5], &cfg, CifMode::Infer).unwrap();
        let comp = compose_traces(&lower, &upper).unwrap();
        assert_eq!(comp.events.len(), 1);
        let total: f64 = comp.events[0].weight();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(comp.events[0].splits.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);

        let dom = lower.dominant();
        // frame 1 is split 0.4 / 0.2, so it stays with event 0
        assert_eq!(dom.events[0].splits.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(dom.events[1].splits.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 3]);
        assert!(compose_traces(&upper, &lower).is_err());
    }
}
