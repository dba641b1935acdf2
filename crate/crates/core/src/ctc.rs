//! CTC loss by the log-space forward-backward recursion over the blank-extended label
//! sequence. Blank is id 0 at every scale.

use thiserror::Error;

use crate::nn::{log_softmax_rows, Tensor2};

pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("label {label} at position {pos} is outside 1..={max}")]
    Label { label: usize, pos: usize, max: usize },
    #[error("forward state does not match inputs: {0}")]
    State(String),
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames that can emit `labels`: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward recursion state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CtcForward {
    /// `-log P(y | x)`; `+inf` when the labels cannot fit in the available frames.
    pub loss: f64,
    frames: usize,
    classes: usize,
    ext: Vec<usize>,
    log_alpha: Vec<f64>,
}

impl CtcForward {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

fn extend(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), CtcError> {
    for (pos, &label) in labels.iter().enumerate() {
        if label == BLANK || label >= classes {
            return Err(CtcError::Label {
                label,
                pos,
                max: classes.saturating_sub(1),
            });
        }
    }
    Ok(())
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities `lp` (T x (V+1)).
///
/// Rows are not required to be normalized, so the loss is a smooth function of every
/// entry of `lp` (which is what the gradient is taken with respect to).
pub fn ctc_forward(lp: &Tensor2, labels: &[usize]) -> Result<CtcForward, CtcError> {
    let t_len = lp.rows();
    let classes = lp.cols();
    check_labels(labels, classes)?;
    let ext = extend(labels);
    let s_len = ext.len();
    let mut log_alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    if t_len < min_frames(labels) || t_len == 0 {
        let loss = if t_len == 0 && labels.is_empty() {
            0.0
        } else {
            f64::INFINITY
        };
        return Ok(CtcForward {
            loss,
            frames: t_len,
            classes,
            ext,
            log_alpha,
        });
    }

    log_alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        log_alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = log_alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let cur = &mut cur[..s_len];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                a = log_add(a, prev[s - 2]);
            }
            if a != f64::NEG_INFINITY {
                cur[s] = a + lp.get(t, ext[s]);
            }
        }
    }
    let last = &log_alpha[(t_len - 1) * s_len..];
    let mut total = last[s_len - 1];
    if s_len > 1 {
        total = log_add(total, last[s_len - 2]);
    }
    Ok(CtcForward {
        loss: -total,
        frames: t_len,
        classes,
        ext,
        log_alpha,
    })
}

/// Gradient of the loss with respect to `lp`: minus the posterior occupancy of each
/// (frame, class). Infeasible targets give an all-zero gradient.
pub fn ctc_backward(lp: &Tensor2, labels: &[usize], fwd: &CtcForward) -> Result<Tensor2, CtcError> {
    let t_len = lp.rows();
    let ext = extend(labels);
    if fwd.frames != t_len || fwd.classes != lp.cols() || fwd.ext != ext {
        return Err(CtcError::State(
            "forward state was computed for different inputs".into(),
        ));
    }
    let mut grad = Tensor2::zeros(t_len, lp.cols());
    if !fwd.is_feasible() || t_len == 0 {
        return Ok(grad);
    }
    let s_len = ext.len();
    let log_p = -fwd.loss;

    // beta includes the emission at t, like alpha.
    let mut beta_next = vec![f64::NEG_INFINITY; s_len];
    let mut beta_cur = vec![f64::NEG_INFINITY; s_len];
    for t in (0..t_len).rev() {
        for s in 0..s_len {
            let b = if t == t_len - 1 {
                if s + 1 >= s_len {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                let mut b = beta_next[s];
                if s + 1 < s_len {
                    b = log_add(b, beta_next[s + 1]);
                }
                if s + 2 < s_len && can_skip(&ext, s + 2) {
                    b = log_add(b, beta_next[s + 2]);
                }
                b
            };
            beta_cur[s] = if b == f64::NEG_INFINITY {
                b
            } else {
                b + lp.get(t, ext[s])
            };
        }
        // the final frame may end on the last label or the trailing blank
        if t == t_len - 1 && s_len > 1 {
            beta_cur[s_len - 2] = lp.get(t, ext[s_len - 2]);
        }
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let la = fwd.log_alpha[t * s_len + s];
            let lb = beta_cur[s];
            if la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
                continue;
            }
            // alpha * beta double counts the emission at t
            let occ = (la + lb - lp.get(t, ext[s]) - log_p).exp();
            row[ext[s]] -= occ;
        }
        std::mem::swap(&mut beta_cur, &mut beta_next);
    }
    Ok(grad)
}

/// CTC on unnormalized logits. Returns the loss and its gradient with respect to the
/// logits, `softmax - occupancy` per row.
pub fn ctc_loss_from_logits(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2), CtcError> {
    let lp = log_softmax_rows(logits);
    let fwd = ctc_forward(&lp, labels)?;
    if !fwd.is_feasible() {
        return Ok((fwd.loss, Tensor2::zeros(logits.rows(), logits.cols())));
    }
    let g_lp = ctc_backward(&lp, labels, &fwd)?;
    let mut grad = lp.map(f64::exp);
    for (g, occ) in grad.data_mut().iter_mut().zip(g_lp.data()) {
        // row sums of -occ are -1, so softmax * 1 + (-occ) is the chain rule through log_softmax
        *g += occ;
    }
    Ok((fwd.loss, grad))
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_collapse(lp: &Tensor2) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..lp.rows() {
        let row = lp.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != BLANK && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[Vec<f64>]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap().map(f64::ln)
    }

    #[test]
    fn single_frame_single_label() {
        let lp = probs(&[vec![0.2, 0.5, 0.3]]);
        let fwd = ctc_forward(&lp, &[1]).unwrap();
        assert!((fwd.loss + 0.5f64.ln()).abs() < 1e-15);
        let g = ctc_backward(&lp, &[1], &fwd).unwrap();
        assert_eq!(g.data(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn two_frames_hand_enumeration() {
        let p = [vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]];
        let lp = probs(&p);
        let fwd = ctc_forward(&lp, &[1]).unwrap();
        let expect = -(p[0][1] * p[1][1] + p[0][1] * p[1][0] + p[0][0] * p[1][1]).ln();
        assert!((fwd.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_explicit() {
        let lp = probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let fwd = ctc_forward(&lp, &[1, 1]).unwrap();
        assert!(!fwd.is_feasible());
        assert_eq!(fwd.loss, f64::INFINITY);
        let g = ctc_backward(&lp, &[1, 1], &fwd).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(min_frames(&[1, 1]), 3);
        assert_eq!(min_frames(&[1, 2, 2, 2]), 6);
    }

    #[test]
    fn label_validation() {
        let lp = probs(&[vec![0.5, 0.5]]);
        assert!(matches!(ctc_forward(&lp, &[0]), Err(CtcError::Label { .. })));
        assert!(matches!(ctc_forward(&lp, &[2]), Err(CtcError::Label { .. })));
    }

    #[test]
    fn backward_rejects_other_inputs() {
        let lp = probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let fwd = ctc_forward(&lp, &[1]).unwrap();
        assert!(matches!(ctc_backward(&lp, &[1, 1], &fwd), Err(CtcError::State(_))));
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let logits = Tensor2::from_rows(&[
            vec![0.1, -0.3, 0.8],
            vec![1.2, 0.0, -0.5],
            vec![-0.2, 0.4, 0.3],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let (loss, g) = ctc_loss_from_logits(&logits, &[1, 2]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for t in 0..4 {
            assert!(g.row(t).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn empty_labels() {
        let lp = probs(&[vec![0.25, 0.75], vec![0.5, 0.5]]);
        let fwd = ctc_forward(&lp, &[]).unwrap();
        assert!((fwd.loss + (0.25f64 * 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy() {
        let a = |k: usize| {
            let mut r = vec![0.1; 3];
            r[k] = 0.8;
            r
        };
        assert_eq!(greedy_collapse(&probs(&[a(1), a(1), a(0), a(2)])), vec![1, 2]);
        assert_eq!(greedy_collapse(&probs(&[a(0), a(0)])), Vec::<usize>::new());
        assert_eq!(greedy_collapse(&probs(&[a(1), a(0), a(1)])), vec![1, 1]);
    }
}
