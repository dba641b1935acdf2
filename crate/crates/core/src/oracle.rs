//! Slow reference implementations used to cross-check the real ones.
//!
//! Nothing here shares code with the modules it checks: the CIF simulator walks one
//! frame at a time with plain scalars, CTC is checked by enumerating every frame-level
//! path, and so on.

use std::collections::HashMap;

/// One emitted token from the scalar CIF simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub frames: Vec<usize>,
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
    pub tail: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub events: Vec<SimEvent>,
    pub residual: f64,
}

/// Step-by-step integrate-and-fire over rows of `frames` (each a `Vec` of length D).
///
/// `train` selects the training-time end rule (an accumulation within 1e-9 of `beta`
/// closes); otherwise the leftover fires iff it reaches `beta_tail`.
pub fn simulate_cif(frames: &[Vec<f64>], alpha: &[f64], beta: f64, beta_tail: f64, train: bool) -> SimResult {
    let dim = frames.first().map_or(0, Vec::len);
    let mut events = Vec::new();
    let mut idx: Vec<usize> = Vec::new();
    let mut wts: Vec<f64> = Vec::new();
    let mut acc = 0.0f64;

    let close = |idx: &mut Vec<usize>, wts: &mut Vec<f64>, tail: bool| {
        let mut emb = vec![0.0; dim];
        for (k, &t) in idx.iter().enumerate() {
            for d in 0..dim {
                emb[d] += wts[k] * frames[t][d];
            }
        }
        SimEvent {
            frames: std::mem::take(idx),
            weights: std::mem::take(wts),
            embedding: emb,
            tail,
        }
    };

    for t in 0..alpha.len() {
        let mut a = alpha[t];
        loop {
            if acc + a < beta {
                if a > 0.0 {
                    idx.push(t);
                    wts.push(a);
                    acc += a;
                }
                break;
            }
            let need = beta - acc;
            idx.push(t);
            wts.push(need);
            events.push(close(&mut idx, &mut wts, false));
            acc = 0.0;
            a -= need;
        }
    }

    let mut residual = acc;
    if !idx.is_empty() {
        let fire = if train { acc >= beta - 1e-9 } else { acc >= beta_tail };
        if fire {
            events.push(close(&mut idx, &mut wts, !train));
            residual = 0.0;
        }
    }
    SimResult { events, residual }
}

/// Removes repeats then blanks (id 0) from a frame-level path.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != 0 {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// `-log` of the total probability of every path of length T that collapses to `labels`.
/// `probs[t][k]` is the (linear) probability of class k at frame t. Exponential in T.
pub fn brute_force_ctc(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let t_len = probs.len();
    if t_len == 0 {
        return if labels.is_empty() { 0.0 } else { f64::INFINITY };
    }
    let k = probs[0].len();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path) == labels {
            total += path.iter().enumerate().map(|(t, &c)| probs[t][c]).product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Direct summation: `y[t][o] = sum_k sum_d x[t+k-(K-1)/2][d] * kernel[k*D+d][o]`.
pub fn reference_conv1d(x: &[Vec<f64>], kernel: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    let t_len = x.len();
    let d_in = x.first().map_or(0, Vec::len);
    let d_out = kernel.first().map_or(0, Vec::len);
    let half = (width / 2) as isize;
    let mut y = vec![vec![0.0; d_out]; t_len];
    for t in 0..t_len {
        for o in 0..d_out {
            let mut s = 0.0;
            for k in 0..width {
                let src = t as isize + k as isize - half;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                for d in 0..d_in {
                    s += x[src as usize][d] * kernel[k * d_in + d][o];
                }
            }
            y[t][o] = s;
        }
    }
    y
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b.first().map_or(0, Vec::len);
    let inner = b.len();
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for k in 0..inner {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Adam on a single scalar, returning the parameter trajectory.
pub fn scalar_adam(x0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let mut x = x0;
    let mut m = 0.0;
    let mut v = 0.0;
    let mut out = Vec::with_capacity(grads.len());
    for (i, &g) in grads.iter().enumerate() {
        let step = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(step));
        let vh = v / (1.0 - b2.powi(step));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}

/// Edit distance by memoized recursion on suffixes.
pub fn recursive_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}
