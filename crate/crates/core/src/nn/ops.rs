//! Forward and analytic backward kernels for the handful of layers the model uses.
//!
//! Every function is pure. Backward functions take the forward inputs (or outputs,
//! where that is cheaper) plus the upstream gradient and return input gradients.

use super::{NnError, Tensor2};

fn conv_geometry(x: &Tensor2, kernel: &Tensor2) -> Result<(usize, usize), NnError> {
    let d = x.cols();
    if d == 0 {
        return Err(NnError::Shape("conv1d: input has zero columns".into()));
    }
    if kernel.rows() % d != 0 {
        return Err(NnError::Shape(format!(
            "conv1d: kernel has {} rows, not a multiple of input width {d}",
            kernel.rows()
        )));
    }
    let k = kernel.rows() / d;
    if k % 2 == 0 {
        return Err(NnError::Shape(format!("conv1d: kernel width {k} must be odd")));
    }
    Ok((k, d))
}

/// Same-padded 1-D convolution over time.
///
/// `kernel` is laid out as `(K*D) x D_out`: rows `k*D .. (k+1)*D` hold the tap applied to
/// input row `t + k - (K-1)/2`. Out-of-range rows read as zeros.
pub fn conv1d(x: &Tensor2, kernel: &Tensor2) -> Result<Tensor2, NnError> {
    let (k, d) = conv_geometry(x, kernel)?;
    let t_len = x.rows();
    let d_out = kernel.cols();
    let half = (k - 1) / 2;
    let mut out = Tensor2::zeros(t_len, d_out);
    for t in 0..t_len {
        let y = out.row_mut(t);
        for tap in 0..k {
            let src = t + tap;
            if src < half || src - half >= t_len {
                continue;
            }
            let xr = x.row(src - half);
            for (i, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = kernel.row(tap * d + i);
                for (yo, &w) in y.iter_mut().zip(wr) {
                    *yo += xv * w;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_kernel)`.
pub fn conv1d_backward(
    x: &Tensor2,
    kernel: &Tensor2,
    grad_out: &Tensor2,
) -> Result<(Tensor2, Tensor2), NnError> {
    let (k, d) = conv_geometry(x, kernel)?;
    grad_out.expect_shape((x.rows(), kernel.cols()), "conv1d_backward grad")?;
    let t_len = x.rows();
    let half = (k - 1) / 2;
    let mut gx = Tensor2::zeros(t_len, d);
    let mut gk = Tensor2::zeros(kernel.rows(), kernel.cols());
    for t in 0..t_len {
        let g = grad_out.row(t);
        for tap in 0..k {
            let src = t + tap;
            if src < half || src - half >= t_len {
                continue;
            }
            let s = src - half;
            for i in 0..d {
                let row = tap * d + i;
                let xv = x.get(s, i);
                let wr = kernel.row(row);
                let mut acc = 0.0;
                for (&w, &gv) in wr.iter().zip(g) {
                    acc += w * gv;
                }
                gx.row_mut(s)[i] += acc;
                if xv != 0.0 {
                    for (gkv, &gv) in gk.row_mut(row).iter_mut().zip(g) {
                        *gkv += xv * gv;
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}

/// `y = x W + b`, with `b` a `1 x out` row broadcast over rows of `x`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: Option<&Tensor2>) -> Result<Tensor2, NnError> {
    if x.cols() != w.rows() {
        return Err(NnError::Shape(format!(
            "linear: input width {} does not match weight rows {}",
            x.cols(),
            w.rows()
        )));
    }
    if let Some(b) = b {
        b.expect_shape((1, w.cols()), "linear bias")?;
    }
    let mut out = Tensor2::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let y = out.row_mut(r);
        if let Some(b) = b {
            y.copy_from_slice(b.row(0));
        }
        for (i, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yo, &wv) in y.iter_mut().zip(w.row(i)) {
                *yo += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward(
    x: &Tensor2,
    w: &Tensor2,
    grad_out: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2), NnError> {
    grad_out.expect_shape((x.rows(), w.cols()), "linear_backward grad")?;
    let mut gx = Tensor2::zeros(x.rows(), x.cols());
    let mut gw = Tensor2::zeros(w.rows(), w.cols());
    let mut gb = Tensor2::zeros(1, w.cols());
    for r in 0..x.rows() {
        let g = grad_out.row(r);
        for (gbv, &gv) in gb.data_mut().iter_mut().zip(g) {
            *gbv += gv;
        }
        let xr = x.row(r);
        for i in 0..x.cols() {
            let wr = w.row(i);
            let mut acc = 0.0;
            for (&wv, &gv) in wr.iter().zip(g) {
                acc += wv * gv;
            }
            gx.row_mut(r)[i] = acc;
            let xv = xr[i];
            if xv != 0.0 {
                for (gwv, &gv) in gw.row_mut(i).iter_mut().zip(g) {
                    *gwv += xv * gv;
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor2) -> Tensor2 {
    x.map(sigmoid_scalar)
}

/// Backward through sigmoid given its forward output `y`.
pub fn sigmoid_backward(y: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2, NnError> {
    grad_out.expect_shape(y.shape(), "sigmoid_backward grad")?;
    let mut g = grad_out.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= yv * (1.0 - yv);
    }
    Ok(g)
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

/// Backward through ReLU given its forward input `x`. The derivative at 0 is taken as 0.
pub fn relu_backward(x: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2, NnError> {
    grad_out.expect_shape(x.shape(), "relu_backward grad")?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
