//! Layer kernels with their exact backward passes. Convolution is valid
//! (no padding), stride 1, lowered to GEMM through an im2col buffer.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Upper bound on im2col buffer size (in f64 elements) per GEMM call.
const IM2COL_BLOCK: usize = 1 << 20;

/// Forward-pass mode. In training mode dropout masks are drawn from `seed`,
/// so repeating a forward pass with the same seed reuses the same masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Infer,
}

/// Row-major strides `(row, col)` of a matrix operand.
type Strides = (usize, usize);

/// `C = A * B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`, each
/// addressed through its own strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, s: Strides| (rows - 1) * s.0 + (cols - 1) * s.1;
    if k > 0 {
        assert!(last(m, k, sa) < a.len() && last(k, n, sb) < b.len(), "gemm operand out of bounds");
    }
    assert!(last(m, n, sc) < c.len(), "gemm output out of bounds");
    // SAFETY: the assertions above bound every element the kernel touches
    // within the three slices, and `c` is borrowed mutably so it cannot
    // alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows_per_block(&self) -> usize {
        (IM2COL_BLOCK / (self.k() * self.ow).max(1)).clamp(1, self.oh)
    }

    /// Fills `cols` (K x bp, bp = (r1 - r0) * ow) with the receptive fields
    /// of output rows `r0..r1`.
    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let bp = (r1 - r0) * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oy in r0..r1 {
                        let src = (ci * self.h + oy + ki) * self.w + kj;
                        let dst = row * bp + (oy - r0) * self.ow;
                        cols[dst..dst + self.ow].copy_from_slice(&x[src..src + self.ow]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let bp = (r1 - r0) * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oy in r0..r1 {
                        let dst = (ci * self.h + oy + ki) * self.w + kj;
                        let src = row * bp + (oy - r0) * self.ow;
                        for (d, s) in dx[dst..dst + self.ow].iter_mut().zip(&cols[src..src + self.ow]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, ConvGeom)> {
    let (n, c, h, w) = input.dims4()?;
    let (oc, wc, kh, kw) = weights.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "kernel has {wc} channels but the input has {c}"
        )));
    }
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::Shape(format!("kernel {kh}x{kw} does not fit input {h}x{w}")));
    }
    let geom = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        oh: h - kh + 1,
        ow: w - kw + 1,
    };
    Ok((n, oc, geom))
}

/// Valid cross-correlation plus bias: `(n, c, h, w) -> (n, oc, h - kh + 1, w - kw + 1)`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, oc, g) = conv_geometry(input, weights)?;
    if bias.len() != oc {
        return Err(Error::Shape(format!("bias has {} entries for {oc} filters", bias.len())));
    }
    let (k, p) = (g.k(), g.oh * g.ow);
    let in_plane = g.c * g.h * g.w;
    let mut out = Tensor::zeros(vec![n, oc, g.oh, g.ow]);
    let rows = g.rows_per_block();
    let mut cols = vec![0.0; k * rows * g.ow];
    for img in 0..n {
        let x = &input.data()[img * in_plane..(img + 1) * in_plane];
        let y = &mut out.data_mut()[img * oc * p..(img + 1) * oc * p];
        for r0 in (0..g.oh).step_by(rows) {
            let r1 = (r0 + rows).min(g.oh);
            let bp = (r1 - r0) * g.ow;
            g.im2col(x, r0, r1, &mut cols);
            gemm(oc, k, bp, weights.data(), (k, 1), &cols, (bp, 1), 0.0, &mut y[r0 * g.ow..], (p, 1));
        }
        for (o, &b) in bias.data().iter().enumerate() {
            y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(input: &Tensor, weights: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, oc, g) = conv_geometry(input, weights)?;
    if dout.shape() != [n, oc, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match conv output {:?}",
            dout.shape(),
            [n, oc, g.oh, g.ow]
        )));
    }
    let (k, p) = (g.k(), g.oh * g.ow);
    let in_plane = g.c * g.h * g.w;
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut dw = Tensor::zeros(weights.shape().to_vec());
    let mut db = Tensor::zeros(vec![oc]);
    let rows = g.rows_per_block();
    let mut cols = vec![0.0; k * rows * g.ow];
    let mut dcols = vec![0.0; k * rows * g.ow];
    for img in 0..n {
        let x = &input.data()[img * in_plane..(img + 1) * in_plane];
        let dy = &dout.data()[img * oc * p..(img + 1) * oc * p];
        for (o, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += dy[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        let dxi = &mut dx.data_mut()[img * in_plane..(img + 1) * in_plane];
        for r0 in (0..g.oh).step_by(rows) {
            let r1 = (r0 + rows).min(g.oh);
            let bp = (r1 - r0) * g.ow;
            g.im2col(x, r0, r1, &mut cols);
            let dyb = &dy[r0 * g.ow..];
            // dW (oc x K) += dY (oc x bp) * cols^T (bp x K)
            gemm(oc, bp, k, dyb, (p, 1), &cols, (1, bp), 1.0, dw.data_mut(), (k, 1));
            // dcols (K x bp) = W^T (K x oc) * dY (oc x bp)
            gemm(k, oc, bp, weights.data(), (1, k), dyb, (p, 1), 0.0, &mut dcols, (bp, 1));
            g.col2im(&dcols, r0, r1, dxi);
        }
    }
    Ok((dx, dw, db))
}

/// Non-overlapping max pooling. Returns the output and, for every output
/// element, the flat input index of its window maximum (first in row-major
/// order on ties).
pub fn maxpool(input: &Tensor, ph: usize, pw: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Shape(format!("pool {ph}x{pw} does not tile input {h}x{w}")));
    }
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut argmax = vec![0; n * c * oh * ow];
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * ph * w + ox * pw;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let i = base + (oy * ph + dy) * w + ox * pw + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Result<Tensor> {
    if argmax.len() != dout.len() {
        return Err(Error::Shape("pool gradient does not match its argmax map".into()));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape().to_vec(), |i| input.data()[i].max(0.0))
}

/// Passes gradient only where the input was strictly positive.
pub fn relu_backward(input: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape().to_vec(), |i| {
        if input.data()[i] > 0.0 {
            dout.data()[i]
        } else {
            0.0
        }
    })
}

/// `(n, d) x (d, u) + b -> (n, u)`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (wd, u) = weights.dims2()?;
    if wd != d || bias.len() != u {
        return Err(Error::Shape(format!(
            "fc weights {:?} / bias {} do not fit input width {d}",
            weights.shape(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(vec![n, u]);
    gemm(n, d, u, input.data(), (d, 1), weights.data(), (u, 1), 0.0, out.data_mut(), (u, 1));
    for row in out.data_mut().chunks_exact_mut(u) {
        row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    }
    Ok(out)
}

pub fn fully_connected_backward(input: &Tensor, weights: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = input.dims2()?;
    let (_, u) = weights.dims2()?;
    if dout.shape() != [n, u] {
        return Err(Error::Shape(format!("fc output gradient {:?} is not {n}x{u}", dout.shape())));
    }
    let mut dx = Tensor::zeros(vec![n, d]);
    let mut dw = Tensor::zeros(vec![d, u]);
    gemm(n, u, d, dout.data(), (u, 1), weights.data(), (1, u), 0.0, dx.data_mut(), (d, 1));
    gemm(d, n, u, input.data(), (1, d), dout.data(), (u, 1), 0.0, dw.data_mut(), (u, 1));
    let mut db = Tensor::zeros(vec![u]);
    for row in dout.data().chunks_exact(u) {
        db.data_mut().iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    Ok((dx, dw, db))
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
/// returned mask holds those per-element factors. Inference is the identity.
pub fn dropout(input: &Tensor, rate: f64, mode: Mode) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    match mode {
        Mode::Train { seed } if rate > 0.0 => {
            let mut rng = seeded_rng(seed);
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..input.len())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                .collect();
            let out = Tensor::from_fn(input.shape().to_vec(), |i| input.data()[i] * mask[i]);
            Ok((out, Some(mask)))
        }
        _ => Ok((input.clone(), None)),
    }
}

pub fn dropout_backward(mask: Option<&[f64]>, dout: &Tensor) -> Tensor {
    match mask {
        Some(m) => Tensor::from_fn(dout.shape().to_vec(), |i| dout.data()[i] * m[i]),
        None => dout.clone(),
    }
}

/// Max-subtracted softmax and mean negative log-likelihood.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows of logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label(format!("class index {bad} is not below {k}")));
    }
    let mut probs = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs.data_mut()[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (pj, &z) in p.iter_mut().zip(row) {
            *pj = (z - m).exp();
            sum += *pj;
        }
        p.iter_mut().for_each(|v| *v /= sum);
        loss += sum.ln() - (row[y] - m);
    }
    Ok((loss / n as f64, probs))
}

/// `(probs - onehot) / n`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = probs.dims2()?;
    let mut d = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        d.data_mut()[i * k + y] -= 1.0;
    }
    d.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    Ok(d)
}
