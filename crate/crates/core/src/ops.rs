//! Layer forward operators.
//!
//! Images are `C×H×W` or batched `N×C×H×W`; convolution weights are
//! `OC×IC×KH×KW`; fully-connected weights are `OUT×IN`. Every operator is a
//! pure function and accumulates in `f32` in a fixed order (bias first, then
//! input channel, kernel row, kernel column), so repeated calls are
//! bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits an image tensor into `(batch, channels, height, width)`.
fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(op, "input rank", "3 (C×H×W) or 4 (N×C×H×W)", t.rank())),
    }
}

fn image_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (n, ic, ih, iw) = image_dims(OP, input)?;
    let [oc, wic, kh, kw] = *weights.shape() else {
        return Err(Error::dim(OP, "weight rank", 4, weights.rank()));
    };
    if wic != ic {
        return Err(Error::dim(OP, "input channels (input axis C vs weight axis 1)", wic, ic));
    }
    if bias.len() != oc {
        return Err(Error::dim(OP, "bias length vs weight axis 0", oc, bias.len()));
    }
    if stride[0] == 0 || stride[1] == 0 {
        return Err(Error::Config(format!("{OP}: stride must be >= 1, got {stride:?}")));
    }
    let (ph, pw) = (padding[0], padding[1]);
    if ih + 2 * ph < kh {
        return Err(Error::dim(OP, "height (padded input vs kernel)", format!(">= {kh}"), ih + 2 * ph));
    }
    if iw + 2 * pw < kw {
        return Err(Error::dim(OP, "width (padded input vs kernel)", format!(">= {kw}"), iw + 2 * pw));
    }
    let oh = (ih + 2 * ph - kh) / stride[0] + 1;
    let ow = (iw + 2 * pw - kw) / stride[1] + 1;

    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; n * oc * oh * ow];
    for b in 0..n {
        let x_img = &x[b * ic * ih * iw..(b + 1) * ic * ih * iw];
        for o in 0..oc {
            let plane = &mut out[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            plane.fill(bias.data()[o]);
            for c in 0..ic {
                let x_ch = &x_img[c * ih * iw..(c + 1) * ih * iw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = wt[((o * ic + c) * kh + ky) * kw + kx];
                        for y in 0..oh {
                            let iy = (y * stride[0] + ky) as isize - ph as isize;
                            if iy < 0 || iy as usize >= ih {
                                continue;
                            }
                            let row = &x_ch[iy as usize * iw..(iy as usize + 1) * iw];
                            let out_row = &mut plane[y * ow..(y + 1) * ow];
                            if stride[1] == 1 && pw == 0 {
                                for (acc, &v) in out_row.iter_mut().zip(&row[kx..kx + ow]) {
                                    *acc += w * v;
                                }
                            } else {
                                for (xo, acc) in out_row.iter_mut().enumerate() {
                                    let ix = (xo * stride[1] + kx) as isize - pw as isize;
                                    if ix >= 0 && (ix as usize) < iw {
                                        *acc += w * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(image_shape(input.rank() == 4, n, oc, oh, ow), out)
}

/// `out[j] = b[j] + Σ_i w[j,i]·in[i]`. A rank-2 `N×IN` input is treated as a
/// batch; any other input whose length equals `IN` is treated as a vector.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "fully_connected";
    let [out_f, in_f] = *weights.shape() else {
        return Err(Error::dim(OP, "weight rank", 2, weights.rank()));
    };
    if bias.len() != out_f {
        return Err(Error::dim(OP, "bias length vs weight axis 0", out_f, bias.len()));
    }
    let (batch, out_shape) = if input.len() == in_f {
        (1, vec![out_f])
    } else if input.rank() == 2 && input.shape()[1] == in_f {
        (input.shape()[0], vec![input.shape()[0], out_f])
    } else {
        return Err(Error::dim(OP, "input features vs weight axis 1", in_f, input.len()));
    };
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(batch * out_f);
    for b in 0..batch {
        let xb = &x[b * in_f..(b + 1) * in_f];
        for j in 0..out_f {
            let row = &w[j * in_f..(j + 1) * in_f];
            let mut acc = bias.data()[j];
            for (wi, xi) in row.iter().zip(xb) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
    Tensor::new(out_shape, out)
}

/// Window maximum without padding. A NaN anywhere in a window makes that
/// output NaN.
pub fn maxpool2d_forward(input: &Tensor, pool: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
    const OP: &str = "maxpool2d";
    let (n, c, ih, iw) = image_dims(OP, input)?;
    if pool[0] == 0 || pool[1] == 0 || stride[0] == 0 || stride[1] == 0 {
        return Err(Error::Config(format!("{OP}: pool {pool:?} and stride {stride:?} must be >= 1")));
    }
    if pool[0] > ih {
        return Err(Error::dim(OP, "height (input vs window)", format!(">= {}", pool[0]), ih));
    }
    if pool[1] > iw {
        return Err(Error::dim(OP, "width (input vs window)", format!(">= {}", pool[1]), iw));
    }
    let oh = (ih - pool[0]) / stride[0] + 1;
    let ow = (iw - pool[1]) / stride[1] + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks_exact(ih * iw) {
        for y in 0..oh {
            for xo in 0..ow {
                let mut m = plane[y * stride[0] * iw + xo * stride[1]];
                for dy in 0..pool[0] {
                    let row = (y * stride[0] + dy) * iw + xo * stride[1];
                    for &v in &plane[row..row + pool[1]] {
                        if v > m || v.is_nan() {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(image_shape(input.rank() == 4, n, c, oh, ow), out)
}

/// Elementwise `max(0, x)`; NaN propagates.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(relu_scalar)
}

#[inline]
pub fn relu_scalar(x: f32) -> f32 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

/// Passes `x` through when `0 ≤ x ≤ threshold` and maps everything else,
/// including NaN and ±Inf, to zero.
pub fn clipped_relu(input: &Tensor, threshold: f32) -> Result<Tensor> {
    check_threshold(threshold)?;
    Ok(input.map(|x| clipped_relu_scalar(x, threshold)))
}

#[inline]
pub fn clipped_relu_scalar(x: f32, threshold: f32) -> f32 {
    if 0.0 <= x && x <= threshold {
        x
    } else {
        0.0
    }
}

pub(crate) fn check_threshold(threshold: f32) -> Result<()> {
    // NaN fails the comparison too.
    if threshold >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("clip threshold must be >= 0, got {threshold}")))
    }
}

/// Outcome of [`classify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub class: usize,
    /// Every logit was NaN, so `class` is the fallback index 0.
    pub degenerate: bool,
}

/// Index of the largest logit, lowest index on ties. NaN logits never win.
pub fn classify(logits: &Tensor) -> Result<Prediction> {
    if logits.rank() != 1 {
        return Err(Error::dim("classify", "logits rank", 1, logits.rank()));
    }
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.data().iter().enumerate() {
        match best {
            _ if v.is_nan() => {}
            Some((_, m)) if v <= m => {}
            _ => best = Some((i, v)),
        }
    }
    Ok(match best {
        Some((class, _)) => Prediction {
            class,
            degenerate: false,
        },
        None => Prediction {
            class: 0,
            degenerate: true,
        },
    })
}
