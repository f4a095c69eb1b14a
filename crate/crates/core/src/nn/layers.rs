//! Layer kernels on channel-major `(C, H, W)` buffers.

use super::{silu, silu_grad, Scalar};

/// Unfolds a padded 3x3 neighbourhood: output is `(cin * 9, h * w)`.
pub fn im2col<S: Scalar>(input: &[S], cin: usize, h: usize, w: usize) -> Vec<S> {
    let hw = h * w;
    let mut cols = vec![S::zero(); cin * 9 * hw];
    for ic in 0..cin {
        let plane = &input[ic * hw..(ic + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ic * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<S: Scalar>(cols: &[S], cin: usize, h: usize, w: usize) -> Vec<S> {
    let hw = h * w;
    let mut out = vec![S::zero(); cin * hw];
    for ic in 0..cin {
        let plane = &mut out[ic * hw..(ic + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ic * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d = *d + *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d = *d + *s),
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `(cout, cin, 3, 3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
}

impl Conv3x3 {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn forward<S: Scalar>(&self, input: &[S], h: usize, w: usize, weight: &[S], bias: &[S]) -> Vec<S> {
        let hw = h * w;
        debug_assert_eq!(input.len(), self.cin * hw);
        let cols = im2col(input, self.cin, h, w);
        let mut out = vec![S::zero(); self.cout * hw];
        for (oc, b) in bias.iter().enumerate() {
            out[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        let k = self.cin * 9;
        S::gemm(
            self.cout,
            k,
            hw,
            weight,
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            S::one(),
            &mut out,
            hw as isize,
        );
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        input: &[S],
        h: usize,
        w: usize,
        weight: &[S],
        grad_out: &[S],
        grad_weight: &mut [S],
        grad_bias: &mut [S],
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let hw = h * w;
        let k = self.cin * 9;
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            *gb = *gb + grad_out[oc * hw..(oc + 1) * hw].iter().copied().sum::<S>();
        }
        let cols = im2col(input, self.cin, h, w);
        // dW (cout, k) += dOut (cout, hw) * cols^T (hw, k)
        S::gemm(
            self.cout,
            hw,
            k,
            grad_out,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            S::one(),
            grad_weight,
            k as isize,
        );
        if !need_input_grad {
            return None;
        }
        // dCols (k, hw) = W^T (k, cout) * dOut (cout, hw)
        let mut grad_cols = vec![S::zero(); k * hw];
        S::gemm(
            k,
            self.cout,
            hw,
            weight,
            (1, k as isize),
            grad_out,
            (hw as isize, 1),
            S::zero(),
            &mut grad_cols,
            hw as isize,
        );
        Some(col2im(&grad_cols, self.cin, h, w))
    }
}

/// Dense layer `y = W x + b` with `W` stored `(out, in)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward<S: Scalar>(&self, x: &[S], weight: &[S], bias: Option<&[S]>) -> Vec<S> {
        (0..self.output)
            .map(|o| {
                let row = &weight[o * self.input..(o + 1) * self.input];
                let acc = row.iter().zip(x).fold(S::zero(), |a, (w, v)| a + *w * *v);
                acc + bias.map_or(S::zero(), |b| b[o])
            })
            .collect()
    }

    /// Accumulates `dW += g x^T`, `db += g` and returns `W^T g`.
    pub fn backward<S: Scalar>(
        &self,
        x: &[S],
        weight: &[S],
        grad_out: &[S],
        grad_weight: &mut [S],
        grad_bias: Option<&mut [S]>,
    ) -> Vec<S> {
        let mut grad_in = vec![S::zero(); self.input];
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &weight[o * self.input..(o + 1) * self.input];
            let grow = &mut grad_weight[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] = grow[i] + g * x[i];
                grad_in[i] = grad_in[i] + g * row[i];
            }
        }
        if let Some(gb) = grad_bias {
            gb.iter_mut().zip(grad_out).for_each(|(b, g)| *b = *b + *g);
        }
        grad_in
    }
}

pub fn silu_forward<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| silu(v)).collect()
}

/// Multiplies the upstream gradient by `silu'(pre)` in place.
pub fn silu_backward<S: Scalar>(pre: &[S], grad: &mut [S]) {
    grad.iter_mut().zip(pre).for_each(|(g, &z)| *g = *g * silu_grad(z));
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias<S: Scalar>(x: &mut [S], bias: &[S], hw: usize) {
    for (c, b) in bias.iter().enumerate() {
        x[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = *v + *b);
    }
}

pub fn channel_sums<S: Scalar>(x: &[S], channels: usize, hw: usize) -> Vec<S> {
    (0..channels)
        .map(|c| x[c * hw..(c + 1) * hw].iter().copied().sum())
        .collect()
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<S: Scalar>(grad: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let src = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of `(c, h, w)` to `(c, 2h, 2w)`.
pub fn upsample2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<S: Scalar>(grad: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let src = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * ow + xx];
            }
        }
    }
    out
}
