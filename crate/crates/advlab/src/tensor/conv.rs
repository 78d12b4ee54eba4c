//! Convolution, transposed convolution, and max pooling.
//!
//! conv2d lowers each sample to a column matrix (im2col) and runs one
//! GEMM per sample, writing straight into NCHW output. The backward
//! passes reuse the same two primitives: input gradients are a GEMM
//! followed by col2im scatter-add, weight gradients are a GEMM against
//! the recomputed column matrix. Transposed convolution is the adjoint
//! of convolution, so its forward is conv's backward-input kernel and
//! vice versa, with the weight laid out as [Cin, Cout, Kh, Kw].

use super::{Scalar, Tensor, TensorError};

fn out_dim(
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let padded = (input + 2 * padding) as i64;
    let computed = (padded - kernel as i64) / stride as i64 + 1;
    if kernel as i64 > padded || computed < 1 {
        return Err(TensorError::OutputCollapsed {
            axis,
            computed: computed.min(0),
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok(computed as usize)
}

fn transpose_out_dim(
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let computed = (input as i64 - 1) * stride as i64 - 2 * padding as i64 + kernel as i64;
    if computed < 1 {
        return Err(TensorError::OutputCollapsed {
            axis,
            computed,
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok(computed as usize)
}

/// Geometry of one conv application, shared by forward and backward.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn ohow(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gather one sample's patches into col of shape [C*Kh*Kw, Oh*Ow].
/// Out-of-bounds taps read as zero (zero padding).
fn im2col<S: Scalar>(x: &[S], g: Geom, col: &mut [S]) {
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.ckk() * g.ohow());
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * g.ohow()..(row + 1) * g.ohow()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as i64 - g.pad as i64;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as i64 {
                        dst_row.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as i64 - g.pad as i64;
                        *d = if ix < 0 || ix >= g.w as i64 {
                            S::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of im2col: scatter-add col of shape [C*Kh*Kw, Oh*Ow] back
/// into one sample's [C, H, W] buffer.
fn col2im_accum<S: Scalar>(col: &[S], g: Geom, x: &mut [S]) {
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.ckk() * g.ohow());
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * g.ohow()..(row + 1) * g.ohow()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as i64 - g.pad as i64;
                    if iy < 0 || iy >= g.h as i64 {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as i64 - g.pad as i64;
                        if ix >= 0 && ix < g.w as i64 {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// y[n] = w[O, C*Kh*Kw] · col(x[n]) for every sample; col buffer reused.
fn conv_apply<S: Scalar>(x: &[S], w: &[S], n: usize, o: usize, g: Geom, out: &mut [S]) {
    let (ckk, ohow) = (g.ckk(), g.ohow());
    let sample = g.c * g.h * g.w;
    let mut col = vec![S::ZERO; ckk * ohow];
    for ni in 0..n {
        im2col(&x[ni * sample..(ni + 1) * sample], g, &mut col);
        unsafe {
            S::gemm(
                o,
                ckk,
                ohow,
                S::ONE,
                w.as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                ohow as isize,
                1,
                S::ZERO,
                out[ni * o * ohow..].as_mut_ptr(),
                ohow as isize,
                1,
            );
        }
    }
}

/// dx[n] = col2im(wᵀ · dy[n]) for every sample: the adjoint map of
/// `conv_apply`, also the forward pass of transposed convolution.
fn conv_apply_adjoint<S: Scalar>(dy: &[S], w: &[S], n: usize, o: usize, g: Geom, dx: &mut [S]) {
    let (ckk, ohow) = (g.ckk(), g.ohow());
    let sample = g.c * g.h * g.w;
    let mut col = vec![S::ZERO; ckk * ohow];
    for ni in 0..n {
        unsafe {
            S::gemm(
                ckk,
                o,
                ohow,
                S::ONE,
                w.as_ptr(),
                1,
                ckk as isize,
                dy[ni * o * ohow..].as_ptr(),
                ohow as isize,
                1,
                S::ZERO,
                col.as_mut_ptr(),
                ohow as isize,
                1,
            );
        }
        col2im_accum(&col, g, &mut dx[ni * sample..(ni + 1) * sample]);
    }
}

/// dw[O, C*Kh*Kw] = Σ_n dy[n] · col(x[n])ᵀ.
fn conv_weight_grad<S: Scalar>(x: &[S], dy: &[S], n: usize, o: usize, g: Geom, dw: &mut [S]) {
    let (ckk, ohow) = (g.ckk(), g.ohow());
    let sample = g.c * g.h * g.w;
    let mut col = vec![S::ZERO; ckk * ohow];
    for ni in 0..n {
        im2col(&x[ni * sample..(ni + 1) * sample], g, &mut col);
        unsafe {
            S::gemm(
                o,
                ohow,
                ckk,
                S::ONE,
                dy[ni * o * ohow..].as_ptr(),
                ohow as isize,
                1,
                col.as_ptr(),
                1,
                ohow as isize,
                S::ONE,
                dw.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }
}

fn add_channel_bias<S: Scalar>(out: &mut [S], b: &[S], n: usize, o: usize, plane: usize) {
    for ni in 0..n {
        for (oi, &bv) in b.iter().enumerate().take(o) {
            let base = (ni * o + oi) * plane;
            for v in &mut out[base..base + plane] {
                *v += bv;
            }
        }
    }
}

fn channel_bias_grad<S: Scalar>(g: &[S], n: usize, o: usize, plane: usize) -> Vec<S> {
    let mut db = vec![S::ZERO; o];
    for ni in 0..n {
        for (oi, d) in db.iter_mut().enumerate() {
            let base = (ni * o + oi) * plane;
            for &v in &g[base..base + plane] {
                *d += v;
            }
        }
    }
    db
}

impl<S: Scalar> Tensor<S> {
    /// 2D convolution with zero padding.
    ///
    /// Input [N, C, H, W], weight [O, C, Kh, Kw], optional bias [O].
    /// Output spatial size is floor((dim + 2*padding - kernel)/stride)+1.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>, TensorError> {
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        if self.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                what: "conv input",
                expected: 4,
                got: self.shape().to_vec(),
            });
        }
        if weight.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                what: "conv weight",
                expected: 4,
                got: weight.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (o, wc, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wc != c {
            return Err(TensorError::DimMismatch {
                axis: "conv input channels vs weight in-channels",
                expected: c,
                got: wc,
            });
        }
        if let Some(b) = bias {
            if b.numel() != o {
                return Err(TensorError::DimMismatch {
                    axis: "conv bias length vs out-channels",
                    expected: o,
                    got: b.numel(),
                });
            }
        }
        let oh = out_dim("height", h, kh, stride, padding)?;
        let ow = out_dim("width", w, kw, stride, padding)?;
        let geom = Geom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };

        let mut out = vec![S::ZERO; n * o * oh * ow];
        conv_apply(&self.data(), &weight.data(), n, o, geom, &mut out);
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.data(), n, o, oh * ow);
        }

        let mut parents = vec![self.clone(), weight.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![n, o, oh, ow],
            parents,
            move |g, parents| {
                let (x_t, w_t) = (&parents[0], &parents[1]);
                if x_t.requires_grad() {
                    let mut dx = vec![S::ZERO; n * geom.c * geom.h * geom.w];
                    conv_apply_adjoint(g, &w_t.data(), n, o, geom, &mut dx);
                    x_t.accumulate_grad(&dx);
                }
                if w_t.requires_grad() {
                    let mut dw = vec![S::ZERO; o * geom.ckk()];
                    conv_weight_grad(&x_t.data(), g, n, o, geom, &mut dw);
                    w_t.accumulate_grad(&dw);
                }
                if has_bias && parents[2].requires_grad() {
                    parents[2].accumulate_grad(&channel_bias_grad(g, n, o, geom.ohow()));
                }
            },
        ))
    }

    /// Transposed 2D convolution (the adjoint of `conv2d`), used for
    /// learned upsampling.
    ///
    /// Input [N, Cin, H, W], weight [Cin, Cout, Kh, Kw], optional bias
    /// [Cout]. Output spatial size is (dim-1)*stride - 2*padding + kernel.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>, TensorError> {
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        if self.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                what: "transposed conv input",
                expected: 4,
                got: self.shape().to_vec(),
            });
        }
        if weight.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                what: "transposed conv weight",
                expected: 4,
                got: weight.shape().to_vec(),
            });
        }
        let (n, ci, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (wci, co, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wci != ci {
            return Err(TensorError::DimMismatch {
                axis: "transposed conv input channels vs weight in-channels",
                expected: ci,
                got: wci,
            });
        }
        if let Some(b) = bias {
            if b.numel() != co {
                return Err(TensorError::DimMismatch {
                    axis: "transposed conv bias length vs out-channels",
                    expected: co,
                    got: b.numel(),
                });
            }
        }
        let oh = transpose_out_dim("height", h, kh, stride, padding)?;
        let ow = transpose_out_dim("width", w, kw, stride, padding)?;
        // the output plays the role of the convolution input, so the
        // shared geometry is phrased on [Cout, Oh, Ow]
        let geom = Geom {
            c: co,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad: padding,
            oh: h,
            ow: w,
        };

        let mut out = vec![S::ZERO; n * co * oh * ow];
        conv_apply_adjoint(&self.data(), &weight.data(), n, ci, geom, &mut out);
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.data(), n, co, oh * ow);
        }

        let mut parents = vec![self.clone(), weight.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![n, co, oh, ow],
            parents,
            move |g, parents| {
                let (x_t, w_t) = (&parents[0], &parents[1]);
                if x_t.requires_grad() {
                    let mut dx = vec![S::ZERO; n * ci * h * w];
                    conv_apply(g, &w_t.data(), n, ci, geom, &mut dx);
                    x_t.accumulate_grad(&dx);
                }
                if w_t.requires_grad() {
                    let mut dw = vec![S::ZERO; ci * geom.ckk()];
                    conv_weight_grad(g, &x_t.data(), n, ci, geom, &mut dw);
                    w_t.accumulate_grad(&dw);
                }
                if has_bias && parents[2].requires_grad() {
                    parents[2].accumulate_grad(&channel_bias_grad(g, n, co, oh * ow));
                }
            },
        ))
    }

    /// Max pooling with a square window and stride equal to the window.
    /// Trailing rows/columns that do not fill a window are dropped.
    /// Gradient routes to the first maximum in scan order on ties.
    pub fn maxpool2d(&self, window: usize) -> Result<Tensor<S>, TensorError> {
        if window == 0 {
            return Err(TensorError::ZeroWindow);
        }
        if self.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                what: "max pool input",
                expected: 4,
                got: self.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let oh = h / window;
        let ow = w / window;
        if oh == 0 || ow == 0 {
            return Err(TensorError::OutputCollapsed {
                axis: if oh == 0 { "height" } else { "width" },
                computed: 0,
                input: if oh == 0 { h } else { w },
                kernel: window,
                stride: window,
                padding: 0,
            });
        }

        let x = self.data();
        let mut out = vec![S::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane[oy * window * w + ox * window];
                    let mut best_at = oy * window * w + ox * window;
                    for ky in 0..window {
                        let rbase = (oy * window + ky) * w + ox * window;
                        for kx in 0..window {
                            let v = plane[rbase + kx];
                            if v > best {
                                best = v;
                                best_at = rbase + kx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = (nc * h * w + best_at) as u32;
                }
            }
        }
        drop(x);

        let in_len = self.numel();
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            vec![self.clone()],
            move |g, parents| {
                let mut dx = vec![S::ZERO; in_len];
                for (&gv, &at) in g.iter().zip(argmax.iter()) {
                    dx[at as usize] += gv;
                }
                parents[0].accumulate_grad(&dx);
            },
        ))
    }
}
