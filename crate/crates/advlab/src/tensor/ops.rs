//! Elementwise ops, linear layers, batch norm, stochastic layers, and
//! losses. Convolution lives in `conv.rs`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor, TensorError};

fn same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("add", self, other)?;
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("sub", self, other)?;
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, parents| {
                parents[0].accumulate_grad(g);
                if parents[1].requires_grad() {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    parents[1].accumulate_grad(&neg);
                }
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("mul", self, other)?;
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, parents| {
                if parents[0].requires_grad() {
                    let other = parents[1].data();
                    let dx: Vec<S> = g.iter().zip(other.iter()).map(|(&g, &o)| g * o).collect();
                    parents[0].accumulate_grad(&dx);
                }
                if parents[1].requires_grad() {
                    let this = parents[0].data();
                    let dy: Vec<S> = g.iter().zip(this.iter()).map(|(&g, &t)| g * t).collect();
                    parents[1].accumulate_grad(&dy);
                }
            },
        ))
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let dx: Vec<S> = g.iter().map(|&v| v * factor).collect();
                parents[0].accumulate_grad(&dx);
            },
        )
    }

    pub fn add_scalar(&self, value: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v + value).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            |g, parents| parents[0].accumulate_grad(g),
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&v| v.maximum(S::ZERO))
            .collect();
        let mask: Vec<bool> = self.data().iter().map(|&v| v > S::ZERO).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let dx: Vec<S> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| if m { g } else { S::ZERO })
                    .collect();
                parents[0].accumulate_grad(&dx);
            },
        )
    }

    /// Exact GELU, x·Φ(x) with Φ the standard normal CDF.
    pub fn gelu(&self) -> Tensor<S> {
        let saved = self.to_vec();
        let data: Vec<S> = saved.iter().map(|&v| v * v.normal_cdf()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let dx: Vec<S> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(&g, &x)| g * (x.normal_cdf() + x * x.normal_pdf()))
                    .collect();
                parents[0].accumulate_grad(&dx);
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let sig: Vec<S> = self
            .data()
            .iter()
            .map(|&v| {
                // split by sign so the exponential never overflows
                if v >= S::ZERO {
                    S::ONE / (S::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (S::ONE + e)
                }
            })
            .collect();
        let saved = sig.clone();
        Tensor::from_op(
            sig,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let dx: Vec<S> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(&g, &s)| g * s * (S::ONE - s))
                    .collect();
                parents[0].accumulate_grad(&dx);
            },
        )
    }

    /// Clamp to [lo, hi]; gradient passes through where the input is
    /// inside the bounds (inclusive) and is zero outside.
    pub fn clamp(&self, lo: S, hi: S) -> Result<Tensor<S>, TensorError> {
        if lo > hi {
            return Err(TensorError::InvertedClamp {
                lo: lo.to_f64(),
                hi: hi.to_f64(),
            });
        }
        let mask: Vec<bool> = self.data().iter().map(|&v| v >= lo && v <= hi).collect();
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&v| v.maximum(lo).minimum(hi))
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let dx: Vec<S> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| if m { g } else { S::ZERO })
                    .collect();
                parents[0].accumulate_grad(&dx);
            },
        ))
    }

    /// Elementwise sign with sign(0) = 0. Not differentiable; the result
    /// is a leaf regardless of tracking.
    pub fn sign(&self) -> Tensor<S> {
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&v| {
                if v > S::ZERO {
                    S::ONE
                } else if v < S::ZERO {
                    -S::ONE
                } else {
                    S::ZERO
                }
            })
            .collect();
        Tensor::from_vec(data, self.shape()).expect("same length as input")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>, TensorError> {
        let to: usize = shape.iter().product();
        if to != self.numel() {
            return Err(TensorError::ReshapeMismatch {
                shape: shape.to_vec(),
                to,
                from: self.numel(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g, parents| parents[0].accumulate_grad(g),
        ))
    }

    /// [N, ...] to [N, product of the rest].
    pub fn flatten(&self) -> Result<Tensor<S>, TensorError> {
        if self.shape().is_empty() {
            return Err(TensorError::RankMismatch {
                what: "flatten input",
                expected: 2,
                got: Vec::new(),
            });
        }
        let n = self.shape()[0];
        let rest = self.numel() / n.max(1);
        self.reshape(&[n, rest])
    }

    pub fn sum(&self) -> Tensor<S> {
        let mut acc = S::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(vec![acc], Vec::new(), vec![self.clone()], |g, parents| {
            let dx = vec![g[0]; parents[0].numel()];
            parents[0].accumulate_grad(&dx);
        })
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel().max(1);
        self.sum().scale(S::ONE / S::from_f64(n as f64))
    }

    /// x·wᵀ + b for x of shape [N, F], w of shape [G, F], b of shape [G].
    pub fn linear(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>, TensorError> {
        if self.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                what: "linear input",
                expected: 2,
                got: self.shape().to_vec(),
            });
        }
        if weight.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                what: "linear weight",
                expected: 2,
                got: weight.shape().to_vec(),
            });
        }
        let (n, f) = (self.shape()[0], self.shape()[1]);
        let (g_out, f_w) = (weight.shape()[0], weight.shape()[1]);
        if f != f_w {
            return Err(TensorError::DimMismatch {
                axis: "linear input features vs weight in-features",
                expected: f,
                got: f_w,
            });
        }
        if let Some(b) = bias {
            if b.shape() != [g_out] {
                return Err(TensorError::DimMismatch {
                    axis: "linear bias length vs out-features",
                    expected: g_out,
                    got: b.numel(),
                });
            }
        }

        let mut out = vec![S::ZERO; n * g_out];
        {
            let x = self.data();
            let w = weight.data();
            // out[N,G] = x[N,F] · w[G,F]^T
            unsafe {
                S::gemm(
                    n,
                    f,
                    g_out,
                    S::ONE,
                    x.as_ptr(),
                    f as isize,
                    1,
                    w.as_ptr(),
                    1,
                    f as isize,
                    S::ZERO,
                    out.as_mut_ptr(),
                    g_out as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                let b = b.data();
                for row in out.chunks_exact_mut(g_out) {
                    for (o, &bv) in row.iter_mut().zip(b.iter()) {
                        *o += bv;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![n, g_out],
            parents,
            move |g, parents| {
                let (x_t, w_t) = (&parents[0], &parents[1]);
                if x_t.requires_grad() {
                    let w = w_t.data();
                    let mut dx = vec![S::ZERO; n * f];
                    // dx[N,F] = g[N,G] · w[G,F]
                    unsafe {
                        S::gemm(
                            n,
                            g_out,
                            f,
                            S::ONE,
                            g.as_ptr(),
                            g_out as isize,
                            1,
                            w.as_ptr(),
                            f as isize,
                            1,
                            S::ZERO,
                            dx.as_mut_ptr(),
                            f as isize,
                            1,
                        );
                    }
                    x_t.accumulate_grad(&dx);
                }
                if w_t.requires_grad() {
                    let x = x_t.data();
                    let mut dw = vec![S::ZERO; g_out * f];
                    // dw[G,F] = g[N,G]^T · x[N,F]
                    unsafe {
                        S::gemm(
                            g_out,
                            n,
                            f,
                            S::ONE,
                            g.as_ptr(),
                            1,
                            g_out as isize,
                            x.as_ptr(),
                            f as isize,
                            1,
                            S::ZERO,
                            dw.as_mut_ptr(),
                            f as isize,
                            1,
                        );
                    }
                    w_t.accumulate_grad(&dw);
                }
                if has_bias && parents[2].requires_grad() {
                    let mut db = vec![S::ZERO; g_out];
                    for row in g.chunks_exact(g_out) {
                        for (d, &gv) in db.iter_mut().zip(row.iter()) {
                            *d += gv;
                        }
                    }
                    parents[2].accumulate_grad(&db);
                }
            },
        ))
    }

    /// Batch normalization over [N, C, H, W] with per-channel statistics.
    ///
    /// In training mode the batch is normalized with its own biased
    /// variance and the running buffers move by `momentum` toward the
    /// batch mean and the unbiased batch variance. In eval mode the
    /// running buffers are used and the op is a per-channel affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<S>, TensorError> {
        if self.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                what: "batch norm input",
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
        for (t, axis) in [
            (gamma, "batch norm gamma length vs channels"),
            (beta, "batch norm beta length vs channels"),
            (running_mean, "batch norm running mean length vs channels"),
            (running_var, "batch norm running var length vs channels"),
        ] {
            if t.numel() != c {
                return Err(TensorError::DimMismatch {
                    axis,
                    expected: c,
                    got: t.numel(),
                });
            }
        }
        let plane = h * w;
        let count = n * plane;
        let eps = S::from_f64(eps);

        let (mean, istd) = if training {
            if count <= 1 {
                return Err(TensorError::BatchTooSmall { count });
            }
            let x = self.data();
            let mut mean = vec![S::ZERO; c];
            let mut var = vec![S::ZERO; c];
            for ci in 0..c {
                let mut acc = S::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &x[base..base + plane] {
                        acc += v;
                    }
                }
                let m = acc / S::from_f64(count as f64);
                let mut vacc = S::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &x[base..base + plane] {
                        let d = v - m;
                        vacc += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = vacc / S::from_f64(count as f64);
            }
            drop(x);
            // running stats use the unbiased variance, like the usual
            // deep learning convention
            let mom = S::from_f64(momentum);
            let unbias = S::from_f64(count as f64 / (count as f64 - 1.0));
            {
                let mut rm = running_mean.data_mut();
                let mut rv = running_var.data_mut();
                for ci in 0..c {
                    rm[ci] = (S::ONE - mom) * rm[ci] + mom * mean[ci];
                    rv[ci] = (S::ONE - mom) * rv[ci] + mom * var[ci] * unbias;
                }
            }
            let istd: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
            (mean, istd)
        } else {
            let mean = running_mean.to_vec();
            let istd: Vec<S> = running_var
                .to_vec()
                .iter()
                .map(|&v| S::ONE / (v + eps).sqrt())
                .collect();
            (mean, istd)
        };

        let mut out = vec![S::ZERO; self.numel()];
        {
            let x = self.data();
            let ga = gamma.data();
            let be = beta.data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (m, is, g, b) = (mean[ci], istd[ci], ga[ci], be[ci]);
                    for i in base..base + plane {
                        out[i] = (x[i] - m) * is * g + b;
                    }
                }
            }
        }

        let saved_mean = mean;
        let saved_istd = istd;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, parents| {
                let (x_t, ga_t, be_t) = (&parents[0], &parents[1], &parents[2]);
                let x = x_t.data();
                let ga = ga_t.data();

                // per-channel reductions shared by all three gradients
                let mut sum_g = vec![S::ZERO; c];
                let mut sum_gx = vec![S::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (m, is) = (saved_mean[ci], saved_istd[ci]);
                        let mut sg = S::ZERO;
                        let mut sgx = S::ZERO;
                        for i in base..base + plane {
                            sg += g[i];
                            sgx += g[i] * (x[i] - m) * is;
                        }
                        sum_g[ci] += sg;
                        sum_gx[ci] += sgx;
                    }
                }
                if be_t.requires_grad() {
                    be_t.accumulate_grad(&sum_g);
                }
                if ga_t.requires_grad() {
                    ga_t.accumulate_grad(&sum_gx);
                }
                if x_t.requires_grad() {
                    let mut dx = vec![S::ZERO; x.len()];
                    if training {
                        let cnt = S::from_f64(count as f64);
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let (m, is, gm) = (saved_mean[ci], saved_istd[ci], ga[ci]);
                                let k = gm * is / cnt;
                                for i in base..base + plane {
                                    let xh = (x[i] - m) * is;
                                    dx[i] = k * (cnt * g[i] - sum_g[ci] - xh * sum_gx[ci]);
                                }
                            }
                        }
                    } else {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let k = ga[ci] * saved_istd[ci];
                                for i in base..base + plane {
                                    dx[i] = g[i] * k;
                                }
                            }
                        }
                    }
                    x_t.accumulate_grad(&dx);
                }
            },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate), so the
    /// expectation matches the input. Identity in eval mode.
    pub fn dropout(
        &self,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate { rate });
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let dx: Vec<S> = g.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect();
                parents[0].accumulate_grad(&dx);
            },
        ))
    }

    /// Additive Gaussian noise with the given standard deviation in
    /// training mode; identity in eval mode. Gradient passes through.
    pub fn add_gaussian_noise(
        &self,
        std: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>, TensorError> {
        if std < 0.0 {
            return Err(TensorError::InvalidStd { std });
        }
        if !training || std == 0.0 {
            return Ok(self.clone());
        }
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(rng);
                x + S::from_f64(std * z)
            })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            |g, parents| parents[0].accumulate_grad(g),
        ))
    }
}

/// Mean cross-entropy between logits of shape [N, K] and integer labels,
/// computed via a max-subtracted log-sum-exp.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
) -> Result<Tensor<S>, TensorError> {
    if logits.shape().len() != 2 {
        return Err(TensorError::RankMismatch {
            what: "cross entropy logits",
            expected: 2,
            got: logits.shape().to_vec(),
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(TensorError::DimMismatch {
            axis: "cross entropy labels vs batch",
            expected: n,
            got: labels.len(),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(TensorError::LabelOutOfRange {
                index: i,
                label: l as usize,
                classes: k,
            });
        }
    }

    let x = logits.data();
    let mut probs = vec![S::ZERO; n * k];
    let mut loss = S::ZERO;
    for row in 0..n {
        let xs = &x[row * k..(row + 1) * k];
        let mut m = xs[0];
        for &v in xs {
            m = m.maximum(v);
        }
        let mut denom = S::ZERO;
        for (j, &v) in xs.iter().enumerate() {
            let e = (v - m).exp();
            probs[row * k + j] = e;
            denom += e;
        }
        for p in &mut probs[row * k..(row + 1) * k] {
            *p = *p / denom;
        }
        let z_label = xs[labels[row] as usize] - m;
        loss += denom.ln() - z_label;
    }
    drop(x);
    let loss = loss / S::from_f64(n as f64);

    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        vec![logits.clone()],
        move |g, parents| {
            let scale = g[0] / S::from_f64(n as f64);
            let mut dx = probs.clone();
            for (row, &l) in labels.iter().enumerate() {
                dx[row * k + l as usize] = dx[row * k + l as usize] - S::ONE;
            }
            for v in &mut dx {
                *v = *v * scale;
            }
            parents[0].accumulate_grad(&dx);
        },
    ))
}

/// Mean squared error over all elements of two same-shape tensors.
pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    same_shape("mse", pred, target)?;
    let n = pred.numel().max(1);
    let mut acc = S::ZERO;
    {
        let p = pred.data();
        let t = target.data();
        for (&a, &b) in p.iter().zip(t.iter()) {
            let d = a - b;
            acc += d * d;
        }
    }
    let loss = acc / S::from_f64(n as f64);
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        vec![pred.clone(), target.clone()],
        move |g, parents| {
            let two_over_n = g[0] * S::from_f64(2.0 / n as f64);
            let p = parents[0].data();
            let t = parents[1].data();
            if parents[0].requires_grad() {
                let dp: Vec<S> = p
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| (a - b) * two_over_n)
                    .collect();
                drop(p);
                parents[0].accumulate_grad(&dp);
            }
            if parents[1].requires_grad() {
                let p = parents[0].data();
                let dt: Vec<S> = p
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| (b - a) * two_over_n)
                    .collect();
                drop(p);
                parents[1].accumulate_grad(&dt);
            }
        },
    ))
}
