//! Shared fixtures: naive reference implementations written as plain
//! loops, tiny model specs, and synthetic datasets. The references
//! trade speed for obviousness so the fast kernels have something
//! independent to be checked against.

#![allow(dead_code)]

use std::path::PathBuf;

use advlab::data::{Corpus, Dataset, Split};
use advlab::nn::{AutoencoderSpec, ClassifierSpec};
use advlab::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Repository data directory with the committed corpora.
pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Plain six-loop convolution, NCHW, zero padding.
pub fn conv2d_naive(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = (yo * stride + ky) as isize - pad as isize;
                                let xi = (xo * stride + kx) as isize - pad as isize;
                                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + yi as usize) * w + xi as usize];
                                let wv = weight[((oi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + yo) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Transposed convolution as an explicit scatter-add of the input into
/// the output, weight layout [Cin, Cout, kh, kw].
pub fn conv_transpose2d_naive(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * cout * oh * ow];
    if let Some(b) = bias {
        for ni in 0..n {
            for co in 0..cout {
                for p in 0..oh * ow {
                    out[(ni * cout + co) * oh * ow + p] = b[co];
                }
            }
        }
    }
    for ni in 0..n {
        for ci in 0..cin {
            for yi in 0..h {
                for xi in 0..w {
                    let xv = x[((ni * cin + ci) * h + yi) * w + xi];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yo = (yi * stride + ky) as isize - pad as isize;
                                let xo = (xi * stride + kx) as isize - pad as isize;
                                if yo < 0 || xo < 0 || yo >= oh as isize || xo >= ow as isize {
                                    continue;
                                }
                                let wv = weight[((ci * cout + co) * kh + ky) * kw + kx];
                                out[((ni * cout + co) * oh + yo as usize) * ow + xo as usize] +=
                                    xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Non-overlapping max pooling, the windowed maximum written directly.
pub fn maxpool2d_naive(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = x[((ni * c + ci) * h + yo * window + ky) * w
                                + xo * window
                                + kx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((ni * c + ci) * oh + yo) * ow + xo] = best;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Corner-aligned bilinear interpolation written per output pixel from
/// the textbook weights.
pub fn bilinear_naive(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let step = |inn: usize, out: usize| -> f64 {
        if out <= 1 {
            0.0
        } else {
            (inn - 1) as f64 / (out - 1) as f64
        }
    };
    let sy_step = step(in_h, out_h);
    let sx_step = step(in_w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let sy = i as f64 * sy_step;
            let sx = j as f64 * sx_step;
            let y0 = (sy.floor() as usize).min(in_h - 2);
            let x0 = (sx.floor() as usize).min(in_w - 2);
            let dy = sy - y0 as f64;
            let dx = sx - x0 as f64;
            let v = src[y0 * in_w + x0] * (1.0 - dy) * (1.0 - dx)
                + src[y0 * in_w + x0 + 1] * (1.0 - dy) * dx
                + src[(y0 + 1) * in_w + x0] * dy * (1.0 - dx)
                + src[(y0 + 1) * in_w + x0 + 1] * dy * dx;
            out.push(v);
        }
    }
    out
}

/// Small enough to train inside a test, still the full architecture.
pub fn tiny_classifier_spec() -> ClassifierSpec {
    ClassifierSpec {
        block_channels: [2, 2, 4, 4],
        hidden_dims: [16, 16],
        num_classes: 10,
        dropout_rate: 0.5,
    }
}

pub fn tiny_autoencoder_spec() -> AutoencoderSpec {
    AutoencoderSpec {
        conv_channels: [4, 8, 8],
        latent_dim: 16,
        noise_std: 0.1,
    }
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn uniform_vec_f32(rng: &mut ChaCha8Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Balanced synthetic dataset: smooth pseudo-random images in [0, 1],
/// labels cycling through the classes.
pub fn synthetic_dataset(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = advlab::rng::stream(seed, 90);
    let pixels = uniform_vec_f32(&mut rng, n * side * side, 0.0, 1.0);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    Dataset::from_parts(
        Tensor::from_vec(pixels, &[n, 1, side, side]).unwrap(),
        labels,
        Split::Train,
        Corpus::Mnist,
    )
    .unwrap()
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{what}: {actual} vs {expected} (tol {tol})"
    );
}

pub fn assert_all_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{what}[{i}]: {a} vs {e} (tol {tol})"
        );
    }
}
