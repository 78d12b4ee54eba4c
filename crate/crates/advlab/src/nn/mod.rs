//! Model construction for the two architectures: a VGG-style classifier
//! and a convolutional denoising autoencoder, both over 1×32×32 inputs.
//!
//! A [`Model`] is an ordered list of named layers plus a train/eval mode
//! switch and its own seeded RNG for dropout and latent-noise draws.
//! Parameters are exposed as (name, tensor handle) pairs in a stable
//! order, which is what the optimizer and the checkpoint format key on.

pub mod checkpoint;

use std::cell::{Cell, RefCell};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;
use crate::tensor::{Scalar, Tensor, TensorError};

pub const INPUT_CHANNELS: usize = 1;
pub const INPUT_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{field} must all be positive, got {got:?}")]
    ChannelsNotPositive { field: &'static str, got: Vec<usize> },
    #[error("{field} must be non-decreasing, got {got:?}")]
    ChannelsDecreasing { field: &'static str, got: Vec<usize> },
    #[error("hidden dims must be positive, got {got:?}")]
    HiddenNotPositive { got: Vec<usize> },
    #[error("need at least 2 classes, got {got}")]
    TooFewClasses { got: usize },
    #[error("dropout rate {rate} outside [0, 1)")]
    InvalidDropout { rate: f64 },
    #[error("latent dim must be positive")]
    LatentNotPositive,
    #[error("noise std {std} is negative")]
    NegativeNoiseStd { std: f64 },
    #[error("expected {expected} model, got {got}")]
    KindMismatch { expected: ModelKind, got: ModelKind },
    #[error("input batch is empty")]
    EmptyBatch,
    #[error("expected input shape [N, {}, {}, {}], got {got:?}", INPUT_CHANNELS, INPUT_SIDE, INPUT_SIDE)]
    BadInputShape { got: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Autoencoder,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Classifier => "classifier",
            ModelKind::Autoencoder => "autoencoder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Four conv blocks (conv → BN → ReLU, twice, then 2×2 max pool) and a
/// three-layer fully connected head with dropout. Spatial sizes run
/// 32→16→8→4→2, so the flatten width is `block_channels[3] * 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSpec {
    pub block_channels: [usize; 4],
    pub hidden_dims: [usize; 2],
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl ClassifierSpec {
    /// Full-scale profile: 6,004,938 trainable parameters.
    pub fn full() -> Self {
        ClassifierSpec {
            block_channels: [64, 128, 256, 512],
            hidden_dims: [512, 512],
            num_classes: 10,
            dropout_rate: 0.5,
        }
    }

    /// Desk-scale profile for CPU runs: 824,634 trainable parameters.
    pub fn reduced() -> Self {
        ClassifierSpec {
            block_channels: [16, 32, 64, 128],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::ChannelsNotPositive {
                field: "block channels",
                got: self.block_channels.to_vec(),
            });
        }
        if self.block_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(ModelError::ChannelsDecreasing {
                field: "block channels",
                got: self.block_channels.to_vec(),
            });
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(ModelError::HiddenNotPositive {
                got: self.hidden_dims.to_vec(),
            });
        }
        if self.num_classes < 2 {
            return Err(ModelError::TooFewClasses {
                got: self.num_classes,
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidDropout {
                rate: self.dropout_rate,
            });
        }
        Ok(())
    }

    pub fn flatten_width(&self) -> usize {
        self.block_channels[3] * (INPUT_SIDE / 16) * (INPUT_SIDE / 16)
    }
}

/// Three stride-2 3×3 convs down to 4×4, a linear bottleneck with
/// additive Gaussian noise in training, then the mirrored decoder of
/// three stride-2 2×2 transposed convs ending in a sigmoid. Defaults
/// give 660,641 trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderSpec {
    pub conv_channels: [usize; 3],
    pub latent_dim: usize,
    pub noise_std: f64,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            conv_channels: [32, 64, 128],
            latent_dim: 128,
            noise_std: 0.1,
        }
    }
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::ChannelsNotPositive {
                field: "conv channels",
                got: self.conv_channels.to_vec(),
            });
        }
        if self.latent_dim == 0 {
            return Err(ModelError::LatentNotPositive);
        }
        if self.noise_std < 0.0 {
            return Err(ModelError::NegativeNoiseStd {
                std: self.noise_std,
            });
        }
        Ok(())
    }

    /// Flattened size of the 4×4 encoder output.
    pub fn bottleneck_width(&self) -> usize {
        self.conv_channels[2] * (INPUT_SIDE / 8) * (INPUT_SIDE / 8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Classifier(ClassifierSpec),
    Autoencoder(AutoencoderSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Classifier(_) => ModelKind::Classifier,
            ModelSpec::Autoencoder(_) => ModelKind::Autoencoder,
        }
    }
}

enum Layer<S: Scalar> {
    Conv {
        weight: Tensor<S>,
        bias: Tensor<S>,
        stride: usize,
        padding: usize,
    },
    ConvT {
        weight: Tensor<S>,
        bias: Tensor<S>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: Tensor<S>,
        beta: Tensor<S>,
        running_mean: Tensor<S>,
        running_var: Tensor<S>,
    },
    Linear {
        weight: Tensor<S>,
        bias: Tensor<S>,
    },
    Relu,
    Gelu,
    Sigmoid,
    MaxPool {
        window: usize,
    },
    Dropout {
        rate: f64,
    },
    GaussianNoise {
        std: f64,
    },
    Flatten,
    Reshape {
        channels: usize,
        side: usize,
    },
}

struct Named<S: Scalar> {
    name: String,
    layer: Layer<S>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// He-uniform draw: U(−b, b) with b = sqrt(6 / fan_in).
fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data: Vec<S> = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(data, shape).expect("shape matches draw count")
}

fn conv_init<S: Scalar>(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    rng: &mut ChaCha8Rng,
) -> Layer<S> {
    Layer::Conv {
        weight: he_uniform(&[cout, cin, k, k], cin * k * k, rng).with_grad(),
        bias: Tensor::zeros(&[cout]).with_grad(),
        stride,
        padding,
    }
}

fn convt_init<S: Scalar>(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Layer<S> {
    Layer::ConvT {
        weight: he_uniform(&[cin, cout, k, k], cin * k * k, rng).with_grad(),
        bias: Tensor::zeros(&[cout]).with_grad(),
        stride,
        padding: 0,
    }
}

fn linear_init<S: Scalar>(fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Layer<S> {
    Layer::Linear {
        weight: he_uniform(&[fout, fin], fin, rng).with_grad(),
        bias: Tensor::zeros(&[fout]).with_grad(),
    }
}

fn batchnorm_init<S: Scalar>(channels: usize) -> Layer<S> {
    Layer::BatchNorm {
        gamma: Tensor::full(&[channels], S::ONE).with_grad(),
        beta: Tensor::zeros(&[channels]).with_grad(),
        running_mean: Tensor::zeros(&[channels]),
        running_var: Tensor::full(&[channels], S::ONE),
    }
}

pub struct Model<S: Scalar = f32> {
    spec: ModelSpec,
    layers: Vec<Named<S>>,
    mode: Cell<Mode>,
    rng: RefCell<ChaCha8Rng>,
}

/// Layer sequence per the classifier spec. Weight draws happen in layer
/// order, so a given (spec, seed) pair always builds the same model.
pub fn build_classifier<S: Scalar>(
    spec: &ClassifierSpec,
    seed: u64,
) -> Result<Model<S>, ModelError> {
    spec.validate()?;
    let mut r = rng::stream(seed, rng::INIT);
    let mut layers: Vec<Named<S>> = Vec::new();
    let mut push = |name: String, layer: Layer<S>| layers.push(Named { name, layer });

    let mut cin = INPUT_CHANNELS;
    for (bi, &cout) in spec.block_channels.iter().enumerate() {
        let b = bi + 1;
        push(format!("block{b}.conv1"), conv_init(cin, cout, 3, 1, 1, &mut r));
        push(format!("block{b}.bn1"), batchnorm_init(cout));
        push(format!("block{b}.relu1"), Layer::Relu);
        push(format!("block{b}.conv2"), conv_init(cout, cout, 3, 1, 1, &mut r));
        push(format!("block{b}.bn2"), batchnorm_init(cout));
        push(format!("block{b}.relu2"), Layer::Relu);
        push(format!("block{b}.pool"), Layer::MaxPool { window: 2 });
        cin = cout;
    }
    push("head.flatten".into(), Layer::Flatten);
    let mut fin = spec.flatten_width();
    for (hi, &h) in spec.hidden_dims.iter().enumerate() {
        let i = hi + 1;
        push(format!("head.fc{i}"), linear_init(fin, h, &mut r));
        push(format!("head.relu{i}"), Layer::Relu);
        push(
            format!("head.drop{i}"),
            Layer::Dropout {
                rate: spec.dropout_rate,
            },
        );
        fin = h;
    }
    push(
        format!("head.fc{}", spec.hidden_dims.len() + 1),
        linear_init(fin, spec.num_classes, &mut r),
    );

    Ok(Model {
        spec: ModelSpec::Classifier(spec.clone()),
        layers,
        mode: Cell::new(Mode::Train),
        rng: RefCell::new(rng::stream(seed, rng::DROPOUT)),
    })
}

/// Layer sequence per the autoencoder spec: GELU after every encoder
/// conv with BN on the second, linear bottleneck with additive noise,
/// then BN + GELU on the first two transposed convs and a final sigmoid.
pub fn build_autoencoder<S: Scalar>(
    spec: &AutoencoderSpec,
    seed: u64,
) -> Result<Model<S>, ModelError> {
    spec.validate()?;
    let mut r = rng::stream(seed, rng::INIT);
    let [c0, c1, c2] = spec.conv_channels;
    let mut layers: Vec<Named<S>> = Vec::new();
    let mut push = |name: &str, layer: Layer<S>| layers.push(Named {
        name: name.to_string(),
        layer,
    });

    push("enc.conv1", conv_init(INPUT_CHANNELS, c0, 3, 2, 1, &mut r));
    push("enc.gelu1", Layer::Gelu);
    push("enc.conv2", conv_init(c0, c1, 3, 2, 1, &mut r));
    push("enc.bn", batchnorm_init(c1));
    push("enc.gelu2", Layer::Gelu);
    push("enc.conv3", conv_init(c1, c2, 3, 2, 1, &mut r));
    push("enc.gelu3", Layer::Gelu);
    push("enc.flatten", Layer::Flatten);
    push(
        "enc.fc",
        linear_init(spec.bottleneck_width(), spec.latent_dim, &mut r),
    );
    push(
        "enc.noise",
        Layer::GaussianNoise {
            std: spec.noise_std,
        },
    );
    push(
        "dec.fc",
        linear_init(spec.latent_dim, spec.bottleneck_width(), &mut r),
    );
    push("dec.gelu0", Layer::Gelu);
    push(
        "dec.reshape",
        Layer::Reshape {
            channels: c2,
            side: INPUT_SIDE / 8,
        },
    );
    push("dec.convt1", convt_init(c2, c1, 2, 2, &mut r));
    push("dec.bn1", batchnorm_init(c1));
    push("dec.gelu1", Layer::Gelu);
    push("dec.convt2", convt_init(c1, c0, 2, 2, &mut r));
    push("dec.bn2", batchnorm_init(c0));
    push("dec.gelu2", Layer::Gelu);
    push("dec.convt3", convt_init(c0, INPUT_CHANNELS, 2, 2, &mut r));
    push("dec.sigmoid", Layer::Sigmoid);

    Ok(Model {
        spec: ModelSpec::Autoencoder(spec.clone()),
        layers,
        mode: Cell::new(Mode::Train),
        rng: RefCell::new(rng::stream(seed, rng::NOISE)),
    })
}

impl<S: Scalar> Model<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn mode(&self) -> Mode {
        self.mode.get()
    }

    pub fn set_train(&self) {
        self.mode.set(Mode::Train);
    }

    pub fn set_eval(&self) {
        self.mode.set(Mode::Eval);
    }

    /// Reset the dropout/noise stream, pinning the stochastic part of
    /// training to a seed.
    pub fn reseed(&self, seed: u64) {
        let purpose = match self.kind() {
            ModelKind::Classifier => rng::DROPOUT,
            ModelKind::Autoencoder => rng::NOISE,
        };
        *self.rng.borrow_mut() = rng::stream(seed, purpose);
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<(), ModelError> {
        let shape = input.shape();
        if shape.len() != 4
            || shape[1] != INPUT_CHANNELS
            || shape[2] != INPUT_SIDE
            || shape[3] != INPUT_SIDE
        {
            return Err(ModelError::BadInputShape {
                got: shape.to_vec(),
            });
        }
        if shape[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        Ok(())
    }

    fn apply(&self, named: &Named<S>, x: Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let training = self.mode.get() == Mode::Train;
        let out = match &named.layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
            } => x.conv2d(weight, Some(bias), *stride, *padding)?,
            Layer::ConvT {
                weight,
                bias,
                stride,
                padding,
            } => x.conv_transpose2d(weight, Some(bias), *stride, *padding)?,
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => x.batchnorm2d(
                gamma,
                beta,
                running_mean,
                running_var,
                training,
                BN_MOMENTUM,
                BN_EPS,
            )?,
            Layer::Linear { weight, bias } => x.linear(weight, Some(bias))?,
            Layer::Relu => x.relu(),
            Layer::Gelu => x.gelu(),
            Layer::Sigmoid => x.sigmoid(),
            Layer::MaxPool { window } => x.maxpool2d(*window)?,
            Layer::Dropout { rate } => x.dropout(*rate, training, &mut self.rng.borrow_mut())?,
            Layer::GaussianNoise { std } => {
                x.add_gaussian_noise(*std, training, &mut self.rng.borrow_mut())?
            }
            Layer::Flatten => x.flatten()?,
            Layer::Reshape { channels, side } => {
                let n = x.shape()[0];
                x.reshape(&[n, *channels, *side, *side])?
            }
        };
        Ok(out)
    }

    /// Logits for a classifier, reconstruction for an autoencoder.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for named in &self.layers {
            x = self.apply(named, x)?;
        }
        Ok(x)
    }

    /// Latent representation of an autoencoder, shape [N, latent_dim],
    /// including the training-mode noise injection.
    pub fn encode(&self, input: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let ModelSpec::Autoencoder(_) = &self.spec else {
            return Err(ModelError::KindMismatch {
                expected: ModelKind::Autoencoder,
                got: self.kind(),
            });
        };
        self.check_input(input)?;
        let mut x = input.clone();
        for named in &self.layers {
            x = self.apply(named, x)?;
            if matches!(named.layer, Layer::GaussianNoise { .. }) {
                return Ok(x);
            }
        }
        unreachable!("autoencoder always contains a noise layer");
    }

    /// Trainable parameters as (name, handle) pairs in a stable order.
    pub fn parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for named in &self.layers {
            let n = &named.name;
            match &named.layer {
                Layer::Conv { weight, bias, .. }
                | Layer::ConvT { weight, bias, .. }
                | Layer::Linear { weight, bias } => {
                    out.push((format!("{n}.weight"), weight.clone()));
                    out.push((format!("{n}.bias"), bias.clone()));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("{n}.gamma"), gamma.clone()));
                    out.push((format!("{n}.beta"), beta.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state: batch norm running statistics.
    pub fn buffers(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for named in &self.layers {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &named.layer
            {
                out.push((format!("{}.running_mean", named.name), running_mean.clone()));
                out.push((format!("{}.running_var", named.name), running_var.clone()));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for (_, p) in self.parameters() {
            p.set_requires_grad(flag);
        }
    }

    /// Deep copy: fresh parameter and buffer storage, same spec, mode,
    /// and RNG state.
    pub fn clone_detached(&self) -> Model<S> {
        let layers = self
            .layers
            .iter()
            .map(|named| Named {
                name: named.name.clone(),
                layer: match &named.layer {
                    Layer::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => Layer::Conv {
                        weight: weight.detach().with_grad(),
                        bias: bias.detach().with_grad(),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::ConvT {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => Layer::ConvT {
                        weight: weight.detach().with_grad(),
                        bias: bias.detach().with_grad(),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => Layer::BatchNorm {
                        gamma: gamma.detach().with_grad(),
                        beta: beta.detach().with_grad(),
                        running_mean: running_mean.detach(),
                        running_var: running_var.detach(),
                    },
                    Layer::Linear { weight, bias } => Layer::Linear {
                        weight: weight.detach().with_grad(),
                        bias: bias.detach().with_grad(),
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::Gelu => Layer::Gelu,
                    Layer::Sigmoid => Layer::Sigmoid,
                    Layer::MaxPool { window } => Layer::MaxPool { window: *window },
                    Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                    Layer::GaussianNoise { std } => Layer::GaussianNoise { std: *std },
                    Layer::Flatten => Layer::Flatten,
                    Layer::Reshape { channels, side } => Layer::Reshape {
                        channels: *channels,
                        side: *side,
                    },
                },
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            layers,
            mode: Cell::new(self.mode.get()),
            rng: RefCell::new(self.rng.borrow().clone()),
        }
    }

    /// Overwrite a parameter or buffer by name; used by checkpoint load.
    fn set_named(&self, name: &str, data: Vec<S>, shape: &[usize]) -> Result<(), String> {
        for (pname, t) in self.parameters().into_iter().chain(self.buffers()) {
            if pname == name {
                if t.shape() != shape {
                    return Err(format!(
                        "shape {:?} does not match stored {:?}",
                        t.shape(),
                        shape
                    ));
                }
                *t.data_mut() = data;
                return Ok(());
            }
        }
        Err("no such parameter".to_string())
    }
}
