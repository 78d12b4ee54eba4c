//! White-box evasion attacks: FGSM and projected gradient descent.
//!
//! Both attacks perturb inputs along the sign of the input gradient of
//! the cross-entropy loss, keep the perturbation inside the L∞ ball of
//! radius ε around the original image, and clamp to the valid pixel
//! range [0, 1]. A zero gradient component contributes a zero step, so
//! ε = 0 returns the input bit for bit.
//!
//! FGSM is the single-step special case: PGD with one step, no random
//! start, and a step size of at least ε produces bitwise identical
//! output, because both run the same step/project/clamp kernel.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::nn::{Mode, Model, ModelError, ModelKind};
use crate::rng;
use crate::tensor::{softmax_cross_entropy, Tensor, TensorError};

/// IDX-style magic for float32 payloads of rank 3: type byte 0x0D,
/// three dimensions.
pub const F32_IMAGES_MAGIC: u32 = 0x0000_0D03;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("epsilon {eps} must be finite and non-negative")]
    InvalidEpsilon { eps: f32 },
    #[error("step size {alpha} must be finite and positive")]
    InvalidAlpha { alpha: f32 },
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("attacks need the model in eval mode")]
    ModelInTrainMode,
    #[error("gradient did not reach the input")]
    NoInputGradient,
    #[error("unknown attack family {got:?}, expected fgsm or pgd")]
    UnknownFamily { got: String },
    #[error("manifest is missing key {key:?}")]
    ManifestMissingKey { key: &'static str },
    #[error("manifest value for {key:?}: {detail}")]
    ManifestBadValue { key: &'static str, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    Fgsm,
    Pgd,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
        })
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, AttackError> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "pgd" => Ok(AttackFamily::Pgd),
            other => Err(AttackError::UnknownFamily {
                got: other.to_string(),
            }),
        }
    }
}

/// Everything needed to reproduce an attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f32,
    /// Per-iteration step size; only PGD consults it.
    pub alpha: f32,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> AttackConfig {
        AttackConfig {
            family: AttackFamily::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            seed: 0,
        }
    }

    /// PGD defaults: 40 steps, α = max(ε/10, 0.01), uniform random
    /// start inside the ε ball.
    pub fn pgd(epsilon: f32) -> AttackConfig {
        AttackConfig {
            family: AttackFamily::Pgd,
            epsilon,
            alpha: (epsilon / 10.0).max(0.01),
            steps: 40,
            random_start: true,
            seed: 0,
        }
    }

    /// Whether α · steps reaches the ball boundary from the center.
    pub fn budget_covers_ball(&self) -> bool {
        self.alpha as f64 * self.steps as f64 >= self.epsilon as f64
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(AttackError::InvalidEpsilon { eps: self.epsilon });
        }
        if self.steps == 0 {
            return Err(AttackError::ZeroSteps);
        }
        if self.family == AttackFamily::Pgd {
            if !self.alpha.is_finite() || self.alpha <= 0.0 {
                return Err(AttackError::InvalidAlpha { alpha: self.alpha });
            }
            if !self.budget_covers_ball() {
                log::warn!(
                    "pgd step budget {} x {} = {} cannot reach the epsilon ball boundary {}",
                    self.alpha,
                    self.steps,
                    self.alpha as f64 * self.steps as f64,
                    self.epsilon
                );
            }
        }
        Ok(())
    }
}

/// Anything that maps an image batch to class logits. Implemented by
/// classifier [`Model`]s; tests substitute closed-form models.
pub trait Classifier {
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, ModelError>;

    /// Stochastic layers must be off while attacking.
    fn is_eval(&self) -> bool {
        true
    }
}

impl Classifier for Model<f32> {
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        if self.kind() != ModelKind::Classifier {
            return Err(ModelError::KindMismatch {
                expected: ModelKind::Classifier,
                got: self.kind(),
            });
        }
        self.forward(images)
    }

    fn is_eval(&self) -> bool {
        self.mode() == Mode::Eval
    }
}

/// Turns off parameter gradients for the scope, restoring the previous
/// flags on drop; attacks only need gradients with respect to inputs.
pub struct FreezeGuard<'a> {
    params: Vec<(Tensor<f32>, bool)>,
    _model: &'a Model<f32>,
}

impl<'a> FreezeGuard<'a> {
    pub fn new(model: &'a Model<f32>) -> FreezeGuard<'a> {
        let params = model
            .parameters()
            .into_iter()
            .map(|(_, p)| {
                let was = p.requires_grad();
                p.set_requires_grad(false);
                (p, was)
            })
            .collect();
        FreezeGuard {
            params,
            _model: model,
        }
    }
}

impl Drop for FreezeGuard<'_> {
    fn drop(&mut self) {
        for (p, was) in &self.params {
            p.set_requires_grad(*was);
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed gradient step from `current`, projected onto the ε ball
/// around `origin` and clamped to [0, 1]. Both attacks run exactly this
/// code, which is what makes FGSM a bitwise special case of PGD.
pub(crate) fn step_project_clamp(
    current: &[f32],
    grad: &[f32],
    step: f32,
    origin: &[f32],
    eps: f32,
) -> Vec<f32> {
    current
        .iter()
        .zip(grad)
        .zip(origin)
        .map(|((&x, &g), &x0)| {
            let v = x + step * sign(g);
            let v = v.max(x0 - eps).min(x0 + eps);
            v.max(0.0).min(1.0)
        })
        .collect()
}

/// Input gradient of mean cross-entropy at `pixels`.
fn input_gradient<C: Classifier + ?Sized>(
    model: &C,
    pixels: &[f32],
    shape: &[usize],
    labels: &[u8],
) -> Result<Vec<f32>, AttackError> {
    let x = Tensor::from_vec(pixels.to_vec(), shape)?.with_grad();
    let logits = model.logits(&x)?;
    let loss = softmax_cross_entropy(&logits, labels)?;
    loss.backward()?;
    x.grad().ok_or(AttackError::NoInputGradient)
}

fn check_eval<C: Classifier + ?Sized>(model: &C) -> Result<(), AttackError> {
    if model.is_eval() {
        Ok(())
    } else {
        Err(AttackError::ModelInTrainMode)
    }
}

/// Fast gradient sign method: x + ε · sign(∇ₓ loss), clamped to [0, 1].
pub fn fgsm<C: Classifier + ?Sized>(
    model: &C,
    images: &Tensor<f32>,
    labels: &[u8],
    epsilon: f32,
) -> Result<Tensor<f32>, AttackError> {
    let cfg = AttackConfig::fgsm(epsilon);
    cfg.validate()?;
    check_eval(model)?;
    let x0 = images.to_vec();
    let grad = input_gradient(model, &x0, images.shape(), labels)?;
    let adv = step_project_clamp(&x0, &grad, epsilon, &x0, epsilon);
    Ok(Tensor::from_vec(adv, images.shape())?)
}

/// PGD with the RNG derived from `config.seed`; two calls with the same
/// arguments produce identical output.
pub fn pgd<C: Classifier + ?Sized>(
    model: &C,
    images: &Tensor<f32>,
    labels: &[u8],
    config: &AttackConfig,
) -> Result<Tensor<f32>, AttackError> {
    let mut r = rng::stream(config.seed, rng::ATTACK);
    pgd_with_rng(model, images, labels, config, &mut r)
}

/// PGD drawing its random start from a caller-owned stream, so batched
/// generation can keep one stream across the whole dataset.
pub fn pgd_with_rng<C: Classifier + ?Sized>(
    model: &C,
    images: &Tensor<f32>,
    labels: &[u8],
    config: &AttackConfig,
    r: &mut ChaCha8Rng,
) -> Result<Tensor<f32>, AttackError> {
    config.validate()?;
    check_eval(model)?;
    let x0 = images.to_vec();
    let eps = config.epsilon;

    let mut adv = x0.clone();
    if config.random_start && eps > 0.0 {
        for (v, &orig) in adv.iter_mut().zip(&x0) {
            let jitter = r.random_range(-(eps as f64)..=eps as f64) as f32;
            *v = (orig + jitter).max(0.0).min(1.0);
        }
    }

    for _ in 0..config.steps {
        let grad = input_gradient(model, &adv, images.shape(), labels)?;
        adv = step_project_clamp(&adv, &grad, config.alpha, &x0, eps);
    }
    Ok(Tensor::from_vec(adv, images.shape())?)
}

/// Run the configured attack over a batch.
pub fn run_attack<C: Classifier + ?Sized>(
    model: &C,
    images: &Tensor<f32>,
    labels: &[u8],
    config: &AttackConfig,
) -> Result<Tensor<f32>, AttackError> {
    match config.family {
        AttackFamily::Fgsm => fgsm(model, images, labels, config.epsilon),
        AttackFamily::Pgd => pgd(model, images, labels, config),
    }
}

/// Clean/adversarial image pairs with their labels and the config that
/// produced them.
#[derive(Debug, Clone)]
pub struct AdversarialDataset {
    pub clean: Dataset,
    pub adversarial: Dataset,
    pub config: AttackConfig,
}

const GENERATE_BATCH: usize = 128;

/// Attack every image in the dataset, in source order, batched
/// internally. ε = 0 short-circuits to a copy of the clean images.
pub fn generate_adversarial_dataset(
    model: &Model<f32>,
    ds: &Dataset,
    config: &AttackConfig,
) -> Result<AdversarialDataset, AttackError> {
    config.validate()?;
    check_eval(model)?;
    let _freeze = FreezeGuard::new(model);

    let adversarial = if config.epsilon == 0.0 {
        ds.clone()
    } else {
        let mut r = rng::stream(config.seed, rng::ATTACK);
        let side = ds.side();
        let mut pixels: Vec<f32> = Vec::with_capacity(ds.len() * side * side);
        let mut start = 0;
        while start < ds.len() {
            let end = (start + GENERATE_BATCH).min(ds.len());
            let indices: Vec<usize> = (start..end).collect();
            let part = ds.gather(&indices)?;
            let adv = match config.family {
                AttackFamily::Fgsm => fgsm(model, &part.images, &part.labels, config.epsilon)?,
                AttackFamily::Pgd => {
                    pgd_with_rng(model, &part.images, &part.labels, config, &mut r)?
                }
            };
            pixels.extend(adv.to_vec());
            start = end;
        }
        let images = Tensor::from_vec(pixels, &[ds.len(), 1, side, side])?;
        Dataset::from_parts(images, ds.labels.clone(), ds.split, ds.source)?
    };

    Ok(AdversarialDataset {
        clean: ds.clone(),
        adversarial,
        config: config.clone(),
    })
}

fn write_f32_idx(path: &Path, count: usize, side: usize, data: &[f32]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&F32_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(count as u32).to_be_bytes())?;
    w.write_all(&(side as u32).to_be_bytes())?;
    w.write_all(&(side as u32).to_be_bytes())?;
    for v in data {
        w.write_all(&v.to_be_bytes())?;
    }
    w.flush()
}

fn read_f32_idx(path: &Path) -> Result<(usize, usize, Vec<f32>), AttackError> {
    let mut r = File::open(path)?;
    let magic = data::read_be_u32(&mut r, "f32 images magic")?;
    if magic != F32_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: F32_IMAGES_MAGIC,
        }
        .into());
    }
    let count = data::read_be_u32(&mut r, "f32 image count")? as usize;
    let rows = data::read_be_u32(&mut r, "f32 image rows")? as usize;
    let cols = data::read_be_u32(&mut r, "f32 image cols")? as usize;
    if rows != cols {
        return Err(AttackError::ManifestBadValue {
            key: "side",
            detail: format!("stored images are {rows}x{cols}, expected square"),
        });
    }
    let payload = data::read_payload(&mut r, count * rows * cols * 4, "f32 image payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((count, rows, data))
}

pub const CLEAN_IMAGES_FILE: &str = "clean-images.idx";
pub const ADV_IMAGES_FILE: &str = "adv-images.idx";
pub const LABELS_FILE: &str = "labels.idx";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Persist pairs as three IDX-style files plus a key=value manifest
/// recording the attack config and where the clean images came from.
pub fn write_adversarial_dataset(
    set: &AdversarialDataset,
    dir: impl AsRef<Path>,
) -> Result<(), AttackError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let n = set.clean.len();
    let side = set.clean.side();
    write_f32_idx(&dir.join(CLEAN_IMAGES_FILE), n, side, &set.clean.images.to_vec())?;
    write_f32_idx(
        &dir.join(ADV_IMAGES_FILE),
        n,
        side,
        &set.adversarial.images.to_vec(),
    )?;
    fs::write(
        dir.join(LABELS_FILE),
        data::labels_to_idx_bytes(&set.clean.labels),
    )?;
    let manifest = format!(
        "family={}\nepsilon={}\nalpha={}\nsteps={}\nrandom_start={}\nseed={}\ncount={}\nside={}\nsource={}\nsplit={}\n",
        set.config.family,
        set.config.epsilon,
        set.config.alpha,
        set.config.steps,
        set.config.random_start,
        set.config.seed,
        n,
        side,
        set.clean.source,
        set.clean.split,
    );
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn manifest_get<'m>(
    fields: &'m HashMap<String, String>,
    key: &'static str,
) -> Result<&'m str, AttackError> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or(AttackError::ManifestMissingKey { key })
}

fn manifest_parse<T: std::str::FromStr>(
    fields: &HashMap<String, String>,
    key: &'static str,
) -> Result<T, AttackError>
where
    T::Err: std::fmt::Display,
{
    manifest_get(fields, key)?
        .parse()
        .map_err(|e: T::Err| AttackError::ManifestBadValue {
            key,
            detail: e.to_string(),
        })
}

pub fn read_adversarial_dataset(dir: impl AsRef<Path>) -> Result<AdversarialDataset, AttackError> {
    let dir = dir.as_ref();
    let mut fields = HashMap::new();
    for line in fs::read_to_string(dir.join(MANIFEST_FILE))?.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let family: AttackFamily = manifest_get(&fields, "family")?.parse()?;
    let config = AttackConfig {
        family,
        epsilon: manifest_parse(&fields, "epsilon")?,
        alpha: manifest_parse(&fields, "alpha")?,
        steps: manifest_parse(&fields, "steps")?,
        random_start: manifest_parse(&fields, "random_start")?,
        seed: manifest_parse(&fields, "seed")?,
    };
    let source: data::Corpus = manifest_get(&fields, "source")?
        .parse()
        .map_err(|e: DataError| AttackError::ManifestBadValue {
            key: "source",
            detail: e.to_string(),
        })?;
    let split = match manifest_get(&fields, "split")? {
        "train" => data::Split::Train,
        "val" => data::Split::Val,
        "test" => data::Split::Test,
        other => {
            return Err(AttackError::ManifestBadValue {
                key: "split",
                detail: format!("unknown split {other:?}"),
            })
        }
    };

    let labels = data::read_idx_labels(dir.join(LABELS_FILE))?;
    let (n_clean, side, clean_px) = read_f32_idx(&dir.join(CLEAN_IMAGES_FILE))?;
    let (n_adv, side_adv, adv_px) = read_f32_idx(&dir.join(ADV_IMAGES_FILE))?;
    if n_clean != n_adv || side != side_adv || n_clean != labels.len() {
        return Err(DataError::CountMismatch {
            images: n_clean.min(n_adv),
            labels: labels.len(),
        }
        .into());
    }
    let clean = Dataset::from_parts(
        Tensor::from_vec(clean_px, &[n_clean, 1, side, side])?,
        labels.clone(),
        split,
        source,
    )?;
    let adversarial = Dataset::from_parts(
        Tensor::from_vec(adv_px, &[n_adv, 1, side, side])?,
        labels,
        split,
        source,
    )?;
    Ok(AdversarialDataset {
        clean,
        adversarial,
        config,
    })
}
