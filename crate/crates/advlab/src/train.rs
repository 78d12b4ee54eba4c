//! Training loops: Adam, early stopping on validation loss, and the
//! attacked/clean pair recipe for fitting the denoising autoencoder.
//!
//! Both loops keep the best-so-far weights as a detached snapshot and
//! return that snapshot, so the result's validation loss is no worse
//! than any completed epoch. The patience clock is less eager: it only
//! resets when the loss improves by more than `min_delta`, which stops
//! runs that are merely drifting sideways.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, AttackFamily};
use crate::data::{self, DataError, Dataset};
use crate::nn::{checkpoint, Model, ModelError, ModelKind};
use crate::rng;
use crate::tensor::{mse, no_grad, softmax_cross_entropy, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("config field {field} = {value} is out of range")]
    BadConfig { field: &'static str, value: f64 },
    #[error("loss became {loss} at epoch {epoch}, batch {batch}; best checkpoint so far is retained")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("parameter {name:?} has no gradient")]
    MissingGrad { name: String },
    #[error("parameter {name:?} has a non-finite gradient")]
    NonFiniteGrad { name: String },
    #[error("expected {expected} model, got {got}")]
    WrongModelKind { expected: ModelKind, got: ModelKind },
    #[error("paired dataset is empty (or too small to split)")]
    EmptyPairs,
    #[error("mixture recipe has no epsilon values for {family}")]
    EmptyGrid { family: AttackFamily },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Classifier defaults: Adam(1e-3), batch 64, up to 30 epochs.
    pub fn classifier() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 30,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
        }
    }

    /// Autoencoder defaults: same optimizer, up to 50 epochs.
    pub fn autoencoder() -> TrainConfig {
        TrainConfig {
            max_epochs: 50,
            ..TrainConfig::classifier()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, value: f64| Err(TrainError::BadConfig { field, value });
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("lr", self.lr);
        }
        if self.batch_size == 0 {
            return bad("batch_size", 0.0);
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return bad("adam_eps", self.adam_eps);
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", 0.0);
        }
        if self.patience == 0 {
            return bad("patience", 0.0);
        }
        if !self.min_delta.is_finite() || self.min_delta < 0.0 {
            return bad("min_delta", self.min_delta);
        }
        Ok(())
    }
}

/// Adam with bias correction. First and second moment buffers are laid
/// out positionally, so the same parameter list must be passed to every
/// step call.
pub struct Adam<S: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: &TrainConfig) -> Adam<S> {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. A zero gradient leaves its parameter untouched while
    /// the step counter still advances.
    pub fn step(&mut self, params: &[(String, Tensor<S>)]) -> Result<(), TrainError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![S::ZERO; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = S::from_f64(self.beta1);
        let nb1 = S::from_f64(1.0 - self.beta1);
        let b2 = S::from_f64(self.beta2);
        let nb2 = S::from_f64(1.0 - self.beta2);

        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| TrainError::MissingGrad {
                name: name.clone(),
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGrad { name: name.clone() });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + nb1 * g;
                v[j] = b2 * v[j] + nb2 * g * g;
                let m_hat = m[j].to_f64() / bc1;
                let v_hat = v[j].to_f64() / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[j] = data[j] - S::from_f64(update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Patience counter over validation loss. Improvement means dropping
/// below the best seen by more than `min_delta`; the run stops once
/// `patience` epochs pass without one.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> EarlyStopper {
        EarlyStopper {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.best_epoch = epoch;
            return StopDecision::Improved;
        }
        if epoch - self.best_epoch >= self.patience {
            return StopDecision::Stop;
        }
        StopDecision::Wait
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Classifier runs report accuracy; autoencoder runs leave it out.
    pub val_acc: Option<f64>,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss, in eval
    /// mode.
    pub model: Model<f32>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// `epoch,train_loss,val_loss,val_acc` rows; `val_acc` stays empty for
/// autoencoder histories.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for s in history {
        let acc = s.val_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.epoch, s.train_loss, s.val_loss, acc
        ));
    }
    out
}

pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, history_to_csv(history))
}

fn check_kind(model: &Model<f32>, expected: ModelKind) -> Result<(), TrainError> {
    if model.kind() != expected {
        return Err(TrainError::WrongModelKind {
            expected,
            got: model.kind(),
        });
    }
    Ok(())
}

/// Mean cross-entropy and accuracy over a dataset, eval mode, no graph.
fn classifier_val_metrics(
    model: &Model<f32>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    model.set_eval();
    no_grad(|| {
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut start = 0;
        while start < ds.len() {
            let end = (start + batch_size).min(ds.len());
            let idx: Vec<usize> = (start..end).collect();
            let part = ds.gather(&idx)?;
            let logits = model.forward(&part.images)?;
            let loss = softmax_cross_entropy(&logits, &part.labels)?;
            loss_sum += loss.item() as f64 * part.len() as f64;
            correct += count_correct(&logits, &part.labels);
            start = end;
        }
        Ok((loss_sum / ds.len() as f64, correct as f64 / ds.len() as f64))
    })
}

/// Argmax prediction tally; ties resolve to the lowest class index.
pub fn count_correct(logits: &Tensor<f32>, labels: &[u8]) -> usize {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    let data = logits.data();
    let mut correct = 0;
    for i in 0..n {
        let row = &data[i * k..(i + 1) * k];
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == labels[i] as usize {
            correct += 1;
        }
    }
    correct
}

/// Fit a classifier with Adam and early stopping. If `best_ckpt` is
/// given, the best weights are rewritten there on every improvement,
/// so an aborted run still leaves the last good checkpoint on disk.
pub fn train_classifier(
    model: &Model<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    best_ckpt: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_kind(model, ModelKind::Classifier)?;
    model.reseed(cfg.seed);
    let params = model.parameters();
    let mut adam = Adam::new(cfg);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut history = Vec::new();
    let mut best: Option<Model<f32>> = None;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        model.set_train();
        let mut loss_sum = 0.0f64;
        for (bi, batch) in
            data::make_batches(train, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?
                .enumerate()
        {
            let logits = model.forward(&batch.images)?;
            let loss = softmax_cross_entropy(&logits, &batch.labels)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: lv,
                });
            }
            loss_sum += lv * batch.labels.len() as f64;
            model.zero_grad();
            loss.backward()?;
            adam.step(&params)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_acc) = classifier_val_metrics(model, val, cfg.batch_size)?;
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}, val loss {val_loss:.4}, val acc {val_acc:.4}",
            cfg.max_epochs
        );
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc: Some(val_acc),
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            let snapshot = model.clone_detached();
            snapshot.set_eval();
            if let Some(path) = best_ckpt {
                checkpoint::save_checkpoint(&snapshot, path)?;
            }
            best = Some(snapshot);
        }
        if stopper.observe(epoch, val_loss) == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let model = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}

/// Input/target image pairs for the denoiser; same [N, 1, side, side]
/// layout on both sides.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

impl PairedDataset {
    pub fn new(inputs: Tensor<f32>, targets: Tensor<f32>) -> Result<PairedDataset, TrainError> {
        if inputs.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "paired dataset",
                left: inputs.shape().to_vec(),
                right: targets.shape().to_vec(),
            }
            .into());
        }
        if inputs.shape()[0] == 0 {
            return Err(TrainError::EmptyPairs);
        }
        Ok(PairedDataset { inputs, targets })
    }

    /// Clean reconstruction pairs: input equals target.
    pub fn identity(ds: &Dataset) -> PairedDataset {
        PairedDataset {
            inputs: ds.images.detach(),
            targets: ds.images.detach(),
        }
    }

    /// Denoising pairs: adversarial in, clean out.
    pub fn from_adversarial(set: &attacks::AdversarialDataset) -> PairedDataset {
        PairedDataset {
            inputs: set.adversarial.images.detach(),
            targets: set.clean.images.detach(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row_px(&self) -> usize {
        self.inputs.numel() / self.len()
    }

    pub fn gather(&self, indices: &[usize]) -> PairedDataset {
        let px = self.row_px();
        let ins = self.inputs.data();
        let tgs = self.targets.data();
        let mut in_px = Vec::with_capacity(indices.len() * px);
        let mut tg_px = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            in_px.extend_from_slice(&ins[i * px..(i + 1) * px]);
            tg_px.extend_from_slice(&tgs[i * px..(i + 1) * px]);
        }
        drop(ins);
        drop(tgs);
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        PairedDataset {
            inputs: Tensor::from_vec(in_px, &shape).expect("gather preserves row size"),
            targets: Tensor::from_vec(tg_px, &shape).expect("gather preserves row size"),
        }
    }

    pub fn concat(parts: &[&PairedDataset]) -> Result<PairedDataset, TrainError> {
        let first = parts.first().ok_or(TrainError::EmptyPairs)?;
        let px = first.row_px();
        let mut shape = first.inputs.shape().to_vec();
        let mut in_px = Vec::new();
        let mut tg_px = Vec::new();
        for p in parts {
            assert_eq!(p.row_px(), px, "pair parts share image size");
            in_px.extend_from_slice(&p.inputs.data());
            tg_px.extend_from_slice(&p.targets.data());
        }
        shape[0] = in_px.len() / px;
        PairedDataset::new(
            Tensor::from_vec(in_px, &shape).expect("concat preserves row size"),
            Tensor::from_vec(tg_px, &shape).expect("concat preserves row size"),
        )
    }
}

/// Seeded split into train and validation pairs, floor(n/6) to val.
pub fn split_pairs(pairs: &PairedDataset, seed: u64) -> Result<(PairedDataset, PairedDataset), TrainError> {
    let n = pairs.len();
    let val_n = n / 6;
    if val_n == 0 {
        return Err(TrainError::EmptyPairs);
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(seed, rng::SPLIT));
    }
    let (train_idx, val_idx) = order.split_at(n - val_n);
    Ok((pairs.gather(train_idx), pairs.gather(val_idx)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureFamilies {
    Fgsm,
    Pgd,
    Both,
}

/// How to corrupt the training images for the denoiser. Every image
/// gets attacked once with a family and strength drawn per image; on
/// top of that, a fraction of the images are appended again as clean
/// (x, x) pairs so the autoencoder keeps its fixed point.
#[derive(Debug, Clone)]
pub struct MixtureRecipe {
    pub families: MixtureFamilies,
    pub fgsm_grid: Vec<f32>,
    pub pgd_grid: Vec<f32>,
    pub pgd_steps: usize,
    pub clean_fraction: f64,
    pub seed: u64,
}

impl MixtureRecipe {
    pub fn new(families: MixtureFamilies, seed: u64) -> MixtureRecipe {
        MixtureRecipe {
            families,
            fgsm_grid: (1..=10).map(|i| i as f32 / 10.0).collect(),
            pgd_grid: (1..=8).map(|i| i as f32 * 0.05).collect(),
            pgd_steps: 40,
            clean_fraction: 0.1,
            seed,
        }
    }
}

/// Attack every image per the recipe and pair it with its clean
/// original. Output keeps source order, with the clean extras appended.
pub fn build_denoising_pairs(
    model: &Model<f32>,
    ds: &Dataset,
    recipe: &MixtureRecipe,
) -> Result<PairedDataset, TrainError> {
    check_kind(model, ModelKind::Classifier)?;
    let use_fgsm = recipe.families != MixtureFamilies::Pgd;
    let use_pgd = recipe.families != MixtureFamilies::Fgsm;
    if use_fgsm && recipe.fgsm_grid.is_empty() {
        return Err(TrainError::EmptyGrid {
            family: AttackFamily::Fgsm,
        });
    }
    if use_pgd && recipe.pgd_grid.is_empty() {
        return Err(TrainError::EmptyGrid {
            family: AttackFamily::Pgd,
        });
    }

    let n = ds.len();
    let mut r = rng::stream(recipe.seed, rng::MIXTURE);

    // per-image assignment: (family, grid slot)
    let mut buckets: std::collections::BTreeMap<(bool, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for i in 0..n {
        let fgsm = match recipe.families {
            MixtureFamilies::Fgsm => true,
            MixtureFamilies::Pgd => false,
            MixtureFamilies::Both => r.random::<bool>(),
        };
        let grid_len = if fgsm {
            recipe.fgsm_grid.len()
        } else {
            recipe.pgd_grid.len()
        };
        let slot = r.random_range(0..grid_len);
        buckets.entry((fgsm, slot)).or_default().push(i);
    }

    let side = ds.side();
    let px = side * side;
    let mut adv_px = vec![0.0f32; n * px];
    for ((fgsm, slot), indices) in &buckets {
        let eps = if *fgsm {
            recipe.fgsm_grid[*slot]
        } else {
            recipe.pgd_grid[*slot]
        };
        let config = if *fgsm {
            let mut c = AttackConfig::fgsm(eps);
            c.seed = recipe.seed;
            c
        } else {
            let mut c = AttackConfig::pgd(eps);
            c.steps = recipe.pgd_steps;
            c.seed = recipe.seed;
            c
        };
        let part = ds.gather(indices)?;
        let set = attacks::generate_adversarial_dataset(model, &part, &config)?;
        let pixels = set.adversarial.images.to_vec();
        for (k, &i) in indices.iter().enumerate() {
            adv_px[i * px..(i + 1) * px].copy_from_slice(&pixels[k * px..(k + 1) * px]);
        }
    }

    let clean_extra = (n as f64 * recipe.clean_fraction).round() as usize;
    let extra_idx: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        order.truncate(clean_extra);
        order
    };

    let total = n + extra_idx.len();
    let clean = ds.images.data();
    let mut inputs = Vec::with_capacity(total * px);
    let mut targets = Vec::with_capacity(total * px);
    inputs.extend_from_slice(&adv_px);
    targets.extend_from_slice(&clean);
    for &i in &extra_idx {
        inputs.extend_from_slice(&clean[i * px..(i + 1) * px]);
        targets.extend_from_slice(&clean[i * px..(i + 1) * px]);
    }
    drop(clean);

    PairedDataset::new(
        Tensor::from_vec(inputs, &[total, 1, side, side])?,
        Tensor::from_vec(targets, &[total, 1, side, side])?,
    )
}

fn autoencoder_val_loss(
    model: &Model<f32>,
    pairs: &PairedDataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    model.set_eval();
    no_grad(|| {
        let mut loss_sum = 0.0f64;
        let mut start = 0;
        while start < pairs.len() {
            let end = (start + batch_size).min(pairs.len());
            let idx: Vec<usize> = (start..end).collect();
            let part = pairs.gather(&idx);
            let recon = model.forward(&part.inputs)?;
            let loss = mse(&recon, &part.targets)?;
            loss_sum += loss.item() as f64 * (end - start) as f64;
            start = end;
        }
        Ok(loss_sum / pairs.len() as f64)
    })
}

/// Fit an autoencoder on image pairs with MSE loss; otherwise the same
/// loop as [`train_classifier`].
pub fn train_autoencoder(
    model: &Model<f32>,
    train: &PairedDataset,
    val: &PairedDataset,
    cfg: &TrainConfig,
    best_ckpt: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_kind(model, ModelKind::Autoencoder)?;
    model.reseed(cfg.seed);
    let params = model.parameters();
    let mut adam = Adam::new(cfg);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut history = Vec::new();
    let mut best: Option<Model<f32>> = None;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        model.set_train();
        let order = data::shuffled_order(train.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0f64;
        let mut start = 0;
        let mut bi = 0;
        while start < order.len() {
            let end = (start + cfg.batch_size).min(order.len());
            let part = train.gather(&order[start..end]);
            let recon = model.forward(&part.inputs)?;
            let loss = mse(&recon, &part.targets)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: lv,
                });
            }
            loss_sum += lv * (end - start) as f64;
            model.zero_grad();
            loss.backward()?;
            adam.step(&params)?;
            start = end;
            bi += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = autoencoder_val_loss(model, val, cfg.batch_size)?;
        log::info!(
            "epoch {epoch}/{}: train mse {train_loss:.5}, val mse {val_loss:.5}",
            cfg.max_epochs
        );
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc: None,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            let snapshot = model.clone_detached();
            snapshot.set_eval();
            if let Some(path) = best_ckpt {
                checkpoint::save_checkpoint(&snapshot, path)?;
            }
            best = Some(snapshot);
        }
        if stopper.observe(epoch, val_loss) == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let model = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}
