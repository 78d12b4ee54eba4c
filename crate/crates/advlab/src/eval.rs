//! Robustness evaluation: accuracy under attack, epsilon sweeps, CSV
//! reports, curve files for plotting, and a PGM image gallery.
//!
//! A sweep regenerates adversarial examples against the classifier at
//! every epsilon, then scores the classifier on them twice: raw, and
//! with the denoising autoencoder run in front. The defense is applied
//! at ε = 0 as well, which is what prices in its clean-accuracy cost.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::attacks::{
    generate_adversarial_dataset, AdversarialDataset, AttackConfig, AttackError, AttackFamily,
};
use crate::data::{DataError, Dataset};
use crate::nn::{Mode, Model, ModelError, ModelKind};
use crate::tensor::{no_grad, Tensor, TensorError};
use crate::train::count_correct;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("expected {expected} model, got {got}")]
    WrongModelKind { expected: ModelKind, got: ModelKind },
    #[error("evaluation needs models in eval mode")]
    ModelInTrainMode,
    #[error("epsilon grid is empty")]
    EmptyGrid,
    #[error("epsilon grid must be finite, non-negative, strictly ascending; got {got:?}")]
    BadGrid { got: Vec<f32> },
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("report line {line}: {detail}")]
    BadReportLine { line: usize, detail: String },
    #[error("report header {got:?} does not match {REPORT_HEADER:?}")]
    BadReportHeader { got: String },
}

pub const REPORT_HEADER: &str = "family,epsilon,defended,accuracy,mean_defense_s,n";

fn check_classifier(model: &Model<f32>) -> Result<(), EvalError> {
    if model.kind() != ModelKind::Classifier {
        return Err(EvalError::WrongModelKind {
            expected: ModelKind::Classifier,
            got: model.kind(),
        });
    }
    if model.mode() != Mode::Eval {
        return Err(EvalError::ModelInTrainMode);
    }
    Ok(())
}

fn check_defense(model: &Model<f32>) -> Result<(), EvalError> {
    if model.kind() != ModelKind::Autoencoder {
        return Err(EvalError::WrongModelKind {
            expected: ModelKind::Autoencoder,
            got: model.kind(),
        });
    }
    if model.mode() != Mode::Eval {
        return Err(EvalError::ModelInTrainMode);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyStats {
    pub correct: usize,
    pub total: usize,
    /// Defense forward wall-clock per image, averaged over batches;
    /// zero when no defense ran.
    pub mean_defense_s: f64,
}

impl AccuracyStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Count correct argmax predictions, optionally passing inputs through
/// the defense first. Only the defense forward is timed.
pub fn accuracy(
    classifier: &Model<f32>,
    ds: &Dataset,
    defense: Option<&Model<f32>>,
    batch_size: usize,
) -> Result<AccuracyStats, EvalError> {
    check_classifier(classifier)?;
    if let Some(d) = defense {
        check_defense(d)?;
    }
    if batch_size == 0 {
        return Err(EvalError::ZeroBatchSize);
    }
    no_grad(|| {
        let mut correct = 0usize;
        let mut defense_s_sum = 0.0f64;
        let mut batches = 0usize;
        let mut start = 0;
        while start < ds.len() {
            let end = (start + batch_size).min(ds.len());
            let idx: Vec<usize> = (start..end).collect();
            let part = ds.gather(&idx)?;
            let images = match defense {
                Some(d) => {
                    let t0 = Instant::now();
                    let recon = d.forward(&part.images)?;
                    defense_s_sum += t0.elapsed().as_secs_f64() / (end - start) as f64;
                    recon
                }
                None => part.images,
            };
            let logits = classifier.forward(&images)?;
            correct += count_correct(&logits, &part.labels);
            batches += 1;
            start = end;
        }
        Ok(AccuracyStats {
            correct,
            total: ds.len(),
            mean_defense_s: if defense.is_some() && batches > 0 {
                defense_s_sum / batches as f64
            } else {
                0.0
            },
        })
    })
}

/// One report row: accuracy of (un)defended classification under an
/// attack of the given strength.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub family: AttackFamily,
    pub epsilon: f32,
    pub defended: bool,
    pub accuracy: f64,
    pub mean_defense_s: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub dataset: String,
    pub checkpoint: String,
    pub defense: Option<String>,
    pub attack: String,
    pub seed: u64,
    /// Run duration; the one field that varies between identical runs.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub family: AttackFamily,
    pub grid: Vec<f32>,
    /// PGD overrides; `None` keeps [`AttackConfig::pgd`] defaults.
    pub steps: Option<usize>,
    pub alpha: Option<f32>,
    pub random_start: Option<bool>,
    pub seed: u64,
    pub batch_size: usize,
}

impl SweepConfig {
    pub fn new(family: AttackFamily, grid: Vec<f32>, seed: u64) -> SweepConfig {
        SweepConfig {
            family,
            grid,
            steps: None,
            alpha: None,
            random_start: None,
            seed,
            batch_size: 128,
        }
    }

    pub fn attack_config(&self, epsilon: f32) -> AttackConfig {
        let mut cfg = match self.family {
            AttackFamily::Fgsm => AttackConfig::fgsm(epsilon),
            AttackFamily::Pgd => AttackConfig::pgd(epsilon),
        };
        cfg.seed = self.seed;
        if self.family == AttackFamily::Pgd {
            if let Some(s) = self.steps {
                cfg.steps = s;
            }
            if let Some(a) = self.alpha {
                cfg.alpha = a;
            }
            if let Some(r) = self.random_start {
                cfg.random_start = r;
            }
        }
        cfg
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.grid.is_empty() {
            return Err(EvalError::EmptyGrid);
        }
        let ascending = self.grid.windows(2).all(|w| w[0] < w[1]);
        if !ascending || self.grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(EvalError::BadGrid {
                got: self.grid.clone(),
            });
        }
        if self.batch_size == 0 {
            return Err(EvalError::ZeroBatchSize);
        }
        Ok(())
    }

    /// Human-readable attack description for report metadata.
    pub fn describe(&self) -> String {
        match self.family {
            AttackFamily::Fgsm => "fgsm".to_string(),
            AttackFamily::Pgd => {
                let probe = self.attack_config(*self.grid.last().unwrap_or(&0.0));
                format!(
                    "pgd steps={} alpha={} random_start={}",
                    probe.steps,
                    self.alpha.map(|a| a.to_string()).unwrap_or_else(|| "eps/10".to_string()),
                    probe.random_start
                )
            }
        }
    }
}

/// Accuracy versus attack strength. Adversarial examples are generated
/// against the bare classifier at every epsilon; the defended rows
/// score those same images after reconstruction, so at ε = 0 both rows
/// see byte-identical inputs. Undefended rows come first, then the
/// defended block, each ascending in epsilon.
pub fn sweep(
    classifier: &Model<f32>,
    defense: Option<&Model<f32>>,
    ds: &Dataset,
    cfg: &SweepConfig,
) -> Result<Vec<ReportRow>, EvalError> {
    check_classifier(classifier)?;
    if let Some(d) = defense {
        check_defense(d)?;
    }
    cfg.validate()?;

    let mut undefended = Vec::with_capacity(cfg.grid.len());
    let mut defended = Vec::with_capacity(cfg.grid.len());
    for &eps in &cfg.grid {
        let attack = cfg.attack_config(eps);
        let set = generate_adversarial_dataset(classifier, ds, &attack)?;
        let raw = accuracy(classifier, &set.adversarial, None, cfg.batch_size)?;
        undefended.push(ReportRow {
            family: cfg.family,
            epsilon: eps,
            defended: false,
            accuracy: raw.accuracy(),
            mean_defense_s: 0.0,
            n: raw.total,
        });
        if let Some(d) = defense {
            let guarded = accuracy(classifier, &set.adversarial, Some(d), cfg.batch_size)?;
            defended.push(ReportRow {
                family: cfg.family,
                epsilon: eps,
                defended: true,
                accuracy: guarded.accuracy(),
                mean_defense_s: guarded.mean_defense_s,
                n: guarded.total,
            });
        }
    }
    undefended.extend(defended);
    Ok(undefended)
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# dataset={}\n", report.meta.dataset));
    out.push_str(&format!("# checkpoint={}\n", report.meta.checkpoint));
    if let Some(d) = &report.meta.defense {
        out.push_str(&format!("# defense={d}\n"));
    }
    out.push_str(&format!("# attack={}\n", report.meta.attack));
    out.push_str(&format!("# seed={}\n", report.meta.seed));
    out.push_str(&format!("# wall_clock_s={}\n", report.meta.wall_clock_s));
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.family, r.epsilon, r.defended, r.accuracy, r.mean_defense_s, r.n
        ));
    }
    out
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, report_to_csv(report))
}

fn parse_row(line: &str, lineno: usize) -> Result<ReportRow, EvalError> {
    let bad = |detail: String| EvalError::BadReportLine {
        line: lineno,
        detail,
    };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(bad(format!("expected 6 fields, got {}", fields.len())));
    }
    Ok(ReportRow {
        family: fields[0]
            .parse()
            .map_err(|e: AttackError| bad(e.to_string()))?,
        epsilon: fields[1].parse().map_err(|e| bad(format!("epsilon: {e}")))?,
        defended: fields[2]
            .parse()
            .map_err(|e| bad(format!("defended: {e}")))?,
        accuracy: fields[3]
            .parse()
            .map_err(|e| bad(format!("accuracy: {e}")))?,
        mean_defense_s: fields[4]
            .parse()
            .map_err(|e| bad(format!("mean_defense_s: {e}")))?,
        n: fields[5].parse().map_err(|e| bad(format!("n: {e}")))?,
    })
}

pub fn parse_report_str(text: &str) -> Result<EvalReport, EvalError> {
    let mut meta = ReportMeta {
        dataset: String::new(),
        checkpoint: String::new(),
        defense: None,
        attack: String::new(),
        seed: 0,
        wall_clock_s: 0.0,
    };
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                match k {
                    "dataset" => meta.dataset = v.to_string(),
                    "checkpoint" => meta.checkpoint = v.to_string(),
                    "defense" => meta.defense = Some(v.to_string()),
                    "attack" => meta.attack = v.to_string(),
                    "seed" => meta.seed = v.parse().unwrap_or(0),
                    "wall_clock_s" => meta.wall_clock_s = v.parse().unwrap_or(0.0),
                    _ => {}
                }
            }
            continue;
        }
        if !saw_header {
            if line != REPORT_HEADER {
                return Err(EvalError::BadReportHeader {
                    got: line.to_string(),
                });
            }
            saw_header = true;
            continue;
        }
        rows.push(parse_row(line, lineno)?);
    }
    if !saw_header {
        return Err(EvalError::BadReportHeader {
            got: String::new(),
        });
    }
    Ok(EvalReport { meta, rows })
}

pub fn parse_report(path: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    parse_report_str(&fs::read_to_string(path)?)
}

fn curve_key(family: AttackFamily, defended: bool) -> String {
    format!(
        "{}-{}",
        family,
        if defended { "defended" } else { "undefended" }
    )
}

/// One plottable file per (family, defended) pair: `epsilon accuracy`
/// lines, ascending in epsilon. Returns (file name, content) pairs.
pub fn render_curves(rows: &[ReportRow]) -> Vec<(String, String)> {
    let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(curve_key(r.family, r.defended)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, mut rs)| {
            rs.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
            let body: String = rs
                .iter()
                .map(|r| format!("{} {}\n", r.epsilon, r.accuracy))
                .collect();
            (format!("{key}.dat"), body)
        })
        .collect()
}

/// Fixed-width text table per (family, defended) pair. Returns
/// (file name, content) pairs.
pub fn render_tables(rows: &[ReportRow]) -> Vec<(String, String)> {
    let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(curve_key(r.family, r.defended)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, mut rs)| {
            rs.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
            let mut body = format!("{key}\n{:<10} {:<10} {:<14} {}\n", "epsilon", "accuracy", "defense_s", "n");
            for r in rs {
                body.push_str(&format!(
                    "{:<10} {:<10.4} {:<14.6} {}\n",
                    r.epsilon, r.accuracy, r.mean_defense_s, r.n
                ));
            }
            (format!("{key}-table.txt"), body)
        })
        .collect()
}

/// 8-bit binary PGM: pixel bytes are round(255 · v) with v clamped to
/// [0, 1] first.
pub fn pgm_bytes(pixels: &[f32], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count matches dims");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Write up to `k` image triples (clean, adversarial, reconstructed) as
/// PGM files named `NNN-<role>.pgm`. `k` = 0 writes nothing and
/// succeeds. Returns the number of triples written.
pub fn sample_gallery(
    set: &AdversarialDataset,
    reconstructed: Option<&Tensor<f32>>,
    dir: impl AsRef<Path>,
    k: usize,
) -> Result<usize, EvalError> {
    let dir = dir.as_ref();
    let count = k.min(set.clean.len());
    if count > 0 {
        fs::create_dir_all(dir)?;
    }
    let side = set.clean.side();
    let px = side * side;
    for i in 0..count {
        fs::write(
            dir.join(format!("{i:03}-clean.pgm")),
            pgm_bytes(&set.clean.image(i), side, side),
        )?;
        fs::write(
            dir.join(format!("{i:03}-adversarial.pgm")),
            pgm_bytes(&set.adversarial.image(i), side, side),
        )?;
        if let Some(recon) = reconstructed {
            let data = recon.data();
            fs::write(
                dir.join(format!("{i:03}-reconstructed.pgm")),
                pgm_bytes(&data[i * px..(i + 1) * px], side, side),
            )?;
        }
    }
    Ok(count)
}
