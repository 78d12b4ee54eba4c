//! One function per subcommand, each running the same sequence:
//! resolve settings, validate them, write the resolved echo, then do
//! the work against the library.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advlab::attacks::{
    generate_adversarial_dataset, write_adversarial_dataset, AttackConfig, AttackError,
    AttackFamily,
};
use advlab::data::{
    load_standard, split_train_val, subset_stratified, Corpus, DataError, Dataset, Split,
};
use advlab::eval::{
    parse_report, render_curves, render_tables, sample_gallery, sweep, write_report, EvalReport,
    ReportMeta, ReportRow, SweepConfig,
};
use advlab::nn::checkpoint::load_checkpoint;
use advlab::nn::{
    build_autoencoder, build_classifier, AutoencoderSpec, ClassifierSpec, Model, ModelKind,
};
use advlab::tensor::{no_grad, Tensor};
use advlab::train::{
    build_denoising_pairs, split_pairs, train_autoencoder, train_classifier, write_history_csv,
    MixtureFamilies, MixtureRecipe, TrainConfig,
};
use log::info;

use crate::config::{load_config_file, parse_grid, Resolver};
use crate::{
    AttackArgs, Cli, CliError, Command, EvaluateArgs, GalleryArgs, Global, ReportArgs,
    TrainAutoencoderArgs, TrainClassifierArgs,
};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(path) => load_config_file(path)?,
        None => BTreeMap::new(),
    };
    let resolver = Resolver::new(file);
    let g = cli.global;
    match cli.command {
        Command::TrainClassifier(a) => cmd_train_classifier(g, a, resolver),
        Command::TrainAutoencoder(a) => cmd_train_autoencoder(g, a, resolver),
        Command::Attack(a) => cmd_attack(g, a, resolver),
        Command::Evaluate(a) => cmd_evaluate(g, a, resolver),
        Command::Report(a) => cmd_report(g, a, resolver),
        Command::Gallery(a) => cmd_gallery(g, a, resolver),
    }
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn parse_corpus(s: &str) -> Result<Corpus, CliError> {
    s.parse()
        .map_err(|e: DataError| usage(format!("--dataset: {e}")))
}

fn parse_family(s: &str) -> Result<AttackFamily, CliError> {
    s.parse()
        .map_err(|e: AttackError| usage(format!("--family: {e}")))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("--split must be train or test, got `{other}`"))),
    }
}

fn parse_profile(s: &str) -> Result<ClassifierSpec, CliError> {
    match s {
        "full" => Ok(ClassifierSpec::full()),
        "reduced" => Ok(ClassifierSpec::reduced()),
        other => Err(usage(format!(
            "--profile must be full or reduced, got `{other}`"
        ))),
    }
}

fn parse_mixture(s: &str) -> Result<MixtureFamilies, CliError> {
    match s {
        "fgsm" => Ok(MixtureFamilies::Fgsm),
        "pgd" => Ok(MixtureFamilies::Pgd),
        "both" => Ok(MixtureFamilies::Both),
        other => Err(usage(format!(
            "--mixture must be fgsm, pgd, or both, got `{other}`"
        ))),
    }
}

fn existing_data_dir(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(usage(format!(
            "data directory {} does not exist",
            path.display()
        )))
    }
}

fn prepare_out(out: &Path, echo: String) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved.cfg"), echo)?;
    Ok(())
}

/// Load a checkpoint that must exist and hold the expected model kind;
/// both are configuration mistakes, not runtime failures.
fn load_model(path: &Path, want: ModelKind) -> Result<Model<f32>, CliError> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let model = load_checkpoint::<f32>(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if model.kind() != want {
        return Err(usage(format!(
            "{} is {} weights, but this command needs {} weights",
            path.display(),
            model.kind(),
            want
        )));
    }
    model.set_eval();
    Ok(model)
}

fn load_split(
    data_dir: &Path,
    corpus: Corpus,
    split: Split,
    subset: Option<usize>,
) -> Result<Dataset, CliError> {
    if subset == Some(0) {
        return Err(usage("--subset must be at least 1".to_string()));
    }
    let whole = load_standard(data_dir, corpus, split)?;
    match subset {
        Some(n) => Ok(subset_stratified(&whole, n, 10)?),
        None => Ok(whole),
    }
}

/// Shared PGD override plumbing for attack, evaluate, and gallery. The
/// overrides only make sense for PGD; given with FGSM they are almost
/// certainly a mistake, so they fail instead of being ignored.
fn check_pgd_only(
    family: AttackFamily,
    alpha: Option<f32>,
    steps: Option<usize>,
    random_start: Option<bool>,
) -> Result<(), CliError> {
    if family == AttackFamily::Fgsm
        && (alpha.is_some() || steps.is_some() || random_start.is_some())
    {
        return Err(usage(
            "--alpha, --steps, and --random-start apply to pgd only".to_string(),
        ));
    }
    if let Some(a) = alpha {
        if !a.is_finite() || a <= 0.0 {
            return Err(usage(format!("--alpha must be positive, got {a}")));
        }
    }
    if steps == Some(0) {
        return Err(usage("--steps must be at least 1".to_string()));
    }
    Ok(())
}

fn build_attack_config(
    family: AttackFamily,
    eps: f32,
    alpha: Option<f32>,
    steps: Option<usize>,
    random_start: Option<bool>,
    seed: u64,
) -> Result<AttackConfig, CliError> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(usage(format!(
            "--eps must be finite and non-negative, got {eps}"
        )));
    }
    check_pgd_only(family, alpha, steps, random_start)?;
    let mut cfg = match family {
        AttackFamily::Fgsm => AttackConfig::fgsm(eps),
        AttackFamily::Pgd => AttackConfig::pgd(eps),
    };
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(r) = random_start {
        cfg.random_start = r;
    }
    cfg.seed = seed;
    Ok(cfg)
}

fn resolve_train_config(
    r: &mut Resolver,
    mut cfg: TrainConfig,
    seed: u64,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    lr: Option<f64>,
    min_delta: Option<f64>,
) -> Result<TrainConfig, CliError> {
    cfg.seed = seed;
    cfg.batch_size = r.take("batch-size", batch_size, Some(cfg.batch_size))?;
    cfg.max_epochs = r.take("max-epochs", max_epochs, Some(cfg.max_epochs))?;
    cfg.patience = r.take("patience", patience, Some(cfg.patience))?;
    cfg.lr = r.take("lr", lr, Some(cfg.lr))?;
    cfg.min_delta = r.take("min-delta", min_delta, Some(cfg.min_delta))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train_classifier(
    g: Global,
    a: TrainClassifierArgs,
    mut r: Resolver,
) -> Result<(), CliError> {
    let seed = r.take("seed", g.seed, Some(0))?;
    let out = r.take_path("out", g.out, true)?.expect("required");
    let data_dir = existing_data_dir(r.take_path("data-dir", g.data_dir, true)?.expect("required"))?;
    let spec = parse_profile(&r.take("profile", g.profile, Some("reduced".to_string()))?)?;
    let corpus = parse_corpus(&r.take("dataset", a.dataset, None)?)?;
    let subset = r.take_opt("subset", a.subset)?;
    let cfg = resolve_train_config(
        &mut r,
        TrainConfig::classifier(),
        seed,
        a.batch_size,
        a.max_epochs,
        a.patience,
        a.lr,
        a.min_delta,
    )?;
    prepare_out(&out, r.finish()?)?;

    let base = load_split(&data_dir, corpus, Split::Train, subset)?;
    let (train, val) = split_train_val(&base, seed)?;
    info!(
        "training {corpus} classifier: {} train / {} val images",
        train.len(),
        val.len()
    );
    let model = build_classifier::<f32>(&spec, seed)?;
    let ckpt = out.join("classifier.ckpt");
    let t0 = Instant::now();
    let outcome = train_classifier(&model, &train, &val, &cfg, Some(&ckpt))?;
    write_history_csv(&outcome.history, out.join("history.csv"))?;
    info!(
        "best epoch {} (val loss {:.6}) after {} epochs in {:.0}s; wrote {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.history.len(),
        t0.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_train_autoencoder(
    g: Global,
    a: TrainAutoencoderArgs,
    mut r: Resolver,
) -> Result<(), CliError> {
    let seed = r.take("seed", g.seed, Some(0))?;
    let out = r.take_path("out", g.out, true)?.expect("required");
    let data_dir = existing_data_dir(r.take_path("data-dir", g.data_dir, true)?.expect("required"))?;
    let ckpt = r.take_path("ckpt", a.ckpt, true)?.expect("required");
    let corpus = parse_corpus(&r.take("dataset", a.dataset, None)?)?;
    let subset = r.take_opt("subset", a.subset)?;
    let families = parse_mixture(&r.take("mixture", a.mixture, Some("both".to_string()))?)?;
    let clean_fraction = r.take("clean-fraction", a.clean_fraction, Some(0.1))?;
    if !(0.0..=1.0).contains(&clean_fraction) {
        return Err(usage(format!(
            "--clean-fraction must be in [0, 1], got {clean_fraction}"
        )));
    }
    let fgsm_grid = parse_grid(&r.take("fgsm-grid", a.fgsm_grid, Some("0.1:1.0:0.1".to_string()))?)?;
    let pgd_grid = parse_grid(&r.take("pgd-grid", a.pgd_grid, Some("0.05:0.4:0.05".to_string()))?)?;
    let pgd_steps = r.take("pgd-steps", a.pgd_steps, Some(40))?;
    if pgd_steps == 0 {
        return Err(usage("--pgd-steps must be at least 1".to_string()));
    }
    let cfg = resolve_train_config(
        &mut r,
        TrainConfig::autoencoder(),
        seed,
        a.batch_size,
        a.max_epochs,
        a.patience,
        a.lr,
        a.min_delta,
    )?;
    prepare_out(&out, r.finish()?)?;

    let classifier = load_model(&ckpt, ModelKind::Classifier)?;
    let base = load_split(&data_dir, corpus, Split::Train, subset)?;
    let recipe = MixtureRecipe {
        families,
        fgsm_grid,
        pgd_grid,
        pgd_steps,
        clean_fraction,
        seed,
    };
    info!("building denoising pairs over {} {corpus} images", base.len());
    let t0 = Instant::now();
    let pairs = build_denoising_pairs(&classifier, &base, &recipe)?;
    info!(
        "{} pairs in {:.0}s; training autoencoder",
        pairs.len(),
        t0.elapsed().as_secs_f64()
    );
    let (ptrain, pval) = split_pairs(&pairs, seed)?;
    let model = build_autoencoder::<f32>(&AutoencoderSpec::default(), seed)?;
    let denoiser = out.join("denoiser.ckpt");
    let t0 = Instant::now();
    let outcome = train_autoencoder(&model, &ptrain, &pval, &cfg, Some(&denoiser))?;
    write_history_csv(&outcome.history, out.join("history.csv"))?;
    info!(
        "best epoch {} (val loss {:.6}) after {} epochs in {:.0}s; wrote {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.history.len(),
        t0.elapsed().as_secs_f64(),
        denoiser.display()
    );
    Ok(())
}

fn cmd_attack(g: Global, a: AttackArgs, mut r: Resolver) -> Result<(), CliError> {
    let seed = r.take("seed", g.seed, Some(0))?;
    let out = r.take_path("out", g.out, true)?.expect("required");
    let data_dir = existing_data_dir(r.take_path("data-dir", g.data_dir, true)?.expect("required"))?;
    let ckpt = r.take_path("ckpt", a.ckpt, true)?.expect("required");
    let corpus = parse_corpus(&r.take("dataset", a.dataset, None)?)?;
    let split = parse_split(&r.take("split", a.split, Some("test".to_string()))?)?;
    let subset = r.take_opt("subset", a.subset)?;
    let family = parse_family(&r.take("family", a.family, None)?)?;
    let eps = r.take("eps", a.eps, None)?;
    let alpha = r.take_opt("alpha", a.alpha)?;
    let steps = r.take_opt("steps", a.steps)?;
    let random_start = r.take_opt("random-start", a.random_start)?;
    let config = build_attack_config(family, eps, alpha, steps, random_start, seed)?;
    prepare_out(&out, r.finish()?)?;

    let model = load_model(&ckpt, ModelKind::Classifier)?;
    let ds = load_split(&data_dir, corpus, split, subset)?;
    info!("attacking {} {corpus}/{split} images with {family}", ds.len());
    let t0 = Instant::now();
    let set = generate_adversarial_dataset(&model, &ds, &config)?;
    write_adversarial_dataset(&set, &out)?;
    info!(
        "wrote adversarial dataset to {} in {:.0}s",
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Sweep with the grid split over worker threads. Models hold `Rc`
/// internals and cannot cross threads, so each worker reloads the
/// checkpoints and rebuilds its dataset from raw copies; rows are
/// reassembled in grid order, so the output matches a single-threaded
/// sweep exactly (defense timing aside).
fn sweep_parallel(
    ds: &Dataset,
    cfg: &SweepConfig,
    workers: usize,
    ckpt: &Path,
    defense: Option<&Path>,
) -> Result<Vec<ReportRow>, CliError> {
    let chunk_len = cfg.grid.len().div_ceil(workers);
    let chunks: Vec<Vec<f32>> = cfg.grid.chunks(chunk_len).map(|c| c.to_vec()).collect();
    let pixels = ds.images.to_vec();
    let labels = &ds.labels;
    let (split, source, side, n) = (ds.split, ds.source, ds.side(), ds.len());

    let outputs: Vec<Result<Vec<ReportRow>, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                let pixels = &pixels;
                s.spawn(move || {
                    let images = Tensor::from_vec(pixels.clone(), &[n, 1, side, side])
                        .map_err(|e| e.to_string())?;
                    let local = Dataset::from_parts(images, labels.clone(), split, source)
                        .map_err(|e| e.to_string())?;
                    let classifier = load_checkpoint::<f32>(ckpt).map_err(|e| e.to_string())?;
                    classifier.set_eval();
                    let def = match defense {
                        Some(path) => {
                            let d = load_checkpoint::<f32>(path).map_err(|e| e.to_string())?;
                            d.set_eval();
                            Some(d)
                        }
                        None => None,
                    };
                    let mut sub = cfg.clone();
                    sub.grid = chunk.clone();
                    sweep(&classifier, def.as_ref(), &local, &sub).map_err(|e| e.to_string())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    let mut undefended = Vec::new();
    let mut defended = Vec::new();
    for output in outputs {
        for row in output.map_err(CliError::Runtime)? {
            if row.defended {
                defended.push(row);
            } else {
                undefended.push(row);
            }
        }
    }
    undefended.extend(defended);
    Ok(undefended)
}

fn cmd_evaluate(g: Global, a: EvaluateArgs, mut r: Resolver) -> Result<(), CliError> {
    let seed = r.take("seed", g.seed, Some(0))?;
    let threads = r.take("threads", g.threads, Some(1))?;
    if threads == 0 {
        return Err(usage("--threads must be at least 1".to_string()));
    }
    let out = r.take_path("out", g.out, true)?.expect("required");
    let data_dir = existing_data_dir(r.take_path("data-dir", g.data_dir, true)?.expect("required"))?;
    let ckpt = r.take_path("ckpt", a.ckpt, true)?.expect("required");
    let defense = r.take_path("defense", a.defense, false)?;
    let corpus = parse_corpus(&r.take("dataset", a.dataset, None)?)?;
    let split = parse_split(&r.take("split", a.split, Some("test".to_string()))?)?;
    let subset = r.take_opt("subset", a.subset)?;
    let family = parse_family(&r.take("family", a.family, None)?)?;
    let grid = parse_grid(&r.take("grid", a.grid, None)?)?;
    let alpha = r.take_opt("alpha", a.alpha)?;
    let steps = r.take_opt("steps", a.steps)?;
    let random_start = r.take_opt("random-start", a.random_start)?;
    check_pgd_only(family, alpha, steps, random_start)?;
    let batch_size = r.take("batch-size", a.batch_size, Some(128))?;
    if batch_size == 0 {
        return Err(usage("--batch-size must be at least 1".to_string()));
    }
    prepare_out(&out, r.finish()?)?;

    let classifier = load_model(&ckpt, ModelKind::Classifier)?;
    let def_model = defense
        .as_deref()
        .map(|p| load_model(p, ModelKind::Autoencoder))
        .transpose()?;
    let ds = load_split(&data_dir, corpus, split, subset)?;

    let mut cfg = SweepConfig::new(family, grid, seed);
    cfg.alpha = alpha;
    cfg.steps = steps;
    cfg.random_start = random_start;
    cfg.batch_size = batch_size;

    let workers = threads.min(cfg.grid.len());
    info!(
        "sweeping {} {family} points over {} {corpus}/{split} images ({workers} worker{})",
        cfg.grid.len(),
        ds.len(),
        if workers == 1 { "" } else { "s" }
    );
    let t0 = Instant::now();
    let rows = if workers > 1 {
        sweep_parallel(&ds, &cfg, workers, &ckpt, defense.as_deref())?
    } else {
        sweep(&classifier, def_model.as_ref(), &ds, &cfg)?
    };
    let report = EvalReport {
        meta: ReportMeta {
            dataset: format!("{corpus}/{split}"),
            checkpoint: ckpt.display().to_string(),
            defense: defense.map(|p| p.display().to_string()),
            attack: cfg.describe(),
            seed,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        },
        rows,
    };
    let path = out.join("report.csv");
    write_report(&report, &path)?;
    info!("wrote {} rows to {}", report.rows.len(), path.display());
    Ok(())
}

fn cmd_report(g: Global, a: ReportArgs, mut r: Resolver) -> Result<(), CliError> {
    let out = r.take_path("out", g.out, true)?.expect("required");
    let inputs = r.take_paths("in", a.inputs)?;
    prepare_out(&out, r.finish()?)?;

    let mut rows = Vec::new();
    for path in &inputs {
        if !path.is_file() {
            return Err(usage(format!("report {} does not exist", path.display())));
        }
        rows.extend(parse_report(path)?.rows);
    }
    let curves = render_curves(&rows);
    let tables = render_tables(&rows);
    for (name, body) in curves.iter().chain(tables.iter()) {
        fs::write(out.join(name), body)?;
    }
    info!(
        "merged {} rows from {} reports into {} curve and {} table files",
        rows.len(),
        inputs.len(),
        curves.len(),
        tables.len()
    );
    Ok(())
}

fn cmd_gallery(g: Global, a: GalleryArgs, mut r: Resolver) -> Result<(), CliError> {
    let seed = r.take("seed", g.seed, Some(0))?;
    let out = r.take_path("out", g.out, true)?.expect("required");
    let data_dir = existing_data_dir(r.take_path("data-dir", g.data_dir, true)?.expect("required"))?;
    let ckpt = r.take_path("ckpt", a.ckpt, true)?.expect("required");
    let defense = r.take_path("defense", a.defense, false)?;
    let corpus = parse_corpus(&r.take("dataset", a.dataset, None)?)?;
    let split = parse_split(&r.take("split", a.split, Some("test".to_string()))?)?;
    let subset = r.take_opt("subset", a.subset)?;
    let family = parse_family(&r.take("family", a.family, Some("fgsm".to_string()))?)?;
    let eps = r.take("eps", a.eps, None)?;
    let alpha = r.take_opt("alpha", a.alpha)?;
    let steps = r.take_opt("steps", a.steps)?;
    let random_start = r.take_opt("random-start", a.random_start)?;
    let config = build_attack_config(family, eps, alpha, steps, random_start, seed)?;
    let k = r.take("k", a.k, Some(8))?;
    prepare_out(&out, r.finish()?)?;

    if k == 0 {
        info!("k = 0, nothing to write");
        return Ok(());
    }
    let model = load_model(&ckpt, ModelKind::Classifier)?;
    let def_model = defense
        .as_deref()
        .map(|p| load_model(p, ModelKind::Autoencoder))
        .transpose()?;
    let ds = load_split(&data_dir, corpus, split, subset)?;
    let head: Vec<usize> = (0..k.min(ds.len())).collect();
    let sample = ds.gather(&head)?;
    let set = generate_adversarial_dataset(&model, &sample, &config)?;
    let reconstructed = match &def_model {
        Some(d) => Some(no_grad(|| d.forward(&set.adversarial.images))?),
        None => None,
    };
    let dir = out.join("gallery");
    let written = sample_gallery(&set, reconstructed.as_ref(), &dir, k)?;
    info!("wrote {written} image triples to {}", dir.display());
    Ok(())
}
