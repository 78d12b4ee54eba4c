//! Acceptance suite: one test per release gate, from gradient oracles
//! through desk-scale training targets to artifact round trips. The
//! expensive trained fixtures build once behind a `Lazy` and are shared
//! between tests through checkpoint files.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use advlab::attacks::{fgsm, generate_adversarial_dataset, AttackConfig, AttackFamily};
use advlab::data::{
    load_standard, read_idx_images, split_train_val, subset_stratified, Corpus, DataError,
    Dataset, Split, IMAGES_MAGIC,
};
use advlab::eval::{
    accuracy, parse_report, report_to_csv, sweep, write_report, EvalReport, ReportMeta,
    ReportRow, SweepConfig, REPORT_HEADER,
};
use advlab::nn::checkpoint::{load_checkpoint, save_checkpoint};
use advlab::nn::{build_autoencoder, build_classifier, AutoencoderSpec, ClassifierSpec, Model};
use advlab::rng::stream;
use advlab::tensor::{
    check_gradient, mse, no_grad, softmax_cross_entropy, GradCheckReport, Tensor,
};
use advlab::train::{
    build_denoising_pairs, history_to_csv, split_pairs, train_autoencoder, train_classifier,
    MixtureFamilies, MixtureRecipe, TrainConfig,
};
use common::{data_dir, tiny_autoencoder_spec, tiny_classifier_spec, uniform_vec};
use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;
const TRIALS: u64 = 100;

fn tiny_eval_classifier(seed: u64) -> Model<f32> {
    let m = build_classifier::<f32>(&tiny_classifier_spec(), seed).unwrap();
    m.set_eval();
    m
}

fn mnist_test_subset(n: usize) -> Dataset {
    let test = load_standard(data_dir(), Corpus::Mnist, Split::Test).unwrap();
    subset_stratified(&test, n, 10).unwrap()
}

fn forward_bits(model: &Model<f32>, images: &Tensor<f32>) -> Vec<u32> {
    no_grad(|| model.forward(images))
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

// ---------------------------------------------------------------------
// shared trained fixtures
// ---------------------------------------------------------------------

struct TrainedStack {
    _dir: tempfile::TempDir,
    mnist_classifier: PathBuf,
    denoiser: PathBuf,
    mnist_test_acc: f64,
    fashion_test_acc: f64,
}

fn train_reduced_classifier(corpus: Corpus, ckpt: &Path) -> (Model<f32>, f64, Dataset) {
    let whole = load_standard(data_dir(), corpus, Split::Train).unwrap();
    let sub = subset_stratified(&whole, 10_000, 10).unwrap();
    drop(whole);
    let (train, val) = split_train_val(&sub, SEED).unwrap();

    let model = build_classifier::<f32>(&ClassifierSpec::reduced(), SEED).unwrap();
    let mut cfg = TrainConfig::classifier();
    cfg.max_epochs = 8;
    cfg.patience = 3;
    cfg.seed = SEED;

    let t0 = Instant::now();
    let outcome = train_classifier(&model, &train, &val, &cfg, Some(ckpt)).unwrap();
    let test = load_standard(data_dir(), corpus, Split::Test).unwrap();
    let acc = accuracy(&outcome.model, &test, None, 128).unwrap().accuracy();
    eprintln!(
        "[fixtures] {corpus} classifier: {} epochs, best val loss {:.4}, test acc {:.4}, {:.0}s",
        outcome.history.len(),
        outcome.best_val_loss,
        acc,
        t0.elapsed().as_secs_f64()
    );
    (outcome.model, acc, sub)
}

static STACK: Lazy<TrainedStack> = Lazy::new(|| {
    let dir = tempfile::tempdir().expect("temp dir for shared checkpoints");

    let mnist_classifier = dir.path().join("mnist-classifier.ckpt");
    let (clf, mnist_test_acc, sub) = train_reduced_classifier(Corpus::Mnist, &mnist_classifier);

    let fashion_classifier = dir.path().join("fashion-classifier.ckpt");
    let (_, fashion_test_acc, _) = train_reduced_classifier(Corpus::Fashion, &fashion_classifier);

    let t0 = Instant::now();
    let recipe = MixtureRecipe::new(MixtureFamilies::Both, SEED);
    let pairs = build_denoising_pairs(&clf, &sub, &recipe).unwrap();
    eprintln!(
        "[fixtures] mixture: {} pairs in {:.0}s",
        pairs.len(),
        t0.elapsed().as_secs_f64()
    );
    let (ptrain, pval) = split_pairs(&pairs, SEED).unwrap();

    let ae = build_autoencoder::<f32>(&AutoencoderSpec::default(), SEED).unwrap();
    let mut cfg = TrainConfig::autoencoder();
    cfg.max_epochs = 10;
    cfg.patience = 10;
    cfg.seed = SEED;
    let denoiser = dir.path().join("denoiser.ckpt");
    let t0 = Instant::now();
    let outcome = train_autoencoder(&ae, &ptrain, &pval, &cfg, Some(&denoiser)).unwrap();
    eprintln!(
        "[fixtures] denoiser: {} epochs, best val MSE {:.5}, {:.0}s",
        outcome.history.len(),
        outcome.best_val_loss,
        t0.elapsed().as_secs_f64()
    );

    TrainedStack {
        _dir: dir,
        mnist_classifier,
        denoiser,
        mnist_test_acc,
        fashion_test_acc,
    }
});

// ---------------------------------------------------------------------
// gradient oracle
// ---------------------------------------------------------------------

fn pick_coords(r: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(r);
    order.truncate(k.min(len));
    order
}

fn run_trials(name: &str, mut one: impl FnMut(u64) -> GradCheckReport) {
    let mut checked = 0usize;
    let mut probed = 0usize;
    for t in 0..TRIALS {
        let rep = one(t);
        assert!(
            rep.max_rel_err < FD_TOL,
            "{name} trial {t}: max rel err {:e} over {} coords",
            rep.max_rel_err,
            rep.checked
        );
        checked += rep.checked;
        probed += rep.checked + rep.skipped;
    }
    assert!(
        checked * 5 >= probed * 4,
        "{name}: only {checked}/{probed} coordinates were comparable"
    );
}

fn fd<F>(t: u64, purpose: u64, shape: &[usize], lo: f64, hi: f64, probes: usize, f: F) -> GradCheckReport
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let mut r = stream(SEED ^ t, purpose);
    let len: usize = shape.iter().product();
    let x0 = uniform_vec(&mut r, len, lo, hi);
    let cs = pick_coords(&mut r, len, probes);
    check_gradient(f, &x0, shape, FD_H, &cs).unwrap()
}

fn mask(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(uniform_vec(r, len, 0.5, 1.5), shape).unwrap()
}

#[test]
fn a01_gradients_match_finite_differences() {
    run_trials("add", |t| {
        let mut r = stream(SEED ^ t, 300);
        let k = Tensor::from_vec(uniform_vec(&mut r, 24, -1.0, 1.0), &[24]).unwrap();
        let m = mask(&mut r, &[24]);
        fd(t, 400, &[24], -1.5, 1.5, 6, move |x| {
            x.add(&k).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("sub", |t| {
        let mut r = stream(SEED ^ t, 301);
        let k = Tensor::from_vec(uniform_vec(&mut r, 24, -1.0, 1.0), &[24]).unwrap();
        let m = mask(&mut r, &[24]);
        fd(t, 401, &[24], -1.5, 1.5, 6, move |x| {
            x.sub(&k).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("mul", |t| {
        let mut r = stream(SEED ^ t, 302);
        let k = Tensor::from_vec(uniform_vec(&mut r, 24, -1.0, 1.0), &[24]).unwrap();
        let m = mask(&mut r, &[24]);
        fd(t, 402, &[24], -1.5, 1.5, 6, move |x| {
            x.mul(&k).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("scale", |t| {
        let mut r = stream(SEED ^ t, 303);
        let m = mask(&mut r, &[24]);
        fd(t, 403, &[24], -1.5, 1.5, 6, move |x| {
            x.scale(-1.7).mul(&m).unwrap().sum()
        })
    });

    run_trials("add_scalar", |t| {
        let mut r = stream(SEED ^ t, 304);
        let m = mask(&mut r, &[24]);
        fd(t, 404, &[24], -1.5, 1.5, 6, move |x| {
            x.add_scalar(0.37).mul(&m).unwrap().sum()
        })
    });

    run_trials("relu", |t| {
        let mut r = stream(SEED ^ t, 305);
        let m = mask(&mut r, &[40]);
        fd(t, 405, &[40], -1.0, 1.0, 8, move |x| {
            x.relu().mul(&m).unwrap().sum()
        })
    });

    run_trials("gelu", |t| {
        let mut r = stream(SEED ^ t, 306);
        let m = mask(&mut r, &[40]);
        fd(t, 406, &[40], -2.0, 2.0, 8, move |x| {
            x.gelu().mul(&m).unwrap().sum()
        })
    });

    run_trials("sigmoid", |t| {
        let mut r = stream(SEED ^ t, 307);
        let m = mask(&mut r, &[40]);
        fd(t, 407, &[40], -3.0, 3.0, 8, move |x| {
            x.sigmoid().mul(&m).unwrap().sum()
        })
    });

    run_trials("clamp", |t| {
        let mut r = stream(SEED ^ t, 308);
        let m = mask(&mut r, &[40]);
        fd(t, 408, &[40], -1.0, 1.0, 8, move |x| {
            x.clamp(-0.5, 0.5).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("reshape", |t| {
        let mut r = stream(SEED ^ t, 309);
        let m = mask(&mut r, &[4, 6]);
        fd(t, 409, &[2, 12], -1.0, 1.0, 6, move |x| {
            x.reshape(&[4, 6]).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("flatten", |t| {
        let mut r = stream(SEED ^ t, 310);
        let m = mask(&mut r, &[2, 12]);
        fd(t, 410, &[2, 3, 2, 2], -1.0, 1.0, 6, move |x| {
            x.flatten().unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("sum", |t| fd(t, 411, &[30], -2.0, 2.0, 6, |x| x.sum()));

    run_trials("mean", |t| fd(t, 412, &[30], -2.0, 2.0, 6, |x| x.mean()));

    run_trials("linear", |t| {
        let mut r = stream(SEED ^ t, 311);
        let x0 = uniform_vec(&mut r, 2 * 5, -1.0, 1.0);
        let w0 = uniform_vec(&mut r, 4 * 5, -1.0, 1.0);
        let b0 = uniform_vec(&mut r, 4, -0.5, 0.5);
        let xt = Tensor::from_vec(x0.clone(), &[2, 5]).unwrap();
        let wt = Tensor::from_vec(w0.clone(), &[4, 5]).unwrap();
        let bt = Tensor::from_vec(b0.clone(), &[4]).unwrap();
        let m = mask(&mut r, &[2, 4]);
        match t % 3 {
            0 => {
                let cs = pick_coords(&mut r, x0.len(), 5);
                check_gradient(
                    |v| v.linear(&wt, Some(&bt)).unwrap().mul(&m).unwrap().sum(),
                    &x0, &[2, 5], FD_H, &cs,
                )
                .unwrap()
            }
            1 => {
                let cs = pick_coords(&mut r, w0.len(), 5);
                check_gradient(
                    |v| xt.linear(v, Some(&bt)).unwrap().mul(&m).unwrap().sum(),
                    &w0, &[4, 5], FD_H, &cs,
                )
                .unwrap()
            }
            _ => {
                let cs = pick_coords(&mut r, b0.len(), 4);
                check_gradient(
                    |v| xt.linear(&wt, Some(v)).unwrap().mul(&m).unwrap().sum(),
                    &b0, &[4], FD_H, &cs,
                )
                .unwrap()
            }
        }
    });

    run_trials("conv2d", |t| {
        let mut r = stream(SEED ^ t, 312);
        let stride = 1 + (t as usize / 3) % 2;
        let padding = (t as usize / 6) % 2;
        let oh = (6 + 2 * padding - 3) / stride + 1;
        let x0 = uniform_vec(&mut r, 2 * 36, -1.0, 1.0);
        let w0 = uniform_vec(&mut r, 3 * 2 * 9, -1.0, 1.0);
        let b0 = uniform_vec(&mut r, 3, -0.5, 0.5);
        let xt = Tensor::from_vec(x0.clone(), &[1, 2, 6, 6]).unwrap();
        let wt = Tensor::from_vec(w0.clone(), &[3, 2, 3, 3]).unwrap();
        let bt = Tensor::from_vec(b0.clone(), &[3]).unwrap();
        let m = mask(&mut r, &[1, 3, oh, oh]);
        match t % 3 {
            0 => {
                let cs = pick_coords(&mut r, x0.len(), 5);
                check_gradient(
                    |v| v.conv2d(&wt, Some(&bt), stride, padding).unwrap().mul(&m).unwrap().sum(),
                    &x0, &[1, 2, 6, 6], FD_H, &cs,
                )
                .unwrap()
            }
            1 => {
                let cs = pick_coords(&mut r, w0.len(), 5);
                check_gradient(
                    |v| xt.conv2d(v, Some(&bt), stride, padding).unwrap().mul(&m).unwrap().sum(),
                    &w0, &[3, 2, 3, 3], FD_H, &cs,
                )
                .unwrap()
            }
            _ => {
                let cs = pick_coords(&mut r, b0.len(), 3);
                check_gradient(
                    |v| xt.conv2d(&wt, Some(v), stride, padding).unwrap().mul(&m).unwrap().sum(),
                    &b0, &[3], FD_H, &cs,
                )
                .unwrap()
            }
        }
    });

    run_trials("conv_transpose2d", |t| {
        let mut r = stream(SEED ^ t, 313);
        let stride = 1 + (t as usize / 3) % 2;
        let oh = (4 - 1) * stride + 2;
        let x0 = uniform_vec(&mut r, 3 * 16, -1.0, 1.0);
        let w0 = uniform_vec(&mut r, 3 * 2 * 4, -1.0, 1.0);
        let b0 = uniform_vec(&mut r, 2, -0.5, 0.5);
        let xt = Tensor::from_vec(x0.clone(), &[1, 3, 4, 4]).unwrap();
        let wt = Tensor::from_vec(w0.clone(), &[3, 2, 2, 2]).unwrap();
        let bt = Tensor::from_vec(b0.clone(), &[2]).unwrap();
        let m = mask(&mut r, &[1, 2, oh, oh]);
        match t % 3 {
            0 => {
                let cs = pick_coords(&mut r, x0.len(), 5);
                check_gradient(
                    |v| v.conv_transpose2d(&wt, Some(&bt), stride, 0).unwrap().mul(&m).unwrap().sum(),
                    &x0, &[1, 3, 4, 4], FD_H, &cs,
                )
                .unwrap()
            }
            1 => {
                let cs = pick_coords(&mut r, w0.len(), 5);
                check_gradient(
                    |v| xt.conv_transpose2d(v, Some(&bt), stride, 0).unwrap().mul(&m).unwrap().sum(),
                    &w0, &[3, 2, 2, 2], FD_H, &cs,
                )
                .unwrap()
            }
            _ => {
                let cs = pick_coords(&mut r, b0.len(), 2);
                check_gradient(
                    |v| xt.conv_transpose2d(&wt, Some(v), stride, 0).unwrap().mul(&m).unwrap().sum(),
                    &b0, &[2], FD_H, &cs,
                )
                .unwrap()
            }
        }
    });

    run_trials("maxpool2d", |t| {
        let mut r = stream(SEED ^ t, 314);
        let m = mask(&mut r, &[1, 2, 3, 3]);
        fd(t, 414, &[1, 2, 6, 6], -1.0, 1.0, 8, move |x| {
            x.maxpool2d(2).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("batchnorm2d train", |t| {
        let mut r = stream(SEED ^ t, 315);
        let x0 = uniform_vec(&mut r, 4 * 3 * 16, -1.0, 1.0);
        let g0 = uniform_vec(&mut r, 3, 0.5, 1.5);
        let b0 = uniform_vec(&mut r, 3, -0.5, 0.5);
        let xt = Tensor::from_vec(x0.clone(), &[4, 3, 4, 4]).unwrap();
        let gt = Tensor::from_vec(g0.clone(), &[3]).unwrap();
        let bt = Tensor::from_vec(b0.clone(), &[3]).unwrap();
        let m = mask(&mut r, &[4, 3, 4, 4]);
        let bn = move |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            // fresh running buffers per evaluation; the forward updates
            // them in place and the check must not observe that
            let rm = Tensor::zeros(&[3]);
            let rv = Tensor::full(&[3], 1.0);
            x.batchnorm2d(g, b, &rm, &rv, true, 0.1, 1e-5).unwrap()
        };
        match t % 3 {
            0 => {
                let cs = pick_coords(&mut r, x0.len(), 5);
                let (gt, bt, m, bn) = (gt.clone(), bt.clone(), m.clone(), bn);
                check_gradient(
                    move |v| bn(v, &gt, &bt).mul(&m).unwrap().sum(),
                    &x0, &[4, 3, 4, 4], FD_H, &cs,
                )
                .unwrap()
            }
            1 => {
                let cs = pick_coords(&mut r, g0.len(), 3);
                let (xt, bt, m, bn) = (xt.clone(), bt.clone(), m.clone(), bn);
                check_gradient(
                    move |v| bn(&xt, v, &bt).mul(&m).unwrap().sum(),
                    &g0, &[3], FD_H, &cs,
                )
                .unwrap()
            }
            _ => {
                let cs = pick_coords(&mut r, b0.len(), 3);
                check_gradient(
                    move |v| bn(&xt, &gt, v).mul(&m).unwrap().sum(),
                    &b0, &[3], FD_H, &cs,
                )
                .unwrap()
            }
        }
    });

    run_trials("batchnorm2d eval", |t| {
        let mut r = stream(SEED ^ t, 316);
        let x0 = uniform_vec(&mut r, 2 * 3 * 16, -1.0, 1.0);
        let g0 = uniform_vec(&mut r, 3, 0.5, 1.5);
        let b0 = uniform_vec(&mut r, 3, -0.5, 0.5);
        let rm = Tensor::from_vec(uniform_vec(&mut r, 3, -0.5, 0.5), &[3]).unwrap();
        let rv = Tensor::from_vec(uniform_vec(&mut r, 3, 0.5, 2.0), &[3]).unwrap();
        let xt = Tensor::from_vec(x0.clone(), &[2, 3, 4, 4]).unwrap();
        let gt = Tensor::from_vec(g0.clone(), &[3]).unwrap();
        let bt = Tensor::from_vec(b0.clone(), &[3]).unwrap();
        let m = mask(&mut r, &[2, 3, 4, 4]);
        match t % 3 {
            0 => {
                let cs = pick_coords(&mut r, x0.len(), 5);
                check_gradient(
                    |v| v.batchnorm2d(&gt, &bt, &rm, &rv, false, 0.1, 1e-5).unwrap().mul(&m).unwrap().sum(),
                    &x0, &[2, 3, 4, 4], FD_H, &cs,
                )
                .unwrap()
            }
            1 => {
                let cs = pick_coords(&mut r, g0.len(), 3);
                check_gradient(
                    |v| xt.batchnorm2d(v, &bt, &rm, &rv, false, 0.1, 1e-5).unwrap().mul(&m).unwrap().sum(),
                    &g0, &[3], FD_H, &cs,
                )
                .unwrap()
            }
            _ => {
                let cs = pick_coords(&mut r, b0.len(), 3);
                check_gradient(
                    |v| xt.batchnorm2d(&gt, v, &rm, &rv, false, 0.1, 1e-5).unwrap().mul(&m).unwrap().sum(),
                    &b0, &[3], FD_H, &cs,
                )
                .unwrap()
            }
        }
    });

    run_trials("dropout (frozen mask)", |t| {
        let mut r = stream(SEED ^ t, 317);
        let m = mask(&mut r, &[40]);
        let proto = stream(SEED ^ t, 417);
        let rate = if t % 4 == 0 { 0.0 } else { 0.3 };
        fd(t, 418, &[40], -1.0, 1.0, 6, move |x| {
            x.dropout(rate, true, &mut proto.clone()).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("gaussian noise (frozen draw)", |t| {
        let mut r = stream(SEED ^ t, 318);
        let m = mask(&mut r, &[40]);
        let proto = stream(SEED ^ t, 419);
        let std = if t % 4 == 0 { 0.0 } else { 0.2 };
        fd(t, 420, &[40], -1.0, 1.0, 6, move |x| {
            x.add_gaussian_noise(std, true, &mut proto.clone()).unwrap().mul(&m).unwrap().sum()
        })
    });

    run_trials("softmax cross entropy", |t| {
        let labels = [(t % 10) as u8, 3, 7, 1];
        fd(t, 421, &[4, 10], -2.0, 2.0, 8, move |x| {
            softmax_cross_entropy(x, &labels).unwrap()
        })
    });

    run_trials("mse", |t| {
        let mut r = stream(SEED ^ t, 319);
        let k0 = uniform_vec(&mut r, 24, 0.0, 1.0);
        let kt = Tensor::from_vec(k0.clone(), &[2, 12]).unwrap();
        if t % 2 == 0 {
            fd(t, 422, &[2, 12], -1.0, 1.0, 6, move |x| mse(x, &kt).unwrap())
        } else {
            fd(t, 423, &[2, 12], -1.0, 1.0, 6, move |x| mse(&kt, x).unwrap())
        }
    });

    run_trials("classifier network", |t| {
        let mut spec = tiny_classifier_spec();
        spec.dropout_rate = 0.0;
        let model = build_classifier::<f64>(&spec, SEED ^ t).unwrap();
        model.set_train();
        let labels = [3u8, 7];
        let mut r = stream(SEED ^ t, 320);
        let x0 = uniform_vec(&mut r, 2 * 1024, 0.05, 0.95);
        let cs = pick_coords(&mut r, x0.len(), 5);
        check_gradient(
            |x| softmax_cross_entropy(&model.forward(x).unwrap(), &labels).unwrap(),
            &x0, &[2, 1, 32, 32], FD_H, &cs,
        )
        .unwrap()
    });

    run_trials("autoencoder network", |t| {
        let mut spec = tiny_autoencoder_spec();
        spec.noise_std = 0.0;
        let model = build_autoencoder::<f64>(&spec, SEED ^ t).unwrap();
        model.set_train();
        let mut r = stream(SEED ^ t, 321);
        let x0 = uniform_vec(&mut r, 1024, 0.05, 0.95);
        let target = Tensor::from_vec(uniform_vec(&mut r, 1024, 0.0, 1.0), &[1, 1, 32, 32]).unwrap();
        let cs = pick_coords(&mut r, x0.len(), 5);
        check_gradient(
            |x| mse(&model.forward(x).unwrap(), &target).unwrap(),
            &x0, &[1, 1, 32, 32], FD_H, &cs,
        )
        .unwrap()
    });
}

// ---------------------------------------------------------------------
// attack contracts
// ---------------------------------------------------------------------

#[test]
fn a02_attacks_respect_budget_and_pixel_range() {
    let test = load_standard(data_dir(), Corpus::Mnist, Split::Test).unwrap();
    let sub = test.gather(&(0..1_000).collect::<Vec<_>>()).unwrap();
    let model = tiny_eval_classifier(SEED);

    for &eps in &[0.1f32, 0.3, 0.5] {
        for family in [AttackFamily::Fgsm, AttackFamily::Pgd] {
            let config = match family {
                AttackFamily::Fgsm => AttackConfig::fgsm(eps),
                AttackFamily::Pgd => {
                    let mut c = AttackConfig::pgd(eps);
                    c.seed = SEED;
                    c
                }
            };
            let set = generate_adversarial_dataset(&model, &sub, &config).unwrap();
            let clean = set.clean.images.data();
            let adv = set.adversarial.images.data();
            let mut violations = 0usize;
            for (&c, &a) in clean.iter().zip(adv.iter()) {
                if a < c - eps || a > c + eps || !(0.0..=1.0).contains(&a) {
                    violations += 1;
                }
            }
            assert_eq!(violations, 0, "{family} at eps {eps}");
        }
    }

    // eps = 0 through the full gradient path, not the short circuit
    let batch = sub.gather(&(0..128).collect::<Vec<_>>()).unwrap();
    let out = fgsm(&model, &batch.images, &batch.labels, 0.0).unwrap();
    let same = out
        .data()
        .iter()
        .zip(batch.images.data().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "eps = 0 must be bit-identical");
}

#[test]
fn a03_single_step_pgd_reduces_to_fgsm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixed.ckpt");
    save_checkpoint(&tiny_eval_classifier(SEED), &path).unwrap();
    let model = load_checkpoint::<f32>(&path).unwrap();

    let sub = mnist_test_subset(250);
    let eps = 0.3f32;
    let one_step = AttackConfig {
        family: AttackFamily::Pgd,
        epsilon: eps,
        alpha: 0.4,
        steps: 1,
        random_start: false,
        seed: SEED,
    };
    let via_pgd = generate_adversarial_dataset(&model, &sub, &one_step).unwrap();
    let via_fgsm = generate_adversarial_dataset(&model, &sub, &AttackConfig::fgsm(eps)).unwrap();
    let equal = via_pgd
        .adversarial
        .images
        .data()
        .iter()
        .zip(via_fgsm.adversarial.images.data().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(equal, "one covering PGD step must equal FGSM exactly");
}

// ---------------------------------------------------------------------
// desk-scale training targets
// ---------------------------------------------------------------------

#[test]
fn a04_reduced_classifiers_hit_training_targets() {
    let stack = &*STACK;
    assert!(
        stack.mnist_test_acc >= 0.95,
        "mnist test accuracy {:.4}",
        stack.mnist_test_acc
    );
    assert!(
        stack.fashion_test_acc >= 0.80,
        "fashion test accuracy {:.4}",
        stack.fashion_test_acc
    );
}

#[test]
fn a05_attack_curves_degrade_monotonically() {
    let clf = load_checkpoint::<f32>(&STACK.mnist_classifier).unwrap();
    let sub = mnist_test_subset(1_000);

    let grid: Vec<f32> = (0..=10).map(|i| i as f32 / 10.0).collect();
    let fg = sweep(&clf, None, &sub, &SweepConfig::new(AttackFamily::Fgsm, grid, SEED)).unwrap();
    assert_eq!(fg.len(), 11);

    let at = |rows: &[ReportRow], eps: f32| {
        rows.iter()
            .find(|r| r.epsilon == eps)
            .unwrap_or_else(|| panic!("row for eps {eps}"))
            .accuracy
    };

    for w in fg.windows(2) {
        assert!(
            w[1].accuracy <= w[0].accuracy + 0.02,
            "accuracy rose from {} at eps {} to {} at eps {}",
            w[0].accuracy, w[0].epsilon, w[1].accuracy, w[1].epsilon
        );
    }
    assert!(
        at(&fg, 0.0) - at(&fg, 0.3) >= 0.20,
        "drop by eps 0.3: clean {} vs attacked {}",
        at(&fg, 0.0), at(&fg, 0.3)
    );

    let mut pgd_cfg = SweepConfig::new(
        AttackFamily::Pgd,
        vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        SEED,
    );
    pgd_cfg.steps = Some(10);
    let pg = sweep(&clf, None, &sub, &pgd_cfg).unwrap();
    assert!(at(&pg, 0.2) <= 0.30, "pgd at eps 0.2: {}", at(&pg, 0.2));
    for row in &pg {
        let f = at(&fg, row.epsilon);
        assert!(
            row.accuracy <= f + 0.02,
            "pgd weaker than fgsm at eps {}: {} vs {}",
            row.epsilon, row.accuracy, f
        );
    }
}

#[test]
fn a06_denoiser_restores_attacked_accuracy() {
    let clf = load_checkpoint::<f32>(&STACK.mnist_classifier).unwrap();
    let den = load_checkpoint::<f32>(&STACK.denoiser).unwrap();
    let sub = mnist_test_subset(1_000);

    let clean_raw = accuracy(&clf, &sub, None, 128).unwrap().accuracy();
    let clean_def = accuracy(&clf, &sub, Some(&den), 128).unwrap().accuracy();
    assert!(
        clean_def >= clean_raw - 0.08,
        "clean accuracy: {clean_raw:.4} raw vs {clean_def:.4} defended"
    );

    for &eps in &[0.3f32, 0.5] {
        let set = generate_adversarial_dataset(&clf, &sub, &AttackConfig::fgsm(eps)).unwrap();
        let raw = accuracy(&clf, &set.adversarial, None, 128).unwrap().accuracy();
        let def = accuracy(&clf, &set.adversarial, Some(&den), 128).unwrap().accuracy();
        assert!(
            def - raw >= 0.25,
            "fgsm eps {eps}: defended {def:.4} vs undefended {raw:.4}"
        );
    }

    let mut pgd_cfg = AttackConfig::pgd(0.4);
    pgd_cfg.seed = SEED;
    let set = generate_adversarial_dataset(&clf, &sub, &pgd_cfg).unwrap();
    let def = accuracy(&clf, &set.adversarial, Some(&den), 128).unwrap().accuracy();
    assert!(def >= 0.75, "defended pgd at eps 0.4: {def:.4}");
}

// ---------------------------------------------------------------------
// reproducibility and artifact round trips
// ---------------------------------------------------------------------

#[test]
fn a07_equal_seeds_give_equal_artifacts() {
    let sub = mnist_test_subset(360);
    let (train, val) = split_train_val(&sub, SEED).unwrap();
    let mut cfg = TrainConfig::classifier();
    cfg.batch_size = 32;
    cfg.max_epochs = 3;
    cfg.patience = 3;
    cfg.seed = SEED;

    let one_history = || {
        let m = build_classifier::<f32>(&tiny_classifier_spec(), SEED).unwrap();
        let o = train_classifier(&m, &train, &val, &cfg, None).unwrap();
        history_to_csv(&o.history)
    };
    assert_eq!(one_history(), one_history());

    let model = tiny_eval_classifier(SEED);
    let scfg = SweepConfig::new(AttackFamily::Fgsm, vec![0.0, 0.2, 0.4], SEED);
    let one_report = |wall: f64| {
        let rows = sweep(&model, None, &sub, &scfg).unwrap();
        report_to_csv(&EvalReport {
            meta: ReportMeta {
                dataset: "mnist/test".into(),
                checkpoint: "in-memory".into(),
                defense: None,
                attack: scfg.describe(),
                seed: SEED,
                wall_clock_s: wall,
            },
            rows,
        })
    };
    let a = one_report(1.0);
    let b = one_report(2.0);
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_ne!(a, b);
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn a08_checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let test = load_standard(data_dir(), Corpus::Mnist, Split::Test).unwrap();
    let batch = test.gather(&(0..64).collect::<Vec<_>>()).unwrap();

    let clf = build_classifier::<f32>(&tiny_classifier_spec(), SEED).unwrap();
    clf.set_train();
    no_grad(|| clf.forward(&batch.images)).unwrap();
    clf.set_eval();
    let path = dir.path().join("clf.ckpt");
    save_checkpoint(&clf, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(forward_bits(&clf, &batch.images), forward_bits(&loaded, &batch.images));

    let ae = build_autoencoder::<f32>(&tiny_autoencoder_spec(), SEED).unwrap();
    ae.set_train();
    no_grad(|| ae.forward(&batch.images)).unwrap();
    ae.set_eval();
    let path = dir.path().join("ae.ckpt");
    save_checkpoint(&ae, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(forward_bits(&ae, &batch.images), forward_bits(&loaded, &batch.images));
}

#[test]
fn a09_idx_parsing_handles_real_and_corrupt_files() {
    for corpus in [Corpus::Mnist, Corpus::Fashion] {
        let dir = data_dir().join(corpus.to_string());
        let train = read_idx_images(dir.join("train-images-idx3-ubyte.gz")).unwrap();
        assert_eq!((train.count, train.rows, train.cols), (60_000, 28, 28));
        let test = read_idx_images(dir.join("t10k-images-idx3-ubyte.gz")).unwrap();
        assert_eq!((test.count, test.rows, test.cols), (10_000, 28, 28));
    }

    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0802u32.to_be_bytes());
    bytes.extend_from_slice(&1u32.to_be_bytes());
    bytes.extend_from_slice(&1u32.to_be_bytes());
    bytes.extend_from_slice(&1u32.to_be_bytes());
    bytes.push(0);
    let path = dir.path().join("images-idx3-ubyte");
    std::fs::write(&path, &bytes).unwrap();
    match read_idx_images(&path) {
        Err(DataError::BadMagic { found, expected }) => {
            assert_eq!(found, 0x0802);
            assert_eq!(expected, IMAGES_MAGIC);
        }
        other => panic!("expected BadMagic, got {other:?}"),
    }
}

#[test]
fn a10_sweep_reports_honor_the_csv_contract() {
    let sub = mnist_test_subset(200);
    let clf = tiny_eval_classifier(SEED);
    let den = build_autoencoder::<f32>(&tiny_autoencoder_spec(), SEED).unwrap();
    den.set_eval();

    let grid: Vec<f32> = (0..=10).map(|i| i as f32 / 10.0).collect();
    let cfg = SweepConfig::new(AttackFamily::Fgsm, grid.clone(), SEED);
    let rows = sweep(&clf, Some(&den), &sub, &cfg).unwrap();

    assert_eq!(rows.len(), 22);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.defended, i >= 11, "row {i}");
        assert_eq!(row.epsilon, grid[i % 11], "row {i}");
        assert_eq!(row.n, 200);
    }

    let report = EvalReport {
        meta: ReportMeta {
            dataset: "mnist/test".into(),
            checkpoint: "in-memory".into(),
            defense: Some("in-memory".into()),
            attack: cfg.describe(),
            seed: SEED,
            wall_clock_s: 3.5,
        },
        rows,
    };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_report(&report, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let header_line = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header_line, REPORT_HEADER);

    let parsed = parse_report(&path).unwrap();
    assert_eq!(parsed.rows, report.rows);
    assert_eq!(parsed.meta.dataset, report.meta.dataset);
    assert_eq!(parsed.meta.seed, report.meta.seed);
    assert_eq!(report_to_csv(&parsed), text);
}
