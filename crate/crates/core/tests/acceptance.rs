//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::error::Error as StdError;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bdn_core::arch::{build_trunk, composite_label_loss, prepare_image, AttributeStage, BdnModel, Head, Profile, Variant};
use bdn_core::bradley_terry::{bt_fit, simulate_tournament, BtOptions, Comparison, Winner};
use bdn_core::checkpoint::{attribute_checkpoint, model_checkpoint, scae_checkpoint};
use bdn_core::data::{generate_synthetic, manifest_to_string, Dataset, SyntheticTaskSpec};
use bdn_core::layers::{
    conv_backward, conv_forward, deconv_backward, deconv_forward, dropout_backward, dropout_forward, gap_backward,
    gap_forward, mse_loss, relu_backward, relu_forward, softmax_xent, ConvLayer, DeconvLayer,
};
use bdn_core::metrics::{compute_metrics, predict_dataset, EvalReport};
use bdn_core::network::Mode;
use bdn_core::rating::{
    distribution_kl_loss, distribution_softmax_loss, fit_gaussian, kl_gaussian, kl_loss_and_grad, mean_rating, KlForm,
    RatingGaussian, RatingHistogram,
};
use bdn_core::train::{
    finetune, finetune_bdn, plateau_detector, pretrain_scae, reconstruction_loss, style_accuracy, train_pathway,
    unsupervised_attributes, warm_start_gaussian, TrainConfig, TrainLog, ANNEAL_FACTOR, MAX_ANNEALS,
};
use bdn_core::{Shape, Tensor};

type Outcome = Result<(bool, String), Box<dyn StdError>>;

struct Suite {
    passed: usize,
    failed: Vec<&'static str>,
}

impl Suite {
    fn run(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {}", e)),
        };
        println!(
            "{} {}: {} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            name,
            detail,
            start.elapsed().as_secs_f64()
        );
        if pass {
            self.passed += 1;
        } else {
            self.failed.push(name);
        }
    }
}

fn main() -> ExitCode {
    println!("acceptance criteria");
    let mut suite = Suite {
        passed: 0,
        failed: Vec::new(),
    };
    suite.run("reference-values-documented", reference_values);
    suite.run("gradient-suite", gradient_suite);
    suite.run("convolution-oracle", convolution_oracle);
    suite.run("gaussian-kl-fidelity", kl_fidelity);
    suite.run("bradley-terry-recovery", bradley_terry_recovery);
    suite.run("gaussian-fitting", gaussian_fitting);
    let mut e2e = None;
    suite.run("end-to-end-toy", || {
        let r = end_to_end()?;
        let out = (r.pass(), r.detail());
        e2e = Some(r);
        Ok(out)
    });
    suite.run("protocol-assertions", || protocol(e2e.as_ref()));
    suite.run("determinism", determinism);
    println!(
        "acceptance: {} of {} criteria passed",
        suite.passed,
        suite.passed + suite.failed.len()
    );
    if suite.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", suite.failed.join(", "));
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------

fn reference_values() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path)?;
    let wanted = ["76.80%", "76.04%", "0.1743", "96%", "78.08%", "77.27%"];
    let missing: Vec<&str> = wanted.iter().copied().filter(|v| !text.contains(v)).collect();
    let labelled = text.to_lowercase().contains("reference value");
    Ok((
        missing.is_empty() && labelled,
        if missing.is_empty() {
            format!("README lists all {} reference numbers as reference values", wanted.len())
        } else {
            format!("README lacks {:?}", missing)
        },
    ))
}

// ---------------------------------------------------------------------------

const FD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(n.abs()).max(1e-6)
    }
}

/// Worst relative error between `analytic` and central differences of `f`
/// at `x`.
fn fd_check(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        p[i] = x[i] + FD_EPS;
        let up = f(&p);
        p[i] = x[i] - FD_EPS;
        let down = f(&p);
        p[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_EPS)));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

fn with(shape: Shape, v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = (rng.random_range(1..=3), rng.random_range(1..=3));
    let s = (rng.random_range(1..=2), rng.random_range(1..=2));
    let p = rng.random_range(0..=1);
    let h = rng.random_range(k.0.max(2)..=6);
    let w = rng.random_range(k.1.max(2)..=6);
    let mut layer = ConvLayer::new(cin, cout, k, s, (p, p)).unwrap();
    layer.weight = rand_tensor(rng, layer.weight.shape(), 1.0);
    layer.bias = rand_tensor(rng, layer.bias.shape(), 1.0);
    let x = rand_tensor(rng, Shape::new(n, cin, h, w), 1.0);
    let r = rand_tensor(rng, conv_forward(&x, &layer).unwrap().shape(), 1.0);
    let g = conv_backward(&x, &layer, &r).unwrap();
    let gx = g.input.expect("input gradient");
    let e_x = fd_check(x.data(), gx.data(), |v| dot(&conv_forward(&with(x.shape(), v), &layer).unwrap(), &r));
    let ws = layer.weight.shape();
    let e_w = fd_check(layer.weight.data(), g.weight.data(), |v| {
        let mut l = layer.clone();
        l.weight = with(ws, v);
        dot(&conv_forward(&x, &l).unwrap(), &r)
    });
    let bs = layer.bias.shape();
    let e_b = fd_check(layer.bias.data(), g.bias.data(), |v| {
        let mut l = layer.clone();
        l.bias = with(bs, v);
        dot(&conv_forward(&x, &l).unwrap(), &r)
    });
    e_x.max(e_w).max(e_b)
}

fn deconv_instance(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = (rng.random_range(1..=3), rng.random_range(1..=3));
        let s = (rng.random_range(1..=2), rng.random_range(1..=2));
        let p = rng.random_range(0..=1);
        let op = (rng.random_range(0..s.0), rng.random_range(0..s.1));
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let Ok(mut layer) = DeconvLayer::new(cin, cout, k, s, (p, p), op) else {
            continue;
        };
        layer.weight = rand_tensor(rng, layer.weight.shape(), 1.0);
        layer.bias = rand_tensor(rng, layer.bias.shape(), 1.0);
        let x = rand_tensor(rng, Shape::new(n, cin, h, w), 1.0);
        let Ok(out) = deconv_forward(&x, &layer) else {
            continue;
        };
        let r = rand_tensor(rng, out.shape(), 1.0);
        let g = deconv_backward(&x, &layer, &r).unwrap();
        let gx = g.input.expect("input gradient");
        let e_x = fd_check(x.data(), gx.data(), |v| dot(&deconv_forward(&with(x.shape(), v), &layer).unwrap(), &r));
        let ws = layer.weight.shape();
        let e_w = fd_check(layer.weight.data(), g.weight.data(), |v| {
            let mut l = layer.clone();
            l.weight = with(ws, v);
            dot(&deconv_forward(&x, &l).unwrap(), &r)
        });
        let bs = layer.bias.shape();
        let e_b = fd_check(layer.bias.data(), g.bias.data(), |v| {
            let mut l = layer.clone();
            l.bias = with(bs, v);
            dot(&deconv_forward(&x, &l).unwrap(), &r)
        });
        return e_x.max(e_w).max(e_b);
    }
}

fn small_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    )
}

fn relu_instance(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng);
    // Entries stay at least 0.1 from the kink; the step is far smaller.
    let x = Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let r = rand_tensor(rng, shape, 1.0);
    let g = relu_backward(&x, &r).unwrap();
    fd_check(x.data(), g.data(), |v| dot(&relu_forward(&with(shape, v)), &r))
}

fn gap_instance(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng);
    let x = rand_tensor(rng, shape, 1.0);
    let r = rand_tensor(rng, Shape::new(shape.n, shape.c, 1, 1), 1.0);
    let g = gap_backward(shape, &r).unwrap();
    fd_check(x.data(), g.data(), |v| dot(&gap_forward(&with(shape, v)), &r))
}

fn dropout_instance(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng);
    let seed = rng.random::<u64>();
    let x = rand_tensor(rng, shape, 1.0);
    let r = rand_tensor(rng, shape, 1.0);
    let (_, mask) = dropout_forward(&x, 0.5, seed, true).unwrap();
    let g = dropout_backward(&mask, &r).unwrap();
    fd_check(x.data(), g.data(), |v| {
        dot(&dropout_forward(&with(shape, v), 0.5, seed, true).unwrap().0, &r)
    })
}

fn loss_check(x: &Tensor, loss: impl Fn(&Tensor) -> (f64, Tensor)) -> f64 {
    let (_, g) = loss(x);
    fd_check(x.data(), g.data(), |v| loss(&with(x.shape(), v)).0)
}

fn histogram(rng: &mut ChaCha8Rng) -> RatingHistogram {
    loop {
        let h = RatingHistogram(std::array::from_fn(|_| rng.random_range(0..20)));
        if h.total() > 0 {
            return h;
        }
    }
}

fn xent_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let x = rand_tensor(rng, Shape::new(n, c, 1, 1), 3.0);
    loss_check(&x, |t| softmax_xent(t, &labels).unwrap())
}

fn mse_instance(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng);
    let target = rand_tensor(rng, shape, 1.0);
    let x = rand_tensor(rng, shape, 1.0);
    loss_check(&x, |t| mse_loss(t, &target).unwrap())
}

fn kl_head_instance(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=4);
    let targets: Vec<RatingGaussian> = (0..n)
        .map(|_| RatingGaussian::new(rng.random_range(1.0..10.0), rng.random_range(0.3..3.0)).unwrap())
        .collect();
    let x = Tensor::from_fn(Shape::new(n, 2, 1, 1), |_, c, _, _| {
        if c == 0 {
            rng.random_range(1.0..10.0)
        } else {
            rng.random_range(-1.0..2.0)
        }
    });
    loss_check(&x, |t| kl_loss_and_grad(t, &targets, KlForm::Corrected).unwrap())
}

fn composite_instance(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=3);
    let labels: Vec<Vec<bool>> = (0..n).map(|_| (0..14).map(|_| rng.random()).collect()).collect();
    let x = rand_tensor(rng, Shape::new(n, 28, 1, 1), 3.0);
    loss_check(&x, |t| composite_label_loss(t, &labels).unwrap())
}

fn dist_softmax_instance(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=3);
    let hists: Vec<RatingHistogram> = (0..n).map(|_| histogram(rng)).collect();
    let x = rand_tensor(rng, Shape::new(n, 10, 1, 1), 3.0);
    loss_check(&x, |t| distribution_softmax_loss(t, &hists).unwrap())
}

fn dist_kl_instance(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=3);
    let hists: Vec<RatingHistogram> = (0..n).map(|_| histogram(rng)).collect();
    let x = rand_tensor(rng, Shape::new(n, 10, 1, 1), 3.0);
    loss_check(&x, |t| distribution_kl_loss(t, &hists).unwrap())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks: [(&str, fn(&mut ChaCha8Rng) -> f64); 11] = [
        ("conv", conv_instance),
        ("deconv", deconv_instance),
        ("relu", relu_instance),
        ("gap", gap_instance),
        ("dropout", dropout_instance),
        ("softmax-xent", xent_instance),
        ("mse", mse_instance),
        ("gaussian-kl", kl_head_instance),
        ("composite-28", composite_instance),
        ("dist10-softmax", dist_softmax_instance),
        ("dist10-kl", dist_kl_instance),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst_all: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, check) in &checks {
        let worst = (0..INSTANCES).map(|_| check(&mut rng)).fold(0.0, f64::max);
        worst_all = worst_all.max(worst);
        parts.push(format!("{} {:.1e}", name, worst));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst_all < GRAD_TOL && secs < 120.0,
        format!(
            "{} instances each, worst relative error {:.2e} (< {:.0e}), {:.1}s (< 120s); {}",
            INSTANCES,
            worst_all,
            GRAD_TOL,
            secs,
            parts.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------------------

fn direct_conv(x: &Tensor, l: &ConvLayer) -> Vec<f64> {
    let s = x.shape();
    let (kh, kw) = l.kernel;
    let (sh, sw) = l.stride;
    let (ph, pw) = l.padding;
    let oh = (s.h + 2 * ph - kh) / sh + 1;
    let ow = (s.w + 2 * pw - kw) / sw + 1;
    let mut out = Vec::with_capacity(s.n * l.out_channels * oh * ow);
    for n in 0..s.n {
        for o in 0..l.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = l.bias.data()[o];
                    for c in 0..s.c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sh + i) as isize - ph as isize;
                                let ix = (xx * sw + j) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += l.weight.at(o, c, i, j) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn convolution_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for n in 1..=2 {
        for cin in 1..=4 {
            for h in 1..=8 {
                for w in 1..=8 {
                    for kh in 1..=3 {
                        for kw in 1..=3 {
                            for sh in 1..=2 {
                                for sw in 1..=2 {
                                    for p in 0..=1 {
                                        if h + 2 * p < kh || w + 2 * p < kw {
                                            continue;
                                        }
                                        let cout = 1 + (cases % 3);
                                        let mut l = ConvLayer::new(cin, cout, (kh, kw), (sh, sw), (p, p))?;
                                        l.weight = rand_tensor(&mut rng, l.weight.shape(), 1.0);
                                        l.bias = rand_tensor(&mut rng, l.bias.shape(), 1.0);
                                        let x = rand_tensor(&mut rng, Shape::new(n, cin, h, w), 1.0);
                                        let got = conv_forward(&x, &l)?;
                                        let want = direct_conv(&x, &l);
                                        if got.len() != want.len() {
                                            return Ok((false, format!("output length mismatch at {:?}", x.shape())));
                                        }
                                        for (a, b) in got.data().iter().zip(&want) {
                                            worst = worst.max((a - b).abs());
                                        }
                                        cases += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("{} configurations up to 2x4x8x8, max |diff| {:.1e} (<= 1e-12)", cases, worst),
    ))
}

// ---------------------------------------------------------------------------

fn log_normal_pdf(x: f64, g: &RatingGaussian) -> f64 {
    let z = (x - g.mu) / g.sigma;
    -0.5 * z * z - g.sigma.ln() - 0.5 * (2.0 * PI).ln()
}

/// Composite Simpson's rule for KL(p || q) over 12 standard deviations of p.
fn kl_quadrature(p: &RatingGaussian, q: &RatingGaussian) -> f64 {
    let steps = 20_000;
    let (a, b) = (p.mu - 12.0 * p.sigma, p.mu + 12.0 * p.sigma);
    let h = (b - a) / steps as f64;
    let f = |x: f64| {
        let lp = log_normal_pdf(x, p);
        lp.exp() * (lp - log_normal_pdf(x, q))
    };
    let mut s = f(a) + f(b);
    for i in 1..steps {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn kl_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_quad: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    for _ in 0..100 {
        let p = RatingGaussian::new(rng.random_range(1.0..10.0), rng.random_range(0.3..3.0))?;
        let q = RatingGaussian::new(rng.random_range(1.0..10.0), rng.random_range(0.3..3.0))?;
        worst_quad = worst_quad.max((kl_gaussian(&p, &q, KlForm::Corrected)? - kl_quadrature(&p, &q)).abs());
        worst_self = worst_self.max(kl_gaussian(&p, &p, KlForm::Corrected)?.abs());
    }
    // log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 m2^2) - 1/2, worked by hand.
    let hand = [
        ((6.0, 1.0), (5.0, 2.0), 0.2331471805599453),
        ((5.0, 1.0), (5.0, 1.0), -0.48),
        ((3.0, 0.5), (4.0, 1.5), 0.6376747886681098),
    ];
    let mut worst_literal: f64 = 0.0;
    for ((m1, s1), (m2, s2), want) in hand {
        let got = kl_gaussian(&RatingGaussian::new(m1, s1)?, &RatingGaussian::new(m2, s2)?, KlForm::Literal)?;
        worst_literal = worst_literal.max((got - want).abs());
    }
    Ok((
        worst_quad < 1e-6 && worst_self <= 1e-12 && worst_literal < 1e-14,
        format!(
            "quadrature max |diff| {:.1e} (< 1e-6) over 100 pairs; KL(N,N) max {:.1e}; literal form max |diff| {:.1e} at 3 hand points",
            worst_quad, worst_self, worst_literal
        ),
    ))
}

// ---------------------------------------------------------------------------

fn lp_profile() -> Vec<(String, f64)> {
    [
        ("groundtruth", 1.0),
        ("reflection", 0.99),
        ("scaling", 0.94),
        ("small-noise", 0.87),
        ("large-noise", 0.63),
        ("squeezing", 0.55),
        ("rotation", 0.26),
        ("alter-rgb", 0.10),
    ]
    .iter()
    .map(|&(k, v)| (k.to_string(), v))
    .collect()
}

fn bradley_terry_recovery() -> Outcome {
    let truth = lp_profile();
    let order: Vec<&str> = truth.iter().map(|(k, _)| k.as_str()).collect();
    let mut all_ok = true;
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let comps = simulate_tournament(&truth, 20_000, seed)?;
        let fit = bt_fit(&comps, &BtOptions::default())?;
        let err = truth
            .iter()
            .map(|(k, v)| (fit.lp_factors[k] - v).abs())
            .fold(0.0, f64::max);
        let ranked = fit.ranked();
        let rank_ok = ranked.iter().map(|(k, _)| k.as_str()).eq(order.iter().copied());
        all_ok &= err <= 0.05 && rank_ok;
        per_seed.push(format!(
            "seed {} max err {:.3}{} rank {}",
            seed,
            err,
            if err <= 0.05 { "" } else { " (>0.05)" },
            if rank_ok { "ok" } else { "wrong" }
        ));
    }
    let mut worst_two: f64 = 0.0;
    for (w, l) in [(7usize, 3usize), (12, 30), (1, 4), (250, 101)] {
        let mut comps = Vec::new();
        comps.extend((0..w).map(|_| Comparison::new("a", "groundtruth", Winner::A)));
        comps.extend((0..l).map(|_| Comparison::new("a", "groundtruth", Winner::B)));
        let opts = BtOptions {
            tol: 1e-12,
            ..BtOptions::default()
        };
        let fit = bt_fit(&comps, &opts)?;
        worst_two = worst_two.max((fit.lp_factors["a"] - w as f64 / l as f64).abs());
    }
    let two_ok = worst_two <= 1e-6;
    Ok((
        all_ok && two_ok,
        format!(
            "20000 comparisons: {}; two-item closed form max |diff| {:.1e}",
            per_seed.join("; "),
            worst_two
        ),
    ))
}

// ---------------------------------------------------------------------------

fn gaussian_fitting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let normal = Normal::<f64>::new(6.2, 1.1)?;
    let mut counts = [0u32; 10];
    for _ in 0..100_000 {
        let r = normal.sample(&mut rng).round().clamp(1.0, 10.0) as usize;
        counts[r - 1] += 1;
    }
    let big = RatingHistogram(counts);
    let mu = fit_gaussian(&big)?.mu;
    let fixtures = [
        big,
        RatingHistogram([0, 0, 0, 0, 1, 0, 0, 0, 0, 0]),
        RatingHistogram([1, 2, 3, 4, 5, 6, 7, 8, 9, 10]),
        RatingHistogram([7, 0, 0, 0, 0, 0, 0, 0, 0, 3]),
        RatingHistogram([0, 3, 11, 29, 54, 48, 30, 15, 6, 4]),
    ];
    let mut exact = true;
    for h in &fixtures {
        exact &= fit_gaussian(h)?.mu == mean_rating(h)?;
    }
    Ok((
        (mu - 6.2).abs() <= 0.05 && exact,
        format!(
            "fitted mu {:.4} from 1e5 draws of N(6.2, 1.1) (|err| {:.4} <= 0.05); mu == mean_rating on {} fixtures: {}",
            mu,
            (mu - 6.2).abs(),
            fixtures.len(),
            exact
        ),
    ))
}

// ---------------------------------------------------------------------------

const TOY_STYLES: [usize; 4] = [0, 1, 2, 3];

fn toy_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        augmentation: "none".into(),
        epochs_scae: 20,
        epochs_pathway: 40,
        epochs_finetune: 20,
        seed: 0,
        profile: Profile::Desk,
        ..TrainConfig::default()
    }
}

struct EndToEnd {
    scae_before: f64,
    scae_after: f64,
    pathway_acc: Vec<f64>,
    bdn_acc: f64,
    bfcn_acc: f64,
    kl_warm: f64,
    kl_tuned: f64,
    frozen_identical: bool,
    logs: Vec<TrainLog>,
    secs: f64,
}

impl EndToEnd {
    fn checks(&self) -> [bool; 5] {
        [
            self.scae_after <= 0.7 * self.scae_before,
            self.pathway_acc.iter().all(|&a| a > 0.9),
            self.bdn_acc > 0.85 && self.bfcn_acc < self.bdn_acc,
            self.kl_tuned <= 0.5 * self.kl_warm,
            self.secs < 1800.0,
        ]
    }

    fn pass(&self) -> bool {
        self.checks().iter().all(|&c| c)
    }

    fn detail(&self) -> String {
        let c = self.checks();
        let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
        format!(
            "(a) reconstruction {:.5} -> {:.5}, drop {:.1}% {}; (b) pathway accuracy {:?} {}; (c) BDN {:.3} vs BFCN {:.3} {}; (d) Gaussian KL {:.4} -> {:.4} {}; runtime {:.0}s {}",
            self.scae_before,
            self.scae_after,
            100.0 * (1.0 - self.scae_after / self.scae_before),
            mark(c[0]),
            self.pathway_acc.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mark(c[1]),
            self.bdn_acc,
            self.bfcn_acc,
            mark(c[2]),
            self.kl_warm,
            self.kl_tuned,
            mark(c[3]),
            self.secs,
            mark(c[4]),
        )
    }
}

fn report(model: &BdnModel, test: &Dataset) -> Result<EvalReport, Box<dyn StdError>> {
    let all: Vec<usize> = (0..test.len()).collect();
    Ok(compute_metrics(&predict_dataset(model, test, &all)?, test.records(), 0.0)?)
}

fn average_kl(model: &BdnModel, test: &Dataset) -> Result<f64, Box<dyn StdError>> {
    Ok(report(model, test)?
        .distribution
        .ok_or("model has no distribution head")?
        .average_kl)
}

fn end_to_end() -> Result<EndToEnd, Box<dyn StdError>> {
    let start = Instant::now();
    let cfg = toy_config();
    let spec = SyntheticTaskSpec::focused(&TOY_STYLES)?;
    let train = generate_synthetic(&spec, 500, 1000)?;
    let test = generate_synthetic(&spec, 200, 2000)?;

    let untrained = pretrain_scae(&train, 1, &TrainConfig { epochs_scae: 0, ..cfg.clone() })?.0;
    let scae_before = reconstruction_loss(&untrained, &train, cfg.batch_size)?;
    let (scae, scae_log) = pretrain_scae(&train, 1, &cfg)?;
    let scae_after = reconstruction_loss(&scae, &train, cfg.batch_size)?;
    let mut logs = vec![scae_log];

    let all: Vec<usize> = (0..test.len()).collect();
    let mut pathway_acc = Vec::new();
    let mut stages = Vec::new();
    for &style in &TOY_STYLES {
        let (p, log) = train_pathway(&train, style, &scae, 0, &cfg)?;
        pathway_acc.push(style_accuracy(&p.pathway, &test, &all, style)?);
        stages.push(p.state());
        logs.push(log);
    }
    let stage = AttributeStage::combine(stages)?;
    let (bdn, log) = finetune_bdn(&train, &stage, Variant::Bdn, Head::Binary, false, &cfg)?;
    logs.push(log);
    let bdn_acc = report(&bdn, &test)?.accuracy.ok_or("no evaluable test images")?;

    let (merged, log) = pretrain_scae(&train, TOY_STYLES.len(), &cfg)?;
    logs.push(log);
    let bfcn_stage = unsupervised_attributes(&merged, &cfg)?;
    let (bfcn, log) = finetune_bdn(&train, &bfcn_stage, Variant::Bfcn, Head::Binary, false, &cfg)?;
    logs.push(log);
    let bfcn_acc = report(&bfcn, &test)?.accuracy.ok_or("no evaluable test images")?;

    let mut gauss = warm_start_gaussian(&bdn)?;
    let kl_warm = average_kl(&gauss, &test)?;
    let before: Vec<Vec<f64>> = gauss.pathway_params().iter().map(|(_, t)| t.data().to_vec()).collect();
    logs.push(finetune(&mut gauss, &train, &cfg)?);
    let after: Vec<Vec<f64>> = gauss.pathway_params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let kl_tuned = average_kl(&gauss, &test)?;

    Ok(EndToEnd {
        scae_before,
        scae_after,
        pathway_acc,
        bdn_acc,
        bfcn_acc,
        kl_warm,
        kl_tuned,
        frozen_identical: gauss.frozen_pathways && before == after,
        logs,
        secs: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------

/// Every rate change in a log must be an exact division by the anneal factor,
/// at most `MAX_ANNEALS` times per stage.
fn anneal_trace_ok(log: &TrainLog) -> (bool, usize) {
    let mut ok = true;
    let mut anneals = 0;
    for w in log.records.windows(2) {
        if w[0].stage != w[1].stage || w[0].lr == w[1].lr {
            continue;
        }
        anneals += 1;
        ok &= w[1].lr == w[0].lr / ANNEAL_FACTOR;
    }
    (ok && anneals <= MAX_ANNEALS, anneals)
}

fn protocol(e2e: Option<&EndToEnd>) -> Outcome {
    let flat = plateau_detector(&[1.0; 60], 3, 1e-3);
    let flat_ok = flat.len() == MAX_ANNEALS && ANNEAL_FACTOR == 10.0;

    let mut cfg = toy_config();
    cfg.epochs_scae = 1;
    cfg.epochs_pathway = 1;
    cfg.epochs_finetune = 12;
    cfg.plateau_patience = 1;
    cfg.plateau_min_delta = 10.0;
    cfg.validation_fraction = 0.2;
    let spec = SyntheticTaskSpec {
        height: 32,
        width: 32,
        ..SyntheticTaskSpec::focused(&[0, 1])?
    };
    let data = generate_synthetic(&spec, 40, 77)?;
    let scae = pretrain_scae(&data, 1, &cfg)?.0;
    let stage = AttributeStage::combine(vec![
        train_pathway(&data, 0, &scae, 0, &cfg)?.0.state(),
        train_pathway(&data, 1, &scae, 0, &cfg)?.0.state(),
    ])?;
    let (frozen, forced) = finetune_bdn(&data, &stage, Variant::Bdn, Head::Binary, true, &cfg)?;
    let (forced_ok, forced_anneals) = anneal_trace_ok(&forced);
    let pinned: Vec<Vec<f64>> = stage.trunks.iter().flat_map(|t| t.params().into_iter().map(|(_, p)| p.data().to_vec())).collect();
    let kept: Vec<Vec<f64>> = frozen.pathway_params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let frozen_ok = pinned == kept;

    let mut e2e_ok = true;
    let mut e2e_anneals = Vec::new();
    if let Some(r) = e2e {
        for log in &r.logs {
            let (ok, n) = anneal_trace_ok(log);
            e2e_ok &= ok;
            e2e_anneals.push(n);
        }
        e2e_ok &= r.frozen_identical;
    }

    let trunks = (0..14).map(|i| build_trunk(Profile::Full, i)).collect();
    let full = BdnModel::new(Variant::Bdn, Head::Binary, Profile::Full, trunks, (0..14).collect(), 3)?;
    let mut shapes_ok = true;
    let mut seen = Vec::new();
    for (h, w) in [(64, 64), (48, 80)] {
        let img = bdn_core::rgb::RgbImage::from_fn(h, w, |y, x| [(y * 3) as u8, (x * 2) as u8, 128])?;
        let (x, hsv) = prepare_image(&img, true)?;
        let t = full.forward(&x, &hsv.ok_or("no hsv")?, Mode::Infer)?;
        let a = t.attributes().shape();
        shapes_ok &= a == Shape::new(1, 3 + 14 * 64, h / 4, w / 4);
        seen.push(format!("{}x{} -> {}", h, w, a));
    }

    Ok((
        flat_ok && forced_ok && forced_anneals == MAX_ANNEALS && frozen_ok && e2e_ok && shapes_ok,
        format!(
            "flat-loss anneals {:?}; forced-plateau run annealed {} times by exactly /{} ({}); toy-run anneals per stage {:?} ({}); frozen pathways bit-identical: {}; attributes {}",
            flat,
            forced_anneals,
            ANNEAL_FACTOR,
            if forced_ok { "ok" } else { "bad trace" },
            e2e_anneals,
            if e2e_ok { "ok" } else { "bad" },
            frozen_ok,
            seen.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------------------

fn pipeline_artifacts(seed: u64) -> Result<Vec<Vec<u8>>, Box<dyn StdError>> {
    let cfg = TrainConfig {
        batch_size: 16,
        epochs_scae: 2,
        epochs_pathway: 2,
        epochs_finetune: 2,
        seed,
        ..TrainConfig::default()
    };
    let spec = SyntheticTaskSpec {
        height: 32,
        width: 32,
        ..SyntheticTaskSpec::focused(&[0, 1])?
    };
    let train = generate_synthetic(&spec, 48, seed)?;
    let test = generate_synthetic(&spec, 16, seed + 1)?;
    let mut out = vec![manifest_to_string(&train.manifest)?.into_bytes()];
    out.extend(train.images.iter().map(|i| i.to_raw_bytes()));

    let (scae, log) = pretrain_scae(&train, 1, &cfg)?;
    out.push(scae_checkpoint(&scae).to_bytes()?);
    let mut logs = log;
    let mut stages = Vec::new();
    for style in [0, 1] {
        let (p, log) = train_pathway(&train, style, &scae, 0, &cfg)?;
        out.push(attribute_checkpoint(&p.with_head()).to_bytes()?);
        stages.push(p.state());
        logs.extend(log);
    }
    let stage = AttributeStage::combine(stages)?;
    let (bdn, log) = finetune_bdn(&train, &stage, Variant::Bdn, Head::Binary, false, &cfg)?;
    logs.extend(log);
    out.push(model_checkpoint(&bdn).to_bytes()?);
    out.push(report(&bdn, &test)?.to_records().into_bytes());

    let (merged, log) = pretrain_scae(&train, 2, &cfg)?;
    logs.extend(log);
    let (bfcn, log) = finetune_bdn(&train, &unsupervised_attributes(&merged, &cfg)?, Variant::Bfcn, Head::Binary, false, &cfg)?;
    logs.extend(log);
    out.push(model_checkpoint(&bfcn).to_bytes()?);

    let mut gauss = warm_start_gaussian(&bdn)?;
    logs.extend(finetune(&mut gauss, &train, &cfg)?);
    out.push(model_checkpoint(&gauss).to_bytes()?);
    out.push(report(&gauss, &test)?.to_records().into_bytes());
    out.push(logs.without_wall_clock().to_jsonl().into_bytes());
    Ok(out)
}

fn determinism() -> Outcome {
    let a = pipeline_artifacts(5)?;
    let b = pipeline_artifacts(5)?;
    let c = pipeline_artifacts(6)?;
    let same = a == b;
    let differs = a != c;
    let bytes: usize = a.iter().map(Vec::len).sum();
    Ok((
        same && differs,
        format!(
            "two runs with identical seeds and configs: {} artifacts ({} bytes) {}; a different seed changes them: {}",
            a.len(),
            bytes,
            if same { "bit-identical" } else { "DIFFER" },
            differs
        ),
    ))
}
