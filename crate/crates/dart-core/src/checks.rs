//! Self-check suites runnable from the command line: finite-difference
//! gradient checks for every differentiable building block, soundness checks
//! for the attack implementations, and numeric invariants of the loss
//! plumbing. Each check folds many seeded instances into one result row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{linf_distance, perturb, AttackConfig};
use crate::data::{epoch_batches, DatasetSpec};
use crate::hashing::derive_seed;
use crate::model::{cdan_backward_features, cdan_input, Model, ModelConfig};
use crate::tensor::{
    affine_backward, affine_forward, cross_entropy, gradient_reversal_backward,
    gradient_reversal_forward, kl_divergence, mse, normalized_entropy, relu_backward,
    relu_forward, softmax, Tensor,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest tolerated relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Slack on the attack budget check, absorbing float projection rounding.
pub const ATTACK_TOLERANCE: f64 = 1e-12;
/// Seeded instances per gradient check.
const GRAD_INSTANCES: usize = 20;

/// Outcome of one named check: how many cases ran, the worst observed
/// metric, and whether everything stayed inside tolerance.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub worst: f64,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, cases: usize, worst: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            cases,
            worst,
            detail,
        }
    }

    fn fail(name: &str, cases: usize, worst: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            cases,
            worst,
            detail,
        }
    }

    fn from_metric(name: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        let detail = format!("worst {worst:.3e}, tolerance {tolerance:.0e}");
        if worst <= tolerance {
            Self::pass(name, cases, worst, detail)
        } else {
            Self::fail(name, cases, worst, detail)
        }
    }

    fn from_error(name: &str, err: impl std::fmt::Display) -> Self {
        Self::fail(name, 0, f64::INFINITY, format!("errored: {err}"))
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// One line per check, PASS/FAIL first so failures stand out in a terminal.
pub fn render_text(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{} {:<28} cases {:>6}  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.detail
        ));
    }
    out
}

/// Relative error that degrades to absolute near zero, so dead units and
/// exactly-zero gradients do not divide by noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn rng_for(base_seed: u64, label: &str, instance: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base_seed, label, instance as u64))
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(rows, cols, data).expect("positive dims")
}

/// Random tensor with entries kept away from zero, for kinked activations.
fn random_tensor_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect();
    Tensor::new(rows, cols, data).expect("positive dims")
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// Central finite difference of `loss` over every entry of `x`, compared
/// entrywise against `analytic`; returns the worst relative error.
fn fd_against(
    x: &Tensor,
    analytic: &Tensor,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for idx in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[idx] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[idx], numeric));
    }
    worst
}

fn check_affine(base_seed: u64) -> CheckResult {
    let name = "grad_affine";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:affine", i);
        let (b, din, dout) = (
            rng.gen_range(2..6),
            rng.gen_range(2..6),
            rng.gen_range(2..6),
        );
        let input = random_tensor(&mut rng, b, din, 1.0);
        let weight = random_tensor(&mut rng, din, dout, 1.0);
        let bias = random_tensor(&mut rng, 1, dout, 1.0);
        // Project the output onto a fixed random direction so the loss is
        // scalar; the upstream gradient is then that direction itself.
        let proj = random_tensor(&mut rng, b, dout, 1.0);
        let loss_with = |x: &Tensor, w: &Tensor, bb: &Tensor| {
            let out = affine_forward(x, w, bb).expect("shapes fixed");
            out.data().iter().zip(proj.data()).map(|(o, p)| o * p).sum::<f64>()
        };
        let (gin, gw, gb) = match affine_backward(&proj, &input, &weight) {
            Ok(v) => v,
            Err(e) => return CheckResult::from_error(name, e),
        };
        worst = worst.max(fd_against(&input, &gin, |x| loss_with(x, &weight, &bias)));
        worst = worst.max(fd_against(&weight, &gw, |w| loss_with(&input, w, &bias)));
        worst = worst.max(fd_against(&bias, &gb, |bb| loss_with(&input, &weight, bb)));
        cases += (input.data().len() + weight.data().len() + bias.data().len()) * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

fn check_relu(base_seed: u64) -> CheckResult {
    let name = "grad_relu";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:relu", i);
        let (b, d) = (rng.gen_range(2..6), rng.gen_range(2..8));
        let input = random_tensor_off_kink(&mut rng, b, d);
        let proj = random_tensor(&mut rng, b, d, 1.0);
        let analytic = match relu_backward(&proj, &input) {
            Ok(v) => v,
            Err(e) => return CheckResult::from_error(name, e),
        };
        worst = worst.max(fd_against(&input, &analytic, |x| {
            relu_forward(x)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(o, p)| o * p)
                .sum()
        }));
        cases += input.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

fn check_cross_entropy(base_seed: u64) -> CheckResult {
    let name = "grad_cross_entropy";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:cross_entropy", i);
        let (b, c) = (rng.gen_range(2..6), rng.gen_range(2..5));
        let logits = random_tensor(&mut rng, b, c, 2.0);
        let labels = random_labels(&mut rng, b, c);
        let analytic = match cross_entropy(&logits, &labels) {
            Ok((_, g)) => g,
            Err(e) => return CheckResult::from_error(name, e),
        };
        worst = worst.max(fd_against(&logits, &analytic, |x| {
            cross_entropy(x, &labels).expect("shapes fixed").0
        }));
        cases += logits.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

fn check_kl(base_seed: u64) -> CheckResult {
    let name = "grad_kl_divergence";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:kl", i);
        let (b, c) = (rng.gen_range(2..6), rng.gen_range(2..5));
        let temperature = if i % 2 == 0 { 1.0 } else { 2.0 };
        let teacher = random_tensor(&mut rng, b, c, 2.0);
        let student = random_tensor(&mut rng, b, c, 2.0);
        let wdata = (0..b).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let weights = Tensor::new(b, 1, wdata).expect("positive dims");
        let analytic = match kl_divergence(&teacher, &student, temperature, &weights) {
            Ok((_, g)) => g,
            Err(e) => return CheckResult::from_error(name, e),
        };
        worst = worst.max(fd_against(&student, &analytic, |x| {
            kl_divergence(&teacher, x, temperature, &weights)
                .expect("shapes fixed")
                .0
        }));
        cases += student.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

fn check_mse(base_seed: u64) -> CheckResult {
    let name = "grad_mse";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:mse", i);
        let (b, d) = (rng.gen_range(2..6), rng.gen_range(2..8));
        let anchor = random_tensor(&mut rng, b, d, 1.0);
        let moving = random_tensor(&mut rng, b, d, 1.0);
        let analytic = match mse(&anchor, &moving) {
            Ok((_, g)) => g,
            Err(e) => return CheckResult::from_error(name, e),
        };
        worst = worst.max(fd_against(&moving, &analytic, |x| {
            mse(&anchor, x).expect("shapes fixed").0
        }));
        cases += moving.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

fn check_cdan_features(base_seed: u64) -> CheckResult {
    let name = "grad_cdan_features";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:cdan", i);
        let (b, f, c) = (
            rng.gen_range(2..5),
            rng.gen_range(2..5),
            rng.gen_range(2..4),
        );
        let features = random_tensor(&mut rng, b, f, 1.0);
        let probs = match softmax(&random_tensor(&mut rng, b, c, 2.0)) {
            Ok(p) => p,
            Err(e) => return CheckResult::from_error(name, e),
        };
        let proj = random_tensor(&mut rng, b, f * c, 1.0);
        let analytic = match cdan_backward_features(&proj, &probs) {
            Ok(g) => g,
            Err(e) => return CheckResult::from_error(name, e),
        };
        // The probability side is a constant by contract, so only the
        // feature gradient is differentiated.
        worst = worst.max(fd_against(&features, &analytic, |x| {
            cdan_input(x, &probs)
                .expect("shapes fixed")
                .data()
                .iter()
                .zip(proj.data())
                .map(|(o, p)| o * p)
                .sum()
        }));
        cases += features.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

/// The full encoder-classifier chain as the attacks differentiate it:
/// batch-mean cross-entropy against the model inputs.
fn check_model_input(base_seed: u64) -> CheckResult {
    let name = "grad_model_input";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:model_input", i);
        let (b, din, c) = (
            rng.gen_range(2..5),
            rng.gen_range(2..5),
            rng.gen_range(2..4),
        );
        let model = match Model::new(&ModelConfig {
            input_dim: din,
            class_count: c,
            hidden: vec![rng.gen_range(3..7)],
            disc_hidden: 4,
            conditional: false,
            seed: derive_seed(base_seed, "check:model_input:init", i as u64),
        }) {
            Ok(m) => m,
            Err(e) => return CheckResult::from_error(name, e),
        };
        let inputs = random_tensor(&mut rng, b, din, 1.0);
        let labels = random_labels(&mut rng, b, c);
        let analytic = match model.input_loss_grad(&inputs, &labels) {
            Ok(pair) => pair.grad,
            Err(e) => return CheckResult::from_error(name, e),
        };
        worst = worst.max(fd_against(&inputs, &analytic, |x| {
            let pair = model.input_loss_grad(x, &labels).expect("shapes fixed");
            pair.value.data().iter().sum::<f64>() / pair.value.rows() as f64
        }));
        cases += inputs.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, GRAD_TOLERANCE)
}

/// The reversal layer deliberately disagrees with finite differences (its
/// forward is the identity), so it is checked against its algebraic
/// contract: identity forward, `-lambda * upstream` backward.
fn check_gradient_reversal(base_seed: u64) -> CheckResult {
    let name = "grad_reversal_contract";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:grl", i);
        let (b, d) = (rng.gen_range(2..6), rng.gen_range(2..8));
        let input = random_tensor(&mut rng, b, d, 1.0);
        let upstream = random_tensor(&mut rng, b, d, 1.0);
        let lambda = rng.gen_range(0.0..3.0);
        let fwd = gradient_reversal_forward(&input);
        let bwd = gradient_reversal_backward(&upstream, lambda);
        for idx in 0..input.data().len() {
            worst = worst.max((fwd.data()[idx] - input.data()[idx]).abs());
            worst = worst.max((bwd.data()[idx] + lambda * upstream.data()[idx]).abs());
        }
        cases += input.data().len() * 2;
    }
    CheckResult::from_metric(name, cases, worst, 0.0)
}

/// Finite-difference gradient checks over every differentiable operation,
/// [`GRAD_INSTANCES`] random instances each.
pub fn gradient_checks(base_seed: u64) -> Vec<CheckResult> {
    vec![
        check_affine(base_seed),
        check_relu(base_seed),
        check_cross_entropy(base_seed),
        check_kl(base_seed),
        check_mse(base_seed),
        check_cdan_features(base_seed),
        check_model_input(base_seed),
        check_gradient_reversal(base_seed),
    ]
}

fn attack_fixture(base_seed: u64) -> Result<(Model, Tensor, Vec<usize>, Vec<(f64, f64)>), String> {
    let spec = DatasetSpec::TwoMoonsRotate {
        n_source: 200,
        n_target: 200,
        noise: 0.1,
        angle_degrees: 30.0,
    };
    let dataset = spec
        .generate(derive_seed(base_seed, "check:attack-data", 0))
        .map_err(|e| e.to_string())?;
    let model = Model::new(&ModelConfig {
        input_dim: dataset.feature_dim(),
        class_count: dataset.class_count(),
        hidden: vec![8],
        disc_hidden: 4,
        conditional: false,
        seed: derive_seed(base_seed, "check:attack-model", 0),
    })
    .map_err(|e| e.to_string())?;
    let labels = dataset.eval_labels().map_err(|e| e.to_string())?.to_vec();
    Ok((
        model,
        dataset.target_features().clone(),
        labels,
        dataset.feature_bounds().to_vec(),
    ))
}

fn attack_grid(round: usize, base_seed: u64) -> Vec<AttackConfig> {
    let mut grid = Vec::new();
    for (i, &eps) in [0.01, 0.05, 0.1].iter().enumerate() {
        let idx = (round * 3 + i) as u64;
        let seed = derive_seed(base_seed, "check:attack-seed", idx);
        let mut fgsm = AttackConfig::fgsm(eps);
        fgsm.seed = seed;
        let mut ifgsm = AttackConfig::ifgsm(eps, eps / 2.0, 10);
        ifgsm.seed = seed;
        grid.push(fgsm);
        grid.push(ifgsm);
        grid.push(AttackConfig::pgd(eps, eps / 2.0, 10, seed));
    }
    grid
}

/// Budget and clamp soundness over at least ten thousand adversarials mixed
/// across methods and epsilons: every sample stays inside the epsilon ball
/// and the widened feature bounds.
fn check_attack_budget(base_seed: u64) -> CheckResult {
    let name = "attack_budget_and_clamp";
    let (model, inputs, labels, bounds) = match attack_fixture(base_seed) {
        Ok(v) => v,
        Err(e) => return CheckResult::from_error(name, e),
    };
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let mut round = 0usize;
    while cases < 10_000 {
        for cfg in attack_grid(round, base_seed) {
            let adv = match perturb(&model, &inputs, &labels, &cfg, &bounds) {
                Ok(a) => a,
                Err(e) => return CheckResult::from_error(name, e),
            };
            let d = inputs.cols();
            for (idx, (&x, &y)) in inputs.data().iter().zip(adv.data()).enumerate() {
                // Excess over the epsilon ball, and over the per-feature
                // clamp interval widened by epsilon on both sides.
                let (lo, hi) = bounds[idx % d];
                let ball = (y - x).abs() - cfg.epsilon;
                let clamp = (lo - cfg.epsilon - y).max(y - hi - cfg.epsilon);
                worst = worst.max(ball).max(clamp);
            }
            cases += inputs.rows();
        }
        round += 1;
    }
    CheckResult::from_metric(name, cases, worst.max(0.0), ATTACK_TOLERANCE)
}

/// A zero budget must return the inputs bit for bit under every method.
fn check_attack_zero_epsilon(base_seed: u64) -> CheckResult {
    let name = "attack_zero_epsilon";
    let (model, inputs, labels, bounds) = match attack_fixture(base_seed) {
        Ok(v) => v,
        Err(e) => return CheckResult::from_error(name, e),
    };
    let mut cases = 0;
    for cfg in [
        AttackConfig::fgsm(0.0),
        AttackConfig::ifgsm(0.0, 0.05, 10),
        AttackConfig::pgd(0.0, 0.05, 10, 7),
    ] {
        let adv = match perturb(&model, &inputs, &labels, &cfg, &bounds) {
            Ok(a) => a,
            Err(e) => return CheckResult::from_error(name, e),
        };
        let identical = inputs
            .data()
            .iter()
            .zip(adv.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !identical {
            return CheckResult::fail(
                name,
                cases,
                linf_distance(&inputs, &adv),
                format!("{} moved inputs at epsilon 0", cfg.method.name()),
            );
        }
        cases += inputs.rows();
    }
    CheckResult::pass(name, cases, 0.0, "bitwise identity under all methods".into())
}

/// Attacks are pure functions of (model, inputs, labels, config): repeated
/// calls agree bitwise, and the PGD random start follows its seed.
fn check_attack_determinism(base_seed: u64) -> CheckResult {
    let name = "attack_determinism";
    let (model, inputs, labels, bounds) = match attack_fixture(base_seed) {
        Ok(v) => v,
        Err(e) => return CheckResult::from_error(name, e),
    };
    let mut cases = 0;
    for cfg in attack_grid(0, base_seed) {
        let a = perturb(&model, &inputs, &labels, &cfg, &bounds);
        let b = perturb(&model, &inputs, &labels, &cfg, &bounds);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    return CheckResult::fail(
                        name,
                        cases,
                        linf_distance(&a, &b),
                        format!("{} differs between identical calls", cfg.method.name()),
                    );
                }
            }
            (Err(e), _) | (_, Err(e)) => return CheckResult::from_error(name, e),
        }
        cases += inputs.rows();
    }
    // Reseeding the random start must actually move PGD.
    let pgd_a = AttackConfig::pgd(0.1, 0.05, 10, 1);
    let pgd_b = AttackConfig::pgd(0.1, 0.05, 10, 2);
    match (
        perturb(&model, &inputs, &labels, &pgd_a, &bounds),
        perturb(&model, &inputs, &labels, &pgd_b, &bounds),
    ) {
        (Ok(a), Ok(b)) => {
            if linf_distance(&a, &b) == 0.0 {
                return CheckResult::fail(
                    name,
                    cases,
                    0.0,
                    "pgd ignores its random-start seed".into(),
                );
            }
        }
        (Err(e), _) | (_, Err(e)) => return CheckResult::from_error(name, e),
    }
    CheckResult::pass(name, cases, 0.0, "bitwise stable; pgd follows its seed".into())
}

/// Attack soundness suite: budget, clamp, zero-epsilon identity, and
/// determinism.
pub fn attack_checks(base_seed: u64) -> Vec<CheckResult> {
    vec![
        check_attack_budget(base_seed),
        check_attack_zero_epsilon(base_seed),
        check_attack_determinism(base_seed),
    ]
}

fn check_softmax_rows(base_seed: u64) -> CheckResult {
    let name = "softmax_rows_normalized";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:softmax", i);
        let (b, c) = (rng.gen_range(2..6), rng.gen_range(2..6));
        // Large logits stress the log-sum-exp shift.
        let logits = random_tensor(&mut rng, b, c, 50.0);
        let probs = match softmax(&logits) {
            Ok(p) => p,
            Err(e) => return CheckResult::from_error(name, e),
        };
        for r in 0..b {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return CheckResult::fail(name, cases, f64::INFINITY, "probability outside [0, 1]".into());
            }
        }
        cases += b;
    }
    CheckResult::from_metric(name, cases, worst, 1e-12)
}

fn check_kl_invariants(base_seed: u64) -> CheckResult {
    let name = "kl_zero_and_nonnegative";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:kl-invariants", i);
        let (b, c) = (rng.gen_range(2..6), rng.gen_range(2..5));
        let temperature = if i % 2 == 0 { 1.0 } else { 2.0 };
        let logits = random_tensor(&mut rng, b, c, 3.0);
        let other = random_tensor(&mut rng, b, c, 3.0);
        let weights = Tensor::filled(b, 1, 1.0);
        // Identical logits: exactly zero loss and gradient.
        match kl_divergence(&logits, &logits, temperature, &weights) {
            Ok((loss, grad)) => {
                worst = worst.max(loss.abs()).max(grad.max_abs());
            }
            Err(e) => return CheckResult::from_error(name, e),
        }
        // Distinct logits: nonnegative loss.
        match kl_divergence(&logits, &other, temperature, &weights) {
            Ok((loss, _)) => worst = worst.max((-loss).max(0.0)),
            Err(e) => return CheckResult::from_error(name, e),
        }
        cases += 2 * b;
    }
    CheckResult::from_metric(name, cases, worst, 0.0)
}

fn check_entropy_range(base_seed: u64) -> CheckResult {
    let name = "entropy_normalized_range";
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:entropy", i);
        let (b, c) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let probs = match softmax(&random_tensor(&mut rng, b, c, 5.0)) {
            Ok(p) => p,
            Err(e) => return CheckResult::from_error(name, e),
        };
        let h = match normalized_entropy(&probs) {
            Ok(h) => h,
            Err(e) => return CheckResult::from_error(name, e),
        };
        for &v in h.data() {
            worst = worst.max((-v).max(v - 1.0).max(0.0));
        }
        // Uniform rows hit exactly 1, one-hot rows exactly 0.
        let uniform = Tensor::filled(1, c, 1.0 / c as f64);
        match normalized_entropy(&uniform) {
            Ok(h) => worst = worst.max((h.get(0, 0) - 1.0).abs()),
            Err(e) => return CheckResult::from_error(name, e),
        }
        let mut onehot = Tensor::zeros(1, c);
        onehot.set(0, 0, 1.0);
        match normalized_entropy(&onehot) {
            Ok(h) => worst = worst.max(h.get(0, 0).abs()),
            Err(e) => return CheckResult::from_error(name, e),
        }
        cases += b + 2;
    }
    CheckResult::from_metric(name, cases, worst, 1e-12)
}

fn check_minibatch_coverage(base_seed: u64) -> CheckResult {
    let name = "minibatch_coverage";
    let mut cases = 0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for(base_seed, "check:batches", i);
        let n = rng.gen_range(5..80);
        let batch = rng.gen_range(1..=n);
        let seed = rng.gen();
        let epoch = rng.gen_range(0..50);
        let batches = epoch_batches(n, batch, seed, epoch);
        let mut seen = vec![0usize; n];
        for b in &batches {
            for &idx in b {
                if idx >= n {
                    return CheckResult::fail(name, cases, idx as f64, "index out of range".into());
                }
                seen[idx] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return CheckResult::fail(
                name,
                cases,
                f64::NAN,
                format!("epoch did not visit every index exactly once (n {n}, batch {batch})"),
            );
        }
        // Identical parameters replay the identical permutation.
        if epoch_batches(n, batch, seed, epoch) != batches {
            return CheckResult::fail(name, cases, f64::NAN, "shuffle is not deterministic".into());
        }
        cases += n;
    }
    CheckResult::pass(name, cases, 0.0, "each epoch is an exact permutation".into())
}

/// Numeric invariants of the loss plumbing and the batch shuffler.
pub fn invariant_checks(base_seed: u64) -> Vec<CheckResult> {
    vec![
        check_softmax_rows(base_seed),
        check_kl_invariants(base_seed),
        check_entropy_range(base_seed),
        check_minibatch_coverage(base_seed),
    ]
}

/// Everything: gradients, attacks, invariants.
pub fn run_all(base_seed: u64) -> Vec<CheckResult> {
    let mut out = gradient_checks(base_seed);
    out.extend(attack_checks(base_seed));
    out.extend(invariant_checks(base_seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn gradient_suite_passes_within_budget() {
        let start = Instant::now();
        let results = gradient_checks(0);
        assert!(start.elapsed().as_secs() < 30, "took {:?}", start.elapsed());
        assert_eq!(results.len(), 8);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
            assert!(r.cases > 0, "{} ran no cases", r.name);
        }
    }

    #[test]
    fn attack_suite_passes_within_budget() {
        let start = Instant::now();
        let results = attack_checks(0);
        assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        let budget = results.iter().find(|r| r.name == "attack_budget_and_clamp").unwrap();
        assert!(budget.cases >= 10_000, "only {} adversarials", budget.cases);
    }

    #[test]
    fn invariant_suite_passes() {
        for r in invariant_checks(0) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn render_marks_failures() {
        let rows = vec![
            CheckResult::pass("a", 1, 0.0, "ok".into()),
            CheckResult::fail("b", 1, 1.0, "bad".into()),
        ];
        let text = render_text(&rows);
        assert!(text.contains("PASS a"));
        assert!(text.contains("FAIL b"));
        assert!(!all_passed(&rows));
    }

    #[test]
    fn checks_are_deterministic_per_seed() {
        let a = run_all(3);
        let b = run_all(3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.passed, y.passed);
            assert_eq!(x.worst.to_bits(), y.worst.to_bits());
        }
    }
}
