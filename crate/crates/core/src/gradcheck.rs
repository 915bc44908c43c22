//! Central finite-difference verification of every differentiable operation.
//!
//! Runs in `f64` only. The CLI `grad-check` subcommand and the acceptance
//! suite both call [`run_verification_suite`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// Max over coordinates of |a - n| / max(1e-8, |a| + |n|) between the
/// analytic gradient and central differences of `f` around `x`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor<f64>, analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(analytic.len(), x.numel());
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - eps;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    worst
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar objective: sum(projection .* out). The random projection makes the
/// gradient of every output coordinate observable.
fn projected_loss(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Var {
    let p = tape.constant(proj);
    let prod = tape.mul(out, p).unwrap();
    tape.sum_all(prod)
}

struct OpCheck {
    name: &'static str,
    tolerance: f64,
    seeds: usize,
    run: Box<dyn Fn(u64) -> f64>,
}

fn max_over_seeds(check: &OpCheck) -> f64 {
    (0..check.seeds)
        .map(|s| (check.run)(1000 * (s as u64 + 1)))
        .fold(0.0, f64::max)
}

fn check_matmul(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, vec![4, 3]);
    let b = rand_tensor(&mut rng, vec![3, 5]);
    let proj = rand_tensor(&mut rng, vec![4, 5]);
    let mut worst = 0.0f64;
    for side in 0..2 {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a, side == 0), tape.leaf(&b, side == 1));
        let out = tape.matmul(va, vb).unwrap();
        let loss = projected_loss(&mut tape, out, &proj);
        tape.backward(loss).unwrap();
        let (target, grad_var) = if side == 0 { (&a, va) } else { (&b, vb) };
        let analytic = tape.grad(grad_var).unwrap().to_vec();
        let err = finite_difference_check(
            |x| {
                let mut t = Tape::new();
                let (va, vb) = if side == 0 {
                    (t.leaf(x, false), t.leaf(&b, false))
                } else {
                    (t.leaf(&a, false), t.leaf(x, false))
                };
                let out = t.matmul(va, vb).unwrap();
                let l = projected_loss(&mut t, out, &proj);
                t.scalar_value(l)
            },
            target,
            &analytic,
            FD_EPS,
        );
        worst = worst.max(err);
    }
    worst
}

fn check_conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, vec![2, 3, 8, 8]);
    let w = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
    let stride = if seed % 2 == 0 { 1 } else { 2 };
    let ho = (8 + 2 - 3) / stride + 1;
    let proj = rand_tensor(&mut rng, vec![2, 2, ho, ho]);
    let mut worst = 0.0f64;
    for side in 0..2 {
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(&x, side == 0), tape.leaf(&w, side == 1));
        let out = tape.conv2d(vx, vw, stride).unwrap();
        let loss = projected_loss(&mut tape, out, &proj);
        tape.backward(loss).unwrap();
        let (target, grad_var) = if side == 0 { (&x, vx) } else { (&w, vw) };
        let analytic = tape.grad(grad_var).unwrap().to_vec();
        let err = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let (vx, vw) = if side == 0 {
                    (t.leaf(p, false), t.leaf(&w, false))
                } else {
                    (t.leaf(&x, false), t.leaf(p, false))
                };
                let out = t.conv2d(vx, vw, stride).unwrap();
                let l = projected_loss(&mut t, out, &proj);
                t.scalar_value(l)
            },
            target,
            &analytic,
            FD_EPS,
        );
        worst = worst.max(err);
    }
    worst
}

fn check_batchnorm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, vec![8, 4]);
    let gamma = rand_tensor(&mut rng, vec![4]);
    let beta = rand_tensor(&mut rng, vec![4]);
    let proj = rand_tensor(&mut rng, vec![8, 4]);
    let eval = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| -> f64 {
        let mut t = Tape::new();
        let vx = t.leaf(x, false);
        let vg = t.leaf(gamma, false);
        let vb = t.leaf(beta, false);
        let mut stats = BnStats::new(4);
        let out = t
            .batchnorm(vx, vg, vb, &mut stats, BnMode::TrainNoUpdate)
            .unwrap();
        let l = projected_loss(&mut t, out, &proj);
        t.scalar_value(l)
    };
    let mut tape = Tape::new();
    let vx = tape.leaf(&x, true);
    let vg = tape.leaf(&gamma, true);
    let vb = tape.leaf(&beta, true);
    let mut stats = BnStats::new(4);
    let out = tape
        .batchnorm(vx, vg, vb, &mut stats, BnMode::TrainNoUpdate)
        .unwrap();
    let loss = projected_loss(&mut tape, out, &proj);
    tape.backward(loss).unwrap();
    let gx = tape.grad(vx).unwrap().to_vec();
    let gg = tape.grad(vg).unwrap().to_vec();
    let gb = tape.grad(vb).unwrap().to_vec();
    let ex = finite_difference_check(|p| eval(p, &gamma, &beta), &x, &gx, FD_EPS);
    let eg = finite_difference_check(|p| eval(&x, p, &beta), &gamma, &gg, FD_EPS);
    let eb = finite_difference_check(|p| eval(&x, &gamma, p), &beta, &gb, FD_EPS);
    ex.max(eg).max(eb)
}

fn check_linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, vec![5, 6]);
    let w = rand_tensor(&mut rng, vec![6, 3]);
    let b = rand_tensor(&mut rng, vec![3]);
    let proj = rand_tensor(&mut rng, vec![5, 3]);
    let mut worst = 0.0f64;
    for side in 0..3 {
        let mut tape = Tape::new();
        let vx = tape.leaf(&x, side == 0);
        let vw = tape.leaf(&w, side == 1);
        let vb = tape.leaf(&b, side == 2);
        let out = tape.linear(vx, vw, vb).unwrap();
        let loss = projected_loss(&mut tape, out, &proj);
        tape.backward(loss).unwrap();
        let (target, gv) = match side {
            0 => (&x, vx),
            1 => (&w, vw),
            _ => (&b, vb),
        };
        let analytic = tape.grad(gv).unwrap().to_vec();
        let err = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let vx = t.leaf(if side == 0 { p } else { &x }, false);
                let vw = t.leaf(if side == 1 { p } else { &w }, false);
                let vb = t.leaf(if side == 2 { p } else { &b }, false);
                let out = t.linear(vx, vw, vb).unwrap();
                let l = projected_loss(&mut t, out, &proj);
                t.scalar_value(l)
            },
            target,
            &analytic,
            FD_EPS,
        );
        worst = worst.max(err);
    }
    worst
}

fn check_relu_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep values away from the relu kink so finite differences are valid.
    let mut x = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05 * v.signum() + if *v == 0.0 { 0.05 } else { 0.0 };
        }
    }
    let proj = rand_tensor(&mut rng, vec![2, 3]);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x, true);
    let h = tape.relu(vx);
    let out = tape.global_avg_pool(h).unwrap();
    let loss = projected_loss(&mut tape, out, &proj);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(vx).unwrap().to_vec();
    finite_difference_check(
        |p| {
            let mut t = Tape::new();
            let vx = t.leaf(p, false);
            let h = t.relu(vx);
            let out = t.global_avg_pool(h).unwrap();
            let l = projected_loss(&mut t, out, &proj);
            t.scalar_value(l)
        },
        &x,
        &analytic,
        FD_EPS,
    )
}

fn check_softmax_xent(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_tensor(&mut rng, vec![5, 4]);
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    let mut tape = Tape::new();
    let vl = tape.leaf(&logits, true);
    let loss = tape.softmax_cross_entropy(vl, &labels).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(vl).unwrap().to_vec();
    finite_difference_check(
        |p| {
            let mut t = Tape::new();
            let vl = t.leaf(p, false);
            let l = t.softmax_cross_entropy(vl, &labels).unwrap();
            t.scalar_value(l)
        },
        &logits,
        &analytic,
        FD_EPS,
    )
}

fn check_l2_normalize(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rand_tensor(&mut rng, vec![4, 6]);
    for v in x.data_mut() {
        *v += 0.5 * v.signum();
    }
    let proj = rand_tensor(&mut rng, vec![4, 6]);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x, true);
    let out = tape.l2_normalize_rows(vx).unwrap();
    let loss = projected_loss(&mut tape, out, &proj);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(vx).unwrap().to_vec();
    finite_difference_check(
        |p| {
            let mut t = Tape::new();
            let vx = t.leaf(p, false);
            let out = t.l2_normalize_rows(vx).unwrap();
            let l = projected_loss(&mut t, out, &proj);
            t.scalar_value(l)
        },
        &x,
        &analytic,
        FD_EPS,
    )
}

/// conv -> bn -> relu -> pool -> linear -> cross-entropy, differentiated with
/// respect to the input batch and the convolution weights.
fn check_composed_network(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, vec![4, 2, 6, 6]);
    let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
    let gamma = rand_tensor(&mut rng, vec![3]);
    let beta = rand_tensor(&mut rng, vec![3]);
    let wl = rand_tensor(&mut rng, vec![3, 4]);
    let bl = rand_tensor(&mut rng, vec![4]);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..4)).collect();

    let eval = |x: &Tensor<f64>, w: &Tensor<f64>, want_grads: bool| -> (f64, Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let vx = t.leaf(x, want_grads);
        let vw = t.leaf(w, want_grads);
        let vg = t.leaf(&gamma, false);
        let vb = t.leaf(&beta, false);
        let vwl = t.leaf(&wl, false);
        let vbl = t.leaf(&bl, false);
        let mut stats = BnStats::new(3);
        let c = t.conv2d(vx, vw, 1).unwrap();
        let bn = t
            .batchnorm(c, vg, vb, &mut stats, BnMode::TrainNoUpdate)
            .unwrap();
        let a = t.relu(bn);
        let pooled = t.global_avg_pool(a).unwrap();
        let logits = t.linear(pooled, vwl, vbl).unwrap();
        let loss = t.softmax_cross_entropy(logits, &labels).unwrap();
        if want_grads {
            t.backward(loss).unwrap();
            (
                t.scalar_value(loss),
                t.grad(vx).unwrap().to_vec(),
                t.grad(vw).unwrap().to_vec(),
            )
        } else {
            (t.scalar_value(loss), Vec::new(), Vec::new())
        }
    };

    let (_, gx, gw) = eval(&x, &w, true);
    let ex = finite_difference_check(|p| eval(p, &w, false).0, &x, &gx, FD_EPS);
    let ew = finite_difference_check(|p| eval(&x, p, false).0, &w, &gw, FD_EPS);
    ex.max(ew)
}

/// Run every gradient check. `seeds` is the number of random seeds per
/// operation (the acceptance gate uses 20).
pub fn run_verification_suite(seeds: usize) -> Vec<CheckResult> {
    let checks = vec![
        OpCheck {
            name: "matmul",
            tolerance: 1e-4,
            seeds,
            run: Box::new(check_matmul),
        },
        OpCheck {
            name: "conv2d",
            tolerance: 1e-4,
            seeds,
            run: Box::new(check_conv2d),
        },
        OpCheck {
            name: "batchnorm",
            tolerance: 1e-3,
            seeds,
            run: Box::new(check_batchnorm),
        },
        OpCheck {
            name: "linear",
            tolerance: 1e-4,
            seeds,
            run: Box::new(check_linear),
        },
        OpCheck {
            name: "relu_global_avg_pool",
            tolerance: 1e-4,
            seeds,
            run: Box::new(check_relu_pool),
        },
        OpCheck {
            name: "softmax_cross_entropy",
            tolerance: 1e-4,
            seeds,
            run: Box::new(check_softmax_xent),
        },
        OpCheck {
            name: "l2_normalize",
            tolerance: 1e-4,
            seeds,
            run: Box::new(check_l2_normalize),
        },
        OpCheck {
            name: "composed_network",
            tolerance: 1e-3,
            seeds,
            run: Box::new(check_composed_network),
        },
    ];
    checks
        .iter()
        .map(|c| CheckResult {
            name: c.name.to_string(),
            max_rel_err: max_over_seeds(c),
            tolerance: c.tolerance,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::from_f64_slice(vec![3], &[0.3, -1.2, 2.0]).unwrap();
        let analytic = vec![1.0; 3];
        let err = finite_difference_check(
            |p| p.data().iter().sum(),
            &x,
            &analytic,
            FD_EPS,
        );
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap();
        let analytic = vec![2.0, 4.0];
        let err = finite_difference_check(
            |p| p.data().iter().map(|v| v * v).sum(),
            &x,
            &analytic,
            FD_EPS,
        );
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn quick_suite_passes() {
        for res in run_verification_suite(3) {
            assert!(
                res.passed(),
                "{} failed: {} >= {}",
                res.name,
                res.max_rel_err,
                res.tolerance
            );
        }
    }
}
