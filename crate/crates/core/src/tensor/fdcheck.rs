//! Central-difference gradient checking, used as the independent oracle for
//! every backward rule.

use super::tape::{Tape, Var};
use super::Tensor;

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

/// Outcome of comparing a reverse-mode gradient against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `at`, elementwise. The relative error uses a small
/// absolute floor so near-zero gradients do not blow up the ratio.
pub fn finite_diff_check<F>(f: F, at: &Tensor, tol: f64) -> FdReport
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let y = f(&mut tape, x);
    let grads = tape.grad(y, &[x], &[]);
    let analytic = match grads[0] {
        Some(g) => tape.value(g).clone(),
        None => Tensor::zeros(at.shape().to_vec()),
    };

    let eval = |point: Tensor| -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(point);
        let out = f(&mut t, v);
        t.value(out).item()
    };

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..at.numel() {
        let mut plus = at.data().to_vec();
        let mut minus = at.data().to_vec();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let fd = (eval(Tensor::new(at.shape().to_vec(), plus))
            - eval(Tensor::new(at.shape().to_vec(), minus)))
            / (2.0 * FD_STEP);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(FD_FLOOR);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    FdReport { max_rel_err, worst_index, tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let at = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let report = finite_diff_check(
            |tape, x| {
                let y = tape.mul_scalar(x, 3.0);
                tape.sum_all(y)
            },
            &at,
            1e-4,
        );
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn layer_norm_passes_at_1e4() {
        let at = Tensor::matrix(2, 5, vec![0.4, -0.7, 1.3, 0.1, -2.0, 0.9, 0.2, -0.4, 1.1, 0.6]);
        let report = finite_diff_check(
            |tape, x| {
                let gain = tape.leaf(Tensor::vector(vec![1.2, 0.8, -0.5, 1.0, 0.3]));
                let bias = tape.leaf(Tensor::vector(vec![0.1, -0.2, 0.0, 0.4, 0.25]));
                let y = tape.layer_norm_rows(x, gain, bias);
                tape.sum_all(y)
            },
            &at,
            1e-4,
        );
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn intentionally_wrong_rule_fails() {
        // sum(x * detach(x)) evaluates to sum(x^2), whose true slope is 2x,
        // but the tape only sees the first factor and reports x.
        let at = Tensor::vector(vec![0.5, 1.5]);
        let report = finite_diff_check(
            |tape, x| {
                let frozen = tape.detach(x);
                let y = tape.mul(x, frozen);
                tape.sum_all(y)
            },
            &at,
            1e-4,
        );
        assert!(!report.pass(), "negative control unexpectedly passed");
    }
}
