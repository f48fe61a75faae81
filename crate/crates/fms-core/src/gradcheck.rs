//! Central finite-difference gradient checking.
//!
//! The checker re-runs a user-supplied forward builder on perturbed copies of
//! the inputs, so the numeric estimate never touches the reverse-mode path it
//! verifies.

use crate::autodiff::{Tape, Tensor, Var};

/// Outcome of one probe: analytic vs numeric partial derivative.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// Relative error with an absolute floor so that near-zero pairs compare
    /// on absolute terms (|a-n| ≤ tol·max(|a|,|n|) + tol·1e-4).
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-4);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Check d(root)/d(inputs) against central differences with the given step.
///
/// `build` must construct the forward pass from leaf vars in input order and
/// return the scalar root. Probes every element of every input (use
/// [`check_gradients_sampled`] for large inputs). Returns the worst probe.
pub fn check_gradients(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Probe {
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |e| (ti, e)))
        .collect();
    run_probes(inputs, step, &probes, build)
}

/// Like [`check_gradients`] but probing only the listed (input, element) pairs.
pub fn check_gradients_sampled(
    inputs: &[Tensor],
    step: f64,
    probes: &[(usize, usize)],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Probe {
    run_probes(inputs, step, probes, build)
}

fn eval(inputs: &[Tensor], build: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    tape.value(root).data()[0]
}

fn run_probes(
    inputs: &[Tensor],
    step: f64,
    probes: &[(usize, usize)],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Probe {
    assert!(!probes.is_empty(), "no probes requested");

    // Analytic pass once.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root).expect("backward failed in gradcheck");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).unwrap().to_vec())
        .collect();

    let mut worst = Probe {
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut worst_err = -1.0;
    for &(ti, e) in probes {
        let mut plus = inputs.to_vec();
        plus[ti].data_mut()[e] += step;
        let mut minus = inputs.to_vec();
        minus[ti].data_mut()[e] -= step;
        let numeric = (eval(&plus, &build) - eval(&minus, &build)) / (2.0 * step);
        let probe = Probe {
            input: ti,
            element: e,
            analytic: analytic[ti][e],
            numeric,
        };
        if probe.rel_err() > worst_err {
            worst_err = probe.rel_err();
            worst = probe;
        }
    }
    worst
}

/// Assert helper used across the test suites.
pub fn assert_grads_match(
    inputs: &[Tensor],
    step: f64,
    tol: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let worst = check_gradients(inputs, step, build);
    assert!(
        worst.rel_err() <= tol,
        "gradient mismatch at input {} element {}: analytic {} vs numeric {} (rel err {:.3e})",
        worst.input,
        worst.element,
        worst.analytic,
        worst.numeric,
        worst.rel_err()
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Every primitive against central differences on random small tensors.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-3;
        let step = 1e-4;

        for trial in 0..100 {
            let n = 2 + (trial % 4);
            let c = 1 + (trial % 3);
            let a = rand_tensor(&mut rng, n, c);
            let b = rand_tensor(&mut rng, n, c);

            assert_grads_match(&[a.clone(), b.clone()], step, tol, |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                t.sum(y)
            });
            assert_grads_match(&[a.clone(), b.clone()], step, tol, |t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                let z = t.sub(y, v[1]).unwrap();
                t.sum(z)
            });
            assert_grads_match(&[a.clone()], step, tol, |t, v| {
                let y = t.sigmoid(v[0]);
                let z = t.softmax(y);
                t.sum(z)
            });
            assert_grads_match(&[a.clone()], step, tol, |t, v| {
                let y = t.softplus(v[0]);
                let z = t.exp(y);
                t.sum(z)
            });
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, 3, 2);
            let w = rand_tensor(&mut rng, 2, 4);
            assert_grads_match(&[a.clone(), w.clone()], 1e-4, 1e-3, |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let s = t.softmax(y);
                t.sum(s)
            });
            assert_grads_match(&[a.clone()], 1e-4, 1e-3, |t, v| {
                let r = t.repeat_cols_grouped(v[0], 3);
                let tc = t.tile_cols(r, 2);
                let sg = t.sum_cols_grouped(tc, 6).unwrap();
                let m = t.mul(sg, sg).unwrap();
                t.sum(m)
            });
            assert_grads_match(&[a.clone()], 1e-4, 1e-3, |t, v| {
                let g = t
                    .gather_rows_opt(v[0], Rc::new(vec![Some(2), None, Some(0), Some(2)]))
                    .unwrap();
                let m = t.mul(g, g).unwrap();
                t.sum(m)
            });
        }
    }

    #[test]
    fn scan_conv_cosine_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            // Keep scan decay in (0,1) so FD is well-conditioned.
            let raw: Vec<f64> = (0..5 * 2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let a = Tensor::matrix(5, 2, raw.iter().map(|x| sig(*x)).collect()).unwrap();
            let b = rand_tensor(&mut rng, 5, 2);
            assert_grads_match(&[a.clone(), b.clone()], 1e-4, 1e-3, |t, v| {
                let h = t.ssm_scan(v[0], v[1]).unwrap();
                let m = t.mul(h, h).unwrap();
                t.sum(m)
            });

            let x = rand_tensor(&mut rng, 6, 3);
            let w = rand_tensor(&mut rng, 3, 3);
            assert_grads_match(&[x.clone(), w.clone()], 1e-4, 1e-3, |t, v| {
                let y = t.conv1d_depthwise(v[0], v[1]).unwrap();
                let m = t.mul(y, y).unwrap();
                t.sum(m)
            });

            let idx: Vec<Vec<Option<usize>>> = vec![
                (0..6).map(|i| if i > 0 { Some(i - 1) } else { None }).collect(),
                (0..6).map(Some).collect(),
                (0..6).map(|i| if i < 5 { Some(i + 1) } else { None }).collect(),
            ];
            let idx = Rc::new(idx);
            assert_grads_match(&[x.clone(), w.clone()], 1e-4, 1e-3, |t, v| {
                let y = t.neighbor_conv(v[0], v[1], idx.clone()).unwrap();
                let m = t.mul(y, y).unwrap();
                t.sum(m)
            });

            let u = rand_tensor(&mut rng, 4, 3);
            let vv = rand_tensor(&mut rng, 4, 3);
            assert_grads_match(&[u, vv], 1e-4, 1e-3, |t, v| {
                let s = t.cosine_sim_rows(v[0], v[1]).unwrap();
                let m = t.mul(s, s).unwrap();
                t.sum(m)
            });

            let p = rand_tensor(&mut rng, 4, 2);
            let q = rand_tensor(&mut rng, 4, 2);
            assert_grads_match(&[p, q], 1e-4, 1e-3, |t, v| {
                let h = t.huber_rows(v[0], v[1], 1.0).unwrap();
                t.sum(h)
            });
        }
    }

    fn sig(x: f64) -> f64 {
        0.2 + 0.6 / (1.0 + (-x).exp())
    }
}
