//! Shared helpers for the integration suites: a central-difference gradient
//! checker and a deterministic orthogonal-matrix generator.
#![allow(dead_code)]

pub mod gradchecks;

use rand::Rng;
use tmkt::tensor::{Graph, Tensor, Var};

/// Checks every element of every input's analytic gradient against central
/// finite differences of the rebuilt graph. `build` must return a scalar.
pub fn fd_check<B>(name: &str, inputs: &[Tensor<f64>], h: f64, tol: f64, build: B)
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("parameter has a gradient").to_vec())
        .collect();

    let eval = |which: usize, elem: usize, delta: f64| -> f64 {
        let mut g2: Graph<f64> = Graph::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut t = t.clone();
                if k == which {
                    t.data[elem] += delta;
                }
                g2.param(t)
            })
            .collect();
        let l = build(&mut g2, &vs);
        g2.value(l).item()
    };

    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.data.len() {
            let fd = (eval(i, j, h) - eval(i, j, -h)) / (2.0 * h);
            let a = grads[i][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(
                rel < tol,
                "{name}: input {i} elem {j}: analytic {a} vs fd {fd} (rel {rel:.3e})"
            );
        }
    }
}

/// Reduces a tensor node to a scalar through a fixed, strictly positive
/// weighting so the check exercises every Jacobian column distinctly.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let shape = g.value(v).shape.clone();
    let n: usize = g.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7311 + 0.2).sin() + 1.5).collect();
    let wt = g.constant(Tensor::new(shape, w));
    let prod = g.mul(v, wt).unwrap();
    g.sum_all(prod)
}

/// Deterministic test tensor with entries spread over roughly [-1, 1],
/// offset per call site via `phase` so operands differ.
pub fn ramp(shape: Vec<usize>, phase: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (i as f64 * 0.917 + phase).sin()).collect();
    Tensor::new(shape, data)
}

/// Random d-by-d orthogonal matrix built from Givens rotations.
pub fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut q = vec![0.0f64; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            // rotate columns i and j of q in place
            for row in 0..d {
                let a = q[row * d + i];
                let b = q[row * d + j];
                q[row * d + i] = c * a - s * b;
                q[row * d + j] = s * a + c * b;
            }
        }
    }
    q
}

/// Largest deviation of `q`ᵀ`q` from the identity; used to validate the
/// generator before any invariance claim leans on it.
pub fn orthogonality_defect(q: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = (0..d).map(|k| q[k * d + i] * q[k * d + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}
