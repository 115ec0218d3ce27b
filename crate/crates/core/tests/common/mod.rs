//! Independent reference computations for the acceptance suite.

#![allow(dead_code)]

use std::io::Write;

use hyperdistill::architectures::{Bound, CompiledPolicy, Model};
use hyperdistill::numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Writes straight to stderr so the line survives output capture.
pub fn report(id: usize, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{verdict}] {title}: {detail}");
}

/// Central differences of `loss` with respect to every parameter scalar of
/// `model`, compared against the tape gradient.
pub fn max_grad_rel_error<F>(model: &Model, h: f64, loss: F) -> f64
where
    F: Fn(&Model, &mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let vars: Vec<Var> = bound.vars().to_vec();
    let l = loss(model, &mut tape, &bound);
    let grads = tape.backward(l).unwrap();

    let eval = |m: &Model| {
        let mut t = Tape::new();
        let b = m.params().bind(&mut t, false);
        let l = loss(m, &mut t, &b);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for k in 0..model.params().len() {
        let like = &model.params().tensors()[k];
        let g = grads.get_or_zeros(vars[k], like);
        for i in 0..like.numel() {
            let mut plus = model.clone();
            plus.params_mut().tensors_mut()[k].data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut().tensors_mut()[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.data()[i];
            // absolute floor: f64 round-off in the difference quotient is ~1e-10
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// The compiled policy written out loop by loop from its blocks.
pub fn reference_compiled(p: &CompiledPolicy, states: &[f64]) -> Vec<f64> {
    let (n, s, a, h) = (p.n_limbs(), p.state_dim(), p.action_dim(), p.hidden_width());
    let mut z = vec![0.0; h];
    for i in 0..n {
        let (w, b) = (p.in_w(i), p.in_b(i));
        for j in 0..h {
            for k in 0..s {
                z[j] += w.at(j, k) * states[i * s + k];
            }
            z[j] += b.data()[j];
        }
    }
    let mut x: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
    for l in 0..p.hidden_layers() - 1 {
        let (w, b) = (p.hidden_w(l), p.hidden_b(l));
        x = (0..h)
            .map(|j| ((0..h).map(|k| w.at(j, k) * x[k]).sum::<f64>() + b.data()[j]).tanh())
            .collect();
    }
    let mut out = Vec::with_capacity(n * a);
    for i in 0..n {
        let (w, b) = (p.out_w(i), p.out_b(i));
        for q in 0..a {
            out.push((0..h).map(|k| w.at(q, k) * x[k]).sum::<f64>() + b.data()[q]);
        }
    }
    out
}

/// Monte-Carlo `KL(p ‖ q)` for diagonal Gaussians: the sample mean of
/// `log p(x) - log q(x)` with `x ~ p`.
pub fn monte_carlo_kl<R: Rng>(
    mp: &[f64],
    lp: &[f64],
    mq: &[f64],
    lq: &[f64],
    samples: usize,
    rng: &mut R,
) -> f64 {
    let log_density = |x: f64, m: f64, ls: f64| {
        let z = (x - m) / ls.exp();
        -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let mut total = 0.0;
    for _ in 0..samples {
        for d in 0..mp.len() {
            let eps: f64 = rng.sample(StandardNormal);
            let x = mp[d] + lp[d].exp() * eps;
            total += log_density(x, mp[d], lp[d]) - log_density(x, mq[d], lq[d]);
        }
    }
    total / samples as f64
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(p.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, p, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            p.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

/// Block `k` of each row of the result is block `perm[k]` of `t`.
pub fn permute_blocks(t: &Tensor, perm: &[usize], w: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        for &p in perm {
            data.extend_from_slice(&t.row(r)[p * w..(p + 1) * w]);
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

pub fn normal_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
