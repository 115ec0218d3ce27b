//! The per-robot MLP emitted by the hypernetwork. Execution is plain loops
//! with an explicit multiply counter and needs nothing but these blocks.

use super::{Actor, GaussianAction, ParamSet};
use crate::error::{Error, Result};
use crate::morphology::Morphology;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledPolicy {
    state_dim: usize,
    action_dim: usize,
    hidden_width: usize,
    /// `[H, S]` per limb.
    in_w: Vec<Tensor>,
    /// `[H]` per limb.
    in_b: Vec<Tensor>,
    /// `[H, H]` (out × in) per hidden layer `l = 1..L-1`.
    hidden_w: Vec<Tensor>,
    hidden_b: Vec<Tensor>,
    /// `[A, H]` per limb.
    out_w: Vec<Tensor>,
    /// `[A]` per limb.
    out_b: Vec<Tensor>,
    log_std: Vec<f64>,
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() == shape {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "{what} has shape {:?}, expected {shape:?}",
            t.shape()
        )))
    }
}

impl CompiledPolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        in_w: Vec<Tensor>,
        in_b: Vec<Tensor>,
        hidden_w: Vec<Tensor>,
        hidden_b: Vec<Tensor>,
        out_w: Vec<Tensor>,
        out_b: Vec<Tensor>,
        log_std: Vec<f64>,
    ) -> Result<Self> {
        let n = in_w.len();
        if n == 0 {
            return Err(Error::Format("compiled policy without limbs".into()));
        }
        let h = in_w[0].shape().first().copied().unwrap_or(0);
        let (s, a) = (state_dim, action_dim);
        if in_b.len() != n || out_w.len() != n || out_b.len() != n || hidden_w.len() != hidden_b.len() {
            return Err(Error::Format("inconsistent block counts".into()));
        }
        for i in 0..n {
            expect_shape(&in_w[i], &[h, s], "in_w")?;
            expect_shape(&in_b[i], &[h], "in_b")?;
            expect_shape(&out_w[i], &[a, h], "out_w")?;
            expect_shape(&out_b[i], &[a], "out_b")?;
        }
        for (w, b) in hidden_w.iter().zip(&hidden_b) {
            expect_shape(w, &[h, h], "hidden_w")?;
            expect_shape(b, &[h], "hidden_b")?;
        }
        if log_std.len() != n * a {
            return Err(Error::Format(format!(
                "log_std has {} entries, expected {}",
                log_std.len(),
                n * a
            )));
        }
        Ok(Self {
            state_dim,
            action_dim,
            hidden_width: h,
            in_w,
            in_b,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            log_std,
        })
    }

    pub fn n_limbs(&self) -> usize {
        self.in_w.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    /// Hidden activations `L` (one input layer plus `L-1` shared layers).
    pub fn hidden_layers(&self) -> usize {
        self.hidden_w.len() + 1
    }

    pub fn in_w(&self, limb: usize) -> &Tensor {
        &self.in_w[limb]
    }

    pub fn in_b(&self, limb: usize) -> &Tensor {
        &self.in_b[limb]
    }

    pub fn hidden_w(&self, l: usize) -> &Tensor {
        &self.hidden_w[l]
    }

    pub fn hidden_b(&self, l: usize) -> &Tensor {
        &self.hidden_b[l]
    }

    pub fn out_w(&self, limb: usize) -> &Tensor {
        &self.out_w[limb]
    }

    pub fn out_b(&self, limb: usize) -> &Tensor {
        &self.out_b[limb]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn n_scalars(&self) -> usize {
        self.to_params().n_scalars() - self.log_std.len()
    }

    /// Flattened named tensors for the checkpoint container.
    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for i in 0..self.n_limbs() {
            ps.insert(format!("in_w.{i}"), self.in_w[i].clone());
            ps.insert(format!("in_b.{i}"), self.in_b[i].clone());
        }
        for l in 0..self.hidden_w.len() {
            ps.insert(format!("hidden_w.{}", l + 1), self.hidden_w[l].clone());
            ps.insert(format!("hidden_b.{}", l + 1), self.hidden_b[l].clone());
        }
        for i in 0..self.n_limbs() {
            ps.insert(format!("out_w.{i}"), self.out_w[i].clone());
            ps.insert(format!("out_b.{i}"), self.out_b[i].clone());
        }
        ps.insert(
            "log_std",
            Tensor::new(vec![self.log_std.len()], self.log_std.clone()).expect("vector"),
        );
        ps
    }

    pub fn from_params(
        state_dim: usize,
        action_dim: usize,
        n_limbs: usize,
        hidden_layers: usize,
        ps: &ParamSet,
    ) -> Result<Self> {
        let get = |name: String| -> Result<Tensor> {
            ps.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        let blocks = |prefix: &str| -> Result<Vec<Tensor>> {
            (0..n_limbs).map(|i| get(format!("{prefix}.{i}"))).collect()
        };
        let hidden = |prefix: &str| -> Result<Vec<Tensor>> {
            (1..hidden_layers).map(|l| get(format!("{prefix}.{l}"))).collect()
        };
        let expected = 4 * n_limbs + 2 * hidden_layers.saturating_sub(1) + 1;
        if ps.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} compiled tensors, found {}",
                ps.len()
            )));
        }
        Self::new(
            state_dim,
            action_dim,
            blocks("in_w")?,
            blocks("in_b")?,
            hidden("hidden_w")?,
            hidden("hidden_b")?,
            blocks("out_w")?,
            blocks("out_b")?,
            get("log_std".into())?.into_data(),
        )
    }

    /// One forward step; `multiplies` is incremented by every scalar
    /// multiply-accumulate executed.
    pub fn forward_counting(&self, states: &[f64], multiplies: &mut u64) -> Result<GaussianAction> {
        let (n, s, a, h) = (self.n_limbs(), self.state_dim, self.action_dim, self.hidden_width);
        if states.len() != n * s {
            return Err(Error::LimbCount {
                expected: n,
                got: states.len() / s.max(1),
            });
        }
        let mut pre = vec![0.0; h];
        for i in 0..n {
            let x = &states[i * s..(i + 1) * s];
            for (j, p) in pre.iter_mut().enumerate() {
                let w = self.in_w[i].row(j);
                *p += w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            }
            *multiplies += (h * s) as u64;
        }
        for b in &self.in_b {
            for (p, b) in pre.iter_mut().zip(b.data()) {
                *p += b;
            }
        }
        let mut hid: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        for (w, b) in self.hidden_w.iter().zip(&self.hidden_b) {
            hid = (0..h)
                .map(|j| {
                    let z: f64 = w.row(j).iter().zip(&hid).map(|(w, x)| w * x).sum();
                    (z + b.data()[j]).tanh()
                })
                .collect();
            *multiplies += (h * h) as u64;
        }
        let mut mean = Vec::with_capacity(n * a);
        for i in 0..n {
            for q in 0..a {
                let z: f64 = self.out_w[i].row(q).iter().zip(&hid).map(|(w, x)| w * x).sum();
                mean.push(z + self.out_b[i].data()[q]);
            }
            *multiplies += (a * h) as u64;
        }
        Ok(GaussianAction {
            mean,
            log_std: self.log_std.clone(),
        })
    }
}

/// Executes a compiled policy on one `N·S` state vector.
pub fn compiled_forward(policy: &CompiledPolicy, states: &[f64]) -> Result<GaussianAction> {
    let mut count = 0;
    policy.forward_counting(states, &mut count)
}

impl Actor for CompiledPolicy {
    fn act(&self, morph: &Morphology, states: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if morph.n_limbs() != self.n_limbs() {
            return Err(Error::LimbCount {
                expected: self.n_limbs(),
                got: morph.n_limbs(),
            });
        }
        let mut data = Vec::with_capacity(states.rows() * self.n_limbs() * self.action_dim);
        for r in 0..states.rows() {
            data.extend(compiled_forward(self, states.row(r))?.mean);
        }
        let mean = Tensor::matrix(states.rows(), self.n_limbs() * self.action_dim, data)?;
        Ok((mean, self.log_std.clone()))
    }
}
