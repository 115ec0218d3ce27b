//! Pre-LN attention over limbs, without positional encodings.
//!
//! In fixed-attention mode the attention weights come from an embedding of
//! the context rows alone, so they are computed once per robot and shared
//! by every state in the batch.

use rand::{Rng, RngCore};

use super::{init_linear, linear, mlp, normal, ArchitectureSpec, Bound, ForwardOptions, ParamSet};
use crate::error::Result;
use crate::morphology::ContextFeatureMatrix;
use crate::numerics::{Tape, Tensor, Var};

pub(super) fn init_layernorm(ps: &mut ParamSet, name: &str, width: usize) {
    ps.insert(format!("{name}.g"), Tensor::filled(&[width], 1.0));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[width]));
}

pub(super) fn layernorm(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{name}.g"));
    let bias = b.var(&format!("{name}.b"));
    tape.layernorm(x, g, bias)
}

/// Sizes of a stack of attention blocks.
#[derive(Clone, Copy, Debug)]
pub(super) struct Blocks {
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
}

impl Blocks {
    pub fn of(spec: &ArchitectureSpec) -> Self {
        Self {
            width: spec.embed_dim,
            heads: spec.attn_heads,
            ff: spec.attn_hidden,
            layers: spec.attn_layers,
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, prefix: &str, rng: &mut R) {
        let (e, d) = (self.width, self.head_dim());
        let std = 1.0 / (e as f64).sqrt();
        for k in 0..self.layers {
            let p = format!("{prefix}.l{k}");
            init_layernorm(ps, &format!("{p}.ln1"), e);
            for h in 0..self.heads {
                ps.insert(format!("{p}.q{h}.w"), normal(&[e, d], std, rng));
                ps.insert(format!("{p}.k{h}.w"), normal(&[e, d], std, rng));
                ps.insert(format!("{p}.v{h}.w"), normal(&[e, d], std, rng));
                ps.insert(format!("{p}.o{h}.w"), normal(&[d, e], std, rng));
            }
            ps.insert(format!("{p}.o.b"), Tensor::zeros(&[e]));
            init_layernorm(ps, &format!("{p}.ln2"), e);
            init_linear(ps, &format!("{p}.ff1"), e, self.ff, rng);
            init_linear(ps, &format!("{p}.ff2"), self.ff, e, rng);
        }
    }

    /// Row-softmax attention weights `[batch, n, n]` of head `h` in layer `k`
    /// from the `[batch·n, E]` input `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn weights(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        k: usize,
        h: usize,
        x: Var,
        batch: usize,
        n: usize,
    ) -> Result<Var> {
        let d = self.head_dim();
        let q = tape.matmul(x, b.var(&format!("{prefix}.l{k}.q{h}.w")))?;
        let q = tape.reshape(q, &[batch, n, d])?;
        let kk = tape.matmul(x, b.var(&format!("{prefix}.l{k}.k{h}.w")))?;
        let kk = tape.reshape(kk, &[batch, n, d])?;
        let kt = tape.transpose(kk)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        Ok(tape.softmax_rows(scores))
    }

    /// Applies every block to `x` (`[batch·n, E]`). `fixed[k][h]`, if given,
    /// replaces the computed attention weights with a `[1, n, n]` matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        mut x: Var,
        batch: usize,
        n: usize,
        fixed: Option<&[Vec<Var>]>,
    ) -> Result<Var> {
        let d = self.head_dim();
        for k in 0..self.layers {
            let p = format!("{prefix}.l{k}");
            let y = layernorm(tape, b, &format!("{p}.ln1"), x)?;
            let mut acc: Option<Var> = None;
            for h in 0..self.heads {
                let a = match fixed {
                    Some(f) => f[k][h],
                    None => self.weights(tape, b, prefix, k, h, y, batch, n)?,
                };
                let v = tape.matmul(y, b.var(&format!("{p}.v{h}.w")))?;
                let v = tape.reshape(v, &[batch, n, d])?;
                let mix = tape.bmm(a, v)?;
                let mix = tape.reshape(mix, &[batch * n, d])?;
                let o = tape.matmul(mix, b.var(&format!("{p}.o{h}.w")))?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, o)?,
                    None => o,
                });
            }
            let attn = tape.add_row(acc.expect("at least one head"), b.var(&format!("{p}.o.b")))?;
            x = tape.add(x, attn)?;
            let y = layernorm(tape, b, &format!("{p}.ln2"), x)?;
            let f = linear(tape, b, &format!("{p}.ff1"), y)?;
            let f = tape.tanh(f);
            let f = linear(tape, b, &format!("{p}.ff2"), f)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}

pub(super) fn init<R: Rng + ?Sized>(spec: &ArchitectureSpec, ps: &mut ParamSet, rng: &mut R) {
    let e = spec.embed_dim;
    init_linear(ps, "embed", spec.state_dim + spec.context_dim, e, rng);
    if spec.fixed_attention {
        init_linear(ps, "ctx", spec.context_dim, e, rng);
    }
    Blocks::of(spec).init(ps, "tf", rng);
    init_layernorm(ps, "tf.ln_f", e);
    mlp::init_stack(
        ps,
        "dec",
        e,
        spec.hidden_width,
        spec.hidden_layers,
        spec.action_dim,
        rng,
    );
}

/// Per-token inputs `[s_i, c_i]`, one row per (sample, limb).
fn tokens(spec: &ArchitectureSpec, ctx: &ContextFeatureMatrix, states: &Tensor) -> Tensor {
    let (s, c, n) = (spec.state_dim, spec.context_dim, ctx.n_limbs());
    let w = s + c;
    let mut data = Vec::with_capacity(states.rows() * n * w);
    for r in 0..states.rows() {
        let row = states.row(r);
        for i in 0..n {
            data.extend_from_slice(&row[i * s..(i + 1) * s]);
            data.extend_from_slice(ctx.row(i));
        }
    }
    Tensor::matrix(states.rows() * n, w, data).expect("sized above")
}

/// Fixed attention weights `[layer][head] -> [1, n, n]` for one robot.
fn fixed_weights(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    b: &Bound,
    ctx: &ContextFeatureMatrix,
) -> Result<Vec<Vec<Var>>> {
    let blocks = Blocks::of(spec);
    let c = tape.constant(ctx.to_tensor());
    let z = linear(tape, b, "ctx", c)?;
    let n = ctx.n_limbs();
    (0..blocks.layers)
        .map(|k| {
            (0..blocks.heads)
                .map(|h| blocks.weights(tape, b, "tf", k, h, z, 1, n))
                .collect()
        })
        .collect()
}

pub(super) fn forward(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    b: &Bound,
    ctx: &ContextFeatureMatrix,
    states: &Tensor,
    opts: &ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let (batch, n) = (states.rows(), ctx.n_limbs());
    let x = tape.constant(tokens(spec, ctx, states));
    let x = linear(tape, b, "embed", x)?;
    let fixed = if spec.fixed_attention {
        Some(fixed_weights(spec, tape, b, ctx)?)
    } else {
        None
    };
    let x = Blocks::of(spec).forward(tape, b, "tf", x, batch, n, fixed.as_deref())?;
    let x = layernorm(tape, b, "tf.ln_f", x)?;
    let out = mlp::stack(tape, b, "dec", x, spec.hidden_layers, opts, rng)?;
    tape.reshape(out, &[batch, n * spec.action_dim])
}

/// Attention weights of every layer and head for one robot, as `n × n`
/// row-major matrices. Only meaningful for fixed attention, where they do
/// not depend on the state.
pub fn fixed_attention_matrices(
    model: &super::Model,
    ctx: &ContextFeatureMatrix,
) -> Result<Vec<Vec<Tensor>>> {
    if model.spec().kind != super::ArchKind::Transformer || !model.spec().fixed_attention {
        return Err(crate::Error::Spec("model has no fixed attention".into()));
    }
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let w = fixed_weights(model.spec(), &mut tape, &b, ctx)?;
    Ok(w
        .iter()
        .map(|layer| layer.iter().map(|&v| tape.value(v).clone()).collect())
        .collect())
}
