//! The hypernetwork: a context encoder followed by linear heads that emit
//! every parameter of a per-robot base MLP.
//!
//! Per-limb heads read `e_i` and produce `W_i^in` (as an `S×H` block),
//! `b_i^in`, `W_i^out` (as an `A×H` block) and `b_i^out`; the shared hidden
//! layers are read from the pooled `e_m`.

use rand::{Rng, RngCore};

use super::transformer::{init_layernorm, layernorm, Blocks};
use super::{
    init_linear, linear, normal, ArchitectureSpec, Bound, CompiledPolicy, ContextEncoderKind,
    DropoutSite, ForwardOptions, Model, ParamSet, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::error::Result;
use crate::morphology::ContextFeatureMatrix;
use crate::numerics::{Tape, Tensor, Var};

/// Scale of the context-dependent part of bias heads.
const BIAS_HEAD_GAIN: f64 = 0.1;

/// Encoder output: `e_i` per limb (`[N, E]`) and the pooled `e_m` (`[E]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding {
    pub per_limb: Tensor,
    pub pooled: Tensor,
}

/// A head whose generated outputs have standard deviation about `target`:
/// weights `N(0, target²/E)` and a bias `N(0, target²)` when `random_bias`.
fn init_head<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    e: usize,
    out: usize,
    target: f64,
    random_bias: bool,
    rng: &mut R,
) {
    ps.insert(format!("{name}.w"), normal(&[e, out], target / (e as f64).sqrt(), rng));
    let b = if random_bias {
        normal(&[out], target, rng)
    } else {
        Tensor::zeros(&[out])
    };
    ps.insert(format!("{name}.b"), b);
}

pub(super) fn init<R: Rng + ?Sized>(spec: &ArchitectureSpec, ps: &mut ParamSet, rng: &mut R) {
    let (e, c) = (spec.embed_dim, spec.context_dim);
    let (s, h, a) = (spec.state_dim, spec.hidden_width, spec.action_dim);
    match spec.context_encoder {
        ContextEncoderKind::Mlp => {
            init_linear(ps, "enc.l1", c, e, rng);
            init_linear(ps, "enc.l2", e, e, rng);
        }
        ContextEncoderKind::Transformer => {
            init_linear(ps, "enc.embed", c, e, rng);
            Blocks::of(spec).init(ps, "enc", rng);
            init_layernorm(ps, "enc.ln_f", e);
        }
    }
    // the input layer sums over up to n_max limbs
    let in_target = 1.0 / ((s * spec.n_max) as f64).sqrt();
    let hid_target = 1.0 / (h as f64).sqrt();
    init_head(ps, "head.in_w", e, s * h, in_target, true, rng);
    init_head(ps, "head.in_b", e, h, BIAS_HEAD_GAIN, false, rng);
    for l in 1..spec.hidden_layers {
        init_head(ps, &format!("head.h{l}_w"), e, h * h, hid_target, true, rng);
        init_head(ps, &format!("head.h{l}_b"), e, h, BIAS_HEAD_GAIN, false, rng);
    }
    init_head(ps, "head.out_w", e, a * h, hid_target, true, rng);
    init_head(ps, "head.out_b", e, a, BIAS_HEAD_GAIN, false, rng);
}

/// `(e_i [N, E], e_m [1, E])` on the tape.
fn encode(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    b: &Bound,
    ctx: &ContextFeatureMatrix,
    opts: &ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<(Var, Var)> {
    let c = tape.constant(ctx.to_tensor());
    let e = match spec.context_encoder {
        ContextEncoderKind::Mlp => {
            let z = linear(tape, b, "enc.l1", c)?;
            let z = tape.tanh(z);
            let z = linear(tape, b, "enc.l2", z)?;
            tape.tanh(z)
        }
        ContextEncoderKind::Transformer => {
            let x = linear(tape, b, "enc.embed", c)?;
            let x = Blocks::of(spec).forward(tape, b, "enc", x, 1, ctx.n_limbs(), None)?;
            layernorm(tape, b, "enc.ln_f", x)?
        }
    };
    let e = opts.dropout(tape, e, DropoutSite::ContextEmbedding, rng)?;
    let m = tape.reduce_mean(e, 0)?;
    let m = tape.reshape(m, &[1, spec.embed_dim])?;
    let m = opts.dropout(tape, m, DropoutSite::ContextEmbedding, rng)?;
    Ok((e, m))
}

/// Tape handles of every generated base-network tensor.
struct Generated {
    /// `[N·S, H]`: rows `i·S..(i+1)·S` are limb `i`'s input block.
    w_in: Var,
    /// `[N, H]`
    b_in: Var,
    /// `[H, H]` (in × out) and `[1, H]` per hidden layer.
    hidden: Vec<(Var, Var)>,
    /// `[N·A, H]`
    w_out: Var,
    /// `[N, A]`
    b_out: Var,
}

fn heads(
    spec: &ArchitectureSpec,
    tape: &mut Tape,
    b: &Bound,
    e: Var,
    m: Var,
    n: usize,
) -> Result<Generated> {
    let (s, h, a) = (spec.state_dim, spec.hidden_width, spec.action_dim);
    let w_in = linear(tape, b, "head.in_w", e)?;
    let w_in = tape.reshape(w_in, &[n * s, h])?;
    let b_in = linear(tape, b, "head.in_b", e)?;
    let hidden = (1..spec.hidden_layers)
        .map(|l| {
            let w = linear(tape, b, &format!("head.h{l}_w"), m)?;
            let w = tape.reshape(w, &[h, h])?;
            let bias = linear(tape, b, &format!("head.h{l}_b"), m)?;
            Ok((w, bias))
        })
        .collect::<Result<Vec<_>>>()?;
    let w_out = linear(tape, b, "head.out_w", e)?;
    let w_out = tape.reshape(w_out, &[n * a, h])?;
    let b_out = linear(tape, b, "head.out_b", e)?;
    Ok(Generated {
        w_in,
        b_in,
        hidden,
        w_out,
        b_out,
    })
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
    let n = ctx.n_limbs();
    let (e, m) = encode(spec, tape, b, ctx, opts, rng)?;
    let g = heads(spec, tape, b, e, m, n)?;
    let x = tape.constant(states.clone());
    let pre = tape.matmul(x, g.w_in)?;
    let bias = tape.reduce_sum(g.b_in, 0)?;
    let pre = tape.add_row(pre, bias)?;
    let mut h = tape.tanh(pre);
    h = opts.dropout(tape, h, DropoutSite::BaseHidden, rng)?;
    for &(w, bias) in &g.hidden {
        let pre = tape.matmul(h, w)?;
        let pre = tape.add_row(pre, bias)?;
        h = tape.tanh(pre);
        h = opts.dropout(tape, h, DropoutSite::BaseHidden, rng)?;
    }
    let wt = tape.transpose(g.w_out)?;
    let out = tape.matmul(h, wt)?;
    let b_out = tape.reshape(g.b_out, &[n * spec.action_dim])?;
    tape.add_row(out, b_out)
}

pub(super) fn embed(model: &Model, ctx: &ContextFeatureMatrix) -> Result<ContextEmbedding> {
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let mut rng = crate::rng::stream(0, "unused");
    let (e, m) = encode(model.spec(), &mut tape, &b, ctx, &ForwardOptions::eval(), &mut rng)?;
    Ok(ContextEmbedding {
        per_limb: tape.value(e).clone(),
        pooled: tape.value(m).reshaped(&[model.spec().embed_dim])?,
    })
}

/// Eval-mode generation of the base network; also returns the multiplies
/// spent by the encoder and heads.
pub(super) fn generate(model: &Model, ctx: &ContextFeatureMatrix) -> Result<(CompiledPolicy, u64)> {
    let spec = model.spec();
    let (n, s, h, a) = (ctx.n_limbs(), spec.state_dim, spec.hidden_width, spec.action_dim);
    model.check_limbs(n)?;
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let before = tape.multiply_count();
    let mut rng = crate::rng::stream(0, "unused");
    let (e, m) = encode(spec, &mut tape, &b, ctx, &ForwardOptions::eval(), &mut rng)?;
    let g = heads(spec, &mut tape, &b, e, m, n)?;
    let cost = tape.multiply_count() - before;

    let w_in = tape.value(g.w_in);
    let in_w = (0..n)
        .map(|i| {
            let mut blk = vec![0.0; h * s];
            for k in 0..s {
                let row = w_in.row(i * s + k);
                for j in 0..h {
                    blk[j * s + k] = row[j];
                }
            }
            Tensor::matrix(h, s, blk)
        })
        .collect::<Result<Vec<_>>>()?;
    let b_in = tape.value(g.b_in);
    let in_b = (0..n)
        .map(|i| Tensor::new(vec![h], b_in.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let hidden_w = g.hidden.iter().map(|&(w, _)| tape.value(w).transposed()).collect();
    let hidden_b = g
        .hidden
        .iter()
        .map(|&(_, bias)| tape.value(bias).reshaped(&[h]))
        .collect::<Result<Vec<_>>>()?;
    let w_out = tape.value(g.w_out);
    let out_w = (0..n)
        .map(|i| {
            let data = (0..a).flat_map(|q| w_out.row(i * a + q).to_vec()).collect();
            Tensor::matrix(a, h, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let b_out = tape.value(g.b_out);
    let out_b = (0..n)
        .map(|i| Tensor::new(vec![a], b_out.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let ls = model.params().get("log_std").expect("every model has log_std");
    let log_std = (0..n)
        .flat_map(|_| ls.data().iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)))
        .collect();
    let policy = CompiledPolicy::new(s, a, in_w, in_b, hidden_w, hidden_b, out_w, out_b, log_std)?;
    Ok((policy, cost))
}
