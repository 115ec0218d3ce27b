//! Flat MLPs: the zero-padded multi-robot MLP and the single-robot MLP that
//! shares the compiled policy's shape.

use rand::{Rng, RngCore};

use super::{
    init_linear, linear, ArchKind, ArchitectureSpec, Bound, CompiledPolicy, DropoutSite,
    ForwardOptions, GaussianAction, Model, ParamSet,
};
use crate::error::{Error, Result};
use crate::morphology::ContextFeatureMatrix;
use crate::numerics::{Tape, Tensor, Var};

/// `prefix.in`, `prefix.h1 .. prefix.h{L-1}`, `prefix.out`.
pub(super) fn init_stack<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    layers: usize,
    output: usize,
    rng: &mut R,
) {
    init_linear(ps, &format!("{prefix}.in"), input, hidden, rng);
    for l in 1..layers {
        init_linear(ps, &format!("{prefix}.h{l}"), hidden, hidden, rng);
    }
    init_linear(ps, &format!("{prefix}.out"), hidden, output, rng);
}

pub(super) fn stack(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    layers: usize,
    opts: &ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let pre = linear(tape, b, &format!("{prefix}.in"), x)?;
    let mut h = tape.tanh(pre);
    h = opts.dropout(tape, h, DropoutSite::BaseHidden, rng)?;
    for l in 1..layers {
        let pre = linear(tape, b, &format!("{prefix}.h{l}"), h)?;
        h = tape.tanh(pre);
        h = opts.dropout(tape, h, DropoutSite::BaseHidden, rng)?;
    }
    linear(tape, b, &format!("{prefix}.out"), h)
}

fn input_width(spec: &ArchitectureSpec) -> usize {
    match spec.kind {
        ArchKind::MultiRobotMlp => spec.n_max * (spec.state_dim + spec.context_dim),
        _ => spec.n_max * spec.state_dim,
    }
}

pub(super) fn init<R: Rng + ?Sized>(spec: &ArchitectureSpec, ps: &mut ParamSet, rng: &mut R) {
    init_stack(
        ps,
        "mlp",
        input_width(spec),
        spec.hidden_width,
        spec.hidden_layers,
        spec.n_max * spec.action_dim,
        rng,
    );
}

/// Zero-padded `[s_1, c_1, .., s_N, c_N, 0, ..]` rows.
fn padded_inputs(spec: &ArchitectureSpec, ctx: &ContextFeatureMatrix, states: &Tensor) -> Tensor {
    let (s, c) = (spec.state_dim, spec.context_dim);
    let width = input_width(spec);
    let n = ctx.n_limbs();
    let mut data = vec![0.0; states.rows() * width];
    for (r, out) in data.chunks_mut(width).enumerate() {
        let row = states.row(r);
        for i in 0..n {
            let base = i * (s + c);
            out[base..base + s].copy_from_slice(&row[i * s..(i + 1) * s]);
            out[base + s..base + s + c].copy_from_slice(ctx.row(i));
        }
    }
    Tensor::matrix(states.rows(), width, data).expect("sized above")
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
    let x = match spec.kind {
        ArchKind::MultiRobotMlp => padded_inputs(spec, ctx, states),
        _ => states.clone(),
    };
    let x = tape.constant(x);
    let out = stack(tape, b, "mlp", x, spec.hidden_layers, opts, rng)?;
    let used = ctx.n_limbs() * spec.action_dim;
    if used == spec.n_max * spec.action_dim {
        Ok(out)
    } else {
        tape.slice_cols(out, 0, used)
    }
}

/// Runs the multi-robot MLP on an already padded input: `state` is
/// `N_max·S` and `context` is `N_max·C`, with absent limbs expected to be
/// zero. Returns all `N_max·A` outputs; callers ignore the padded ones.
pub fn mlp_policy_forward(model: &Model, state: &[f64], context: &[f64]) -> Result<GaussianAction> {
    let spec = model.spec();
    if spec.kind != ArchKind::MultiRobotMlp {
        return Err(Error::Spec(format!("expected multi_robot_mlp, got {}", spec.kind.name())));
    }
    let (s, c, n) = (spec.state_dim, spec.context_dim, spec.n_max);
    if state.len() != n * s || context.len() != n * c {
        return Err(Error::Shape {
            op: "mlp_policy_forward",
            lhs: vec![state.len(), context.len()],
            rhs: vec![n * s, n * c],
        });
    }
    let mut x = Vec::with_capacity(n * (s + c));
    for i in 0..n {
        x.extend_from_slice(&state[i * s..(i + 1) * s]);
        x.extend_from_slice(&context[i * c..(i + 1) * c]);
    }
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let x = tape.constant(Tensor::matrix(1, x.len(), x)?);
    let mut rng = crate::rng::stream(0, "unused");
    let out = stack(&mut tape, &b, "mlp", x, spec.hidden_layers, &ForwardOptions::eval(), &mut rng)?;
    let ls = tape.clamp(b.var("log_std"), super::LOG_STD_MIN, super::LOG_STD_MAX);
    let ls = tape.tile_cols(ls, n)?;
    Ok(GaussianAction {
        mean: tape.value(out).data().to_vec(),
        log_std: tape.value(ls).data().to_vec(),
    })
}

fn param<'a>(ps: &'a ParamSet, name: &str) -> &'a Tensor {
    ps.get(name).expect("parameter exists for this kind")
}

/// The concatenated input layer becomes per-limb blocks; its single bias is
/// carried by limb 0 and the other input biases are zero.
pub(super) fn to_compiled(model: &Model) -> Result<CompiledPolicy> {
    let spec = model.spec();
    let ps = model.params();
    let (n, s, a, h) = (spec.n_max, spec.state_dim, spec.action_dim, spec.hidden_width);
    let w_in = param(ps, "mlp.in.w");
    let b_in = param(ps, "mlp.in.b");
    let in_w = (0..n)
        .map(|i| {
            let mut blk = vec![0.0; h * s];
            for k in 0..s {
                for j in 0..h {
                    blk[j * s + k] = w_in.at(i * s + k, j);
                }
            }
            Tensor::matrix(h, s, blk)
        })
        .collect::<Result<Vec<_>>>()?;
    let in_b = (0..n)
        .map(|i| if i == 0 { b_in.clone() } else { Tensor::zeros(&[h]) })
        .collect();
    let hidden_w = (1..spec.hidden_layers)
        .map(|l| param(ps, &format!("mlp.h{l}.w")).transposed())
        .collect();
    let hidden_b = (1..spec.hidden_layers)
        .map(|l| param(ps, &format!("mlp.h{l}.b")).clone())
        .collect();
    let w_out = param(ps, "mlp.out.w");
    let b_out = param(ps, "mlp.out.b");
    let out_w = (0..n)
        .map(|i| {
            let mut blk = vec![0.0; a * h];
            for q in 0..a {
                for j in 0..h {
                    blk[q * h + j] = w_out.at(j, i * a + q);
                }
            }
            Tensor::matrix(a, h, blk)
        })
        .collect::<Result<Vec<_>>>()?;
    let out_b = (0..n)
        .map(|i| Tensor::new(vec![a], b_out.data()[i * a..(i + 1) * a].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let ls = param(ps, "log_std");
    let log_std = (0..n)
        .flat_map(|_| ls.data().iter().map(|v| v.clamp(super::LOG_STD_MIN, super::LOG_STD_MAX)))
        .collect();
    CompiledPolicy::new(s, a, in_w, in_b, hidden_w, hidden_b, out_w, out_b, log_std)
}
