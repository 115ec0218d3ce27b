//! Parameter and FLOPs accounting.
//!
//! A linear map from `M` to `N` features costs `2·M·N` FLOPs. Attention
//! scores `Q·Kᵀ` and the mix `A·V` are each counted as `2·N²·E` for `N`
//! tokens of width `E`. Biases, activations, normalization and softmax are
//! not counted. Every count here is matched exactly by twice the tape's
//! multiply counter for a single-state forward pass.

use std::fmt::Write as _;

use crate::architectures::{ArchKind, ArchitectureSpec, ContextEncoderKind};
use crate::error::{Error, Result};

/// FLOPs of one `M → N` linear layer.
pub fn linear_flops(m: usize, n: usize) -> u64 {
    2 * m as u64 * n as u64
}

fn mlp_cost(input: usize, hidden: usize, layers: usize, output: usize) -> (u64, u64) {
    let (i, h, o) = (input as u64, hidden as u64, output as u64);
    let l = layers as u64 - 1;
    let params = i * h + h + l * (h * h + h) + h * o + o;
    let flops = linear_flops(input, hidden)
        + l * linear_flops(hidden, hidden)
        + linear_flops(hidden, output);
    (params, flops)
}

/// Attention blocks of width `e` over `n` tokens.
fn blocks_cost(e: usize, ff: usize, layers: usize, n: usize) -> (u64, u64) {
    let (e64, f, n64, l) = (e as u64, ff as u64, n as u64, layers as u64);
    let per_params = 2 * e64 + 4 * e64 * e64 + e64 + 2 * e64 + (e64 * f + f) + (f * e64 + e64);
    let per_flops = 4 * n64 * linear_flops(e, e)
        + 2 * n64 * n64 * e64 * 2
        + n64 * (linear_flops(e, ff) + linear_flops(ff, e));
    (l * per_params, l * per_flops)
}

/// Base-MLP cost of a compiled policy for `n` limbs.
pub fn compiled_cost(spec: &ArchitectureSpec, n: usize) -> (u64, u64) {
    let (s, h, a) = (spec.state_dim as u64, spec.hidden_width as u64, spec.action_dim as u64);
    let (n64, l) = (n as u64, spec.hidden_layers as u64 - 1);
    let params = n64 * (h * s + h) + l * (h * h + h) + n64 * (a * h + a);
    let flops = n64 * linear_flops(spec.state_dim, spec.hidden_width)
        + l * linear_flops(spec.hidden_width, spec.hidden_width)
        + n64 * linear_flops(spec.hidden_width, spec.action_dim);
    (params, flops)
}

/// `(parameters, FLOPs per step)` when acting for a robot with `n` limbs.
/// Hypernetworks are costed by the compiled policy they deploy. The
/// learnable log-std vector is not counted as a parameter.
pub fn inference_cost(spec: &ArchitectureSpec, n: usize) -> (u64, u64) {
    let (s, c, a) = (spec.state_dim, spec.context_dim, spec.action_dim);
    let (h, l, e) = (spec.hidden_width, spec.hidden_layers, spec.embed_dim);
    match spec.kind {
        ArchKind::MultiRobotMlp => mlp_cost(spec.n_max * (s + c), h, l, spec.n_max * a),
        ArchKind::Hypernetwork | ArchKind::CompiledMlp => compiled_cost(spec, n),
        ArchKind::Transformer => {
            let n64 = n as u64;
            let mut params = ((s + c) * e + e) as u64;
            let mut flops = n64 * linear_flops(s + c, e);
            if spec.fixed_attention {
                params += (c * e + e) as u64;
                flops += n64 * linear_flops(c, e);
            }
            let (bp, bf) = blocks_cost(e, spec.attn_hidden, spec.attn_layers, n);
            let (dp, df) = mlp_cost(e, h, l, a);
            params += bp + 2 * e as u64 + dp;
            flops += bf + n64 * df;
            (params, flops)
        }
    }
}

/// Parameters of the hypernetwork itself (encoder plus heads).
pub fn hypernetwork_params(spec: &ArchitectureSpec) -> u64 {
    let (e, c) = (spec.embed_dim as u64, spec.context_dim as u64);
    let (s, h, a) = (spec.state_dim as u64, spec.hidden_width as u64, spec.action_dim as u64);
    let l = spec.hidden_layers as u64 - 1;
    let encoder = match spec.context_encoder {
        ContextEncoderKind::Mlp => c * e + e + e * e + e,
        ContextEncoderKind::Transformer => {
            c * e + e + blocks_cost(spec.embed_dim, spec.attn_hidden, spec.attn_layers, 1).0 + 2 * e
        }
    };
    let head = |out: u64| e * out + out;
    encoder + head(s * h) + head(h) + l * (head(h * h) + head(h)) + head(a * h) + head(a)
}

/// One-time FLOPs of generating a compiled policy for `n` limbs: the
/// context encoder plus every head evaluation. Zero for other kinds.
pub fn hn_compile_cost(spec: &ArchitectureSpec, n: usize) -> u64 {
    if spec.kind != ArchKind::Hypernetwork {
        return 0;
    }
    let (e, c) = (spec.embed_dim, spec.context_dim);
    let (s, h, a) = (spec.state_dim, spec.hidden_width, spec.action_dim);
    let n64 = n as u64;
    let encoder = match spec.context_encoder {
        ContextEncoderKind::Mlp => n64 * (linear_flops(c, e) + linear_flops(e, e)),
        ContextEncoderKind::Transformer => {
            n64 * linear_flops(c, e) + blocks_cost(e, spec.attn_hidden, spec.attn_layers, n).1
        }
    };
    let per_limb = linear_flops(e, s * h) + linear_flops(e, h) + linear_flops(e, a * h) + linear_flops(e, a);
    let shared = (spec.hidden_layers as u64 - 1) * (linear_flops(e, h * h) + linear_flops(e, h));
    encoder + n64 * per_limb + shared
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub kind: ArchKind,
    pub params_abs: u64,
    pub params_rel: f64,
    pub flops_abs: u64,
    pub flops_rel: f64,
    /// Only for hypernetworks.
    pub compile_flops: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub n_limbs: usize,
    pub rows: Vec<CostRow>,
}

pub const REPORT_HEADER: &str = "name,params_abs,params_rel,flops_abs,flops_rel,compile_flops";

/// Costs every entry for `n` limbs, relative to the first hypernetwork (or
/// compiled MLP) entry.
pub fn emit_report(entries: &[(String, ArchitectureSpec)], n: usize) -> Result<CostReport> {
    let base = entries
        .iter()
        .find(|(_, s)| matches!(s.kind, ArchKind::Hypernetwork | ArchKind::CompiledMlp))
        .ok_or_else(|| Error::Report("no hypernetwork or compiled_mlp entry to compare against".into()))?;
    for (name, spec) in entries {
        spec.validate().map_err(|e| Error::Report(format!("{name}: {e}")))?;
    }
    let (bp, bf) = inference_cost(&base.1, n);
    let rows = entries
        .iter()
        .map(|(name, spec)| {
            let (p, f) = inference_cost(spec, n);
            CostRow {
                name: name.clone(),
                kind: spec.kind,
                params_abs: p,
                params_rel: p as f64 / bp as f64,
                flops_abs: f,
                flops_rel: f as f64 / bf as f64,
                compile_flops: (spec.kind == ArchKind::Hypernetwork).then(|| hn_compile_cost(spec, n)),
            }
        })
        .collect();
    Ok(CostReport { n_limbs: n, rows })
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let compile = r.compile_flops.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.name, r.params_abs, r.params_rel, r.flops_abs, r.flops_rel, compile
            );
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// The architectures compared at inference time in each environment, at
/// 13 state and 1 action dimension per limb. `env` is `ft`, `vt` or
/// `obstacle`; the first two rows share the teacher's attention sizes.
pub fn table2_specs(env: &str) -> Result<Vec<(String, ArchitectureSpec)>> {
    let base_layers = match env {
        "ft" => 2,
        "vt" | "obstacle" => 3,
        _ => return Err(Error::Report(format!("unknown environment `{env}`"))),
    };
    let (s, a) = (13, 1);
    let tf = |layers: usize, heads: usize, hidden: usize, fixed: bool| {
        let mut t = ArchitectureSpec::new(ArchKind::Transformer, s, a);
        t.embed_dim = 128;
        t.attn_layers = layers;
        t.attn_heads = heads;
        t.attn_hidden = hidden;
        t.fixed_attention = fixed;
        t.hidden_layers = 1;
        t.hidden_width = 64;
        t
    };
    let (tf_layers, tf_hidden) = if env == "ft" { (1, 256) } else { (2, 128) };
    let mut mlp = ArchitectureSpec::new(ArchKind::MultiRobotMlp, s, a);
    mlp.hidden_layers = base_layers;
    mlp.hidden_width = 256;
    let mut hn = ArchitectureSpec::new(ArchKind::Hypernetwork, s, a);
    hn.hidden_layers = base_layers;
    hn.hidden_width = 256;
    hn.embed_dim = 128;
    hn.attn_layers = 5;
    hn.attn_heads = 2;
    hn.attn_hidden = 1024;
    Ok(vec![
        ("modumorph_oracle".into(), tf(5, 2, 1024, true)),
        ("tf_compressed".into(), tf(tf_layers, 1, tf_hidden, false)),
        ("modumorph_compressed".into(), tf(1, 1, 128, true)),
        ("multi_robot_mlp".into(), mlp),
        ("hyperdistill".into(), hn),
    ])
}

#[cfg(test)]
mod tests;
