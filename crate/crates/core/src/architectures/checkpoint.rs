//! The `HDK1` container.
//!
//! ```text
//! "HDK1" version:u8
//! fields:u32   { tag_len:u8 tag type:u8 value }   type 0 = u64, 1 = text (u32 len + bytes), 2 = bool (u8)
//! tensors:u32  { name_len:u32 name rank:u32 extents:u64* values:f64* }
//! ```
//!
//! Everything is little-endian. Compiled policies use the same container
//! with `kind = compiled_mlp` and per-limb block tensors.

use super::{
    feature_transform_name, parse_feature_transform, ArchKind, ArchitectureSpec, CompiledPolicy,
    ContextEncoderKind, Model, ParamSet,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"HDK1";
const VERSION: u8 = 1;

enum Value {
    Uint(u64),
    Text(String),
    Bool(bool),
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Model(Model),
    Compiled(CompiledPolicy),
}

fn spec_fields(spec: &ArchitectureSpec) -> Vec<(&'static str, Value)> {
    use Value::*;
    vec![
        ("kind", Text(spec.kind.name().into())),
        ("hidden_layers", Uint(spec.hidden_layers as u64)),
        ("hidden_width", Uint(spec.hidden_width as u64)),
        ("embed_dim", Uint(spec.embed_dim as u64)),
        ("attn_layers", Uint(spec.attn_layers as u64)),
        ("attn_heads", Uint(spec.attn_heads as u64)),
        ("attn_hidden", Uint(spec.attn_hidden as u64)),
        ("context_encoder", Text(spec.context_encoder.name().into())),
        ("state_dim", Uint(spec.state_dim as u64)),
        ("action_dim", Uint(spec.action_dim as u64)),
        ("context_dim", Uint(spec.context_dim as u64)),
        ("n_max", Uint(spec.n_max as u64)),
        ("fixed_attention", Bool(spec.fixed_attention)),
        ("feature_transform", Text(feature_transform_name(spec.feature_transform).into())),
    ]
}

fn encode(spec: &ArchitectureSpec, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let fields = spec_fields(spec);
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (tag, v) in fields {
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        match v {
            Value::Uint(x) => {
                out.push(0);
                out.extend_from_slice(&x.to_le_bytes());
            }
            Value::Text(s) => {
                out.push(1);
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Value::Bool(b) => {
                out.push(2);
                out.push(u8::from(b));
            }
        }
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
}

fn decode(buf: &[u8]) -> Result<(ArchitectureSpec, ParamSet)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an HDK1 checkpoint".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut spec = ArchitectureSpec::new(ArchKind::MultiRobotMlp, 1, 1);
    let mut seen_kind = false;
    for _ in 0..r.u32()? {
        let len = r.u8()? as usize;
        let tag = r.text(len)?;
        let value = match r.u8()? {
            0 => Value::Uint(r.u64()?),
            1 => {
                let n = r.u32()? as usize;
                Value::Text(r.text(n)?)
            }
            2 => Value::Bool(r.u8()? != 0),
            t => return Err(Error::Format(format!("unknown field type {t} for `{tag}`"))),
        };
        let bad = || Error::Format(format!("bad value for field `{tag}`"));
        match (tag.as_str(), value) {
            ("kind", Value::Text(s)) => {
                spec.kind = ArchKind::parse(&s).ok_or_else(bad)?;
                seen_kind = true;
            }
            ("context_encoder", Value::Text(s)) => {
                spec.context_encoder = ContextEncoderKind::parse(&s).ok_or_else(bad)?
            }
            ("feature_transform", Value::Text(s)) => {
                spec.feature_transform = parse_feature_transform(&s).ok_or_else(bad)?
            }
            ("fixed_attention", Value::Bool(b)) => spec.fixed_attention = b,
            (name, Value::Uint(x)) => {
                let x = x as usize;
                match name {
                    "hidden_layers" => spec.hidden_layers = x,
                    "hidden_width" => spec.hidden_width = x,
                    "embed_dim" => spec.embed_dim = x,
                    "attn_layers" => spec.attn_layers = x,
                    "attn_heads" => spec.attn_heads = x,
                    "attn_hidden" => spec.attn_hidden = x,
                    "state_dim" => spec.state_dim = x,
                    "action_dim" => spec.action_dim = x,
                    "context_dim" => spec.context_dim = x,
                    "n_max" => spec.n_max = x,
                    _ => return Err(Error::Format(format!("unknown field `{name}`"))),
                }
            }
            _ => return Err(bad()),
        }
    }
    if !seen_kind {
        return Err(Error::Format("checkpoint has no kind field".into()));
    }
    let mut params = ParamSet::new();
    for _ in 0..r.u32()? {
        let len = r.u32()? as usize;
        let name = r.text(len)?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= buf.len())
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let data = (0..numel)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        if params.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((spec, params))
}

fn compiled_spec(p: &CompiledPolicy) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::new(ArchKind::CompiledMlp, p.state_dim(), p.action_dim());
    spec.hidden_layers = p.hidden_layers();
    spec.hidden_width = p.hidden_width();
    spec.n_max = p.n_limbs();
    spec
}

impl CompiledPolicy {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&compiled_spec(self), &self.to_params())
    }
}

impl Model {
    /// Serializes the model. A `compiled_mlp` model is stored in the
    /// compiled per-limb layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self.spec().kind {
            ArchKind::CompiledMlp => self.to_compiled().expect("kind checked").to_bytes(),
            _ => encode(self.spec(), self.params()),
        }
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (spec, params) = decode(bytes)?;
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    match spec.kind {
        ArchKind::CompiledMlp => Ok(Checkpoint::Compiled(CompiledPolicy::from_params(
            spec.state_dim,
            spec.action_dim,
            spec.n_max,
            spec.hidden_layers,
            &params,
        )?)),
        _ => Ok(Checkpoint::Model(Model::from_params(spec, params)?)),
    }
}
