//! Policy architectures over per-limb states.
//!
//! Every architecture is a [`Model`]: an [`ArchitectureSpec`] plus a named
//! [`ParamSet`]. Forward passes are recorded on a [`Tape`] one morphology
//! group at a time: a `[B, N·S]` state batch for a single robot whose limbs
//! are laid out in DFS order. Outputs are `[B, N·A]` means plus a shared
//! `[1, N·A]` log-std row.

mod checkpoint;
mod compiled;
mod hyper;
mod mlp;
mod transformer;

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

pub use checkpoint::{load_checkpoint, Checkpoint};
pub use compiled::{compiled_forward, CompiledPolicy};
pub use hyper::ContextEmbedding;
pub use mlp::mlp_policy_forward;
pub use transformer::fixed_attention_matrices;

use crate::error::{Error, Result};
use crate::morphology::{context_features_with, ContextFeatureMatrix, FeatureTransform, Morphology, CONTEXT_DIM};
use crate::numerics::{Mode, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Initial value of every learnable log-std entry.
pub const LOG_STD_INIT: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    MultiRobotMlp,
    Transformer,
    Hypernetwork,
    /// A plain MLP for one fixed robot, i.e. the compiled policy shape.
    CompiledMlp,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [
        ArchKind::MultiRobotMlp,
        ArchKind::Transformer,
        ArchKind::Hypernetwork,
        ArchKind::CompiledMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::MultiRobotMlp => "multi_robot_mlp",
            ArchKind::Transformer => "transformer",
            ArchKind::Hypernetwork => "hypernetwork",
            ArchKind::CompiledMlp => "compiled_mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextEncoderKind {
    Mlp,
    Transformer,
}

impl ContextEncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            ContextEncoderKind::Mlp => "mlp",
            ContextEncoderKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp" => Some(Self::Mlp),
            "transformer" => Some(Self::Transformer),
            _ => None,
        }
    }
}

pub fn feature_transform_name(t: FeatureTransform) -> &'static str {
    match t {
        FeatureTransform::Absolute => "absolute",
        FeatureTransform::Relative => "relative",
    }
}

pub fn parse_feature_transform(s: &str) -> Option<FeatureTransform> {
    match s {
        "absolute" => Some(FeatureTransform::Absolute),
        "relative" => Some(FeatureTransform::Relative),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Hidden activations `L` of the MLP (or decoder, or base network).
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    /// Feed-forward width inside each attention block.
    pub attn_hidden: usize,
    /// Hypernetwork only.
    pub context_encoder: ContextEncoderKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub context_dim: usize,
    /// Maximum limb count; for `compiled_mlp` the exact limb count.
    pub n_max: usize,
    /// Transformer only: attention weights from context features alone.
    pub fixed_attention: bool,
    pub feature_transform: FeatureTransform,
}

impl ArchitectureSpec {
    /// Defaults for `kind` with the given per-limb state and action widths.
    pub fn new(kind: ArchKind, state_dim: usize, action_dim: usize) -> Self {
        Self {
            kind,
            hidden_layers: 2,
            hidden_width: 256,
            embed_dim: if kind == ArchKind::Hypernetwork { 64 } else { 128 },
            attn_layers: 2,
            attn_heads: 2,
            attn_hidden: 256,
            context_encoder: ContextEncoderKind::Transformer,
            state_dim,
            action_dim,
            context_dim: CONTEXT_DIM,
            n_max: crate::morphology::N_MAX,
            fixed_attention: false,
            feature_transform: FeatureTransform::Absolute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_layers", self.hidden_layers),
            ("hidden_width", self.hidden_width),
            ("embed_dim", self.embed_dim),
            ("attn_heads", self.attn_heads),
            ("attn_hidden", self.attn_hidden),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("context_dim", self.context_dim),
            ("n_max", self.n_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.uses_attention() && self.attn_layers == 0 {
            return Err(Error::Spec("attn_layers must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::Spec(format!(
                "embed_dim {} not divisible by attn_heads {}",
                self.embed_dim, self.attn_heads
            )));
        }
        if self.context_dim != CONTEXT_DIM {
            return Err(Error::Spec(format!(
                "context_dim must be {CONTEXT_DIM}, got {}",
                self.context_dim
            )));
        }
        Ok(())
    }

    /// Whether any attention block is present.
    pub fn uses_attention(&self) -> bool {
        match self.kind {
            ArchKind::Transformer => true,
            ArchKind::Hypernetwork => self.context_encoder == ContextEncoderKind::Transformer,
            _ => false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attn_heads
    }
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total stored scalars.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'p> {
    params: &'p ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.params.position(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter `{name}` is not part of this model"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Where dropout is applied during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DropoutSite {
    #[default]
    None,
    /// On the hypernetwork's context embeddings `e_i` and `e_m`.
    ContextEmbedding,
    /// On the hidden activations of the (generated) base MLP.
    BaseHidden,
}

impl DropoutSite {
    pub fn name(self) -> &'static str {
        match self {
            DropoutSite::None => "none",
            DropoutSite::ContextEmbedding => "context_embedding",
            DropoutSite::BaseHidden => "base_mlp_hidden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "context_embedding" => Some(Self::ContextEmbedding),
            "base_mlp_hidden" => Some(Self::BaseHidden),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout_p: f64,
    pub site: DropoutSite,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_p: 0.0,
            site: DropoutSite::None,
        }
    }

    pub fn train(dropout_p: f64, site: DropoutSite) -> Self {
        Self {
            mode: Mode::Train,
            dropout_p,
            site,
        }
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        site: DropoutSite,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if self.site == site && site != DropoutSite::None {
            tape.dropout(x, self.dropout_p, self.mode, rng)
        } else {
            Ok(x)
        }
    }
}

/// Diagonal Gaussian over the `N·A` action vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAction {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Tape handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    /// `[B, N·A]`
    pub mean: Var,
    /// `[1, N·A]`
    pub log_std: Var,
}

/// Anything that maps per-limb states of a robot to Gaussian actions.
pub trait Actor {
    /// `states` is `[B, N·S]`; returns `[B, N·A]` means and the `N·A`
    /// log-std vector.
    fn act(&self, morph: &Morphology, states: &Tensor) -> Result<(Tensor, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    params: ParamSet,
}

pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fan-in scaled linear layer `name.w` `[fan_in, fan_out]` and zero `name.b`.
pub(crate) fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    ps.insert(
        format!("{name}.w"),
        normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    tape.linear(x, w, bias)
}

impl Model {
    pub fn init<R: Rng + ?Sized>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        match spec.kind {
            ArchKind::MultiRobotMlp | ArchKind::CompiledMlp => mlp::init(&spec, &mut params, rng),
            ArchKind::Transformer => transformer::init(&spec, &mut params, rng),
            ArchKind::Hypernetwork => hyper::init(&spec, &mut params, rng),
        }
        params.insert(
            "log_std",
            Tensor::filled(&[1, spec.action_dim], LOG_STD_INIT),
        );
        Ok(Self { spec, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_params(spec: ArchitectureSpec, params: ParamSet) -> Result<Self> {
        let template = Self::init(spec.clone(), &mut crate::rng::stream(0, "unused"))?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter `{name}`"))),
            }
        }
        // keep the canonical ordering
        let mut ordered = ParamSet::new();
        for name in template.params.names() {
            ordered.insert(name.clone(), params.get(name).expect("checked").clone());
        }
        Ok(Self {
            spec,
            params: ordered,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Sets every log-std entry to `value`.
    pub fn set_log_std(&mut self, value: f64) {
        let a = self.spec.action_dim;
        self.params.insert("log_std", Tensor::filled(&[1, a], value));
    }

    /// Context rows for `m` under this model's feature transform.
    pub fn context(&self, m: &Morphology) -> ContextFeatureMatrix {
        context_features_with(m, self.spec.feature_transform)
    }

    pub fn check_limbs(&self, n: usize) -> Result<()> {
        let ok = match self.spec.kind {
            ArchKind::CompiledMlp => n == self.spec.n_max,
            _ => n >= 1 && n <= self.spec.n_max,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::LimbCount {
                expected: self.spec.n_max,
                got: n,
            })
        }
    }

    /// Records a forward pass for one robot. `states` is `[B, N·S]` with
    /// limbs in DFS order and `ctx` holds the matching `N` context rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ctx: &ContextFeatureMatrix,
        states: &Tensor,
        opts: &ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<PolicyOutput> {
        let n = ctx.n_limbs();
        self.check_limbs(n)?;
        let s = self.spec.state_dim;
        if states.rank() != 2 || states.cols() != n * s {
            return Err(Error::Shape {
                op: "policy states",
                lhs: states.shape().to_vec(),
                rhs: vec![n * s],
            });
        }
        let mean = match self.spec.kind {
            ArchKind::MultiRobotMlp | ArchKind::CompiledMlp => {
                mlp::forward(&self.spec, tape, b, ctx, states, opts, rng)?
            }
            ArchKind::Transformer => transformer::forward(&self.spec, tape, b, ctx, states, opts, rng)?,
            ArchKind::Hypernetwork => hyper::forward(&self.spec, tape, b, ctx, states, opts, rng)?,
        };
        let ls = tape.clamp(b.var("log_std"), LOG_STD_MIN, LOG_STD_MAX);
        let log_std = tape.tile_cols(ls, n)?;
        Ok(PolicyOutput { mean, log_std })
    }

    /// Eval-mode action distribution for every row of `states`.
    pub fn act_ctx(&self, ctx: &ContextFeatureMatrix, states: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let mut rng = crate::rng::stream(0, "unused");
        let out = self.forward(&mut tape, &b, ctx, states, &ForwardOptions::eval(), &mut rng)?;
        Ok((
            tape.value(out.mean).clone(),
            tape.value(out.log_std).data().to_vec(),
        ))
    }

    /// Compiles the hypernetwork into a per-robot MLP for `m`.
    pub fn compile(&self, m: &Morphology) -> Result<CompiledPolicy> {
        Ok(self.compile_counting(m)?.0)
    }

    /// [`Model::compile`] plus the multiplies spent generating the policy.
    pub fn compile_counting(&self, m: &Morphology) -> Result<(CompiledPolicy, u64)> {
        if self.spec.kind != ArchKind::Hypernetwork {
            return Err(Error::Spec(format!(
                "only a hypernetwork can be compiled, not {}",
                self.spec.kind.name()
            )));
        }
        hyper::generate(self, &self.context(m))
    }

    /// Converts a trained single-robot MLP into the compiled layout.
    pub fn to_compiled(&self) -> Result<CompiledPolicy> {
        if self.spec.kind != ArchKind::CompiledMlp {
            return Err(Error::Spec(format!(
                "expected a compiled_mlp model, got {}",
                self.spec.kind.name()
            )));
        }
        mlp::to_compiled(self)
    }

    /// Per-limb context embeddings of the hypernetwork (eval mode).
    pub fn context_embedding(&self, ctx: &ContextFeatureMatrix) -> Result<ContextEmbedding> {
        if self.spec.kind != ArchKind::Hypernetwork {
            return Err(Error::Spec(format!("{} has no context encoder", self.spec.kind.name())));
        }
        self.check_limbs(ctx.n_limbs())?;
        hyper::embed(self, ctx)
    }
}

impl Actor for Model {
    fn act(&self, morph: &Morphology, states: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.act_ctx(&self.context(morph), states)
    }
}
