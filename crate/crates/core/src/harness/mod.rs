//! Desk-scale experiments: a seeded oracle teacher, data collection,
//! held-out evaluation and the ablation driver.
//!
//! The oracle is a frozen randomly initialized fixed-attention transformer,
//! so "return" becomes KL to the oracle on morphologies never seen during
//! training (lower is better).

mod ablation;
mod plot;

pub use ablation::{run_ablation, Ablation, AblationTable, ResultRow, RunFailure, TrainingCurve, RESULTS_HEADER};
pub use plot::{bar_chart_svg, curves_svg};

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::architectures::{
    Actor, ArchKind, ArchitectureSpec, CompiledPolicy, ContextEncoderKind, Model,
};
use crate::distillation::{
    kl_diag_gaussian, Dataset, DistillConfig, TeacherFit, TeacherFitConfig, TransitionRecord,
};
use crate::error::{Error, Result};
use crate::morphology::{generate_family, random_morphology, FeatureTransform, Morphology};
use crate::numerics::Tensor;
use crate::rng::stream;

pub const DESK_STATE_DIM: usize = 4;
pub const DESK_ACTION_DIM: usize = 2;
pub const ORACLE_LOG_STD: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherMode {
    UniversalOracle,
    PerRobotMlps,
}

impl TeacherMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::UniversalOracle => "universal_oracle",
            Self::PerRobotMlps => "per_robot_mlps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::UniversalOracle, Self::PerRobotMlps].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_train_morphs: usize,
    pub n_test_morphs: usize,
    pub n_pd_morphs: Vec<usize>,
    pub transitions_per_morph: usize,
    pub min_limbs: usize,
    pub max_limbs: usize,
    /// The hypernetwork student; the other students borrow its base sizes.
    pub student: ArchitectureSpec,
    pub teacher_mode: TeacherMode,
    pub dropout: bool,
    pub context_encoder: ContextEncoderKind,
    pub feature_transform: bool,
    pub repeats: usize,
    pub distill: DistillConfig,
    pub teacher_fit: TeacherFitConfig,
    /// Epochs of every ablation sub-run.
    pub ablation_epochs: usize,
    pub n_eval_states: usize,
    /// Records measured wall time in results; off keeps tables bitwise
    /// reproducible.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train_morphs: 16,
            n_test_morphs: 16,
            n_pd_morphs: vec![16, 32, 64],
            transitions_per_morph: 512,
            min_limbs: 3,
            max_limbs: 6,
            student: desk_student(),
            teacher_mode: TeacherMode::UniversalOracle,
            dropout: true,
            context_encoder: ContextEncoderKind::Transformer,
            feature_transform: true,
            repeats: 5,
            distill: DistillConfig::default(),
            teacher_fit: TeacherFitConfig::default(),
            ablation_epochs: 40,
            n_eval_states: 256,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    /// Counts from the original large-scale runs.
    pub fn paper_scale() -> Self {
        Self {
            n_train_morphs: 100,
            n_test_morphs: 100,
            n_pd_morphs: vec![100, 500, 1000],
            transitions_per_morph: 8000,
            distill: DistillConfig {
                minibatch: DistillConfig::PAPER_MINIBATCH,
                ..DistillConfig::default()
            },
            ablation_epochs: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train_morphs", self.n_train_morphs),
            ("n_test_morphs", self.n_test_morphs),
            ("transitions_per_morph", self.transitions_per_morph),
            ("repeats", self.repeats),
            ("n_eval_states", self.n_eval_states),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.min_limbs < 2 || self.min_limbs > self.max_limbs || self.max_limbs > self.student.n_max {
            return Err(Error::Config(format!(
                "limb range {}..={} must lie in 2..={}",
                self.min_limbs, self.max_limbs, self.student.n_max
            )));
        }
        if self.n_pd_morphs.iter().any(|&p| p < self.n_train_morphs) {
            return Err(Error::Config("n_pd_morphs entries must be at least n_train_morphs".into()));
        }
        if self.student.kind != ArchKind::Hypernetwork {
            return Err(Error::Config("student must be a hypernetwork spec".into()));
        }
        if (self.student.state_dim, self.student.action_dim) != (DESK_STATE_DIM, DESK_ACTION_DIM) {
            return Err(Error::Config(format!(
                "student state/action dims must be {DESK_STATE_DIM}/{DESK_ACTION_DIM}"
            )));
        }
        self.student.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.distill.validate()
    }
}

/// The hypernetwork student used at desk scale.
pub fn desk_student() -> ArchitectureSpec {
    let mut s = ArchitectureSpec::new(ArchKind::Hypernetwork, DESK_STATE_DIM, DESK_ACTION_DIM);
    s.hidden_layers = 2;
    s.hidden_width = 64;
    s.embed_dim = 32;
    s.attn_layers = 1;
    s.attn_heads = 2;
    s.attn_hidden = 64;
    s
}

/// Architecture of the oracle teacher.
pub fn oracle_spec() -> ArchitectureSpec {
    let mut s = ArchitectureSpec::new(ArchKind::Transformer, DESK_STATE_DIM, DESK_ACTION_DIM);
    s.fixed_attention = true;
    s.embed_dim = 32;
    s.attn_layers = 2;
    s.attn_heads = 2;
    s.attn_hidden = 64;
    s.hidden_layers = 1;
    s.hidden_width = 64;
    s.feature_transform = FeatureTransform::Absolute;
    s
}

/// Frozen random fixed-attention transformer with log-std −1.
pub fn make_oracle(seed: u64) -> Model {
    let mut m = Model::init(oracle_spec(), &mut stream(seed, "oracle")).expect("oracle spec is valid");
    m.set_log_std(ORACLE_LOG_STD);
    m
}

/// A standard-normal `[rows, n·s]` state batch.
pub fn sample_states(rows: usize, n_limbs: usize, state_dim: usize, rng: &mut dyn RngCore) -> Tensor {
    let w = n_limbs * state_dim;
    let data = (0..rows * w).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, w, data).expect("consistent size")
}

/// Labels `per_morph` standard-normal states of every morphology with the
/// teacher's action distribution.
pub fn collect(
    teacher: &dyn Actor,
    morphs: &[Morphology],
    state_dim: usize,
    per_morph: usize,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    let mut records = Vec::with_capacity(morphs.len() * per_morph);
    for m in morphs {
        let n = m.n_limbs();
        let states = sample_states(per_morph, n, state_dim, rng);
        let (mean, log_std) = teacher.act(m, &states)?;
        let a = mean.cols() / n;
        for r in 0..per_morph {
            records.push(TransitionRecord {
                morphology_id: m.id().to_string(),
                n_limbs: n,
                state_dim,
                action_dim: a,
                states: states.row(r).to_vec(),
                mean: mean.row(r).to_vec(),
                log_std: log_std.clone(),
            });
        }
    }
    Ok(Dataset::new(records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(morphology id, mean per-dimension KL)`.
    pub per_morph: Vec<(String, f64)>,
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean per-dimension `KL(oracle ‖ student)` over fresh states, for every
/// morphology and aggregated across them.
pub fn evaluate(
    student: &dyn Actor,
    oracle: &dyn Actor,
    morphs: &[Morphology],
    state_dim: usize,
    n_states: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalReport> {
    if morphs.is_empty() || n_states == 0 {
        return Err(Error::Config("evaluation needs morphologies and states".into()));
    }
    let mut per_morph = Vec::with_capacity(morphs.len());
    for m in morphs {
        let states = sample_states(n_states, m.n_limbs(), state_dim, rng);
        let (om, ols) = oracle.act(m, &states)?;
        let (sm, sls) = student.act(m, &states)?;
        let mut total = 0.0;
        for r in 0..n_states {
            total += kl_diag_gaussian(om.row(r), &ols, sm.row(r), &sls)?;
        }
        per_morph.push((m.id().to_string(), total / om.numel() as f64));
    }
    let kls: Vec<f64> = per_morph.iter().map(|(_, k)| *k).collect();
    let (mean, stderr) = mean_stderr(&kls);
    Ok(EvalReport {
        per_morph,
        mean,
        stderr,
    })
}

/// Per-robot compiled policies acting as one teacher.
#[derive(Clone, Debug, Default)]
pub struct TeacherSet {
    policies: BTreeMap<String, CompiledPolicy>,
}

impl TeacherSet {
    pub fn new(fits: Vec<TeacherFit>) -> Self {
        Self {
            policies: fits.into_iter().map(|f| (f.robot_id, f.policy)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

impl Actor for TeacherSet {
    fn act(&self, m: &Morphology, states: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.policies
            .get(m.id())
            .ok_or_else(|| Error::UnknownMorphology(m.id().to_string()))?
            .act(m, states)
    }
}

/// The morphology sets of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphologySets {
    pub train: Vec<Morphology>,
    /// Train bases followed by mutated variants; the largest PD grid size.
    pub pd: Vec<Morphology>,
    pub test: Vec<Morphology>,
}

impl MorphologySets {
    /// The first `k` PD morphologies.
    pub fn pd_prefix(&self, k: usize) -> &[Morphology] {
        &self.pd[..k.min(self.pd.len())]
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let seen: HashSet<&str> = self.train.iter().chain(&self.pd).map(|m| m.id()).collect();
        match self.test.iter().find(|m| seen.contains(m.id())) {
            Some(m) => Err(Error::Config(format!("test morphology `{}` also used for training", m.id()))),
            None => Ok(()),
        }
    }
}

fn bounded_family(bases: &[Morphology], total: usize, max_limbs: usize, rng: &mut dyn RngCore) -> Vec<Morphology> {
    let mut out = bases.to_vec();
    let mut round = 1;
    while out.len() < total {
        for b in bases {
            if out.len() == total {
                break;
            }
            // resample until the variant respects the limb range
            let v = loop {
                let v = generate_family(std::slice::from_ref(b), 1, rng).pop().expect("one variant");
                if v.n_limbs() <= max_limbs {
                    break v;
                }
            };
            out.push(v.with_id(format!("{}-v{round}", b.id())));
        }
        round += 1;
    }
    out
}

/// Draws the train, PD and test morphologies of a seed from the
/// `morph-gen` stream.
pub fn make_morphologies(cfg: &ExperimentConfig, seed: u64) -> MorphologySets {
    let mut rng = stream(seed, "morph-gen");
    let draw = |prefix: &str, count: usize, rng: &mut dyn RngCore| -> Vec<Morphology> {
        (0..count)
            .map(|k| {
                let n = rng.random_range(cfg.min_limbs..=cfg.max_limbs);
                random_morphology(&format!("{prefix}-{k}"), n, rng)
            })
            .collect()
    };
    let train = draw("train", cfg.n_train_morphs, &mut rng);
    let test = draw("test", cfg.n_test_morphs, &mut rng);
    let pd_total = cfg.n_pd_morphs.iter().copied().max().unwrap_or(0).max(cfg.n_train_morphs);
    let pd = bounded_family(&train, pd_total, cfg.max_limbs, &mut rng);
    MorphologySets { train, pd, test }
}
