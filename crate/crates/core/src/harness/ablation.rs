use std::fmt::Write as _;
use std::time::Instant;

use super::{
    collect, evaluate, make_morphologies, make_oracle, mean_stderr, oracle_spec, ExperimentConfig,
    MorphologySets, TeacherMode, TeacherSet,
};
use crate::analysis::inference_cost;
use crate::architectures::{Actor, ArchKind, ArchitectureSpec, ContextEncoderKind, DropoutSite, Model};
use crate::distillation::{dataset_kl, distill, fit_single_robot_teachers, Dataset, TeacherFitConfig};
use crate::error::{Error, Result};
use crate::morphology::{FeatureTransform, Morphology};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    TeacherChoice,
    PdCount,
    Dropout,
    ContextEncoder,
    FeatureTransform,
    StudentMenu,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Self::TeacherChoice,
        Self::PdCount,
        Self::Dropout,
        Self::ContextEncoder,
        Self::FeatureTransform,
        Self::StudentMenu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TeacherChoice => "teacher_choice",
            Self::PdCount => "pd_count",
            Self::Dropout => "dropout",
            Self::ContextEncoder => "context_encoder",
            Self::FeatureTransform => "feature_transform",
            Self::StudentMenu => "student_menu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Student {
    HyperDistill,
    MultiRobotMlp,
    TransformerCompressed,
    TransformerOracleSized,
}

impl Student {
    fn name(self) -> &'static str {
        match self {
            Self::HyperDistill => "hyperdistill",
            Self::MultiRobotMlp => "multi_robot_mlp",
            Self::TransformerCompressed => "transformer_compressed",
            Self::TransformerOracleSized => "transformer_oracle_sized",
        }
    }
}

#[derive(Clone, Debug)]
struct Arm {
    name: String,
    teacher: TeacherMode,
    student: Student,
    pd: Option<usize>,
    dropout: DropoutSite,
    encoder: ContextEncoderKind,
    transform: FeatureTransform,
}

fn arms(which: Ablation, cfg: &ExperimentConfig) -> Vec<Arm> {
    // distillation data comes from the full PD set unless the ablation
    // itself varies it, or its teachers only exist on the train set
    let base = Arm {
        name: String::new(),
        teacher: cfg.teacher_mode,
        student: Student::HyperDistill,
        pd: cfg.n_pd_morphs.iter().copied().max(),
        dropout: if cfg.dropout { cfg.distill.dropout_site } else { DropoutSite::None },
        encoder: cfg.context_encoder,
        transform: if cfg.feature_transform {
            FeatureTransform::Absolute
        } else {
            FeatureTransform::Relative
        },
    };
    let named = |name: String, f: &dyn Fn(&mut Arm)| {
        let mut a = base.clone();
        a.name = name;
        f(&mut a);
        a
    };
    match which {
        Ablation::TeacherChoice => {
            let mut out = Vec::new();
            for t in [TeacherMode::UniversalOracle, TeacherMode::PerRobotMlps] {
                for s in [Student::HyperDistill, Student::TransformerCompressed] {
                    out.push(named(format!("{}->{}", t.name(), s.name()), &|a| {
                        a.teacher = t;
                        a.student = s;
                        a.pd = None;
                    }));
                }
            }
            out
        }
        Ablation::PdCount => cfg
            .n_pd_morphs
            .iter()
            .map(|&p| named(format!("pd_{p}"), &|a| a.pd = Some(p)))
            .collect(),
        Ablation::Dropout => [DropoutSite::None, DropoutSite::ContextEmbedding, DropoutSite::BaseHidden]
            .into_iter()
            .map(|d| named(d.name().to_string(), &|a| a.dropout = d))
            .collect(),
        Ablation::ContextEncoder => [ContextEncoderKind::Mlp, ContextEncoderKind::Transformer]
            .into_iter()
            .map(|e| named(e.name().to_string(), &|a| a.encoder = e))
            .collect(),
        Ablation::FeatureTransform => [FeatureTransform::Absolute, FeatureTransform::Relative]
            .into_iter()
            .map(|t| named(crate::architectures::feature_transform_name(t).to_string(), &|a| a.transform = t))
            .collect(),
        Ablation::StudentMenu => [
            Student::HyperDistill,
            Student::MultiRobotMlp,
            Student::TransformerCompressed,
            Student::TransformerOracleSized,
        ]
        .into_iter()
        .map(|s| named(s.name().to_string(), &|a| a.student = s))
        .collect(),
    }
}

/// Limb count at which baseline budgets are matched.
fn reference_limbs(cfg: &ExperimentConfig) -> usize {
    (cfg.min_limbs + cfg.max_limbs).div_ceil(2)
}

/// The candidate whose parameter count is closest to the compiled
/// hypernetwork's at the reference limb count.
fn matched(cfg: &ExperimentConfig, candidates: impl Iterator<Item = ArchitectureSpec>) -> ArchitectureSpec {
    let n = reference_limbs(cfg);
    let budget = inference_cost(&cfg.student, n).0 as i64;
    candidates
        .min_by_key(|s| (inference_cost(s, n).0 as i64 - budget).abs())
        .expect("at least one candidate")
}

/// The student architecture of an arm. The multi-robot MLP tunes its
/// width and the compressed transformer keeps the oracle's token and
/// decoder widths while tuning depth, heads and feed-forward width, both to
/// match the compiled hypernetwork's parameter count.
fn student_spec(arm: &Arm, cfg: &ExperimentConfig) -> ArchitectureSpec {
    let hn = &cfg.student;
    let mut s = match arm.student {
        Student::HyperDistill => {
            let mut s = hn.clone();
            s.context_encoder = arm.encoder;
            s
        }
        Student::MultiRobotMlp => matched(
            cfg,
            (1..=4 * hn.hidden_width).map(|h| {
                let mut s = ArchitectureSpec::new(ArchKind::MultiRobotMlp, hn.state_dim, hn.action_dim);
                s.hidden_layers = hn.hidden_layers;
                s.hidden_width = h;
                s
            }),
        ),
        Student::TransformerCompressed => {
            let teacher = oracle_spec();
            let mut candidates = Vec::new();
            for layers in 1..=teacher.attn_layers {
                for heads in (1..=teacher.attn_heads).filter(|h| teacher.embed_dim.is_multiple_of(*h)) {
                    for ff in 1..=teacher.attn_hidden {
                        let mut s = teacher.clone();
                        s.fixed_attention = false;
                        s.attn_layers = layers;
                        s.attn_heads = heads;
                        s.attn_hidden = ff;
                        candidates.push(s);
                    }
                }
            }
            matched(cfg, candidates.into_iter())
        }
        Student::TransformerOracleSized => oracle_spec(),
    };
    s.n_max = hn.n_max;
    s.feature_transform = arm.transform;
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub ablation: &'static str,
    pub arm: String,
    /// `None` for the median-over-seeds rows.
    pub seed: Option<u64>,
    pub split: &'static str,
    pub mean_kl: f64,
    pub stderr: Option<f64>,
    pub epochs: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCurve {
    pub arm: String,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub arm: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub ablation: Ablation,
    /// Arms in run order.
    pub arms: Vec<String>,
    /// Per-seed rows followed by the median rows.
    pub rows: Vec<ResultRow>,
    pub curves: Vec<TrainingCurve>,
    pub failures: Vec<RunFailure>,
}

pub const RESULTS_HEADER: &str = "ablation,arm,seed,split,mean_kl,stderr,epochs,wall_seconds";

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl AblationTable {
    /// Median over seeds of `split` KL for `arm`.
    pub fn median(&self, arm: &str, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed.is_none() && r.arm == arm && r.split == split)
            .map(|r| r.mean_kl)
    }

    /// Per-seed values of `split` KL for `arm`, in seed order.
    pub fn values(&self, arm: &str, split: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.seed.is_some() && r.arm == arm && r.split == split)
            .map(|r| r.mean_kl)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "median".to_string(), |s| s.to_string());
            let stderr = r.stderr.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.ablation, r.arm, seed, r.split, r.mean_kl, stderr, r.epochs, r.wall_seconds
            );
        }
        out
    }

    /// Training curves averaged over seeds, one series per arm.
    pub fn mean_curves(&self) -> Vec<(String, Vec<f64>)> {
        self.arms
            .iter()
            .filter_map(|arm| {
                let cs: Vec<&TrainingCurve> = self.curves.iter().filter(|c| &c.arm == arm).collect();
                let len = cs.iter().map(|c| c.epoch_losses.len()).min()?;
                let mean = (0..len)
                    .map(|e| cs.iter().map(|c| c.epoch_losses[e]).sum::<f64>() / cs.len() as f64)
                    .collect();
                Some((arm.clone(), mean))
            })
            .collect()
    }
}

/// Per-morphology KL of `actor` on `data`, for a mean and standard error.
fn split_kl(actor: &dyn Actor, data: &Dataset, morphs: &[Morphology]) -> Result<(f64, f64)> {
    let mut kls = Vec::with_capacity(morphs.len());
    for m in morphs {
        let own = Dataset::new(data.records.iter().filter(|r| r.morphology_id == m.id()).cloned().collect());
        if !own.is_empty() {
            kls.push(dataset_kl(actor, &own, std::slice::from_ref(m))?);
        }
    }
    Ok(mean_stderr(&kls))
}

struct SeedContext {
    seed: u64,
    sets: MorphologySets,
    oracle: Model,
    per_robot: Option<TeacherSet>,
}

impl SeedContext {
    fn per_robot_teachers(&mut self, cfg: &ExperimentConfig, morphs: &[Morphology]) -> Result<&TeacherSet> {
        if self.per_robot.is_none() {
            let mut template = ArchitectureSpec::new(ArchKind::CompiledMlp, cfg.student.state_dim, cfg.student.action_dim);
            template.hidden_layers = cfg.student.hidden_layers;
            template.hidden_width = cfg.student.hidden_width;
            let fit_cfg = TeacherFitConfig {
                seed: derive_seed(self.seed, "teacher-fit"),
                ..cfg.teacher_fit
            };
            let fits = fit_single_robot_teachers(&self.oracle, morphs, &template, &fit_cfg)?;
            self.per_robot = Some(TeacherSet::new(fits));
        }
        Ok(self.per_robot.as_ref().expect("just fitted"))
    }
}

struct RunResult {
    train: (f64, f64),
    test: (f64, f64),
    losses: Vec<f64>,
    wall: f64,
}

fn run_arm(arm: &Arm, cfg: &ExperimentConfig, ctx: &mut SeedContext) -> Result<RunResult> {
    let started = Instant::now();
    let seed = ctx.seed;
    let (morphs, per_morph) = match arm.pd {
        Some(p) => {
            let total = cfg.n_train_morphs * cfg.transitions_per_morph;
            (ctx.sets.pd_prefix(p).to_vec(), (total / p).max(1))
        }
        None => (ctx.sets.train.clone(), cfg.transitions_per_morph),
    };
    let s = cfg.student.state_dim;
    let mut collect_rng = stream(seed, "collect");
    let data = match arm.teacher {
        TeacherMode::UniversalOracle => collect(&ctx.oracle, &morphs, s, per_morph, &mut collect_rng)?,
        TeacherMode::PerRobotMlps => {
            if arm.pd.is_some() {
                return Err(Error::Config("per-robot teachers are fitted on the train set only".into()));
            }
            let teachers = ctx.per_robot_teachers(cfg, &morphs)?;
            collect(teachers, &morphs, s, per_morph, &mut collect_rng)?
        }
    };
    let spec = student_spec(arm, cfg);
    let mut student = Model::init(spec, &mut stream(seed, "init"))?;
    let dcfg = crate::distillation::DistillConfig {
        epochs: cfg.ablation_epochs,
        dropout_site: arm.dropout,
        seed: derive_seed(seed, "distill"),
        ..cfg.distill
    };
    let report = distill(&mut student, &data, &morphs, &dcfg)?;
    let train = split_kl(&student, &data, &morphs)?;
    let ev = evaluate(&student, &ctx.oracle, &ctx.sets.test, s, cfg.n_eval_states, &mut stream(seed, "eval"))?;
    Ok(RunResult {
        train,
        test: (ev.mean, ev.stderr),
        losses: report.epoch_losses,
        wall: if cfg.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

/// Trains every arm of `which` for seeds `cfg.seed .. cfg.seed + repeats`
/// and tabulates train and test KL. A failing sub-run is recorded and the
/// remaining runs continue.
pub fn run_ablation(which: Ablation, cfg: &ExperimentConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let arms = arms(which, cfg);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for r in 0..cfg.repeats as u64 {
        let seed = cfg.seed + r;
        let sets = make_morphologies(cfg, seed);
        sets.check_disjoint()?;
        let mut ctx = SeedContext {
            seed,
            sets,
            oracle: make_oracle(seed),
            per_robot: None,
        };
        for arm in &arms {
            match run_arm(arm, cfg, &mut ctx) {
                Ok(res) => {
                    for (split, (kl, se)) in [("train", res.train), ("test", res.test)] {
                        rows.push(ResultRow {
                            ablation: which.name(),
                            arm: arm.name.clone(),
                            seed: Some(seed),
                            split,
                            mean_kl: kl,
                            stderr: Some(se),
                            epochs: cfg.ablation_epochs,
                            wall_seconds: res.wall,
                        });
                    }
                    curves.push(TrainingCurve {
                        arm: arm.name.clone(),
                        seed,
                        epoch_losses: res.losses,
                    });
                }
                Err(e) => failures.push(RunFailure {
                    arm: arm.name.clone(),
                    seed,
                    message: e.to_string(),
                }),
            }
        }
    }
    // arm-major order, then the medians
    let order = |name: &str| arms.iter().position(|a| a.name == name).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (order(&r.arm), r.seed, r.split));
    let mut medians = Vec::new();
    for arm in &arms {
        for split in ["train", "test"] {
            let pick = |f: fn(&ResultRow) -> f64| -> Vec<f64> {
                rows.iter().filter(|r| r.arm == arm.name && r.split == split).map(f).collect()
            };
            let mut kls = pick(|r| r.mean_kl);
            if kls.is_empty() {
                continue;
            }
            medians.push(ResultRow {
                ablation: which.name(),
                arm: arm.name.clone(),
                seed: None,
                split,
                mean_kl: median(&mut kls),
                stderr: None,
                epochs: cfg.ablation_epochs,
                wall_seconds: median(&mut pick(|r| r.wall_seconds)),
            });
        }
    }
    rows.extend(medians);
    Ok(AblationTable {
        ablation: which,
        arms: arms.into_iter().map(|a| a.name).collect(),
        rows,
        curves,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn arm_counts() {
        let cfg = ExperimentConfig::default();
        assert_eq!(arms(Ablation::TeacherChoice, &cfg).len(), 4);
        assert_eq!(arms(Ablation::PdCount, &cfg).len(), 3);
        let d: Vec<String> = arms(Ablation::Dropout, &cfg).into_iter().map(|a| a.name).collect();
        assert_eq!(d, ["none", "context_embedding", "base_mlp_hidden"]);
        assert_eq!(arms(Ablation::StudentMenu, &cfg).len(), 4);
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
            for arm in arms(a, &cfg) {
                student_spec(&arm, &cfg).validate().unwrap();
            }
        }
    }

    #[test]
    fn baselines_match_the_compiled_budget() {
        let cfg = ExperimentConfig::default();
        let n = reference_limbs(&cfg);
        let budget = inference_cost(&cfg.student, n).0 as f64;
        for arm in arms(Ablation::StudentMenu, &cfg) {
            let spec = student_spec(&arm, &cfg);
            let params = inference_cost(&spec, n).0 as f64;
            match arm.student {
                Student::MultiRobotMlp | Student::TransformerCompressed => {
                    assert!((params / budget - 1.0).abs() < 0.15, "{} {params} vs {budget}", arm.name);
                }
                Student::TransformerOracleSized => assert!(params > 2.0 * budget),
                Student::HyperDistill => assert_eq!(params, budget),
            }
        }
        let tf = student_spec(&arms(Ablation::StudentMenu, &cfg)[2], &cfg);
        assert_eq!(tf.embed_dim, oracle_spec().embed_dim);
        eprintln!("compressed transformer: {} layers, {} heads, ff {}", tf.attn_layers, tf.attn_heads, tf.attn_hidden);
    }
}
