//! Independent per-robot MLP teachers, each fit by regression to another
//! policy's action means. Different seeds land on different parameters,
//! which is the point: the teachers disagree off their own robot.

use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rand::Rng;

use crate::architectures::{Actor, ArchKind, ArchitectureSpec, CompiledPolicy, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::morphology::Morphology;
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState, Tape, Tensor};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherFitConfig {
    pub n_states: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherFitConfig {
    fn default() -> Self {
        Self {
            n_states: 2048,
            epochs: 60,
            minibatch: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFit {
    pub robot_id: String,
    pub policy: CompiledPolicy,
    /// Mean squared error to the target means on the fitting states.
    pub mse: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.numel() as f64
}

fn fit_one(
    target: &dyn Actor,
    m: &Morphology,
    template: &ArchitectureSpec,
    cfg: &TeacherFitConfig,
) -> Result<TeacherFit> {
    let diverged = |msg: String| Error::FitDiverged {
        robot: m.id().to_string(),
        msg,
    };
    let mut spec = template.clone();
    spec.kind = ArchKind::CompiledMlp;
    spec.n_max = m.n_limbs();
    let width = m.n_limbs() * spec.state_dim;
    let mut rng = stream(cfg.seed, &format!("teacher-fit/{}", m.id()));
    let states_data = (0..cfg.n_states * width).map(|_| rng.sample(StandardNormal)).collect();
    let states = Tensor::matrix(cfg.n_states, width, states_data)?;
    let (labels, log_std) = target.act(m, &states)?;

    let mut model = Model::init(spec, &mut rng)?;
    model.params_mut().insert(
        "log_std",
        Tensor::matrix(1, template.action_dim, log_std[..template.action_dim].to_vec())?,
    );
    let ctx = model.context(m);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.params().tensors());
    let mut order: Vec<usize> = (0..cfg.n_states).collect();
    let out_w = labels.cols();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| states.row(i).to_vec()).collect();
            let y: Vec<f64> = chunk.iter().flat_map(|&i| labels.row(i).to_vec()).collect();
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let out = model.forward(
                &mut tape,
                &bound,
                &ctx,
                &Tensor::matrix(chunk.len(), width, x)?,
                &ForwardOptions::eval(),
                &mut rng,
            )?;
            let y = tape.constant(Tensor::matrix(chunk.len(), out_w, y)?);
            let diff = tape.sub(out.mean, y)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum_all(sq);
            let loss = tape.scale(total, 1.0 / (chunk.len() * out_w) as f64);
            if !tape.value(loss).item().is_finite() {
                return Err(diverged(format!("non-finite loss in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(model.params().tensors())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            drop(bound);
            clip_global_norm(&mut g, 1.0);
            adam_step(model.params_mut().tensors_mut(), &g, &mut state, &adam)
                .map_err(|e| diverged(e.to_string()))?;
        }
    }
    let (pred, _) = model.act(m, &states)?;
    let err = mse(&pred, &labels);
    if !err.is_finite() {
        return Err(diverged("non-finite fit error".into()));
    }
    Ok(TeacherFit {
        robot_id: m.id().to_string(),
        policy: model.to_compiled()?,
        mse: err,
    })
}

/// Fits one plain MLP per morphology to `target`'s action means on states
/// drawn from the standard normal. The optimizer, initialization and
/// states of each robot come from their own stream of `cfg.seed`; the
/// log-std is copied from the target.
pub fn fit_single_robot_teachers(
    target: &dyn Actor,
    morphs: &[Morphology],
    template: &ArchitectureSpec,
    cfg: &TeacherFitConfig,
) -> Result<Vec<TeacherFit>> {
    morphs.iter().map(|m| fit_one(target, m, template, cfg)).collect()
}
