use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;

use super::{kl_diag_gaussian, Dataset, DistillConfig};
use crate::architectures::{Actor, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::morphology::{ContextFeatureMatrix, Morphology};
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    /// Mean per-dimension training KL of each epoch, in train mode.
    pub epoch_losses: Vec<f64>,
    /// Eval-mode mean per-dimension KL over the whole dataset after the
    /// last epoch.
    pub train_kl: f64,
}

/// Resolves every record to a morphology index and checks its shape.
fn resolve(data: &Dataset, morphs: &[Morphology], s: usize, a: usize) -> Result<Vec<usize>> {
    let by_id: HashMap<&str, usize> = morphs.iter().enumerate().map(|(i, m)| (m.id(), i)).collect();
    data.records
        .iter()
        .map(|r| {
            let &k = by_id
                .get(r.morphology_id.as_str())
                .ok_or_else(|| Error::UnknownMorphology(r.morphology_id.clone()))?;
            if r.n_limbs != morphs[k].n_limbs() {
                return Err(Error::LimbCount {
                    expected: morphs[k].n_limbs(),
                    got: r.n_limbs,
                });
            }
            if r.state_dim != s || r.action_dim != a {
                return Err(Error::Shape {
                    op: "dataset record",
                    lhs: vec![r.state_dim, r.action_dim],
                    rhs: vec![s, a],
                });
            }
            Ok(k)
        })
        .collect()
}

/// Groups record indices by morphology, in ascending morphology order.
fn group(indices: &[usize], owner: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        g.entry(owner[i]).or_default().push(i);
    }
    g
}

fn stack_states(data: &Dataset, idx: &[usize]) -> Tensor {
    let w = data.records[idx[0]].states.len();
    let flat = idx.iter().flat_map(|&i| data.records[i].states.iter().copied()).collect();
    Tensor::matrix(idx.len(), w, flat).expect("records share a width")
}

/// Trains `student` to match the teacher labels in `data` by minimizing the
/// mean per-dimension `KL(teacher ‖ student)`.
pub fn distill(
    student: &mut Model,
    data: &Dataset,
    morphs: &[Morphology],
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("distillation dataset is empty".into()));
    }
    let spec = student.spec().clone();
    let owner = resolve(data, morphs, spec.state_dim, spec.action_dim)?;
    let contexts: Vec<ContextFeatureMatrix> = morphs.iter().map(|m| student.context(m)).collect();
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(student.params().tensors());
    let opts = ForwardOptions::train(cfg.dropout_p, cfg.dropout_site);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut kl_total, mut dims_total) = (0.0, 0usize);
        for (mb, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let mut tape = Tape::new();
            let bound = student.params().bind(&mut tape, true);
            let mut sum: Option<Var> = None;
            let mut dims = 0;
            for (&k, idx) in &group(chunk, &owner) {
                let states = stack_states(data, idx);
                let out = student.forward(&mut tape, &bound, &contexts[k], &states, &opts, &mut dropout_rng)?;
                let t_mean: Vec<f64> = idx.iter().flat_map(|&i| data.records[i].mean.iter().copied()).collect();
                let t_ls: Vec<f64> = idx.iter().flat_map(|&i| data.records[i].log_std.iter().copied()).collect();
                dims += t_mean.len();
                let kl = tape.gaussian_kl(out.mean, out.log_std, &t_mean, &t_ls)?;
                sum = Some(match sum {
                    Some(s) => tape.add(s, kl)?,
                    None => kl,
                });
            }
            let loss = tape.scale(sum.expect("non-empty minibatch"), 1.0 / dims as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, minibatch: mb });
            }
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(student.params().tensors())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            drop(bound);
            clip_global_norm(&mut g, cfg.grad_clip);
            adam_step(student.params_mut().tensors_mut(), &g, &mut state, &adam)
                .map_err(|_| Error::NonFiniteLoss { epoch, minibatch: mb })?;
            kl_total += value * dims as f64;
            dims_total += dims;
        }
        epoch_losses.push(kl_total / dims_total as f64);
    }
    let train_kl = dataset_kl(student, data, morphs)?;
    Ok(DistillReport {
        epoch_losses,
        train_kl,
    })
}

/// Eval-mode mean per-dimension KL between the dataset's labels and
/// `actor`.
pub fn dataset_kl(actor: &dyn Actor, data: &Dataset, morphs: &[Morphology]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let r0 = &data.records[0];
    let owner = resolve(data, morphs, r0.state_dim, r0.action_dim)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut dims) = (0.0, 0usize);
    for (&k, idx) in &group(&all, &owner) {
        for chunk in idx.chunks(1024) {
            let (mean, ls) = actor.act(&morphs[k], &stack_states(data, chunk))?;
            for (row, &i) in chunk.iter().enumerate() {
                let r = &data.records[i];
                total += kl_diag_gaussian(&r.mean, &r.log_std, mean.row(row), &ls)?;
                dims += r.mean.len();
            }
        }
    }
    Ok(total / dims as f64)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::architectures::{ArchKind, ArchitectureSpec, ContextEncoderKind, DropoutSite};
    use crate::distillation::TransitionRecord;
    use crate::morphology::random_morphology;

    /// `mean = w·s + c` on the first limb's state.
    struct LinearOracle {
        w: Vec<f64>,
        c: f64,
    }

    impl Actor for LinearOracle {
        fn act(&self, _m: &Morphology, states: &Tensor) -> Result<(Tensor, Vec<f64>)> {
            let data = (0..states.rows())
                .map(|r| self.c + self.w.iter().zip(states.row(r)).map(|(w, s)| w * s).sum::<f64>())
                .collect();
            Ok((Tensor::matrix(states.rows(), 1, data)?, vec![-1.0]))
        }
    }

    fn labelled(oracle: &dyn Actor, m: &Morphology, n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, "collect");
        let w = m.n_limbs() * 3;
        let states = Tensor::matrix(n, w, (0..n * w).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let (mean, ls) = oracle.act(m, &states).unwrap();
        Dataset::new(
            (0..n)
                .map(|r| TransitionRecord {
                    morphology_id: m.id().into(),
                    n_limbs: m.n_limbs(),
                    state_dim: 3,
                    action_dim: 1,
                    states: states.row(r).to_vec(),
                    mean: mean.row(r).to_vec(),
                    log_std: ls.clone(),
                })
                .collect(),
        )
    }

    fn student(seed: u64) -> Model {
        let mut spec = ArchitectureSpec::new(ArchKind::Hypernetwork, 3, 1);
        spec.hidden_layers = 1;
        spec.hidden_width = 8;
        spec.embed_dim = 8;
        spec.context_encoder = ContextEncoderKind::Mlp;
        spec.n_max = 4;
        Model::init(spec, &mut stream(seed, "init")).unwrap()
    }

    fn setup() -> (Morphology, Dataset) {
        let m = random_morphology("one", 1, &mut stream(1, "m"));
        let oracle = LinearOracle {
            w: vec![0.4, -0.3, 0.2],
            c: 0.1,
        };
        let data = labelled(&oracle, &m, 512, 2);
        (m, data)
    }

    #[test]
    fn zero_epochs_leave_the_student_unchanged() {
        let (m, data) = setup();
        let mut s = student(3);
        let before = s.clone();
        let cfg = DistillConfig {
            epochs: 0,
            ..Default::default()
        };
        let report = distill(&mut s, &data, &[m], &cfg).unwrap();
        assert_eq!(s, before);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn converges_on_a_realizable_linear_target() {
        let (m, data) = setup();
        let mut s = student(4);
        let cfg = DistillConfig {
            epochs: 200,
            minibatch: 64,
            lr: 3e-3,
            dropout_p: 0.0,
            dropout_site: DropoutSite::None,
            ..Default::default()
        };
        let untrained = dataset_kl(&s, &data, std::slice::from_ref(&m)).unwrap();
        let report = distill(&mut s, &data, &[m], &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 200);
        assert!(report.train_kl < 1e-2, "train kl {}", report.train_kl);
        assert!(report.train_kl < untrained);
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let (m, data) = setup();
        let cfg = DistillConfig {
            epochs: 3,
            minibatch: 100,
            seed: 5,
            ..Default::default()
        };
        let (mut a, mut b) = (student(6), student(6));
        let ra = distill(&mut a, &data, std::slice::from_ref(&m), &cfg).unwrap();
        let rb = distill(&mut b, &data, std::slice::from_ref(&m), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let mut c = student(6);
        distill(&mut c, &data, &[m], &DistillConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nan_loss_names_the_minibatch() {
        let (m, data) = setup();
        let mut s = student(7);
        s.params_mut().get_mut("head.out_b.b").unwrap().data_mut()[0] = f64::NAN;
        let err = distill(&mut s, &data, &[m], &DistillConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, minibatch: 0 }));
        assert!(err.to_string().contains("minibatch 0"));
    }

    #[test]
    fn unknown_morphology_is_reported() {
        let (_, data) = setup();
        let other = random_morphology("other", 1, &mut stream(9, "m"));
        let err = distill(&mut student(8), &data, &[other], &DistillConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownMorphology(id) if id == "one"));
    }

    #[test]
    fn grouping_covers_every_record_once() {
        let mut rng = stream(10, "group");
        let owner: Vec<usize> = (0..500).map(|_| rng.random_range(0..7)).collect();
        let mut order: Vec<usize> = (0..500).collect();
        order.shuffle(&mut rng);
        let mut seen = vec![0; 500];
        for chunk in order.chunks(64) {
            for (k, idx) in group(chunk, &owner) {
                for i in idx {
                    assert_eq!(owner[i], k);
                    seen[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
