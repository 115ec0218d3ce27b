//! Distillation: the KL objective, datasets, the training loop and the
//! per-robot teacher fits.

mod dataset;
mod teachers;
mod train;

pub use dataset::{Dataset, TransitionRecord};
pub use teachers::{fit_single_robot_teachers, TeacherFit, TeacherFitConfig};
pub use train::{dataset_kl, distill, DistillReport};

use crate::architectures::DropoutSite;
use crate::error::{Error, Result};

/// `KL(p1 ‖ p2)` between diagonal Gaussians; pass the teacher first.
pub fn kl_diag_gaussian(mean1: &[f64], logstd1: &[f64], mean2: &[f64], logstd2: &[f64]) -> Result<f64> {
    let n = mean1.len();
    if logstd1.len() != n || mean2.len() != n || logstd2.len() != n {
        return Err(Error::Shape {
            op: "kl_diag_gaussian",
            lhs: vec![mean1.len(), logstd1.len()],
            rhs: vec![mean2.len(), logstd2.len()],
        });
    }
    let mut kl = 0.0;
    for d in 0..n {
        let (m1, l1, m2, l2) = (mean1[d], logstd1[d], mean2[d], logstd2[d]);
        if !(m1.is_finite() && l1.is_finite() && m2.is_finite() && l2.is_finite()) {
            return Err(Error::NonFinite(format!("kl_diag_gaussian input at dim {d}")));
        }
        let diff = m1 - m2;
        kl += l2 - l1 + ((2.0 * l1).exp() + diff * diff) / (2.0 * (2.0 * l2).exp()) - 0.5;
    }
    Ok(kl)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub dropout_p: f64,
    pub dropout_site: DropoutSite,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            minibatch: 512,
            lr: 3e-4,
            grad_clip: 0.5,
            dropout_p: 0.1,
            dropout_site: DropoutSite::ContextEmbedding,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Minibatch size used in the original large-scale runs.
    pub const PAPER_MINIBATCH: usize = 5120;

    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian(&[0.3], &[-0.2], &[0.3], &[-0.2]).unwrap(), 0.0);
        assert!((kl_diag_gaussian(&[0.0], &[0.0], &[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diag_gaussian(&[0.0], &[0.0], &[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(kl_diag_gaussian(&[f64::NAN], &[0.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = stream(1, "kl");
        let d = 8;
        let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.5)).collect();
        let l2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.5)).collect();
        let exact = kl_diag_gaussian(&m1, &l1, &m2, &l2).unwrap();
        // E_{x~p1}[log p1(x) - log p2(x)]
        let samples = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut lr = 0.0;
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let x = m1[k] + l1[k].exp() * z;
                let z2 = (x - m2[k]) / l2[k].exp();
                lr += -l1[k] - 0.5 * z * z + l2[k] + 0.5 * z2 * z2;
            }
            acc += lr;
        }
        let mc = acc / samples as f64;
        assert!((mc - exact).abs() < 1e-2, "mc {mc} exact {exact}");
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let c = DistillConfig {
            dropout_p: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = DistillConfig {
            minibatch: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(
            m1 in proptest::collection::vec(-3.0f64..3.0, 4),
            m2 in proptest::collection::vec(-3.0f64..3.0, 4),
            l1 in proptest::collection::vec(-2.0f64..1.0, 4),
            l2 in proptest::collection::vec(-2.0f64..1.0, 4),
        ) {
            let kl = kl_diag_gaussian(&m1, &l1, &m2, &l2).unwrap();
            proptest::prop_assert!(kl >= -1e-12);
            proptest::prop_assert!(kl_diag_gaussian(&m1, &l1, &m1, &l1).unwrap().abs() <= 1e-12);
        }
    }
}
