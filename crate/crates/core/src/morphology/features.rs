use super::{JointType, Morphology};
use crate::numerics::Tensor;

/// Width of one context row.
pub const CONTEXT_DIM: usize = 15;

// Fixed standardization constants: value -> (value - center) / scale.
const POSITION_SCALE: f64 = 0.5;
const ORIENTATION_SCALE: f64 = std::f64::consts::PI;
const LOG_MASS_CENTER: f64 = 0.3;
const LOG_MASS_SCALE: f64 = 0.5;
const RADIUS_CENTER: f64 = 0.05;
const RADIUS_SCALE: f64 = 0.02;
const LENGTH_CENTER: f64 = 0.3;
const LENGTH_SCALE: f64 = 0.1;
const RANGE_SCALE: f64 = std::f64::consts::FRAC_PI_2;
const LOG_GEAR_CENTER: f64 = 5.0;
const LOG_GEAR_SCALE: f64 = 0.5;

/// Which position encoding goes into the first three feature columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureTransform {
    /// Root-relative cumulative positions.
    #[default]
    Absolute,
    /// Raw parent-relative positions (the untransformed features).
    Relative,
}

/// One standardized row of width [`CONTEXT_DIM`] per limb, in DFS order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatureMatrix {
    rows: Vec<[f64; CONTEXT_DIM]>,
}

impl ContextFeatureMatrix {
    pub fn from_rows(rows: Vec<[f64; CONTEXT_DIM]>) -> Self {
        Self { rows }
    }

    pub fn n_limbs(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[f64; CONTEXT_DIM] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[[f64; CONTEXT_DIM]] {
        &self.rows
    }

    /// Reorders rows: row `k` of the result is row `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            rows: perm.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flatten().copied().collect();
        Tensor::new(vec![self.rows.len(), CONTEXT_DIM], data).expect("fixed width")
    }
}

/// Absolute limb positions indexed by storage index; the root sits at the
/// origin and each limb adds its relative offset to its parent's position.
pub fn absolute_positions(m: &Morphology) -> Vec<[f64; 3]> {
    let mut abs = vec![[0.0; 3]; m.n_limbs()];
    for &v in m.dfs_order() {
        if let Some(p) = m.parents()[v] {
            let rel = m.limbs()[v].rel_position;
            abs[v] = [abs[p][0] + rel[0], abs[p][1] + rel[1], abs[p][2] + rel[2]];
        }
    }
    abs
}

pub fn context_features(m: &Morphology) -> ContextFeatureMatrix {
    context_features_with(m, FeatureTransform::Absolute)
}

pub fn context_features_with(m: &Morphology, transform: FeatureTransform) -> ContextFeatureMatrix {
    let abs = absolute_positions(m);
    let rows = m
        .dfs_order()
        .iter()
        .map(|&i| {
            let l = &m.limbs()[i];
            let pos = match transform {
                FeatureTransform::Absolute => abs[i],
                FeatureTransform::Relative if m.parents()[i].is_none() => [0.0; 3],
                FeatureTransform::Relative => l.rel_position,
            };
            let mut row = [0.0; CONTEXT_DIM];
            for k in 0..3 {
                row[k] = pos[k] / POSITION_SCALE;
                row[3 + k] = l.orientation[k] / ORIENTATION_SCALE;
            }
            row[6] = (l.mass.ln() - LOG_MASS_CENTER) / LOG_MASS_SCALE;
            row[7] = (l.shape_params[0] - RADIUS_CENTER) / RADIUS_SCALE;
            row[8] = (l.shape_params[1] - LENGTH_CENTER) / LENGTH_SCALE;
            for j in JointType::ALL {
                row[9 + j.index()] = f64::from(u8::from(l.joint_type == j));
            }
            row[12] = l.joint_range[0] / RANGE_SCALE;
            row[13] = l.joint_range[1] / RANGE_SCALE;
            row[14] = (l.motor_gear.ln() - LOG_GEAR_CENTER) / LOG_GEAR_SCALE;
            row
        })
        .collect();
    ContextFeatureMatrix { rows }
}
