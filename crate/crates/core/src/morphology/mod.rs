//! Limb trees, per-limb context features and mutation-based families.
//!
//! Per-limb arrays everywhere else in the crate (states, actions, context
//! rows) are laid out in the canonical depth-first order of the tree.

mod features;
mod io;
mod mutate;

pub use features::{
    absolute_positions, context_features, context_features_with, ContextFeatureMatrix,
    FeatureTransform, CONTEXT_DIM,
};
pub use io::{parse_morphology, write_morphology};
pub use mutate::{generate_family, mutate, random_limb, random_morphology};

use crate::error::{Error, Result};

/// Default upper bound on limb count.
pub const N_MAX: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JointType {
    HingeX,
    HingeY,
    HingeZ,
}

impl JointType {
    pub const ALL: [JointType; 3] = [JointType::HingeX, JointType::HingeY, JointType::HingeZ];

    pub fn name(self) -> &'static str {
        match self {
            JointType::HingeX => "hinge_x",
            JointType::HingeY => "hinge_y",
            JointType::HingeZ => "hinge_z",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        JointType::ALL.into_iter().find(|j| j.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Hardware description of one limb.
#[derive(Clone, Debug, PartialEq)]
pub struct LimbContext {
    /// Meters, relative to the parent limb.
    pub rel_position: [f64; 3],
    /// Radians.
    pub orientation: [f64; 3],
    /// Kilograms.
    pub mass: f64,
    /// (radius, length) in meters.
    pub shape_params: [f64; 2],
    pub joint_type: JointType,
    /// Radians, `lo <= hi`.
    pub joint_range: [f64; 2],
    pub motor_gear: f64,
}

impl LimbContext {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .rel_position
            .iter()
            .chain(&self.orientation)
            .chain(&self.shape_params)
            .chain(&self.joint_range)
            .chain([&self.mass, &self.motor_gear])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Morphology("non-finite limb parameter".into()));
        }
        if self.mass <= 0.0 || self.motor_gear <= 0.0 {
            return Err(Error::Morphology("mass and gear must be positive".into()));
        }
        if self.shape_params.iter().any(|&v| v <= 0.0) {
            return Err(Error::Morphology("shape parameters must be positive".into()));
        }
        if self.joint_range[0] > self.joint_range[1] {
            return Err(Error::Morphology("joint range lo > hi".into()));
        }
        Ok(())
    }
}

/// A robot: a rooted limb tree with per-limb hardware context.
#[derive(Clone, Debug, PartialEq)]
pub struct Morphology {
    id: String,
    parents: Vec<Option<usize>>,
    limbs: Vec<LimbContext>,
    dfs_order: Vec<usize>,
}

impl Morphology {
    pub fn new(id: impl Into<String>, parents: Vec<Option<usize>>, limbs: Vec<LimbContext>) -> Result<Self> {
        Self::with_limit(id, parents, limbs, N_MAX)
    }

    pub fn with_limit(
        id: impl Into<String>,
        parents: Vec<Option<usize>>,
        limbs: Vec<LimbContext>,
        n_max: usize,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::Morphology(format!("invalid id `{id}`")));
        }
        if parents.len() != limbs.len() {
            return Err(Error::Morphology(format!(
                "{} parents for {} limbs",
                parents.len(),
                limbs.len()
            )));
        }
        if limbs.is_empty() || limbs.len() > n_max {
            return Err(Error::Morphology(format!(
                "limb count {} outside [1, {n_max}]",
                limbs.len()
            )));
        }
        for l in &limbs {
            l.validate()?;
        }
        let dfs_order = dfs_order(&parents)?;
        Ok(Self {
            id,
            parents,
            limbs,
            dfs_order,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn limbs(&self) -> &[LimbContext] {
        &self.limbs
    }

    pub fn dfs_order(&self) -> &[usize] {
        &self.dfs_order
    }

    pub fn n_limbs(&self) -> usize {
        self.limbs.len()
    }

    pub fn root(&self) -> usize {
        self.dfs_order[0]
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.parents.len())
            .filter(|&c| self.parents[c] == Some(i))
            .collect()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        !self.parents.contains(&Some(i))
    }
}

/// Preorder depth-first traversal, root first, children in ascending index.
pub fn dfs_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    let mut roots = Vec::new();
    for (i, p) in parents.iter().enumerate() {
        match *p {
            None => roots.push(i),
            Some(p) if p >= n => {
                return Err(Error::Topology(format!("limb {i} has out-of-range parent {p}")))
            }
            Some(p) if p == i => return Err(Error::Topology(format!("limb {i} is its own parent"))),
            Some(p) => children[p].push(i),
        }
    }
    if roots.len() != 1 {
        return Err(Error::Topology(format!("expected one root, found {}", roots.len())));
    }
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut stack = vec![roots[0]];
    while let Some(v) = stack.pop() {
        if seen[v] {
            return Err(Error::Topology("cycle detected".into()));
        }
        seen[v] = true;
        order.push(v);
        stack.extend(children[v].iter().rev());
    }
    if order.len() != n {
        return Err(Error::Topology(format!(
            "{} limbs unreachable from the root (cycle)",
            n - order.len()
        )));
    }
    Ok(order)
}
