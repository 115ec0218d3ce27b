//! Plain-text morphology files.
//!
//! ```text
//! morphology <id> <N>
//! limb <index> <parent> <rel_x> <rel_y> <rel_z> <ori_x> <ori_y> <ori_z> <mass> <radius> <length> <joint_type> <range_lo> <range_hi> <gear>
//! ```
//!
//! The root's parent is `-1`. Floats carry 17 significant digits so that a
//! write/parse cycle is bit-exact.

use std::fmt::Write as _;

use super::{JointType, LimbContext, Morphology};
use crate::error::{Error, Result};

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_morphology(m: &Morphology) -> String {
    let mut out = format!("morphology {} {}\n", m.id(), m.n_limbs());
    for (i, l) in m.limbs().iter().enumerate() {
        let parent = m.parents()[i].map_or(-1, |p| p as i64);
        let fields = [
            l.rel_position[0],
            l.rel_position[1],
            l.rel_position[2],
            l.orientation[0],
            l.orientation[1],
            l.orientation[2],
            l.mass,
            l.shape_params[0],
            l.shape_params[1],
        ];
        let _ = write!(out, "limb {i} {parent}");
        for v in fields {
            let _ = write!(out, " {}", num(v));
        }
        let _ = writeln!(
            out,
            " {} {} {} {}",
            l.joint_type.name(),
            num(l.joint_range[0]),
            num(l.joint_range[1]),
            num(l.motor_gear)
        );
    }
    out
}

pub fn parse_morphology(text: &str) -> Result<Morphology> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let err = |line: usize, msg: String| Error::Parse { line, msg };

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != "morphology" {
        return Err(err(hline, format!("bad header `{header}`")));
    }
    let id = h[1].to_string();
    let n: usize = h[2]
        .parse()
        .map_err(|_| err(hline, format!("bad limb count `{}`", h[2])))?;

    let mut parents = vec![None; n];
    let mut limbs: Vec<Option<LimbContext>> = vec![None; n];
    for (ln, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 16 || t[0] != "limb" {
            return Err(err(ln, format!("expected 16 fields in limb line, got {}", t.len())));
        }
        let idx: usize = t[1].parse().map_err(|_| err(ln, format!("bad index `{}`", t[1])))?;
        if idx >= n {
            return Err(err(ln, format!("limb index {idx} >= {n}")));
        }
        if limbs[idx].is_some() {
            return Err(err(ln, format!("duplicate limb {idx}")));
        }
        let parent: i64 = t[2].parse().map_err(|_| err(ln, format!("bad parent `{}`", t[2])))?;
        parents[idx] = match parent {
            -1 => None,
            p if p >= 0 => Some(p as usize),
            p => return Err(err(ln, format!("bad parent {p}"))),
        };
        let f = |k: usize| -> Result<f64> {
            t[k].parse::<f64>()
                .map_err(|_| err(ln, format!("bad number `{}`", t[k])))
        };
        let joint_type =
            JointType::parse(t[12]).ok_or_else(|| err(ln, format!("bad joint type `{}`", t[12])))?;
        limbs[idx] = Some(LimbContext {
            rel_position: [f(3)?, f(4)?, f(5)?],
            orientation: [f(6)?, f(7)?, f(8)?],
            mass: f(9)?,
            shape_params: [f(10)?, f(11)?],
            joint_type,
            joint_range: [f(13)?, f(14)?],
            motor_gear: f(15)?,
        });
    }
    let limbs = limbs
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| err(0, format!("missing limb {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Morphology::new(id, parents, limbs)
}
