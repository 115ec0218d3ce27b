use rand::Rng;

use super::{JointType, LimbContext, Morphology, N_MAX};

const MAX_ATTEMPTS: usize = 100;

/// Samples a limb with every parameter inside the generator's bounds.
pub fn random_limb<R: Rng + ?Sized>(rng: &mut R) -> LimbContext {
    use std::f64::consts::PI;
    LimbContext {
        rel_position: [
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.3..0.1),
        ],
        orientation: [
            rng.random_range(-PI..PI),
            rng.random_range(-PI / 2.0..PI / 2.0),
            rng.random_range(-PI..PI),
        ],
        mass: rng.random_range(0.5..3.0),
        shape_params: [rng.random_range(0.03..0.08), rng.random_range(0.15..0.45)],
        joint_type: JointType::ALL[rng.random_range(0..3)],
        joint_range: [rng.random_range(-1.5..-0.1), rng.random_range(0.1..1.5)],
        motor_gear: rng.random_range(50.0..250.0),
    }
}

/// A random recursive tree: limb `i > 0` hangs off a uniformly chosen
/// earlier limb.
pub fn random_morphology<R: Rng + ?Sized>(id: &str, n: usize, rng: &mut R) -> Morphology {
    let n = n.clamp(1, N_MAX);
    let parents = (0..n)
        .map(|i| if i == 0 { None } else { Some(rng.random_range(0..i)) })
        .collect();
    let limbs = (0..n)
        .map(|i| {
            let mut l = random_limb(rng);
            if i == 0 {
                l.rel_position = [0.0; 3];
            }
            l
        })
        .collect();
    Morphology::new(id, parents, limbs).expect("generator respects invariants")
}

#[derive(Clone, Copy, Debug)]
enum Mutation {
    AddLeaf,
    DeleteLeaf,
    Perturb,
    Reparent,
}

const MUTATIONS: [Mutation; 4] = [
    Mutation::AddLeaf,
    Mutation::DeleteLeaf,
    Mutation::Perturb,
    Mutation::Reparent,
];

fn leaves(m: &Morphology) -> Vec<usize> {
    (0..m.n_limbs())
        .filter(|&i| m.parents()[i].is_some() && m.is_leaf(i))
        .collect()
}

fn scale<R: Rng + ?Sized>(v: &mut f64, rng: &mut R) {
    *v *= rng.random_range(0.8..1.2);
}

/// Applies one atomic mutation, or returns `None` if it is infeasible here.
fn apply<R: Rng + ?Sized>(m: &Morphology, kind: Mutation, rng: &mut R) -> Option<Morphology> {
    let n = m.n_limbs();
    let mut parents = m.parents().to_vec();
    let mut limbs = m.limbs().to_vec();
    match kind {
        Mutation::AddLeaf => {
            if n >= N_MAX {
                return None;
            }
            parents.push(Some(rng.random_range(0..n)));
            limbs.push(random_limb(rng));
        }
        Mutation::DeleteLeaf => {
            let lv = leaves(m);
            if n <= 2 || lv.is_empty() {
                return None;
            }
            let victim = lv[rng.random_range(0..lv.len())];
            parents.remove(victim);
            limbs.remove(victim);
            for p in parents.iter_mut().flatten() {
                if *p > victim {
                    *p -= 1;
                }
            }
        }
        Mutation::Perturb => {
            let l = &mut limbs[rng.random_range(0..n)];
            for v in l
                .rel_position
                .iter_mut()
                .chain(l.orientation.iter_mut())
                .chain(l.shape_params.iter_mut())
                .chain(l.joint_range.iter_mut())
            {
                scale(v, rng);
            }
            scale(&mut l.mass, rng);
            scale(&mut l.motor_gear, rng);
            if l.joint_range[0] > l.joint_range[1] {
                l.joint_range.swap(0, 1);
            }
        }
        Mutation::Reparent => {
            let lv = leaves(m);
            if lv.is_empty() {
                return None;
            }
            let leaf = lv[rng.random_range(0..lv.len())];
            let old = parents[leaf];
            let targets: Vec<usize> = (0..n).filter(|&t| t != leaf && Some(t) != old).collect();
            if targets.is_empty() {
                return None;
            }
            parents[leaf] = Some(targets[rng.random_range(0..targets.len())]);
        }
    }
    Morphology::new(m.id(), parents, limbs).ok()
}

/// Draws `m` uniformly from {1, 2, 3} and applies that many feasible atomic
/// mutations. Infeasible draws are resampled up to 100 times, after which
/// the step is skipped.
pub fn mutate<R: Rng + ?Sized>(m: &Morphology, rng: &mut R) -> Morphology {
    let steps = rng.random_range(1..=3);
    let mut cur = m.clone();
    for _ in 0..steps {
        for _ in 0..MAX_ATTEMPTS {
            let kind = MUTATIONS[rng.random_range(0..MUTATIONS.len())];
            if let Some(next) = apply(&cur, kind, rng) {
                cur = next;
                break;
            }
        }
    }
    cur
}

/// Returns the bases followed by `variants_per_base` mutated copies of each
/// base, with ids `<base>-v<k>`.
pub fn generate_family<R: Rng + ?Sized>(
    base_set: &[Morphology],
    variants_per_base: usize,
    rng: &mut R,
) -> Vec<Morphology> {
    let mut out = base_set.to_vec();
    for base in base_set {
        for k in 0..variants_per_base {
            let v = mutate(base, rng).with_id(format!("{}-v{}", base.id(), k + 1));
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::tests::limb;
    use crate::morphology::write_morphology;
    use crate::rng::stream;

    fn check_invariants(m: &Morphology) {
        assert!(m.n_limbs() >= 2 && m.n_limbs() <= N_MAX, "N = {}", m.n_limbs());
        // re-validate from scratch
        Morphology::new(m.id(), m.parents().to_vec(), m.limbs().to_vec()).unwrap();
    }

    #[test]
    fn two_limb_robot_keeps_its_child() {
        let m = Morphology::new("pair", vec![None, Some(0)], vec![limb([0.0; 3], 1.0), limb([0.1, 0.0, 0.0], 1.0)]).unwrap();
        let mut rng = stream(1, "mutate");
        assert!(apply(&m, Mutation::DeleteLeaf, &mut rng).is_none());
        assert!(apply(&m, Mutation::Reparent, &mut rng).is_none());
        for _ in 0..200 {
            assert!(mutate(&m, &mut rng).n_limbs() >= 2);
        }
    }

    #[test]
    fn mutation_is_deterministic_for_a_seed() {
        let base = random_morphology("b", 5, &mut stream(2, "base"));
        let a = mutate(&base, &mut stream(9, "mutate"));
        let b = mutate(&base, &mut stream(9, "mutate"));
        assert_eq!(a, b);
    }

    #[test]
    fn mutations_preserve_invariants() {
        let mut rng = stream(3, "mutate");
        let base = random_morphology("b", 5, &mut rng);
        for _ in 0..1000 {
            check_invariants(&mutate(&base, &mut rng));
        }
        // long chains of mutations
        let mut cur = base;
        for _ in 0..10_000 {
            cur = mutate(&cur, &mut rng);
            check_invariants(&cur);
        }
    }

    #[test]
    fn family_sizes() {
        let mut rng = stream(4, "family");
        let bases: Vec<_> = (0..100)
            .map(|i| random_morphology(&format!("b{i}"), 2 + i % 8, &mut rng))
            .collect();
        let fam = generate_family(&bases, 9, &mut rng);
        assert_eq!(fam.len(), 1000);
        assert_eq!(fam[100].id(), "b0-v1");
        assert_eq!(generate_family(&bases, 0, &mut rng), bases);
    }

    #[test]
    fn family_is_deterministic() {
        let gen = || {
            let mut rng = stream(5, "family");
            let bases: Vec<_> = (0..16)
                .map(|i| random_morphology(&format!("b{i}"), 3 + i % 5, &mut rng))
                .collect();
            generate_family(&bases, 3, &mut rng)
        };
        let (a, b) = (gen(), gen());
        assert_eq!(a.len(), 64);
        let text = |f: &[Morphology]| f.iter().map(write_morphology).collect::<String>();
        assert_eq!(text(&a), text(&b));
    }
}
