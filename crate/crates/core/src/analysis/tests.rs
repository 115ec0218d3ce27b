use proptest::prelude::*;

use super::*;
use crate::architectures::{ForwardOptions, Model};
use crate::morphology::random_morphology;
use crate::numerics::{Tape, Tensor};
use crate::rng::stream;

fn measured(spec: &ArchitectureSpec, n: usize) -> (u64, u64) {
    let mut rng = stream(7, "measure");
    let m = random_morphology("m", n, &mut rng);
    let states = vec![0.25; n * spec.state_dim];
    match spec.kind {
        ArchKind::Hypernetwork => {
            let model = Model::init(spec.clone(), &mut rng).unwrap();
            let (policy, _) = model.compile_counting(&m).unwrap();
            let mut count = 0;
            policy.forward_counting(&states, &mut count).unwrap();
            (policy.n_scalars() as u64, 2 * count)
        }
        ArchKind::CompiledMlp => {
            let model = Model::init(ArchitectureSpec { n_max: n, ..spec.clone() }, &mut rng).unwrap();
            let policy = model.to_compiled().unwrap();
            let mut count = 0;
            policy.forward_counting(&states, &mut count).unwrap();
            (policy.n_scalars() as u64, 2 * count)
        }
        _ => {
            let model = Model::init(spec.clone(), &mut rng).unwrap();
            let mut tape = Tape::new();
            let b = model.params().bind(&mut tape, false);
            let x = Tensor::matrix(1, states.len(), states).unwrap();
            model
                .forward(&mut tape, &b, &model.context(&m), &x, &ForwardOptions::eval(), &mut rng)
                .unwrap();
            let log_std = spec.action_dim as u64;
            (model.params().n_scalars() as u64 - log_std, 2 * tape.multiply_count())
        }
    }
}

fn small(kind: ArchKind) -> ArchitectureSpec {
    let mut s = ArchitectureSpec::new(kind, 5, 2);
    s.hidden_width = 12;
    s.hidden_layers = 3;
    s.embed_dim = 8;
    s.attn_hidden = 10;
    s.n_max = 7;
    s
}

#[test]
fn linear_layer_flops() {
    assert_eq!(linear_flops(128, 256), 65_536);
    assert_eq!(linear_flops(0, 9), 0);
}

#[test]
fn compiled_hand_count() {
    let mut s = ArchitectureSpec::new(ArchKind::Hypernetwork, 13, 1);
    s.hidden_layers = 2;
    s.hidden_width = 256;
    let (p, f) = inference_cost(&s, 10);
    assert_eq!(p, 10 * (256 * 13 + 256) + (256 * 256 + 256) + 10 * (256 + 1));
    assert_eq!(p, 104_202);
    assert_eq!(f, 2 * (10 * 13 * 256 + 256 * 256 + 10 * 256));
    assert_eq!(f, 202_752);
}

#[test]
fn formulas_match_instrumented_counts_for_default_specs() {
    for kind in ArchKind::ALL {
        for fixed in [false, true] {
            if fixed && kind != ArchKind::Transformer {
                continue;
            }
            let mut spec = ArchitectureSpec::new(kind, 13, 1);
            spec.fixed_attention = fixed;
            for n in [1, 5, 10, 12] {
                assert_eq!(measured(&spec, n), inference_cost(&spec, n), "{kind:?} fixed={fixed} n={n}");
            }
        }
    }
}

#[test]
fn formulas_match_instrumented_counts_for_small_specs() {
    for kind in ArchKind::ALL {
        let mut spec = small(kind);
        if kind == ArchKind::Transformer {
            spec.attn_heads = 1;
            spec.attn_layers = 3;
        }
        for n in 1..=7 {
            assert_eq!(measured(&spec, n), inference_cost(&spec, n), "{kind:?} n={n}");
        }
    }
}

#[test]
fn compile_cost_matches_generation_count() {
    for enc in [ContextEncoderKind::Mlp, ContextEncoderKind::Transformer] {
        let mut spec = small(ArchKind::Hypernetwork);
        spec.context_encoder = enc;
        let mut rng = stream(3, "compile");
        let model = Model::init(spec.clone(), &mut rng).unwrap();
        let log_std = spec.action_dim as u64;
        assert_eq!(model.params().n_scalars() as u64 - log_std, hypernetwork_params(&spec));
        for n in [1, 4, 7] {
            let m = random_morphology("m", n, &mut rng);
            let (_, count) = model.compile_counting(&m).unwrap();
            assert_eq!(2 * count, hn_compile_cost(&spec, n), "{enc:?} n={n}");
        }
    }
    assert_eq!(hn_compile_cost(&small(ArchKind::Transformer), 3), 0);
}

#[test]
fn report_is_relative_to_the_compiled_row() {
    let specs = table2_specs("ft").unwrap();
    let report = emit_report(&specs, 10).unwrap();
    assert_eq!(report.rows.len(), 5);
    let hd = report.row("hyperdistill").unwrap();
    assert_eq!((hd.params_rel, hd.flops_rel), (1.0, 1.0));
    assert!(hd.compile_flops.unwrap() > hd.flops_abs);
    for r in &report.rows {
        let (p, f) = inference_cost(&specs.iter().find(|(n, _)| *n == r.name).unwrap().1, 10);
        assert_eq!((r.params_abs, r.flops_abs), (p, f));
        assert!((r.flops_rel - f as f64 / hd.flops_abs as f64).abs() < 1e-12);
    }
    let oracle = report.row("modumorph_oracle").unwrap();
    assert!(oracle.flops_rel >= 50.0, "{}", oracle.flops_rel);

    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));

    let without: Vec<_> = specs.into_iter().filter(|(n, _)| n != "hyperdistill").collect();
    assert!(matches!(emit_report(&without, 10), Err(Error::Report(_))));
}

#[test]
fn every_environment_has_five_rows() {
    for env in ["ft", "vt", "obstacle"] {
        let specs = table2_specs(env).unwrap();
        assert_eq!(specs.len(), 5);
        assert!(specs.iter().all(|(_, s)| s.validate().is_ok()));
    }
    assert!(table2_specs("walker").is_err());
}

#[test]
fn doubling_every_dimension_at_least_quadruples_flops() {
    // the context width is fixed, so the limb count doubles along with the widths
    for kind in ArchKind::ALL {
        let s = small(kind);
        let mut d = s.clone();
        d.state_dim *= 2;
        d.action_dim *= 2;
        d.hidden_width *= 2;
        d.embed_dim *= 2;
        d.attn_hidden *= 2;
        d.n_max *= 2;
        let (f, f2) = (inference_cost(&s, 6).1, inference_cost(&d, 12).1);
        assert!(f2 >= 4 * f, "{kind:?} {f} -> {f2}");
        assert!(hn_compile_cost(&d, 12) >= 4 * hn_compile_cost(&s, 6));
    }
}

fn arb_spec() -> impl Strategy<Value = ArchitectureSpec> {
    (
        prop::sample::select(ArchKind::ALL.to_vec()),
        1usize..4,
        1usize..64,
        1usize..4,
        1usize..64,
        1usize..32,
        any::<bool>(),
    )
        .prop_map(|(kind, l, h, al, half_e, f, fixed)| {
            let mut s = ArchitectureSpec::new(kind, 4, 2);
            s.hidden_layers = l;
            s.hidden_width = h;
            s.attn_layers = al;
            s.attn_heads = 2;
            s.embed_dim = 2 * half_e;
            s.attn_hidden = f;
            s.fixed_attention = fixed && kind == ArchKind::Transformer;
            s
        })
}

proptest! {
    #[test]
    fn costs_are_monotone_in_every_size(spec in arb_spec(), which in 0usize..5, n in 1usize..12) {
        let mut bigger = spec.clone();
        match which {
            0 => bigger.hidden_layers += 1,
            1 => bigger.hidden_width += 1,
            2 => bigger.attn_layers += 1,
            3 => bigger.embed_dim += 2,
            _ => bigger.attn_hidden += 1,
        }
        let (p0, f0) = inference_cost(&spec, n);
        let (p1, f1) = inference_cost(&bigger, n);
        prop_assert!(p1 >= p0 && f1 >= f0);
        prop_assert!(hn_compile_cost(&bigger, n) >= hn_compile_cost(&spec, n));
        prop_assert!(inference_cost(&spec, n + 1).1 >= f0);
    }
}

