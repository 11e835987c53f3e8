use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reldl::autodiff::{backward, forward_with_tape};
use reldl::checks::random_point;
use reldl::datasets::{SbmGraph, ToyImages};
use reldl::layers::build_model;
use reldl::oracle::{from_dense, to_dense, DenseTensor};
use reldl::relcore::{
    aggregate, densify, eqs, equi_join_product, join_add, scalar_map, Agg, Coord, GroupKey, IndexSchema, OutputColumn,
    ScalarFn, TensorRelation,
};
use reldl::sqlgen::{emit_forward_sql, Dialect};
use reldl::train::{epoch_batches, sgd_step, ParamStore};

/// Values with a good share of exact zeros, so sparsity patterns vary.
fn value() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), -3.0..3.0f64]
}

fn grid(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(value(), rows * cols)
}

/// A relation over `(names[0]: rows, names[1]: cols)` with the given default.
fn relation(names: [&str; 2], rows: usize, cols: usize, values: &[f64], default: f64) -> TensorRelation {
    let schema = IndexSchema::of(&[(names[0], rows), (names[1], cols)]).unwrap();
    let mut entries = Vec::new();
    let mut k = 0;
    schema.for_each_coord(|c| {
        entries.push((Coord::from_slice(c), values[k]));
        k += 1;
    });
    TensorRelation::new(schema, default, entries).unwrap()
}

fn dense(rel: &TensorRelation) -> DenseTensor {
    to_dense(rel).unwrap()
}

fn canonical(rel: &TensorRelation) -> bool {
    rel.check_valid().is_ok() && rel.entries().iter().all(|(_, v)| *v != rel.default_value() && v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relations_are_canonical_and_round_trip_through_dense(
        (r, c, values) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (Just(r), Just(c), grid(r, c))),
        default in value(),
    ) {
        let rel = relation(["i", "j"], r, c, &values, default);
        prop_assert!(canonical(&rel));
        let d = dense(&rel);
        prop_assert_eq!(&d.values, &values);
        let back = from_dense(&d, &["i", "j"]).unwrap();
        prop_assert!(back.approx_eq(&rel, 0.0));
    }

    #[test]
    fn schemas_reject_duplicate_names_and_empty_domains(n in 0usize..4) {
        prop_assert!(IndexSchema::of(&[("a", n + 1), ("a", 2)]).is_err());
        prop_assert!(IndexSchema::of(&[("a", n + 1), ("b", 0)]).is_err());
        prop_assert!(IndexSchema::of(&[("a", n + 1), ("b", 2)]).is_ok());
    }

    #[test]
    fn join_then_sum_is_a_matrix_product(
        (m, n, p, a, b) in (1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(m, n, p)| (Just(m), Just(n), Just(p), grid(m, n), grid(n, p))),
        b_default in value(),
    ) {
        let ra = relation(["i", "j"], m, n, &a, 0.0);
        let rb = relation(["j2", "k"], n, p, &b, b_default);
        let joined = equi_join_product(
            &ra,
            &rb,
            &eqs(&[("j", "j2")]),
            &[OutputColumn::left("i", "i"), OutputColumn::right("k", "k"), OutputColumn::left("j", "j")],
        )
        .unwrap();
        let out = aggregate(&joined, &[GroupKey::col("i"), GroupKey::col("k")], Agg::Sum).unwrap();
        prop_assert!(canonical(&out));
        let got = dense(&out);
        for i in 0..m {
            for k in 0..p {
                let want: f64 = (0..n).map(|j| a[i * n + j] * b[j * p + k]).sum();
                prop_assert!((got.at(&[i, k]) - want).abs() <= 1e-12, "({i},{k}): {} vs {want}", got.at(&[i, k]));
            }
        }
    }

    #[test]
    fn aggregates_match_dense_row_reductions(
        (r, c, values) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (Just(r), Just(c), grid(r, c))),
        default in value(),
    ) {
        let rel = relation(["i", "j"], r, c, &values, default);
        for agg in [Agg::Sum, Agg::Max, Agg::Avg, Agg::Count] {
            let out = aggregate(&rel, &[GroupKey::col("i")], agg).unwrap();
            prop_assert!(canonical(&out));
            let got = dense(&out);
            for i in 0..r {
                let row = &values[i * c..(i + 1) * c];
                let want = match agg {
                    Agg::Sum => row.iter().sum(),
                    Agg::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    Agg::Avg => row.iter().sum::<f64>() / c as f64,
                    Agg::Count => c as f64,
                };
                prop_assert!((got.at(&[i]) - want).abs() <= 1e-12, "{agg:?} row {i}: {} vs {want}", got.at(&[i]));
            }
        }
    }

    #[test]
    fn scalar_maps_act_on_every_coordinate(
        (r, c, values) in (1usize..4, 1usize..4).prop_flat_map(|(r, c)| (Just(r), Just(c), grid(r, c))),
        default in value(),
        k in -2.0..2.0f64,
    ) {
        let rel = relation(["i", "j"], r, c, &values, default);
        let fns: [(ScalarFn, fn(f64, f64) -> f64); 5] = [
            (ScalarFn::Relu, |x, _| x.max(0.0)),
            (ScalarFn::Exp, |x, _| x.exp()),
            (ScalarFn::Negate, |x, _| -x),
            (ScalarFn::AddConst(k), |x, k| x + k),
            (ScalarFn::MulConst(k), |x, k| x * k),
        ];
        for (f, reference) in fns {
            let out = scalar_map(&rel, f).unwrap();
            prop_assert!(canonical(&out));
            for (got, x) in dense(&out).values.iter().zip(&values) {
                prop_assert_eq!(got.to_bits(), reference(*x, k).to_bits(), "{:?} at {}", f, x);
            }
        }
    }

    #[test]
    fn join_add_and_densify_preserve_dense_values(
        (r, c, a, b) in (1usize..4, 1usize..4).prop_flat_map(|(r, c)| (Just(r), Just(c), grid(r, c), grid(r, c))),
        da in value(),
        db in value(),
    ) {
        let ra = relation(["i", "j"], r, c, &a, da);
        let rb = relation(["i", "j"], r, c, &b, db);
        let sum = join_add(&ra, &rb, &eqs(&[("i", "i"), ("j", "j")]), &[]).unwrap();
        prop_assert!(canonical(&sum));
        for (k, got) in dense(&sum).values.iter().enumerate() {
            prop_assert!((got - (a[k] + b[k])).abs() <= 1e-12);
        }
        let full = densify(&ra).unwrap();
        prop_assert_eq!(full.len(), r * c);
        prop_assert_eq!(dense(&full).values, a);
        // Any later operation restores canonical form.
        prop_assert!(canonical(&scalar_map(&full, ScalarFn::MulConst(1.0)).unwrap()));
    }

    #[test]
    fn epoch_batches_partition_the_samples(samples in 1usize..40, size in 1usize..40, seed in any::<u64>()) {
        let size = size.min(samples);
        let batches = epoch_batches(samples, size, &mut ChaCha8Rng::seed_from_u64(seed));
        let all: Vec<usize> = batches.concat();
        prop_assert_eq!(all.len(), samples);
        prop_assert_eq!(all.iter().copied().collect::<BTreeSet<_>>().len(), samples);
        prop_assert!(batches.iter().all(|b| b.len() <= size && !b.is_empty()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradients_match_parameter_schemas_and_steps_keep_them(seed in any::<u64>(), graph in any::<bool>()) {
        let ds = if graph {
            SbmGraph { nodes: 16, features: 4, hidden: 3, ..SbmGraph::default() }.generate(seed).unwrap()
        } else {
            ToyImages { images: 3, ..ToyImages::default() }.generate(seed).unwrap()
        };
        let plan = build_model(&ds.spec).unwrap();
        let params = random_point(&plan, seed).unwrap();
        let (loss, tape) = forward_with_tape(&plan, &ds.relations, params.relations()).unwrap();
        prop_assert!(loss.is_finite());
        let names: Vec<&str> = plan.params.iter().map(|p| p.name.as_str()).collect();
        let grads = backward(&tape, &names).unwrap();
        prop_assert_eq!(grads.len(), names.len());
        for p in &plan.params {
            let g = &grads[&p.name];
            prop_assert_eq!(g.schema(), &p.schema);
            prop_assert!(g.entries().iter().all(|(_, v)| v.is_finite()) && g.default_value().is_finite());
        }
        let stepped: ParamStore = sgd_step(&params, &grads, 0.1).unwrap();
        for p in &plan.params {
            let rel = stepped.get(&p.name).unwrap();
            prop_assert_eq!(rel.schema(), &p.schema);
            prop_assert!(canonical(rel));
        }
    }

    #[test]
    fn sql_scripts_are_deterministic_and_ordered(seed in 0u64..1000, graph in any::<bool>(), strict in any::<bool>()) {
        let ds = if graph {
            SbmGraph { nodes: 8 + (seed % 8) as usize, features: 4, hidden: 2, ..SbmGraph::default() }.generate(seed).unwrap()
        } else {
            ToyImages { images: 1 + (seed % 5) as usize, extent: 6 + 2 * (seed % 3) as usize, ..ToyImages::default() }.generate(seed).unwrap()
        };
        let plan = build_model(&ds.spec).unwrap();
        let dialect = if strict { Dialect::StrictSql92 } else { Dialect::EmbeddedDefault };
        let script = emit_forward_sql(&plan, dialect).unwrap();
        prop_assert_eq!(script.render(), emit_forward_sql(&plan, dialect).unwrap().render());
        let created: Vec<&str> = script.statements.iter().filter_map(|s| s.creates.as_deref()).collect();
        prop_assert_eq!(created.iter().collect::<BTreeSet<_>>().len(), created.len());
        // No statement mentions a table that is only created later.
        for (i, st) in script.statements.iter().enumerate() {
            let words: BTreeSet<&str> =
                st.sql.split(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_')).filter(|w| !w.is_empty()).collect();
            for later in script.statements[i + 1..].iter().filter_map(|s| s.creates.as_deref()) {
                prop_assert!(!words.contains(later), "statement {i} uses `{later}` before it exists");
            }
        }
    }
}
