//! Gradient checks over random seeds and property suites for the
//! categorical primitives.

use hindcaus::numcore::gradcheck::{check_gradients, standard_suite, FD_STEP};
use hindcaus::numcore::{categorical_kl, cross_entropy, Graph, NumError, Tensor, Var};
use proptest::prelude::*;

fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f64..8.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_op_passes_for_random_inputs(seed in any::<u64>()) {
        for c in standard_suite(seed).unwrap() {
            prop_assert!(c.passed(), "{} at seed {}: {:e}", c.name, seed, c.max_rel_error);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_is_a_distribution(x in logits_strategy(2, 4)) {
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let p = g.softmax(v);
        for row in g.value(p).data().chunks(4) {
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(p in logits_strategy(3, 4), q in logits_strategy(3, 4)) {
        let mut g = Graph::new();
        let (pv, qv) = (g.constant(p).unwrap(), g.constant(q).unwrap());
        let kl = categorical_kl(&mut g, pv, qv).unwrap();
        prop_assert!(g.value(kl).data().iter().all(|&k| k >= -1e-12 && k.is_finite()));
        let same = categorical_kl(&mut g, pv, pv).unwrap();
        prop_assert!(g.value(same).data().iter().all(|&k| k.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_is_non_negative_and_bounds_the_entropy(x in logits_strategy(3, 4), y in prop::collection::vec(0usize..4, 3)) {
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let ce = cross_entropy(&mut g, v, &y).unwrap();
        let ls = g.log_softmax(v);
        let ce = g.value(ce).data().to_vec();
        let ls = g.value(ls).data().to_vec();
        for (r, &c) in ce.iter().enumerate() {
            prop_assert!(c >= 0.0 && c.is_finite());
            prop_assert!((c + ls[r * 4 + y[r]]).abs() < 1e-12);
        }
    }
}

#[test]
fn checker_flags_a_mis_scaled_gradient() {
    // d/dx of (stop(x) * x) is reported as x, while differences see 2x.
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var, NumError> {
        let s = g.stop_gradient(v[0]);
        let y = g.mul(s, v[0])?;
        Ok(g.sum(y))
    };
    let c = check_gradients("half", &[Tensor::from_vec(vec![0.3, -2.0, 1.1])], &f, FD_STEP).unwrap();
    assert!(!c.passed());
    assert!((c.max_rel_error - 0.5).abs() < 1e-6);
}
