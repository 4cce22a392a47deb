use proptest::prelude::*;
use qdsg::problems::{BoxSet, LossKind, Objective};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn objective() -> impl Strategy<Value = (Objective, Vec<f64>, Vec<f64>)> {
    (1usize..6, prop::bool::ANY, 0.0f64..0.5).prop_flat_map(|(d, quadratic, reg)| {
        (
            prop::collection::vec(-1.0f64..1.0, d),
            -1.0f64..1.0,
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
        )
            .prop_map(move |(a, b, x, y)| {
                let kind = if quadratic { LossKind::Quadratic } else { LossKind::Absolute };
                let bx = BoxSet::symmetric(a.len(), 1.0).unwrap();
                (Objective::new(kind, a, b, reg, &bx).unwrap(), x, y)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5_000))]

    #[test]
    fn subgradient_inequality((f, x, y) in objective()) {
        let g = f.subgrad(&x);
        let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        prop_assert!(f.eval(&y) >= f.eval(&x) + dot(&g, &diff) - 1e-12);
    }

    #[test]
    fn strong_convexity_with_regularizer((f, x, y) in objective()) {
        let mu = f.strong_convexity();
        let g = f.subgrad(&x);
        let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let lower = f.eval(&x) + dot(&g, &diff) + 0.5 * mu * dot(&diff, &diff);
        prop_assert!(f.eval(&y) >= lower - 1e-12);
    }

    #[test]
    fn subgradients_respect_the_lipschitz_bound((f, x, _y) in objective()) {
        let g = f.subgrad(&x);
        prop_assert!(dot(&g, &g).sqrt() <= f.lipschitz() + 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive(
        x in prop::collection::vec(-5.0f64..5.0, 4),
        y in prop::collection::vec(-5.0f64..5.0, 4),
        r in 0.1f64..3.0,
    ) {
        let bx = BoxSet::symmetric(4, r).unwrap();
        let (px, py) = (bx.project(&x), bx.project(&y));
        prop_assert!(bx.contains(&px));
        prop_assert_eq!(bx.project(&px), px.clone());
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(&px, &py) <= d(&x, &y) + 1e-12);
    }
}
