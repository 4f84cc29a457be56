use proptest::prelude::*;

use couette::collision::Projector;
use couette::diagnostics::decay_rate_fit;
use couette::transport::{backward_exit, transport_inverse, weight_ratio_check, Inflow};
use couette::{Field, ReferenceTables, Repr, SpatialGrid, VelocityGrid};

fn grid() -> (VelocityGrid, ReferenceTables) {
    let g = VelocityGrid::new(6, 4.5).unwrap();
    let t = ReferenceTables::new(&g, 0).unwrap();
    (g, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flips_are_involutions(k in 0usize..216) {
        let (g, _) = grid();
        for flip in [VelocityGrid::flip_x, VelocityGrid::flip_y, VelocityGrid::flip_z] {
            prop_assert_eq!(flip(&g, flip(&g, k)), k);
        }
        let (v, w) = (g.node(k), g.node(g.flip_x(k)));
        prop_assert_eq!([-v[0], v[1], v[2]], w);
    }

    #[test]
    fn p0_reproduces_the_null_space(c in prop::array::uniform5(-2.0f64..2.0)) {
        let (g, t) = grid();
        let p = Projector::new(&g, &t.sqrt_mu);
        let f: Vec<f64> = (0..g.len()).map(|k| (0..5).map(|a| c[a] * p.basis(a)[k]).sum()).collect();
        let got = p.coefficients(&f);
        for a in 0..5 {
            prop_assert!((got[a] - c[a]).abs() < 1e-12, "{a}: {} vs {}", got[a], c[a]);
        }
        let mut r = f.clone();
        p.p1_in_place(&mut r);
        prop_assert!(r.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn p1_is_orthogonal_to_the_null_space(seed in 0u64..1000) {
        let (g, t) = grid();
        let p = Projector::new(&g, &t.sqrt_mu);
        let mut f: Vec<f64> = (0..g.len()).map(|k| ((k as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
        p.p1_in_place(&mut f);
        for x in p.inner(&f) {
            prop_assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_source_matches_closed_form(c in -3.0f64..3.0, damping in 0.2f64..5.0) {
        let (g, _) = grid();
        let sg = SpatialGrid::new(9).unwrap();
        let s = Field::from_fn(Repr::Perturbation, sg.len(), g.len(), |_, _| c);
        let out = transport_inverse(&g, &sg, &s, damping, 0.0, &Inflow::Zero).unwrap();
        for (j, &y) in sg.nodes().iter().enumerate() {
            for k in 0..g.len() {
                let vy = g.node(k)[1];
                let dist = if vy > 0.0 { y + 1.0 } else { 1.0 - y };
                let exact = c / damping * (1.0 - (-damping * dist / vy.abs()).exp());
                prop_assert!((out.at(j, k) - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_exit_lands_on_a_wall(y in -0.99f64..0.99, vy in prop_oneof![-4.0f64..-0.05, 0.05f64..4.0]) {
        let (tb, yb) = backward_exit(y, [0.3, vy, 0.0]).unwrap();
        prop_assert!(tb > 0.0);
        prop_assert!((yb.abs() - 1.0).abs() < 1e-15);
        prop_assert!((y - tb * vy - yb).abs() < 1e-12);
    }

    #[test]
    fn decay_fit_recovers_rate(lambda in 0.05f64..2.0, c in 0.1f64..10.0) {
        let series: Vec<(f64, f64)> = (0..40).map(|i| {
            let t = 0.25 * i as f64;
            (t, c * (-lambda * t).exp())
        }).collect();
        let fit = decay_rate_fit(&series).unwrap();
        prop_assert!((fit.lambda0 - lambda).abs() < 1e-10);
        prop_assert!(fit.residual < 1e-12);
    }
}

#[test]
fn weight_ratio_exceeds_the_peetre_bound_for_opposed_shift() {
    use couette::transport::{peetre_bound, BounceCycle};
    // one wall-to-wall flight from y = -1 to y = 1 with v_x = -6
    let cycle = BounceCycle {
        t: vec![10.0, 9.5, 9.0],
        y: vec![0.0, -1.0, 1.0],
        v: vec![[0.0, 1.0, 0.0], [-6.0, 4.0, 0.0], [0.0, -1.0, 0.0]],
        alpha: 0.1,
        capped: false,
    };
    let r = weight_ratio_check(&cycle, 4);
    assert!(r > peetre_bound(0.1, 4), "{r}");
}
