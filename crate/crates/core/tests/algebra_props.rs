use gmcf::smallalg::{
    area_decreasing_report, phi_bound_to_pair_bound, singular_spectrum, Jacobian, SmallMatrix,
};
use proptest::prelude::*;

fn rotation(theta: f64) -> SmallMatrix {
    let (s, c) = theta.sin_cos();
    SmallMatrix::from_rows(&[vec![c, -s], vec![s, c]]).unwrap()
}

fn jacobian_2x2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 4)
}

proptest! {
    #[test]
    fn spectrum_is_invariant_under_rotations(e in jacobian_2x2(), a in 0.0..6.3f64, b in 0.0..6.3f64) {
        let j = Jacobian::from_rows(&[vec![e[0], e[1]], vec![e[2], e[3]]]).unwrap();
        let rotated = rotation(a).matmul(j.matrix()).matmul(&rotation(b));
        let jr = Jacobian::new(rotated).unwrap();
        let (l, lr) = (singular_spectrum(&j), singular_spectrum(&jr));
        for (x, y) in l.lambdas().iter().zip(lr.lambdas()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + l.largest()));
        }
    }

    #[test]
    fn rank_one_rows_have_a_zero_singular_value(x in -3.0..3.0f64, y in -3.0..3.0f64) {
        let j = Jacobian::from_rows(&[vec![x, y]]).unwrap();
        let l = singular_spectrum(&j);
        prop_assert!((l.lambdas()[0] - x.hypot(y)).abs() <= 1e-14 * (1.0 + x.hypot(y)));
        prop_assert!(l.lambdas()[1].abs() <= 1e-14 * (1.0 + x.hypot(y)));
    }

    #[test]
    fn phi_bound_controls_pair_product(e in jacobian_2x2()) {
        let j = Jacobian::from_rows(&[vec![e[0], e[1]], vec![e[2], e[3]]]).unwrap();
        let spec = singular_spectrum(&j);
        let report = area_decreasing_report(&spec);
        if let Some(phi) = report.phi {
            prop_assert!(phi >= 1.0);
            let l = spec.lambdas();
            let bound = phi_bound_to_pair_bound(phi).unwrap();
            prop_assert!((l[0] * l[1]).powi(2) <= bound + 1e-12);
        }
    }
}

#[test]
fn pair_bound_rejects_values_below_one() {
    assert!(phi_bound_to_pair_bound(0.5).is_err());
    assert_eq!(phi_bound_to_pair_bound(1.0).unwrap().to_bits(), 0.0f64.to_bits());
}
