use gmcf::flow::{nonparametric_velocity_at, run, step, FlowConfig, Scenario};
use gmcf::geomgrid::{GraphState, GridSpec};
use gmcf::verify::{heat_residual, weighted_sup_monitor, Quantity, ResidualOptions};
use proptest::prelude::*;

fn wavy(points: usize) -> GraphState {
    let g = GridSpec::unit(2, points).unwrap();
    GraphState::from_fn(g, 2, 0.0, |a, x| {
        let s = if a == 0 { 1.0 } else { -0.5 };
        0.2 * s * (2.0 * x[0] + x[1]).sin() + 0.1 * x[0] * x[1]
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn velocity_ignores_height_translations(c0 in -5.0..5.0f64, c1 in -5.0..5.0f64) {
        let s = wavy(17);
        let mut shifted = s.clone();
        for (f, c) in shifted.u.iter_mut().zip([c0, c1]) {
            f.iter_mut().for_each(|x| *x += c);
        }
        let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
        for k in 0..s.grid.node_count() {
            if s.grid.is_boundary(k) {
                continue;
            }
            nonparametric_velocity_at(&s, k, &mut a);
            nonparametric_velocity_at(&shifted, k, &mut b);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}

#[test]
fn zero_map_is_stationary() {
    let g = GridSpec::unit(2, 17).unwrap();
    let s = GraphState::zeros(g, 2).unwrap();
    let next = step(&s, 1e-4).unwrap();
    assert!(next.u.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn sup_norm_never_grows() {
    let scenario = Scenario::fourier(2, 2, 7, 1.0, 3);
    let g = GridSpec::unit(2, 33).unwrap();
    let traj = run(&scenario, &g, &FlowConfig::new(0.05)).unwrap();
    for w in traj.frames.windows(2) {
        assert!(w[1].sup_norm() <= w[0].sup_norm() + 1e-15);
    }
}

#[test]
fn zero_map_w_slack_vanishes() {
    let g = GridSpec::unit(2, 17).unwrap();
    let traj = run(&Scenario::zero(2, 2), &g, &FlowConfig::new(0.05)).unwrap();
    let fields = heat_residual(&traj, Quantity::W, &ResidualOptions::default()).unwrap();
    assert!(!fields.is_empty());
    for f in fields {
        assert!(f.slack.masked().all(|(_, s)| s == 0.0));
    }
}

#[test]
fn zero_map_weighted_sup_is_the_cutoff_at_origin() {
    let g = GridSpec::unit(2, 17).unwrap();
    let traj = run(&Scenario::zero(2, 2), &g, &FlowConfig::new(0.05)).unwrap();
    let series = weighted_sup_monitor(&traj, None).unwrap();
    assert_eq!(series.radius, 1.0);
    for (t, v) in series.times.iter().zip(&series.full) {
        let expected = (1.0 - 4.0 * t).max(0.0).powi(8);
        assert!((v - expected).abs() <= 1e-14, "t={t}: {v} vs {expected}");
    }
    assert_eq!(series.delta_plus, 0.0);
}

#[test]
fn truncated_trajectory_keeps_monotone_weighted_sup() {
    let g = GridSpec::unit(2, 33).unwrap();
    let traj = run(&Scenario::fourier(2, 2, 7, 1.0, 3), &g, &FlowConfig::new(0.05)).unwrap();
    let short = traj.truncated(3);
    assert_eq!(short.frames.len(), 3);
    let series = weighted_sup_monitor(&short, None).unwrap();
    assert_eq!(series.delta_plus, 0.0);
}
