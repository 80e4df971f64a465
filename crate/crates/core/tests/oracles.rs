mod support;

use support::oracles::{
    ddim_and_schedules, giou_oracle, hand_cases, loss_oracle, metrics_oracle, q_sample_monte_carlo,
};

use radm_core::loss::giou_loss;
use radm_core::BBox;

#[test]
fn losses_match_scalar_oracles() {
    let r = loss_oracle(100, 5);
    assert!(r.focal <= 1e-9, "{r:?}");
    assert!(r.l1 <= 1e-9, "{r:?}");
    assert!(r.giou <= 1e-9, "{r:?}");
    assert!(r.totals_exact);
}

#[test]
fn halves_of_the_canvas_give_unit_giou_loss() {
    let (p, g) = ([0.25, 0.5, 0.5, 1.0], [0.75, 0.5, 0.5, 1.0]);
    assert!((giou_oracle(&p, &g) - 1.0).abs() < 1e-12);
    let l = giou_loss(BBox::new(p[0], p[1], p[2], p[3]), BBox::new(g[0], g[1], g[2], g[3])).0;
    assert!((l - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_match_brute_force() {
    let r = metrics_oracle(300, 8);
    assert!(r.pair_abs <= 1e-6, "{r:?}");
    assert!(r.raster_rel <= 0.05, "{r:?}");
    assert!(hand_cases());
}

#[test]
fn q_sample_moments_within_three_standard_errors() {
    let z = q_sample_monte_carlo(100_000, 17);
    assert!(z <= 3.0, "z = {z}");
}

#[test]
fn ddim_terminal_and_schedule_monotonicity() {
    ddim_and_schedules().unwrap();
}
