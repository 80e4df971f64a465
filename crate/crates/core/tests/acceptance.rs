//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test -p radm-core --test acceptance -- --nocapture` to see
//! the report. The overfit and ablation criteria train nine models and take
//! roughly half an hour on one core.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use radm_core::experiments::{ablation_csv, overfit_synth, run_ablation, variant_median, AblationConfig, AblationRow};
use radm_core::synth::generate;
use radm_core::PosterSample;

use support::gradients::{all_checks, PROBES};
use support::invariants::{gram_invariants, vtram_invariants};
use support::oracles::{ddim_and_schedules, loss_oracle, metrics_oracle, q_sample_monte_carlo};
use support::pipeline::{pins_hold, run_pipeline};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn criterion(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let o = Outcome {
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    };
    println!(
        "{} {:<22} {:>8.1}s  {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.elapsed.as_secs_f64(),
        o.detail
    );
    o
}

fn diffusion_math() -> (bool, String) {
    let start = Instant::now();
    let z = q_sample_monte_carlo(100_000, 17);
    let ddim = ddim_and_schedules();
    let secs = start.elapsed().as_secs_f64();
    (
        z <= 3.0 && ddim.is_ok() && secs < 60.0,
        format!("max |z| {z:.2} over 1e5 draws; ddim/schedules {ddim:?}; {secs:.1}s"),
    )
}

fn gram() -> (bool, String) {
    let start = Instant::now();
    let r = gram_invariants(1000, 1);
    let secs = start.elapsed().as_secs_f64();
    (
        r.translation_exact && r.scale_exact && r.row_sum_err <= 1e-6 && r.min_weight >= 0.0 && secs < 60.0,
        format!(
            "translation exact {}, scale exact {} ({} instances), row-sum err {:.1e}; {secs:.1}s",
            r.translation_exact, r.scale_exact, r.scale_instances, r.row_sum_err
        ),
    )
}

fn vtram() -> (bool, String) {
    let r = vtram_invariants(200, 2);
    (
        r.permutation_err <= 1e-6 && r.padding_err <= 1e-6 && r.all_masked_zero,
        format!(
            "permutation {:.1e}, padding {:.1e}, all-masked zero {}",
            r.permutation_err, r.padding_err, r.all_masked_zero
        ),
    )
}

fn gradients() -> (bool, String) {
    let checks = all_checks();
    let pass = checks
        .iter()
        .all(|(_, c)| c.probes.len() >= PROBES && c.max_rel_err() <= 1e-3);
    let detail = checks
        .iter()
        .map(|(n, c)| format!("{n} {:.1e}/{}", c.max_rel_err(), c.probes.len()))
        .collect::<Vec<_>>()
        .join(", ");
    (pass, detail)
}

fn losses() -> (bool, String) {
    let r = loss_oracle(100, 5);
    (
        r.focal <= 1e-9 && r.l1 <= 1e-9 && r.giou <= 1e-9 && r.totals_exact,
        format!(
            "focal {:.1e}, l1 {:.1e}, giou {:.1e}, totals exact {}",
            r.focal, r.l1, r.giou, r.totals_exact
        ),
    )
}

fn metrics() -> (bool, String) {
    let r = metrics_oracle(300, 8);
    (
        r.pair_abs <= 1e-6 && r.raster_rel <= 0.05 && r.hand_cases,
        format!(
            "pair {:.1e}, raster rel {:.1e}, hand cases {}",
            r.pair_abs, r.raster_rel, r.hand_cases
        ),
    )
}

fn determinism() -> (bool, String) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = run_pipeline(a.path(), 9);
    let y = run_pipeline(b.path(), 9);
    let same = [
        x.checkpoint == y.checkpoint,
        x.train_log == y.train_log,
        x.layouts == y.layouts,
        x.report == y.report,
    ];
    (
        same.iter().all(|s| *s),
        format!("checkpoint, log, layouts, report identical: {same:?}"),
    )
}

struct AblationResult {
    rows: Vec<AblationRow>,
    /// Wall time of each run.
    times: Vec<Duration>,
    /// Requests whose pins came back bitwise, out of `pin_requests`.
    pins_ok: usize,
    pin_requests: usize,
}

fn ablation(samples: &[PosterSample]) -> AblationResult {
    let cfg = AblationConfig::overfit();
    let pin_requests = 32;
    let mut pins_ok = 0;
    let mut times = Vec::new();
    let mut last = Instant::now();
    let rows = run_ablation(samples, &cfg, |row, run| {
        times.push(last.elapsed());
        println!(
            "     {} seed {}: loss {:.3}, iou {:.3}, text {:.3}, occ {:.3}, r_ove {:.5}, r_com {:.5}",
            row.variant,
            row.seed,
            row.final_loss,
            row.fit.mean_iou,
            row.fit.text_match,
            row.fit.occupancy,
            row.report.r_ove,
            row.report.r_com
        );
        if row.variant == "full" && row.seed == 0 {
            let t = &run.trainer;
            pins_ok = pins_hold(&t.model, &t.schedule, samples, pin_requests, cfg.sampling.steps, 3);
        }
        last = Instant::now();
    })
    .unwrap();
    AblationResult {
        rows,
        times,
        pins_ok,
        pin_requests,
    }
}

fn overfit(a: &AblationResult) -> (bool, String) {
    let row = a.rows.iter().find(|r| r.variant == "full" && r.seed == 0).unwrap();
    let f = row.fit;
    let secs = a.times[0].as_secs_f64();
    let steps = AblationConfig::overfit().train.max_steps.unwrap();
    let checks = [
        f.mean_iou >= 0.5,
        f.text_match >= 0.8,
        f.occupancy >= 0.95,
        a.pins_ok == a.pin_requests,
        steps <= 2000 && secs <= 3600.0,
    ];
    (
        checks.iter().all(|c| *c),
        format!(
            "(a) iou {:.3} (b) text {:.3} (c) occ {:.3} (d) pins {}/{}; {steps} steps in {secs:.0}s",
            f.mean_iou, f.text_match, f.occupancy, a.pins_ok, a.pin_requests
        ),
    )
}

fn direction(a: &AblationResult) -> (bool, String) {
    let med = |v: &str, m: fn(&AblationRow) -> f64| variant_median(&a.rows, v, m).unwrap();
    let ove = |r: &AblationRow| r.report.r_ove;
    let com = |r: &AblationRow| r.report.r_com;
    let (ove_full, ove_no) = (med("full", ove), med("no-gram", ove));
    let (com_full, com_no) = (med("full", com), med("no-vtram", com));
    (
        ove_full <= ove_no && com_full <= com_no,
        format!(
            "median r_ove full {ove_full:.5} vs no-gram {ove_no:.5}; median r_com full {com_full:.5} vs no-vtram {com_no:.5}"
        ),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        criterion("diffusion math", diffusion_math),
        criterion("gram invariants", gram),
        criterion("vtram invariants", vtram),
        criterion("gradient checks", gradients),
        criterion("loss oracle", losses),
        criterion("metrics oracle", metrics),
        criterion("determinism", determinism),
    ];
    let samples = generate(&overfit_synth()).unwrap();
    let start = Instant::now();
    match catch_unwind(AssertUnwindSafe(|| ablation(&samples))) {
        Ok(a) => {
            println!("     ablation finished in {:.0}s", start.elapsed().as_secs_f64());
            print!("{}", ablation_csv(&a.rows).unwrap());
            outcomes.push(criterion("overfit", || overfit(&a)));
            outcomes.push(criterion("ablation direction", || direction(&a)));
        }
        Err(_) => {
            outcomes.push(criterion("overfit", || (false, "training failed".into())));
            outcomes.push(criterion("ablation direction", || (false, "training failed".into())));
        }
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
