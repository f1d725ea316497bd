//! Library-level runs of the whole pipeline on a short cascade.

use skewlab::circle_maps::MapFamilyParams;
use skewlab::control::ControlConstants;
use skewlab::measure_lab::{
    cascade_diagnostics, fiber_exponent, orbit_measure, support_coverage, Partition, TestFunctionSet,
};
use skewlab::orbit_forge::{
    cascade, orbit_exponent, partition_neighborhoods, schedule_neighborhoods, seed_orbit, verify_forge, ForgeOptions,
};
use skewlab::skew_engine::{Perturbation, SkewSystem};
use skewlab::symbolic_base::Word;
use skewlab::SkewSystemF64;

fn system() -> SkewSystemF64 {
    SkewSystem::from_params(&MapFamilyParams::default()).unwrap()
}

#[test]
fn short_cascade_satisfies_the_forging_conclusions() {
    let sys = system();
    let c = ControlConstants::default();
    let seed = seed_orbit(&sys, &"4".parse::<Word>().unwrap()).unwrap();
    let cells = partition_neighborhoods(1, 3);
    let schedule = schedule_neighborhoods(&sys, &seed, &cells, 4);
    let stages = cascade(&sys, seed, &schedule, 4, c.delta2, &c, &ForgeOptions::default()).unwrap();
    assert_eq!(stages.len(), 4);

    for w in stages.windows(2) {
        let (x, y) = (&w[0].orbit, &w[1].orbit);
        let report = w[1].report.as_ref().unwrap();
        // Independent re-verification of the stored step.
        assert!(verify_forge(&sys, x, y, report, &c).pass);
        assert!(y.period() > 2 * x.period());
        assert!(y.lambda() < 0.0 && y.lambda().abs() < c.contraction_c * x.lambda().abs());
        assert!(report.kappa >= c.kappa_bound(x.lambda()));
        assert!(report.preimage_counts.windows(2).all(|p| p[0] == p[1]));
    }

    let part = Partition::new(1, 3).unwrap();
    let d = cascade_diagnostics(&sys, &stages, &part, &TestFunctionSet::default());
    for (st, e) in stages.iter().zip(&d.integral_exponents) {
        assert!((e - orbit_exponent(&st.orbit)).abs() < 1e-9);
    }
    let l1 = stages[0].orbit.lambda().abs();
    for (k, e) in d.integral_exponents.iter().enumerate() {
        assert!(e.abs() <= c.contraction_c.powi(k as i32) * l1 + 1e-9);
    }
    assert!(d.masses_persist());
    assert_eq!(d.rows.last().unwrap().coverage, 1.0);
    let last = orbit_measure(&sys, &stages[3].orbit);
    assert_eq!(support_coverage(&last, &sys, &part), 1.0);
    // Coarser partitions never lose coverage.
    assert_eq!(support_coverage(&last, &sys, &Partition::new(0, 1).unwrap()), 1.0);
    assert!(d.rows[1..].iter().all(|r| r.ws_gap.is_some() && r.kappa.is_some()));
}

#[test]
fn forge_runs_on_a_slightly_perturbed_system() {
    let sys = system().with_perturbation(Perturbation::new(1e-9, 0.7, 5, 40).unwrap());
    let c = ControlConstants::default();
    let seed = seed_orbit(&sys, &"4".parse::<Word>().unwrap()).unwrap();
    let cells = partition_neighborhoods(1, 2);
    let schedule = schedule_neighborhoods(&sys, &seed, &cells, 2);
    match cascade(&sys, seed, &schedule, 2, c.delta2, &c, &ForgeOptions::default()) {
        Ok(stages) => {
            let y = &stages[1].orbit;
            let mu = orbit_measure(&sys, y);
            assert!((fiber_exponent(&mu, &sys) - orbit_exponent(y)).abs() < 1e-9);
        }
        // Success is only required on the unperturbed system; failures must be reported, not hidden.
        Err(e) => assert!(!e.to_string().is_empty()),
    }
}

#[test]
fn single_precision_system_tracks_double_precision() {
    let f64_sys = system();
    let f32_sys: skewlab::SkewSystemF32 = SkewSystem::from_params(&MapFamilyParams::default()).unwrap();
    let w: Word = "0123451234".parse().unwrap();
    let (x64, l64) = f64_sys.cocycle_ref(w.view(0), 0, 0.3, 10);
    let (x32, l32) = f32_sys.cocycle_ref(w.view(0), 0, 0.3f32, 10);
    assert!((x64 - x32 as f64).abs() < 1e-5);
    assert!((l64 - l32 as f64).abs() < 1e-5);
}
