//! Atomic measures on periodic orbits and the diagnostics of the limit measure:
//! fiber-exponent integral, support coverage, cell masses and weak-* gaps.
//!
//! Orbit measures are never materialized: a cascade orbit can have tens of
//! millions of points, so every integral regenerates the trajectory and folds
//! it in a single pass.

use crate::orbit_forge::{CascadeStage, Neighborhood, PeriodicOrbit};
use crate::scalar::{wrap, CompensatedSum};
use crate::skew_engine::{SkewPoint, SkewSystem};
use crate::symbolic_base::{SeqRef, ALPHABET};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

/// Tolerance on the total mass of an explicit atom list.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("a measure needs at least one atom")]
    Empty,
    #[error("atom weight {0} is not positive")]
    NonPositiveWeight(f64),
    #[error("weights sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("atoms {0} and {1} coincide")]
    DuplicateAtom(usize, usize),
    #[error("partition needs at least one arc")]
    NoArcs,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
enum Atoms {
    Explicit(Vec<(SkewPoint<f64>, f64)>),
    Orbit { sys: Arc<SkewSystem<f64>>, orbit: PeriodicOrbit },
}

/// Probability measure with finitely many atoms.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    atoms: Atoms,
}

impl EmpiricalMeasure {
    /// Explicit atoms; weights must be positive and sum to one, atoms distinct.
    pub fn from_atoms(atoms: Vec<(SkewPoint<f64>, f64)>) -> Result<Self, MeasureError> {
        if atoms.is_empty() {
            return Err(MeasureError::Empty);
        }
        let mut total = CompensatedSum::new();
        for (_, w) in &atoms {
            if !(*w > 0.0) {
                return Err(MeasureError::NonPositiveWeight(*w));
            }
            total.add(*w);
        }
        if (total.value() - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(MeasureError::NotNormalized(total.value()));
        }
        for i in 0..atoms.len() {
            for j in i + 1..atoms.len() {
                let (a, b) = (&atoms[i].0, &atoms[j].0);
                if a.x == b.x && a.base.view().same_sequence(&b.base.view()) {
                    return Err(MeasureError::DuplicateAtom(i, j));
                }
            }
        }
        Ok(EmpiricalMeasure { atoms: Atoms::Explicit(atoms) })
    }

    pub fn len(&self) -> usize {
        match &self.atoms {
            Atoms::Explicit(a) => a.len(),
            Atoms::Orbit { orbit, .. } => orbit.period(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The underlying orbit, for orbit-backed measures.
    pub fn orbit(&self) -> Option<&PeriodicOrbit> {
        match &self.atoms {
            Atoms::Orbit { orbit, .. } => Some(orbit),
            Atoms::Explicit(_) => None,
        }
    }

    /// Calls `f(base, x, weight, log_derivative)` for every atom, where
    /// `log_derivative = ln g'_ω(x)` under `sys`. Orbit-backed measures use
    /// their own system and ignore `sys`.
    pub fn for_each_atom<F>(&self, sys: &SkewSystem<f64>, mut f: F)
    where
        F: FnMut(SeqRef<'_>, f64, f64, f64),
    {
        match &self.atoms {
            Atoms::Explicit(atoms) => {
                for (p, w) in atoms {
                    let view = p.base.view();
                    let (_, d) = sys.step(view, 0, p.x);
                    f(view, p.x, *w, d.ln());
                }
            }
            Atoms::Orbit { sys, orbit } => {
                let view = orbit.view();
                let w = 1.0 / orbit.period() as f64;
                let mut x = orbit.fiber_x();
                for i in 0..orbit.period() {
                    let (y, d) = sys.step(view, i as i64, x);
                    f(view.shifted(i as i64), x, w, d.ln());
                    x = y;
                }
            }
        }
    }

    /// All atoms as points. Only sensible for short orbits.
    pub fn materialize(&self) -> Vec<(SkewPoint<f64>, f64)> {
        match &self.atoms {
            Atoms::Explicit(a) => a.clone(),
            Atoms::Orbit { sys, orbit } => {
                let w = 1.0 / orbit.period() as f64;
                orbit
                    .fibers(sys)
                    .into_iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let base = crate::symbolic_base::PeriodicSequence::from_arc(Arc::clone(orbit.word_arc()), i);
                        (SkewPoint::new(base, x), w)
                    })
                    .collect()
            }
        }
    }
}

/// Uniform measure on the `P` points of the orbit.
pub fn orbit_measure(sys: &SkewSystem<f64>, orbit: &PeriodicOrbit) -> EmpiricalMeasure {
    EmpiricalMeasure { atoms: Atoms::Orbit { sys: Arc::new(sys.clone()), orbit: orbit.clone() } }
}

/// `∫ ln g'_ω(x) dμ`, compensated.
pub fn fiber_exponent(mu: &EmpiricalMeasure, sys: &SkewSystem<f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    match &mu.atoms {
        // Uniform weights: sum first, divide once.
        Atoms::Orbit { orbit, .. } => {
            mu.for_each_atom(sys, |_, _, _, l| acc.add(l));
            acc.value() / orbit.period() as f64
        }
        Atoms::Explicit(_) => {
            mu.for_each_atom(sys, |_, _, w, l| acc.add(w * l));
            acc.value()
        }
    }
}

/// Cells `{ω₀…ω_{d−1} = c} × [a/arcs, (a+1)/arcs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub depth: usize,
    pub arcs: usize,
}

impl Partition {
    pub fn new(depth: usize, arcs: usize) -> Result<Self, MeasureError> {
        if arcs == 0 {
            return Err(MeasureError::NoArcs);
        }
        Ok(Partition { depth, arcs })
    }

    pub fn base_cells(&self) -> usize {
        ALPHABET.pow(self.depth as u32)
    }

    pub fn cell_count(&self) -> usize {
        self.base_cells() * self.arcs
    }

    #[inline]
    pub fn cell_of(&self, base: SeqRef<'_>, x: f64) -> usize {
        let mut c = 0usize;
        for k in 0..self.depth as i64 {
            c = c * ALPHABET + base.at(k).index();
        }
        let a = ((wrap(x) * self.arcs as f64) as usize).min(self.arcs - 1);
        c * self.arcs + a
    }
}

/// Mass of every partition cell.
pub fn cell_masses(mu: &EmpiricalMeasure, sys: &SkewSystem<f64>, part: &Partition) -> Vec<f64> {
    let mut masses = vec![0.0; part.cell_count()];
    mu.for_each_atom(sys, |b, x, w, _| masses[part.cell_of(b, x)] += w);
    masses
}

/// Fraction of cells with positive mass.
pub fn support_coverage(mu: &EmpiricalMeasure, sys: &SkewSystem<f64>, part: &Partition) -> f64 {
    coverage_of(&cell_masses(mu, sys, part))
}

pub fn max_cell_mass(mu: &EmpiricalMeasure, sys: &SkewSystem<f64>, part: &Partition) -> f64 {
    cell_masses(mu, sys, part).into_iter().fold(0.0, f64::max)
}

fn coverage_of(masses: &[f64]) -> f64 {
    masses.iter().filter(|&&m| m > 0.0).count() as f64 / masses.len() as f64
}

/// Masses `μ(U)` for a list of neighborhoods, in one pass.
pub fn neighborhood_masses(mu: &EmpiricalMeasure, sys: &SkewSystem<f64>, us: &[Neighborhood]) -> Vec<f64> {
    let mut out = vec![0.0; us.len()];
    mu.for_each_atom(sys, |b, x, w, _| {
        for (m, u) in out.iter_mut().zip(us) {
            if u.contains(b, x) {
                *m += w;
            }
        }
    });
    out
}

/// Cylinder indicators of depth `≤ max_depth` (cylinders read from index 0)
/// times the fiber modes `1, cos 2πnx, sin 2πnx` for `n ≤ harmonics`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFunctionSet {
    pub max_depth: usize,
    pub harmonics: usize,
}

impl Default for TestFunctionSet {
    fn default() -> Self {
        TestFunctionSet { max_depth: 2, harmonics: 2 }
    }
}

impl TestFunctionSet {
    pub fn cylinder_count(&self) -> usize {
        (0..=self.max_depth).map(|d| ALPHABET.pow(d as u32)).sum()
    }

    pub fn modes(&self) -> usize {
        1 + 2 * self.harmonics
    }

    pub fn len(&self) -> usize {
        self.cylinder_count() * self.modes()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Adds `w·f(ω, x)` for every test function `f` into `acc`.
    fn accumulate(&self, acc: &mut [f64], modes: &mut [f64], base: SeqRef<'_>, x: f64, w: f64) {
        modes[0] = 1.0;
        let (s1, c1) = (TAU * x).sin_cos();
        let (mut s, mut c) = (s1, c1);
        for n in 0..self.harmonics {
            modes[1 + 2 * n] = c;
            modes[2 + 2 * n] = s;
            let (ns, nc) = (s * c1 + c * s1, c * c1 - s * s1);
            s = ns;
            c = nc;
        }
        let nm = self.modes();
        let mut offset = 0usize;
        let mut code = 0usize;
        for d in 0..=self.max_depth {
            if d > 0 {
                code = code * ALPHABET + base.at(d as i64 - 1).index();
            }
            let row = (offset + code) * nm;
            for (a, m) in acc[row..row + nm].iter_mut().zip(modes.iter()) {
                *a += w * m;
            }
            offset += ALPHABET.pow(d as u32);
        }
    }
}

/// `∫ f dμ` for every test function.
pub fn test_integrals(mu: &EmpiricalMeasure, sys: &SkewSystem<f64>, tests: &TestFunctionSet) -> Vec<f64> {
    let mut acc = vec![0.0; tests.len()];
    let mut modes = vec![0.0; tests.modes()];
    mu.for_each_atom(sys, |b, x, w, _| tests.accumulate(&mut acc, &mut modes, b, x, w));
    acc
}

/// `max_f |∫f dμ₁ − ∫f dμ₂|` over the test set.
pub fn weak_star_gap(
    mu1: &EmpiricalMeasure,
    mu2: &EmpiricalMeasure,
    sys: &SkewSystem<f64>,
    tests: &TestFunctionSet,
) -> f64 {
    integral_gap(&test_integrals(mu1, sys, tests), &test_integrals(mu2, sys, tests))
}

pub fn integral_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Everything the diagnostics need from one measure, gathered in one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureProfile {
    pub exponent: f64,
    pub cell_masses: Vec<f64>,
    pub integrals: Vec<f64>,
    pub neighborhood_masses: Vec<f64>,
}

impl MeasureProfile {
    pub fn coverage(&self) -> f64 {
        coverage_of(&self.cell_masses)
    }

    pub fn max_cell_mass(&self) -> f64 {
        self.cell_masses.iter().copied().fold(0.0, f64::max)
    }
}

pub fn profile(
    mu: &EmpiricalMeasure,
    sys: &SkewSystem<f64>,
    part: &Partition,
    tests: &TestFunctionSet,
    us: &[Neighborhood],
) -> MeasureProfile {
    let mut cells = vec![0.0; part.cell_count()];
    let mut integrals = vec![0.0; tests.len()];
    let mut modes = vec![0.0; tests.modes()];
    let mut nb = vec![0.0; us.len()];
    let mut expo = CompensatedSum::new();
    let uniform = mu.orbit().map(|o| o.period());
    mu.for_each_atom(sys, |b, x, w, l| {
        expo.add(if uniform.is_some() { l } else { w * l });
        cells[part.cell_of(b, x)] += w;
        tests.accumulate(&mut integrals, &mut modes, b, x, w);
        for (m, u) in nb.iter_mut().zip(us) {
            if u.contains(b, x) {
                *m += w;
            }
        }
    });
    let exponent = match uniform {
        Some(p) => expo.value() / p as f64,
        None => expo.value(),
    };
    MeasureProfile { exponent, cell_masses: cells, integrals, neighborhood_masses: nb }
}

/// One row of the per-stage diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub period: usize,
    pub lambda: f64,
    pub kappa: Option<f64>,
    pub coverage: f64,
    pub max_cell_mass: f64,
    pub ws_gap: Option<f64>,
}

/// Diagnostics of a whole cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeDiagnostics {
    pub rows: Vec<StageDiagnostics>,
    /// `∫ ln g' dμ_i` per stage.
    pub integral_exponents: Vec<f64>,
    /// `mass[j][i] = μ_j(U_i)` for the batch `U_i` visited at stage `i`
    /// (minimum over the cells of the batch; `None` for empty batches).
    pub batch_mass: Vec<Vec<Option<f64>>>,
    /// `min_{j ≥ i} μ_j(U_i)` per batch.
    pub min_later_mass: Vec<Option<f64>>,
}

impl CascadeDiagnostics {
    /// `μ_j(U_i) > 0` for every `j ≥ i` with a nonempty batch `U_i`.
    pub fn masses_persist(&self) -> bool {
        self.min_later_mass.iter().all(|m| m.is_none_or(|v| v > 0.0))
    }
}

pub fn cascade_diagnostics(
    sys: &SkewSystem<f64>,
    stages: &[CascadeStage],
    part: &Partition,
    tests: &TestFunctionSet,
) -> CascadeDiagnostics {
    let all: Vec<Neighborhood> = stages.iter().flat_map(|s| s.neighborhoods.iter().cloned()).collect();
    let mut bounds = Vec::with_capacity(stages.len());
    let mut start = 0usize;
    for s in stages {
        bounds.push((start, start + s.neighborhoods.len()));
        start += s.neighborhoods.len();
    }
    let mut rows = Vec::with_capacity(stages.len());
    let mut exps = Vec::with_capacity(stages.len());
    let mut batch_mass = Vec::with_capacity(stages.len());
    let mut prev: Option<Vec<f64>> = None;
    for st in stages {
        let mu = orbit_measure(sys, &st.orbit);
        let pr = profile(&mu, sys, part, tests, &all);
        rows.push(StageDiagnostics {
            stage: st.stage,
            period: st.orbit.period(),
            lambda: st.orbit.lambda(),
            kappa: st.report.as_ref().map(|r| r.kappa),
            coverage: pr.coverage(),
            max_cell_mass: pr.max_cell_mass(),
            ws_gap: prev.as_ref().map(|p| integral_gap(p, &pr.integrals)),
        });
        exps.push(pr.exponent);
        batch_mass.push(
            bounds
                .iter()
                .map(|&(a, b)| {
                    (a < b).then(|| pr.neighborhood_masses[a..b].iter().copied().fold(f64::INFINITY, f64::min))
                })
                .collect::<Vec<_>>(),
        );
        prev = Some(pr.integrals);
    }
    let min_later_mass = (0..stages.len())
        .map(|i| {
            batch_mass[i..]
                .iter()
                .map(|row| row[i])
                .try_fold(f64::INFINITY, |acc, m| m.map(|v| acc.min(v)))
        })
        .collect();
    CascadeDiagnostics { rows, integral_exponents: exps, batch_mass, min_later_mass }
}

/// Writes the diagnostics table with columns
/// `stage,period,lambda,kappa,coverage,max_cell_mass,ws_gap`.
pub fn write_diagnostics_csv<W: Write>(rows: &[StageDiagnostics], out: W) -> Result<(), MeasureError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "period", "lambda", "kappa", "coverage", "max_cell_mass", "ws_gap"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            r.period.to_string(),
            fmt_f64(r.lambda),
            opt(r.kappa),
            fmt_f64(r.coverage),
            fmt_f64(r.max_cell_mass),
            opt(r.ws_gap),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Shortest decimal that round-trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Periods up to this length carry the word in every atom row; longer ones
/// use a reference to the orbit file instead.
pub const INLINE_WORD_LIMIT: usize = 64;

/// Atom table `word,offset,x,weight`. `word_ref` replaces the word column for
/// long periods.
pub fn write_atoms_csv<W: Write>(
    mu: &EmpiricalMeasure,
    sys: &SkewSystem<f64>,
    word_ref: &str,
    out: W,
) -> Result<(), MeasureError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["word", "offset", "x", "weight"])?;
    match &mu.atoms {
        Atoms::Explicit(atoms) => {
            for (p, wt) in atoms {
                let word = if p.base.period() <= INLINE_WORD_LIMIT { p.base.word().to_string() } else { word_ref.to_string() };
                w.write_record([word, p.base.offset().to_string(), fmt_f64(p.x), fmt_f64(*wt)])?;
            }
        }
        Atoms::Orbit { orbit, .. } => {
            let word = if orbit.period() <= INLINE_WORD_LIMIT { orbit.word().to_string() } else { word_ref.to_string() };
            let wt = fmt_f64(1.0 / orbit.period() as f64);
            let mut i = 0usize;
            let mut err = None;
            mu.for_each_atom(sys, |_, x, _, _| {
                if err.is_none() {
                    if let Err(e) = w.write_record([word.as_str(), &i.to_string(), &fmt_f64(x), &wt]) {
                        err = Some(e);
                    }
                }
                i += 1;
            });
            if let Some(e) = err {
                return Err(e.into());
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle_maps::MapFamilyParams;
    use crate::orbit_forge::{orbit_exponent, partition_neighborhoods, seed_orbit};
    use crate::symbolic_base::{PeriodicSequence, Word};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sys() -> SkewSystem<f64> {
        SkewSystem::from_params(&MapFamilyParams::default()).unwrap()
    }

    fn word(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn point(w: &str, off: usize, x: f64) -> SkewPoint<f64> {
        SkewPoint::new(PeriodicSequence::new(word(w), off), x)
    }

    #[test]
    fn single_atom_orbit() {
        let s = sys();
        let x = seed_orbit(&s, &word("4")).unwrap();
        let mu = orbit_measure(&s, &x);
        assert_eq!(mu.len(), 1);
        let atoms = mu.materialize();
        assert_eq!(atoms[0].1, 1.0);
        // Attracting fixed point of g₄: derivative 1 − 2π·0.01.
        assert_abs_diff_eq!(fiber_exponent(&mu, &s), (1.0 - TAU * 0.01).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!((1.0 - TAU * 0.01_f64).ln(), 0.93717_f64.ln(), epsilon = 1e-5);
    }

    #[test]
    fn identity_atoms_have_zero_exponent() {
        let s = sys();
        let mu = EmpiricalMeasure::from_atoms(vec![(point("5", 0, 0.1), 0.5), (point("5", 0, 0.7), 0.5)]).unwrap();
        assert_eq!(fiber_exponent(&mu, &s), 0.0);
    }

    #[test]
    fn birkhoff_identity_on_mixed_orbits() {
        let s = sys();
        for w in ["41", "4415", "123455", "40000000005"] {
            let fp = crate::orbit_forge::fiber_fixed_points(&s, &word(w), 4096);
            for p in fp.points {
                let orb = PeriodicOrbit::new(word(w), p.x, p.ln_theta);
                let mu = orbit_measure(&s, &orb);
                assert_abs_diff_eq!(fiber_exponent(&mu, &s), orbit_exponent(&orb), epsilon = 1e-9);
                assert_abs_diff_eq!(profile(&mu, &s, &Partition::new(1, 4).unwrap(), &TestFunctionSet::default(), &[]).exponent, orbit_exponent(&orb), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn orbit_measure_is_shift_invariant() {
        let s = sys();
        let w = word("41235");
        let fp = crate::orbit_forge::fiber_fixed_points(&s, &w, 4096);
        let p = fp.points.iter().find(|p| p.attracting).unwrap();
        let orb = PeriodicOrbit::new(w, p.x, p.ln_theta);
        let atoms = orbit_measure(&s, &orb).materialize();
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let pushed: Vec<(usize, f64)> = atoms
            .iter()
            .map(|(pt, _)| {
                let (y, _) = s.step(pt.base.view(), 0, pt.x);
                ((pt.base.offset() + 1) % pt.base.period(), y)
            })
            .collect();
        for (off, y) in pushed {
            let hit = atoms.iter().any(|(q, _)| q.base.offset() == off && crate::scalar::arc_distance(q.x, y) < 1e-9);
            assert!(hit, "image of an atom is not an atom");
        }
    }

    #[test]
    fn explicit_atoms_are_validated() {
        assert!(matches!(EmpiricalMeasure::from_atoms(vec![]), Err(MeasureError::Empty)));
        assert!(matches!(
            EmpiricalMeasure::from_atoms(vec![(point("1", 0, 0.1), 0.5)]),
            Err(MeasureError::NotNormalized(_))
        ));
        assert!(matches!(
            EmpiricalMeasure::from_atoms(vec![(point("1", 0, 0.1), 1.5), (point("2", 0, 0.1), -0.5)]),
            Err(MeasureError::NonPositiveWeight(_))
        ));
        // "12"@1 and "21"@0 are the same sequence.
        assert!(matches!(
            EmpiricalMeasure::from_atoms(vec![(point("12", 1, 0.3), 0.5), (point("21", 0, 0.3), 0.5)]),
            Err(MeasureError::DuplicateAtom(0, 1))
        ));
        assert!(Partition::new(1, 0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let s = sys();
        let mu = EmpiricalMeasure::from_atoms(vec![(point("3", 0, 0.42), 1.0)]).unwrap();
        // 36 base cylinders × 10 arcs.
        let part = Partition::new(2, 10).unwrap();
        assert_eq!(part.cell_count(), 360);
        assert_abs_diff_eq!(support_coverage(&mu, &s, &part), 1.0 / 360.0);
        assert_eq!(max_cell_mass(&mu, &s, &part), 1.0);
        let masses = cell_masses(&mu, &s, &part);
        assert_eq!(masses[(3 * 6 + 3) * 10 + 4], 1.0);
    }

    #[test]
    fn neighborhood_masses_match_cells() {
        let s = sys();
        let mu = EmpiricalMeasure::from_atoms(vec![(point("2", 0, 0.3), 0.25), (point("25", 0, 0.9), 0.75)]).unwrap();
        let cells = partition_neighborhoods(1, 4);
        let nb = neighborhood_masses(&mu, &s, &cells);
        let cm = cell_masses(&mu, &s, &Partition::new(1, 4).unwrap());
        assert_eq!(nb, cm);
    }

    #[test]
    fn test_function_set_shape() {
        let t = TestFunctionSet::default();
        assert_eq!(t.cylinder_count(), 43);
        assert_eq!(t.len(), 215);
        let s = sys();
        let mu = EmpiricalMeasure::from_atoms(vec![(point("12", 0, 0.125), 1.0)]).unwrap();
        let ints = test_integrals(&mu, &s, &t);
        // Whole-space row: 1, cos, sin, cos 2, sin 2 at x = 1/8.
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(ints[0], 1.0);
        assert_abs_diff_eq!(ints[1], r, epsilon = 1e-15);
        assert_abs_diff_eq!(ints[2], r, epsilon = 1e-15);
        assert_abs_diff_eq!(ints[3], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ints[4], 1.0, epsilon = 1e-15);
        // Depth-1 cylinder [1] is row 1 + 1; depth-2 cylinder [12] is row 7 + 8.
        assert_abs_diff_eq!(ints[2 * 5], 1.0);
        assert_abs_diff_eq!(ints[(7 + 8) * 5], 1.0);
        assert_eq!(ints[(7 + 9) * 5], 0.0);
        // Indicator and sin 4πx (= 1 at x = 1/8) in each of the three rows.
        assert_eq!(ints.iter().filter(|v| **v == 1.0).count(), 6);
    }

    fn arb_measure() -> impl Strategy<Value = EmpiricalMeasure> {
        prop::collection::vec(("[0-5]{1,4}", 0.0..1.0f64, 0.1..1.0f64), 1..5).prop_map(|raw| {
            let total: f64 = raw.iter().map(|r| r.2).sum();
            let mut atoms: Vec<(SkewPoint<f64>, f64)> = Vec::new();
            for (w, x, wt) in raw {
                atoms.push((point(&w, 0, x), wt / total));
            }
            // Rescale so the compensated total is exactly within tolerance.
            let sum: f64 = atoms.iter().map(|a| a.1).sum();
            for a in atoms.iter_mut() {
                a.1 /= sum;
            }
            EmpiricalMeasure::from_atoms(atoms.clone())
                .unwrap_or_else(|_| EmpiricalMeasure::from_atoms(vec![(atoms[0].0.clone(), 1.0)]).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gap_is_a_pseudometric(a in arb_measure(), b in arb_measure(), c in arb_measure()) {
            let s = sys();
            let t = TestFunctionSet::default();
            prop_assert_eq!(weak_star_gap(&a, &a, &s, &t), 0.0);
            let ab = weak_star_gap(&a, &b, &s, &t);
            prop_assert_eq!(ab, weak_star_gap(&b, &a, &s, &t));
            let bc = weak_star_gap(&b, &c, &s, &t);
            let ac = weak_star_gap(&a, &c, &s, &t);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn coarser_partition_never_loses_coverage(m in arb_measure(), arcs in 1usize..6) {
            let s = sys();
            let fine = support_coverage(&m, &s, &Partition::new(2, arcs * 2).unwrap());
            let coarse = support_coverage(&m, &s, &Partition::new(1, arcs).unwrap());
            prop_assert!(coarse >= fine);
            let masses = cell_masses(&m, &s, &Partition::new(1, arcs).unwrap());
            prop_assert!((masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagnostics_csv_layout() {
        let rows = vec![
            StageDiagnostics { stage: 1, period: 1, lambda: -0.06, kappa: None, coverage: 0.5, max_cell_mass: 1.0, ws_gap: None },
            StageDiagnostics { stage: 2, period: 9, lambda: -0.05, kappa: Some(0.9), coverage: 1.0, max_cell_mass: 0.25, ws_gap: Some(0.1) },
        ];
        let mut buf = Vec::new();
        write_diagnostics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "stage,period,lambda,kappa,coverage,max_cell_mass,ws_gap");
        assert_eq!(lines[1], "1,1,-0.06,,0.5,1.0,");
        assert_eq!(lines[2], "2,9,-0.05,0.9,1.0,0.25,0.1");
    }

    #[test]
    fn atom_csv_uses_reference_for_long_words() {
        let s = sys();
        let x = seed_orbit(&s, &word("4")).unwrap();
        let mut buf = Vec::new();
        write_atoms_csv(&orbit_measure(&s, &x), &s, "@orbit_1.json", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap(), "4,0,0.0,1.0");
        let long = PeriodicOrbit::new(Word::new(vec![crate::symbolic_base::Symbol::FIVE; 70]).unwrap(), 0.5, 0.0);
        let mut buf = Vec::new();
        write_atoms_csv(&orbit_measure(&s, &long), &s, "@orbit_2.json", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 71);
        assert!(text.lines().nth(70).unwrap().starts_with("@orbit_2.json,69,0.5,"));
    }
}
