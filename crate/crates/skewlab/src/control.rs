//! Certification of the control conditions: Hölder regularity, forward and
//! reverse expansion on short intervals, closeness of the rotation cylinder to
//! a rigid rotation, the weak-attractor inequality, predictability, and the
//! consistency of the constants.

use crate::circle_maps::{c0_distance, CircleMap};
use crate::orbit_forge::{seed_orbit, ForgeError, PeriodicOrbit};
use crate::scalar::arc_distance;
use crate::skew_engine::{Perturbation, SkewSystem, DEFAULT_TRUNCATION};
use crate::symbolic_base::{base_distance, PeriodicSequence, Symbol, Word, ALPHABET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("orbit is not attracting along the fiber (lambda = {0})")]
    NotAttracting(f64),
    #[error("alpha = {alpha} does not exceed log2 L = {log2_l}; the predictability exponent would be non-positive")]
    BetaNonPositive { alpha: f64, log2_l: f64 },
    #[error("invalid constant: {0}")]
    InvalidConstant(String),
    #[error("seed orbit: {0}")]
    Seed(#[from] ForgeError),
}

/// Constants of the control conditions and of the forging lemma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConstants {
    /// Bound on `max(g', (g⁻¹)')`.
    pub l: f64,
    pub holder_c: f64,
    pub alpha: f64,
    pub nu: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub gamma: f64,
    pub lemma_d: f64,
    /// Required exponent contraction per forging step.
    pub contraction_c: f64,
    /// Predictability constant; fitted when absent.
    pub predictability_k: Option<f64>,
}

impl Default for ControlConstants {
    fn default() -> Self {
        ControlConstants {
            l: 1.5,
            holder_c: 0.25,
            alpha: 0.7,
            nu: 1.08,
            delta1: 0.07,
            delta2: 0.02,
            gamma: 4e-4,
            lemma_d: 0.01,
            contraction_c: 0.9,
            predictability_k: None,
        }
    }
}

impl ControlConstants {
    /// Type-level sanity (not the consistency inequalities, which are checks).
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |what: &str| Err(ControlError::InvalidConstant(what.to_string()));
        if !(self.l > 1.0) {
            return bad("L must exceed 1");
        }
        if !(self.holder_c > 0.0) {
            return bad("holder_c must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.nu > 1.0) {
            return bad("nu must exceed 1");
        }
        if !(self.delta1 > 0.0 && self.delta1 < 1.0) {
            return bad("delta1 must lie in (0, 1)");
        }
        if !(self.delta2 > 0.0 && self.delta2 < 1.0) {
            return bad("delta2 must lie in (0, 1)");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.lemma_d > 0.0) {
            return bad("lemma_d must be positive");
        }
        if !(self.contraction_c > 0.0 && self.contraction_c < 1.0) {
            return bad("contraction_c must lie in (0, 1)");
        }
        if let Some(k) = self.predictability_k {
            if !(k >= 0.0) {
                return bad("predictability_k must be non-negative");
            }
        }
        Ok(())
    }

    /// `β = 1 − ln L / (α ln 2)`.
    pub fn beta(&self) -> Result<f64, ControlError> {
        predictability_beta(self.l, self.alpha)
    }

    /// `1 − 3|λ|/ln L`.
    pub fn kappa_bound(&self, lambda: f64) -> f64 {
        1.0 - 3.0 * lambda.abs() / self.l.ln()
    }
}

/// Sampling and resolution parameters of the certification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySettings {
    pub seed: u64,
    pub holder_samples: usize,
    pub holder_grid: usize,
    pub derivative_grid: usize,
    pub expansion_subgrid: usize,
    pub rotation_grid: usize,
    pub predictability_m_max: usize,
    pub predictability_trials: usize,
    pub predictability_tails: usize,
    pub calibration_deltas: Vec<f64>,
    /// Word of the seed orbit for the weak-attractor check.
    pub seed_word: Word,
}

impl Default for CertifySettings {
    fn default() -> Self {
        CertifySettings {
            seed: 1,
            holder_samples: 6,
            holder_grid: 1024,
            derivative_grid: 4096,
            expansion_subgrid: 1024,
            rotation_grid: 4096,
            predictability_m_max: 6,
            predictability_trials: 24,
            predictability_tails: 6,
            calibration_deltas: vec![1e-8, 1e-7, 1e-6, 1e-5],
            seed_word: "4".parse().expect("literal word"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub max_ratio: f64,
    pub holder_c: f64,
    pub max_derivative: f64,
    pub l: f64,
    pub pairs: usize,
    pub ratio_margin: f64,
    pub derivative_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEntry {
    pub center: f64,
    pub symbol: u8,
    pub expansion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub direction: Direction,
    pub nu: f64,
    pub delta1: f64,
    /// Half-length of every certified interval.
    pub half_width: f64,
    pub min_expansion: f64,
    pub margin: f64,
    pub pass: bool,
    pub intervals: Vec<ExpansionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub max_distance: f64,
    pub threshold: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakOrbitReport {
    pub word: Word,
    pub lambda: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityReport {
    pub m_max: usize,
    /// Largest diameter observed for each `m = 1..=m_max`.
    pub per_m: Vec<f64>,
    pub gamma_measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilitySection {
    pub gamma_measured: f64,
    pub per_m: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub k: f64,
    pub k_fitted: bool,
    pub calibration: Vec<(f64, f64)>,
    /// `K·δ^β` at the system's perturbation size (0 when unperturbed).
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub gamma_below_delta2_over_40: bool,
    pub delta1_above_3_delta2: bool,
    pub alpha_above_log2_l: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCertificate {
    pub constants: ControlConstants,
    pub settings: CertifySettings,
    pub delta_pert: f64,
    pub holder: HolderReport,
    pub forward: ExpansionReport,
    pub backward: ExpansionReport,
    pub rotation: RotationReport,
    pub weak_orbit: WeakOrbitReport,
    pub predictability: PredictabilitySection,
    pub consistency: ConsistencyReport,
    pub pass: bool,
}

/// Certified `(max g', min g')` over the circle.
fn derivative_range(m: &CircleMap<f64>, grid: usize) -> (f64, f64) {
    let slack = m.second_derivative_bound().unwrap_or(0.0) / (2.0 * grid as f64);
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..grid {
        let d = m.deriv(i as f64 / grid as f64);
        hi = hi.max(d);
        lo = lo.min(d);
    }
    (hi + slack, lo - slack)
}

/// Family indices used by the system's rule.
fn used_family(sys: &SkewSystem<f64>) -> Vec<usize> {
    let mut used: Vec<usize> = sys.rule().iter().map(|&r| r as usize).collect();
    used.sort_unstable();
    used.dedup();
    used
}

/// Certified bound on `max(g_ω', (g_ω⁻¹)')` over the maps of the system.
pub fn derivative_bound(sys: &SkewSystem<f64>, grid: usize) -> f64 {
    used_family(sys)
        .into_iter()
        .map(|i| {
            let (hi, lo) = derivative_range(&sys.family()[i], grid);
            hi.max(1.0 / lo)
        })
        .fold(1.0, f64::max)
}

fn random_word(rng: &mut ChaCha8Rng, n: usize) -> Vec<Symbol> {
    (0..n).map(|_| Symbol::new(rng.random_range(0..ALPHABET as u8)).expect("in range")).collect()
}

/// Samples pairs of base points at every agreement depth `0..=D` and bounds
/// `d_C0(g_ω, g_ω') / d(ω, ω')^α` together with the derivative bound.
pub fn check_holder(
    sys: &SkewSystem<f64>,
    l: f64,
    holder_c: f64,
    alpha: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> HolderReport {
    check_holder_with(sys, l, holder_c, alpha, samples, 1024, 4096, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn check_holder_with(
    sys: &SkewSystem<f64>,
    l: f64,
    holder_c: f64,
    alpha: f64,
    samples: usize,
    grid: usize,
    derivative_grid: usize,
    rng: &mut ChaCha8Rng,
) -> HolderReport {
    let max_derivative = derivative_bound(sys, derivative_grid);
    let depth = sys.perturbation().map_or(DEFAULT_TRUNCATION, |p| p.depth());
    let len = 2 * depth + 8;
    let centre = len / 2;
    let mut max_ratio: f64 = 0.0;
    let mut pairs = 0;
    for m in 0..=depth {
        for _ in 0..samples.max(1) {
            let a = random_word(rng, len);
            let mut b = a.clone();
            let pos = if m == 0 || rng.random_bool(0.5) { centre + m } else { centre - m };
            let old = b[pos].value();
            let new = (old + rng.random_range(1..ALPHABET as u8)) % ALPHABET as u8;
            b[pos] = Symbol::new(new).expect("in range");
            let sa = PeriodicSequence::new(Word::new(a).expect("non-empty"), centre);
            let sb = PeriodicSequence::new(Word::new(b).expect("non-empty"), centre);
            let d_base = base_distance(&sa, &sb, depth + 4);
            if d_base == 0.0 {
                continue;
            }
            let (va, vb) = (sa.view(), sb.view());
            let d_c0 = if sys.family_index_at(va, 0) == sys.family_index_at(vb, 0) {
                // Same generator: the maps differ by a rigid rotation.
                arc_distance(sys.rotation_at(va, 0), sys.rotation_at(vb, 0))
            } else {
                let fa = sys.fiber_map_at_ref(va, 0);
                let fb = sys.fiber_map_at_ref(vb, 0);
                c0_distance(&fa, &fb, grid, max_derivative).expect("grid >= 2")
            };
            max_ratio = max_ratio.max(d_c0 / d_base.powf(alpha));
            pairs += 1;
        }
    }
    let ratio_margin = holder_c - max_ratio;
    let derivative_margin = l - max_derivative;
    HolderReport {
        max_ratio,
        holder_c,
        max_derivative,
        l,
        pairs,
        ratio_margin,
        derivative_margin,
        pass: ratio_margin > 0.0 && derivative_margin > 0.0,
    }
}

/// Family indices of all cylinders `{…|j β…}`, `β ≠ 5`.
fn cylinder_maps(sys: &SkewSystem<f64>, j: u8) -> Vec<usize> {
    let d = sys.depth();
    if d == 1 {
        return vec![sys.rule()[j as usize] as usize];
    }
    let tail = ALPHABET.pow((d - 1) as u32);
    let mut out = Vec::new();
    for rest in 0..tail {
        // The symbol right after j is the leading digit of `rest`.
        let beta = rest / ALPHABET.pow((d - 2) as u32);
        if beta == 5 {
            continue;
        }
        out.push(sys.rule()[j as usize * tail + rest] as usize);
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Lower bound of `min g'` on `[a, b]` (real lifts).
fn min_derivative_on(m: &CircleMap<f64>, a: f64, b: f64, sub: usize) -> f64 {
    let b2 = m.second_derivative_bound().unwrap_or(0.0);
    let h = (b - a) / sub as f64;
    let min = (0..=sub).map(|k| m.deriv(a + k as f64 * h)).fold(f64::INFINITY, f64::min);
    min - b2 * h / 2.0
}

/// Upper bound of `max g'` on `[a, b]` (real lifts).
fn max_derivative_on(m: &CircleMap<f64>, a: f64, b: f64, sub: usize) -> f64 {
    let b2 = m.second_derivative_bound().unwrap_or(0.0);
    let h = (b - a) / sub as f64;
    let max = (0..=sub).map(|k| m.deriv(a + k as f64 * h)).fold(f64::NEG_INFINITY, f64::max);
    max + b2 * h / 2.0
}

/// Number of interval centres used to certify expansion at scale `δ₁`.
pub fn expansion_cover_size(delta1: f64) -> usize {
    16 * (1.0 / delta1).ceil() as usize
}

/// Certifies that every interval shorter than `δ₁` is expanded by more than
/// `ν` by all maps of some cylinder `{…|jβ…}` (forward) or by the inverses of
/// `{…j|β…}` (backward).
pub fn certify_expansion(sys: &SkewSystem<f64>, nu: f64, delta1: f64, direction: Direction) -> ExpansionReport {
    certify_expansion_with(sys, nu, delta1, direction, 1024)
}

pub fn certify_expansion_with(
    sys: &SkewSystem<f64>,
    nu: f64,
    delta1: f64,
    direction: Direction,
    subgrid: usize,
) -> ExpansionReport {
    let count = expansion_cover_size(delta1);
    let spacing = 1.0 / count as f64;
    let half_width = (delta1 + spacing) / 2.0;
    let widen = match direction {
        Direction::Forward => 0.0,
        Direction::Backward => sys.perturbation().map_or(0.0, |p| p.sup_rotation()),
    };
    let candidates: Vec<(u8, Vec<usize>)> = (0..5u8).map(|j| (j, cylinder_maps(sys, j))).collect();
    let mut intervals = Vec::with_capacity(count);
    let mut min_expansion = f64::INFINITY;
    for i in 0..count {
        let center = i as f64 * spacing;
        let (a, b) = (center - half_width - widen, center + half_width + widen);
        let mut best = (0u8, f64::NEG_INFINITY);
        for (j, maps) in &candidates {
            let e = maps
                .iter()
                .map(|&k| {
                    let g = &sys.family()[k];
                    match direction {
                        Direction::Forward => min_derivative_on(g, a, b, subgrid),
                        Direction::Backward => {
                            1.0 / max_derivative_on(g, g.invert_lift(a), g.invert_lift(b), subgrid)
                        }
                    }
                })
                .fold(f64::INFINITY, f64::min);
            if e > best.1 {
                best = (*j, e);
            }
        }
        min_expansion = min_expansion.min(best.1);
        intervals.push(ExpansionEntry { center, symbol: best.0, expansion: best.1 });
    }
    let margin = min_expansion - nu;
    ExpansionReport { direction, nu, delta1, half_width, min_expansion, margin, pass: margin > 0.0, intervals }
}

/// Distance of the rotation cylinder `{…|0β…}`, `β ≠ 5`, to `H_{δ₂}` against `δ₂²/40`.
pub fn check_rotation(sys: &SkewSystem<f64>, delta2: f64) -> RotationReport {
    check_rotation_with(sys, delta2, 4096)
}

pub fn check_rotation_with(sys: &SkewSystem<f64>, delta2: f64, grid: usize) -> RotationReport {
    let target = CircleMap::Rotation(delta2);
    let lip = derivative_bound(sys, grid);
    let mut worst: f64 = 0.0;
    for k in cylinder_maps(sys, 0) {
        let d = match &sys.family()[k] {
            CircleMap::Rotation(a) => arc_distance(*a, delta2),
            CircleMap::Identity => delta2.min(0.5),
            g => c0_distance(g, &target, grid, lip).expect("grid >= 2"),
        };
        worst = worst.max(d);
    }
    if let Some(p) = sys.perturbation() {
        let all: Vec<Symbol> = (0..ALPHABET as u8).map(|s| Symbol::new(s).expect("in range")).collect();
        let not_five: Vec<Symbol> = all.iter().copied().filter(|&s| s != Symbol::FIVE).collect();
        worst += p.sup_rotation_constrained(|k| match k {
            0 => vec![Symbol::ZERO],
            1 => not_five.clone(),
            _ => all.clone(),
        });
    }
    let threshold = delta2 * delta2 / 40.0;
    let margin = threshold - worst;
    RotationReport { max_distance: worst, threshold, margin, pass: margin > 0.0 }
}

/// `λ(X) + ln ν > 0` for an attracting orbit.
pub fn check_weak_orbit(orbit: &PeriodicOrbit, nu: f64) -> Result<WeakOrbitReport, ControlError> {
    let lambda = orbit.lambda();
    if !(lambda < 0.0) {
        return Err(ControlError::NotAttracting(lambda));
    }
    let margin = lambda + nu.ln();
    Ok(WeakOrbitReport { word: orbit.word().clone(), lambda, margin, pass: margin > 0.0 })
}

/// Largest fiber spread of `ḡ_{±m}[ω](x)` over tail completions of random
/// central words, for `m = 1..=m_max`. The forward composition reads the
/// step-rule window past its last step, so its central word is extended by
/// `d − 1` symbols.
pub fn measure_predictability(
    sys: &SkewSystem<f64>,
    m_max: usize,
    trials: usize,
    tails: usize,
    rng: &mut ChaCha8Rng,
) -> PredictabilityReport {
    let depth = sys.perturbation().map_or(0, |p| p.depth());
    let lookahead = sys.depth().saturating_sub(1);
    let mut per_m = Vec::with_capacity(m_max);
    for m in 1..=m_max.max(1) {
        let half = m + depth + lookahead + 2;
        let len = 2 * half;
        let mut worst: f64 = 0.0;
        for _ in 0..trials.max(1) {
            let centre = random_word(rng, len);
            let x: f64 = rng.random();
            let (lo, hi) = (half - m, half + m + lookahead);
            let mut fwd = Vec::with_capacity(tails);
            let mut bwd = Vec::with_capacity(tails);
            for _ in 0..tails.max(2) {
                let mut w = random_word(rng, len);
                w[lo..hi].copy_from_slice(&centre[lo..hi]);
                let s = PeriodicSequence::new(Word::new(w).expect("non-empty"), half);
                fwd.push(sys.cocycle_ref(s.view(), 0, x, m as i64).0);
                bwd.push(sys.cocycle_ref(s.view(), 0, x, -(m as i64)).0);
            }
            worst = worst.max(diameter(&fwd)).max(diameter(&bwd));
        }
        per_m.push(worst);
    }
    let gamma_measured = per_m.iter().copied().fold(0.0, f64::max);
    PredictabilityReport { m_max, per_m, gamma_measured }
}

fn diameter(points: &[f64]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i + 1..] {
            d = d.max(arc_distance(a, b));
        }
    }
    d
}

/// `β = 1 − ln L / (α ln 2)`, positive exactly when `α > log₂ L`.
pub fn predictability_beta(l: f64, alpha: f64) -> Result<f64, ControlError> {
    let log2_l = l.log2();
    if !(alpha > log2_l) {
        return Err(ControlError::BetaNonPositive { alpha, log2_l });
    }
    Ok(1.0 - l.ln() / (alpha * std::f64::consts::LN_2))
}

/// `γ = K·δ^β`.
pub fn predictability_bound(l: f64, _holder_c: f64, alpha: f64, delta: f64, k: f64) -> Result<f64, ControlError> {
    let beta = predictability_beta(l, alpha)?;
    if delta == 0.0 {
        return Ok(0.0);
    }
    Ok(k * delta.powf(beta))
}

/// Fits `K = max γ_measured/δ^β` over perturbations of the unperturbed system.
#[allow(clippy::too_many_arguments)]
pub fn fit_predictability_k(
    sys: &SkewSystem<f64>,
    l: f64,
    alpha: f64,
    deltas: &[f64],
    m_max: usize,
    trials: usize,
    tails: usize,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>), ControlError> {
    let beta = predictability_beta(l, alpha)?;
    let base = sys.unperturbed();
    let mut k: f64 = 0.0;
    let mut calibration = Vec::with_capacity(deltas.len());
    for (i, &delta) in deltas.iter().enumerate() {
        let p = Perturbation::new(delta, alpha, seed.wrapping_add(1000 + i as u64), DEFAULT_TRUNCATION)
            .map_err(|e| ControlError::InvalidConstant(e.to_string()))?;
        let perturbed = base.clone().with_perturbation(p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000 + i as u64));
        let g = measure_predictability(&perturbed, m_max, trials, tails, &mut rng).gamma_measured;
        if delta > 0.0 {
            k = k.max(g / delta.powf(beta));
        }
        calibration.push((delta, g));
    }
    Ok((k, calibration))
}

/// Runs every check and the consistency inequalities.
pub fn certify_controlled(
    sys: &SkewSystem<f64>,
    constants: &ControlConstants,
    settings: &CertifySettings,
) -> Result<ControlCertificate, ControlError> {
    constants.validate()?;
    let c = constants;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let holder = check_holder_with(
        sys,
        c.l,
        c.holder_c,
        c.alpha,
        settings.holder_samples,
        settings.holder_grid,
        settings.derivative_grid,
        &mut rng,
    );
    let forward = certify_expansion_with(sys, c.nu, c.delta1, Direction::Forward, settings.expansion_subgrid);
    let backward = certify_expansion_with(sys, c.nu, c.delta1, Direction::Backward, settings.expansion_subgrid);
    let rotation = check_rotation_with(sys, c.delta2, settings.rotation_grid);

    let seed = seed_orbit(sys, &settings.seed_word)?;
    let weak_orbit = check_weak_orbit(&seed, c.nu)?;

    let log2_l = c.l.log2();
    let consistency = {
        let g = c.gamma < c.delta2 / 40.0;
        let d = c.delta1 > 3.0 * c.delta2;
        let a = c.alpha > log2_l;
        ConsistencyReport {
            gamma_below_delta2_over_40: g,
            delta1_above_3_delta2: d,
            alpha_above_log2_l: a,
            pass: g && d && a,
        }
    };

    let report = measure_predictability(
        sys,
        settings.predictability_m_max,
        settings.predictability_trials,
        settings.predictability_tails,
        &mut rng,
    );
    let predictability = if consistency.alpha_above_log2_l {
        let beta = c.beta()?;
        let (k, calibration, fitted) = match c.predictability_k {
            Some(k) => (k, Vec::new(), false),
            None => {
                let (k, cal) = fit_predictability_k(
                    sys,
                    c.l,
                    c.alpha,
                    &settings.calibration_deltas,
                    settings.predictability_m_max,
                    settings.predictability_trials,
                    settings.predictability_tails,
                    settings.seed,
                )?;
                (k, cal, true)
            }
        };
        let delta = sys.perturbation().map_or(0.0, |p| p.delta());
        let bound = predictability_bound(c.l, c.holder_c, c.alpha, delta, k)?;
        let within = delta == 0.0 || report.gamma_measured <= bound;
        let margin = c.gamma - report.gamma_measured;
        PredictabilitySection {
            gamma_measured: report.gamma_measured,
            per_m: report.per_m,
            gamma: c.gamma,
            beta,
            k,
            k_fitted: fitted,
            calibration,
            bound,
            margin,
            pass: margin > 0.0 && within,
        }
    } else {
        PredictabilitySection {
            gamma_measured: report.gamma_measured,
            per_m: report.per_m,
            gamma: c.gamma,
            beta: f64::NAN,
            k: f64::NAN,
            k_fitted: false,
            calibration: Vec::new(),
            bound: f64::NAN,
            margin: c.gamma - report.gamma_measured,
            pass: false,
        }
    };

    let pass = holder.pass
        && forward.pass
        && backward.pass
        && rotation.pass
        && weak_orbit.pass
        && predictability.pass
        && consistency.pass;
    Ok(ControlCertificate {
        constants: constants.clone(),
        settings: settings.clone(),
        delta_pert: sys.perturbation().map_or(0.0, |p| p.delta()),
        holder,
        forward,
        backward,
        rotation,
        weak_orbit,
        predictability,
        consistency,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle_maps::MapFamilyParams;
    use std::f64::consts::{PI, TAU};

    fn sys() -> SkewSystem<f64> {
        SkewSystem::from_params(&MapFamilyParams::default()).unwrap()
    }

    fn perturbed(delta: f64) -> SkewSystem<f64> {
        sys().with_perturbation(Perturbation::new(delta, 0.7, 11, DEFAULT_TRUNCATION).unwrap())
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn holder_unperturbed_and_perturbed() {
        let r = check_holder(&sys(), 1.5, 0.25, 0.7, 3, &mut rng());
        assert!(r.pass, "{r:?}");
        assert!(r.max_derivative < 1.5 && r.max_derivative > 1.3);
        let r = check_holder(&perturbed(1e-6), 1.5, 0.25, 0.7, 3, &mut rng());
        assert!(r.pass, "{r:?}");
        // A small Hölder constant cannot absorb pairs that differ in the step window.
        let r = check_holder(&perturbed(1e-6), 1.5, 1e-4, 0.7, 3, &mut rng());
        assert!(!r.pass);
    }

    #[test]
    fn holder_ratio_vanishes_for_equal_windows_without_perturbation() {
        let s = sys();
        let a = PeriodicSequence::new("2301".parse().unwrap(), 0);
        let b = PeriodicSequence::new("2344".parse().unwrap(), 0);
        assert_eq!(s.fiber_map_at_ref(a.view(), 0), s.fiber_map_at_ref(b.view(), 0));
        assert_eq!(s.rotation_at(a.view(), 0), s.rotation_at(b.view(), 0));
    }

    #[test]
    fn forward_expansion_table() {
        let r = certify_expansion(&sys(), 1.08, 0.07, Direction::Forward);
        assert!(r.pass, "min expansion {}", r.min_expansion);
        assert!(r.min_expansion >= 1.05);
        let at = |c: f64| r.intervals.iter().find(|e| arc_distance(e.center, c) < 1e-12).unwrap();
        assert_eq!(at(0.0).symbol, 1);
        assert_eq!(at(1.0 / 3.0).symbol, 2);
        assert_eq!(at(2.0 / 3.0).symbol, 3);
        // Near the repeller of g1 the expansion is close to g1'(0).
        assert!(at(0.0).expansion > 1.09);
        assert_eq!(r.intervals.len(), expansion_cover_size(0.07));
    }

    #[test]
    fn pure_sine_reference_bound_near_repeller() {
        let p = MapFamilyParams { hyp_amplitude: 0.05, hyp_harmonics: [0.0, 0.0], ..Default::default() };
        let s = SkewSystem::from_params(&p).unwrap();
        let r = certify_expansion(&s, 1.0, 0.07, Direction::Forward);
        let e = r.intervals.iter().find(|e| e.center == 0.0).unwrap();
        // Analytic minimum over the certified interval.
        let analytic = 1.0 + 0.1 * PI * (TAU * r.half_width).cos();
        assert!(e.expansion <= analytic + 1e-12 && e.expansion > analytic - 1e-3);
        assert!(e.expansion > 1.09);
        // Reverse expansion of the pure sine family is not certifiable.
        let b = certify_expansion(&s, 1.0, 0.07, Direction::Backward);
        assert!(!b.pass);
    }

    #[test]
    fn backward_expansion_table() {
        let r = certify_expansion(&sys(), 1.08, 0.07, Direction::Backward);
        assert!(r.pass, "min expansion {}", r.min_expansion);
        let e = r.intervals.iter().find(|e| arc_distance(e.center, 0.5) < 1e-12).unwrap();
        assert_eq!(e.symbol, 1);
    }

    #[test]
    fn rotation_check() {
        let r = check_rotation(&sys(), 0.02);
        assert_eq!(r.max_distance, 0.0);
        assert!(r.pass && (r.threshold - 1e-5).abs() < 1e-18);
        let r = check_rotation(&perturbed(5e-7), 0.02);
        assert!(r.pass && r.margin >= 1e-5 - 2.0 * 5e-7 / (1.0 - (-0.7f64).exp2()));
        assert!(!check_rotation(&perturbed(1e-3), 0.02).pass);
    }

    #[test]
    fn weak_orbit_check() {
        let orbit = |lambda: f64| PeriodicOrbit::from_parts("4".parse().unwrap(), 0.0, lambda);
        let r = check_weak_orbit(&orbit(-0.0649), 1.09).unwrap();
        assert!(r.pass && (r.margin - 0.0213).abs() < 1e-3);
        let nu: f64 = 1.09;
        assert!(!check_weak_orbit(&orbit(-nu.ln()), nu).unwrap().pass);
        assert!(check_weak_orbit(&orbit(0.0), nu).is_err());
    }

    #[test]
    fn predictability_of_step_system_is_exact() {
        let r = measure_predictability(&sys(), 5, 20, 5, &mut rng());
        assert!(r.per_m.iter().all(|&g| g == 0.0));
        let r = measure_predictability(&perturbed(1e-6), 5, 20, 5, &mut rng());
        assert!(r.gamma_measured > 0.0 && r.gamma_measured < 5e-4);
    }

    #[test]
    fn predictability_monotone_in_m_max() {
        let s = perturbed(1e-5);
        let a = measure_predictability(&s, 3, 10, 4, &mut rng());
        let b = measure_predictability(&s, 6, 10, 4, &mut rng());
        assert!(b.gamma_measured >= a.gamma_measured);
    }

    #[test]
    fn beta_and_bound() {
        let b = predictability_beta(1.5, 0.7).unwrap();
        assert!((b - 0.16434).abs() < 1e-5);
        assert_eq!(predictability_bound(1.5, 0.25, 0.7, 0.0, 3.0).unwrap(), 0.0);
        assert!(predictability_bound(1.5, 0.25, 1.5f64.log2(), 1e-6, 1.0).is_err());
        let g = predictability_bound(1.5, 0.25, 0.7, 1e-6, 2.0).unwrap();
        assert!((g - 2.0 * 1e-6f64.powf(b)).abs() < 1e-15);
    }

    #[test]
    fn consistency_failures_are_flagged() {
        let settings = CertifySettings { holder_samples: 1, predictability_trials: 4, ..Default::default() };
        let c = ControlConstants { gamma: 0.02 / 10.0, ..Default::default() };
        let cert = certify_controlled(&sys(), &c, &settings).unwrap();
        assert!(!cert.consistency.gamma_below_delta2_over_40 && !cert.pass);
        let c = ControlConstants { delta1: 0.04, ..Default::default() };
        let cert = certify_controlled(&sys(), &c, &settings).unwrap();
        assert!(!cert.consistency.delta1_above_3_delta2 && !cert.pass);
    }

    #[test]
    fn constants_validation() {
        assert!(ControlConstants::default().validate().is_ok());
        assert!(ControlConstants { l: 1.0, ..Default::default() }.validate().is_err());
        assert!(ControlConstants { nu: 0.9, ..Default::default() }.validate().is_err());
        let k = ControlConstants::default().kappa_bound(-0.01);
        assert!((k - 0.926).abs() < 1e-3);
    }
}
