//! Orientation-preserving circle diffeomorphisms and the six-map generator family.

use crate::scalar::{arc_distance, wrap, Scalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircleMapError {
    #[error("rotation angle {0} must lie in (0, 1)")]
    RotationAngle(f64),
    #[error("hyperbolic amplitude {0} must be positive")]
    HypAmplitude(f64),
    #[error("harmonic amplitudes give derivative swing {0} >= 1/2; maps would leave (1/2, 3/2)")]
    DerivativeSwing(f64),
    #[error("Morse-Smale amplitude {ms} must lie in (0, {hyp})")]
    MsAmplitude { ms: f64, hyp: f64 },
    #[error("grid must have at least 2 points")]
    Grid,
}

/// Lift `x ↦ x + Σ_n c_n sin(2πn(x − phase))`, `n = 1, 2, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicMap<S> {
    pub phase: S,
    pub amplitudes: Vec<S>,
}

impl<S: Scalar> HarmonicMap<S> {
    /// Displacement and derivative at `x`, using the Chebyshev recurrence for the harmonics.
    #[inline]
    fn eval(&self, x: S) -> (S, S) {
        let t = S::two_pi() * (x - self.phase);
        let (s1, c1) = t.sin_cos();
        let two_c = c1 + c1;
        let (mut s_prev, mut s_cur) = (S::zero(), s1);
        let (mut c_prev, mut c_cur) = (S::one(), c1);
        let mut disp = S::zero();
        let mut dsum = S::zero();
        for (i, &a) in self.amplitudes.iter().enumerate() {
            let n = S::lit((i + 1) as f64);
            disp = disp + a * s_cur;
            dsum = dsum + a * n * c_cur;
            let s_next = two_c * s_cur - s_prev;
            let c_next = two_c * c_cur - c_prev;
            s_prev = s_cur;
            s_cur = s_next;
            c_prev = c_cur;
            c_cur = c_next;
        }
        (disp, S::one() + S::two_pi() * dsum)
    }

    /// `sup |displacement|` bound.
    fn displacement_bound(&self) -> S {
        self.amplitudes.iter().fold(S::zero(), |acc, a| acc + a.abs())
    }

    /// `sup |lift''|` bound.
    fn second_derivative_bound(&self) -> S {
        let tp = S::two_pi();
        self.amplitudes
            .iter()
            .enumerate()
            .fold(S::zero(), |acc, (i, a)| {
                let n = S::lit((i + 1) as f64);
                acc + tp * tp * n * n * a.abs()
            })
    }
}

/// An orientation-preserving circle diffeomorphism of degree one.
#[derive(Debug, Clone, PartialEq)]
pub enum CircleMap<S> {
    Identity,
    /// Rigid rotation `H_a`.
    Rotation(S),
    Harmonic(HarmonicMap<S>),
    /// Chain applied left to right: the first listed map acts first.
    Compose(Vec<CircleMap<S>>),
    Inverse(Box<CircleMap<S>>),
}

impl<S: Scalar> CircleMap<S> {
    pub fn rotation(angle: S) -> Self {
        CircleMap::Rotation(angle)
    }

    /// `x + Σ_n c_n sin(2πn(x − phase))`.
    pub fn harmonic(phase: S, amplitudes: Vec<S>) -> Self {
        CircleMap::Harmonic(HarmonicMap { phase, amplitudes })
    }

    pub fn inverse(self) -> Self {
        match self {
            CircleMap::Identity => CircleMap::Identity,
            CircleMap::Rotation(a) => CircleMap::Rotation(-a),
            CircleMap::Inverse(inner) => *inner,
            other => CircleMap::Inverse(Box::new(other)),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            CircleMap::Identity => true,
            CircleMap::Rotation(a) => *a == S::zero(),
            CircleMap::Harmonic(h) => h.amplitudes.iter().all(|a| *a == S::zero()),
            CircleMap::Compose(v) => v.iter().all(|m| m.is_identity()),
            CircleMap::Inverse(m) => m.is_identity(),
        }
    }

    /// Value of the real lift at `x` together with the derivative.
    pub fn lift_with_derivative(&self, x: S) -> (S, S) {
        match self {
            CircleMap::Identity => (x, S::one()),
            CircleMap::Rotation(a) => (x + *a, S::one()),
            CircleMap::Harmonic(h) => {
                let (d, dy) = h.eval(x);
                (x + d, dy)
            }
            CircleMap::Compose(maps) => {
                let mut y = x;
                let mut dy = S::one();
                for m in maps {
                    let (ny, d) = m.lift_with_derivative(y);
                    y = ny;
                    dy = dy * d;
                }
                (y, dy)
            }
            CircleMap::Inverse(inner) => {
                let z = inner.invert_lift(x);
                let (_, d) = inner.lift_with_derivative(z);
                (z, S::one() / d)
            }
        }
    }

    #[inline]
    pub fn lift(&self, x: S) -> S {
        self.lift_with_derivative(x).0
    }

    #[inline]
    pub fn deriv(&self, x: S) -> S {
        self.lift_with_derivative(x).1
    }

    /// Bound on `sup |lift(x) − x|`, when known in closed form.
    pub fn displacement_bound(&self) -> Option<S> {
        match self {
            CircleMap::Identity => Some(S::zero()),
            CircleMap::Rotation(a) => Some(a.abs()),
            CircleMap::Harmonic(h) => Some(h.displacement_bound()),
            CircleMap::Compose(v) => v
                .iter()
                .try_fold(S::zero(), |acc, m| m.displacement_bound().map(|b| acc + b)),
            CircleMap::Inverse(m) => m.displacement_bound(),
        }
    }

    /// Bound on `sup |lift''|`, when known in closed form (single maps only).
    pub fn second_derivative_bound(&self) -> Option<S> {
        match self {
            CircleMap::Identity | CircleMap::Rotation(_) => Some(S::zero()),
            CircleMap::Harmonic(h) => Some(h.second_derivative_bound()),
            CircleMap::Compose(v) if v.len() == 1 => v[0].second_derivative_bound(),
            _ => None,
        }
    }

    /// Solves `lift(z) = y` for real `y`.
    pub fn invert_lift(&self, y: S) -> S {
        match self {
            CircleMap::Identity => y,
            CircleMap::Rotation(a) => y - *a,
            CircleMap::Harmonic(h) => {
                let b = h.displacement_bound() + S::lit(1e-9);
                bisect_lift(|z| z + h.eval(z).0, y, y - b, y + b)
            }
            CircleMap::Compose(maps) => maps.iter().rev().fold(y, |acc, m| m.invert_lift(acc)),
            CircleMap::Inverse(inner) => inner.lift(y),
        }
    }
}

/// Monotone bisection for `f(z) = y` on `[lo, hi]`, run until the bracket stops shrinking.
fn bisect_lift<S: Scalar, F: Fn(S) -> S>(f: F, y: S, mut lo: S, mut hi: S) -> S {
    let half = S::lit(0.5);
    for _ in 0..200 {
        let mid = (lo + hi) * half;
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Pick the endpoint with the smaller residual.
    if (f(lo) - y).abs() <= (f(hi) - y).abs() {
        lo
    } else {
        hi
    }
}

/// Image point on the circle and derivative.
#[inline]
pub fn apply<S: Scalar>(m: &CircleMap<S>, x: S) -> (S, S) {
    let (y, dy) = m.lift_with_derivative(x);
    (wrap(y), dy)
}

/// Preimage of `y` on the circle.
pub fn invert<S: Scalar>(m: &CircleMap<S>, y: S) -> S {
    wrap(m.invert_lift(y))
}

/// Composition, first listed map applied first; the empty chain is the identity.
pub fn compose<S: Scalar>(maps: Vec<CircleMap<S>>) -> CircleMap<S> {
    if maps.is_empty() {
        CircleMap::Identity
    } else {
        CircleMap::Compose(maps)
    }
}

/// Certified upper bound on the C⁰ distance: the grid maximum of the arc
/// distance plus the Lipschitz slack `(L+1)/(2·grid)`.
pub fn c0_distance<S: Scalar>(
    f: &CircleMap<S>,
    g: &CircleMap<S>,
    grid: usize,
    lipschitz: S,
) -> Result<S, CircleMapError> {
    if grid < 2 {
        return Err(CircleMapError::Grid);
    }
    let n = S::lit(grid as f64);
    let mut best = S::zero();
    for i in 0..grid {
        let x = S::lit(i as f64) / n;
        let d = arc_distance(f.lift(x), g.lift(x));
        best = best.max(d);
    }
    Ok(best + (lipschitz + S::one()) / (S::lit(2.0) * n))
}

/// Parameters of the generator family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapFamilyParams {
    /// Angle δ₂ of the rotation `g₀`.
    pub rot_angle: f64,
    /// First-harmonic amplitude of the hyperbolic maps.
    pub hyp_amplitude: f64,
    /// Second and third harmonic amplitudes of the hyperbolic maps.
    pub hyp_harmonics: [f64; 2],
    /// Repeller positions of `g₁, g₂, g₃`.
    pub phases: [f64; 3],
    /// Amplitude ε₄ of the Morse–Smale map `g₄(x) = x − ε₄ sin 2πx`.
    pub ms_amplitude: f64,
}

impl Default for MapFamilyParams {
    fn default() -> Self {
        MapFamilyParams {
            rot_angle: 0.02,
            hyp_amplitude: 0.04,
            hyp_harmonics: [0.0059, -0.0052],
            phases: [0.0, 1.0 / 3.0, 2.0 / 3.0],
            ms_amplitude: 0.01,
        }
    }
}

impl MapFamilyParams {
    /// `2π Σ n|c_n|`: the maximal deviation of `g_j'` from 1.
    pub fn derivative_swing(&self) -> f64 {
        std::f64::consts::TAU
            * (self.hyp_amplitude.abs()
                + 2.0 * self.hyp_harmonics[0].abs()
                + 3.0 * self.hyp_harmonics[1].abs())
    }

    pub fn validate(&self) -> Result<(), CircleMapError> {
        if !(self.rot_angle > 0.0 && self.rot_angle < 1.0) {
            return Err(CircleMapError::RotationAngle(self.rot_angle));
        }
        if !(self.hyp_amplitude > 0.0) {
            return Err(CircleMapError::HypAmplitude(self.hyp_amplitude));
        }
        let swing = self.derivative_swing();
        if !(swing < 0.5) {
            return Err(CircleMapError::DerivativeSwing(swing));
        }
        if !(self.ms_amplitude > 0.0 && self.ms_amplitude < self.hyp_amplitude) {
            return Err(CircleMapError::MsAmplitude { ms: self.ms_amplitude, hyp: self.hyp_amplitude });
        }
        Ok(())
    }
}

/// The six generators `g₀ … g₅`: rotation, three phase-shifted hyperbolic
/// maps, the Morse–Smale map with attractor 0, and the identity.
pub fn make_family<S: Scalar>(p: &MapFamilyParams) -> Result<[CircleMap<S>; 6], CircleMapError> {
    p.validate()?;
    let hyp = |a: f64| {
        CircleMap::harmonic(
            S::lit(a),
            vec![S::lit(p.hyp_amplitude), S::lit(p.hyp_harmonics[0]), S::lit(p.hyp_harmonics[1])],
        )
    };
    Ok([
        CircleMap::Rotation(S::lit(p.rot_angle)),
        hyp(p.phases[0]),
        hyp(p.phases[1]),
        hyp(p.phases[2]),
        CircleMap::harmonic(S::zero(), vec![S::lit(-p.ms_amplitude)]),
        CircleMap::Identity,
    ])
}
