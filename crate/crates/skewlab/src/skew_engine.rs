//! The skew product `G(ω, x) = (σω, g_ω(x))`: fiber-map lookup, fiber
//! compositions in both time directions and the log-derivative cocycle.

use crate::circle_maps::{make_family, CircleMap, CircleMapError, MapFamilyParams};
use crate::scalar::{wrap, CompensatedSum, Scalar};
use crate::symbolic_base::{PeriodicSequence, SeqRef, Symbol, Word, ALPHABET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::sync::Arc;
use thiserror::Error;

/// Depth at which the perturbation tail is truncated.
pub const DEFAULT_TRUNCATION: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkewError {
    #[error("step rule must list 6^{depth} = {expected} entries, got {got}")]
    RuleSize { depth: usize, expected: usize, got: usize },
    #[error("step rule entry {0} is not a family index")]
    RuleEntry(u8),
    #[error("cylinder depth must be between 1 and 6")]
    Depth,
    #[error("perturbation size {0} must be finite and non-negative")]
    PerturbationSize(f64),
    #[error("perturbation decay exponent {0} must be positive")]
    PerturbationDecay(f64),
    #[error(transparent)]
    Family(#[from] CircleMapError),
}

/// Hölder tail: rotation by `Σ_k ρ[k][ω_k]` for `|k| ≤ depth`, with
/// `|ρ[k][s]| ≤ δ·2^{−α|k|}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<S> {
    delta: f64,
    alpha: f64,
    seed: u64,
    depth: usize,
    table: Vec<[S; ALPHABET]>,
}

impl<S: Scalar> Perturbation<S> {
    /// Draws the rotation table from a seeded stream, uniformly in the allowed range.
    pub fn new(delta: f64, alpha: f64, seed: u64, depth: usize) -> Result<Self, SkewError> {
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(SkewError::PerturbationSize(delta));
        }
        if !(alpha > 0.0) {
            return Err(SkewError::PerturbationDecay(alpha));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = depth as i64;
        let table = (-d..=d)
            .map(|k| {
                let bound = delta * (-alpha * k.abs() as f64).exp2();
                let mut row = [S::zero(); ALPHABET];
                for v in row.iter_mut() {
                    let u: f64 = rng.random_range(-1.0..=1.0);
                    *v = S::lit(u * bound);
                }
                row
            })
            .collect();
        Ok(Perturbation { delta, alpha, seed, depth, table })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Offset for relative index `k` and symbol `s`.
    pub fn offset(&self, k: i64, s: Symbol) -> S {
        self.table[(k + self.depth as i64) as usize][s.index()]
    }

    /// Rotation applied at the base point `seq` shifted by `pos`.
    #[inline]
    pub fn rotation_at(&self, seq: SeqRef<'_>, pos: i64) -> S {
        let d = self.depth as i64;
        let mut acc = CompensatedSum::new();
        for (i, row) in self.table.iter().enumerate() {
            acc.add(row[seq.at(pos + i as i64 - d).index()]);
        }
        acc.value()
    }

    /// `Σ_k max_s |ρ[k][s]|`: the exact supremum of `|rotation|` over all base points.
    pub fn sup_rotation(&self) -> f64 {
        self.table
            .iter()
            .map(|row| row.iter().map(|v| v.to_f64_lossy().abs()).fold(0.0, f64::max))
            .sum()
    }

    /// Supremum of the rotation over base points with prescribed symbols at
    /// some indices (`fixed(k)` returns the allowed symbols at index `k`).
    pub fn sup_rotation_constrained<F: Fn(i64) -> Vec<Symbol>>(&self, allowed: F) -> f64 {
        let d = self.depth as i64;
        let (mut hi, mut lo) = (0.0_f64, 0.0_f64);
        for (i, row) in self.table.iter().enumerate() {
            let syms = allowed(i as i64 - d);
            let vals = syms.iter().map(|s| row[s.index()].to_f64_lossy());
            let (mx, mn) = vals.fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), v| (a.max(v), b.min(v)));
            hi += mx;
            lo += mn;
        }
        hi.abs().max(lo.abs())
    }

    /// Geometric bound `δ(1 + 2^{−α})/(1 − 2^{−α}) ≤ 2δ/(1 − 2^{−α})`.
    pub fn tail_bound(&self) -> f64 {
        let q = (-self.alpha).exp2();
        self.delta * (1.0 + q) / (1.0 - q)
    }
}

/// Assignment `ω ↦ g_ω` via depth-`d` central cylinders plus an optional tail.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewSystem<S> {
    family: [CircleMap<S>; ALPHABET],
    depth: usize,
    rule: Vec<u8>,
    perturbation: Option<Perturbation<S>>,
}

/// The rule of depth 2: `iβ ↦ g_i` for `β ≠ 5`, `i5 ↦ g₅ = id`.
pub fn default_step_rule() -> Vec<u8> {
    let mut rule = Vec::with_capacity(ALPHABET * ALPHABET);
    for i in 0..ALPHABET as u8 {
        for beta in 0..ALPHABET as u8 {
            rule.push(if beta == 5 { 5 } else { i });
        }
    }
    rule
}

impl<S: Scalar> SkewSystem<S> {
    pub fn new(family: [CircleMap<S>; ALPHABET], depth: usize, rule: Vec<u8>) -> Result<Self, SkewError> {
        if depth == 0 || depth > 6 {
            return Err(SkewError::Depth);
        }
        let expected = ALPHABET.pow(depth as u32);
        if rule.len() != expected {
            return Err(SkewError::RuleSize { depth, expected, got: rule.len() });
        }
        if let Some(&bad) = rule.iter().find(|&&r| r as usize >= ALPHABET) {
            return Err(SkewError::RuleEntry(bad));
        }
        Ok(SkewSystem { family, depth, rule, perturbation: None })
    }

    /// Depth-2 step system over the given six maps.
    pub fn step_system(family: [CircleMap<S>; ALPHABET]) -> Self {
        Self::new(family, 2, default_step_rule()).expect("default rule is well formed")
    }

    pub fn from_params(params: &MapFamilyParams) -> Result<Self, SkewError> {
        Ok(Self::step_system(make_family(params)?))
    }

    pub fn with_perturbation(mut self, p: Perturbation<S>) -> Self {
        self.perturbation = Some(p);
        self
    }

    pub fn unperturbed(&self) -> Self {
        SkewSystem { perturbation: None, ..self.clone() }
    }

    pub fn family(&self) -> &[CircleMap<S>; ALPHABET] {
        &self.family
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn rule(&self) -> &[u8] {
        &self.rule
    }

    pub fn perturbation(&self) -> Option<&Perturbation<S>> {
        self.perturbation.as_ref()
    }

    /// Family index for the window `w` (symbols at indices `0..d`).
    pub fn rule_for(&self, window: &[Symbol]) -> usize {
        let idx = window.iter().fold(0usize, |acc, s| acc * ALPHABET + s.index());
        self.rule[idx] as usize
    }

    /// Family index selected at `seq` shifted by `pos`.
    #[inline]
    pub fn family_index_at(&self, seq: SeqRef<'_>, pos: i64) -> usize {
        let mut idx = 0usize;
        for i in 0..self.depth as i64 {
            idx = idx * ALPHABET + seq.at(pos + i).index();
        }
        self.rule[idx] as usize
    }

    #[inline]
    pub fn rotation_at(&self, seq: SeqRef<'_>, pos: i64) -> S {
        match &self.perturbation {
            Some(p) => p.rotation_at(seq, pos),
            None => S::zero(),
        }
    }

    /// `g_{σ^pos ω}` as a map.
    pub fn fiber_map_at_ref(&self, seq: SeqRef<'_>, pos: i64) -> CircleMap<S> {
        let g = self.family[self.family_index_at(seq, pos)].clone();
        match &self.perturbation {
            Some(_) => CircleMap::Compose(vec![g, CircleMap::Rotation(self.rotation_at(seq, pos))]),
            None => g,
        }
    }

    /// Lift of `g_{σ^pos ω}` at real `x` and its derivative.
    #[inline]
    pub fn step_lift(&self, seq: SeqRef<'_>, pos: i64, x: S) -> (S, S) {
        let (y, d) = self.family[self.family_index_at(seq, pos)].lift_with_derivative(x);
        (y + self.rotation_at(seq, pos), d)
    }

    /// `g_{σ^pos ω}(x)` on the circle and its derivative.
    #[inline]
    pub fn step(&self, seq: SeqRef<'_>, pos: i64, x: S) -> (S, S) {
        let (y, d) = self.step_lift(seq, pos, x);
        (wrap(y), d)
    }

    /// `g⁻¹_{σ^pos ω}(y)` on the circle and the derivative of `g` at the preimage.
    pub fn step_inverse(&self, seq: SeqRef<'_>, pos: i64, y: S) -> (S, S) {
        let g = &self.family[self.family_index_at(seq, pos)];
        let z = g.invert_lift(y - self.rotation_at(seq, pos));
        (wrap(z), g.deriv(z))
    }

    /// `ḡ_m[σ^pos ω](x)` and the compensated log-derivative sum.
    pub fn cocycle_ref(&self, seq: SeqRef<'_>, pos: i64, x: S, m: i64) -> (S, S) {
        let mut acc = CompensatedSum::new();
        let mut x = x;
        if m >= 0 {
            for i in 0..m {
                let (y, d) = self.step(seq, pos + i, x);
                acc.add(d.ln());
                x = y;
            }
        } else {
            for j in 1..=-m {
                let (z, d) = self.step_inverse(seq, pos - j, x);
                acc.add(-d.ln());
                x = z;
            }
        }
        (x, acc.value())
    }

    /// Lift of the `m`-fold forward composition (no reduction mod 1).
    pub fn composed_lift(&self, seq: SeqRef<'_>, x: S, m: usize) -> (S, S) {
        let mut acc = CompensatedSum::new();
        let mut y = x;
        for i in 0..m as i64 {
            let (ny, d) = self.step_lift(seq, i, y);
            acc.add(d.ln());
            y = ny;
        }
        (y, acc.value())
    }
}

/// A point `(ω, x)` of the skew product.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewPoint<S> {
    pub base: PeriodicSequence,
    pub x: S,
}

impl<S: Scalar> SkewPoint<S> {
    pub fn new(base: PeriodicSequence, x: S) -> Self {
        SkewPoint { base, x }
    }
}

#[derive(Serialize, Deserialize)]
struct SkewPointRepr {
    word: Word,
    offset: usize,
    x: f64,
}

impl<S: Scalar> Serialize for SkewPoint<S> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        SkewPointRepr { word: self.base.word().clone(), offset: self.base.offset(), x: self.x.to_f64_lossy() }
            .serialize(serializer)
    }
}

impl<'de, S: Scalar> Deserialize<'de> for SkewPoint<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = SkewPointRepr::deserialize(deserializer)?;
        if r.offset >= r.word.len() {
            return Err(serde::de::Error::custom("offset outside the period"));
        }
        Ok(SkewPoint { base: PeriodicSequence::new(r.word, r.offset), x: S::lit(r.x) })
    }
}

/// `g_ω` for the base point `ω`.
pub fn fiber_map_at<S: Scalar>(sys: &SkewSystem<S>, omega: &PeriodicSequence) -> CircleMap<S> {
    sys.fiber_map_at_ref(omega.view(), 0)
}

/// `(ḡ_m[ω](x), Σ ln g')`; negative `m` runs the inverse maps backwards.
pub fn cocycle<S: Scalar>(sys: &SkewSystem<S>, omega: &PeriodicSequence, x: S, m: i64) -> (S, S) {
    sys.cocycle_ref(omega.view(), 0, x, m)
}

/// `[p, G(p), …, G^{n−1}(p)]`.
pub fn trajectory<S: Scalar>(sys: &SkewSystem<S>, p: &SkewPoint<S>, n: usize) -> Vec<SkewPoint<S>> {
    let word: Arc<Word> = Arc::clone(p.base.word_arc());
    let view = p.base.view();
    let mut out = Vec::with_capacity(n);
    let mut x = p.x;
    for i in 0..n {
        out.push(SkewPoint::new(PeriodicSequence::from_arc(Arc::clone(&word), p.base.offset() + i), x));
        if i + 1 < n {
            x = sys.step(view, i as i64, x).0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle_maps::{apply, c0_distance};
    use crate::scalar::arc_distance;
    use crate::symbolic_base::shift;
    use proptest::prelude::*;

    fn sys() -> SkewSystem<f64> {
        SkewSystem::from_params(&MapFamilyParams::default()).unwrap()
    }

    fn seq(s: &str) -> PeriodicSequence {
        PeriodicSequence::new(s.parse().unwrap(), 0)
    }

    fn word_strategy() -> impl Strategy<Value = Word> {
        prop::collection::vec(0u8..6, 1..20).prop_map(|v| Word::from_values(&v).unwrap())
    }

    #[test]
    fn fiber_map_lookup() {
        let s = sys();
        assert_eq!(fiber_map_at(&s, &seq("04")), s.family()[0]);
        assert_eq!(fiber_map_at(&s, &seq("55")), CircleMap::Identity);
        assert_eq!(fiber_map_at(&s, &seq("15")), CircleMap::Identity);
        assert_eq!(fiber_map_at(&s, &seq("21")), s.family()[2]);
    }

    #[test]
    fn rule_validation() {
        let f = sys().family().clone();
        assert!(SkewSystem::new(f.clone(), 2, vec![0; 35]).is_err());
        assert!(SkewSystem::new(f.clone(), 2, vec![6; 36]).is_err());
        assert!(SkewSystem::new(f.clone(), 0, vec![]).is_err());
        assert!(SkewSystem::new(f, 1, vec![0, 1, 2, 3, 4, 5]).is_ok());
    }

    #[test]
    fn perturbation_bounded_by_tail() {
        let p = Perturbation::<f64>::new(1e-6, 0.7, 3, DEFAULT_TRUNCATION).unwrap();
        let s = sys().with_perturbation(p.clone());
        let bound = 2e-6 / (1.0 - (-0.7f64).exp2());
        assert!(p.sup_rotation() <= p.tail_bound() + 1e-18);
        assert!(p.tail_bound() <= bound);
        let w = seq("0123401234512");
        let perturbed = fiber_map_at(&s, &w);
        let plain = fiber_map_at(&sys(), &w);
        // The maps differ by a rotation; the exact distance is that angle.
        let rot = s.rotation_at(w.view(), 0);
        assert!(rot.abs() <= bound);
        for i in 0..64 {
            let x = i as f64 / 64.0;
            let d = arc_distance(apply(&perturbed, x).0, apply(&plain, x).0);
            assert!((d - rot.abs()).abs() < 1e-15);
        }
        let d = c0_distance(&perturbed, &plain, 4096, 1.5).unwrap();
        assert!(d <= bound + 2.5 / 8192.0);
    }

    #[test]
    fn perturbation_is_reproducible() {
        let a = Perturbation::<f64>::new(1e-4, 0.7, 9, 10).unwrap();
        let b = Perturbation::<f64>::new(1e-4, 0.7, 9, 10).unwrap();
        let c = Perturbation::<f64>::new(1e-4, 0.7, 10, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(Perturbation::<f64>::new(-1.0, 0.7, 0, 10).is_err());
    }

    #[test]
    fn cocycle_examples() {
        let s = sys();
        assert_eq!(cocycle(&s, &seq("0142"), 0.3, 0), (0.3, 0.0));
        let (x, l) = cocycle(&s, &seq("4"), 0.0, 7);
        assert_eq!(x, 0.0);
        assert!((l - 7.0 * (1.0 - std::f64::consts::TAU * 0.01).ln()).abs() < 1e-13);
        assert!((l - 7.0 * 0.93717f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn trajectory_examples() {
        let s = sys();
        let p = SkewPoint::new(seq("01234"), 0.37);
        assert_eq!(trajectory(&s, &p, 1), vec![p.clone()]);
        let t = trajectory(&s, &p, 9);
        for (i, q) in t.iter().enumerate() {
            assert_eq!(q.base, shift(&p.base, i as i64));
            let (x, _) = cocycle(&s, &p.base, p.x, i as i64);
            assert!(arc_distance(q.x, x) < 1e-15);
        }
    }

    #[test]
    fn skew_point_json() {
        let p = SkewPoint::new(PeriodicSequence::new("014".parse().unwrap(), 2), 0.5_f64);
        let js = serde_json::to_string(&p).unwrap();
        assert_eq!(js, r#"{"word":"014","offset":2,"x":0.5}"#);
        assert_eq!(serde_json::from_str::<SkewPoint<f64>>(&js).unwrap(), p);
    }

    #[test]
    fn generic_over_f32() {
        let s = SkewSystem::<f32>::from_params(&MapFamilyParams::default()).unwrap();
        let (x, l) = cocycle(&s, &seq("4"), 0.0_f32, 3);
        assert_eq!(x, 0.0);
        assert!((l - 3.0 * 0.93717f32.ln()).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn cocycle_inverts(w in word_strategy(), off in 0usize..20, x in 0.0f64..1.0, m in 1i64..30, pert in any::<bool>()) {
            let mut s = sys();
            if pert {
                s = s.with_perturbation(Perturbation::new(1e-4, 0.7, 1, 12).unwrap());
            }
            let base = PeriodicSequence::new(w, off);
            let (y, l1) = cocycle(&s, &base, x, m);
            let (z, l2) = cocycle(&s, &shift(&base, m), y, -m);
            prop_assert!(arc_distance(z, x) < 1e-9);
            prop_assert!((l1 + l2).abs() < 1e-9);
        }

        #[test]
        fn cocycle_additive(w in word_strategy(), x in 0.0f64..1.0, m in 0i64..25, k in 0i64..25) {
            let s = sys();
            let base = PeriodicSequence::new(w, 0);
            let (y, lm) = cocycle(&s, &base, x, m);
            let (z, lk) = cocycle(&s, &shift(&base, m), y, k);
            let (z2, lmk) = cocycle(&s, &base, x, m + k);
            prop_assert!(arc_distance(z, z2) < 1e-12);
            prop_assert!((lm + lk - lmk).abs() < 1e-10);
        }

        #[test]
        fn step_locality(a in word_strategy(), b in word_strategy()) {
            // Same depth-2 window, arbitrary elsewhere: identical maps without perturbation.
            let s = sys();
            let mut wa = a.symbols().to_vec();
            let mut wb = b.symbols().to_vec();
            wa.splice(0..0, [Symbol::new(2).unwrap(), Symbol::new(3).unwrap()]);
            wb.splice(0..0, [Symbol::new(2).unwrap(), Symbol::new(3).unwrap()]);
            let fa = fiber_map_at(&s, &PeriodicSequence::new(Word::new(wa).unwrap(), 0));
            let fb = fiber_map_at(&s, &PeriodicSequence::new(Word::new(wb).unwrap(), 0));
            prop_assert_eq!(fa, fb);
        }
    }
}
