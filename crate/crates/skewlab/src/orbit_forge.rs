//! Periodic orbits of the skew product and the forging step: from an
//! attracting orbit `X` build a longer orbit `Y` that shadows `X` on most of
//! its points, visits prescribed neighborhoods, and has a fiber exponent
//! closer to zero by a fixed factor.

use crate::control::ControlConstants;
use crate::scalar::{arc_distance, wrap};
use crate::skew_engine::{trajectory, SkewPoint, SkewSystem};
use crate::symbolic_base::{
    agreement_radius, base_distance, depth_for_epsilon, in_cylinder, CylinderSpec, SeqRef, Symbol, Word,
};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::sync::Arc;
use thiserror::Error;

/// Residual allowed for a fiber fixed point.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForgeError {
    #[error("orbit is not attracting along the fiber (lambda = {0})")]
    NotAttracting(f64),
    #[error("lambda + ln nu = {margin} does not exceed lemma_D = {lemma_d}")]
    WeakOrbit { margin: f64, lemma_d: f64 },
    #[error("the all-5 word carries no orbit")]
    AllFives,
    #[error("word {0} has no attracting fiber fixed point")]
    NoAttractingFixedPoint(String),
    #[error("neighborhood radius {0} must lie in (0, 1/2)")]
    BadRadius(f64),
    #[error("cylinder {0:?} does not cover index 0")]
    UnsupportedCylinder(CylinderSpec),
    #[error("step rule unsuitable for forging: {0}")]
    UnsupportedRule(String),
    #[error("target arc around {center} (radius {radius}) is not reachable by the rotation lattice")]
    Unreachable { center: f64, radius: f64 },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("no repetition count N <= {max_n} satisfies all conclusions ({last})")]
    Budget { max_n: usize, last: String },
    #[error("stage {stage}: {source}")]
    Stage { stage: usize, source: Box<ForgeError> },
    #[error("stage {stage}: verification failed: {failed}")]
    Verification { stage: usize, failed: String },
}

/// Periodic orbit `(w, x)` with `ḡ_P[(w)](x) = x`. The multiplier is kept as
/// its logarithm because `θ` underflows for long periods.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    word: Arc<Word>,
    fiber_x: f64,
    ln_theta: f64,
}

impl PeriodicOrbit {
    pub fn new(word: Word, fiber_x: f64, ln_theta: f64) -> Self {
        PeriodicOrbit { word: Arc::new(word), fiber_x: wrap(fiber_x), ln_theta }
    }

    /// Builds an orbit from its exponent `λ = ln θ / P`.
    pub fn from_parts(word: Word, fiber_x: f64, lambda: f64) -> Self {
        let p = word.len() as f64;
        Self::new(word, fiber_x, lambda * p)
    }

    pub fn word(&self) -> &Word {
        &self.word
    }

    pub fn word_arc(&self) -> &Arc<Word> {
        &self.word
    }

    pub fn period(&self) -> usize {
        self.word.len()
    }

    pub fn fiber_x(&self) -> f64 {
        self.fiber_x
    }

    pub fn ln_theta(&self) -> f64 {
        self.ln_theta
    }

    pub fn theta(&self) -> f64 {
        self.ln_theta.exp()
    }

    pub fn lambda(&self) -> f64 {
        self.ln_theta / self.period() as f64
    }

    pub fn view(&self) -> SeqRef<'_> {
        self.word.view(0)
    }

    /// Fiber coordinates along one period, starting at `fiber_x`.
    pub fn fibers(&self, sys: &SkewSystem<f64>) -> Vec<f64> {
        let view = self.view();
        let mut out = Vec::with_capacity(self.period());
        let mut x = self.fiber_x;
        for i in 0..self.period() {
            out.push(x);
            x = sys.step(view, i as i64, x).0;
        }
        out
    }

    /// Residual `|ḡ_P(x) − x|` and the recomputed `ln θ`.
    pub fn recheck(&self, sys: &SkewSystem<f64>) -> (f64, f64) {
        let (y, l) = sys.cocycle_ref(self.view(), 0, self.fiber_x, self.period() as i64);
        (arc_distance(y, self.fiber_x), l)
    }
}

#[derive(Serialize, Deserialize)]
struct OrbitRepr {
    word: Word,
    fiber_x: f64,
    theta: f64,
    lambda: f64,
    period: usize,
    #[serde(default)]
    ln_theta: Option<f64>,
}

impl Serialize for PeriodicOrbit {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        OrbitRepr {
            word: (*self.word).clone(),
            fiber_x: self.fiber_x,
            theta: self.theta(),
            lambda: self.lambda(),
            period: self.period(),
            ln_theta: Some(self.ln_theta),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PeriodicOrbit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = OrbitRepr::deserialize(deserializer)?;
        if r.period != r.word.len() {
            return Err(serde::de::Error::custom("period does not match the word length"));
        }
        let ln_theta = r.ln_theta.unwrap_or_else(|| r.theta.ln());
        Ok(PeriodicOrbit::new(r.word, r.fiber_x, ln_theta))
    }
}

/// `λ = ln θ / P`.
pub fn orbit_exponent(orbit: &PeriodicOrbit) -> f64 {
    orbit.lambda()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub x: f64,
    pub ln_theta: f64,
    pub theta: f64,
    pub attracting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet {
    pub points: Vec<FixedPoint>,
    /// Set when the displacement vanishes on a whole grid cell.
    pub degenerate: bool,
}

/// All fixed points of `ḡ_P[(w)]` located by sign changes of the lift
/// displacement on a uniform grid, refined by bisection.
pub fn fiber_fixed_points(sys: &SkewSystem<f64>, word: &Word, grid: usize) -> FixedPointSet {
    let view = word.view(0);
    let p = word.len();
    let disp = |x: f64| sys.composed_lift(view, x, p).0 - x;
    let xs: Vec<f64> = (0..=grid).map(|i| i as f64 / grid as f64).collect();
    let vs: Vec<f64> = xs.iter().map(|&x| disp(x)).collect();
    let lo = vs.iter().copied().fold(f64::INFINITY, f64::min).floor() as i64;
    let hi = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
    let mut roots = Vec::new();
    let mut degenerate = false;
    for k in lo..=hi {
        let kf = k as f64;
        for i in 0..grid {
            let (a, b) = (vs[i] - kf, vs[i + 1] - kf);
            if a.abs() < 1e-12 && b.abs() < 1e-12 {
                degenerate = true;
                continue;
            }
            if a == 0.0 {
                roots.push(xs[i]);
            } else if a * b < 0.0 {
                let (mut l, mut r) = (xs[i], xs[i + 1]);
                let (mut fl, _) = (a, b);
                for _ in 0..200 {
                    let m = 0.5 * (l + r);
                    if m <= l || m >= r {
                        break;
                    }
                    let fm = disp(m) - kf;
                    if (fm < 0.0) == (fl < 0.0) {
                        l = m;
                        fl = fm;
                    } else {
                        r = m;
                    }
                }
                roots.push(if (disp(l) - kf).abs() <= (disp(r) - kf).abs() { l } else { r });
            }
        }
    }
    if degenerate {
        return FixedPointSet { points: Vec::new(), degenerate };
    }
    let mut roots: Vec<f64> = roots.into_iter().map(wrap).collect();
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| arc_distance(*a, *b) < 1e-12);
    if roots.len() > 1 && arc_distance(roots[0], *roots.last().expect("non-empty")) < 1e-12 {
        roots.pop();
    }
    let points = roots
        .into_iter()
        .map(|x| {
            let ln_theta = sys.composed_lift(view, x, p).1;
            FixedPoint { x, ln_theta, theta: ln_theta.exp(), attracting: ln_theta < 0.0 }
        })
        .collect();
    FixedPointSet { points, degenerate }
}

/// The most attracting fiber fixed point of `w`, as an orbit.
pub fn seed_orbit(sys: &SkewSystem<f64>, word: &Word) -> Result<PeriodicOrbit, ForgeError> {
    if word.is_all_fives() {
        return Err(ForgeError::AllFives);
    }
    let set = fiber_fixed_points(sys, word, 1 << 12);
    let best = set
        .points
        .iter()
        .filter(|p| p.attracting)
        .min_by(|a, b| a.ln_theta.total_cmp(&b.ln_theta))
        .ok_or_else(|| ForgeError::NoAttractingFixedPoint(word.to_string()))?;
    Ok(PeriodicOrbit::new(word.clone(), best.x, best.ln_theta))
}

/// Open set `cylinder × arc(center, radius)` of the skew product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub cylinder: CylinderSpec,
    pub center: f64,
    pub radius: f64,
}

impl Neighborhood {
    pub fn new(cylinder: CylinderSpec, center: f64, radius: f64) -> Result<Self, ForgeError> {
        let n = Neighborhood { cylinder, center: wrap(center), radius };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        if !(self.radius > 0.0 && self.radius < 0.5) {
            return Err(ForgeError::BadRadius(self.radius));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, base: SeqRef<'_>, x: f64) -> bool {
        self.contains_with_margin(base, x, 0.0)
    }

    /// Membership with the arc shrunk by `margin` on both sides.
    pub fn contains_with_margin(&self, base: SeqRef<'_>, x: f64, margin: f64) -> bool {
        arc_distance(x, self.center) < self.radius - margin && in_cylinder(base, &self.cylinder)
    }
}

/// Cells `{ω₀…ω_{d−1} = c} × (a/arcs, (a+1)/arcs)` of a depth-`d` partition, as neighborhoods.
/// Depth 0 has no cylinder to name and is treated as depth 1.
pub fn partition_neighborhoods(depth: usize, arcs: usize) -> Vec<Neighborhood> {
    let depth = depth.max(1);
    let cylinders = 6usize.pow(depth as u32);
    let mut out = Vec::with_capacity(cylinders * arcs);
    for c in 0..cylinders {
        let mut digits = vec![0u8; depth];
        let mut v = c;
        for d in digits.iter_mut().rev() {
            *d = (v % 6) as u8;
            v /= 6;
        }
        let w = Word::from_values(&digits).expect("digits below 6");
        for a in 0..arcs {
            out.push(Neighborhood {
                cylinder: CylinderSpec::new(w.clone(), 0),
                center: (a as f64 + 0.5) / arcs as f64,
                radius: 0.5 / arcs as f64,
            });
        }
    }
    out
}

/// `ε`-closeness for `P` steps under the product metric
/// `max(base distance, fiber arc distance)`.
pub fn epsilon_close(sys: &SkewSystem<f64>, y: &SkewPoint<f64>, x: &SkewPoint<f64>, eps: f64, p: usize) -> bool {
    let depth = depth_for_epsilon(eps).max(1);
    let ty = trajectory(sys, y, p);
    let tx = trajectory(sys, x, p);
    ty.iter().zip(&tx).all(|(a, b)| {
        let d = base_distance(&a.base, &b.base, depth).max(arc_distance(a.x, b.x));
        d < eps
    })
}

/// Indices of `Y` carrying a projection to `X`, as half-open intervals, with
/// `π(t) = (t − projection_offset) mod P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    pub epsilon: f64,
    pub x_period: usize,
    pub y_period: usize,
    pub projection_offset: usize,
    pub tilde: Vec<(usize, usize)>,
    pub tilde_count: usize,
    pub kappa: f64,
    pub preimage_counts: Vec<u32>,
    pub neighborhoods: Vec<Neighborhood>,
    /// A position of `Y` inside each neighborhood.
    pub visits: Vec<usize>,
}

impl ShadowReport {
    pub fn projection(&self, t: usize) -> usize {
        (t + self.x_period - self.projection_offset % self.x_period) % self.x_period
    }
}

/// Search parameters of the forge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeOptions {
    /// Aimed ratio `λ'/λ`; must stay below the contraction constant.
    pub target_ratio: f64,
    /// Smallest accepted ratio `λ'/λ`, which keeps later stages short.
    pub min_ratio: f64,
    pub max_n: usize,
    /// Safety margin on the predicted shadowing fraction.
    pub kappa_margin: f64,
    /// Extra repetitions tried when a candidate fails verification.
    pub retries: usize,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions { target_ratio: 0.895, min_ratio: 0.85, max_n: 10_000, kappa_margin: 1e-3, retries: 8 }
    }
}

/// Symbols of the step rule used to steer the fiber.
struct Steering {
    rot: Symbol,
    angle: f64,
    guard: Symbol,
}

fn steering(sys: &SkewSystem<f64>) -> Result<Steering, ForgeError> {
    use crate::circle_maps::CircleMap;
    if sys.depth() != 2 {
        return Err(ForgeError::UnsupportedRule("forging needs a depth-2 step rule".into()));
    }
    let sym = |v: u8| Symbol::new(v).expect("in range");
    let map = |a: u8, b: u8| &sys.family()[sys.rule_for(&[sym(a), sym(b)])];
    let angle = match map(0, 0) {
        CircleMap::Rotation(a) if *a > 0.0 && *a < 0.5 => *a,
        _ => return Err(ForgeError::UnsupportedRule("symbol 0 must act as a rotation".into())),
    };
    if (0..5).any(|b| map(0, b) != map(0, 0)) {
        return Err(ForgeError::UnsupportedRule("rotation must not depend on a non-5 successor".into()));
    }
    if (0..6).any(|b| !map(5, b).is_identity()) {
        return Err(ForgeError::UnsupportedRule("symbol 5 must act as the identity".into()));
    }
    let guard = (1..5)
        .find(|&s| map(s, 5).is_identity())
        .ok_or_else(|| ForgeError::UnsupportedRule("no neutral guard symbol".into()))?;
    Ok(Steering { rot: sym(0), angle, guard: sym(guard) })
}

/// Visit block for one neighborhood: its cylinder word followed by a 5, and
/// the offset of index 0 inside the block.
fn visit_block(n: &Neighborhood) -> Result<(Vec<Symbol>, usize), ForgeError> {
    let len = n.cylinder.word.len() as i64;
    let at = -n.cylinder.start_index;
    if at < 0 || at >= len {
        return Err(ForgeError::UnsupportedCylinder(n.cylinder.clone()));
    }
    let mut block = n.cylinder.word.symbols().to_vec();
    block.push(Symbol::FIVE);
    Ok((block, at as usize))
}

/// Connector layout `prefix · lap · suffix` where the lap is one monotone
/// pass of rotations with visit blocks and neutral padding at lattice points.
struct ConnectorPlan {
    prefix: Vec<Symbol>,
    suffix: Vec<Symbol>,
    /// Symbol that follows the connector (first symbol of `Y`).
    after: Symbol,
    steering: Steering,
    /// Number of rotations in the lap.
    rotations: usize,
    /// Visit blocks per lattice point: (block, offset of index 0, target index).
    blocks: Vec<Vec<(Vec<Symbol>, usize, usize)>>,
    /// Lattice points receiving neutral padding.
    pad_points: Vec<usize>,
}

impl ConnectorPlan {
    fn new(
        sys: &SkewSystem<f64>,
        x: &PeriodicOrbit,
        fibers: &[f64],
        targets: &[Neighborhood],
        copy: usize,
    ) -> Result<Self, ForgeError> {
        let steering = steering(sys)?;
        let w = x.word().symbols();
        let p = w.len();
        let prefix: Vec<Symbol> = (0..copy).map(|i| w[i % p]).collect();
        let suffix: Vec<Symbol> = (0..copy).map(|i| w[(p - copy % p + i) % p]).collect();
        let after = w[0];

        // Fiber at the start of the lap: run the prefix from the block end.
        let mut probe = prefix.clone();
        probe.push(steering.guard);
        let mut xs = x.fiber_x();
        for i in 0..prefix.len() {
            xs = sys.step(SeqRef::new(&probe, 0), i as i64, xs).0;
        }
        // Fiber required at the start of the suffix copy.
        let xe = fibers[(p - copy % p) % p];
        let delta = steering.angle;
        let gap = wrap(xe - xs);
        let mut rotations = (gap / delta).round() as usize;
        let reach = |k: usize, c: f64| arc_distance(xs + k as f64 * delta, c);
        let lap = (1.0 / delta).round() as usize;
        let covers = |rot: usize| {
            targets.iter().all(|t| {
                let k = (wrap(t.center - xs) / delta).round() as usize;
                k <= rot && reach(k, t.center) < t.radius
            })
        };
        if !targets.is_empty() && !covers(rotations) {
            rotations += lap;
        }
        if rotations == 0 {
            rotations = lap;
        }
        let mut blocks = vec![Vec::new(); rotations + 1];
        for (ti, t) in targets.iter().enumerate() {
            let k = (wrap(t.center - xs) / delta).round() as usize;
            if k > rotations || reach(k, t.center) >= t.radius {
                return Err(ForgeError::Unreachable { center: t.center, radius: t.radius });
            }
            let (block, at) = visit_block(t)?;
            blocks[k].push((block, at, ti));
        }
        for b in blocks.iter_mut() {
            // Blocks opening with a non-5 symbol go first so a rotation before them stays a rotation.
            b.sort_by_key(|(blk, _, _)| blk[0] == Symbol::FIVE);
        }
        let mut pad_points: Vec<usize> = (0..12)
            .map(|a| {
                let c = (a as f64 + 0.5) / 12.0;
                ((wrap(c - xs) / delta).round() as usize).min(rotations)
            })
            .collect();
        pad_points.sort_unstable();
        pad_points.dedup();
        Ok(ConnectorPlan { prefix, suffix, after, steering, rotations, blocks, pad_points })
    }

    fn chunk(&self, pad: usize, k: usize) -> usize {
        match self.pad_points.iter().position(|&q| q == k) {
            Some(i) => {
                let m = self.pad_points.len();
                pad / m + usize::from(i < pad % m)
            }
            None => 0,
        }
    }

    /// Symbols emitted at lattice point `k` (excluding the rotation after it).
    fn content(&self, pad: usize, k: usize) -> (usize, bool) {
        let blocks = &self.blocks[k];
        let chunk = self.chunk(pad, k);
        let body: usize = blocks.iter().map(|(b, _, _)| b.len()).sum::<usize>() + chunk;
        let opens_with_five = match blocks.first() {
            Some((b, _, _)) => b[0] == Symbol::FIVE,
            None => chunk > 0,
        };
        let following_five = k == self.rotations && body == 0 && self.after_lap() == Symbol::FIVE;
        let guard = (body > 0 && opens_with_five) || following_five;
        (body + usize::from(guard), guard)
    }

    fn after_lap(&self) -> Symbol {
        self.suffix.first().copied().unwrap_or(self.after)
    }

    fn len(&self, pad: usize) -> usize {
        let lap: usize = (0..=self.rotations).map(|k| self.content(pad, k).0).sum::<usize>() + self.rotations;
        self.prefix.len() + lap + self.suffix.len()
    }

    /// Connector symbols and visit positions relative to the connector start.
    fn build(&self, pad: usize) -> (Vec<Symbol>, Vec<(usize, usize)>) {
        let mut out = Vec::with_capacity(self.len(pad));
        let mut visits = Vec::new();
        out.extend_from_slice(&self.prefix);
        for k in 0..=self.rotations {
            let (_, guard) = self.content(pad, k);
            if guard {
                out.push(self.steering.guard);
            }
            for (block, at, ti) in &self.blocks[k] {
                visits.push((*ti, out.len() + at));
                out.extend_from_slice(block);
            }
            out.extend(std::iter::repeat_n(Symbol::FIVE, self.chunk(pad, k)));
            if k < self.rotations {
                out.push(self.steering.rot);
            }
        }
        out.extend_from_slice(&self.suffix);
        (out, visits)
    }

    /// Smallest padding with `base + len(pad) >= needed`.
    fn pad_for(&self, base: usize, needed: usize) -> usize {
        if base + self.len(0) >= needed {
            return 0;
        }
        let (mut lo, mut hi) = (0usize, needed);
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if base + self.len(mid) >= needed {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Per-position closeness data of `Y` against `X` on `[0, end)`.
struct Closeness {
    /// Maximal runs `[a, b)` of positions failing the product-distance test.
    failures: Vec<(usize, usize)>,
}

impl Closeness {
    fn window_ok(&self, start: usize, len: usize) -> bool {
        // First failure run ending after `start`.
        let i = self.failures.partition_point(|&(_, b)| b <= start);
        match self.failures.get(i) {
            Some(&(a, _)) => a >= start + len,
            None => true,
        }
    }
}

/// Streams the orbit of `Y` over `[0, end)` (continuing periodically) and
/// records positions where `d(G^s(y₀), G^{s mod P}(x₀)) ≥ ε`.
#[allow(clippy::too_many_arguments)]
fn closeness_scan(
    sys: &SkewSystem<f64>,
    x: &PeriodicOrbit,
    xfib: &[f64],
    y: &PeriodicOrbit,
    eps: f64,
    end: usize,
    literal_metric: bool,
    targets: &[Neighborhood],
) -> (Closeness, Vec<Option<usize>>) {
    let depth = depth_for_epsilon(eps).max(1);
    let (xv, yv) = (x.view(), y.view());
    let (p, q) = (x.period(), y.period());
    let w = depth as i64;
    let mismatch = |s: i64| xv.at(s) != yv.at(s);
    let mut window = (-(w - 1)..w - 1).filter(|&j| mismatch(j)).count();
    let mut failures: Vec<(usize, usize)> = Vec::new();
    let mut visits = vec![None; targets.len()];
    let mut fy = y.fiber_x();
    let scan_end = end.max(q);
    for s in 0..scan_end {
        if s > 0 && s % q == 0 {
            fy = y.fiber_x();
        }
        if s < q {
            for (ti, t) in targets.iter().enumerate() {
                if visits[ti].is_none() && t.contains(yv.shifted(s as i64), fy) {
                    visits[ti] = Some(s);
                }
            }
        }
        if s < end {
            let si = s as i64;
            window += usize::from(mismatch(si + w - 1));
            let ok_fiber = arc_distance(fy, xfib[s % p]) < eps;
            let ok = ok_fiber
                && if literal_metric {
                    agreement_radius(yv.shifted(si), xv.shifted(si), depth) >= depth
                } else {
                    window == 0 || agreement_radius(yv.shifted(si), xv.shifted(si), depth) >= depth
                };
            if !ok {
                match failures.last_mut() {
                    Some(last) if last.1 == s => last.1 = s + 1,
                    _ => failures.push((s, s + 1)),
                }
            }
            window -= usize::from(mismatch(si - w + 1));
        }
        fy = sys.step(yv, s as i64, fy).0;
    }
    (Closeness { failures }, visits)
}

/// Shadow extraction: repetition `i`, phase `l` of the `wᴺ` block (position
/// `iP + l`) projects to phase `l` of `X` when its next `P` points stay
/// `ε`-close; the first `M` passing repetitions of every phase are kept, `M`
/// being the minimum over phases.
fn extract_shadow(
    closeness: &Closeness,
    p: usize,
    reps: usize,
) -> (Vec<(usize, usize)>, Vec<u32>, usize) {
    let mut counts = vec![0u32; p];
    for t in 0..reps * p {
        if closeness.window_ok(t, p) {
            counts[t % p] += 1;
        }
    }
    let m = counts.iter().copied().min().unwrap_or(0);
    let mut taken = vec![0u32; p];
    let mut tilde: Vec<(usize, usize)> = Vec::new();
    for t in 0..reps * p {
        let l = t % p;
        if taken[l] < m && closeness.window_ok(t, p) {
            taken[l] += 1;
            match tilde.last_mut() {
                Some(last) if last.1 == t => last.1 = t + 1,
                _ => tilde.push((t, t + 1)),
            }
        }
    }
    (tilde, vec![m; p], m as usize * p)
}

/// Fixed point of `ḡ_{P'}` reached by forward iteration from `start`.
fn attracting_fixed_point(sys: &SkewSystem<f64>, word: &Word, start: f64) -> Option<(f64, f64)> {
    let view = word.view(0);
    let p = word.len() as i64;
    let mut x = start;
    for _ in 0..12 {
        let (y, l) = sys.cocycle_ref(view, 0, x, p);
        if arc_distance(x, y) < 1e-13 && l < 0.0 {
            return Some((x, l));
        }
        x = y;
    }
    None
}

/// One forging step (see the module documentation).
pub fn forge(
    sys: &SkewSystem<f64>,
    x: &PeriodicOrbit,
    targets: &[Neighborhood],
    eps: f64,
    constants: &ControlConstants,
    opts: &ForgeOptions,
) -> Result<(PeriodicOrbit, ShadowReport), ForgeError> {
    let lambda = x.lambda();
    if !(lambda < 0.0) {
        return Err(ForgeError::NotAttracting(lambda));
    }
    let margin = lambda + constants.nu.ln();
    if !(margin > constants.lemma_d) {
        return Err(ForgeError::WeakOrbit { margin, lemma_d: constants.lemma_d });
    }
    if !(eps > 0.0) {
        return Err(ForgeError::BadEpsilon(eps));
    }
    for t in targets {
        t.validate()?;
    }
    let p = x.period();
    let xfib = x.fibers(sys);
    let copy = depth_for_epsilon(eps).max(1) - 1;
    let plan = ConnectorPlan::new(sys, x, &xfib, targets, copy)?;

    // Log-derivative of the connector, started where the block ends.
    let (conn0, _) = plan.build(0);
    let mut probe = conn0.clone();
    probe.push(plan.after);
    let conn_log = sys.cocycle_ref(SeqRef::new(&probe, 0), 0, x.fiber_x(), conn0.len() as i64).1;

    let kappa_req = constants.kappa_bound(lambda);
    let c = constants.contraction_c;
    let target = opts.target_ratio.min(c - 1e-6);
    let ln_nu = constants.nu.ln();
    let mut last = String::from("no candidate examined");
    let mut n = 2usize;
    let mut failures_left = opts.retries + 1;
    while n <= opts.max_n {
        let s = n as f64 * x.ln_theta() + conn_log;
        if !(s < 0.0) {
            n += 1;
            continue;
        }
        let needed = (s.abs() / (target * lambda.abs())).ceil() as usize;
        let pad = plan.pad_for(n * p, needed);
        let total = n * p + plan.len(pad);
        let lam_new = s / total as f64;
        let ratio = lam_new / lambda;
        let kappa_pred = ((n - 1) * p) as f64 / total as f64;
        let predicted_ok = ratio < c
            && ratio >= opts.min_ratio
            && total > 2 * p
            && lam_new + ln_nu > constants.lemma_d
            && kappa_pred >= kappa_req + opts.kappa_margin;
        if !predicted_ok {
            n += 1;
            continue;
        }
        match realize(sys, x, &xfib, targets, eps, &plan, n, pad) {
            Ok((y, report)) => {
                let v = verify_forge(sys, x, &y, &report, constants);
                if v.pass {
                    return Ok((y, report));
                }
                last = v.failed().join(", ");
            }
            Err(msg) => last = msg,
        }
        failures_left -= 1;
        if failures_left == 0 {
            break;
        }
        n += 1;
    }
    Err(ForgeError::Budget { max_n: opts.max_n, last })
}

#[allow(clippy::too_many_arguments)]
fn realize(
    sys: &SkewSystem<f64>,
    x: &PeriodicOrbit,
    xfib: &[f64],
    targets: &[Neighborhood],
    eps: f64,
    plan: &ConnectorPlan,
    n: usize,
    pad: usize,
) -> Result<(PeriodicOrbit, ShadowReport), String> {
    let p = x.period();
    let (conn, _) = plan.build(pad);
    let mut symbols = Vec::with_capacity(n * p + conn.len());
    for _ in 0..n {
        symbols.extend_from_slice(x.word().symbols());
    }
    symbols.extend_from_slice(&conn);
    let word = Word::new(symbols).map_err(|e| e.to_string())?;
    let (fx, ln_theta) =
        attracting_fixed_point(sys, &word, x.fiber_x()).ok_or_else(|| "fixed point iteration did not settle".to_string())?;
    let y = PeriodicOrbit::new(word, fx, ln_theta);
    let end = (n + 1) * p - 1;
    let (closeness, visits) = closeness_scan(sys, x, xfib, &y, eps, end, false, targets);
    let (tilde, counts, count) = extract_shadow(&closeness, p, n);
    let visits: Option<Vec<usize>> = visits.into_iter().collect();
    let visits = visits.ok_or_else(|| "a neighborhood was not visited".to_string())?;
    let report = ShadowReport {
        epsilon: eps,
        x_period: p,
        y_period: y.period(),
        projection_offset: 0,
        tilde,
        tilde_count: count,
        kappa: count as f64 / y.period() as f64,
        preimage_counts: counts,
        neighborhoods: targets.to_vec(),
        visits,
    };
    Ok((y, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failed(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect()
    }

    pub fn margin(&self, name: &str) -> Option<f64> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.margin)
    }
}

/// Re-derives every conclusion of the forging step from the words alone:
/// fixed points and exponents via the cocycle, period growth, exponent
/// contraction and weakness, visits, equal preimage counts, the shadowing
/// fraction, and `ε`-closeness of every projected point for `P` steps.
pub fn verify_forge(
    sys: &SkewSystem<f64>,
    x: &PeriodicOrbit,
    y: &PeriodicOrbit,
    report: &ShadowReport,
    constants: &ControlConstants,
) -> VerifyReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, margin: f64| {
        checks.push(CheckResult { name: name.to_string(), pass, margin })
    };
    let (p, q) = (x.period(), y.period());
    for (name, orbit) in [("x_orbit", x), ("y_orbit", y)] {
        let (res, ln_theta) = orbit.recheck(sys);
        push(&format!("{name}_fixed_point"), res < FIXED_POINT_TOLERANCE, FIXED_POINT_TOLERANCE - res);
        let tol = 1e-9 * ln_theta.abs().max(1.0);
        let diff = (ln_theta - orbit.ln_theta()).abs();
        push(&format!("{name}_multiplier"), diff <= tol && ln_theta < 0.0, tol - diff);
    }
    let (lx, ly) = (x.lambda(), y.lambda());
    push("report_shape", report.x_period == p && report.y_period == q && report.preimage_counts.len() == p, 0.0);
    push("period_growth", q > 2 * p, q as f64 - 2.0 * p as f64);
    push("lambda_negative", ly < 0.0, -ly);
    let contraction = constants.contraction_c * lx.abs() - ly.abs();
    push("contraction", contraction > 0.0, contraction);
    let weak = ly + constants.nu.ln() - constants.lemma_d;
    push("weak_orbit", weak > 0.0, weak);

    // Recount Ỹ and the preimages from the stored intervals.
    let mut sorted = true;
    let mut count = 0usize;
    let mut recount = vec![0u32; p];
    let mut prev_end = 0usize;
    for &(a, b) in &report.tilde {
        if a < prev_end || b <= a || b > q {
            sorted = false;
            break;
        }
        prev_end = b;
        count += b - a;
        if b - a >= p {
            let full = ((b - a) / p) as u32;
            for c in recount.iter_mut() {
                *c += full;
            }
            for t in a + full as usize * p..b {
                recount[report.projection(t)] += 1;
            }
        } else {
            for t in a..b {
                recount[report.projection(t)] += 1;
            }
        }
    }
    let counts_equal = sorted
        && recount == report.preimage_counts
        && report.preimage_counts.windows(2).all(|w| w[0] == w[1]);
    push("preimage_counts_equal", counts_equal, 0.0);
    let kappa = count as f64 / q as f64;
    let kappa_req = constants.kappa_bound(lx);
    let kappa_ok = sorted && count == report.tilde_count && (kappa - report.kappa).abs() < 1e-12;
    push("kappa_consistent", kappa_ok, 0.0);
    push("kappa_bound", kappa >= kappa_req, kappa - kappa_req);

    // Closeness of every projected point along P steps, with the literal metric.
    let xfib = x.fibers(sys);
    let end = report.tilde.last().map_or(0, |&(_, b)| b + p - 1);
    let aligned = report.projection_offset.is_multiple_of(p.max(1));
    let (closeness, visits) =
        closeness_scan(sys, x, &xfib, y, report.epsilon, end, true, &report.neighborhoods);
    let close = aligned
        && report.tilde.iter().all(|&(a, b)| closeness.window_ok(a, b - a + p - 1));
    push("epsilon_closeness", close, 0.0);
    let visited = visits.iter().all(Option::is_some);
    push("visits", visited && visits.len() == report.neighborhoods.len(), 0.0);

    let pass = checks.iter().all(|c| c.pass);
    VerifyReport { checks, pass }
}

/// One cascade stage: the orbit, and for forged stages the shadow report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub stage: usize,
    pub orbit: PeriodicOrbit,
    pub neighborhoods: Vec<Neighborhood>,
    pub report: Option<ShadowReport>,
    pub verification: Option<VerifyReport>,
}

/// Margin by which the seed must lie inside a cell for the cell to count as met;
/// boundary points would otherwise be claimed by two cells through rounding.
pub const SCHEDULE_MARGIN: f64 = 1e-9;

/// Distributes cells over the stages: cells the seed meets robustly go to
/// stage 1, the rest are split evenly over stages `2..=stages`.
pub fn schedule_neighborhoods(
    sys: &SkewSystem<f64>,
    seed: &PeriodicOrbit,
    cells: &[Neighborhood],
    stages: usize,
) -> Vec<Vec<Neighborhood>> {
    let mut schedule = vec![Vec::new(); stages.max(1)];
    let fibers = seed.fibers(sys);
    let view = seed.view();
    let (met, rest): (Vec<_>, Vec<_>) = cells.iter().cloned().partition(|c| {
        fibers.iter().enumerate().any(|(i, &f)| c.contains_with_margin(view.shifted(i as i64), f, SCHEDULE_MARGIN))
    });
    schedule[0] = met;
    let slots = stages.saturating_sub(1);
    if slots == 0 {
        schedule[0].extend(rest);
        return schedule;
    }
    let per = rest.len() / slots;
    let extra = rest.len() % slots;
    let mut it = rest.into_iter();
    for (i, slot) in schedule.iter_mut().skip(1).enumerate() {
        let take = per + usize::from(i < extra);
        slot.extend(it.by_ref().take(take));
    }
    schedule
}

/// `X₁ = seed`, `X_{i+1} = forge(X_i, U_{i+1}, ε₀·2^{−i})`, each step verified.
pub fn cascade(
    sys: &SkewSystem<f64>,
    seed: PeriodicOrbit,
    schedule: &[Vec<Neighborhood>],
    stages: usize,
    eps0: f64,
    constants: &ControlConstants,
    opts: &ForgeOptions,
) -> Result<Vec<CascadeStage>, ForgeError> {
    let mut out = Vec::with_capacity(stages);
    out.push(CascadeStage {
        stage: 1,
        orbit: seed,
        neighborhoods: schedule.first().cloned().unwrap_or_default(),
        report: None,
        verification: None,
    });
    for i in 1..stages {
        let prev = &out[i - 1].orbit;
        let targets = schedule.get(i).cloned().unwrap_or_default();
        let eps = eps0 * (-(i as f64)).exp2();
        let (y, report) = forge(sys, prev, &targets, eps, constants, opts)
            .map_err(|e| ForgeError::Stage { stage: i + 1, source: Box::new(e) })?;
        let v = verify_forge(sys, prev, &y, &report, constants);
        if !v.pass {
            return Err(ForgeError::Verification { stage: i + 1, failed: v.failed().join(", ") });
        }
        out.push(CascadeStage {
            stage: i + 1,
            orbit: y,
            neighborhoods: targets,
            report: Some(report),
            verification: Some(v),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle_maps::MapFamilyParams;
    use crate::symbolic_base::PeriodicSequence;
    use std::f64::consts::TAU;

    fn sys() -> SkewSystem<f64> {
        SkewSystem::from_params(&MapFamilyParams::default()).unwrap()
    }

    fn word(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn seed() -> PeriodicOrbit {
        seed_orbit(&sys(), &word("4")).unwrap()
    }

    fn cell(symbol: &str, center: f64, radius: f64) -> Neighborhood {
        Neighborhood::new(CylinderSpec::new(word(symbol), 0), center, radius).unwrap()
    }

    #[test]
    fn fixed_points_of_identity_are_degenerate() {
        let r = fiber_fixed_points(&sys(), &word("5"), 1 << 12);
        assert!(r.degenerate);
    }

    #[test]
    fn fixed_points_of_morse_smale_map() {
        let r = fiber_fixed_points(&sys(), &word("4"), 1 << 12);
        assert!(!r.degenerate);
        assert_eq!(r.points.len(), 2);
        let a = &r.points[0];
        assert_eq!(a.x, 0.0);
        assert!(a.attracting && (a.theta - (1.0 - TAU * 0.01)).abs() < 1e-14);
        let b = &r.points[1];
        assert!((b.x - 0.5).abs() < 1e-12 && !b.attracting);
    }

    #[test]
    fn fixed_points_alternate() {
        for w in ["40", "14", "2314", "4401", "123"] {
            let r = fiber_fixed_points(&sys(), &word(w), 1 << 12);
            assert_eq!(r.points.len() % 2, 0, "{w}");
            for pair in r.points.windows(2) {
                assert_ne!(pair[0].attracting, pair[1].attracting, "{w}");
            }
            let fine = fiber_fixed_points(&sys(), &word(w), 1 << 13);
            assert_eq!(fine.points.len(), r.points.len());
            for (a, b) in r.points.iter().zip(&fine.points) {
                assert!(arc_distance(a.x, b.x) < 2.0 / 4096.0);
            }
        }
    }

    #[test]
    fn orbit_exponent_examples() {
        let o = PeriodicOrbit::new(word("4"), 0.0, -1.0);
        assert_eq!(orbit_exponent(&o), -1.0);
        let s = seed();
        assert!((orbit_exponent(&s) + 0.06489).abs() < 1e-5);
        let doubled = PeriodicOrbit::new(word("44"), 0.0, 2.0 * s.ln_theta());
        assert!((orbit_exponent(&doubled) - orbit_exponent(&s)).abs() < 1e-15);
    }

    #[test]
    fn orbit_json_round_trip() {
        let s = seed();
        let js = serde_json::to_value(&s).unwrap();
        assert_eq!(js["word"], "4");
        assert_eq!(js["period"], 1);
        assert!((js["theta"].as_f64().unwrap() - 0.93717).abs() < 1e-5);
        let back: PeriodicOrbit = serde_json::from_value(js).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn epsilon_close_examples() {
        let s = sys();
        let base = PeriodicSequence::new(word("0123401234"), 0);
        let p = SkewPoint::new(base.clone(), 0.3);
        assert!(epsilon_close(&s, &p, &p, 1e-3, 10));
        // Fibers start ε/2 apart under repeated expansion near a repeller of g1.
        let exp = PeriodicSequence::new(word("1"), 0);
        let a = SkewPoint::new(exp.clone(), 0.0);
        let b = SkewPoint::new(exp, 0.005);
        assert!(epsilon_close(&s, &a, &b, 0.01, 1));
        assert!(!epsilon_close(&s, &a, &b, 0.01, 20));
        // Same long base word, same fiber.
        let long = PeriodicSequence::new(word("01234012340123401234"), 0);
        let c = SkewPoint::new(long.clone(), 0.7);
        let d = SkewPoint::new(long, 0.7);
        assert!(epsilon_close(&s, &c, &d, 0.1, 3));
    }

    #[test]
    fn forge_from_seed() {
        let s = sys();
        let x = seed();
        let u = cell("0", 0.5, 0.1);
        let c = ControlConstants::default();
        let (y, report) = forge(&s, &x, std::slice::from_ref(&u), 0.01, &c, &ForgeOptions::default()).unwrap();
        assert!(y.period() >= 3);
        assert!(y.lambda() < 0.0 && y.lambda() > -0.0584);
        assert!(report.kappa >= 1.0 - 3.0 * 0.06489 / 1.5f64.ln());
        let v = verify_forge(&s, &x, &y, &report, &c);
        assert!(v.pass, "{:?}", v.failed());

        // Tampered preimage counts.
        let mut bad = report.clone();
        bad.preimage_counts[0] += 1;
        assert!(!verify_forge(&s, &x, &y, &bad, &c).pass);

        // A word that avoids U's cylinder.
        let avoid: Vec<Symbol> = y.word().symbols().iter().map(|&s| if s == Symbol::ZERO { Symbol::new(4).unwrap() } else { s }).collect();
        let z = PeriodicOrbit::new(Word::new(avoid).unwrap(), y.fiber_x(), y.ln_theta());
        let v = verify_forge(&s, &x, &z, &report, &c);
        assert!(!v.pass && v.failed().contains(&"visits".to_string()));
    }

    #[test]
    fn forge_projection_is_literally_close_on_samples() {
        let s = sys();
        let x = seed();
        let c = ControlConstants::default();
        let u = cell("2", 0.3, 0.05);
        let (y, report) = forge(&s, &x, &[u], 0.01, &c, &ForgeOptions::default()).unwrap();
        let (_, b) = report.tilde[0];
        for t in [0, b / 3, b - 1] {
            let py = SkewPoint::new(PeriodicSequence::from_arc(Arc::clone(y.word_arc()), t), y.fibers(&s)[t]);
            let l = report.projection(t);
            let px = SkewPoint::new(PeriodicSequence::from_arc(Arc::clone(x.word_arc()), l), x.fibers(&s)[l]);
            assert!(epsilon_close(&s, &py, &px, report.epsilon, x.period()));
        }
    }

    #[test]
    fn forge_rejects_bad_inputs() {
        let s = sys();
        let c = ControlConstants::default();
        let o = ForgeOptions::default();
        let weak = PeriodicOrbit::new(word("4"), 0.0, -0.2);
        assert!(matches!(forge(&s, &weak, &[], 0.01, &c, &o), Err(ForgeError::WeakOrbit { .. })));
        let rep = PeriodicOrbit::new(word("4"), 0.5, 0.06);
        assert!(matches!(forge(&s, &rep, &[], 0.01, &c, &o), Err(ForgeError::NotAttracting(_))));
        assert!(Neighborhood::new(CylinderSpec::new(word("0"), 0), 0.2, 0.6).is_err());
    }

    #[test]
    fn kappa_bound_formula() {
        let c = ControlConstants::default();
        assert!((c.kappa_bound(-0.01) - 0.926).abs() < 1e-3);
    }

    #[test]
    fn partition_and_schedule() {
        let cells = partition_neighborhoods(1, 12);
        assert_eq!(cells.len(), 72);
        let sched = schedule_neighborhoods(&sys(), &seed(), &cells, 8);
        assert_eq!(sched.len(), 8);
        assert_eq!(sched.iter().map(Vec::len).sum::<usize>(), 72);
        // The seed fiber x = 0 lies on an arc boundary, so no cell is met robustly.
        assert!(sched[0].is_empty());
        assert_eq!(sched[1].len(), 11);
        assert_eq!(sched[7].len(), 10);
    }

    #[test]
    fn short_cascade() {
        let s = sys();
        let cells = partition_neighborhoods(1, 4);
        let sched = schedule_neighborhoods(&s, &seed(), &cells, 3);
        let c = ControlConstants::default();
        let stages = cascade(&s, seed(), &sched, 3, 0.02, &c, &ForgeOptions::default()).unwrap();
        assert_eq!(stages.len(), 3);
        for pair in stages.windows(2) {
            let (a, b) = (&pair[0].orbit, &pair[1].orbit);
            assert!(b.period() > 2 * a.period());
            assert!(b.lambda().abs() < 0.9 * a.lambda().abs());
        }
        let one = cascade(&s, seed(), &sched, 1, 0.02, &c, &ForgeOptions::default()).unwrap();
        assert_eq!(one.len(), 1);
    }
}
