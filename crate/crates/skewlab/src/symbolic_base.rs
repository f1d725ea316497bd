//! Base dynamics: the sequence space over six symbols with its adic gluing,
//! the left shift, a metric, and the solenoid map coded by its itineraries.

use crate::scalar::{wrap, Scalar};
use num_complex::Complex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

/// Number of symbols of the alphabet.
pub const ALPHABET: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("symbol {0} outside 0..=5")]
    BadSymbol(u8),
    #[error("word must contain at least one symbol")]
    EmptyWord,
    #[error("invalid character {0:?} in word")]
    BadChar(char),
    #[error("malformed periodic sequence {0:?}, expected \"(word)@offset\"")]
    BadSequence(String),
    #[error("disk coordinate has modulus {0} > 1")]
    OutsideDisk(f64),
    #[error("depth must be at least 1")]
    ZeroDepth,
}

/// One letter of the alphabet `{0, …, 5}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(transparent)]
pub struct Symbol(u8);

impl Symbol {
    /// The gluing / neutral symbol.
    pub const FIVE: Symbol = Symbol(5);
    pub const ZERO: Symbol = Symbol(0);

    pub fn new(value: u8) -> Result<Self, SymbolicError> {
        if (value as usize) < ALPHABET {
            Ok(Symbol(value))
        } else {
            Err(SymbolicError::BadSymbol(value))
        }
    }

    #[inline]
    pub fn value(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_char(c: char) -> Result<Self, SymbolicError> {
        match c {
            '0'..='5' => Ok(Symbol(c as u8 - b'0')),
            _ => Err(SymbolicError::BadChar(c)),
        }
    }

    #[inline]
    pub fn to_char(self) -> char {
        (b'0' + self.0) as char
    }
}

/// A finite non-empty word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word(Vec<Symbol>);

impl Word {
    pub fn new(symbols: Vec<Symbol>) -> Result<Self, SymbolicError> {
        if symbols.is_empty() {
            return Err(SymbolicError::EmptyWord);
        }
        Ok(Word(symbols))
    }

    pub fn from_values(values: &[u8]) -> Result<Self, SymbolicError> {
        let symbols = values.iter().map(|&v| Symbol::new(v)).collect::<Result<Vec<_>, _>>()?;
        Word::new(symbols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; words are non-empty by construction.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn is_all_fives(&self) -> bool {
        self.0.iter().all(|&s| s == Symbol::FIVE)
    }

    /// View as a periodic sequence read from `offset`.
    pub fn view(&self, offset: usize) -> SeqRef<'_> {
        SeqRef::new(&self.0, offset)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.0.iter().map(|s| s.to_char()).collect();
        f.write_str(&s)
    }
}

impl FromStr for Word {
    type Err = SymbolicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let symbols = s.chars().map(Symbol::from_char).collect::<Result<Vec<_>, _>>()?;
        Word::new(symbols)
    }
}

impl Serialize for Word {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Word {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Borrowed bi-infinite periodic reading of a symbol slice: index `k` reads
/// `symbols[(k + offset) mod P]`.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a> {
    symbols: &'a [Symbol],
    offset: usize,
}

impl<'a> SeqRef<'a> {
    pub fn new(symbols: &'a [Symbol], offset: usize) -> Self {
        assert!(!symbols.is_empty(), "periodic reading of an empty word");
        let offset = offset % symbols.len();
        SeqRef { symbols, offset }
    }

    #[inline]
    pub fn at(&self, k: i64) -> Symbol {
        let p = self.symbols.len() as i64;
        let i = (self.offset as i64 + k).rem_euclid(p);
        self.symbols[i as usize]
    }

    #[inline]
    pub fn period(&self) -> usize {
        self.symbols.len()
    }

    #[inline]
    pub fn offset(&self) -> usize {
        self.offset
    }

    #[inline]
    pub fn symbols(&self) -> &'a [Symbol] {
        self.symbols
    }

    /// The left shift applied `k` times (negative `k` shifts right).
    #[inline]
    pub fn shifted(&self, k: i64) -> SeqRef<'a> {
        let p = self.symbols.len() as i64;
        let offset = (self.offset as i64 + k).rem_euclid(p) as usize;
        SeqRef { symbols: self.symbols, offset }
    }

    /// Exact equality of the two bi-infinite sequences. Two periodic
    /// sequences agreeing on `P_a + P_b` consecutive indices are equal.
    pub fn same_sequence(&self, other: &SeqRef<'_>) -> bool {
        let n = (self.period() + other.period()) as i64;
        (0..n).all(|k| self.at(k) == other.at(k))
    }
}

/// A point of the sequence space given by a period word and a shift offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodicSequence {
    word: Arc<Word>,
    offset: usize,
}

impl PeriodicSequence {
    pub fn new(word: Word, offset: usize) -> Self {
        Self::from_arc(Arc::new(word), offset)
    }

    pub fn from_arc(word: Arc<Word>, offset: usize) -> Self {
        let offset = offset % word.len();
        PeriodicSequence { word, offset }
    }

    pub fn word(&self) -> &Word {
        &self.word
    }

    pub fn word_arc(&self) -> &Arc<Word> {
        &self.word
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn period(&self) -> usize {
        self.word.len()
    }

    #[inline]
    pub fn at(&self, k: i64) -> Symbol {
        self.view().at(k)
    }

    #[inline]
    pub fn view(&self) -> SeqRef<'_> {
        SeqRef::new(self.word.symbols(), self.offset)
    }

    /// Symbols at indices `0..n`.
    pub fn read(&self, n: usize) -> Vec<Symbol> {
        (0..n as i64).map(|k| self.at(k)).collect()
    }
}

impl fmt::Display for PeriodicSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})@{}", self.word, self.offset)
    }
}

impl FromStr for PeriodicSequence {
    type Err = SymbolicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SymbolicError::BadSequence(s.to_string());
        let rest = s.strip_prefix('(').ok_or_else(bad)?;
        let (word, offset) = rest.split_once(")@").ok_or_else(bad)?;
        let word: Word = word.parse()?;
        let offset: usize = offset.parse().map_err(|_| bad())?;
        if offset >= word.len() {
            return Err(bad());
        }
        Ok(PeriodicSequence::new(word, offset))
    }
}

impl Serialize for PeriodicSequence {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PeriodicSequence {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A cylinder: `word` written starting at index `start_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CylinderSpec {
    pub word: Word,
    pub start_index: i64,
}

impl CylinderSpec {
    pub fn new(word: Word, start_index: i64) -> Self {
        CylinderSpec { word, start_index }
    }
}

/// Left shift by `k` positions.
pub fn shift(seq: &PeriodicSequence, k: i64) -> PeriodicSequence {
    let p = seq.period() as i64;
    let offset = (seq.offset as i64 + k).rem_euclid(p) as usize;
    PeriodicSequence { word: Arc::clone(&seq.word), offset }
}

pub fn cylinder_contains(seq: &PeriodicSequence, cyl: &CylinderSpec) -> bool {
    in_cylinder(seq.view(), cyl)
}

pub fn in_cylinder(seq: SeqRef<'_>, cyl: &CylinderSpec) -> bool {
    cyl.word
        .symbols()
        .iter()
        .enumerate()
        .all(|(i, &s)| seq.at(cyl.start_index + i as i64) == s)
}

/// Raw agreement radius: the largest `m ≤ max_depth` with `a(k) = b(k)` for all `|k| < m`.
#[inline]
pub fn raw_agreement<A, B>(a: A, b: B, max_depth: usize) -> usize
where
    A: Fn(i64) -> Symbol,
    B: Fn(i64) -> Symbol,
{
    let mut m = 0usize;
    while m < max_depth {
        let k = m as i64;
        if a(k) != b(k) || a(-k) != b(-k) {
            break;
        }
        m += 1;
    }
    m
}

/// Rewrite of the window `[-(depth-1), depth-1]` of `seq` replacing a
/// right tail `c 5 5 … 5` (running to the window edge) by `(c+1) 0 0 … 0`.
/// Returns `None` when the window has no such tail.
fn carry_rewrite(seq: SeqRef<'_>, depth: usize) -> Option<Vec<Symbol>> {
    if depth == 0 {
        return None;
    }
    let lo = -(depth as i64 - 1);
    let hi = depth as i64 - 1;
    if seq.at(hi) != Symbol::FIVE {
        return None;
    }
    let mut j = hi;
    while j > lo && seq.at(j - 1) == Symbol::FIVE {
        j -= 1;
    }
    if j == lo {
        return None;
    }
    let carried = seq.at(j - 1);
    let mut out: Vec<Symbol> = (lo..=hi).map(|k| seq.at(k)).collect();
    let base = |k: i64| (k - lo) as usize;
    out[base(j - 1)] = Symbol(carried.0 + 1);
    for k in j..=hi {
        out[base(k)] = Symbol::ZERO;
    }
    Some(out)
}

/// Agreement radius of two sequences up to `max_depth`, taken as the best
/// over the identification rewrites of both arguments.
pub fn agreement_radius(a: SeqRef<'_>, b: SeqRef<'_>, max_depth: usize) -> usize {
    let lo = -(max_depth as i64 - 1);
    let raw = raw_agreement(|k| a.at(k), |k| b.at(k), max_depth);
    if raw >= max_depth {
        return raw;
    }
    let ra = carry_rewrite(a, max_depth);
    let rb = carry_rewrite(b, max_depth);
    let mut best = raw;
    let read = |v: &Vec<Symbol>, k: i64| v[(k - lo) as usize];
    if let Some(va) = &ra {
        best = best.max(raw_agreement(|k| read(va, k), |k| b.at(k), max_depth));
        if let Some(vb) = &rb {
            best = best.max(raw_agreement(|k| read(va, k), |k| read(vb, k), max_depth));
        }
    }
    if let Some(vb) = &rb {
        best = best.max(raw_agreement(|k| a.at(k), |k| read(vb, k), max_depth));
    }
    best
}

/// `2^-n` with `n` the (identification-aware) agreement radius capped at
/// `max_depth`; exactly 0 for equal sequences.
pub fn base_distance(a: &PeriodicSequence, b: &PeriodicSequence, max_depth: usize) -> f64 {
    base_distance_ref(a.view(), b.view(), max_depth)
}

pub fn base_distance_ref(a: SeqRef<'_>, b: SeqRef<'_>, max_depth: usize) -> f64 {
    assert!(max_depth >= 1, "max_depth must be at least 1");
    let n = agreement_radius(a, b, max_depth);
    if n >= max_depth && a.same_sequence(&b) {
        return 0.0;
    }
    (-(n as f64)).exp2()
}

/// Smallest agreement radius `n` with `2^-n < eps`.
pub fn depth_for_epsilon(eps: f64) -> usize {
    assert!(eps > 0.0);
    let mut n = 0usize;
    while (-(n as f64)).exp2() >= eps {
        n += 1;
    }
    n
}

/// A point of the solid torus `S¹ × B`: angle `phi` and disk coordinate `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolenoidPoint<S> {
    pub phi: S,
    pub u: Complex<S>,
}

impl<S: Scalar> SolenoidPoint<S> {
    pub fn new(phi: S, u_re: S, u_im: S) -> Self {
        SolenoidPoint { phi, u: Complex::new(u_re, u_im) }
    }
}

#[derive(Serialize, Deserialize)]
struct SolenoidPointRepr {
    phi: f64,
    u_re: f64,
    u_im: f64,
}

impl<S: Scalar> Serialize for SolenoidPoint<S> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        SolenoidPointRepr {
            phi: self.phi.to_f64_lossy(),
            u_re: self.u.re.to_f64_lossy(),
            u_im: self.u.im.to_f64_lossy(),
        }
        .serialize(serializer)
    }
}

impl<'de, S: Scalar> Deserialize<'de> for SolenoidPoint<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = SolenoidPointRepr::deserialize(deserializer)?;
        Ok(SolenoidPoint::new(S::lit(r.phi), S::lit(r.u_re), S::lit(r.u_im)))
    }
}

/// The solenoid map `(φ, u) ↦ (6φ mod 1, ½e^{2πiφ} + u/100)`.
pub fn solenoid_step<S: Scalar>(p: SolenoidPoint<S>) -> Result<SolenoidPoint<S>, SymbolicError> {
    let r = p.u.norm();
    if r > S::one() {
        return Err(SymbolicError::OutsideDisk(r.to_f64_lossy()));
    }
    let angle = S::two_pi() * p.phi;
    let half = S::lit(0.5);
    let u = Complex::new(half * angle.cos(), half * angle.sin()) + p.u / S::lit(100.0);
    Ok(SolenoidPoint { phi: wrap(S::lit(6.0) * p.phi), u })
}

/// Symbol coding the angle: `floor(6φ)`.
#[inline]
fn angle_symbol<S: Scalar>(phi: S) -> Symbol {
    let v = (S::lit(6.0) * wrap(phi)).floor().to_usize().unwrap_or(0).min(ALPHABET - 1);
    Symbol(v as u8)
}

/// First `n` symbols of the itinerary of `p`.
pub fn itinerary<S: Scalar>(p: SolenoidPoint<S>, n: usize) -> Result<Word, SymbolicError> {
    if n == 0 {
        return Err(SymbolicError::ZeroDepth);
    }
    let mut out = Vec::with_capacity(n);
    let mut q = p;
    for i in 0..n {
        out.push(angle_symbol(q.phi));
        if i + 1 < n {
            q = solenoid_step(q)?;
        }
    }
    Word::new(out)
}
