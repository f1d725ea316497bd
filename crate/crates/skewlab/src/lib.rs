//! Numerical laboratory for controlled skew products over the Smale–Williams
//! solenoid: certification of the control conditions, cascades of periodic
//! orbits with fiber exponents tending to zero, and diagnostics of the
//! limiting measure.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circle_maps;
pub mod cli;
pub mod control;
pub mod measure_lab;
pub mod orbit_forge;
pub mod scalar;
pub mod skew_engine;
pub mod symbolic_base;

pub use scalar::Scalar;

/// Double-precision circle map.
pub type CircleMapF64 = circle_maps::CircleMap<f64>;
/// Single-precision circle map.
pub type CircleMapF32 = circle_maps::CircleMap<f32>;
/// Double-precision skew product.
pub type SkewSystemF64 = skew_engine::SkewSystem<f64>;
/// Single-precision skew product.
pub type SkewSystemF32 = skew_engine::SkewSystem<f32>;
/// Double-precision skew-product point.
pub type SkewPointF64 = skew_engine::SkewPoint<f64>;
/// Double-precision solenoid point.
pub type SolenoidPointF64 = symbolic_base::SolenoidPoint<f64>;
