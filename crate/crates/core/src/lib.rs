//! Workbench for high-order variations, perturbation cones and the
//! presymplectic constraint algorithm on control-affine systems.
//!
//! Module map:
//!
//! * [`expr`]: scalar expressions, parsing and symbolic differentiation
//! * [`scalar`]: `f64` and nested dual numbers behind one trait
//! * [`fields`]: vector fields, Lie brackets, RK4 flows, pushforwards
//! * [`variations`]: variation curves, jets, needle and bracket templates
//! * [`cone`]: finite-generator perturbation cones and support queries
//! * [`ocp`]: control-affine systems, Hamiltonians, biextremals, audits
//! * [`pca`]: the bracket constraint ladder and abnormal covectors
//! * [`mech`]: affine-connection control systems on `TQ`

pub mod cone;
pub mod expr;
pub mod fields;
pub mod linalg;
pub mod mech;
pub mod ocp;
pub mod pca;
pub mod scalar;
pub mod simplex;
pub mod variations;

pub use expr::{parse_expression, EvalEnv, Expr};
pub use fields::{lie_bracket, Covector, Point, TangentVector, VectorField};
pub use scalar::{Dual, Scalar};
