//! Sparse domination by convex bodies and matrix-weighted estimates on
//! finite dyadic grids.

pub mod smallmat;
pub mod dyadic;
pub mod convex;
pub mod weights;
pub mod operators;
pub mod domination;
pub mod estimates;
pub mod cli;
