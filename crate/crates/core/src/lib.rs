//! Passive aircraft localization from time differences of arrival.
//!
//! The core pipeline trains expected fingerprints over a grid
//! ([`grid::build_grid`]) and matches measured fingerprints against it
//! ([`knn::localize`]). [`mlat`] provides a closed-form baseline, [`sync`]
//! corrects receiver clocks, [`sim`] generates synthetic traffic and
//! [`verify`] checks claimed positions against estimates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod geo;
pub mod grid;
pub mod knn;
pub mod log;
pub mod mlat;
pub mod sim;
pub mod sync;
pub mod tdoa;
pub mod verify;
