//! Inductive vertebra segmentation.
//!
//! A spine is segmented one vertebra at a time. A detector proposes candidate
//! masks, the three most confident consecutive ones become seeds, and from
//! there a point predictor guesses where the next vertebra sits, a promptable
//! segmenter outlines it, and a classifier decides whether the walk should go
//! on. Spine-end vertebrae (C2, S1) anchor the anatomical labels.
//!
//! All models sit behind the traits in [`backends`], so the same pipeline runs
//! on ground-truth oracles ([`phantom`]), a trained MLP point predictor, or an
//! external process speaking the [`extproto`] line protocol.

pub mod anatomy;
pub mod backends;
pub mod cli;
pub mod dataio;
pub mod eval;
pub mod extproto;
pub mod geometry;
pub mod phantom;
pub mod pipeline;
