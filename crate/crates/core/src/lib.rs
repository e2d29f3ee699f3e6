//! A dynamic multi-trend recommender.
//!
//! Each user's recent interactions locate similar users (an implicit user
//! network built from Pearson correlation of click levels). What those
//! neighbors did next forms a "future" sequence. History and future are
//! both routed into a few trend vectors, weighted by how close each trend
//! sits in time to the moment of prediction, fused, and scored against
//! item embeddings.
//!
//! The crate covers the whole pipeline: log ingestion and splitting
//! ([`interaction`]), neighbor search ([`network`]), the model
//! ([`model`], [`grad`]), training ([`training`]), metrics
//! ([`evaluation`]), a planted-trend data generator ([`synth`]) and
//! persistence ([`config`], [`checkpoint`]).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod grad;
pub mod interaction;
pub mod matrix;
pub mod model;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use interaction::{Interaction, InteractionLog, ItemId, UserId};
