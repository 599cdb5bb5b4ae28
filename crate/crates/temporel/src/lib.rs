#![forbid(unsafe_code)]
//! Evaluation harness for vision-language models on horizon-tagged driving VQA.
//!
//! The crate measures two things a single-pass benchmark hides:
//!
//! - **Response consistency**: the same multiple-choice question is asked
//!   several times with the options shuffled; an item only counts as solved
//!   when every trial lands on the same underlying option. [`protocols`]
//!   runs the trials, [`metrics`] turns aligned answer distributions into
//!   flip rates, total-variation distances, and entropy diagnostics.
//! - **Temporal degradation**: questions are tagged with a horizon Δt (how
//!   many seconds past the last visible frame the queried scene lies).
//!   Accuracy per horizon feeds decay metrics (ΔAcc, mAcc, NDR, mRAR) and
//!   description-based protocols (self-aligned future descriptions,
//!   chain-of-thought future reasoning, pseudo-label distillation).
//!
//! Modules mirror the pipeline: [`corpus`] loads clips and items and owns
//! option shuffling, [`gateway`] talks to models (HTTP or mock) and parses
//! answers, [`visual_prep`] selects frame windows and plans visual token
//! budgets, [`protocols`] composes gateway calls into evaluation protocols,
//! [`metrics`] and [`judge`] score outputs, [`distill`] emits weighted
//! training data, [`harness`] drives resumable runs, and [`report`] renders
//! tables from result logs.

pub mod corpus;
pub mod distill;
pub mod gateway;
pub mod harness;
pub mod judge;
pub mod metrics;
pub mod prompts;
pub mod protocols;
pub mod report;
pub mod visual_prep;
