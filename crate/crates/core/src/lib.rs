//! Batch analytics for digital-learning-platform practice logs.
//!
//! The pipeline turns raw per-student transaction logs into:
//!
//! 1. activity bursts and inferred class sessions, classified as classwork,
//!    independent work, or homework ([`sessions`]);
//! 2. per-(student, session) coasting decompositions — delayed start, idle
//!    time, early stop — with adjusted and extra-effort variants
//!    ([`coasting`]);
//! 3. generalizability-theory reliability estimates for the session-level
//!    measures ([`gtheory`]);
//! 4. random-intercept linear mixed models relating coasting and achievement
//!    to student characteristics ([`lmm`]).
//!
//! A seeded synthetic-log simulator with exact ground truth ([`simulate`])
//! serves as the end-to-end oracle for the whole pipeline.

pub mod coasting;
pub mod gtheory;
pub mod ingest;
pub mod keyval;
pub mod lmm;
pub mod model;
pub mod report;
pub mod sessions;
pub mod simulate;
pub mod special;

pub use model::{
    AssessmentRecord, ClassId, EventKind, EventLog, SchoolCalendar, StudentId, StudentProfile,
    TransactionEvent,
};
