//! Command-line pipeline for classwork practice-log analytics: ingestion,
//! session inference, coasting measures, reliability, mixed models, the
//! synthetic-log generator, and collated reports, all with reproducible
//! file-based outputs.

pub mod config;
pub mod manifest;
pub mod pipeline;
