//! Memory-bounded, deterministic event-stream engine for longitudinal clinical records.
//!
//! Raw CSV tables are joined and externally sorted into a patient-aligned partition cache
//! ([`ingest`]), read lazily per patient or in consecutive-patient batches ([`store`]), turned
//! into task samples in parallel ([`task`]) and encoded by fitted processors ([`processors`])
//! into byte-stable sample shards. [`medcode`] and [`calib`] are standalone.

pub mod bench;
pub mod calib;
pub mod descriptor;
mod error;
pub mod event;
pub mod evp;
pub mod extsort;
pub mod ingest;
pub mod medcode;
pub mod mem;
pub mod processors;
pub mod rss;
pub mod shard;
pub mod store;
pub mod synth;
pub mod task;

pub use error::{Error, Result};
