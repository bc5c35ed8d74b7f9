//! Event-based facial action unit analysis.
//!
//! The crate covers the full pipeline: event stream decoding and fixed-window
//! frame aggregation, identity/AU morphable model construction and two-step
//! landmark fitting, a spatio-temporal transformer with shifted patch
//! tokenization and locality self-attention, multi-task training, and a
//! synthetic-data oracle that gives every stage a known ground truth.
//!
//! A quick taste, aggregating a stream into 33 ms frames:
//!
//! ```
//! use evmorph::event::{aggregate_periodic, Event, EventStream, Polarity, CellState};
//!
//! let events = vec![Event { t: 40_000, x: 2, y: 3, p: Polarity::On }];
//! let stream = EventStream::new(8, 8, events).unwrap();
//! let frames = aggregate_periodic(&stream, 33_000).unwrap();
//! assert_eq!(frames.len(), 2);
//! assert_eq!(frames[1].get(2, 3), CellState::On);
//! ```

pub mod autodiff;
pub mod error;
pub mod event;
pub mod face3d;
pub mod fitting;
pub mod pipeline;
pub mod stvit;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
