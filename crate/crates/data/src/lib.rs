//! Dataset layout, synthetic focal stacks, scribble synthesis, checkpoints
//! and evaluation I/O for the `lfsamba` model.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval_io;
pub mod image_io;
pub mod scribble;
pub mod synth;

pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint, Checkpoint};
pub use dataset::{load_sample, read_manifest, write_manifest, ManifestEntry};
pub use error::{DataError, Result};
pub use eval_io::{evaluate_dataset, write_report};
pub use scribble::{scribble_dataset, synth_scribbles};
pub use synth::{synth_dataset, synth_sample, SynthConfig};
