//! Files and datasets: point formats, meshes, manifests, synthetic data and
//! run configuration.

pub mod config;
pub mod manifest;
pub mod mesh;
pub mod points;
pub mod synth;

pub use config::{Augment, RunConfig, Schedule};
pub use manifest::{Entry, Manifest, Sample};
pub use mesh::{load_off, parse_off, sample_mesh, sample_off_mesh, Mesh};
pub use points::{load_points, normalize_unit_sphere, save_points, Format};
pub use synth::{synth_dataset, SynthKind, SynthOptions};
