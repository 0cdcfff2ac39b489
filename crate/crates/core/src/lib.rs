mod error;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use volume::{read_volume, read_volume_as, write_volume, Volume, VolumeKind};
pub mod aggregator;
pub mod checkpoint;
pub mod config;
pub mod isnet;
pub mod losses;
pub mod metrics;
pub mod patching;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod train;
