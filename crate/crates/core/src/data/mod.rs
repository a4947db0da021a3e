//! Dataset profiles, split loading, depth PNG IO and augmentation.

pub mod augment;
pub mod png;
pub mod profile;
pub mod split;
pub mod synthetic;

pub use augment::{augment, cut_depth, AugmentPolicy};
pub use profile::{DatasetProfile, Sizing, PROFILE_NAMES};
pub use split::{load_image, load_split, parse_listing, DepthSample, SplitEntry, SplitLoader};
