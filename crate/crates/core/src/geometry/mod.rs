//! Descriptor matching and geometric verification.

mod homography;
mod matching;
mod ransac;

pub use homography::{fit_homography, symmetric_transfer_error, Homography};
pub use matching::{mutual_nearest_neighbors, MatchPair, MatchSet};
pub use ransac::{estimate_homography_ransac, InlierSet, RansacConfig};
