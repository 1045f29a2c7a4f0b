//! Persistence statistics from repeated LiDAR traversals.
//!
//! Driving the same road many times makes it possible to tell persistent
//! structure from ephemeral objects without labels: a point whose
//! neighborhood is populated in every traversal is background, a point
//! seen in only one of them is probably a parked car or a pedestrian. This
//! crate implements that statistic (the P2-score: normalized entropy of a
//! point's neighbor-count distribution across traversals) together with
//! everything needed to compute and use it at scale:
//!
//! - [`geom`]: poses, clouds, traversals and rigid transforms,
//! - [`ingest`]: dataset manifests, the `PCB1`/pose file formats and
//!   per-location dense-cloud accumulation,
//! - [`spatial`]: the fixed-radius neighbor-count index plus its
//!   brute-force oracle,
//! - [`p2`]: the score itself and whole-scan scoring over a route,
//! - [`squash`]: voxel-quantized per-traversal feature stores, aggregated
//!   across traversals and queryable by point,
//! - [`align`]: an MLP head regressing scores from stored features, with
//!   hand-rolled, finite-difference-checked gradients,
//! - [`labels`]: oriented boxes and the score-percentile filter for
//!   pseudo-labels,
//! - [`sim`]: a synthetic traversal generator with ground truth, used as
//!   the end-to-end oracle for all of the above.

pub mod align;
pub mod geom;
pub mod ingest;
pub mod labels;
pub mod p2;
pub mod sim;
pub mod spatial;
pub mod squash;

pub use geom::{DenseCloud, Frame, Point3, PointCloud, Pose, Quaternion, Traversal};
