//! Change retrieval over 3D point-cloud local maps.
//!
//! A query map is aligned to a viewpoint-invariant coordinate system (ICS),
//! described by bag-of-words quantized local descriptors, localized against a
//! reference database with a naive-Bayes nearest-neighbour rule, and its
//! keypoints ranked by likelihood of change inside 4×4 ICS grid cells.

pub mod error;
pub mod par;

pub mod cloud;
pub mod io;
pub mod kdtree;
pub mod normals;

mod binio;
pub mod change;
pub mod eval;
pub mod fpfh;
pub mod ics;
pub mod registration;
pub mod retrieval;
pub mod synth;
pub mod tdf;
pub mod vocabulary;

pub use cloud::{apply_transform, AxisAlignedBox, Point3, PointCloud, RigidTransform, Vector3};
pub use error::{Error, Result};
