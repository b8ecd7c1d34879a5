//! Template-guided two-stage 3D object detection on synthetic LiDAR scenes.

pub mod assign;
pub mod check;
pub mod class;
pub mod error;
pub mod eval;
pub mod geom;
pub mod losses;
pub mod netcore;
pub mod pipeline;
pub mod pointops;
pub mod templates;

pub use class::ObjectClass;
pub use error::{Error, Result};
pub use geom::{Box3D, RegressionTarget};
pub use pointops::{Point3, PointCloud};
