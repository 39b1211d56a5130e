//! Test oracles: independent reference implementations used to check the
//! detector's numerics. Nothing here is part of the product — the crate
//! exists so both unit suites and the acceptance suite can share one set
//! of oracles.

pub mod geom;
pub mod gradcheck;
pub mod refmath;

pub use geom::{brute_force_assign, loop_accuracy, loop_mae, loop_mean_iou, nms_reference, raster_iou};
pub use gradcheck::{run_gradient_suite, GradSuiteReport, EPS, INSTANCES, TOLERANCE};
