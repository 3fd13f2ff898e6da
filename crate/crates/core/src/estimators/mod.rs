//! Classical pilot-based estimators and the angle-delay transform.

pub mod covariance;
pub mod lmmse;
pub mod ls;
pub mod transform;

pub use covariance::{empirical_covariance, read_covariance, write_covariance, ChannelCovariance};
pub use lmmse::{lmmse_estimate, LmmseFilter};
pub use ls::{interpolate, ls_estimate, ls_interpolated, LsEstimate};
pub use transform::{from_angle_delay, to_angle_delay, AngleDelay, TransformAxes};
