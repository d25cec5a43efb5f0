//! Inertia estimation for a rigid spacecraft with a flow-matching-boosted
//! unscented Kalman filter.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: RK4, Cholesky/covariance conditioning, quaternions, seeded RNG.
//! * [`dynamics`]: Euler's rotational equations, quaternion kinematics, torque regimes.
//! * [`sensing`]: sensor models and the reliability-scored training dataset.
//! * [`neuralnet`]: a small dense network engine with manual gradients.
//! * [`lrw`]: learning-to-reweight sample weights from a clean meta set.
//! * [`wfm`]: weighted flow matching over inertia space and its Gaussian summary.
//! * [`filters`]: UKF, EKF and EnKF over the augmented (attitude, rate, log-inertia) state.
//! * [`boosted`]: the UKF with a virtual-sensor correction from the flow summary.

pub mod boosted;
pub mod dynamics;
pub mod error;
pub mod filters;
pub mod lrw;
pub mod neuralnet;
pub mod numerics;
pub mod provenance;
pub mod sensing;
pub mod wfm;

pub use error::{Error, Result};
