use nalgebra::{allocator::Allocator, DefaultAllocator, Dim, OVector};

use crate::error::{Error, Result};

/// One classical fourth-order Runge–Kutta step of `dx/dt = f(t, x)`.
///
/// Fails with [`Error::Divergence`] (carrying `t`) if the result is not finite.
pub fn rk4_step<D, F>(f: F, x: &OVector<f64, D>, t: f64, dt: f64) -> Result<OVector<f64, D>>
where
    D: Dim,
    DefaultAllocator: Allocator<D>,
    F: Fn(f64, &OVector<f64, D>) -> OVector<f64, D>,
{
    debug_assert!(dt > 0.0, "rk4 step size must be positive");
    let half = 0.5 * dt;
    let k1 = f(t, x);
    let k2 = f(t + half, &(x + &k1 * half));
    let k3 = f(t + half, &(x + &k2 * half));
    let k4 = f(t + dt, &(x + &k3 * dt));
    let out = x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Divergence { t })
    }
}
