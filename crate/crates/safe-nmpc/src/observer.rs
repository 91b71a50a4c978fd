//! Output-feedback state estimation.
//!
//! The estimator integrates `x̂̇ = f(x̂, u) + E w^b + L (y − C x̂)` with the
//! measurement held constant over each step (zero-order hold — a sampled
//! simulator has no continuous output signal to feed the observer).

use nalgebra::{DMatrix, DVector};

use crate::model::{rk4_ode, SystemModel};
use crate::{Error, Result};

/// Estimator state: the current estimate and the (fixed) injection gain.
#[derive(Debug, Clone)]
pub struct ObserverState {
    pub xhat: DVector<f64>,
    pub l_gain: DMatrix<f64>,
}

impl ObserverState {
    pub fn new(xhat: DVector<f64>, l_gain: DMatrix<f64>, model: &SystemModel) -> Result<Self> {
        if xhat.len() != model.n_x || l_gain.nrows() != model.n_x || l_gain.ncols() != model.n_y {
            return Err(Error::Config(format!(
                "observer dimensions ({}, {}×{}) do not match model ({}, {}×{})",
                xhat.len(),
                l_gain.nrows(),
                l_gain.ncols(),
                model.n_x,
                model.n_x,
                model.n_y
            )));
        }
        Ok(ObserverState { xhat, l_gain })
    }

    /// Advance the estimate by one step; see [`observer_step`].
    pub fn step(&mut self, model: &SystemModel, u: &DVector<f64>, y: &DVector<f64>, dt: f64) -> Result<()> {
        self.xhat = observer_step(model, &self.l_gain, &self.xhat, u, y, dt)?;
        Ok(())
    }
}

/// One RK4 step of the injection dynamics
/// `x̂̇ = f(x̂, u) + E w^b + L (y − C x̂)` with `u` and `y` held constant.
pub fn observer_step(
    model: &SystemModel,
    l_gain: &DMatrix<f64>,
    xhat: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if dt <= 0.0 {
        return Err(Error::Config("observer_step requires dt > 0".into()));
    }
    if y.len() != model.n_y {
        return Err(Error::Config(format!(
            "measurement dim {} does not match model n_y = {}",
            y.len(),
            model.n_y
        )));
    }
    let bias = &model.e_mat * &model.w_bias;
    let next = rk4_ode(
        |_t, x| {
            (model.f)(x, u) + &bias + l_gain * (y - &model.c_mat * x)
        },
        0.0,
        xhat,
        dt,
        1,
    );
    if let Some(i) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite estimate component {i} after observer step"
        )));
    }
    Ok(next)
}
