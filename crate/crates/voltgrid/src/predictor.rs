//! Horizon prediction on top of the impulse-response model.
//!
//! The model gives today's output deviation as a truncated convolution of
//! past input and disturbance deviations. This module keeps that past in a
//! ring buffer, lumps everything the model cannot explain into a constant
//! offset estimate, and linearizes the next N samples as `Y = G U + F`
//! where U stacks the next Nu moves (the input is held after move Nu).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sysid::ImpulseResponseModel;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn dim_err(what: impl Into<String>) -> PredictorError {
    PredictorError::Dimension(what.into())
}

/// The last M applied input deviations and measured disturbance deviations,
/// newest first. Starts at zero: the plant is assumed to sit at the
/// identification steady state, and any initial mismatch is absorbed by the
/// offset estimate.
#[derive(Debug, Clone)]
pub struct History {
    m: usize,
    nu: usize,
    nd: usize,
    u: VecDeque<Vec<f64>>,
    d: VecDeque<Vec<f64>>,
}

impl History {
    pub fn zeros(m: usize, nu: usize, nd: usize) -> History {
        History {
            m,
            nu,
            nd,
            u: std::iter::repeat_with(|| vec![0.0; nu]).take(m).collect(),
            d: std::iter::repeat_with(|| vec![0.0; nd]).take(m).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Input deviation applied `i` samples ago, `1 ..= m`.
    pub fn u_past(&self, i: usize) -> &[f64] {
        &self.u[i - 1]
    }

    /// Disturbance deviation measured `i` samples ago, `1 ..= m`.
    pub fn d_past(&self, i: usize) -> &[f64] {
        &self.d[i - 1]
    }

    /// Shifts the buffers by one sample: the given vectors become the
    /// newest entries, the oldest fall off.
    pub fn advance(&mut self, u_applied: &[f64], d_measured: &[f64]) -> Result<(), PredictorError> {
        if u_applied.len() != self.nu || d_measured.len() != self.nd {
            return Err(dim_err(format!(
                "history advance got {}x{}, expected {}x{}",
                u_applied.len(),
                d_measured.len(),
                self.nu,
                self.nd
            )));
        }
        self.u.pop_back();
        self.d.pop_back();
        self.u.push_front(u_applied.to_vec());
        self.d.push_front(d_measured.to_vec());
        Ok(())
    }
}

fn check_model_history(model: &ImpulseResponseModel, history: &History) -> Result<(), PredictorError> {
    if history.m != model.m || history.nu != model.nu() || history.nd != model.nd() {
        return Err(dim_err(format!(
            "history {}x{}x{} vs model {}x{}x{}",
            history.m,
            history.nu,
            history.nd,
            model.m,
            model.nu(),
            model.nd()
        )));
    }
    Ok(())
}

/// What the model explains of the current measurement, subtracted from it:
/// the lumped unknown-disturbance offset, assumed constant from here on.
pub fn estimate_delta(
    model: &ImpulseResponseModel,
    history: &History,
    y_meas: &[f64],
) -> Result<DVector<f64>, PredictorError> {
    check_model_history(model, history)?;
    let ny = model.ny();
    if y_meas.len() != ny {
        return Err(dim_err(format!("y has {} entries, model {ny}", y_meas.len())));
    }
    let mut delta = DVector::from_column_slice(y_meas);
    for i in 1..=model.m {
        let g = &model.g[i - 1];
        let u = history.u_past(i);
        let gm = &model.gamma[i - 1];
        let d = history.d_past(i);
        for r in 0..ny {
            let mut acc = 0.0;
            for (c, uv) in u.iter().enumerate() {
                acc += g[(r, c)] * uv;
            }
            for (c, dv) in d.iter().enumerate() {
                acc += gm[(r, c)] * dv;
            }
            delta[r] -= acc;
        }
    }
    Ok(delta)
}

/// Affine map from the stacked future moves to the stacked predicted
/// outputs: `Y = dynamic * U + free`.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Stacked free response, length `horizon * ny`: what happens if all
    /// future moves are zero deviations.
    pub free: DVector<f64>,
    /// Block lower-triangular map from moves to outputs,
    /// `(horizon*ny) x (move_horizon*nu)`. Block (i, j) is `g_{i-j+1}`; the
    /// last block column accumulates the tail sums because the input is
    /// held constant after the final move.
    pub dynamic: DMatrix<f64>,
    pub delta_hat: DVector<f64>,
    pub horizon: usize,
    pub move_horizon: usize,
    pub ny: usize,
    pub nu: usize,
}

impl Prediction {
    pub fn evaluate(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.dynamic * u + &self.free
    }
}

/// Builds the horizon prediction. `d_future[j]` is the known disturbance
/// deviation at sample k+j; by convention entry 0 carries the current
/// measurement and later entries are zero unless a forecast exists. Shorter
/// slices are zero-padded.
pub fn build_prediction(
    model: &ImpulseResponseModel,
    history: &History,
    delta_hat: &DVector<f64>,
    d_future: &[Vec<f64>],
    horizon: usize,
    move_horizon: usize,
) -> Result<Prediction, PredictorError> {
    check_model_history(model, history)?;
    let ny = model.ny();
    let nu = model.nu();
    let nd = model.nd();
    if delta_hat.len() != ny {
        return Err(dim_err(format!(
            "delta has {} entries, model {ny}",
            delta_hat.len()
        )));
    }
    if !(1 <= move_horizon && move_horizon <= horizon) {
        return Err(dim_err(format!(
            "move horizon {move_horizon} outside 1..={horizon}"
        )));
    }
    for (j, d) in d_future.iter().enumerate() {
        if d.len() != nd {
            return Err(dim_err(format!(
                "future disturbance {j} has {} entries, model {nd}",
                d.len()
            )));
        }
    }

    let mut free = DVector::zeros(horizon * ny);
    for i in 1..=horizon {
        let row0 = (i - 1) * ny;
        for r in 0..ny {
            free[row0 + r] = delta_hat[r];
        }
        // Past inputs and disturbances still inside the window: lags
        // l = i+1..=M reach back to samples before now.
        for l in (i + 1)..=model.m {
            let g = &model.g[l - 1];
            let gm = &model.gamma[l - 1];
            let u = history.u_past(l - i);
            let d = history.d_past(l - i);
            for r in 0..ny {
                let mut acc = 0.0;
                for (c, uv) in u.iter().enumerate() {
                    acc += g[(r, c)] * uv;
                }
                for (c, dv) in d.iter().enumerate() {
                    acc += gm[(r, c)] * dv;
                }
                free[row0 + r] += acc;
            }
        }
        // Known present/future disturbances.
        for l in 1..=i.min(model.m) {
            if let Some(d) = d_future.get(i - l) {
                let gm = &model.gamma[l - 1];
                for r in 0..ny {
                    let mut acc = 0.0;
                    for (c, dv) in d.iter().enumerate() {
                        acc += gm[(r, c)] * dv;
                    }
                    free[row0 + r] += acc;
                }
            }
        }
    }

    let mut dynamic = DMatrix::zeros(horizon * ny, move_horizon * nu);
    for i in 1..=horizon {
        let row0 = (i - 1) * ny;
        for j in 1..=move_horizon.min(i) {
            let col0 = (j - 1) * nu;
            if j < move_horizon {
                let l = i - j + 1;
                if l <= model.m {
                    let g = &model.g[l - 1];
                    for r in 0..ny {
                        for c in 0..nu {
                            dynamic[(row0 + r, col0 + c)] = g[(r, c)];
                        }
                    }
                }
            } else {
                // Final move block: the input is held, so every later
                // sample re-applies it and the coefficients accumulate.
                for l in 1..=(i - move_horizon + 1).min(model.m) {
                    let g = &model.g[l - 1];
                    for r in 0..ny {
                        for c in 0..nu {
                            dynamic[(row0 + r, col0 + c)] += g[(r, c)];
                        }
                    }
                }
            }
        }
    }

    Ok(Prediction {
        free,
        dynamic,
        delta_hat: delta_hat.clone(),
        horizon,
        move_horizon,
        ny,
        nu,
    })
}

/// Convenience wrapper: builds the prediction and evaluates it at `u`.
pub fn predict(
    model: &ImpulseResponseModel,
    history: &History,
    delta_hat: &DVector<f64>,
    d_future: &[Vec<f64>],
    horizon: usize,
    move_horizon: usize,
    u: &DVector<f64>,
) -> Result<DVector<f64>, PredictorError> {
    let pred = build_prediction(model, history, delta_hat, d_future, horizon, move_horizon)?;
    if u.len() != pred.dynamic.ncols() {
        return Err(dim_err(format!(
            "move vector has {} entries, expected {}",
            u.len(),
            pred.dynamic.ncols()
        )));
    }
    Ok(pred.evaluate(u))
}
