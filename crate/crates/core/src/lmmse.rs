//! Centralized LMMSE equalization from quantized fronthaul signals.
//!
//! The quantizer is linearized with the Bussgang decomposition: the
//! quantized signal is modeled as `G * signal + distortion`, with the
//! distortion treated as white additive noise of per-entry variance
//! `d_l = 2 s_l^2 D`. Channel estimation despreads the quantized pilots
//! per pilot sequence and applies the per-link LMMSE estimator under
//! contamination; combining stacks the per-AP estimates and solves the
//! MMSE system for each UE.

use crate::channel::TaskConfig;
use crate::frame::{PilotAssignment, PilotBook};
use crate::linalg::{hermitian_solve, hermitian_solve_mat};
use crate::quant::{Quantizer, QuantizedFrame, ScalingProfile};
use crate::{C64, CMat, CVec, Error, Result};

/// Bussgang linearization parameters of the fronthaul.
#[derive(Debug, Clone, PartialEq)]
pub struct BussgangModel {
    /// Scalar gain per real component (uniform across APs: all share the
    /// same unit-Gaussian design).
    pub gain: f64,
    /// Per-AP distortion variance per complex entry, `d_l = 2 s_l^2 D`.
    pub distortion_var: Vec<f64>,
}

impl BussgangModel {
    pub fn new(quantizer: &Quantizer, profile: &ScalingProfile) -> Self {
        let d = quantizer.distortion();
        BussgangModel {
            gain: quantizer.gain(),
            distortion_var: profile.s.iter().map(|s| 2.0 * s * s * d).collect(),
        }
    }

    /// Effective noise variance per complex entry at AP `l`, referred to the
    /// quantizer input: `sigma^2 + d_l / G^2`.
    pub fn effective_noise(&self, sigma2: f64, l: usize) -> f64 {
        sigma2 + self.distortion_var[l] / (self.gain * self.gain)
    }
}

/// Options for the combining stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmmseOptions {
    /// Treat channel estimates as exact (drop the estimation-error
    /// covariance from the combining matrix). This is the baseline's
    /// stated working assumption and the default; disabling it yields the
    /// robust MMSE combiner.
    pub assume_perfect_estimates: bool,
}

impl Default for LmmseOptions {
    fn default() -> Self {
        Self { assume_perfect_estimates: true }
    }
}

/// Channel estimates, error covariances, and bookkeeping for one block.
#[derive(Debug, Clone)]
pub struct LmmseState {
    /// `h_hat[l][k]`: estimated channel, N-vector.
    pub h_hat: Vec<Vec<CVec>>,
    /// `err_cov[l][k]`: estimation-error covariance, N x N.
    pub err_cov: Vec<Vec<CMat>>,
    /// Number of solves that needed diagonal regularization.
    pub regularization_events: usize,
}

/// LMMSE channel estimation from quantized pilots.
///
/// For each AP `l` and pilot `p`, despread `z = Z~_l phi_p^* / (G T_p)` and
/// apply `h_hat_{l,k} = R_{l,k} Psi^{-1} z` with
/// `Psi = sum_{k' on p} R_{l,k'} + (sigma^2 + d_l/G^2)/T_p I`.
pub fn estimate_channels(
    z_tilde: &[CMat],
    assignment: &PilotAssignment,
    book: &PilotBook,
    task: &TaskConfig,
    model: &BussgangModel,
) -> Result<LmmseState> {
    let l_aps = task.num_aps();
    let k_ues = task.num_ues();
    let n = task.antennas_per_ap();
    if z_tilde.len() != l_aps || assignment.num_ues() != k_ues {
        return Err(Error::Dim("estimate_channels: inconsistent dimensions".into()));
    }
    let t_p = book.t_p() as f64;
    let g = model.gain;
    let mut h_hat = vec![Vec::with_capacity(k_ues); l_aps];
    let mut err_cov = vec![Vec::with_capacity(k_ues); l_aps];
    let mut regs = 0usize;
    for l in 0..l_aps {
        let noise = model.effective_noise(task.noise_power, l);
        // Despread once per distinct pilot index.
        let mut despread: Vec<Option<CVec>> = vec![None; book.t_p()];
        for k in 0..k_ues {
            let p = assignment.indices[k];
            if despread[p].is_none() {
                let phi = book.sequence(p);
                despread[p] = Some(&z_tilde[l] * phi.conjugate() / C64::new(g * t_p, 0.0));
            }
        }
        for k in 0..k_ues {
            let p = assignment.indices[k];
            let z = despread[p].as_ref().expect("despread filled above");
            let mut psi = task.corr[l][k].clone();
            for &j in &assignment.collision_sets[k] {
                psi += &task.corr[l][j];
            }
            for i in 0..n {
                psi[(i, i)] += C64::new(noise / t_p, 0.0);
            }
            let (sol, reg1) = hermitian_solve(&psi, z)?;
            let (psi_inv_r, reg2) = hermitian_solve_mat(&psi, &task.corr[l][k])?;
            regs += usize::from(reg1) + usize::from(reg2);
            h_hat[l].push(&task.corr[l][k] * sol);
            err_cov[l].push(&task.corr[l][k] - &task.corr[l][k] * psi_inv_r);
        }
    }
    Ok(LmmseState { h_hat, err_cov, regularization_events: regs })
}

/// MMSE combining of the quantized data signal.
///
/// Builds `Sigma = sum_k (h_k h_k^H [+ C_k]) + blockdiag((sigma^2 + d_l/G^2) I_N)`
/// over the stacked NL dimension and returns `x_hat_k = h_k^H Sigma^{-1} (y~/G)`.
pub fn combine(
    y_tilde: &CVec,
    state: &LmmseState,
    task: &TaskConfig,
    model: &BussgangModel,
    opts: LmmseOptions,
) -> Result<CVec> {
    let l_aps = task.num_aps();
    let k_ues = task.num_ues();
    let n = task.antennas_per_ap();
    let nl = n * l_aps;
    if y_tilde.len() != nl {
        return Err(Error::Dim(format!("combine: y has {} entries, expected {nl}", y_tilde.len())));
    }
    // Stacked estimates.
    let mut h_stacked = Vec::with_capacity(k_ues);
    for k in 0..k_ues {
        let mut h = CVec::zeros(nl);
        for l in 0..l_aps {
            h.rows_mut(l * n, n).copy_from(&state.h_hat[l][k]);
        }
        h_stacked.push(h);
    }
    let mut sigma = CMat::zeros(nl, nl);
    for (k, h) in h_stacked.iter().enumerate() {
        sigma += h * h.adjoint();
        if !opts.assume_perfect_estimates {
            for l in 0..l_aps {
                let mut block = sigma.view_mut((l * n, l * n), (n, n));
                block += &state.err_cov[l][k];
            }
        }
    }
    for l in 0..l_aps {
        let noise = model.effective_noise(task.noise_power, l);
        for i in 0..n {
            sigma[(l * n + i, l * n + i)] += C64::new(noise, 0.0);
        }
    }
    let y_ref = y_tilde / C64::new(model.gain, 0.0);
    let mut x_hat = CVec::zeros(k_ues);
    for (k, h) in h_stacked.iter().enumerate() {
        let (v, _) = hermitian_solve(&sigma, h)?;
        x_hat[k] = (v.adjoint() * &y_ref)[(0, 0)];
    }
    Ok(x_hat)
}

/// Closed-form per-symbol MSE of the combiner for Gaussian symbols and
/// exact estimates: `1 - h_k^H Sigma^{-1} h_k`.
pub fn analytic_mse_perfect_csi(
    channels_stacked: &[CVec],
    task: &TaskConfig,
    model: &BussgangModel,
) -> Result<Vec<f64>> {
    let l_aps = task.num_aps();
    let n = task.antennas_per_ap();
    let nl = n * l_aps;
    let mut sigma = CMat::zeros(nl, nl);
    for h in channels_stacked {
        sigma += h * h.adjoint();
    }
    for l in 0..l_aps {
        let noise = model.effective_noise(task.noise_power, l);
        for i in 0..n {
            sigma[(l * n + i, l * n + i)] += C64::new(noise, 0.0);
        }
    }
    channels_stacked
        .iter()
        .map(|h| {
            let (v, _) = hermitian_solve(&sigma, h)?;
            Ok(1.0 - (h.adjoint() * v)[(0, 0)].re)
        })
        .collect()
}

/// End-to-end LMMSE equalization of one quantized frame.
pub fn lmmse_equalize(
    quantized: &QuantizedFrame,
    assignment: &PilotAssignment,
    book: &PilotBook,
    task: &TaskConfig,
    quantizer: &Quantizer,
    profile: &ScalingProfile,
    opts: LmmseOptions,
) -> Result<CVec> {
    let model = BussgangModel::new(quantizer, profile);
    let state = estimate_channels(&quantized.z, assignment, book, task, &model)?;
    combine(&quantized.y_stacked, &state, task, &model, opts)
}
