//! Deployment sampling, spatial correlation, and correlated Rayleigh draws.
//!
//! A deployment is a square area with a fixed set of multi-antenna APs; a
//! task instance places a random number of single-antenna UEs in the area,
//! derives per-link path losses and local-scattering correlation matrices,
//! and assigns each UE a constellation. Channel realizations are drawn per
//! coherence block as `h = R^{1/2} g` with `g` standard complex Gaussian.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::frame::ConstellationId;
use crate::linalg::{hermitian_defect, hermitian_sqrt, min_eigenvalue, PSD_EIG_TOL};
use crate::{C64, CMat, CVec, Error, Result};

/// Path-loss model: `beta_dB(d) = INTERCEPT - SLOPE * log10(max(d, MIN_DISTANCE))`.
///
/// Urban-microcell slope at 2 GHz; the intercept is calibrated so that the
/// full-scale layout averages a 24 dB per-link SNR at a noise power of
/// -146 dB, which is the operating point all experiments are anchored to.
pub const PATHLOSS_INTERCEPT_DB: f64 = -25.7;
pub const PATHLOSS_SLOPE: f64 = 36.7;
/// Distance floor (meters) applied before the path-loss formula.
pub const MIN_DISTANCE_M: f64 = 10.0;
/// Angular standard deviation of the Gaussian local scattering model.
pub const DEFAULT_ASD_RAD: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// Antenna spacing in wavelengths (uniform linear array).
pub const ANTENNA_SPACING: f64 = 0.5;
/// Noise power (dB, linear units normalized to unit transmit power) at
/// which the full-scale layout averages 24 dB per-link SNR.
pub const REFERENCE_NOISE_DB: f64 = -146.0;

/// Static description of the radio deployment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeploymentConfig {
    /// Side of the square deployment area, meters.
    pub area_side_m: f64,
    /// Antennas per AP (N).
    pub antennas_per_ap: usize,
    /// Carrier frequency, Hz.
    pub carrier_hz: f64,
    /// AP coordinates, meters; all inside the square.
    pub ap_positions: Vec<[f64; 2]>,
    /// Inclusive range for the random UE count per task.
    pub ue_count_range: (usize, usize),
    /// Log-normal shadow-fading standard deviation in dB; 0 disables it.
    pub shadow_std_db: f64,
}

impl DeploymentConfig {
    pub fn new(
        area_side_m: f64,
        antennas_per_ap: usize,
        carrier_hz: f64,
        ap_positions: Vec<[f64; 2]>,
        ue_count_range: (usize, usize),
    ) -> Result<Self> {
        let cfg = Self {
            area_side_m,
            antennas_per_ap,
            carrier_hz,
            ap_positions,
            ue_count_range,
            shadow_std_db: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.area_side_m <= 0.0 {
            return Err(Error::Config("area_side_m must be positive".into()));
        }
        if self.ap_positions.is_empty() {
            return Err(Error::Config("at least one AP required".into()));
        }
        if self.antennas_per_ap == 0 {
            return Err(Error::Config("antennas_per_ap must be >= 1".into()));
        }
        for (i, p) in self.ap_positions.iter().enumerate() {
            if !(0.0..=self.area_side_m).contains(&p[0]) || !(0.0..=self.area_side_m).contains(&p[1]) {
                return Err(Error::Config(format!("AP {i} outside deployment square")));
            }
        }
        let (kmin, kmax) = self.ue_count_range;
        if kmin < 1 || kmax < kmin {
            return Err(Error::Config(format!("bad UE count range [{kmin}, {kmax}]")));
        }
        if self.shadow_std_db < 0.0 {
            return Err(Error::Config("shadow_std_db must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of APs (L).
    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    /// 1x1 km square, 4 two-antenna APs at the quadrant centers, 2 GHz,
    /// K uniform on [1, 4].
    pub fn full_scale() -> Self {
        Self::new(
            1000.0,
            2,
            2.0e9,
            vec![[250.0, 250.0], [250.0, 750.0], [750.0, 250.0], [750.0, 750.0]],
            (1, 4),
        )
        .expect("preset is valid")
    }

    /// Reduced layout used by the fast experiments: 2 two-antenna APs on the
    /// square's diagonal, K uniform on [1, 2].
    pub fn desk_scale() -> Self {
        Self::new(
            1000.0,
            2,
            2.0e9,
            vec![[250.0, 250.0], [750.0, 750.0]],
            (1, 2),
        )
        .expect("preset is valid")
    }
}

/// One equalization task: noise power, UE placement, constellations, and
/// the per-link spatial correlation matrices.
#[derive(Debug, Clone)]
pub struct TaskConfig {
    /// Noise power sigma^2 in linear units (unit transmit power).
    pub noise_power: f64,
    pub ue_positions: Vec<[f64; 2]>,
    pub constellations: Vec<ConstellationId>,
    /// `corr[l][k]` is the N x N Hermitian correlation matrix of link (l, k).
    pub corr: Vec<Vec<CMat>>,
    /// `large_scale[l][k] = tr(corr[l][k]) / N`.
    pub large_scale: Vec<Vec<f64>>,
    corr_sqrt: Vec<Vec<CMat>>,
}

impl TaskConfig {
    pub fn new(
        noise_power: f64,
        ue_positions: Vec<[f64; 2]>,
        constellations: Vec<ConstellationId>,
        corr: Vec<Vec<CMat>>,
    ) -> Result<Self> {
        let k = ue_positions.len();
        if constellations.len() != k {
            return Err(Error::Dim(format!(
                "{} constellations for {} UEs",
                constellations.len(),
                k
            )));
        }
        if noise_power < 0.0 {
            return Err(Error::Config("noise_power must be >= 0".into()));
        }
        if corr.is_empty() || corr.iter().any(|row| row.len() != k) {
            return Err(Error::Dim("corr must be L x K".into()));
        }
        let n = corr[0][0].nrows();
        let mut large_scale = Vec::with_capacity(corr.len());
        let mut corr_sqrt = Vec::with_capacity(corr.len());
        for row in &corr {
            let mut ls_row = Vec::with_capacity(k);
            let mut sq_row = Vec::with_capacity(k);
            for r in row {
                if r.nrows() != n || r.ncols() != n {
                    return Err(Error::Dim("correlation matrices must share N x N shape".into()));
                }
                if hermitian_defect(r) >= 1e-10 {
                    return Err(Error::Numeric("correlation matrix not Hermitian".into()));
                }
                if min_eigenvalue(r) < -PSD_EIG_TOL {
                    return Err(Error::Numeric("correlation matrix not PSD".into()));
                }
                let tr: C64 = r.diagonal().iter().sum();
                ls_row.push(tr.re / n as f64);
                sq_row.push(hermitian_sqrt(r)?);
            }
            large_scale.push(ls_row);
            corr_sqrt.push(sq_row);
        }
        Ok(Self {
            noise_power,
            ue_positions,
            constellations,
            corr,
            large_scale,
            corr_sqrt,
        })
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn num_aps(&self) -> usize {
        self.corr.len()
    }

    pub fn antennas_per_ap(&self) -> usize {
        self.corr[0][0].nrows()
    }

    /// Large-scale coefficients of UE `k` toward every AP.
    pub fn large_scale_of(&self, k: usize) -> Vec<f64> {
        (0..self.num_aps()).map(|l| self.large_scale[l][k]).collect()
    }
}

/// Channel vectors for one coherence block; `h[l][k]` is an N-vector.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: Vec<Vec<CVec>>,
}

impl ChannelRealization {
    pub fn num_aps(&self) -> usize {
        self.h.len()
    }

    pub fn num_ues(&self) -> usize {
        self.h[0].len()
    }

    /// Channel of UE `k` stacked across APs (AP-major, antenna-minor), NL long.
    pub fn stacked(&self, k: usize) -> CVec {
        let n = self.h[0][0].len();
        let l = self.h.len();
        let mut out = CVec::zeros(n * l);
        for (li, row) in self.h.iter().enumerate() {
            out.rows_mut(li * n, n).copy_from(&row[k]);
        }
        out
    }
}

/// Draw the UE count and positions for one task.
///
/// Draw order is fixed: K first, then per-UE x then y.
pub fn sample_deployment<R: Rng>(cfg: &DeploymentConfig, rng: &mut R) -> (Vec<[f64; 2]>, usize) {
    let (kmin, kmax) = cfg.ue_count_range;
    let k = rng.random_range(kmin..=kmax);
    let mut pos = Vec::with_capacity(k);
    for _ in 0..k {
        let x = rng.random_range(0.0..cfg.area_side_m);
        let y = rng.random_range(0.0..cfg.area_side_m);
        pos.push([x, y]);
    }
    (pos, k)
}

/// Path loss in dB at distance `d` meters (distance floor applied).
pub fn pathloss_db(distance_m: f64) -> Result<f64> {
    if !distance_m.is_finite() || distance_m <= 0.0 {
        return Err(Error::Numeric(format!("pathloss: invalid distance {distance_m}")));
    }
    let d = distance_m.max(MIN_DISTANCE_M);
    Ok(PATHLOSS_INTERCEPT_DB - PATHLOSS_SLOPE * d.log10())
}

/// Gaussian local scattering correlation matrix for a uniform linear array.
///
/// `[R]_{m,n} = beta * exp(j 2 pi D (m-n) sin t) * exp(-asd^2/2 (2 pi D (m-n) cos t)^2)`
/// with spacing `D` = [`ANTENNA_SPACING`]; `tr(R)/N = beta`.
pub fn local_scattering_corr(beta_linear: f64, nominal_angle_rad: f64, n: usize, asd_rad: f64) -> CMat {
    let two_pi_d = 2.0 * std::f64::consts::PI * ANTENNA_SPACING;
    let (sin_t, cos_t) = nominal_angle_rad.sin_cos();
    CMat::from_fn(n, n, |m, nn| {
        let diff = m as f64 - nn as f64;
        let phase = two_pi_d * diff * sin_t;
        let spread = two_pi_d * diff * cos_t;
        let mag = beta_linear * (-0.5 * asd_rad * asd_rad * spread * spread).exp();
        C64::from_polar(mag, phase)
    })
}

/// Sample a full task: UE placement, per-link correlation matrices, and a
/// uniformly drawn constellation per UE.
pub fn build_task<R: Rng>(
    cfg: &DeploymentConfig,
    noise_power: f64,
    constellation_set: &[ConstellationId],
    rng: &mut R,
) -> Result<TaskConfig> {
    if constellation_set.is_empty() {
        return Err(Error::Config("constellation_set must be non-empty".into()));
    }
    let (positions, k) = sample_deployment(cfg, rng);
    let constellations: Vec<ConstellationId> = (0..k)
        .map(|_| constellation_set[rng.random_range(0..constellation_set.len())])
        .collect();
    let n = cfg.antennas_per_ap;
    let mut corr = Vec::with_capacity(cfg.num_aps());
    for ap in &cfg.ap_positions {
        let mut row = Vec::with_capacity(k);
        for ue in &positions {
            let (dx, dy) = (ue[0] - ap[0], ue[1] - ap[1]);
            let d = dx.hypot(dy).max(MIN_DISTANCE_M);
            let mut pl_db = pathloss_db(d)?;
            if cfg.shadow_std_db > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                pl_db += cfg.shadow_std_db * z;
            }
            let beta = 10f64.powf(pl_db / 10.0);
            let theta = dy.atan2(dx);
            row.push(local_scattering_corr(beta, theta, n, DEFAULT_ASD_RAD));
        }
        corr.push(row);
    }
    TaskConfig::new(noise_power, positions, constellations, corr)
}

/// Draw one correlated Rayleigh realization, `h_{l,k} = R_{l,k}^{1/2} g`.
///
/// Draw order is fixed: APs outer, UEs inner, antenna entries re then im.
pub fn sample_channels<R: Rng>(task: &TaskConfig, rng: &mut R) -> ChannelRealization {
    let n = task.antennas_per_ap();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let h = task
        .corr_sqrt
        .iter()
        .map(|row| {
            row.iter()
                .map(|sq| {
                    let g = CVec::from_fn(n, |_, _| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        C64::new(re * inv_sqrt2, im * inv_sqrt2)
                    });
                    sq * g
                })
                .collect()
        })
        .collect();
    ChannelRealization { h }
}

/// Monte-Carlo average of the per-link SNR `10 log10(beta / sigma^2)` in dB.
pub fn average_snr_db<R: Rng>(
    cfg: &DeploymentConfig,
    noise_power: f64,
    n_tasks: usize,
    rng: &mut R,
) -> f64 {
    let noise_db = 10.0 * noise_power.log10();
    let mut acc = 0.0;
    let mut count = 0usize;
    for _ in 0..n_tasks {
        let (positions, _) = sample_deployment(cfg, rng);
        for ap in &cfg.ap_positions {
            for ue in &positions {
                let d = (ue[0] - ap[0]).hypot(ue[1] - ap[1]).max(MIN_DISTANCE_M);
                let pl = pathloss_db(d).expect("positive distance");
                acc += pl - noise_db;
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Noise power (linear) that hits `target_snr_db` average per-link SNR for
/// this deployment, via the same Monte-Carlo average as [`average_snr_db`].
pub fn noise_power_for_snr<R: Rng>(
    cfg: &DeploymentConfig,
    target_snr_db: f64,
    n_tasks: usize,
    rng: &mut R,
) -> f64 {
    // average_snr_db is affine in the noise dB, so calibrate at 0 dB noise.
    let snr_at_unit_noise = average_snr_db(cfg, 1.0, n_tasks, rng);
    10f64.powf((snr_at_unit_noise - target_snr_db) / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStream;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> rand_chacha::ChaCha12Rng {
        SeedStream::root(seed).rng()
    }

    #[test]
    fn deployment_counts_and_bounds() {
        let mut cfg = DeploymentConfig::full_scale();
        cfg.ue_count_range = (4, 4);
        let (pos, k) = sample_deployment(&cfg, &mut rng(1));
        assert_eq!(k, 4);
        assert_eq!(pos.len(), 4);
        assert!(pos.iter().all(|p| (0.0..=1000.0).contains(&p[0]) && (0.0..=1000.0).contains(&p[1])));

        cfg.ue_count_range = (1, 1);
        let (_, k1) = sample_deployment(&cfg, &mut rng(2));
        assert_eq!(k1, 1);
    }

    #[test]
    fn deployment_deterministic() {
        let cfg = DeploymentConfig::full_scale();
        let (a, _) = sample_deployment(&cfg, &mut rng(42));
        let (b, _) = sample_deployment(&cfg, &mut rng(42));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DeploymentConfig::new(0.0, 2, 2e9, vec![[0.0, 0.0]], (1, 4)).is_err());
        assert!(DeploymentConfig::new(100.0, 2, 2e9, vec![[500.0, 0.0]], (1, 4)).is_err());
        assert!(DeploymentConfig::new(100.0, 2, 2e9, vec![[0.0, 0.0]], (3, 2)).is_err());
        assert!(DeploymentConfig::new(100.0, 0, 2e9, vec![[0.0, 0.0]], (1, 2)).is_err());
    }

    #[test]
    fn pathloss_values() {
        assert_abs_diff_eq!(pathloss_db(100.0).unwrap(), -99.1, epsilon = 1e-9);
        assert_abs_diff_eq!(pathloss_db(141.42).unwrap(), -104.6237, epsilon = 1e-3);
        // distance floor
        assert_abs_diff_eq!(pathloss_db(1.0).unwrap(), pathloss_db(10.0).unwrap(), epsilon = 0.0);
        assert_abs_diff_eq!(pathloss_db(10.0).unwrap(), -62.4, epsilon = 1e-9);
        assert!(pathloss_db(0.0).is_err());
        assert!(pathloss_db(-5.0).is_err());
        assert!(pathloss_db(f64::NAN).is_err());
    }

    #[test]
    fn scattering_scalar_and_trace() {
        let r = local_scattering_corr(2.5, 0.7, 1, DEFAULT_ASD_RAD);
        assert_eq!(r.nrows(), 1);
        assert_abs_diff_eq!(r[(0, 0)].re, 2.5, epsilon = 1e-15);

        for &theta in &[0.0, 0.3, 1.2, -2.0] {
            let r = local_scattering_corr(1.0, theta, 4, DEFAULT_ASD_RAD);
            let tr: C64 = r.diagonal().iter().sum();
            assert_abs_diff_eq!(tr.re / 4.0, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scattering_broadside_offdiag() {
        // theta = 0: off-diagonal magnitude is exp(-pi^2 asd^2 / 2) * beta.
        let beta = 3.0;
        let r = local_scattering_corr(beta, 0.0, 2, DEFAULT_ASD_RAD);
        assert_abs_diff_eq!(r[(0, 1)].norm(), 0.7130341165 * beta, epsilon = 1e-8);
        assert_abs_diff_eq!(r[(0, 1)].im, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scattering_psd_over_random_geometry() {
        let mut r = rng(9);
        for _ in 0..200 {
            let beta = 10f64.powf(r.random_range(-13.0..-6.0));
            let theta = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let m = local_scattering_corr(beta, theta, 4, DEFAULT_ASD_RAD);
            assert!(min_eigenvalue(&m) >= -PSD_EIG_TOL * beta.max(1.0));
        }
    }

    #[test]
    fn build_task_fields_consistent() {
        let cfg = DeploymentConfig::full_scale();
        let set = [ConstellationId::Bpsk];
        let task = build_task(&cfg, 1e-14, &set, &mut rng(5)).unwrap();
        assert_eq!(task.num_aps(), 4);
        assert_eq!(task.antennas_per_ap(), 2);
        assert!(task.constellations.iter().all(|&c| c == ConstellationId::Bpsk));
        for l in 0..task.num_aps() {
            for k in 0..task.num_ues() {
                let tr: C64 = task.corr[l][k].diagonal().iter().sum();
                assert_abs_diff_eq!(task.large_scale[l][k], tr.re / 2.0, epsilon = 1e-25);
            }
        }
    }

    #[test]
    fn build_task_deterministic() {
        let cfg = DeploymentConfig::full_scale();
        let set = [ConstellationId::Bpsk, ConstellationId::Qam16];
        let a = build_task(&cfg, 1e-14, &set, &mut rng(11)).unwrap();
        let b = build_task(&cfg, 1e-14, &set, &mut rng(11)).unwrap();
        assert_eq!(a.ue_positions, b.ue_positions);
        assert_eq!(a.constellations, b.constellations);
        assert_eq!(a.corr[0][0], b.corr[0][0]);
    }

    #[test]
    fn channels_zero_covariance() {
        let n = 2;
        let corr = vec![vec![CMat::zeros(n, n)]];
        let task = TaskConfig::new(1.0, vec![[0.0, 0.0]], vec![ConstellationId::Bpsk], corr).unwrap();
        let ch = sample_channels(&task, &mut rng(3));
        assert!(ch.h[0][0].iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn channels_rank_one_subspace() {
        // R = u u^H: draws stay in span(u).
        let u = CVec::from_column_slice(&[C64::new(1.0, 0.5), C64::new(-0.3, 0.2)]);
        let r = &u * u.adjoint();
        let task = TaskConfig::new(1.0, vec![[0.0, 0.0]], vec![ConstellationId::Bpsk], vec![vec![r]]).unwrap();
        let mut g = rng(4);
        let unit = &u / C64::new(u.norm(), 0.0);
        for _ in 0..100 {
            let ch = sample_channels(&task, &mut g);
            let h = &ch.h[0][0];
            let proj = &unit * (unit.adjoint() * h);
            assert!((h - proj).norm() < 1e-10 * h.norm().max(1.0));
        }
    }

    #[test]
    fn channels_empirical_covariance() {
        let r = CMat::identity(2, 2);
        let task =
            TaskConfig::new(1.0, vec![[0.0, 0.0]], vec![ConstellationId::Bpsk], vec![vec![r.clone()]]).unwrap();
        let mut g = rng(6);
        let draws = 100_000;
        let mut acc = CMat::zeros(2, 2);
        for _ in 0..draws {
            let ch = sample_channels(&task, &mut g);
            acc += &ch.h[0][0] * ch.h[0][0].adjoint();
        }
        acc /= C64::new(draws as f64, 0.0);
        let err = (&acc - &r).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err < 0.03, "max entry error {err}");
    }

    #[test]
    fn full_scale_average_snr_anchor() {
        let cfg = DeploymentConfig::full_scale();
        let snr = average_snr_db(&cfg, 10f64.powf(-14.6), 10_000, &mut rng(8));
        assert!((snr - 24.0).abs() < 1.0, "average SNR {snr} dB");
    }

    #[test]
    fn noise_calibration_roundtrip() {
        let cfg = DeploymentConfig::desk_scale();
        let sigma2 = noise_power_for_snr(&cfg, 18.0, 4000, &mut rng(10));
        let snr = average_snr_db(&cfg, sigma2, 4000, &mut rng(10));
        assert!((snr - 18.0).abs() < 0.2, "calibrated SNR {snr}");
    }
}
