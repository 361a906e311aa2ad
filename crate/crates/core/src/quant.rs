//! Fronthaul quantization: Lloyd-Max scalar quantizer design for a unit
//! Gaussian, statistics-derived per-AP scaling, and entrywise application
//! to the received pilot and data signals.

use rand::Rng;

use crate::channel::TaskConfig;
use crate::frame::FrameSignals;
use crate::{C64, CMat, CVec, Error, Result};

/// Default stopping tolerance on the max level change per Lloyd iteration.
pub const DESIGN_TOL: f64 = 1e-8;
/// Default cap on the Lloyd polish iterations that certify the fixed point.
pub const DESIGN_MAX_ITERS: usize = 10_000;
/// Floor applied to quantizer scales to keep degenerate tasks finite.
pub const MIN_SCALE: f64 = 1e-9;

fn normal_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Moments of a unit Gaussian over the cell `(a, b]`:
/// probability mass, first moment, and second moment.
fn cell_moments(a: f64, b: f64) -> (f64, f64, f64) {
    let (ca, cb) = (normal_cdf(a), normal_cdf(b));
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    let p = cb - ca;
    let m1 = pa - pb;
    let ta = if a.is_finite() { a * pa } else { 0.0 };
    let tb = if b.is_finite() { b * pb } else { 0.0 };
    let m2 = p + ta - tb;
    (p, m1, m2)
}

/// A `b`-bit minimum-MSE scalar quantizer for a zero-mean unit Gaussian.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    /// 2^b reconstruction levels, strictly ascending, symmetric about 0.
    pub levels: Vec<f64>,
    /// 2^b - 1 cell boundaries interleaving the levels.
    pub thresholds: Vec<f64>,
    /// Normalized distortion `E[(y - Q(y))^2]` for unit-variance input.
    pub distortion: f64,
    /// Bussgang gain `E[Q(y) y] / E[y^2]`; equals `1 - distortion` at the
    /// MMSE fixed point.
    pub bussgang_gain: f64,
}

impl QuantizerSpec {
    fn validate(&self) -> Result<()> {
        let m = self.levels.len();
        if m != 1usize << self.bits || self.thresholds.len() != m - 1 {
            return Err(Error::Dim("level/threshold counts do not match bits".into()));
        }
        for w in self.levels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Numeric("levels not strictly ascending".into()));
            }
        }
        for (i, &t) in self.thresholds.iter().enumerate() {
            if t < self.levels[i] || t > self.levels[i + 1] {
                return Err(Error::Numeric("thresholds do not interleave levels".into()));
            }
        }
        for i in 0..m {
            if (self.levels[i] + self.levels[m - 1 - i]).abs() > 1e-9 {
                return Err(Error::Numeric("levels not symmetric".into()));
            }
        }
        if (self.bussgang_gain - (1.0 - self.distortion)).abs() > 1e-6 {
            return Err(Error::Numeric("gain/distortion identity violated".into()));
        }
        Ok(())
    }

    /// Index of the cell containing `v`; boundary values go to the upper cell.
    pub fn cell_index(&self, v: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= v)
    }

    /// CSV table of the design: one row per level with its upper threshold
    /// (empty for the last level).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,level,upper_threshold\n");
        for (i, &l) in self.levels.iter().enumerate() {
            if let Some(&t) = self.thresholds.get(i) {
                out.push_str(&format!("{i},{l:.10e},{t:.10e}\n"));
            } else {
                out.push_str(&format!("{i},{l:.10e},\n"));
            }
        }
        out
    }
}

fn lloyd_step(levels: &[f64]) -> Vec<f64> {
    let m = levels.len();
    let bounds = cell_bounds(levels);
    let mut next = Vec::with_capacity(m);
    for i in 0..m {
        let (p, m1, _) = cell_moments(bounds[i], bounds[i + 1]);
        next.push(m1 / p);
    }
    // Re-symmetrize to kill rounding drift.
    for i in 0..m / 2 {
        let v = 0.5 * (next[m - 1 - i] - next[i]);
        next[i] = -v;
        next[m - 1 - i] = v;
    }
    next
}

fn max_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Phi(b) - Phi(a)` computed from erfc so narrow far-tail cells keep
/// relative accuracy.
fn cdf_diff(a: f64, b: f64) -> f64 {
    let rt = std::f64::consts::SQRT_2;
    if a >= 0.0 {
        0.5 * (libm::erfc(a / rt) - libm::erfc(b / rt))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / rt) - libm::erfc(-a / rt))
    } else {
        1.0 - 0.5 * libm::erfc(b / rt) - 0.5 * libm::erfc(-a / rt)
    }
}

/// Conditional mean of a unit Gaussian over `(a, b)`, `b` finite.
fn cell_centroid(a: f64, b: f64) -> f64 {
    (normal_pdf(a) - normal_pdf(b)) / cdf_diff(a, b)
}

/// Conditional mean over `(a, inf)` (the Mills ratio).
fn tail_centroid(a: f64) -> f64 {
    normal_pdf(a) / (0.5 * libm::erfc(a / std::f64::consts::SQRT_2))
}

/// March the positive half of a symmetric quantizer from the first positive
/// level `c`: each cell's upper threshold comes from the centroid condition,
/// the next level from the midpoint condition. Returns the closure residual
/// of the last (tail) cell; negative infinity when the march escapes.
fn shooting_residual(c: f64, half_cells: usize) -> f64 {
    let mut level = c;
    let mut t_prev = 0.0;
    for _ in 0..half_cells - 1 {
        if tail_centroid(t_prev) <= level {
            // No threshold can give this cell a centroid as large as `level`.
            return f64::NEG_INFINITY;
        }
        // Root of centroid(t_prev, t) = level on t in (level, inf).
        let mut lo = level;
        let mut hi = level + 1.0;
        while cell_centroid(t_prev, hi) < level {
            hi += hi - level;
            if hi - level > 80.0 {
                return f64::NEG_INFINITY;
            }
        }
        for _ in 0..90 {
            let mid = 0.5 * (lo + hi);
            if cell_centroid(t_prev, mid) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        level = 2.0 * t - level;
        t_prev = t;
    }
    tail_centroid(t_prev) - level
}

/// Design the minimum-MSE quantizer for a unit Gaussian.
///
/// Levels are conditional cell means, thresholds midpoints; distortion and
/// gain come from erf-based closed forms. Plain Lloyd iteration converges
/// geometrically with a rate that collapses as the level count grows (the
/// 8-bit design alone needs ~6e4 iterations for 1e-8), so the fixed point
/// is located by a shooting method on the first positive level and then
/// polished with Lloyd steps until the max level change drops below `tol`
/// (or `max_iters` is hit, which reports the usual convergence error).
pub fn design_lloyd_max(bits: u32, tol: f64, max_iters: usize) -> Result<QuantizerSpec> {
    if !(1..=12).contains(&bits) {
        return Err(Error::Config(format!("bits {bits} outside supported range 1..=12")));
    }
    let m = 1usize << bits;
    let half = m / 2;
    // Bisection on the first positive level; the residual is decreasing.
    let (mut lo, mut hi) = (1e-9, 5.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if shooting_residual(mid, half) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    // Reconstruct the full level vector by re-marching at the solution.
    let mut pos = Vec::with_capacity(half);
    let mut level = c;
    let mut t_prev = 0.0;
    pos.push(level);
    for _ in 0..half - 1 {
        let mut blo = level;
        let mut bhi = level + 1.0;
        while cell_centroid(t_prev, bhi) < level {
            bhi += bhi - level;
        }
        for _ in 0..90 {
            let mid = 0.5 * (blo + bhi);
            if cell_centroid(t_prev, mid) < level {
                blo = mid;
            } else {
                bhi = mid;
            }
        }
        let t = 0.5 * (blo + bhi);
        level = 2.0 * t - level;
        t_prev = t;
        pos.push(level);
    }
    let mut levels: Vec<f64> = pos.iter().rev().map(|v| -v).chain(pos.iter().copied()).collect();

    // Lloyd polish: certifies the fixed point at the requested tolerance.
    let mut converged = false;
    let mut last_delta = f64::INFINITY;
    for _ in 0..max_iters {
        let next = lloyd_step(&levels);
        last_delta = max_delta(&levels, &next);
        levels = next;
        if last_delta < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence { iters: max_iters, last_delta });
    }
    let bounds = cell_bounds(&levels);
    let mut distortion = 0.0;
    let mut gain = 0.0;
    for i in 0..m {
        let (p, m1, m2) = cell_moments(bounds[i], bounds[i + 1]);
        let l = levels[i];
        distortion += m2 - 2.0 * l * m1 + l * l * p;
        gain += l * m1;
    }
    let spec = QuantizerSpec {
        bits,
        thresholds: bounds[1..m].to_vec(),
        levels,
        distortion,
        bussgang_gain: gain,
    };
    spec.validate()?;
    Ok(spec)
}

fn cell_bounds(levels: &[f64]) -> Vec<f64> {
    let mut b = Vec::with_capacity(levels.len() + 1);
    b.push(f64::NEG_INFINITY);
    for w in levels.windows(2) {
        b.push(0.5 * (w[0] + w[1]));
    }
    b.push(f64::INFINITY);
    b
}

/// Design with the default tolerance and iteration cap.
pub fn design_default(bits: u32) -> Result<QuantizerSpec> {
    design_lloyd_max(bits, DESIGN_TOL, DESIGN_MAX_ITERS)
}

/// Fronthaul resolution: a finite bit width or the infinite-capacity bypass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum Bits {
    Finite(u32),
    /// Accepts the string `"inf"` in configs.
    Infinite(InfiniteTag),
}

/// Serde helper so `Bits::Infinite` round-trips as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum InfiniteTag {
    #[serde(rename = "inf")]
    Inf,
}

pub const INF_BITS: Bits = Bits::Infinite(InfiniteTag::Inf);

impl Bits {
    pub fn finite(self) -> Option<u32> {
        match self {
            Bits::Finite(b) => Some(b),
            Bits::Infinite(_) => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Bits::Infinite(_))
    }
}

impl std::fmt::Display for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bits::Finite(b) => write!(f, "{b}"),
            Bits::Infinite(_) => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Bits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("inf") {
            return Ok(INF_BITS);
        }
        s.parse::<u32>()
            .map(Bits::Finite)
            .map_err(|_| Error::Config(format!("bad bits value {s:?} (expected integer or \"inf\")")))
    }
}

/// A designed quantizer or the explicit infinite-capacity bypass.
#[derive(Debug, Clone, PartialEq)]
pub enum Quantizer {
    Bypass,
    Spec(QuantizerSpec),
}

impl Quantizer {
    pub fn design(bits: Bits) -> Result<Self> {
        match bits {
            Bits::Infinite(_) => Ok(Quantizer::Bypass),
            Bits::Finite(b) => Ok(Quantizer::Spec(design_default(b)?)),
        }
    }

    pub fn bits(&self) -> Bits {
        match self {
            Quantizer::Bypass => INF_BITS,
            Quantizer::Spec(s) => Bits::Finite(s.bits),
        }
    }

    /// Bussgang gain of the quantizer (1 for bypass).
    pub fn gain(&self) -> f64 {
        match self {
            Quantizer::Bypass => 1.0,
            Quantizer::Spec(s) => s.bussgang_gain,
        }
    }

    /// Normalized distortion (0 for bypass).
    pub fn distortion(&self) -> f64 {
        match self {
            Quantizer::Bypass => 0.0,
            Quantizer::Spec(s) => s.distortion,
        }
    }
}

/// Quantize one real value with scale `s`: `v -> s * level(cell(v / s))`.
pub fn quantize_scalar(v: f64, spec: &QuantizerSpec, s: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("quantizer input {v}")));
    }
    if !(s > 0.0) {
        return Err(Error::Config(format!("quantizer scale {s} must be positive")));
    }
    Ok(s * spec.levels[spec.cell_index(v / s)])
}

/// Entrywise quantization of a real slice.
pub fn quantize(values: &[f64], spec: &QuantizerSpec, s: f64) -> Result<Vec<f64>> {
    values.iter().map(|&v| quantize_scalar(v, spec, s)).collect()
}

fn quantize_complex(v: C64, spec: &QuantizerSpec, s: f64) -> Result<C64> {
    Ok(C64::new(quantize_scalar(v.re, spec, s)?, quantize_scalar(v.im, spec, s)?))
}

/// Per-AP standard deviation of each real signal component, computed from
/// the channel statistics: `s_l^2 = (sum_k tr(R_{l,k})/N + sigma^2) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingProfile {
    pub s: Vec<f64>,
}

pub fn scaling_profile(task: &TaskConfig) -> ScalingProfile {
    let s = task
        .large_scale
        .iter()
        .map(|row| {
            let power: f64 = row.iter().sum::<f64>() + task.noise_power;
            (power / 2.0).sqrt().max(MIN_SCALE)
        })
        .collect();
    ScalingProfile { s }
}

/// Quantized signals of one coherence block, both per-AP and stacked into
/// the CPU's `NL x T_p` pilot matrix and `NL` data vector. Stacking is
/// AP-major, antenna-minor: row `l*N + n`.
#[derive(Debug, Clone)]
pub struct QuantizedFrame {
    pub z: Vec<CMat>,
    pub y: Vec<CVec>,
    pub z_stacked: CMat,
    pub y_stacked: CVec,
}

/// Apply the quantizer entrywise (real and imaginary parts separately)
/// with the per-AP scale. `Quantizer::Bypass` forwards signals unchanged.
pub fn quantize_frame(
    frame: &FrameSignals,
    quantizer: &Quantizer,
    profile: &ScalingProfile,
) -> Result<QuantizedFrame> {
    let l = frame.z.len();
    if profile.s.len() != l {
        return Err(Error::Dim(format!("profile has {} APs, frame has {l}", profile.s.len())));
    }
    let n = frame.z[0].nrows();
    let t_p = frame.z[0].ncols();
    let mut z = Vec::with_capacity(l);
    let mut y = Vec::with_capacity(l);
    for li in 0..l {
        match quantizer {
            Quantizer::Bypass => {
                z.push(frame.z[li].clone());
                y.push(frame.y[li].clone());
            }
            Quantizer::Spec(spec) => {
                let s = profile.s[li];
                let mut zq = CMat::zeros(n, t_p);
                for j in 0..t_p {
                    for i in 0..n {
                        zq[(i, j)] = quantize_complex(frame.z[li][(i, j)], spec, s)?;
                    }
                }
                let mut yq = CVec::zeros(n);
                for i in 0..n {
                    yq[i] = quantize_complex(frame.y[li][i], spec, s)?;
                }
                z.push(zq);
                y.push(yq);
            }
        }
    }
    let mut z_stacked = CMat::zeros(n * l, t_p);
    let mut y_stacked = CVec::zeros(n * l);
    for li in 0..l {
        z_stacked.rows_mut(li * n, n).copy_from(&z[li]);
        y_stacked.rows_mut(li * n, n).copy_from(&y[li]);
    }
    Ok(QuantizedFrame { z, y, z_stacked, y_stacked })
}

/// Monte-Carlo estimate of `E[(Q(y) - G y) y]` on unit Gaussian input;
/// the Bussgang orthogonality residual, expected near zero.
pub fn bussgang_residual<R: Rng>(spec: &QuantizerSpec, draws: usize, rng: &mut R) -> f64 {
    use rand_distr::StandardNormal;
    let g = spec.bussgang_gain;
    let mut acc = 0.0;
    for _ in 0..draws {
        let y: f64 = rng.sample(StandardNormal);
        let q = spec.levels[spec.cell_index(y)];
        acc += (q - g * y) * y;
    }
    acc / draws as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::TaskConfig;
    use crate::frame::ConstellationId;
    use crate::seed::SeedStream;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> rand_chacha::ChaCha12Rng {
        SeedStream::root(seed).rng()
    }

    #[test]
    fn one_bit_closed_form() {
        let spec = design_default(1).unwrap();
        let c = (2.0 / std::f64::consts::PI).sqrt();
        assert_abs_diff_eq!(spec.levels[1], c, epsilon = 1e-8);
        assert_abs_diff_eq!(spec.levels[0], -c, epsilon = 1e-8);
        assert_abs_diff_eq!(spec.distortion, 1.0 - 2.0 / std::f64::consts::PI, epsilon = 1e-8);
        assert_abs_diff_eq!(spec.bussgang_gain, 2.0 / std::f64::consts::PI, epsilon = 1e-8);
    }

    #[test]
    fn two_bit_reference_design() {
        let spec = design_default(2).unwrap();
        assert_abs_diff_eq!(spec.levels[2], 0.45278004, epsilon = 1e-6);
        assert_abs_diff_eq!(spec.levels[3], 1.51041762, epsilon = 1e-6);
        assert_abs_diff_eq!(spec.distortion, 0.11748185, epsilon = 1e-6);
    }

    #[test]
    fn gain_distortion_identity_and_monotonicity() {
        let mut last_d = f64::INFINITY;
        for b in 1..=8 {
            let spec = design_default(b).unwrap();
            assert!(
                (spec.bussgang_gain - (1.0 - spec.distortion)).abs() < 1e-6,
                "identity at b={b}"
            );
            assert!(spec.distortion < last_d, "D not decreasing at b={b}");
            last_d = spec.distortion;
        }
    }

    #[test]
    fn max_iters_cap_reports_convergence_error() {
        // An unattainable tolerance exercises the diagnostic error path.
        let err = design_lloyd_max(4, 0.0, 7).unwrap_err();
        match err {
            Error::Convergence { iters, last_delta } => {
                assert_eq!(iters, 7);
                assert!(last_delta >= 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn high_bit_widths_design_quickly() {
        for b in [10, 12] {
            let spec = design_default(b).unwrap();
            assert!((spec.bussgang_gain - (1.0 - spec.distortion)).abs() < 1e-9);
        }
    }

    #[test]
    fn bits_out_of_range_rejected() {
        assert!(design_default(0).is_err());
        assert!(design_default(13).is_err());
    }

    #[test]
    fn quantize_reference_points() {
        let spec = design_default(1).unwrap();
        let out = quantize_scalar(3.7, &spec, 1.0).unwrap();
        assert_abs_diff_eq!(out, 0.79788456, epsilon = 1e-7);
        // v = 0 ties toward the positive level.
        let z = quantize_scalar(0.0, &spec, 1.0).unwrap();
        assert!(z > 0.0);
        // scale carries through.
        let s = 2.5;
        let out2 = quantize_scalar(0.1, &spec, s).unwrap();
        assert_abs_diff_eq!(out2, s * 0.79788456, epsilon = 1e-6);
    }

    #[test]
    fn quantize_idempotent_exact() {
        let spec = design_default(3).unwrap();
        let mut g = rng(1);
        for _ in 0..1000 {
            let v: f64 = g.random_range(-6.0..6.0);
            let q1 = quantize_scalar(v, &spec, 1.3).unwrap();
            let q2 = quantize_scalar(q1, &spec, 1.3).unwrap();
            assert_eq!(q1, q2);
        }
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let spec = design_default(2).unwrap();
        assert!(quantize_scalar(f64::NAN, &spec, 1.0).is_err());
        assert!(quantize_scalar(f64::INFINITY, &spec, 1.0).is_err());
        assert!(quantize_scalar(1.0, &spec, 0.0).is_err());
    }

    fn unit_task(k: usize, noise: f64) -> TaskConfig {
        let n = 2;
        let corr: Vec<Vec<CMat>> = vec![(0..k).map(|_| CMat::identity(n, n)).collect()];
        TaskConfig::new(noise, vec![[0.0, 0.0]; k], vec![ConstellationId::Bpsk; k], corr).unwrap()
    }

    #[test]
    fn scaling_reference_value() {
        // K=1, tr(R)/N = 1, sigma^2 = 1 -> s^2 = 1 per real component.
        let task = unit_task(1, 1.0);
        let p = scaling_profile(&task);
        assert_abs_diff_eq!(p.s[0] * p.s[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scaling_floor_for_degenerate_task() {
        let corr = vec![vec![CMat::zeros(2, 2)]];
        let task = TaskConfig::new(0.0, vec![[0.0, 0.0]], vec![ConstellationId::Bpsk], corr).unwrap();
        let p = scaling_profile(&task);
        assert_eq!(p.s[0], MIN_SCALE);
    }

    #[test]
    fn scaling_calibrates_received_variance() {
        let task = unit_task(2, 0.5);
        let profile = scaling_profile(&task);
        let mut g = rng(2);
        let mut acc = 0.0;
        let blocks = 10_000;
        for _ in 0..blocks {
            let ch = crate::channel::sample_channels(&task, &mut g);
            let x = crate::frame::sample_data_symbols(&task, &mut g);
            let y = crate::frame::transmit_data(&ch, &x, task.noise_power, &mut g);
            acc += y[0].iter().map(|c| c.re * c.re + c.im * c.im).sum::<f64>();
        }
        let per_component = acc / (blocks * 2 * 2) as f64;
        let ratio = per_component / (profile.s[0] * profile.s[0]);
        assert!((ratio - 1.0).abs() < 0.05, "variance ratio {ratio}");
    }

    fn small_frame(noise: f64, seed: u64) -> (TaskConfig, FrameSignals, ScalingProfile) {
        let n = 2;
        let corr: Vec<Vec<CMat>> = (0..2)
            .map(|_| (0..2).map(|_| CMat::identity(n, n)).collect())
            .collect();
        let task =
            TaskConfig::new(noise, vec![[0.0, 0.0]; 2], vec![ConstellationId::Bpsk; 2], corr).unwrap();
        let mut g = rng(seed);
        let ch = crate::channel::sample_channels(&task, &mut g);
        let book = crate::frame::walsh_hadamard_book(4).unwrap();
        let asn = crate::frame::PilotAssignment::from_indices(vec![0, 1]);
        let frame = crate::frame::make_frame(&task, &ch, &asn, &book, &mut g);
        let profile = scaling_profile(&task);
        (task, frame, profile)
    }

    #[test]
    fn bypass_is_identity() {
        let (_, frame, profile) = small_frame(0.3, 3);
        let q = quantize_frame(&frame, &Quantizer::Bypass, &profile).unwrap();
        assert_eq!(q.z[0], frame.z[0]);
        assert_eq!(q.y[1], frame.y[1]);
        assert_eq!(q.y_stacked[2], frame.y[1][0]);
    }

    #[test]
    fn one_bit_outputs_in_level_set() {
        let (_, frame, profile) = small_frame(0.3, 4);
        let spec = design_default(1).unwrap();
        let q = quantize_frame(&frame, &Quantizer::Spec(spec.clone()), &profile).unwrap();
        for (li, ym) in q.y.iter().enumerate() {
            let expect = profile.s[li] * spec.levels[1];
            for c in ym.iter() {
                assert!((c.re.abs() - expect).abs() < 1e-12);
                assert!((c.im.abs() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn high_resolution_close_to_identity() {
        let spec = design_default(10).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for seed in 0..20 {
            let (_, frame, profile) = small_frame(0.3, 100 + seed);
            let q = quantize_frame(&frame, &Quantizer::Spec(spec.clone()), &profile).unwrap();
            num += (&q.y_stacked
                - &CVec::from_iterator(4, frame.y.iter().flat_map(|v| v.iter().cloned())))
                .norm_squared();
            den += frame.y.iter().map(|v| v.norm_squared()).sum::<f64>();
        }
        assert!((num / den).sqrt() < 0.01, "relative error {}", (num / den).sqrt());
    }

    #[test]
    fn stacking_order_ap_major() {
        let (_, frame, profile) = small_frame(0.1, 5);
        let q = quantize_frame(&frame, &Quantizer::Bypass, &profile).unwrap();
        assert_eq!(q.z_stacked[(0, 0)], frame.z[0][(0, 0)]);
        assert_eq!(q.z_stacked[(1, 0)], frame.z[0][(1, 0)]);
        assert_eq!(q.z_stacked[(2, 0)], frame.z[1][(0, 0)]);
        assert_eq!(q.z_stacked[(3, 3)], frame.z[1][(1, 3)]);
    }

    #[test]
    fn bussgang_orthogonality_quick() {
        let spec = design_default(2).unwrap();
        let r = bussgang_residual(&spec, 200_000, &mut rng(6));
        assert!(r.abs() < 6e-3, "residual {r}");
    }

    #[test]
    fn bits_parse_and_display() {
        use std::str::FromStr;
        assert_eq!(Bits::from_str("8").unwrap(), Bits::Finite(8));
        assert_eq!(Bits::from_str("inf").unwrap(), INF_BITS);
        assert_eq!(INF_BITS.to_string(), "inf");
        assert_eq!(Bits::Finite(3).to_string(), "3");
        assert!(Bits::from_str("eight").is_err());
    }
}
