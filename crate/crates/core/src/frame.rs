//! Pilot books and assignments, constellations, and the uplink signals of
//! one coherence block (pilot phase + one data channel use).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{ChannelRealization, TaskConfig};
use crate::{C64, CMat, CVec, Error, Result};

/// Orthogonal pilot book built from a Walsh-Hadamard matrix; entries are
/// +-1 and rows satisfy `Phi Phi^H = T_p I` exactly in integer arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotBook {
    t_p: usize,
    entries: Vec<i8>, // row-major t_p x t_p
}

impl PilotBook {
    pub fn t_p(&self) -> usize {
        self.t_p
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.entries[i * self.t_p..(i + 1) * self.t_p]
    }

    /// Pilot sequence `i` as a complex column vector.
    pub fn sequence(&self, i: usize) -> CVec {
        CVec::from_iterator(self.t_p, self.row(i).iter().map(|&v| C64::new(v as f64, 0.0)))
    }

    /// Integer Gram matrix `Phi Phi^T`, exact.
    pub fn gram(&self) -> Vec<i64> {
        let t = self.t_p;
        let mut g = vec![0i64; t * t];
        for i in 0..t {
            for j in 0..t {
                g[i * t + j] = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(&a, &b)| a as i64 * b as i64)
                    .sum();
            }
        }
        g
    }
}

/// Sylvester construction; `t_p` must be a power of two. Row 0 is all ones.
pub fn walsh_hadamard_book(t_p: usize) -> Result<PilotBook> {
    if t_p == 0 || !t_p.is_power_of_two() {
        return Err(Error::Config(format!("pilot length {t_p} is not a power of two")));
    }
    let mut entries = vec![1i8; t_p * t_p];
    let mut size = 1;
    while size < t_p {
        for i in 0..size {
            for j in 0..size {
                let v = entries[i * t_p + j];
                entries[i * t_p + (j + size)] = v;
                entries[(i + size) * t_p + j] = v;
                entries[(i + size) * t_p + (j + size)] = -v;
            }
        }
        size *= 2;
    }
    Ok(PilotBook { t_p, entries })
}

/// How pilot indices are assigned to UEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotPolicy {
    /// First K book rows, one per UE; requires K <= T_p.
    Orthogonal,
    /// Uniformly random set of K distinct indices; requires K <= T_p.
    UniformNoReplacement,
    /// One pilot shared by the first r+1 UEs, the rest orthogonal.
    FixedReuse(usize),
    /// Per-block reuse level r drawn uniformly from {0, .., K-1}, then as
    /// `FixedReuse(r)`. Used for training sets that must cover every
    /// contamination level with one model.
    MixedReuse,
}

/// Pilot index per UE plus the per-UE collision sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotAssignment {
    /// Pilot book row index per UE.
    pub indices: Vec<usize>,
    /// `collision_sets[k]` lists the other UEs sharing UE k's pilot.
    pub collision_sets: Vec<Vec<usize>>,
}

impl PilotAssignment {
    pub fn from_indices(indices: Vec<usize>) -> Self {
        let k = indices.len();
        let collision_sets = (0..k)
            .map(|i| {
                (0..k)
                    .filter(|&j| j != i && indices[j] == indices[i])
                    .collect()
            })
            .collect();
        Self { indices, collision_sets }
    }

    pub fn num_ues(&self) -> usize {
        self.indices.len()
    }
}

/// Assign pilots to `k` UEs from a book of `t_p` sequences.
pub fn assign_pilots<R: Rng>(
    k: usize,
    t_p: usize,
    policy: PilotPolicy,
    rng: &mut R,
) -> Result<PilotAssignment> {
    if k == 0 {
        return Err(Error::Config("need at least one UE".into()));
    }
    match policy {
        PilotPolicy::Orthogonal => {
            if k > t_p {
                return Err(Error::Config(format!("orthogonal assignment needs K ({k}) <= T_p ({t_p})")));
            }
            Ok(PilotAssignment::from_indices((0..k).collect()))
        }
        PilotPolicy::UniformNoReplacement => {
            if k > t_p {
                return Err(Error::Config(format!("without-replacement needs K ({k}) <= T_p ({t_p})")));
            }
            // Partial Fisher-Yates over the index pool.
            let mut pool: Vec<usize> = (0..t_p).collect();
            for i in 0..k {
                let j = rng.random_range(i..t_p);
                pool.swap(i, j);
            }
            pool.truncate(k);
            Ok(PilotAssignment::from_indices(pool))
        }
        PilotPolicy::FixedReuse(r) => fixed_reuse_indices(k, t_p, r),
        PilotPolicy::MixedReuse => {
            let r = rng.random_range(0..k);
            fixed_reuse_indices(k, t_p, r)
        }
    }
}

fn fixed_reuse_indices(k: usize, t_p: usize, r: usize) -> Result<PilotAssignment> {
    if r + 1 > k {
        return Err(Error::Config(format!("fixed_reuse({r}) needs r+1 <= K ({k})")));
    }
    let distinct = 1 + (k - (r + 1));
    if distinct > t_p {
        return Err(Error::Config(format!(
            "fixed_reuse({r}) with K={k} needs {distinct} pilots but T_p={t_p}"
        )));
    }
    // UEs 0..=r share pilot 0; the rest take pilots 1, 2, ...
    let mut indices = vec![0usize; k];
    for (offset, idx) in indices.iter_mut().enumerate().skip(r + 1) {
        *idx = offset - r;
    }
    Ok(PilotAssignment::from_indices(indices))
}

/// Supported modulation alphabets, with the fixed prompt enumeration
/// `bpsk=0, qam4=1, psk8=2, qam16=3, qam64=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstellationId {
    Bpsk,
    Qam4,
    Psk8,
    Qam16,
    Qam64,
}

impl ConstellationId {
    pub fn all() -> [ConstellationId; 5] {
        [
            ConstellationId::Bpsk,
            ConstellationId::Qam4,
            ConstellationId::Psk8,
            ConstellationId::Qam16,
            ConstellationId::Qam64,
        ]
    }

    /// Modulation index carried in the query token.
    pub fn modulation_index(self) -> usize {
        match self {
            ConstellationId::Bpsk => 0,
            ConstellationId::Qam4 => 1,
            ConstellationId::Psk8 => 2,
            ConstellationId::Qam16 => 3,
            ConstellationId::Qam64 => 4,
        }
    }

    pub fn from_modulation_index(m: usize) -> Option<Self> {
        Self::all().into_iter().find(|c| c.modulation_index() == m)
    }

    pub fn num_points(self) -> usize {
        match self {
            ConstellationId::Bpsk => 2,
            ConstellationId::Qam4 => 4,
            ConstellationId::Psk8 => 8,
            ConstellationId::Qam16 => 16,
            ConstellationId::Qam64 => 64,
        }
    }
}

impl std::fmt::Display for ConstellationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstellationId::Bpsk => "bpsk",
            ConstellationId::Qam4 => "qam4",
            ConstellationId::Psk8 => "psk8",
            ConstellationId::Qam16 => "qam16",
            ConstellationId::Qam64 => "qam64",
        };
        f.write_str(s)
    }
}

/// Gray-labeled alphabet scaled to unit mean energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub id: ConstellationId,
    pub points: Vec<C64>,
}

/// Gray map for one PAM axis: 2 bits -> {-3,-1,1,3}.
const PAM4_GRAY: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
const PAM4_ORDER: [usize; 4] = [0, 1, 3, 2]; // bit pattern -> PAM4_GRAY position
/// Gray map for one PAM axis: 3 bits -> {-7,..,7}.
const PAM8_GRAY: [f64; 8] = [-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0];
const PAM8_ORDER: [usize; 8] = [0, 1, 3, 2, 6, 7, 5, 4];

pub fn make_constellation(id: ConstellationId) -> Constellation {
    let points = match id {
        ConstellationId::Bpsk => vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)],
        ConstellationId::Qam4 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            (0..4)
                .map(|i| {
                    let re = if (i >> 1) & 1 == 0 { 1.0 } else { -1.0 };
                    let im = if i & 1 == 0 { 1.0 } else { -1.0 };
                    C64::new(re * s, im * s)
                })
                .collect()
        }
        ConstellationId::Psk8 => (0..8usize)
            .map(|i| {
                let gray = i ^ (i >> 1);
                C64::from_polar(1.0, 2.0 * std::f64::consts::PI * gray as f64 / 8.0)
            })
            .collect(),
        ConstellationId::Qam16 => {
            let s = 1.0 / 10f64.sqrt();
            (0..16)
                .map(|i| {
                    let re = PAM4_GRAY[PAM4_ORDER[(i >> 2) & 3]];
                    let im = PAM4_GRAY[PAM4_ORDER[i & 3]];
                    C64::new(re * s, im * s)
                })
                .collect()
        }
        ConstellationId::Qam64 => {
            let s = 1.0 / 42f64.sqrt();
            (0..64)
                .map(|i| {
                    let re = PAM8_GRAY[PAM8_ORDER[(i >> 3) & 7]];
                    let im = PAM8_GRAY[PAM8_ORDER[i & 7]];
                    C64::new(re * s, im * s)
                })
                .collect()
        }
    };
    Constellation { id, points }
}

impl Constellation {
    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> C64 {
        self.points[rng.random_range(0..self.points.len())]
    }

    /// Squared distance to the closest alphabet point.
    pub fn distance_sqr(&self, v: C64) -> f64 {
        self.points
            .iter()
            .map(|p| (v - p).norm_sqr())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, v: C64, tol: f64) -> bool {
        self.distance_sqr(v) <= tol * tol
    }
}

/// Transmitted and received signals of one coherence block.
#[derive(Debug, Clone)]
pub struct FrameSignals {
    /// Per-AP N x T_p received pilot matrices.
    pub z: Vec<CMat>,
    /// Per-AP N-vector received in the data channel use.
    pub y: Vec<CVec>,
    /// Transmitted data symbols, one per UE.
    pub x: CVec,
    /// Noise realizations kept for test oracles.
    pub pilot_noise: Vec<CMat>,
    pub data_noise: Vec<CVec>,
}

/// `Z_l = sum_k h_{l,k} phi_{p_k}^T` without noise.
pub fn noiseless_pilot_signal(
    channels: &ChannelRealization,
    assignment: &PilotAssignment,
    book: &PilotBook,
) -> Vec<CMat> {
    let n = channels.h[0][0].len();
    channels
        .h
        .iter()
        .map(|row| {
            let mut z = CMat::zeros(n, book.t_p());
            for (k, h) in row.iter().enumerate() {
                let phi = book.row(assignment.indices[k]);
                for (j, &s) in phi.iter().enumerate() {
                    let s = C64::new(s as f64, 0.0);
                    for i in 0..n {
                        z[(i, j)] += h[i] * s;
                    }
                }
            }
            z
        })
        .collect()
}

/// `y_l = sum_k h_{l,k} x_k` without noise.
pub fn noiseless_data_signal(channels: &ChannelRealization, x: &CVec) -> Vec<CVec> {
    channels
        .h
        .iter()
        .map(|row| {
            let n = row[0].len();
            let mut y = CVec::zeros(n);
            for (k, h) in row.iter().enumerate() {
                y += h * x[k];
            }
            y
        })
        .collect()
}

fn complex_gaussian<R: Rng>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

/// Per-AP pilot noise matrices with i.i.d. CN(0, sigma2) entries.
/// Entries are drawn channel-use-major (column by column).
pub fn draw_pilot_noise<R: Rng>(l: usize, n: usize, t_p: usize, sigma2: f64, rng: &mut R) -> Vec<CMat> {
    (0..l)
        .map(|_| {
            let mut m = CMat::zeros(n, t_p);
            for j in 0..t_p {
                for i in 0..n {
                    m[(i, j)] = complex_gaussian(rng, sigma2);
                }
            }
            m
        })
        .collect()
}

pub fn draw_data_noise<R: Rng>(l: usize, n: usize, sigma2: f64, rng: &mut R) -> Vec<CVec> {
    (0..l)
        .map(|_| CVec::from_fn(n, |_, _| complex_gaussian(rng, sigma2)))
        .collect()
}

/// Received pilot matrices `Z_l` including receiver noise.
pub fn transmit_pilots<R: Rng>(
    channels: &ChannelRealization,
    assignment: &PilotAssignment,
    book: &PilotBook,
    sigma2: f64,
    rng: &mut R,
) -> Vec<CMat> {
    let n = channels.h[0][0].len();
    let noise = draw_pilot_noise(channels.num_aps(), n, book.t_p(), sigma2, rng);
    noiseless_pilot_signal(channels, assignment, book)
        .into_iter()
        .zip(noise)
        .map(|(z, w)| z + w)
        .collect()
}

/// Received data vectors `y_l` including receiver noise.
pub fn transmit_data<R: Rng>(
    channels: &ChannelRealization,
    x: &CVec,
    sigma2: f64,
    rng: &mut R,
) -> Vec<CVec> {
    let n = channels.h[0][0].len();
    let noise = draw_data_noise(channels.num_aps(), n, sigma2, rng);
    noiseless_data_signal(channels, x)
        .into_iter()
        .zip(noise)
        .map(|(y, w)| y + w)
        .collect()
}

/// Draw one data symbol per UE from its constellation.
pub fn sample_data_symbols<R: Rng>(task: &TaskConfig, rng: &mut R) -> CVec {
    CVec::from_iterator(
        task.num_ues(),
        task.constellations.iter().map(|&id| make_constellation(id).sample(rng)),
    )
}

/// Build the full frame for one coherence block. Draw order: data symbols,
/// then pilot noise (per AP), then data noise (per AP).
pub fn make_frame<R: Rng>(
    task: &TaskConfig,
    channels: &ChannelRealization,
    assignment: &PilotAssignment,
    book: &PilotBook,
    rng: &mut R,
) -> FrameSignals {
    let n = task.antennas_per_ap();
    let l = task.num_aps();
    let x = sample_data_symbols(task, rng);
    let pilot_noise = draw_pilot_noise(l, n, book.t_p(), task.noise_power, rng);
    let data_noise = draw_data_noise(l, n, task.noise_power, rng);
    let z = noiseless_pilot_signal(channels, assignment, book)
        .into_iter()
        .zip(&pilot_noise)
        .map(|(zs, w)| zs + w)
        .collect();
    let y = noiseless_data_signal(channels, &x)
        .into_iter()
        .zip(&data_noise)
        .map(|(ys, w)| ys + w)
        .collect();
    FrameSignals { z, y, x, pilot_noise, data_noise }
}
