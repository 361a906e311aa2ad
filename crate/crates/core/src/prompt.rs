//! Serialization of (task info, context pairs, received data signal) into
//! the fixed-layout real token sequence consumed by the transformer.
//!
//! Full layout, in order:
//!   1. one token with UE k's large-scale coefficients (L dB-encoded reals),
//!   2. `K_max - 1` collider slots with the large-scale coefficients of the
//!      UEs sharing k's pilot, sorted by descending mean, zero-padded and
//!      masked when absent,
//!   3. `T_p` pairs of (received pilot token, transmitted pilot token),
//!   4. the query token: received data signal concatenated with the
//!      modulation index.
//!
//! The no-large-scale layout drops blocks (1)-(2) and is exactly a suffix
//! of the full layout, so one stored sequence serves both.

use crate::channel::TaskConfig;
use crate::frame::{PilotAssignment, PilotBook};
use crate::quant::{QuantizedFrame, ScalingProfile};
use crate::{CMat, CVec, Error, Result};

/// Bumped whenever the token layout changes; embedded in datasets and
/// checkpoints to prevent silent mixing.
pub const LAYOUT_VERSION: &str = "tokens-v1";

/// Clipping range of the dB-encoded large-scale entries.
const LS_CLIP: f64 = 5.0;

/// Static token-geometry of a prompt; a pure function of (N, L, T_p, K_max).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptLayout {
    pub antennas_per_ap: usize,
    pub num_aps: usize,
    pub t_p: usize,
    pub k_max: usize,
    pub with_large_scale: bool,
}

impl PromptLayout {
    pub fn new(antennas_per_ap: usize, num_aps: usize, t_p: usize, k_max: usize) -> Self {
        Self { antennas_per_ap, num_aps, t_p, k_max, with_large_scale: true }
    }

    pub fn without_large_scale(mut self) -> Self {
        self.with_large_scale = false;
        self
    }

    /// Stacked receive dimension NL.
    pub fn nl(&self) -> usize {
        self.antennas_per_ap * self.num_aps
    }

    /// Width of every token: `max(2 NL + 1, L)`.
    pub fn token_dim(&self) -> usize {
        (2 * self.nl() + 1).max(self.num_aps)
    }

    /// Number of leading large-scale tokens (0 for the ablation layout).
    pub fn ls_tokens(&self) -> usize {
        if self.with_large_scale {
            self.k_max
        } else {
            0
        }
    }

    /// Sequence length: `[1 + (K_max - 1)] + 2 T_p + 1`.
    pub fn seq_len(&self) -> usize {
        self.ls_tokens() + 2 * self.t_p + 1
    }
}

/// One encoded prompt: `seq_len x token_dim` reals plus validity flags for
/// the padded collider slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f64>, // row-major seq_len x token_dim
    pub seq_len: usize,
    pub token_dim: usize,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    fn zeros(seq_len: usize, token_dim: usize) -> Self {
        Self {
            tokens: vec![0.0; seq_len * token_dim],
            seq_len,
            token_dim,
            mask: vec![true; seq_len],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.token_dim..(i + 1) * self.token_dim]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tokens[i * self.token_dim..(i + 1) * self.token_dim]
    }

    /// Drop the leading large-scale tokens, producing the ablation layout.
    pub fn strip_large_scale(&self, layout: &PromptLayout) -> TokenSequence {
        let ls = layout.ls_tokens();
        TokenSequence {
            tokens: self.tokens[ls * self.token_dim..].to_vec(),
            seq_len: self.seq_len - ls,
            token_dim: self.token_dim,
            mask: self.mask[ls..].to_vec(),
        }
    }
}

/// dB-domain encoding of one large-scale coefficient relative to the noise
/// power: `0.1 * 10 log10(r / sigma^2)`, clipped to [-5, 5].
pub fn encode_large_scale(r: f64, sigma2: f64) -> f64 {
    if r <= 0.0 {
        return -LS_CLIP;
    }
    if sigma2 <= 0.0 {
        return LS_CLIP;
    }
    (0.1 * 10.0 * (r / sigma2).log10()).clamp(-LS_CLIP, LS_CLIP)
}

/// Divide each stacked receive entry by its AP's quantizer scale so the
/// real components are approximately unit variance.
pub fn normalize_stacked(values: &CVec, profile: &ScalingProfile, n: usize) -> Vec<f64> {
    let nl = values.len();
    let mut out = vec![0.0; 2 * nl];
    for i in 0..nl {
        let s = profile.s[i / n];
        out[i] = values[i].re / s;
        out[nl + i] = values[i].im / s;
    }
    out
}

/// Encode the prompt for UE `ue_index` from one quantized coherence block.
pub fn encode_prompt(
    layout: &PromptLayout,
    task: &TaskConfig,
    profile: &ScalingProfile,
    quantized: &QuantizedFrame,
    assignment: &PilotAssignment,
    book: &PilotBook,
    ue_index: usize,
) -> Result<TokenSequence> {
    let n = layout.antennas_per_ap;
    let l = layout.num_aps;
    let nl = layout.nl();
    if task.num_aps() != l || task.antennas_per_ap() != n {
        return Err(Error::Dim("prompt layout does not match task geometry".into()));
    }
    if quantized.z_stacked.nrows() != nl || quantized.z_stacked.ncols() != layout.t_p {
        return Err(Error::Dim(format!(
            "pilot block is {}x{}, layout wants {}x{}",
            quantized.z_stacked.nrows(),
            quantized.z_stacked.ncols(),
            nl,
            layout.t_p
        )));
    }
    if ue_index >= task.num_ues() {
        return Err(Error::Dim(format!("UE index {ue_index} out of range")));
    }
    let colliders = &assignment.collision_sets[ue_index];
    if layout.with_large_scale && colliders.len() > layout.k_max - 1 {
        return Err(Error::Dim(format!(
            "{} colliders exceed the {} layout slots",
            colliders.len(),
            layout.k_max - 1
        )));
    }

    let mut seq = TokenSequence::zeros(layout.seq_len(), layout.token_dim());
    let mut row = 0usize;

    if layout.with_large_scale {
        // (1) own large-scale token.
        for ap in 0..l {
            seq.row_mut(row)[ap] = encode_large_scale(task.large_scale[ap][ue_index], task.noise_power);
        }
        row += 1;
        // (2) collider tokens, canonical order: descending mean encoded
        // value, ties by UE index.
        let mut encoded: Vec<(Vec<f64>, usize)> = colliders
            .iter()
            .map(|&j| {
                let v: Vec<f64> = (0..l)
                    .map(|ap| encode_large_scale(task.large_scale[ap][j], task.noise_power))
                    .collect();
                (v, j)
            })
            .collect();
        encoded.sort_by(|(a, ia), (b, ib)| {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            mb.partial_cmp(&ma).unwrap().then(ia.cmp(ib))
        });
        for slot in 0..layout.k_max - 1 {
            if let Some((v, _)) = encoded.get(slot) {
                seq.row_mut(row)[..l].copy_from_slice(v);
            } else {
                seq.mask[row] = false;
            }
            row += 1;
        }
    }

    // (3) context pairs: received token then transmitted-pilot token.
    let pilot = book.row(assignment.indices[ue_index]);
    for i in 0..layout.t_p {
        let col: CVec = quantized.z_stacked.column(i).into_owned();
        let normalized = normalize_stacked(&col, profile, n);
        seq.row_mut(row)[..2 * nl].copy_from_slice(&normalized);
        row += 1;
        let t = seq.row_mut(row);
        t[0] = pilot[i] as f64; // real part; Walsh pilots are real
        t[1] = 0.0;
        row += 1;
    }

    // (4) query token: normalized received data signal + modulation index.
    let normalized = normalize_stacked(&quantized.y_stacked, profile, n);
    let q = seq.row_mut(row);
    q[..2 * nl].copy_from_slice(&normalized);
    q[2 * nl] = task.constellations[ue_index].modulation_index() as f64;

    Ok(seq)
}

/// Ablation encoder: identical pair and query tokens, no large-scale block.
pub fn encode_prompt_no_largescale(
    layout: &PromptLayout,
    task: &TaskConfig,
    profile: &ScalingProfile,
    quantized: &QuantizedFrame,
    assignment: &PilotAssignment,
    book: &PilotBook,
    ue_index: usize,
) -> Result<TokenSequence> {
    let stripped = layout.without_large_scale();
    encode_prompt(&stripped, task, profile, quantized, assignment, book, ue_index)
}

/// Invert the normalization of the received-pilot tokens; test/debug aid.
pub fn decode_pair_tokens(
    seq: &TokenSequence,
    layout: &PromptLayout,
    profile: &ScalingProfile,
) -> (CMat, Vec<f64>) {
    let n = layout.antennas_per_ap;
    let nl = layout.nl();
    let base = layout.ls_tokens();
    let mut z = CMat::zeros(nl, layout.t_p);
    let mut pilots = Vec::with_capacity(layout.t_p);
    for i in 0..layout.t_p {
        let rx = seq.row(base + 2 * i);
        for r in 0..nl {
            let s = profile.s[r / n];
            z[(r, i)] = crate::C64::new(rx[r] * s, rx[nl + r] * s);
        }
        pilots.push(seq.row(base + 2 * i + 1)[0]);
    }
    (z, pilots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channels, TaskConfig};
    use crate::frame::{
        assign_pilots, make_frame, walsh_hadamard_book, ConstellationId, PilotAssignment,
        PilotPolicy,
    };
    use crate::quant::{quantize_frame, scaling_profile, Quantizer};
    use crate::seed::SeedStream;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> rand_chacha::ChaCha12Rng {
        SeedStream::root(seed).rng()
    }

    fn demo_task(l: usize, k: usize, n: usize) -> TaskConfig {
        let corr: Vec<Vec<crate::CMat>> = (0..l)
            .map(|li| {
                (0..k)
                    .map(|ki| crate::CMat::identity(n, n) * crate::C64::new(1.0 + (li + ki) as f64, 0.0))
                    .collect()
            })
            .collect();
        TaskConfig::new(0.25, vec![[0.0, 0.0]; k], vec![ConstellationId::Bpsk; k], corr).unwrap()
    }

    #[test]
    fn layout_dimensions() {
        let full = PromptLayout::new(2, 4, 8, 4);
        assert_eq!(full.seq_len(), 21);
        assert_eq!(full.token_dim(), 17);
        assert_eq!(full.without_large_scale().seq_len(), 17);

        let desk = PromptLayout::new(2, 2, 4, 2);
        assert_eq!(desk.seq_len(), 11);
        assert_eq!(desk.token_dim(), 9);
    }

    fn encode_demo(
        k: usize,
        policy: PilotPolicy,
        seed: u64,
    ) -> (PromptLayout, TaskConfig, ScalingProfile, QuantizedFrame, PilotAssignment, crate::frame::PilotBook)
    {
        let layout = PromptLayout::new(2, 2, 4, 4.max(k));
        let task = demo_task(2, k, 2);
        let book = walsh_hadamard_book(4).unwrap();
        let mut g = rng(seed);
        let asn = assign_pilots(k, 4, policy, &mut g).unwrap();
        let ch = sample_channels(&task, &mut g);
        let frame = make_frame(&task, &ch, &asn, &book, &mut g);
        let profile = scaling_profile(&task);
        let q = quantize_frame(&frame, &Quantizer::Bypass, &profile).unwrap();
        (layout, task, profile, q, asn, book)
    }

    #[test]
    fn no_colliders_blank_slots() {
        let (layout, task, profile, q, asn, book) = encode_demo(1, PilotPolicy::Orthogonal, 1);
        let seq = encode_prompt(&layout, &task, &profile, &q, &asn, &book, 0).unwrap();
        assert_eq!(seq.seq_len, layout.seq_len());
        for slot in 1..layout.k_max {
            assert!(!seq.mask[slot]);
            assert!(seq.row(slot).iter().all(|&v| v == 0.0));
        }
        // BPSK query carries modulation index 0 in the last payload entry.
        let q_row = seq.row(seq.seq_len - 1);
        assert_eq!(q_row[2 * layout.nl()], 0.0);
    }

    #[test]
    fn modulation_index_in_query() {
        let (layout, mut task, profile, q, asn, book) = encode_demo(1, PilotPolicy::Orthogonal, 2);
        task.constellations[0] = ConstellationId::Qam64;
        let seq = encode_prompt(&layout, &task, &profile, &q, &asn, &book, 0).unwrap();
        assert_eq!(seq.row(seq.seq_len - 1)[2 * layout.nl()], 4.0);
    }

    #[test]
    fn large_scale_encoding_values() {
        assert_abs_diff_eq!(encode_large_scale(1.0, 1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(encode_large_scale(10f64.powf(2.4), 1.0), 2.4, epsilon = 1e-12);
        assert_eq!(encode_large_scale(1e30, 1.0), 5.0);
        assert_eq!(encode_large_scale(0.0, 1.0), -5.0);
        assert_eq!(encode_large_scale(1e-30, 1.0), -5.0);
    }

    #[test]
    fn pair_tokens_shared_between_layouts() {
        let (layout, task, profile, q, asn, book) = encode_demo(3, PilotPolicy::MixedReuse, 3);
        let full = encode_prompt(&layout, &task, &profile, &q, &asn, &book, 0).unwrap();
        let no_ls = encode_prompt_no_largescale(&layout, &task, &profile, &q, &asn, &book, 0).unwrap();
        assert_eq!(no_ls.seq_len, 2 * layout.t_p + 1);
        assert_eq!(full.strip_large_scale(&layout), no_ls);
    }

    #[test]
    fn round_trip_pair_tokens() {
        let (layout, task, profile, q, asn, book) = encode_demo(2, PilotPolicy::Orthogonal, 4);
        let seq = encode_prompt(&layout, &task, &profile, &q, &asn, &book, 1).unwrap();
        let (z, pilots) = decode_pair_tokens(&seq, &layout, &profile);
        for i in 0..layout.nl() {
            for j in 0..layout.t_p {
                let err = (z[(i, j)] - q.z_stacked[(i, j)]).norm();
                assert!(err <= 1e-12 * q.z_stacked[(i, j)].norm().max(1.0));
            }
        }
        let expected: Vec<f64> = book.row(asn.indices[1]).iter().map(|&v| v as f64).collect();
        assert_eq!(pilots, expected);
    }

    #[test]
    fn collider_order_canonical() {
        // All four UEs share a pilot; permuting the collision-set listing
        // order must not change the encoding.
        let (layout, task, profile, q, _, book) = encode_demo(4, PilotPolicy::FixedReuse(3), 5);
        let a = PilotAssignment::from_indices(vec![0, 0, 0, 0]);
        let seq_a = encode_prompt(&layout, &task, &profile, &q, &a, &book, 0).unwrap();
        let mut b = a.clone();
        b.collision_sets[0] = vec![3, 1, 2];
        let seq_b = encode_prompt(&layout, &task, &profile, &q, &b, &book, 0).unwrap();
        assert_eq!(seq_a, seq_b);

        // Collider slots are sorted by descending mean encoded value.
        let l = layout.num_aps;
        let mean = |row: &[f64]| row[..l].iter().sum::<f64>() / l as f64;
        assert!(mean(seq_a.row(1)) >= mean(seq_a.row(2)));
        assert!(mean(seq_a.row(2)) >= mean(seq_a.row(3)));
    }

    #[test]
    fn too_many_colliders_rejected() {
        let layout = PromptLayout::new(2, 2, 4, 2); // one collider slot
        let task = demo_task(2, 3, 2);
        let book = walsh_hadamard_book(4).unwrap();
        let asn = PilotAssignment::from_indices(vec![0, 0, 0]);
        let mut g = rng(6);
        let ch = sample_channels(&task, &mut g);
        let frame = make_frame(&task, &ch, &asn, &book, &mut g);
        let profile = scaling_profile(&task);
        let q = quantize_frame(&frame, &Quantizer::Bypass, &profile).unwrap();
        assert!(encode_prompt(&layout, &task, &profile, &q, &asn, &book, 0).is_err());
    }

    #[test]
    fn normalized_entries_near_unit_variance() {
        let task = demo_task(2, 2, 2);
        let book = walsh_hadamard_book(4).unwrap();
        let profile = scaling_profile(&task);
        let mut g = rng(7);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..2000 {
            let asn = assign_pilots(2, 4, PilotPolicy::Orthogonal, &mut g).unwrap();
            let ch = sample_channels(&task, &mut g);
            let frame = make_frame(&task, &ch, &asn, &book, &mut g);
            let q = quantize_frame(&frame, &Quantizer::Bypass, &profile).unwrap();
            let v = normalize_stacked(&q.y_stacked, &profile, 2);
            acc += v.iter().map(|e| e * e).sum::<f64>();
            count += v.len();
        }
        let var = acc / count as f64;
        assert!((var - 1.0).abs() < 0.1, "normalized variance {var}");
    }
}
