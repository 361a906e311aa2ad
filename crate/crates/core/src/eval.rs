//! Monte-Carlo MSE evaluation of equalizers over fresh tasks and blocks.
//!
//! Every block is generated from a seed substream indexed by its block
//! number, so results are independent of chunking and thread count, and
//! two runs with the same spec and seed evaluate byte-identical blocks
//! (verified through the block digest).

use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::channel::{build_task, sample_channels, DeploymentConfig, TaskConfig};
use crate::frame::{
    assign_pilots, make_frame, walsh_hadamard_book, ConstellationId, FrameSignals,
    PilotAssignment, PilotBook, PilotPolicy,
};
use crate::lmmse::{lmmse_equalize, LmmseOptions};
use crate::model::{predict_all_users, Transformer};
use crate::prompt::PromptLayout;
use crate::quant::{quantize_frame, scaling_profile, Bits, QuantizedFrame, Quantizer, ScalingProfile};
use crate::seed::SeedStream;
use crate::{CVec, Error, Result};

/// Pilot assignment regime for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAssignment {
    Orthogonal,
    UniformNoReplacement,
    /// Fixed reuse level, clamped per block to the realized K-1.
    Reuse(usize),
    MixedReuse,
}

impl EvalAssignment {
    fn policy_for(self, k: usize) -> PilotPolicy {
        match self {
            EvalAssignment::Orthogonal => PilotPolicy::Orthogonal,
            EvalAssignment::UniformNoReplacement => PilotPolicy::UniformNoReplacement,
            EvalAssignment::Reuse(r) => PilotPolicy::FixedReuse(r.min(k.saturating_sub(1))),
            EvalAssignment::MixedReuse => PilotPolicy::MixedReuse,
        }
    }
}

/// One evaluation condition.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSpec {
    pub deployment: DeploymentConfig,
    pub t_p: usize,
    pub k_max: usize,
    /// Fix K instead of drawing it from the deployment range.
    pub fixed_k: Option<usize>,
    pub noise_power: f64,
    pub constellation_set: Vec<ConstellationId>,
    pub bits: Bits,
    pub assignment: EvalAssignment,
    pub blocks: usize,
    pub seed: u64,
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        self.deployment.validate()?;
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        if self.constellation_set.is_empty() {
            return Err(Error::Config("constellation_set must be non-empty".into()));
        }
        if !self.t_p.is_power_of_two() {
            return Err(Error::Config("t_p must be a power of two".into()));
        }
        Ok(())
    }

    pub fn prompt_layout(&self) -> PromptLayout {
        PromptLayout::new(
            self.deployment.antennas_per_ap,
            self.deployment.num_aps(),
            self.t_p,
            self.k_max,
        )
    }
}

/// Everything an equalizer may consume for one coherence block.
pub struct EvalBlock {
    pub task: TaskConfig,
    pub assignment: PilotAssignment,
    pub book: Arc<PilotBook>,
    pub frame: FrameSignals,
    /// Signals quantized at the spec's resolution.
    pub quantized: QuantizedFrame,
    /// Unquantized (bypass) signals for infinite-fronthaul baselines.
    pub unquantized: QuantizedFrame,
    pub profile: ScalingProfile,
    pub quantizer: Arc<Quantizer>,
}

/// A per-user symbol estimator operating on one block.
pub trait Equalizer: Send + Sync {
    fn name(&self) -> String;

    fn equalize(&self, block: &EvalBlock) -> Result<CVec>;

    /// Batched entry point; the default evaluates blocks in parallel.
    fn equalize_batch(&self, blocks: &[EvalBlock]) -> Result<Vec<CVec>> {
        blocks.par_iter().map(|b| self.equalize(b)).collect()
    }
}

/// Bussgang-LMMSE on the quantized fronthaul signals.
pub struct LmmseEqualizer {
    pub opts: LmmseOptions,
}

impl Equalizer for LmmseEqualizer {
    fn name(&self) -> String {
        "lmmse".into()
    }

    fn equalize(&self, b: &EvalBlock) -> Result<CVec> {
        lmmse_equalize(
            &b.quantized,
            &b.assignment,
            &b.book,
            &b.task,
            &b.quantizer,
            &b.profile,
            self.opts,
        )
    }
}

/// LMMSE with infinite fronthaul capacity: sees the unquantized signals
/// regardless of the sweep's bit width.
pub struct LmmseInfEqualizer {
    pub opts: LmmseOptions,
}

impl Equalizer for LmmseInfEqualizer {
    fn name(&self) -> String {
        "lmmse_inf".into()
    }

    fn equalize(&self, b: &EvalBlock) -> Result<CVec> {
        lmmse_equalize(
            &b.unquantized,
            &b.assignment,
            &b.book,
            &b.task,
            &Quantizer::Bypass,
            &b.profile,
            self.opts,
        )
    }
}

/// The in-context transformer, with or without large-scale tokens.
pub struct IclEqualizer {
    pub model: Arc<Transformer<f32>>,
    pub layout: PromptLayout,
    pub label: String,
}

impl IclEqualizer {
    pub fn new(model: Arc<Transformer<f32>>, layout: PromptLayout) -> Self {
        let label = if layout.with_large_scale { "icl".into() } else { "icl_no_ls".into() };
        Self { model, layout, label }
    }
}

impl Equalizer for IclEqualizer {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn equalize(&self, b: &EvalBlock) -> Result<CVec> {
        predict_all_users(
            &self.model,
            &self.layout,
            &b.task,
            &b.profile,
            &b.quantized,
            &b.assignment,
            &b.book,
        )
    }
}

/// Oracle that returns the transmitted symbols; MSE 0 by construction.
pub struct PerfectEqualizer;

impl Equalizer for PerfectEqualizer {
    fn name(&self) -> String {
        "perfect".into()
    }

    fn equalize(&self, b: &EvalBlock) -> Result<CVec> {
        Ok(b.frame.x.clone())
    }
}

/// Baseline that always outputs zero; MSE 1 on unit-energy constellations.
pub struct ZeroEqualizer;

impl Equalizer for ZeroEqualizer {
    fn name(&self) -> String {
        "zero".into()
    }

    fn equalize(&self, b: &EvalBlock) -> Result<CVec> {
        Ok(CVec::zeros(b.task.num_ues()))
    }
}

/// Evaluation outcome: pooled per-user-symbol MSE with a normal-theory
/// 95% interval, the raw per-user squared errors (block-major order, for
/// paired comparisons), and a digest of the evaluated blocks.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mse: f64,
    pub ci95: f64,
    pub samples: usize,
    pub blocks: usize,
    pub digest: String,
    pub errors: Vec<f64>,
}

fn generate_block(spec: &EvalSpec, book: &Arc<PilotBook>, quantizer: &Arc<Quantizer>, stream: &SeedStream) -> Result<EvalBlock> {
    let mut rng = stream.rng();
    let mut deployment = spec.deployment.clone();
    if let Some(k) = spec.fixed_k {
        deployment.ue_count_range = (k, k);
    }
    let task = build_task(&deployment, spec.noise_power, &spec.constellation_set, &mut rng)?;
    let k = task.num_ues();
    let assignment = assign_pilots(k, spec.t_p, spec.assignment.policy_for(k), &mut rng)?;
    let channels = sample_channels(&task, &mut rng);
    let frame = make_frame(&task, &channels, &assignment, book, &mut rng);
    let profile = scaling_profile(&task);
    let quantized = quantize_frame(&frame, quantizer, &profile)?;
    let unquantized = quantize_frame(&frame, &Quantizer::Bypass, &profile)?;
    Ok(EvalBlock {
        task,
        assignment,
        book: Arc::clone(book),
        frame,
        quantized,
        unquantized,
        profile,
        quantizer: Arc::clone(quantizer),
    })
}

fn digest_block(hasher: &mut Sha256, block: &EvalBlock) {
    for idx in &block.assignment.indices {
        hasher.update((*idx as u64).to_le_bytes());
    }
    for v in block.frame.x.iter() {
        hasher.update(v.re.to_le_bytes());
        hasher.update(v.im.to_le_bytes());
    }
    for v in block.quantized.y_stacked.iter() {
        hasher.update(v.re.to_le_bytes());
        hasher.update(v.im.to_le_bytes());
    }
}

const CHUNK_BLOCKS: usize = 256;

/// Monte-Carlo per-symbol MSE of one equalizer under one condition.
pub fn evaluate_mse(equalizer: &dyn Equalizer, spec: &EvalSpec) -> Result<EvalResult> {
    spec.validate()?;
    let book = Arc::new(walsh_hadamard_book(spec.t_p)?);
    let quantizer = Arc::new(Quantizer::design(spec.bits)?);
    let root = SeedStream::root(spec.seed).child("eval");
    let mut errors = Vec::with_capacity(spec.blocks);
    let mut hasher = Sha256::new();
    let mut start = 0usize;
    while start < spec.blocks {
        let end = (start + CHUNK_BLOCKS).min(spec.blocks);
        let blocks: Vec<EvalBlock> = (start..end)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|i| generate_block(spec, &book, &quantizer, &root.child_idx("block", i as u64)))
            .collect::<Result<_>>()?;
        for b in &blocks {
            digest_block(&mut hasher, b);
        }
        let outputs = equalizer.equalize_batch(&blocks)?;
        for (block, x_hat) in blocks.iter().zip(outputs) {
            for ue in 0..block.task.num_ues() {
                errors.push((x_hat[ue] - block.frame.x[ue]).norm_sqr());
            }
        }
        start = end;
    }
    let n = errors.len();
    let mse = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mse) * (e - mse)).sum::<f64>() / (n.saturating_sub(1)) as f64;
    let ci95 = 1.96 * (var / n as f64).sqrt();
    Ok(EvalResult {
        mse,
        ci95,
        samples: n,
        blocks: spec.blocks,
        digest: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        errors,
    })
}

/// 95% CI of the mean difference between two paired error vectors.
pub fn paired_delta_ci(a: &EvalResult, b: &EvalResult) -> Result<(f64, f64)> {
    if a.errors.len() != b.errors.len() {
        return Err(Error::Dim("paired results have different sample counts".into()));
    }
    if a.digest != b.digest {
        return Err(Error::Config("paired results evaluated different blocks".into()));
    }
    let n = a.errors.len();
    let deltas: Vec<f64> = a.errors.iter().zip(&b.errors).map(|(x, y)| x - y).collect();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * (var / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::INF_BITS;

    fn quick_spec(blocks: usize, bits: Bits, assignment: EvalAssignment) -> EvalSpec {
        EvalSpec {
            deployment: DeploymentConfig::desk_scale(),
            t_p: 4,
            k_max: 2,
            fixed_k: None,
            noise_power: crate::channel::noise_power_for_snr(
                &DeploymentConfig::desk_scale(),
                24.0,
                2000,
                &mut SeedStream::root(0).rng(),
            ),
            constellation_set: ConstellationId::all().to_vec(),
            bits,
            assignment,
            blocks,
            seed: 11,
        }
    }

    #[test]
    fn perfect_equalizer_zero_mse() {
        let spec = quick_spec(50, INF_BITS, EvalAssignment::Orthogonal);
        let r = evaluate_mse(&PerfectEqualizer, &spec).unwrap();
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn zero_equalizer_unit_mse() {
        let spec = quick_spec(2000, INF_BITS, EvalAssignment::Orthogonal);
        let r = evaluate_mse(&ZeroEqualizer, &spec).unwrap();
        assert!((r.mse - 1.0).abs() < 3.0 * r.ci95 + 0.02, "mse {} ci {}", r.mse, r.ci95);
    }

    #[test]
    fn lmmse_bypass_high_snr_low_mse() {
        let mut spec = quick_spec(2000, INF_BITS, EvalAssignment::Orthogonal);
        spec.fixed_k = Some(1);
        let r = evaluate_mse(&LmmseEqualizer { opts: LmmseOptions::default() }, &spec).unwrap();
        assert!(r.mse < 1e-2, "K=1 bypass MSE {}", r.mse);
    }

    #[test]
    fn same_seed_same_digest_and_mse() {
        let spec = quick_spec(200, Bits::Finite(4), EvalAssignment::MixedReuse);
        let a = evaluate_mse(&LmmseEqualizer { opts: LmmseOptions::default() }, &spec).unwrap();
        let b = evaluate_mse(&LmmseEqualizer { opts: LmmseOptions::default() }, &spec).unwrap();
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.mse, b.mse);
        let c = evaluate_mse(&ZeroEqualizer, &spec).unwrap();
        assert_eq!(a.digest, c.digest);
    }

    #[test]
    fn lmmse_inf_ignores_bits() {
        let coarse = quick_spec(400, Bits::Finite(1), EvalAssignment::Orthogonal);
        let fine = quick_spec(400, Bits::Finite(8), EvalAssignment::Orthogonal);
        let e = LmmseInfEqualizer { opts: LmmseOptions::default() };
        let a = evaluate_mse(&e, &coarse).unwrap();
        let b = evaluate_mse(&e, &fine).unwrap();
        assert_eq!(a.mse, b.mse);
    }

    #[test]
    fn lmmse_coarse_worse_than_fine() {
        let coarse = quick_spec(3000, Bits::Finite(1), EvalAssignment::Orthogonal);
        let fine = quick_spec(3000, Bits::Finite(8), EvalAssignment::Orthogonal);
        let e = LmmseEqualizer { opts: LmmseOptions::default() };
        let a = evaluate_mse(&e, &coarse).unwrap();
        let b = evaluate_mse(&e, &fine).unwrap();
        assert!(a.mse > b.mse, "b=1 mse {} vs b=8 mse {}", a.mse, b.mse);
    }

    #[test]
    fn paired_delta_tighter_than_unpaired() {
        let spec = quick_spec(500, Bits::Finite(8), EvalAssignment::MixedReuse);
        let a = evaluate_mse(&LmmseEqualizer { opts: LmmseOptions::default() }, &spec).unwrap();
        let b = evaluate_mse(&LmmseInfEqualizer { opts: LmmseOptions::default() }, &spec).unwrap();
        let (_, d_ci) = paired_delta_ci(&a, &b).unwrap();
        let unpaired = (a.ci95 * a.ci95 + b.ci95 * b.ci95).sqrt();
        assert!(d_ci < unpaired, "paired {d_ci} vs unpaired {unpaired}");
    }

    #[test]
    fn reuse_clamped_when_k_small() {
        // K can be 1; Reuse(3) must clamp instead of erroring.
        let spec = quick_spec(100, INF_BITS, EvalAssignment::Reuse(3));
        let r = evaluate_mse(&ZeroEqualizer, &spec).unwrap();
        assert_eq!(r.blocks, 100);
    }

    #[test]
    fn fixed_k_respected() {
        let mut spec = quick_spec(30, INF_BITS, EvalAssignment::Orthogonal);
        spec.fixed_k = Some(2);
        let r = evaluate_mse(&ZeroEqualizer, &spec).unwrap();
        assert_eq!(r.samples, 60);
    }
}
