//! Multi-task dataset generation: one record per (coherence block, UE),
//! holding the encoded full-layout prompt and the transmitted symbol.
//!
//! Records are generated from named seed substreams per task and per
//! example, so shards generated independently concatenate to exactly the
//! dataset a single pass would produce. On disk a dataset is an
//! `index.json` plus fixed-record binary shards (little-endian f32 tokens).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::channel::{build_task, sample_channels, DeploymentConfig, TaskConfig};
use crate::frame::{
    assign_pilots, make_frame, walsh_hadamard_book, ConstellationId, PilotAssignment, PilotBook,
    PilotPolicy,
};
use crate::prompt::{encode_prompt, PromptLayout, TokenSequence, LAYOUT_VERSION};
use crate::quant::{quantize_frame, scaling_profile, Bits, Quantizer};
use crate::seed::SeedStream;
use crate::{C64, Error, Result};

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub deployment: DeploymentConfig,
    pub t_p: usize,
    /// Prompt-layout UE capacity; at least the deployment's K_max.
    pub k_max: usize,
    pub noise_power: f64,
    pub constellation_set: Vec<ConstellationId>,
    pub assignment_policy: PilotPolicy,
    /// Fronthaul resolutions sampled uniformly per example, so one model
    /// covers the whole capacity sweep.
    pub bits_mix: Vec<Bits>,
    pub num_tasks: usize,
    pub examples_per_task: usize,
    pub master_seed: u64,
    pub layout_version: String,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.deployment.validate()?;
        if self.num_tasks == 0 || self.examples_per_task == 0 {
            return Err(Error::Config("num_tasks and examples_per_task must be >= 1".into()));
        }
        if self.layout_version != LAYOUT_VERSION {
            return Err(Error::Layout(format!(
                "dataset layout {} != supported {}",
                self.layout_version, LAYOUT_VERSION
            )));
        }
        if self.k_max < self.deployment.ue_count_range.1 {
            return Err(Error::Config("k_max below the deployment's UE range".into()));
        }
        if self.constellation_set.is_empty() || self.bits_mix.is_empty() {
            return Err(Error::Config("constellation_set and bits_mix must be non-empty".into()));
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

/// One prompt record: full-layout tokens (f32) plus target and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub task_index: u32,
    pub ue: u8,
    pub k: u8,
    pub constellation: ConstellationId,
    pub bits: Bits,
    pub colliders: u8,
    pub target: [f32; 2],
    pub tokens: Vec<f32>,
}

/// A fully materialized dataset.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub spec: DatasetSpec,
    pub layout: PromptLayout,
    pub records: Vec<PromptRecord>,
}

/// Which token view training consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetView {
    Full,
    NoLargeScale,
}

impl InMemoryDataset {
    pub fn seq_len(&self, view: DatasetView) -> usize {
        match view {
            DatasetView::Full => self.layout.seq_len(),
            DatasetView::NoLargeScale => self.layout.without_large_scale().seq_len(),
        }
    }

    /// Token slice of a record under the requested view.
    pub fn tokens_of<'a>(&self, rec: &'a PromptRecord, view: DatasetView) -> &'a [f32] {
        match view {
            DatasetView::Full => &rec.tokens,
            DatasetView::NoLargeScale => {
                let skip = self.layout.ls_tokens() * self.layout.token_dim();
                &rec.tokens[skip..]
            }
        }
    }
}

/// One generated coherence block: prompts for every UE plus targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompts: Vec<TokenSequence>,
    pub targets: Vec<C64>,
    pub assignment: PilotAssignment,
    pub bits: Bits,
}

/// Quantizers designed once per distinct entry of the bits mix.
pub struct QuantizerBank {
    bits: Vec<Bits>,
    quantizers: Vec<Quantizer>,
}

impl QuantizerBank {
    pub fn design(bits: &[Bits]) -> Result<Self> {
        let quantizers =
            bits.iter().map(|&b| Quantizer::design(b)).collect::<Result<Vec<_>>>()?;
        Ok(Self { bits: bits.to_vec(), quantizers })
    }

    pub fn get(&self, bits: Bits) -> Option<&Quantizer> {
        self.bits.iter().position(|&b| b == bits).map(|i| &self.quantizers[i])
    }
}

/// Generate one fresh coherence block for a task and encode all K prompts.
///
/// Draw order from the stream: pilot assignment, bits choice, channels,
/// frame signals. The target symbols never enter the prompts.
pub fn generate_example(
    task: &TaskConfig,
    layout: &PromptLayout,
    book: &PilotBook,
    policy: PilotPolicy,
    bits_mix: &[Bits],
    bank: &QuantizerBank,
    stream: &SeedStream,
) -> Result<Example> {
    let mut rng = stream.rng();
    let k = task.num_ues();
    let assignment = assign_pilots(k, book.t_p(), policy, &mut rng)?;
    let bits = bits_mix[rng.random_range(0..bits_mix.len())];
    let quantizer = bank
        .get(bits)
        .ok_or_else(|| Error::Config(format!("bits {bits} missing from quantizer bank")))?;
    let channels = sample_channels(task, &mut rng);
    let frame = make_frame(task, &channels, &assignment, book, &mut rng);
    let profile = scaling_profile(task);
    let quantized = quantize_frame(&frame, quantizer, &profile)?;
    let prompts = (0..k)
        .map(|ue| encode_prompt(layout, task, &profile, &quantized, &assignment, book, ue))
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..k).map(|ue| frame.x[ue]).collect();
    Ok(Example { prompts, targets, assignment, bits })
}

fn bits_code(b: Bits) -> u8 {
    match b.finite() {
        Some(v) => v as u8,
        None => u8::MAX,
    }
}

fn bits_from_code(c: u8) -> Bits {
    if c == u8::MAX {
        crate::quant::INF_BITS
    } else {
        Bits::Finite(c as u32)
    }
}

fn constellation_code(c: ConstellationId) -> u8 {
    c.modulation_index() as u8
}

fn push_example_records(records: &mut Vec<PromptRecord>, task: &TaskConfig, t: u32, ex: &Example) {
    for (ue, (prompt, target)) in ex.prompts.iter().zip(&ex.targets).enumerate() {
        records.push(PromptRecord {
            task_index: t,
            ue: ue as u8,
            k: task.num_ues() as u8,
            constellation: task.constellations[ue],
            bits: ex.bits,
            colliders: ex.assignment.collision_sets[ue].len() as u8,
            target: [target.re as f32, target.im as f32],
            tokens: prompt.tokens.iter().map(|&v| v as f32).collect(),
        });
    }
}

/// Generate the records of a task range; used both for whole datasets and
/// for shards. Task substreams depend only on the task index, never on the
/// shard split.
pub fn generate_task_range(
    spec: &DatasetSpec,
    tasks: std::ops::Range<usize>,
) -> Result<Vec<PromptRecord>> {
    spec.validate()?;
    let layout = spec.prompt_layout();
    let book = walsh_hadamard_book(spec.t_p)?;
    let bank = QuantizerBank::design(&spec.bits_mix)?;
    let root = SeedStream::root(spec.master_seed).child("dataset");
    use rayon::prelude::*;
    let per_task: Vec<Vec<PromptRecord>> = tasks
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|t| {
            let task_stream = root.child_idx("task", t as u64);
            let task = build_task(
                &spec.deployment,
                spec.noise_power,
                &spec.constellation_set,
                &mut task_stream.child("geometry").rng(),
            )?;
            let mut out = Vec::with_capacity(spec.examples_per_task * task.num_ues());
            for e in 0..spec.examples_per_task {
                let ex = generate_example(
                    &task,
                    &layout,
                    &book,
                    spec.assignment_policy,
                    &spec.bits_mix,
                    &bank,
                    &task_stream.child_idx("example", e as u64),
                )?;
                push_example_records(&mut out, &task, t as u32, &ex);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_task.into_iter().flatten().collect())
}

/// Materialize the full dataset in memory.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<InMemoryDataset> {
    let records = generate_task_range(spec, 0..spec.num_tasks)?;
    Ok(InMemoryDataset { layout: spec.prompt_layout(), spec: spec.clone(), records })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

const SHARD_MAGIC: &[u8; 8] = b"CFEQDATA";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct IndexFile {
    format_version: u32,
    layout_version: String,
    seq_len: usize,
    token_dim: usize,
    spec: DatasetSpec,
    shards: Vec<ShardEntry>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ShardEntry {
    file: String,
    task_start: usize,
    task_end: usize,
    records: usize,
}

fn record_byte_len(seq_len: usize, token_dim: usize) -> usize {
    20 + 4 * seq_len * token_dim
}

fn write_shard(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(SHARD_MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        f.write_all(&r.task_index.to_le_bytes())?;
        f.write_all(&[
            r.ue,
            r.k,
            constellation_code(r.constellation),
            bits_code(r.bits),
            r.colliders,
            0,
            0,
            0,
        ])?;
        f.write_all(&r.target[0].to_le_bytes())?;
        f.write_all(&r.target[1].to_le_bytes())?;
        for &t in &r.tokens {
            f.write_all(&t.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_shard(path: &Path, seq_len: usize, token_dim: usize) -> Result<Vec<PromptRecord>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != SHARD_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad shard magic", path.display())));
    }
    let mut w4 = [0u8; 4];
    f.read_exact(&mut w4)?;
    if u32::from_le_bytes(w4) != FORMAT_VERSION {
        return Err(Error::Checkpoint("unsupported shard version".into()));
    }
    let mut w8 = [0u8; 8];
    f.read_exact(&mut w8)?;
    let count = u64::from_le_bytes(w8) as usize;
    let rec_len = record_byte_len(seq_len, token_dim);
    let mut buf = vec![0u8; rec_len];
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut buf)?;
        let task_index = u32::from_le_bytes(buf[0..4].try_into().expect("slice"));
        let constellation = ConstellationId::from_modulation_index(buf[6] as usize)
            .ok_or_else(|| Error::Checkpoint(format!("bad constellation code {}", buf[6])))?;
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().expect("slice"));
        let mut tokens = Vec::with_capacity(seq_len * token_dim);
        for i in 0..seq_len * token_dim {
            tokens.push(f32_at(20 + 4 * i));
        }
        records.push(PromptRecord {
            task_index,
            ue: buf[4],
            k: buf[5],
            constellation,
            bits: bits_from_code(buf[7]),
            colliders: buf[8],
            target: [f32_at(12), f32_at(16)],
            tokens,
        });
    }
    Ok(records)
}

/// Generate the dataset straight to sharded files plus `index.json`.
pub fn generate_to_dir(spec: &DatasetSpec, dir: &Path, shard_count: usize) -> Result<()> {
    spec.validate()?;
    if shard_count == 0 {
        return Err(Error::Config("shard_count must be >= 1".into()));
    }
    std::fs::create_dir_all(dir)?;
    let layout = spec.prompt_layout();
    let per_shard = spec.num_tasks.div_ceil(shard_count);
    let mut shards = Vec::new();
    let mut start = 0usize;
    let mut shard_idx = 0usize;
    while start < spec.num_tasks {
        let end = (start + per_shard).min(spec.num_tasks);
        let records = generate_task_range(spec, start..end)?;
        let file = format!("shard-{shard_idx:03}.bin");
        write_shard(&dir.join(&file), &records)?;
        shards.push(ShardEntry { file, task_start: start, task_end: end, records: records.len() });
        start = end;
        shard_idx += 1;
    }
    let index = IndexFile {
        format_version: FORMAT_VERSION,
        layout_version: LAYOUT_VERSION.to_string(),
        seq_len: layout.seq_len(),
        token_dim: layout.token_dim(),
        spec: spec.clone(),
        shards,
    };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Checkpoint(format!("index encode: {e}")))?;
    std::fs::write(dir.join("index.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`generate_to_dir`].
pub fn load_from_dir(dir: &Path) -> Result<InMemoryDataset> {
    let index_path = dir.join("index.json");
    let json = std::fs::read_to_string(&index_path)?;
    let index: IndexFile = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("index decode: {e}")))?;
    if index.layout_version != LAYOUT_VERSION {
        return Err(Error::Layout(format!(
            "dataset layout {} != supported {}",
            index.layout_version, LAYOUT_VERSION
        )));
    }
    let mut records = Vec::new();
    for shard in &index.shards {
        let mut part = read_shard(&dir.join(&shard.file), index.seq_len, index.token_dim)?;
        if part.len() != shard.records {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} records, found {}",
                shard.file,
                shard.records,
                part.len()
            )));
        }
        records.append(&mut part);
    }
    Ok(InMemoryDataset { layout: index.spec.prompt_layout(), spec: index.spec, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::INF_BITS;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            deployment: DeploymentConfig::desk_scale(),
            t_p: 4,
            k_max: 2,
            noise_power: 1e-13,
            constellation_set: ConstellationId::all().to_vec(),
            assignment_policy: PilotPolicy::MixedReuse,
            bits_mix: vec![Bits::Finite(2), Bits::Finite(8), INF_BITS],
            num_tasks: 12,
            examples_per_task: 6,
            master_seed: 99,
            layout_version: LAYOUT_VERSION.to_string(),
        }
    }

    #[test]
    fn generation_deterministic() {
        let spec = tiny_spec();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.records, b.records);
        assert!(!a.records.is_empty());
    }

    #[test]
    fn shards_concatenate_to_whole() {
        let spec = tiny_spec();
        let whole = generate_task_range(&spec, 0..spec.num_tasks).unwrap();
        let first = generate_task_range(&spec, 0..5).unwrap();
        let second = generate_task_range(&spec, 5..spec.num_tasks).unwrap();
        let glued: Vec<_> = first.into_iter().chain(second).collect();
        assert_eq!(whole, glued);
    }

    #[test]
    fn targets_lie_in_constellations() {
        let spec = tiny_spec();
        let ds = generate_dataset(&spec).unwrap();
        for rec in &ds.records {
            let c = crate::frame::make_constellation(rec.constellation);
            let t = C64::new(rec.target[0] as f64, rec.target[1] as f64);
            assert!(c.contains(t, 1e-6), "target {t} not in {:?}", rec.constellation);
        }
    }

    #[test]
    fn noiseless_bypass_query_roundtrip() {
        // sigma^2 = 0, b = inf, K = 1: the query token decodes to h * x
        // through the normalization inverse.
        let mut spec = tiny_spec();
        spec.noise_power = 0.0;
        spec.bits_mix = vec![INF_BITS];
        spec.deployment.ue_count_range = (1, 1);
        let layout = spec.prompt_layout();
        let book = walsh_hadamard_book(spec.t_p).unwrap();
        let bank = QuantizerBank::design(&spec.bits_mix).unwrap();
        let root = SeedStream::root(7).child("t");
        let task = build_task(
            &spec.deployment,
            spec.noise_power,
            &spec.constellation_set,
            &mut root.child("geometry").rng(),
        )
        .unwrap();
        let ex_stream = root.child("ex");
        let ex = generate_example(
            &task,
            &layout,
            &book,
            PilotPolicy::Orthogonal,
            &spec.bits_mix,
            &bank,
            &ex_stream,
        )
        .unwrap();
        // Re-derive the channels exactly as generate_example does.
        let mut rng = ex_stream.rng();
        let _asn = assign_pilots(1, book.t_p(), PilotPolicy::Orthogonal, &mut rng).unwrap();
        let _bits = rng.random_range(0..spec.bits_mix.len());
        let channels = sample_channels(&task, &mut rng);
        let profile = scaling_profile(&task);

        let q = ex.prompts[0].row(layout.seq_len() - 1);
        let nl = layout.nl();
        let n = layout.antennas_per_ap;
        let h = channels.stacked(0);
        for i in 0..nl {
            let s = profile.s[i / n];
            let decoded = C64::new(q[i] * s, q[nl + i] * s);
            let expected = h[i] * ex.targets[0];
            assert!((decoded - expected).norm() < 1e-6 * expected.norm().max(1e-12));
        }
    }

    #[test]
    fn constellation_marginal_uniform() {
        // Chi-squared test at the 1% level over the five alphabets.
        let mut spec = tiny_spec();
        spec.num_tasks = 400;
        spec.examples_per_task = 1;
        let ds = generate_dataset(&spec).unwrap();
        let mut counts = [0usize; 5];
        // Count per task-UE (constellations are a task property).
        let mut seen = std::collections::HashSet::new();
        for r in &ds.records {
            if seen.insert((r.task_index, r.ue)) {
                counts[r.constellation.modulation_index()] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        let expect = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 4 degrees of freedom, 1% critical value.
        assert!(chi2 < 13.28, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn disk_roundtrip_multi_shard() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        generate_to_dir(&spec, dir.path(), 3).unwrap();
        let loaded = load_from_dir(dir.path()).unwrap();
        let direct = generate_dataset(&spec).unwrap();
        assert_eq!(loaded.records, direct.records);
        assert_eq!(loaded.spec, spec);
    }

    #[test]
    fn no_ls_view_is_suffix() {
        let spec = tiny_spec();
        let ds = generate_dataset(&spec).unwrap();
        let rec = &ds.records[0];
        let full = ds.tokens_of(rec, DatasetView::Full);
        let no_ls = ds.tokens_of(rec, DatasetView::NoLargeScale);
        assert_eq!(no_ls.len(), ds.seq_len(DatasetView::NoLargeScale) * ds.layout.token_dim());
        assert_eq!(&full[full.len() - no_ls.len()..], no_ls);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny_spec();
        s.k_max = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.layout_version = "tokens-v0".into();
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.t_p = 3;
        assert!(s.validate().is_err());
    }
}
