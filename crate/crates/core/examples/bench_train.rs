use cfeq_core::channel::{noise_power_for_snr, DeploymentConfig};
use cfeq_core::data::{generate_dataset, DatasetSpec, DatasetView};
use cfeq_core::frame::{ConstellationId, PilotPolicy};
use cfeq_core::model::{ModelConfig, Transformer};
use cfeq_core::prompt::LAYOUT_VERSION;
use cfeq_core::quant::{Bits, INF_BITS};
use cfeq_core::seed::SeedStream;
use cfeq_core::train::{train, TrainConfig};

fn main() {
    let deployment = DeploymentConfig::desk_scale();
    let noise = noise_power_for_snr(&deployment, 24.0, 2000, &mut SeedStream::root(0).rng());
    let spec = DatasetSpec {
        deployment,
        t_p: 4,
        k_max: 2,
        noise_power: noise,
        constellation_set: ConstellationId::all().to_vec(),
        assignment_policy: PilotPolicy::MixedReuse,
        bits_mix: vec![Bits::Finite(1), Bits::Finite(2), Bits::Finite(3), Bits::Finite(4), Bits::Finite(5), Bits::Finite(6), Bits::Finite(8), INF_BITS],
        num_tasks: 256,
        examples_per_task: 64,
        master_seed: 42,
        layout_version: LAYOUT_VERSION.to_string(),
    };
    let t0 = std::time::Instant::now();
    let data = generate_dataset(&spec).unwrap();
    println!("dataset: {} records in {:?}", data.records.len(), t0.elapsed());

    let layout = spec.prompt_layout();
    let cfg = ModelConfig::desk(layout.token_dim(), layout.seq_len());
    let mut model = Transformer::<f32>::init(cfg, 1).unwrap();
    println!("params: {}", model.param_count());
    let tc = TrainConfig {
        batch_size: 128,
        total_steps: 300,
        warmup_steps: 100,
        eval_interval: 150,
        seed: 2,
        ..Default::default()
    };
    let t1 = std::time::Instant::now();
    let report = train(&mut model, &data, DatasetView::Full, &tc).unwrap();
    let dt = t1.elapsed();
    println!(
        "300 steps in {:?} ({:.1} ms/step); curve {:?}",
        dt,
        dt.as_secs_f64() * 1000.0 / 300.0,
        report.curve
    );
}
