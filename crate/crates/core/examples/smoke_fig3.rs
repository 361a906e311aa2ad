use std::sync::Arc;
use cfeq_core::channel::{noise_power_for_snr, DeploymentConfig};
use cfeq_core::data::{generate_dataset, DatasetSpec, DatasetView};
use cfeq_core::eval::{evaluate_mse, EvalAssignment, EvalSpec, IclEqualizer, LmmseEqualizer, LmmseInfEqualizer};
use cfeq_core::frame::{ConstellationId, PilotPolicy};
use cfeq_core::lmmse::LmmseOptions;
use cfeq_core::model::{ModelConfig, Transformer};
use cfeq_core::prompt::LAYOUT_VERSION;
use cfeq_core::quant::{Bits, INF_BITS};
use cfeq_core::seed::SeedStream;
use cfeq_core::train::{train, TrainConfig};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let tasks: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let deployment = DeploymentConfig::desk_scale();
    let noise = noise_power_for_snr(&deployment, 24.0, 2000, &mut SeedStream::root(0).rng());
    let bits_mix = vec![
        Bits::Finite(1), Bits::Finite(2), Bits::Finite(3), Bits::Finite(4),
        Bits::Finite(5), Bits::Finite(6), Bits::Finite(8), INF_BITS,
    ];
    let spec = DatasetSpec {
        deployment: deployment.clone(),
        t_p: 4,
        k_max: 2,
        noise_power: noise,
        constellation_set: ConstellationId::all().to_vec(),
        assignment_policy: PilotPolicy::MixedReuse,
        bits_mix,
        num_tasks: tasks,
        examples_per_task: 128,
        master_seed: 42,
        layout_version: LAYOUT_VERSION.to_string(),
    };
    let t0 = std::time::Instant::now();
    let data = generate_dataset(&spec).unwrap();
    println!("dataset: {} records in {:?}", data.records.len(), t0.elapsed());

    let layout = spec.prompt_layout();
    let cfg = ModelConfig::desk(layout.token_dim(), layout.seq_len());
    let mut model = Transformer::<f32>::init(cfg, 1).unwrap();
    let tc = TrainConfig {
        batch_size: 128,
        total_steps: steps,
        warmup_steps: 500,
        eval_interval: 500,
        seed: 2,
        ..Default::default()
    };
    let t1 = std::time::Instant::now();
    let report = train(&mut model, &data, DatasetView::Full, &tc).unwrap();
    println!("train {:?}; best val {:.4} @ {}", t1.elapsed(), report.best_val, report.best_step);
    for p in &report.curve { println!("  step {} train {:.4} val {:.4}", p.step, p.train_mse, p.val_mse); }

    let model = Arc::new(model);
    let blocks = 4000;
    for bits in [Bits::Finite(2), Bits::Finite(8)] {
        let espec = EvalSpec {
            deployment: deployment.clone(),
            t_p: 4,
            k_max: 2,
            fixed_k: None,
            noise_power: noise,
            constellation_set: ConstellationId::all().to_vec(),
            bits,
            assignment: EvalAssignment::Reuse(9),
            blocks,
            seed: 77,
        };
        let icl = evaluate_mse(&IclEqualizer::new(Arc::clone(&model), layout), &espec).unwrap();
        let lm = evaluate_mse(&LmmseEqualizer { opts: LmmseOptions::default() }, &espec).unwrap();
        let lminf = evaluate_mse(&LmmseInfEqualizer { opts: LmmseOptions::default() }, &espec).unwrap();
        println!(
            "full-reuse b={bits}: icl {:.4}+-{:.4} | lmmse {:.4}+-{:.4} | lmmse_inf {:.4}+-{:.4}",
            icl.mse, icl.ci95, lm.mse, lm.ci95, lminf.mse, lminf.ci95
        );
    }
    let espec0 = EvalSpec {
        deployment: deployment.clone(),
        t_p: 4,
        k_max: 2,
        fixed_k: None,
        noise_power: noise,
        constellation_set: ConstellationId::all().to_vec(),
        bits: Bits::Finite(8),
        assignment: EvalAssignment::Orthogonal,
        blocks,
        seed: 78,
    };
    let icl = evaluate_mse(&IclEqualizer::new(Arc::clone(&model), layout), &espec0).unwrap();
    let lm = evaluate_mse(&LmmseEqualizer { opts: LmmseOptions::default() }, &espec0).unwrap();
    println!("orthogonal b=8: icl {:.4}+-{:.4} | lmmse {:.4}+-{:.4}", icl.mse, icl.ci95, lm.mse, lm.ci95);
}
