// Throwaway: writes the golden bytes for the seeded-generation format test.
use stageflow_core::bridge::BridgeParams;
use stageflow_core::datagen;
use stageflow_core::flowcore::make_schedule;
use stageflow_core::numerics::DType;
use stageflow_core::progmodel::{ModelConfig, ProgressiveModel};
use stageflow_core::rng::{stream, StreamDomain};
use stageflow_core::sampling::{staged_generate, SampleConfig};

fn main() {
    let mcfg = ModelConfig {
        stages: 2,
        depths: vec![1, 1],
        width: 16,
        heads: 2,
        patch: 2,
        channels: 1,
        num_classes: 3,
        base_resolution: 8,
    };
    let model = ProgressiveModel::init(
        mcfg,
        DType::F32,
        &mut stream(101, StreamDomain::Init, 0, 0),
    )
    .unwrap();
    let schedule = make_schedule(2, &[1.0, 1.0], 8).unwrap();
    let bridges = vec![BridgeParams {
        scale: vec![0.95],
        bias: vec![0.01],
        stage_pair: (1, 2),
        boundary_u: 0.5,
    }];
    let mut scfg = SampleConfig::new(2, 1234);
    scfg.steps_per_stage = 5;
    let out = staged_generate(&model, &bridges, &schedule, &scfg).unwrap();
    let bytes = datagen::image::to_bytes(&out.image).unwrap();
    std::fs::create_dir_all("crates/core/tests/golden").unwrap();
    std::fs::write("crates/core/tests/golden/staged_seed1234.pgm", &bytes).unwrap();
    println!("wrote {} bytes", bytes.len());
}
