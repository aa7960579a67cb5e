#![allow(dead_code)]

use marginkd::data::{synth_generate, Dataset, SynthConfig};
use marginkd::model::Arch;
use marginkd::pipeline::TrainConfig;

/// Noisy long-tail fixture: 12 classes, 64 features, 3,000 samples,
/// 10% flipped labels and 20% boundary samples.
pub fn noisy_fixture(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        classes: 12,
        dim: 64,
        n: 3000,
        flip_noise_rate: 0.1,
        boundary_noise_rate: 0.2,
        seed,
        ..SynthConfig::default()
    })
    .expect("fixture config is valid")
}

/// Well-separated clusters without label noise.
pub fn separable_fixture(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        classes: 6,
        dim: 16,
        n: 600,
        flip_noise_rate: 0.0,
        boundary_noise_rate: 0.0,
        prototype_scale: 3.0,
        noise_std: 1.0,
        seed,
        ..SynthConfig::default()
    })
    .expect("fixture config is valid")
}

/// Small, quick to train.
pub fn small_fixture(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        classes: 5,
        dim: 8,
        n: 200,
        prototype_scale: 1.0,
        seed,
        ..SynthConfig::default()
    })
    .expect("fixture config is valid")
}

pub fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig {
        teacher_arch: Arch::OneHidden { hidden_width: 8 },
        k: 3,
        teacher_epochs: 5,
        student_epochs: 5,
        stage2_epochs: 2,
        stage2_lr: 0.02,
        seed,
        ..TrainConfig::default()
    }
}
