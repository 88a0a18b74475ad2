//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dunet_core::blocks::BlockKind;
use dunet_core::topology::{ModelConfig, TopologyKind, TopologySpec};
use dunet_core::{Shape, Tensor};

pub fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The toy training model: two SAT3-CAB stacks of width 16 on 128x128 input.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        topology: TopologySpec::new(TopologyKind::Sat3, 3, 16, BlockKind::Cab),
        n_stacks: 2,
        n_landmarks: 5,
        deformable: false,
        input_size: 128,
    }
}
