use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{build_model, ModelConfig, TopologyKind, TopologySpec};
use crate::blocks::BlockKind;
use crate::engine::gradcheck::{check_graph, CheckReport, GradCheckConfig};
use crate::engine::{Tensor, Var};
use crate::error::Result;
use crate::graph::{run_with_params, Mode, ParamStore};

/// Two-stack SAT3 with CAB blocks at width 16 and deformable layers, on a
/// 32x32 input so a double-precision check stays fast.
pub fn full_check_model() -> ModelConfig {
    let mut topology = TopologySpec::new(TopologyKind::Sat3, 3, 16, BlockKind::Cab);
    topology.input_resolution = 16;
    ModelConfig {
        topology,
        n_stacks: 2,
        n_landmarks: 5,
        deformable: true,
        input_size: 32,
    }
}

/// Settings for [`check_model`]. Max pools, ReLUs and bilinear sampling put
/// kinks close to almost any point of a full network, so comparisons that
/// miss are retried at smaller steps. The floor absorbs the roundoff on
/// parameters whose gradient vanishes exactly (biases feeding batch norm).
pub fn model_check_config() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-6,
        floor: 1e-3,
        retries: 2,
        ..GradCheckConfig::default()
    }
}

/// Finite-difference check of every parameter and the input of `config`
/// in training mode. Offset convolutions get small random weights so the
/// deformable sampling sits off the integer grid.
pub fn check_model(config: &ModelConfig, batch: usize, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let model = build_model(config)?;
    let prog = &model.program;
    let mut store = ParamStore::<f64>::init(prog, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let normal = Normal::new(0.0, 0.1).expect("positive std");
    for (d, v) in prog.params.iter().zip(store.values.iter_mut()) {
        if d.name.contains("/offsets/") || d.name.ends_with("beta") {
            v.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
    }
    let mut inputs = vec![Tensor::uniform(config.input_shape(batch), 0.0, 1.0, &mut rng)];
    inputs.extend(store.values.iter().cloned());
    let wants = vec![true; inputs.len()];
    let name = format!(
        "{}x{:?} {}-{} (width {})",
        config.n_stacks,
        config.topology.kind,
        config.topology.block.kind.short_name(),
        if config.deformable { "deform" } else { "plain" },
        config.width()
    );
    check_graph(&name, &inputs, &wants, cfg, |tape, vars: &[Var]| {
        let fwd = run_with_params(prog, &store, tape, vars[0], Mode::Train, vars[1..].to_vec())?;
        tape.concat_channels(&fwd.outputs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_gradients_match() {
        let mut cfg = full_check_model();
        cfg.topology.base_width = 8;
        cfg.n_stacks = 1;
        let gc = GradCheckConfig {
            elements_per_input: 1,
            ..model_check_config()
        };
        let r = check_model(&cfg, 2, &gc).unwrap();
        assert!(r.passes(1e-3), "{}", r.max_rel_error);
        assert!(r.comparisons > 20);
    }
}
