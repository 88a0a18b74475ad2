use serde::{Deserialize, Serialize};

use super::{build_topology, ScaleDag, TopologySpec};
use crate::blocks::{emit_block, unit, BlockKind, BlockSpec};
use crate::engine::Shape;
use crate::error::{Error, Result};
use crate::graph::{Init, Program, ProgramBuilder};

/// Initial head bias: the logit of a 1% foreground probability, close to
/// the share of heatmap mass a single landmark occupies.
pub const HEAD_BIAS_PRIOR: f64 = -4.59511985013459;

fn default_input_size() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topology: TopologySpec,
    pub n_stacks: usize,
    pub n_landmarks: usize,
    /// Appends a deformable convolution layer after every stack.
    #[serde(default)]
    pub deformable: bool,
    /// Side length of the RGB input; the stem halves it.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stacks == 0 {
            return Err(Error::config("n_stacks must be at least 1"));
        }
        if self.n_landmarks == 0 {
            return Err(Error::config("n_landmarks must be positive"));
        }
        if self.input_size != 2 * self.topology.input_resolution {
            return Err(Error::config(format!(
                "input size {} must be twice the topology resolution {}",
                self.input_size, self.topology.input_resolution
            )));
        }
        self.topology.validate()
    }

    pub fn width(&self) -> usize {
        self.topology.base_width
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, 3, self.input_size, self.input_size)
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 2
    }
}

/// Stem, stacked scale DAGs with per-stack heads, compiled to one program
/// whose outputs are the per-stack heatmap logits.
#[derive(Clone, Debug)]
pub struct StackedModel {
    pub config: ModelConfig,
    pub dag: ScaleDag,
    pub program: Program,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSummary {
    pub kind: String,
    pub block: String,
    pub down_steps: usize,
    pub stacks: usize,
    pub width: usize,
    pub params: usize,
    pub size_mb: f64,
    pub flops: u64,
}

pub fn build_model(config: &ModelConfig) -> Result<StackedModel> {
    config.validate()?;
    let dag = build_topology(&config.topology)?;
    let c = config.width();
    let n = config.n_landmarks;
    let mut b = ProgramBuilder::new(3);
    let x = b.input();
    let stem = b.scoped("stem", |b| -> Result<_> {
        let s = b.conv("conv", x, c, 3)?;
        let r = b.scoped("block", |b| {
            emit_block(b, &BlockSpec::new(BlockKind::ResNetBottleneck, c, c), s)
        })?;
        Ok(b.max_pool(r))
    })?;

    let mut input = stem;
    for k in 0..config.n_stacks {
        let (features, logits) = b.scoped(&format!("stack{k}"), |b| -> Result<_> {
            let f = dag.emit(b, input)?;
            let f = if config.deformable {
                b.scoped("deform", |b| -> Result<_> {
                    let a = b.bn_relu("bn", f);
                    let off = b.conv_zero("offsets", a, 18, 3)?;
                    let d = b.deform_conv("conv", a, off, c, 3)?;
                    b.add(&[f, d])
                })?
            } else {
                f
            };
            let logits = unit(b, "head", f, n, 1)?;
            b.set_init("head/conv/bias", Init::Constant(HEAD_BIAS_PRIOR))?;
            Ok((f, logits))
        })?;
        b.mark_output(logits);
        if k + 1 < config.n_stacks {
            input = b.scoped(&format!("stack{k}"), |b| -> Result<_> {
                let back = b.conv("reproject", logits, c, 1)?;
                b.add(&[features, back])
            })?;
        }
    }
    Ok(StackedModel {
        config: config.clone(),
        dag,
        program: b.finish(),
    })
}

impl StackedModel {
    pub fn count_params(&self) -> usize {
        self.program.param_count()
    }

    /// Model size in MiB assuming 4-byte parameters.
    pub fn estimate_size_mb(&self) -> f64 {
        self.count_params() as f64 * 4.0 / (1u64 << 20) as f64
    }

    pub fn estimate_flops(&self, input: Shape) -> Result<u64> {
        self.program.flops(input)
    }

    pub fn summary(&self) -> Result<ModelSummary> {
        let t = &self.config.topology;
        Ok(ModelSummary {
            kind: t.kind.name().to_string(),
            block: t.block.kind.short_name().to_string(),
            down_steps: t.down_steps,
            stacks: self.config.n_stacks,
            width: t.base_width,
            params: self.count_params(),
            size_mb: self.estimate_size_mb(),
            flops: self.estimate_flops(self.config.input_shape(1))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Tape, Tensor};
    use crate::graph::{run, Mode, ParamStore};
    use crate::topology::TopologyKind;

    fn config(kind: TopologyKind, stacks: usize, deformable: bool) -> ModelConfig {
        ModelConfig {
            topology: TopologySpec::new(kind, 3, 16, BlockKind::Cab),
            n_stacks: stacks,
            n_landmarks: 5,
            deformable,
            input_size: 128,
        }
    }

    #[test]
    fn two_stacks_emit_two_heatmap_stacks() {
        let m = build_model(&config(TopologyKind::Sat3, 2, true)).unwrap();
        let store = ParamStore::<f32>::init(&m.program, 0);
        let mut tape = Tape::new();
        let mut rng = rand::rng();
        let x = tape.leaf(Tensor::uniform(Shape::new(2, 3, 128, 128), 0.0, 1.0, &mut rng), false);
        let f = run(&m.program, &store, &mut tape, x, Mode::Train, false).unwrap();
        assert_eq!(f.outputs.len(), 2);
        for o in f.outputs {
            assert_eq!(tape.value(o).shape(), Shape::new(2, 5, 64, 64));
        }
    }

    #[test]
    fn one_stack_has_one_output() {
        let m = build_model(&config(TopologyKind::UNet, 1, false)).unwrap();
        assert_eq!(m.program.outputs.len(), 1);
    }

    #[test]
    fn input_size_must_match_topology() {
        let mut c = config(TopologyKind::UNet, 1, false);
        c.input_size = 96;
        assert!(build_model(&c).is_err());
        c.input_size = 128;
        c.n_stacks = 0;
        assert!(build_model(&c).is_err());
    }

    #[test]
    fn size_is_four_bytes_per_parameter() {
        let m = build_model(&config(TopologyKind::Hourglass, 1, false)).unwrap();
        assert!((m.estimate_size_mb() * 1048576.0 - 4.0 * m.count_params() as f64).abs() < 1e-6);
    }
}
