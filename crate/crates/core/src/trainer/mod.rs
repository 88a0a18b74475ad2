//! Nadam training with per-stack supervision on paired original and
//! transformed inputs, a stepped learning-rate schedule and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{clip_global_norm, Nadam, NadamConfig};

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{render_heatmaps, CodecConfig};
use crate::data::{apply_transform, Sample};
use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{run_with_params, Mode, ParamStore};
use crate::topology::{build_model, ModelConfig, StackedModel};
use crate::transform::{batch_grid, coherent_loss, flip_pairs_5, flip_pairs_68, validate_flip_pairs};
use crate::transform::{AugmentConfig, LossWeights, TransformSpec};

/// Learning rate is multiplied by [`LR_DROP`] once the step reaches each
/// of these fractions of the run.
pub const LR_DROP_FRACTIONS: [f64; 2] = [16.0 / 30.0, 24.0 / 30.0];
pub const LR_DROP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr0: f64,
    /// Samples per step; each is paired with its transformed twin.
    pub batch: usize,
    pub total_steps: usize,
    pub loss: LossWeights,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub bn_momentum: f64,
    pub optimizer: NadamConfig,
    /// Ranges of the pairing transform.
    pub augment: AugmentConfig,
    /// Also augment the first input of each pair before pairing.
    pub augment_original: bool,
    pub codec: CodecConfig,
    /// Mirror permutation of landmarks; bundled tables cover 5 and 68 points.
    pub flip_pairs: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                topology: crate::topology::TopologySpec::new(
                    crate::topology::TopologyKind::Sat3,
                    3,
                    16,
                    crate::blocks::BlockKind::Cab,
                ),
                n_stacks: 2,
                n_landmarks: 5,
                deformable: false,
                input_size: 128,
            },
            lr0: 2.5e-4,
            batch: 8,
            total_steps: 2000,
            loss: LossWeights::default(),
            seed: 0,
            clip_norm: Some(5.0),
            bn_momentum: 0.1,
            optimizer: NadamConfig::default(),
            augment: AugmentConfig::default(),
            augment_original: false,
            codec: CodecConfig::default(),
            flip_pairs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        if self.codec.size != self.model.heatmap_size() || self.codec.size * self.codec.stride != self.model.input_size {
            return Err(Error::config("codec geometry does not match the model"));
        }
        self.resolved_flip_pairs().map(|_| ())
    }

    pub fn resolved_flip_pairs(&self) -> Result<Vec<usize>> {
        let n = self.model.n_landmarks;
        let pairs = match (&self.flip_pairs, n) {
            (Some(p), _) => p.clone(),
            (None, 5) => flip_pairs_5(),
            (None, 68) => flip_pairs_68(),
            (None, _) if self.augment.flip_probability == 0.0 => (0..n).collect(),
            _ => return Err(Error::config(format!("no bundled flip pairs for {n} landmarks"))),
        };
        crate::error::check_dim("flip_pairs", "landmarks", n, pairs.len())?;
        validate_flip_pairs(&pairs)?;
        Ok(pairs)
    }
}

/// Learning rate at `step` (0-based) of a run of `cfg.total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let drops = LR_DROP_FRACTIONS
        .iter()
        .filter(|f| step as f64 >= *f * cfg.total_steps as f64)
        .count();
    cfg.lr0 * LR_DROP.powi(drops as i32)
}

/// Loss terms of one step, summed over stacks, each normalised by
/// `batch * landmarks`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_pp")]
    pub pp: f64,
    #[serde(rename = "L_pg1")]
    pub pg_orig: f64,
    #[serde(rename = "L_pg2")]
    pub pg_trans: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: StackedModel,
    pub params: ParamStore<f32>,
    pub optimizer: Nadam,
    /// Steps completed.
    pub step: usize,
    flip_pairs: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.model)?;
        let params = ParamStore::init(&model.program, config.seed);
        let optimizer = Nadam::new(config.optimizer, &params.values);
        let flip_pairs = config.resolved_flip_pairs()?;
        Ok(Trainer {
            config,
            model,
            params,
            optimizer,
            step: 0,
            flip_pairs,
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn from_parts(config: TrainConfig, params: ParamStore<f32>, optimizer: Nadam, step: usize) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        params.validate(&t.model.program)?;
        crate::error::check_dim("checkpoint", "moments", params.values.len(), optimizer.first.len())?;
        t.params = params;
        t.optimizer = optimizer;
        t.step = step;
        Ok(t)
    }

    pub fn flip_pairs(&self) -> &[usize] {
        &self.flip_pairs
    }

    /// Random stream for `step`; independent of how many steps ran before,
    /// so resumed runs draw the same batches.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    /// Draws the batch and pairing transforms for the next step from
    /// `data` and trains on them.
    pub fn step_on(&mut self, data: &[Sample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::config("cannot train on an empty dataset"));
        }
        let mut rng = self.step_rng(self.step);
        let mut batch = Vec::with_capacity(self.config.batch);
        let mut transforms = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let s = &data[rng.random_range(0..data.len())];
            let size = s.image_size();
            let s = if self.config.augment_original {
                let t = TransformSpec::sample(&mut rng, &self.config.augment, &self.flip_pairs, size);
                apply_transform(s, &t)?
            } else {
                s.clone()
            };
            transforms.push(TransformSpec::sample(&mut rng, &self.config.augment, &self.flip_pairs, size));
            batch.push(s);
        }
        self.train_step(&batch, &transforms)
    }

    /// One optimisation step on `batch` paired with `transforms[i]` applied
    /// to `batch[i]`, at the scheduled learning rate.
    pub fn train_step(&mut self, batch: &[Sample], transforms: &[TransformSpec]) -> Result<StepReport> {
        self.train_step_at(batch, transforms, lr_at(self.step, &self.config))
    }

    pub fn train_step_at(&mut self, batch: &[Sample], transforms: &[TransformSpec], lr: f64) -> Result<StepReport> {
        let start = Instant::now();
        crate::error::check_dim("train_step", "transforms", batch.len(), transforms.len())?;
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let cfg = &self.config;
        let codec = &cfg.codec;
        let mut images = Vec::with_capacity(batch.len());
        let mut images_t = Vec::with_capacity(batch.len());
        let mut gts = Vec::with_capacity(batch.len());
        let mut gts_t = Vec::with_capacity(batch.len());
        for (s, t) in batch.iter().zip(transforms) {
            let st = apply_transform(s, t)?;
            gts.push(s.heatmaps(codec)?);
            gts_t.push(render_heatmaps(codec, &st.landmarks));
            images.push(s.image.clone());
            images_t.push(st.image);
        }
        let stack = |v: &[Tensor<f32>]| Tensor::stack_batch(&v.iter().collect::<Vec<_>>());
        let grid = batch_grid(transforms, codec)?;

        let mut tape = Tape::new();
        let params: Vec<_> = self.params.values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let x = tape.constant(stack(&images)?);
        let xt = tape.constant(stack(&images_t)?);
        let gt = tape.constant(stack(&gts)?);
        let gt_t = tape.constant(stack(&gts_t)?);
        let prog = &self.model.program;
        let fwd = run_with_params(prog, &self.params, &mut tape, x, Mode::Train, params.clone())?;
        let fwd_t = run_with_params(prog, &self.params, &mut tape, xt, Mode::Train, params.clone())?;

        let mut totals = Vec::with_capacity(fwd.outputs.len());
        let (mut pp, mut pg_o, mut pg_t) = (0.0, 0.0, 0.0);
        for (&zo, &zt) in fwd.outputs.iter().zip(&fwd_t.outputs) {
            let terms = coherent_loss(&mut tape, zo, zt, gt, Some(gt_t), &grid, &cfg.loss)?;
            pp += tape.value(terms.pp).data()[0] as f64;
            pg_o += tape.value(terms.pg_orig).data()[0] as f64;
            pg_t += tape.value(terms.pg_trans).data()[0] as f64;
            totals.push(terms.total);
        }
        let total_var = tape.add_n(&totals)?;
        let total = tape.value(total_var).data()[0] as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                op: format!("train_step {}: L_pp={pp} L_pg1={pg_o} L_pg2={pg_t}", self.step),
            });
        }
        let mut grads_all = tape.backward(total_var)?;
        let mut grads: Vec<Vec<f32>> = params
            .iter()
            .zip(&self.params.values)
            .map(|(&p, v)| grads_all.take(p).unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect();
        drop(tape);
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        self.optimizer.update(&mut self.params.values, &grads, lr)?;
        for stats in [&fwd.batch_stats, &fwd_t.batch_stats] {
            for (run, st) in self.params.running.iter_mut().zip(stats) {
                if let Some(st) = st {
                    run.update(st, cfg.bn_momentum);
                }
            }
        }
        let report = StepReport {
            step: self.step,
            lr,
            pp,
            pg_orig: pg_o,
            pg_trans: pg_t,
            total,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(report)
    }

    /// Trains until `total_steps`, writing one JSON line per step to `log`.
    pub fn fit(&mut self, data: &[Sample], mut log: Option<&mut dyn Write>) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity(self.config.total_steps.saturating_sub(self.step));
        while self.step < self.config.total_steps {
            let r = self.step_on(data)?;
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&r)?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::topology::{TopologyKind, TopologySpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut topology = TopologySpec::new(TopologyKind::Sat3, 3, 8, crate::blocks::BlockKind::Cab);
        topology.input_resolution = 32;
        TrainConfig {
            model: ModelConfig {
                topology,
                n_stacks: 2,
                n_landmarks: 5,
                deformable: false,
                input_size: 64,
            },
            batch: 2,
            total_steps: 6,
            codec: CodecConfig {
                size: 32,
                ..CodecConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_data(n: usize) -> Vec<Sample> {
        generate(
            &SynthConfig {
                image_size: 64,
                ..SynthConfig::default()
            },
            n,
        )
        .unwrap()
    }

    #[test]
    fn schedule_drops_twice() {
        let cfg = TrainConfig {
            total_steps: 30_000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 2.5e-4);
        assert_eq!(lr_at(15_999, &cfg), 2.5e-4);
        assert!((lr_at(16_001, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(24_001, &cfg) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { lr0: 0.0, ..tiny_config() },
            TrainConfig { batch: 0, ..tiny_config() },
            TrainConfig { clip_norm: Some(-1.0), ..tiny_config() },
            TrainConfig { flip_pairs: Some(vec![1, 0]), ..tiny_config() },
        ];
        for c in bad {
            assert!(Trainer::new(c).is_err());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = tiny_data(4);
        let mut t = Trainer::new(tiny_config()).unwrap();
        let before = t.params.values.clone();
        let transforms = vec![TransformSpec::sample(&mut t.step_rng(0), &t.config.augment, t.flip_pairs(), 64); 2];
        t.train_step_at(&data[..2], &transforms, 0.0).unwrap();
        assert_eq!(t.params.values, before);
        assert_eq!(t.optimizer.step, 1);
    }

    #[test]
    fn steps_are_reproducible_and_supervise_every_head() {
        let data = tiny_data(4);
        let mut a = Trainer::new(tiny_config()).unwrap();
        let mut b = Trainer::new(tiny_config()).unwrap();
        let ra = a.step_on(&data).unwrap();
        let rb = b.step_on(&data).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(a.params, b.params);
        // Every head moved.
        let fresh = ParamStore::<f32>::init(&a.model.program, a.config.seed);
        for (i, d) in a.model.program.params.iter().enumerate() {
            if d.name.contains("/head/") {
                assert_ne!(a.params.values[i], fresh.values[i], "{}", d.name);
            }
        }
    }
}
