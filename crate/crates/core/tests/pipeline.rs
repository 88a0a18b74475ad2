use std::cell::RefCell;
use std::collections::HashMap;

use dunet_core::blocks::BlockKind;
use dunet_core::codec::{render_heatmaps, CodecConfig};
use dunet_core::data::{generate, Sample, SynthConfig};
use dunet_core::eval::{coherence_probe, HeatmapModel, Predictor};
use dunet_core::graph::ParamStore;
use dunet_core::topology::{build_model, TopologyKind, TopologySpec};
use dunet_core::trainer::{TrainConfig, Trainer};
use dunet_core::transform::{flip_pairs_5, sample_transforms, AugmentConfig, TransformSpec};
use dunet_core::{Result, Tensor};

fn data(n: usize, size: usize) -> Vec<Sample> {
    generate(&SynthConfig { image_size: size, ..SynthConfig::default() }, n).unwrap()
}

/// Two width-8 SAT3 stacks on 64 px input.
fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.topology = TopologySpec::new(TopologyKind::Sat3, 3, 8, BlockKind::Cab);
    cfg.model.topology.input_resolution = 32;
    cfg.model.input_size = 64;
    cfg.codec.size = 32;
    cfg
}

fn image_key(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Answers each known image with its ground-truth maps and each transformed
/// image with the warped maps of its source, so it commutes with the probe
/// transforms by construction.
struct Equivariant {
    codec: CodecConfig,
    table: RefCell<HashMap<Vec<u32>, Tensor<f32>>>,
}

impl Equivariant {
    fn new(codec: CodecConfig, samples: &[Sample], transforms: &[TransformSpec]) -> Self {
        let mut table = HashMap::new();
        for (s, t) in samples.iter().zip(transforms) {
            let h = render_heatmaps(&codec, &s.landmarks);
            let ht = t.apply_to_heatmaps(&codec, &h).unwrap();
            table.insert(image_key(&t.apply_to_image(&s.image).unwrap()), ht);
            table.insert(image_key(&s.image), h);
        }
        Equivariant { codec, table: RefCell::new(table) }
    }
}

impl HeatmapModel for Equivariant {
    fn heatmaps(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let table = self.table.borrow();
        let maps: Vec<Tensor<f32>> = (0..images.shape().n())
            .map(|i| table[&image_key(&images.narrow_batch(i, 1).unwrap())].clone())
            .collect();
        assert_eq!(maps[0].shape().h(), self.codec.size);
        Tensor::stack_batch(&maps.iter().collect::<Vec<_>>())
    }
}

#[test]
fn equivariant_model_has_zero_heatmap_discrepancy() {
    let codec = CodecConfig::default();
    let samples = data(6, 128);
    let transforms = sample_transforms(3, samples.len(), &AugmentConfig::default(), &flip_pairs_5(), 128);
    let model = Equivariant::new(codec, &samples, &transforms);
    let r = coherence_probe(&model, &samples, &transforms, &codec).unwrap();
    assert_eq!(r.heatmap, 0.0);
    // Decoding a warped map is only exact up to the codec's grid.
    assert!(r.landmark < 2.0, "{r:?}");
    assert!(r.landmarks_compared > 0);
}

#[test]
fn identity_transforms_give_zero_discrepancy_for_a_real_model() {
    let cfg = tiny();
    let model = build_model(&cfg.model).unwrap();
    let params = ParamStore::<f32>::init(&model.program, 4);
    let samples = data(3, 64);
    let ident = vec![TransformSpec::identity(5, 64); samples.len()];
    let r = coherence_probe(&Predictor::new(&model, &params), &samples, &ident, &cfg.codec).unwrap();
    assert_eq!((r.heatmap, r.landmark), (0.0, 0.0));
}

#[test]
fn fifty_steps_lower_the_training_loss() {
    let mut cfg = tiny();
    cfg.batch = 4;
    cfg.total_steps = 50;
    cfg.lr0 = 1e-3;
    let samples = data(32, 64);
    let mut trainer = Trainer::new(cfg).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| trainer.step_on(&samples).unwrap().total).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (mean(&losses[..5]), mean(&losses[45..]));
    assert!(last < first, "loss went from {first} to {last}");
}
