//! Resolution-preserving building blocks: ResNet bottleneck,
//! Inception-ResNet, hierarchical parallel multi-scale (HPM) and the
//! channel aggregation block (CAB).
//!
//! All convolutions are pre-activation (`BN -> ReLU -> conv`) and carry a
//! bias. A block whose input and output widths differ gets a plain 1x1
//! projection on its skip path, scoped as `skip`.

use serde::{Deserialize, Serialize};

use crate::graph::{Program, ProgramBuilder, Slot};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[serde(alias = "resnet", alias = "ResNetBottleneck")]
    ResNetBottleneck,
    #[serde(alias = "inception", alias = "InceptionResNet")]
    InceptionResNet,
    #[serde(alias = "HPM")]
    Hpm,
    #[serde(alias = "CAB")]
    Cab,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [
        BlockKind::ResNetBottleneck,
        BlockKind::InceptionResNet,
        BlockKind::Hpm,
        BlockKind::Cab,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            BlockKind::ResNetBottleneck => "ResNet",
            BlockKind::InceptionResNet => "Inception",
            BlockKind::Hpm => "HPM",
            BlockKind::Cab => "CAB",
        }
    }
}

fn default_ratio() -> usize {
    4
}

fn default_levels() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Width divisor of the bottleneck and of the Inception towers.
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    /// Number of channel halvings inside a CAB.
    #[serde(default = "default_levels")]
    pub levels: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, channels_in: usize, channels_out: usize) -> Self {
        BlockSpec {
            kind,
            channels_in,
            channels_out,
            ratio: default_ratio(),
            levels: default_levels(),
        }
    }

    pub fn cab(channels: usize, levels: usize) -> Self {
        BlockSpec {
            levels,
            ..Self::new(BlockKind::Cab, channels, channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (cin, cout) = (self.channels_in, self.channels_out);
        if cin == 0 || cout == 0 {
            return Err(Error::config("block widths must be positive"));
        }
        match self.kind {
            BlockKind::ResNetBottleneck | BlockKind::InceptionResNet => {
                if self.ratio == 0 || cout % self.ratio != 0 {
                    return Err(Error::config(format!(
                        "{}: output width {cout} is not divisible by ratio {}",
                        self.kind.short_name(),
                        self.ratio
                    )));
                }
            }
            BlockKind::Hpm => {
                if cout % 4 != 0 {
                    return Err(Error::config(format!("HPM: output width {cout} is not divisible by 4")));
                }
            }
            BlockKind::Cab => {
                if cin != cout {
                    return Err(Error::config(format!("CAB: input width {cin} must equal output width {cout}")));
                }
                let div = 1usize.checked_shl(self.levels as u32).filter(|d| *d <= cin);
                if div.is_none_or(|d| cin % d != 0) {
                    return Err(Error::config(format!(
                        "CAB: width {cin} is not divisible by 2^{}",
                        self.levels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Backbone channel widths of a CAB, from input to output.
    pub fn cab_profile(&self) -> Vec<usize> {
        let c = self.channels_in;
        let l = self.levels;
        let down: Vec<usize> = (0..=l).map(|i| c >> i).collect();
        let mut profile = down.clone();
        profile.push(c >> l);
        profile.extend(down.iter().rev().skip(1));
        profile
    }
}

/// A block built on its own as a single-input, single-output program.
#[derive(Clone, Debug)]
pub struct BlockGraph {
    pub spec: BlockSpec,
    pub program: Program,
}

impl BlockGraph {
    pub fn param_count(&self) -> usize {
        self.program.param_count()
    }

    pub fn to_dot(&self) -> String {
        let s = self.spec;
        self.program
            .to_dot(&format!("{} {}->{}", s.kind.short_name(), s.channels_in, s.channels_out))
    }
}

pub fn build_block(spec: &BlockSpec) -> Result<BlockGraph> {
    let mut b = ProgramBuilder::new(spec.channels_in);
    let x = b.input();
    let y = emit_block(&mut b, spec, x)?;
    b.mark_output(y);
    Ok(BlockGraph {
        spec: *spec,
        program: b.finish(),
    })
}

/// Pre-activation convolution unit.
pub(crate) fn unit(b: &mut ProgramBuilder, name: &str, x: Slot, out: usize, kernel: usize) -> Result<Slot> {
    b.scoped(name, |b| {
        let a = b.bn_relu("bn", x);
        b.conv("conv", a, out, kernel)
    })
}

/// Pre-activation depthwise-separable unit: BN, ReLU, depthwise 3x3, pointwise 1x1.
pub(crate) fn sep_unit(b: &mut ProgramBuilder, name: &str, x: Slot, out: usize) -> Result<Slot> {
    b.scoped(name, |b| {
        let a = b.bn_relu("bn", x);
        let d = b.depthwise("depthwise", a, 3)?;
        b.conv("pointwise", d, out, 1)
    })
}

fn skip(b: &mut ProgramBuilder, x: Slot, out: usize) -> Result<Slot> {
    if b.channels(x) == out {
        Ok(x)
    } else {
        b.conv("skip", x, out, 1)
    }
}

/// Emits `spec` into `b`, reading from `x`; returns the output slot.
pub fn emit_block(b: &mut ProgramBuilder, spec: &BlockSpec, x: Slot) -> Result<Slot> {
    spec.validate()?;
    if b.channels(x) != spec.channels_in {
        return Err(Error::config(format!(
            "block expects {} input channels, got {}",
            spec.channels_in,
            b.channels(x)
        )));
    }
    let cout = spec.channels_out;
    match spec.kind {
        BlockKind::ResNetBottleneck => {
            let m = cout / spec.ratio;
            let a = unit(b, "reduce", x, m, 1)?;
            let c = unit(b, "spatial", a, m, 3)?;
            let e = unit(b, "expand", c, cout, 1)?;
            let s = skip(b, x, cout)?;
            b.add(&[e, s])
        }
        BlockKind::InceptionResNet => {
            let t = cout / spec.ratio;
            let a = b.bn_relu("bn", x);
            let t1 = b.conv("tower1/conv", a, t, 1)?;
            let t2 = b.conv("tower2/conv", a, t, 1)?;
            let t2 = unit(b, "tower2/unit", t2, t, 3)?;
            let t3 = b.conv("tower3/conv", a, t, 1)?;
            let t3 = unit(b, "tower3/unit1", t3, t, 3)?;
            let t3 = unit(b, "tower3/unit2", t3, t, 3)?;
            let cat = b.concat(&[t1, t2, t3]);
            let merged = unit(b, "merge", cat, cout, 1)?;
            let s = skip(b, x, cout)?;
            b.add(&[merged, s])
        }
        BlockKind::Hpm => {
            let p1 = unit(b, "path1", x, cout / 2, 3)?;
            let p2 = unit(b, "path2", p1, cout / 4, 3)?;
            let p3 = unit(b, "path3", p2, cout / 4, 3)?;
            let cat = b.concat(&[p1, p2, p3]);
            let s = skip(b, x, cout)?;
            b.add(&[cat, s])
        }
        BlockKind::Cab => {
            let l = spec.levels;
            // Branches x_0..x_L, taken before each width decrease.
            let mut branches = vec![x];
            for i in 1..=l {
                let w = spec.channels_in >> i;
                let prev = *branches.last().expect("non-empty");
                branches.push(sep_unit(b, &format!("down{i}"), prev, w)?);
            }
            let w_bottom = spec.channels_in >> l;
            let mut y = sep_unit(b, "bottom", branches[l], w_bottom)?;
            for i in (1..=l).rev() {
                let merged = b.add(&[y, branches[i]])?;
                y = b.scoped(&format!("up{i}"), |b| -> Result<Slot> {
                    let r = b.replicate(merged, 2);
                    let a = b.bn_relu("bn", r);
                    b.depthwise("depthwise", a, 3)
                })?;
            }
            b.add(&[y, x])
        }
    }
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn unit_count(cin: usize, cout: usize, k: usize) -> usize {
    2 * cin + conv_count(cin, cout, k)
}

fn sep_count(cin: usize, cout: usize) -> usize {
    2 * cin + conv_count(1, cin, 3) + conv_count(cin, cout, 1)
}

/// Closed-form learnable-scalar count of [`build_block`]`(spec)`.
pub fn block_param_count(spec: &BlockSpec) -> Result<usize> {
    spec.validate()?;
    let (cin, cout) = (spec.channels_in, spec.channels_out);
    let proj = if cin == cout { 0 } else { conv_count(cin, cout, 1) };
    Ok(match spec.kind {
        BlockKind::ResNetBottleneck => {
            let m = cout / spec.ratio;
            unit_count(cin, m, 1) + unit_count(m, m, 3) + unit_count(m, cout, 1) + proj
        }
        BlockKind::InceptionResNet => {
            let t = cout / spec.ratio;
            2 * cin + 3 * conv_count(cin, t, 1) + 3 * unit_count(t, t, 3) + unit_count(3 * t, cout, 1) + proj
        }
        BlockKind::Hpm => {
            unit_count(cin, cout / 2, 3) + unit_count(cout / 2, cout / 4, 3) + unit_count(cout / 4, cout / 4, 3) + proj
        }
        BlockKind::Cab => {
            let w = |i: usize| cin >> i;
            let l = spec.levels;
            // An increase stage is BN (2w), depthwise 3x3 (9w) and bias (w).
            (1..=l).map(|i| sep_count(w(i - 1), w(i)) + 12 * w(i - 1)).sum::<usize>() + sep_count(w(l), w(l))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Shape, Tape, Tensor};
    use crate::graph::{run, Mode, ParamStore};

    #[test]
    fn bottleneck_weights_match_hand_count() {
        let spec = BlockSpec::new(BlockKind::ResNetBottleneck, 256, 256);
        let g = build_block(&spec).unwrap();
        let weights: usize = g
            .program
            .params
            .iter()
            .filter(|p| p.name.ends_with("conv/weight"))
            .map(|p| p.shape.numel())
            .sum();
        assert_eq!(weights, 256 * 64 + 64 * 64 * 9 + 64 * 256);
        assert_eq!(weights, 69_632);
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for kind in BlockKind::ALL {
            for (cin, cout) in [(16, 16), (32, 32), (16, 32)] {
                let mut spec = BlockSpec::new(kind, cin, cout);
                if kind == BlockKind::Cab && cin != cout {
                    continue;
                }
                for levels in 0..3 {
                    spec.levels = levels;
                    let built = build_block(&spec).unwrap().param_count();
                    assert_eq!(block_param_count(&spec).unwrap(), built, "{spec:?}");
                }
            }
        }
    }

    #[test]
    fn cab_rejects_indivisible_width() {
        assert!(build_block(&BlockSpec::cab(12, 3)).is_err());
        assert!(build_block(&BlockSpec::cab(4, 3)).is_err());
        assert!(build_block(&BlockSpec::cab(8, 3)).is_ok());
        let mut s = BlockSpec::cab(16, 1);
        s.channels_out = 32;
        assert!(matches!(build_block(&s), Err(Error::Config(_))));
    }

    #[test]
    fn cab_profile_default() {
        assert_eq!(BlockSpec::cab(64, 2).cab_profile(), vec![64, 32, 16, 16, 32, 64]);
        assert_eq!(BlockSpec::cab(8, 0).cab_profile(), vec![8, 8]);
    }

    #[test]
    fn cab_preserves_shape_and_stays_finite() {
        let g = build_block(&BlockSpec::cab(64, 2)).unwrap();
        let store = ParamStore::<f32>::init(&g.program, 1);
        let mut tape = Tape::new();
        let mut rng = rand::rng();
        let shape = Shape::new(2, 64, 8, 8);
        let x = tape.leaf(Tensor::uniform(shape, -1.0, 1.0, &mut rng), false);
        let f = run(&g.program, &store, &mut tape, x, Mode::Train, false).unwrap();
        let y = tape.value(f.outputs[0]);
        assert_eq!(y.shape(), shape);
        assert!(y.all_finite());
    }

    #[test]
    fn dot_mentions_replication() {
        let dot = build_block(&BlockSpec::cab(16, 2)).unwrap().to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("replicate_channels"));
    }
}
