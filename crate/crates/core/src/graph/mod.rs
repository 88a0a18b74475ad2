//! A flat, single-assignment program over engine ops.
//!
//! Slot 0 holds the program input; instruction `k` writes slot `k + 1`.
//! Blocks and whole stacked models are both expressed as programs, which
//! makes parameter enumeration, FLOP estimates and DOT export uniform.

mod builder;
mod interp;
mod params;

pub use builder::ProgramBuilder;
pub use interp::{run, run_with_params, Forward, Mode};
pub use params::{ParamStore, RunningStats};

use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::conv::conv_out_size;
use crate::engine::{ConvGeometry, Shape};
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Slot(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BnId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

#[derive(Clone, Debug, Serialize)]
pub struct BnDecl {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug, Serialize)]
pub enum Instr {
    Conv {
        x: Slot,
        weight: ParamId,
        bias: Option<ParamId>,
        geometry: ConvGeometry,
    },
    DeformConv {
        x: Slot,
        offsets: Slot,
        weight: ParamId,
        bias: Option<ParamId>,
        geometry: ConvGeometry,
    },
    BatchNorm {
        x: Slot,
        bn: BnId,
    },
    Relu {
        x: Slot,
    },
    Add {
        xs: Vec<Slot>,
    },
    Concat {
        xs: Vec<Slot>,
    },
    Replicate {
        x: Slot,
        factor: usize,
    },
    MaxPool {
        x: Slot,
    },
    Upsample {
        x: Slot,
    },
}

impl Instr {
    pub fn name(&self) -> &'static str {
        match self {
            Instr::Conv { .. } => "conv2d",
            Instr::DeformConv { .. } => "deformable_conv2d",
            Instr::BatchNorm { .. } => "batch_norm",
            Instr::Relu { .. } => "relu",
            Instr::Add { .. } => "add",
            Instr::Concat { .. } => "concat_channels",
            Instr::Replicate { .. } => "replicate_channels",
            Instr::MaxPool { .. } => "max_pool2d",
            Instr::Upsample { .. } => "upsample_nearest2x",
        }
    }

    pub fn inputs(&self) -> Vec<Slot> {
        match self {
            Instr::Conv { x, .. }
            | Instr::BatchNorm { x, .. }
            | Instr::Relu { x }
            | Instr::Replicate { x, .. }
            | Instr::MaxPool { x }
            | Instr::Upsample { x } => vec![*x],
            Instr::DeformConv { x, offsets, .. } => vec![*x, *offsets],
            Instr::Add { xs } | Instr::Concat { xs } => xs.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Program {
    pub input_channels: usize,
    pub params: Vec<ParamDecl>,
    pub bns: Vec<BnDecl>,
    pub instrs: Vec<Instr>,
    /// Human-readable label per instruction (its scope path).
    pub labels: Vec<String>,
    pub outputs: Vec<Slot>,
}

impl Program {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Propagates shapes from an input shape, validating every instruction.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        check_dim("program", "channels", self.input_channels, input.c())?;
        let mut shapes = vec![input];
        for ins in &self.instrs {
            let s = |v: &Slot| shapes[v.0];
            let out = match ins {
                Instr::Conv { x, weight, geometry, .. } | Instr::DeformConv { x, weight, geometry, .. } => {
                    let xs = s(x);
                    let ws = self.params[weight.0].shape;
                    check_dim(ins.name(), "channels", ws.c() * geometry.groups, xs.c())?;
                    Shape::new(
                        xs.n(),
                        ws.n(),
                        conv_out_size(xs.h(), ws.h(), *geometry),
                        conv_out_size(xs.w(), ws.w(), *geometry),
                    )
                }
                Instr::BatchNorm { x, bn } => {
                    check_dim("batch_norm", "channels", self.bns[bn.0].channels, s(x).c())?;
                    s(x)
                }
                Instr::Relu { x } => s(x),
                Instr::Add { xs } => {
                    let first = s(&xs[0]);
                    for v in xs {
                        for (i, axis) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
                            check_dim("add", axis, first.0[i], s(v).0[i])?;
                        }
                    }
                    first
                }
                Instr::Concat { xs } => {
                    let first = s(&xs[0]);
                    for v in xs {
                        check_dim("concat_channels", "height", first.h(), s(v).h())?;
                        check_dim("concat_channels", "width", first.w(), s(v).w())?;
                    }
                    first.with_c(xs.iter().map(|v| s(v).c()).sum())
                }
                Instr::Replicate { x, factor } => s(x).with_c(s(x).c() * factor),
                Instr::MaxPool { x } => {
                    let xs = s(x);
                    if xs.h() % 2 != 0 || xs.w() % 2 != 0 {
                        return Err(Error::config(format!("max_pool2d on odd spatial size {xs}")));
                    }
                    xs.with_hw(xs.h() / 2, xs.w() / 2)
                }
                Instr::Upsample { x } => s(x).with_hw(s(x).h() * 2, s(x).w() * 2),
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Multiply-accumulates of every convolution, times two.
    pub fn flops(&self, input: Shape) -> Result<u64> {
        let shapes = self.infer_shapes(input)?;
        let mut total = 0u64;
        for (k, ins) in self.instrs.iter().enumerate() {
            if let Instr::Conv { weight, .. } | Instr::DeformConv { weight, .. } = ins {
                let ws = self.params[weight.0].shape;
                let os = shapes[k + 1];
                let macs = (ws.c() * ws.h() * ws.w()) as u64 * os.numel() as u64;
                total += 2 * macs;
            }
        }
        Ok(total)
    }

    /// Graphviz rendering of the instruction graph.
    pub fn to_dot(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{title}\" {{");
        let _ = writeln!(out, "  rankdir=TB;");
        let _ = writeln!(out, "  s0 [label=\"input ({} ch)\", shape=box];", self.input_channels);
        for (k, ins) in self.instrs.iter().enumerate() {
            let extra = match ins {
                Instr::Conv { weight, .. } | Instr::DeformConv { weight, .. } => {
                    let ws = self.params[weight.0].shape;
                    format!("\\n{}x{} {}->{}", ws.h(), ws.w(), ws.c(), ws.n())
                }
                Instr::Replicate { factor, .. } => format!("\\nx{factor}"),
                _ => String::new(),
            };
            let _ = writeln!(out, "  s{} [label=\"{}{}\\n{}\"];", k + 1, ins.name(), extra, self.labels[k]);
            for src in ins.inputs() {
                let _ = writeln!(out, "  s{} -> s{};", src.0, k + 1);
            }
        }
        for (i, o) in self.outputs.iter().enumerate() {
            let _ = writeln!(out, "  out{i} [label=\"output {i}\", shape=box];");
            let _ = writeln!(out, "  s{} -> out{i};", o.0);
        }
        out.push_str("}\n");
        out
    }
}
