use super::{Instr, ParamStore, Program};
use crate::engine::{BatchStats, Float, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are reported back, not applied.
    Train,
    /// Stored running statistics.
    Eval,
}

pub struct Forward {
    pub outputs: Vec<Var>,
    /// Leaf handle of every parameter, aligned with `Program::params`.
    pub params: Vec<Var>,
    /// Batch statistics per batch norm (train mode only).
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// Records `prog` on `tape` starting from `input`. Parameters become leaves
/// that require gradients when `trainable` is set.
pub fn run<T: Float>(
    prog: &Program,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    input: Var,
    mode: Mode,
    trainable: bool,
) -> Result<Forward> {
    store.validate(prog)?;
    let params: Vec<Var> = store.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect();
    run_with_params(prog, store, tape, input, mode, params)
}

/// Like [`run`], but reuses parameter leaves already on the tape, so that
/// several forwards accumulate gradient into the same handles.
pub fn run_with_params<T: Float>(
    prog: &Program,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    input: Var,
    mode: Mode,
    params: Vec<Var>,
) -> Result<Forward> {
    crate::error::check_dim("run", "params", prog.params.len(), params.len())?;
    let mut batch_stats = vec![None; prog.bns.len()];
    let mut slots: Vec<Var> = Vec::with_capacity(prog.instrs.len() + 1);
    slots.push(input);
    for ins in &prog.instrs {
        let s = |v: &super::Slot| slots[v.0];
        let out = match ins {
            Instr::Conv {
                x,
                weight,
                bias,
                geometry,
            } => tape.conv2d(s(x), params[weight.0], bias.map(|b| params[b.0]), *geometry)?,
            Instr::DeformConv {
                x,
                offsets,
                weight,
                bias,
                geometry,
            } => tape.deformable_conv2d(s(x), s(offsets), params[weight.0], bias.map(|b| params[b.0]), *geometry)?,
            Instr::BatchNorm { x, bn } => {
                let decl = &prog.bns[bn.0];
                let (g, b) = (params[decl.gamma.0], params[decl.beta.0]);
                match mode {
                    Mode::Train => {
                        let (y, st) = tape.batch_norm_train(s(x), g, b)?;
                        batch_stats[bn.0] = Some(st);
                        y
                    }
                    Mode::Eval => {
                        let r = &store.running[bn.0];
                        tape.batch_norm_eval(s(x), g, b, &r.mean, &r.var)?
                    }
                }
            }
            Instr::Relu { x } => tape.relu(s(x))?,
            Instr::Add { xs } => {
                let vs: Vec<Var> = xs.iter().map(s).collect();
                tape.add_n(&vs)?
            }
            Instr::Concat { xs } => {
                let vs: Vec<Var> = xs.iter().map(s).collect();
                tape.concat_channels(&vs)?
            }
            Instr::Replicate { x, factor } => tape.replicate_channels(s(x), *factor)?,
            Instr::MaxPool { x } => tape.max_pool2d(s(x))?,
            Instr::Upsample { x } => tape.upsample_nearest2x(s(x))?,
        };
        slots.push(out);
    }
    let outputs = prog.outputs.iter().map(|o| slots[o.0]).collect();
    Ok(Forward {
        outputs,
        params,
        batch_stats,
    })
}
