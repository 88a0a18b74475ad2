use super::{BnDecl, BnId, Init, Instr, ParamDecl, ParamId, Program, Slot};
use crate::engine::{ConvGeometry, Shape};
use crate::error::{Error, Result};

/// Incrementally emits a [`Program`], tracking the channel count of every
/// slot and prefixing parameter names with the current scope path.
pub struct ProgramBuilder {
    prog: Program,
    channels: Vec<usize>,
    scope: Vec<String>,
}

impl ProgramBuilder {
    pub fn new(input_channels: usize) -> Self {
        ProgramBuilder {
            prog: Program {
                input_channels,
                params: Vec::new(),
                bns: Vec::new(),
                instrs: Vec::new(),
                labels: Vec::new(),
                outputs: Vec::new(),
            },
            channels: vec![input_channels],
            scope: Vec::new(),
        }
    }

    pub fn input(&self) -> Slot {
        Slot(0)
    }

    pub fn channels(&self, s: Slot) -> usize {
        self.channels[s.0]
    }

    /// Runs `f` with `name` appended to the scope path.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let r = f(self);
        self.scope.pop();
        r
    }

    fn path(&self, leaf: &str) -> String {
        let mut p = self.scope.join("/");
        if !p.is_empty() {
            p.push('/');
        }
        p.push_str(leaf);
        p
    }

    fn param(&mut self, leaf: &str, shape: Shape, init: Init) -> ParamId {
        let name = self.path(leaf);
        debug_assert!(self.prog.param_index(&name).is_none(), "duplicate parameter {name}");
        self.prog.params.push(ParamDecl { name, shape, init });
        ParamId(self.prog.params.len() - 1)
    }

    /// Replaces the initialiser of the parameter `path` below the current scope.
    pub fn set_init(&mut self, path: &str, init: Init) -> Result<()> {
        let name = self.path(path);
        let i = self
            .prog
            .param_index(&name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
        self.prog.params[i.0].init = init;
        Ok(())
    }

    fn emit(&mut self, ins: Instr, out_channels: usize) -> Slot {
        let label = self.scope.join("/");
        self.prog.instrs.push(ins);
        self.prog.labels.push(label);
        self.channels.push(out_channels);
        Slot(self.channels.len() - 1)
    }

    /// Convolution with bias and "same" padding. The weight is Kaiming
    /// initialised unless `zero_init` is set.
    fn conv_impl(&mut self, x: Slot, out: usize, kernel: usize, groups: usize, zero_init: bool) -> Result<Slot> {
        let cin = self.channels(x);
        if groups == 0 || !cin.is_multiple_of(groups) || !out.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "conv: groups {groups} must divide {cin} input and {out} output channels"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!("conv: kernel {kernel} must be odd")));
        }
        let fan_in = cin / groups * kernel * kernel;
        let init = if zero_init { Init::Zeros } else { Init::Kaiming { fan_in } };
        let weight = self.param("weight", Shape::new(out, cin / groups, kernel, kernel), init);
        let bias = self.param("bias", Shape::new(1, out, 1, 1), Init::Zeros);
        Ok(self.emit(
            Instr::Conv {
                x,
                weight,
                bias: Some(bias),
                geometry: ConvGeometry::same(kernel, groups),
            },
            out,
        ))
    }

    pub fn conv(&mut self, name: &str, x: Slot, out: usize, kernel: usize) -> Result<Slot> {
        self.scoped(name, |b| b.conv_impl(x, out, kernel, 1, false))
    }

    pub fn depthwise(&mut self, name: &str, x: Slot, kernel: usize) -> Result<Slot> {
        let c = self.channels(x);
        self.scoped(name, |b| b.conv_impl(x, c, kernel, c, false))
    }

    /// A convolution whose weight and bias both start at zero.
    pub fn conv_zero(&mut self, name: &str, x: Slot, out: usize, kernel: usize) -> Result<Slot> {
        self.scoped(name, |b| b.conv_impl(x, out, kernel, 1, true))
    }

    pub fn deform_conv(&mut self, name: &str, x: Slot, offsets: Slot, out: usize, kernel: usize) -> Result<Slot> {
        let cin = self.channels(x);
        if self.channels(offsets) != 2 * kernel * kernel {
            return Err(Error::config(format!(
                "deform_conv: offsets carry {} channels, kernel {kernel} needs {}",
                self.channels(offsets),
                2 * kernel * kernel
            )));
        }
        self.scoped(name, |b| {
            let weight = b.param(
                "weight",
                Shape::new(out, cin, kernel, kernel),
                Init::Kaiming {
                    fan_in: cin * kernel * kernel,
                },
            );
            let bias = b.param("bias", Shape::new(1, out, 1, 1), Init::Zeros);
            Ok(b.emit(
                Instr::DeformConv {
                    x,
                    offsets,
                    weight,
                    bias: Some(bias),
                    geometry: ConvGeometry::same(kernel, 1),
                },
                out,
            ))
        })
    }

    pub fn batch_norm(&mut self, name: &str, x: Slot) -> Slot {
        let c = self.channels(x);
        self.scoped(name, |b| {
            let gamma = b.param("gamma", Shape::new(1, c, 1, 1), Init::Ones);
            let beta = b.param("beta", Shape::new(1, c, 1, 1), Init::Zeros);
            let name = b.path("");
            b.prog.bns.push(BnDecl {
                name: name.trim_end_matches('/').to_string(),
                channels: c,
                gamma,
                beta,
            });
            let bn = BnId(b.prog.bns.len() - 1);
            b.emit(Instr::BatchNorm { x, bn }, c)
        })
    }

    pub fn relu(&mut self, x: Slot) -> Slot {
        let c = self.channels(x);
        self.emit(Instr::Relu { x }, c)
    }

    /// BN followed by ReLU.
    pub fn bn_relu(&mut self, name: &str, x: Slot) -> Slot {
        let y = self.batch_norm(name, x);
        self.relu(y)
    }

    pub fn add(&mut self, xs: &[Slot]) -> Result<Slot> {
        let c = self.channels(xs[0]);
        if let Some(bad) = xs.iter().find(|s| self.channels(**s) != c) {
            return Err(Error::config(format!(
                "add: operands carry {c} and {} channels",
                self.channels(*bad)
            )));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        Ok(self.emit(Instr::Add { xs: xs.to_vec() }, c))
    }

    pub fn concat(&mut self, xs: &[Slot]) -> Slot {
        if xs.len() == 1 {
            return xs[0];
        }
        let c = xs.iter().map(|s| self.channels(*s)).sum();
        self.emit(Instr::Concat { xs: xs.to_vec() }, c)
    }

    pub fn replicate(&mut self, x: Slot, factor: usize) -> Slot {
        let c = self.channels(x) * factor;
        self.emit(Instr::Replicate { x, factor }, c)
    }

    pub fn max_pool(&mut self, x: Slot) -> Slot {
        let c = self.channels(x);
        self.emit(Instr::MaxPool { x }, c)
    }

    pub fn upsample(&mut self, x: Slot) -> Slot {
        let c = self.channels(x);
        self.emit(Instr::Upsample { x }, c)
    }

    pub fn mark_output(&mut self, x: Slot) {
        self.prog.outputs.push(x);
    }

    pub fn param_count(&self) -> usize {
        self.prog.param_count()
    }

    pub fn finish(self) -> Program {
        self.prog
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_prefix_parameter_names() {
        let mut b = ProgramBuilder::new(3);
        let x = b.input();
        let y = b.scoped("stem", |b| b.conv("conv", x, 8, 3)).unwrap();
        let z = b.bn_relu("bn", y);
        b.mark_output(z);
        let p = b.finish();
        let names: Vec<&str> = p.params.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["stem/conv/weight", "stem/conv/bias", "bn/gamma", "bn/beta"]);
        assert_eq!(p.bns[0].name, "bn");
        assert_eq!(p.param_count(), 8 * 3 * 9 + 8 + 16);
    }

    #[test]
    fn grouped_conv_rejects_indivisible_channels() {
        let mut b = ProgramBuilder::new(6);
        let x = b.input();
        assert!(b.scoped("c", |b| b.conv_impl(x, 4, 3, 4, false)).is_err());
    }
}
