//! Multi-scale topologies (U-Net, Hourglass, DLA and the three scale
//! aggregation variants), stacking with intermediate heads, and size
//! analysis.

mod check;
mod stack;

pub use check::{check_model, full_check_model, model_check_config};
pub use stack::{build_model, ModelConfig, ModelSummary, StackedModel};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{emit_block, sep_unit, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::graph::{ProgramBuilder, Slot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TopologyKind {
    #[serde(alias = "unet")]
    UNet,
    #[serde(alias = "hourglass")]
    Hourglass,
    #[serde(alias = "DLA", alias = "dla")]
    Dla,
    #[serde(alias = "SAT1", alias = "sat1")]
    Sat1,
    #[serde(alias = "SAT2", alias = "sat2")]
    Sat2,
    #[serde(alias = "SAT3", alias = "sat3")]
    Sat3,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 6] = [
        TopologyKind::UNet,
        TopologyKind::Hourglass,
        TopologyKind::Dla,
        TopologyKind::Sat1,
        TopologyKind::Sat2,
        TopologyKind::Sat3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::UNet => "UNet",
            TopologyKind::Hourglass => "Hourglass",
            TopologyKind::Dla => "DLA",
            TopologyKind::Sat1 => "SAT1",
            TopologyKind::Sat2 => "SAT2",
            TopologyKind::Sat3 => "SAT3",
        }
    }

    fn has_down_edges(self) -> bool {
        matches!(self, TopologyKind::Sat1 | TopologyKind::Sat2 | TopologyKind::Sat3)
    }
}

/// Block recipe applied at every node; widths come from the topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBlock {
    pub kind: BlockKind,
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_ratio() -> usize {
    4
}

fn default_levels() -> usize {
    2
}

fn default_resolution() -> usize {
    64
}

impl NodeBlock {
    pub fn new(kind: BlockKind) -> Self {
        NodeBlock {
            kind,
            ratio: default_ratio(),
            levels: default_levels(),
        }
    }

    pub fn at_width(&self, width: usize) -> BlockSpec {
        BlockSpec {
            kind: self.kind,
            channels_in: width,
            channels_out: width,
            ratio: self.ratio,
            levels: self.levels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub down_steps: usize,
    pub base_width: usize,
    pub block: NodeBlock,
    /// Side length of the feature maps entering the topology.
    #[serde(default = "default_resolution")]
    pub input_resolution: usize,
    /// Aggregation nodes, as `[level, column]`, that receive a down-sampled
    /// input. `None` selects the kind's default.
    #[serde(default)]
    pub down_edges: Option<Vec<[usize; 2]>>,
}

impl TopologySpec {
    pub fn new(kind: TopologyKind, down_steps: usize, base_width: usize, block: BlockKind) -> Self {
        TopologySpec {
            kind,
            down_steps,
            base_width,
            block: NodeBlock::new(block),
            input_resolution: default_resolution(),
            down_edges: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.down_steps) {
            return Err(Error::config(format!("down_steps must be 3 or 4, got {}", self.down_steps)));
        }
        if matches!(self.kind, TopologyKind::Sat2 | TopologyKind::Sat3) && self.down_steps != 3 {
            return Err(Error::config(format!(
                "{} is defined with three down-sampling steps, got {}",
                self.kind.name(),
                self.down_steps
            )));
        }
        let div = 1 << self.down_steps;
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(div) {
            return Err(Error::config(format!(
                "input resolution {} is not divisible by 2^{}",
                self.input_resolution, self.down_steps
            )));
        }
        if self.down_edges.is_some() && !self.kind.has_down_edges() {
            return Err(Error::config(format!("{} has no down-sampling aggregation edges", self.kind.name())));
        }
        if let Some(mask) = &self.down_edges {
            let d = self.down_steps;
            if let Some(bad) = mask.iter().find(|[l, j]| *l == 0 || *j == 0 || *l + *j > d) {
                return Err(Error::config(format!(
                    "down edge target {bad:?} is not an aggregation node with level >= 1"
                )));
            }
        }
        self.block.at_width(self.base_width).validate()
    }

    /// Targets `(level, column)` of down edges.
    fn down_targets(&self) -> Vec<(usize, usize)> {
        if let Some(mask) = &self.down_edges {
            return mask.iter().map(|[l, j]| (*l, *j)).collect();
        }
        let d = self.down_steps;
        match self.kind {
            TopologyKind::Sat1 | TopologyKind::Sat2 => {
                (1..=d).flat_map(|j| (1..=d - j).map(move |l| (l, j))).collect()
            }
            TopologyKind::Sat3 => (1..d).map(|l| (l, 1)).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeRole {
    Encoder,
    Skip,
    Decoder,
    Aggregation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Merge {
    /// Exactly one input, used as is.
    Single,
    Add,
    /// Concatenate, then a 1x1 convolution back to the node width.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeBody {
    Block,
    SeparableConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EdgeKind {
    Lateral,
    /// 2x nearest-neighbour up-sampling.
    Up,
    /// 2x max pooling.
    Down,
}

#[derive(Clone, Debug, Serialize)]
pub struct DagNode {
    pub column: usize,
    pub level: usize,
    pub role: NodeRole,
    pub merge: Merge,
    pub body: NodeBody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DagEdge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

/// Nodes listed in a valid execution order; node 0 reads the DAG input.
#[derive(Clone, Debug, Serialize)]
pub struct ScaleDag {
    pub spec: TopologySpec,
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
    pub output: usize,
}

struct DagBuilder {
    nodes: Vec<DagNode>,
    edges: Vec<DagEdge>,
    at: BTreeMap<(usize, usize), usize>,
}

impl DagBuilder {
    fn node(&mut self, column: usize, level: usize, role: NodeRole, merge: Merge, body: NodeBody) -> usize {
        let id = self.nodes.len();
        self.nodes.push(DagNode {
            column,
            level,
            role,
            merge,
            body,
        });
        let prev = self.at.insert((column, level), id);
        debug_assert!(prev.is_none(), "two nodes at ({column}, {level})");
        id
    }

    fn edge(&mut self, from: usize, to: usize, kind: EdgeKind) {
        self.edges.push(DagEdge { from, to, kind });
    }

    fn id(&self, column: usize, level: usize) -> usize {
        self.at[&(column, level)]
    }
}

pub fn build_topology(spec: &TopologySpec) -> Result<ScaleDag> {
    spec.validate()?;
    let d = spec.down_steps;
    let mut g = DagBuilder {
        nodes: Vec::new(),
        edges: Vec::new(),
        at: BTreeMap::new(),
    };
    for l in 0..=d {
        let merge = Merge::Single;
        let n = g.node(0, l, NodeRole::Encoder, merge, NodeBody::Block);
        if l > 0 {
            g.edge(g.id(0, l - 1), n, EdgeKind::Down);
        }
    }
    let output = match spec.kind {
        TopologyKind::UNet | TopologyKind::Hourglass => {
            let hourglass = spec.kind == TopologyKind::Hourglass;
            let shift = usize::from(hourglass);
            let mut below = g.id(0, d);
            for l in (0..d).rev() {
                let lateral_src = if hourglass {
                    let s = g.node(1, l, NodeRole::Skip, Merge::Single, NodeBody::Block);
                    g.edge(g.id(0, l), s, EdgeKind::Lateral);
                    s
                } else {
                    g.id(0, l)
                };
                let dec = g.node(d - l + shift, l, NodeRole::Decoder, Merge::Add, NodeBody::Block);
                g.edge(lateral_src, dec, EdgeKind::Lateral);
                g.edge(below, dec, EdgeKind::Up);
                below = dec;
            }
            below
        }
        _ => {
            let sat3 = spec.kind == TopologyKind::Sat3;
            let (merge, body) = if sat3 {
                (Merge::Add, NodeBody::SeparableConv)
            } else {
                (Merge::ConcatProject, NodeBody::Block)
            };
            let downs = spec.down_targets();
            for j in 1..=d {
                for l in (0..=d - j).rev() {
                    let n = g.node(j, l, NodeRole::Aggregation, merge, body);
                    g.edge(g.id(j - 1, l), n, EdgeKind::Lateral);
                    g.edge(g.id(j - 1, l + 1), n, EdgeKind::Up);
                    if l >= 1 && downs.contains(&(l, j)) {
                        g.edge(g.id(j - 1, l - 1), n, EdgeKind::Down);
                    }
                }
            }
            g.id(d, 0)
        }
    };
    let dag = ScaleDag {
        spec: spec.clone(),
        nodes: g.nodes,
        edges: g.edges,
        output,
    };
    dag.validate()?;
    Ok(dag)
}

impl ScaleDag {
    pub fn resolution(&self, level: usize) -> usize {
        self.spec.input_resolution >> level
    }

    pub fn deepest_resolution(&self) -> usize {
        let lmax = self.nodes.iter().map(|n| n.level).max().unwrap_or(0);
        self.resolution(lmax)
    }

    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..=self.spec.down_steps).map(|l| self.resolution(l)).collect()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn aggregation_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.role == NodeRole::Aggregation).count()
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &DagEdge> {
        self.edges.iter().filter(move |e| e.to == node)
    }

    /// Column-0 nodes, shallowest first.
    pub fn encoder_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].column == 0).collect();
        v.sort_by_key(|&i| self.nodes[i].level);
        v
    }

    /// Nodes reached by following up edges from the deepest encoder node to
    /// the output.
    pub fn decoder_path(&self) -> Vec<usize> {
        let mut cur = *self.encoder_nodes().last().expect("encoder exists");
        let mut path = vec![cur];
        while let Some(e) = self.edges.iter().find(|e| e.from == cur && e.kind == EdgeKind::Up) {
            cur = e.to;
            path.push(cur);
        }
        path
    }

    /// Structural checks: edge direction follows node order, edges join
    /// adjacent or equal levels as their kind demands, every non-input node
    /// has inputs matching its merge rule.
    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if e.from >= e.to {
                return Err(Error::config(format!("edge {} -> {} breaks execution order", e.from, e.to)));
            }
            let (a, b) = (self.nodes[e.from].level, self.nodes[e.to].level);
            let ok = match e.kind {
                EdgeKind::Lateral => a == b,
                EdgeKind::Up => a == b + 1,
                EdgeKind::Down => b == a + 1,
            };
            if !ok {
                return Err(Error::config(format!(
                    "{:?} edge from level {a} to level {b}",
                    e.kind
                )));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let count = self.incoming(i).count();
            let expected_ok = match n.merge {
                Merge::Single => count == usize::from(i != 0),
                Merge::Add | Merge::ConcatProject => count >= 2,
            };
            if !expected_ok {
                return Err(Error::config(format!("node {i} has {count} inputs for merge {:?}", n.merge)));
            }
            for e in self.incoming(i) {
                let src = self.nodes[e.from].level;
                let res = match e.kind {
                    EdgeKind::Lateral => self.resolution(src),
                    EdgeKind::Up => self.resolution(src) * 2,
                    EdgeKind::Down => self.resolution(src) / 2,
                };
                if res != self.resolution(n.level) {
                    return Err(Error::config(format!("node {i} receives resolution {res}")));
                }
            }
        }
        Ok(())
    }

    fn node_name(&self, i: usize) -> String {
        let n = &self.nodes[i];
        format!("n{}_{}", n.column, n.level)
    }

    /// Emits the DAG reading from `x`; returns the output node's slot.
    pub fn emit(&self, b: &mut ProgramBuilder, x: Slot) -> Result<Slot> {
        let width = self.spec.base_width;
        if b.channels(x) != width {
            return Err(Error::config(format!(
                "topology expects {width} input channels, got {}",
                b.channels(x)
            )));
        }
        let block = self.spec.block.at_width(width);
        let mut out: Vec<Option<Slot>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let name = self.node_name(i);
            let slot = b.scoped(&name, |b| -> Result<Slot> {
                let mut ins = Vec::new();
                for e in self.incoming(i) {
                    let src = out[e.from].expect("sources precede targets");
                    ins.push(match e.kind {
                        EdgeKind::Lateral => src,
                        EdgeKind::Up => b.upsample(src),
                        EdgeKind::Down => b.max_pool(src),
                    });
                }
                let merged = match node.merge {
                    Merge::Single => ins.first().copied().unwrap_or(x),
                    Merge::Add => b.add(&ins)?,
                    Merge::ConcatProject => {
                        let cat = b.concat(&ins);
                        b.conv("project", cat, width, 1)?
                    }
                };
                match node.body {
                    NodeBody::Block => b.scoped("block", |b| emit_block(b, &block, merged)),
                    NodeBody::SeparableConv => sep_unit(b, "sep", merged, width),
                }
            })?;
            out[i] = Some(slot);
        }
        Ok(out[self.output].expect("output emitted"))
    }

    pub fn param_count(&self) -> Result<usize> {
        let mut b = ProgramBuilder::new(self.spec.base_width);
        let x = b.input();
        self.emit(&mut b, x)?;
        Ok(b.param_count())
    }
}

/// Graphviz rendering of a scale DAG: one rank per level.
pub fn export_dot(dag: &ScaleDag) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "digraph \"{}\" {{", dag.spec.kind.name());
    let _ = writeln!(s, "  rankdir=LR;");
    for l in 0..=dag.spec.down_steps {
        let members: Vec<String> = (0..dag.nodes.len())
            .filter(|&i| dag.nodes[i].level == l)
            .map(|i| dag.node_name(i))
            .collect();
        let _ = writeln!(s, "  {{ rank=same; {} }}", members.join("; "));
    }
    for (i, n) in dag.nodes.iter().enumerate() {
        let shape = if i == dag.output { "doublecircle" } else { "circle" };
        let _ = writeln!(
            s,
            "  {} [label=\"{:?}\\n{}x{}\", shape={shape}];",
            dag.node_name(i),
            n.role,
            dag.resolution(n.level),
            dag.resolution(n.level)
        );
    }
    for e in &dag.edges {
        let style = match e.kind {
            EdgeKind::Lateral => "solid",
            EdgeKind::Up => "dashed",
            EdgeKind::Down => "dotted",
        };
        let _ = writeln!(
            s,
            "  {} -> {} [style={style}, label=\"{:?}\"];",
            dag.node_name(e.from),
            dag.node_name(e.to),
            e.kind
        );
    }
    s.push_str("}\n");
    s
}
