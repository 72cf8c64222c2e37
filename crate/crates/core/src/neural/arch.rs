//! Architecture descriptions and the constructors for the paper networks.

use serde::{Deserialize, Serialize};

use crate::dataset::input_rows;
use crate::error::{Error, Result};

pub type Kernel = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d { out: usize, kernel: Kernel },
    /// Four parallel flows concatenated: 1x1; 1x1 then `k_a`; 1x1 then `k_b`;
    /// 3x3 max-pool then 1x1.
    Inception { out: usize, k_a: Kernel, k_b: Kernel },
    Dense { out: usize },
    BatchNorm,
    Relu,
    /// Concatenate the running tensor with the output of layer `from`.
    SkipConcat { from: usize },
    AdaptiveAvgPool { h: usize, w: usize },
}

/// How output logits map to a relay assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `(K+1) x N` map; softmax down each source column.
    PerSource,
    /// `(K+1)^N` joint classes decoded as base-`(K+1)` digits.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub input_rows: usize,
    pub layers: Vec<Layer>,
    pub head: Head,
}

impl ArchSpec {
    /// Number of classes per column and number of columns of the head.
    pub fn logit_shape(&self) -> (usize, usize) {
        match self.head {
            Head::PerSource => (self.k + 1, self.n),
            Head::Joint => ((self.k + 1).pow(self.n as u32), 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv { kernel: Kernel },
    Inception { k_a: Kernel, k_b: Kernel },
}

/// Convolutional family shared by SC-NET, SKIN-NET and the students: a 4x4
/// stem, a stack of blocks, 1x1 tail convolutions, a skip concatenation of
/// the stem output, adaptive pooling to `(K+1) x N` and a 1x1 projection.
///
/// A zero node count drops that layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub n: usize,
    pub k: usize,
    pub stem: usize,
    pub blocks: Vec<usize>,
    pub block: BlockKind,
    pub tail: Vec<usize>,
}

pub const STEM_KERNEL: Kernel = (4, 4);

fn check_nk(n: usize, k: usize) -> Result<()> {
    if !(1..=5).contains(&n) || !(1..=4).contains(&k) {
        return Err(Error::Unsupported { n, k });
    }
    Ok(())
}

/// SC-NET block kernel for `n` sources.
pub fn sc_net_kernel(n: usize) -> Kernel {
    match n {
        1 => (2, 2),
        2 => (3, 2),
        3 => (3, 3),
        4 => (4, 4),
        _ => (5, 4),
    }
}

/// SKIN-NET second inception kernel for `n` sources; the first is 4x4.
pub fn skin_net_kernel(n: usize) -> Kernel {
    match n {
        1 => (2, 2),
        2 => (3, 2),
        3 => (3, 3),
        4 => (4, 4),
        _ => (5, 5),
    }
}

impl ConvNetSpec {
    pub fn sc_net(n: usize, k: usize) -> Result<Self> {
        check_nk(n, k)?;
        Ok(Self {
            n,
            k,
            stem: 16,
            blocks: vec![64, 64, 32, 32, 16],
            block: BlockKind::Conv { kernel: sc_net_kernel(n) },
            tail: vec![10],
        })
    }

    pub fn skin_net(n: usize, k: usize) -> Result<Self> {
        check_nk(n, k)?;
        Ok(Self {
            n,
            k,
            stem: 32,
            blocks: vec![64, 64, 32, 24, 16],
            block: BlockKind::Inception { k_a: (4, 4), k_b: skin_net_kernel(n) },
            tail: vec![10],
        })
    }

    /// Student layout `stem, block, tail...` with one 2x2 block.
    pub fn student(n: usize, k: usize, nodes: &[usize]) -> Result<Self> {
        check_nk(n, k)?;
        if nodes.len() < 3 {
            return Err(Error::InvalidParameter(format!("student needs at least 3 node counts, got {nodes:?}")));
        }
        let spec = Self {
            n,
            k,
            stem: nodes[0],
            blocks: vec![nodes[1]],
            block: BlockKind::Conv { kernel: (2, 2) },
            tail: nodes[2..].to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Node counts in layer order: stem, blocks, tail.
    pub fn nodes(&self) -> Vec<usize> {
        let mut v = vec![self.stem];
        v.extend(&self.blocks);
        v.extend(&self.tail);
        v
    }

    pub fn set_nodes(&mut self, nodes: &[usize]) -> Result<()> {
        let nb = self.blocks.len();
        if nodes.len() != 1 + nb + self.tail.len() {
            return Err(Error::Shape(format!("expected {} node counts, got {}", 1 + nb + self.tail.len(), nodes.len())));
        }
        self.stem = nodes[0];
        self.blocks.copy_from_slice(&nodes[1..1 + nb]);
        self.tail.copy_from_slice(&nodes[1 + nb..]);
        self.validate()
    }

    /// Active block count (`L_C`).
    pub fn depth(&self) -> usize {
        self.blocks.iter().filter(|&&m| m > 0).count()
    }

    /// Whether slot `i` of [`Self::nodes`] may be set to zero.
    pub fn removable(&self, i: usize) -> bool {
        i != 0 && i != self.blocks.len() + self.tail.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_nk(self.n, self.k)?;
        if self.stem == 0 || self.tail.last().is_none_or(|&t| t == 0) {
            return Err(Error::InvalidParameter("stem and last tail layer need at least one node".into()));
        }
        Ok(())
    }

    pub fn arch(&self, name: &str) -> Result<ArchSpec> {
        self.validate()?;
        let mut layers = vec![Layer::Conv2d { out: self.stem, kernel: STEM_KERNEL }, Layer::BatchNorm, Layer::Relu];
        let skip = layers.len() - 1;
        for &m in self.blocks.iter().filter(|&&m| m > 0) {
            layers.push(match self.block {
                BlockKind::Conv { kernel } => Layer::Conv2d { out: m, kernel },
                BlockKind::Inception { k_a, k_b } => Layer::Inception { out: m, k_a, k_b },
            });
            layers.extend([Layer::BatchNorm, Layer::Relu]);
        }
        for &t in self.tail.iter().filter(|&&t| t > 0) {
            layers.extend([Layer::Conv2d { out: t, kernel: (1, 1) }, Layer::BatchNorm, Layer::Relu]);
        }
        layers.push(Layer::SkipConcat { from: skip });
        layers.push(Layer::AdaptiveAvgPool { h: self.k + 1, w: self.n });
        layers.push(Layer::Conv2d { out: 1, kernel: (1, 1) });
        Ok(ArchSpec {
            name: name.to_string(),
            n: self.n,
            k: self.k,
            input_rows: input_rows(self.n, self.k),
            layers,
            head: Head::PerSource,
        })
    }
}

pub fn make_sc_net(n: usize, k: usize) -> Result<ArchSpec> {
    ConvNetSpec::sc_net(n, k)?.arch("sc-net")
}

pub fn make_skin_net(n: usize, k: usize) -> Result<ArchSpec> {
    ConvNetSpec::skin_net(n, k)?.arch("skin-net")
}

pub const STUDENT_NODES: [usize; 4] = [8, 8, 8, 10];

pub fn make_student(n: usize, k: usize, nodes: &[usize]) -> Result<ArchSpec> {
    ConvNetSpec::student(n, k, nodes)?.arch("stu-sc-net")
}

/// Hidden widths of the dense baseline.
pub const REL_NET_HIDDEN: [usize; 2] = [128, 64];

pub fn make_rel_net(n: usize, k: usize) -> Result<ArchSpec> {
    check_nk(n, k)?;
    let mut layers = Vec::new();
    for &h in &REL_NET_HIDDEN {
        layers.extend([Layer::Dense { out: h }, Layer::Relu]);
    }
    layers.push(Layer::Dense { out: (k + 1).pow(n as u32) });
    Ok(ArchSpec { name: "rel-net".into(), n, k, input_rows: input_rows(n, k), layers, head: Head::Joint })
}
