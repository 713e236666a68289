//! Architecture building blocks: the ResNet stem, the basic residual block
//! and the bottleneck deconvolution block used by the decoder.
//!
//! Blocks are written once against the [`Exec`] trait. The same code then
//! runs on the autodiff graph (training), on a tape-free executor
//! (inference) and on the static cost tracer in [`crate::analysis`], so the
//! accounted architecture is always the executed one.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Every input extent must be a multiple of this (deepest branch is 1/32).
pub const SPATIAL_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvTransposeWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Updated by the optimiser (running statistics are not).
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

/// Declaration of one named parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Declarations for the parameters a conv layer called `name` owns.
pub fn conv_param_specs(name: &str, spec: &ConvSpec, transposed: bool) -> Vec<ParamSpec> {
    let (shape, kind) = if transposed {
        (
            vec![spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w],
            ParamKind::ConvTransposeWeight,
        )
    } else {
        (
            vec![spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w],
            ParamKind::ConvWeight,
        )
    };
    let mut out = vec![ParamSpec {
        name: format!("{name}.weight"),
        shape,
        kind,
    }];
    if spec.has_bias {
        out.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![spec.out_channels],
            kind: ParamKind::Bias,
        });
    }
    out
}

pub fn bn_param_specs(name: &str, channels: usize) -> Vec<ParamSpec> {
    [
        ("weight", ParamKind::BnGamma),
        ("bias", ParamKind::BnBeta),
        ("running_mean", ParamKind::BnRunningMean),
        ("running_var", ParamKind::BnRunningVar),
    ]
    .into_iter()
    .map(|(suffix, kind)| ParamSpec {
        name: format!("{name}.{suffix}"),
        shape: vec![channels],
        kind,
    })
    .collect()
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named parameter tensors in declaration order, keyed by hierarchical path
/// (`branch1.stage3.block0.conv1.weight`).
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> BlockParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, value });
        Ok(())
    }

    /// Deterministic initialisation: He-normal conv weights drawn in
    /// declaration order from one seeded stream; BN gamma 1, beta 0,
    /// running mean 0, running variance 1; biases 0.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new();
        for spec in specs {
            let value = match spec.kind {
                ParamKind::ConvWeight | ParamKind::ConvTransposeWeight => {
                    let fan_in = if spec.kind == ParamKind::ConvWeight {
                        spec.shape[1] * spec.shape[2] * spec.shape[3]
                    } else {
                        spec.shape[0] * spec.shape[2] * spec.shape[3]
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    Tensor::from_fn(&spec.shape, |_| T::lit(normal.sample(&mut rng)))
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => Tensor::full(&spec.shape, T::one()),
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => Tensor::zeros(&spec.shape),
            };
            out.insert(spec.name.clone(), spec.kind, value)?;
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    /// Value of parameter `name`, or a configuration error naming it.
    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind.is_trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> BlockParams<U> {
        BlockParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Element> Default for BlockParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Operator backend the blocks are written against.
///
/// Layer names are hierarchical paths; parameterised layers own the
/// parameters declared by [`conv_param_specs`] / [`bn_param_specs`].
pub trait Exec {
    type Value: Clone;

    /// `[N, C, H, W]` of a value.
    fn dims(&self, v: &Self::Value) -> [usize; 4];
    fn conv(&mut self, name: &str, x: &Self::Value, spec: &ConvSpec) -> Result<Self::Value>;
    fn conv_transpose(&mut self, name: &str, x: &Self::Value, spec: &ConvSpec) -> Result<Self::Value>;
    fn batch_norm(&mut self, name: &str, x: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn max_pool(&mut self, x: &Self::Value, kernel: usize, stride: usize, padding: usize) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn upsample(&mut self, x: &Self::Value, out_h: usize, out_w: usize) -> Result<Self::Value>;
}

/// conv → BN → relu
pub fn conv_bn_relu<E: Exec>(e: &mut E, name: &str, x: &E::Value, spec: &ConvSpec) -> Result<E::Value> {
    let y = e.conv(&format!("{name}.conv"), x, spec)?;
    let y = e.batch_norm(&format!("{name}.bn"), &y)?;
    e.relu(&y)
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SPATIAL_MULTIPLE) || !w.is_multiple_of(SPATIAL_MULTIPLE) {
        return Err(Error::Config(format!(
            "input extents {h}x{w} must be positive multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// 7×7 stride-2 conv, BN, relu, then 3×3 stride-2 max pool: quarter resolution.
pub fn stem<E: Exec>(e: &mut E, x: &E::Value, width: usize) -> Result<E::Value> {
    let [_, c, h, w] = e.dims(x);
    check_divisible(h, w)?;
    let y = conv_bn_relu(e, "stem", x, &ConvSpec::new(c, width, 7, 2, 3))?;
    e.max_pool(&y, 3, 2, 1)
}

/// ResNet basic block: conv3×3(stride)-BN-relu-conv3×3-BN plus shortcut,
/// then relu. A 1×1 projection (with BN) replaces the identity shortcut when
/// the stride or the width changes.
pub fn basic_block<E: Exec>(
    e: &mut E,
    prefix: &str,
    x: &E::Value,
    out_channels: usize,
    stride: usize,
    dilation: usize,
) -> Result<E::Value> {
    if !(1..=2).contains(&stride) {
        return Err(Error::Config(format!("{prefix}: stride {stride} not in {{1, 2}}")));
    }
    let in_channels = e.dims(x)[1];
    let c1 = ConvSpec::new(in_channels, out_channels, 3, stride, dilation).with_dilation(dilation);
    let y = e.conv(&format!("{prefix}.conv1"), x, &c1)?;
    let y = e.batch_norm(&format!("{prefix}.bn1"), &y)?;
    let y = e.relu(&y)?;
    let c2 = ConvSpec::new(out_channels, out_channels, 3, 1, dilation).with_dilation(dilation);
    let y = e.conv(&format!("{prefix}.conv2"), &y, &c2)?;
    let y = e.batch_norm(&format!("{prefix}.bn2"), &y)?;
    let shortcut = if stride != 1 || in_channels != out_channels {
        let proj = ConvSpec::new(in_channels, out_channels, 1, stride, 0);
        let s = e.conv(&format!("{prefix}.downsample.conv"), x, &proj)?;
        e.batch_norm(&format!("{prefix}.downsample.bn"), &s)?
    } else {
        x.clone()
    };
    let y = e.add(&y, &shortcut)?;
    e.relu(&y)
}

/// Run `blocks` basic blocks; only the first may stride or change width.
pub fn residual_stage<E: Exec>(
    e: &mut E,
    prefix: &str,
    x: &E::Value,
    blocks: usize,
    out_channels: usize,
    stride: usize,
    dilation: usize,
) -> Result<E::Value> {
    let mut y = x.clone();
    for b in 0..blocks {
        let s = if b == 0 { stride } else { 1 };
        y = basic_block(e, &format!("{prefix}.block{b}"), &y, out_channels, s, dilation)?;
    }
    Ok(y)
}

/// Bottleneck deconvolution block: 1×1 reduce to `Cin/4`, 3×3 stride-2
/// transposed conv (exact 2× enlargement), 1×1 expand to `out_channels`,
/// each followed by BN and relu.
pub fn deconv_block<E: Exec>(e: &mut E, prefix: &str, x: &E::Value, out_channels: usize) -> Result<E::Value> {
    let cin = e.dims(x)[1];
    if cin % 4 != 0 {
        return Err(Error::Config(format!(
            "{prefix}: deconvolution input width {cin} is not divisible by 4"
        )));
    }
    let mid = cin / 4;
    let y = conv_bn_relu(e, &format!("{prefix}.reduce"), x, &ConvSpec::new(cin, mid, 1, 1, 0))?;
    let up = ConvSpec::new(mid, mid, 3, 2, 1).with_output_padding(1);
    let y = e.conv_transpose(&format!("{prefix}.up.conv"), &y, &up)?;
    let y = e.batch_norm(&format!("{prefix}.up.bn"), &y)?;
    let y = e.relu(&y)?;
    conv_bn_relu(e, &format!("{prefix}.expand"), &y, &ConvSpec::new(mid, out_channels, 1, 1, 0))
}
