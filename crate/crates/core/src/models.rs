//! MP-ResNet and the FCN-ResNet34 baseline, assembled from [`crate::blocks`]
//! under a declarative [`ModelConfig`].
//!
//! MP-ResNet: stem (1/4) → stage 1 (1/4) → stage 2 (1/8), then three
//! parallel branches from the 1/8 map. Branch *i* repeats ResNet stages 3
//! and 4 and ends at scale 1/8, 1/16 or 1/32. A coarse-to-fine decoder
//! enlarges the deepest branch with a deconvolution block and adds it to
//! the next branch, twice, and a segmentation head maps the fused 1/8
//! features to per-pixel logits.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::analysis::Tracer;
use crate::blocks::{
    check_divisible, conv_bn_relu, deconv_block, residual_stage, stem, BlockParams, Exec, ParamKind, ParamSpec,
};
use crate::error::{Error, Result};
use crate::exec::{GraphExec, InferExec, Mode};
use crate::tensor::{ConvSpec, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MpResnet,
    FcnBaseline,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp_resnet" => Ok(Variant::MpResnet),
            "fcn_baseline" => Ok(Variant::FcnBaseline),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MpResnet => "mp_resnet",
            Variant::FcnBaseline => "fcn_baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// 3×3 conv-BN-relu, 1×1 classifier at 1/8, one bilinear 8× resize.
    Bilinear8x,
    /// 3×3 conv-BN-relu, then three rounds of bilinear 2× + 3×3 conv-BN-relu,
    /// then the 1×1 classifier at full resolution.
    Progressive,
}

/// Positive rational number, written `num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Self {
        Self { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `width · self`, rounded to the nearest multiple of 4 (at least 4).
    pub fn scale_width(self, width: usize) -> usize {
        if self.num == self.den {
            return width;
        }
        let (n, d) = (self.num as usize, self.den as usize);
        let quarters = (2 * width * n + 4 * d) / (8 * d);
        quarters.max(1) * 4
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid ratio {s:?}, expected num/den"));
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let num: u32 = n.trim().parse().map_err(|_| bad())?;
        let den: u32 = d.trim().parse().map_err(|_| bad())?;
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Ratio { num, den })
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Width multiplier shipped with the reference MP-ResNet configuration; the
/// value [`crate::analysis::calibrate_width_multiplier`] selects.
pub const REFERENCE_WIDTH_MULTIPLIER: Ratio = Ratio { num: 15, den: 16 };

/// Full architectural description. Serialised as a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_input_channels: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    /// Residual blocks per ResNet stage.
    pub stage_blocks: [usize; 4],
    /// Denominators of the branch scales (1/8, 1/16, 1/32).
    pub branch_scales: [usize; 3],
    /// Width of each branch's deepest stage; its stage-3 copy runs at half width.
    pub branch_widths: [usize; 3],
    pub branch_width_multiplier: Ratio,
    pub decoder_width: usize,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mp_resnet()
    }
}

impl ModelConfig {
    /// Reference MP-ResNet on ResNet-34 stages.
    pub fn mp_resnet() -> Self {
        Self {
            variant: Variant::MpResnet,
            num_input_channels: 4,
            num_classes: 6,
            stem_width: 64,
            stage_blocks: [3, 4, 6, 3],
            branch_scales: [8, 16, 32],
            branch_widths: [512, 512, 512],
            branch_width_multiplier: REFERENCE_WIDTH_MULTIPLIER,
            decoder_width: 128,
            head: Head::Bilinear8x,
        }
    }

    /// Reference FCN-ResNet34 baseline (output stride 8).
    pub fn fcn_baseline() -> Self {
        Self {
            variant: Variant::FcnBaseline,
            branch_width_multiplier: Ratio::ONE,
            ..Self::mp_resnet()
        }
    }

    /// Small MP-ResNet used for memorisation and ablation runs.
    pub fn tiny_mp_resnet() -> Self {
        Self {
            stem_width: 16,
            stage_blocks: [1, 1, 1, 1],
            branch_widths: [32, 64, 128],
            branch_width_multiplier: Ratio::ONE,
            decoder_width: 32,
            ..Self::mp_resnet()
        }
    }

    pub fn tiny_fcn_baseline() -> Self {
        Self {
            variant: Variant::FcnBaseline,
            ..Self::tiny_mp_resnet()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::MpResnet => Self::mp_resnet(),
            Variant::FcnBaseline => Self::fcn_baseline(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_input_channels == 0 {
            return fail("num_input_channels must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return fail(format!("num_classes {} outside [2, 254]", self.num_classes));
        }
        if self.stem_width == 0 || self.decoder_width == 0 {
            return fail("stem_width and decoder_width must be positive".into());
        }
        if self.stage_blocks.contains(&0) {
            return fail(format!("stage_blocks {:?} must all be positive", self.stage_blocks));
        }
        if self.branch_width_multiplier.num == 0 || self.branch_width_multiplier.den == 0 {
            return fail("branch_width_multiplier must be positive".into());
        }
        if self.variant == Variant::MpResnet {
            let s = self.branch_scales;
            // Two strided stages follow the 1/8 trunk, so scales are 1/8..1/32.
            let powers = s.iter().all(|d| d.is_power_of_two());
            if s[0] != 8 || !powers || !(s[0] < s[1] && s[1] < s[2]) || s[2] > 32 {
                return fail(format!(
                    "branch_scales 1/{:?} must be strictly decreasing powers of two from 1/8 to at most 1/32",
                    s
                ));
            }
            if let Some(w) = self.branch_widths.iter().find(|&&w| w == 0 || w % 4 != 0) {
                return fail(format!("branch width {w} must be a positive multiple of 4"));
            }
        }
        Ok(())
    }

    /// Stage-3 and stage-4 widths of branch `i` after applying the multiplier.
    pub fn branch_stage_widths(&self, i: usize) -> (usize, usize) {
        let deep = self.branch_width_multiplier.scale_width(self.branch_widths[i]);
        (deep / 2, deep)
    }

    /// Number of stride-2 stages in branch `i`.
    pub fn branch_downsamples(&self, i: usize) -> usize {
        (self.branch_scales[i] / 8).trailing_zeros() as usize
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(doc).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct SegmentOutput<V> {
    /// `N × num_classes × H × W`.
    pub logits: V,
    /// Shared 1/8 trunk feature (after stage 2).
    pub trunk: V,
    /// MP-ResNet: the three branch endpoints; FCN: the stage-4 feature.
    pub branches: Vec<V>,
}

/// The architecture, written once over [`Exec`].
pub fn forward<E: Exec>(e: &mut E, cfg: &ModelConfig, x: &E::Value) -> Result<SegmentOutput<E::Value>> {
    cfg.validate()?;
    let [_, c, h, w] = e.dims(x);
    if c != cfg.num_input_channels {
        return Err(Error::shape("forward_segment", "input channels", cfg.num_input_channels, c));
    }
    check_divisible(h, w)?;
    let [b1, b2, b3, b4] = cfg.stage_blocks;
    let width = cfg.stem_width;

    let y = stem(e, x, width)?;
    let y = residual_stage(e, "stage1", &y, b1, width, 1, 1)?;
    let trunk = residual_stage(e, "stage2", &y, b2, 2 * width, 2, 1)?;

    let (features, branches) = match cfg.variant {
        Variant::MpResnet => {
            let mut branches = Vec::with_capacity(3);
            for i in 0..3 {
                let (w3, w4) = cfg.branch_stage_widths(i);
                let downs = cfg.branch_downsamples(i);
                let s3 = if downs >= 1 { 2 } else { 1 };
                let s4 = if downs >= 2 { 2 } else { 1 };
                let y = residual_stage(e, &format!("branch{i}.stage3"), &trunk, b3, w3, s3, 1)?;
                branches.push(residual_stage(e, &format!("branch{i}.stage4"), &y, b4, w4, s4, 1)?);
            }
            let mut fused = branches[2].clone();
            for i in (0..2).rev() {
                let target = e.dims(&branches[i])[1];
                let up = deconv_block(e, &format!("decoder.deconv{}", i + 1), &fused, target)?;
                fused = e.add(&up, &branches[i])?;
            }
            (fused, branches)
        }
        Variant::FcnBaseline => {
            // Stages 3-4 keep output stride 8 by trading stride for dilation.
            let y = residual_stage(e, "stage3", &trunk, b3, 4 * width, 1, 2)?;
            let y = residual_stage(e, "stage4", &y, b4, 8 * width, 1, 4)?;
            (y.clone(), vec![y])
        }
    };
    let logits = segmentation_head(e, cfg, &features, h, w)?;
    Ok(SegmentOutput {
        logits,
        trunk,
        branches,
    })
}

fn segmentation_head<E: Exec>(e: &mut E, cfg: &ModelConfig, x: &E::Value, h: usize, w: usize) -> Result<E::Value> {
    let cin = e.dims(x)[1];
    let dw = cfg.decoder_width;
    let mut y = conv_bn_relu(e, "head", x, &ConvSpec::new(cin, dw, 3, 1, 1))?;
    let classifier = ConvSpec::new(dw, cfg.num_classes, 1, 1, 0).with_bias();
    match cfg.head {
        Head::Bilinear8x => {
            let logits = e.conv("head.classifier", &y, &classifier)?;
            e.upsample(&logits, h, w)
        }
        Head::Progressive => {
            for k in 0..3 {
                let [_, _, fh, fw] = e.dims(&y);
                y = e.upsample(&y, 2 * fh, 2 * fw)?;
                y = conv_bn_relu(e, &format!("head.up{k}"), &y, &ConvSpec::new(dw, dw, 3, 1, 1))?;
            }
            e.conv("head.classifier", &y, &classifier)
        }
    }
}

/// Parameter declarations implied by a configuration, in creation order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let mut tracer = Tracer::new();
    let x = tracer.input([1, cfg.num_input_channels, 32, 32]);
    forward(&mut tracer, cfg, &x)?;
    Ok(tracer.into_param_specs())
}

/// A configuration together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    config: ModelConfig,
    params: BlockParams<T>,
    mode: Mode,
}

/// Build an MP-ResNet; the configuration must name that variant.
pub fn build_mp_resnet<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if config.variant != Variant::MpResnet {
        return Err(Error::Config(format!("expected variant mp_resnet, got {}", config.variant)));
    }
    Model::build(config, seed)
}

/// Build the FCN baseline; the configuration must name that variant.
pub fn build_fcn_baseline<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if config.variant != Variant::FcnBaseline {
        return Err(Error::Config(format!("expected variant fcn_baseline, got {}", config.variant)));
    }
    Model::build(config, seed)
}

impl<T: Element> Model<T> {
    /// Build either variant with deterministic seeded initialisation.
    /// Models start in train mode.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config)?;
        Ok(Self {
            config: config.clone(),
            params: BlockParams::initialize(&specs, seed)?,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BlockParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BlockParams<T> {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            mode: self.mode,
        }
    }

    /// Logits `N × num_classes × H × W`. Eval mode is a pure function of the
    /// parameters; train mode also updates BN running statistics.
    pub fn forward_segment(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_all(batch)?.logits)
    }

    /// Logits plus the trunk and branch feature maps.
    pub fn forward_all(&mut self, batch: &Tensor<T>) -> Result<SegmentOutput<Tensor<T>>> {
        batch.dims4("forward_segment")?;
        match self.mode {
            Mode::Eval => {
                let mut e = InferExec::new(&self.params);
                let x = std::rc::Rc::new(batch.clone());
                let out = forward(&mut e, &self.config, &x)?;
                let unwrap = |v: std::rc::Rc<Tensor<T>>| std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone());
                Ok(SegmentOutput {
                    logits: unwrap(out.logits),
                    trunk: unwrap(out.trunk),
                    branches: out.branches.into_iter().map(unwrap).collect(),
                })
            }
            Mode::Train => {
                let mut e = GraphExec::new(&mut self.params, Mode::Train, false);
                let x = e.graph.leaf(batch.clone(), false);
                let out = forward(&mut e, &self.config, &x)?;
                let g = &e.graph;
                Ok(SegmentOutput {
                    logits: g.value(out.logits).clone(),
                    trunk: g.value(out.trunk).clone(),
                    branches: out.branches.iter().map(|&v| g.value(v).clone()).collect(),
                })
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MPRSNET1";
const DTYPE_F32: u8 = 0;

/// Serialise a model: magic, `u32` LE length + TOML config, then one record
/// per parameter (`u16` name length, name, dtype tag, rank, `u32` extents,
/// `f32` LE values). Values are stored in 32-bit precision.
pub fn write_checkpoint<T: Element>(model: &Model<T>, mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let doc = model.config.to_toml();
    out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    out.write_all(&(doc.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(doc.as_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for p in model.params.iter() {
        buf.clear();
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(DTYPE_F32);
        buf.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(CHECKPOINT_MAGIC.len()).map_err(|_| Error::BadMagic {
        offset: 0,
        expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
        found: String::from_utf8_lossy(bytes).into(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(magic).into(),
        });
    }
    let len = cur.u32()? as usize;
    let doc = std::str::from_utf8(cur.take(len)?).map_err(|e| Error::Parse(format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_toml(doc)?;
    let specs = param_specs(&config)?;
    let mut params = BlockParams::new();
    for spec in &specs {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Parse(format!("parameter name is not UTF-8: {e}")))?;
        if name != spec.name {
            return Err(Error::Parse(format!("expected parameter {}, found {name}", spec.name)));
        }
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Parse(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        if shape != spec.shape {
            return Err(Error::shape("checkpoint", name, format!("{:?}", spec.shape), format!("{shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.insert(spec.name.clone(), spec.kind, Tensor::new(&shape, data)?)?;
    }
    if !cur.done() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - cur.pos
        )));
    }
    Ok(Model {
        config,
        params,
        mode: Mode::Eval,
    })
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; the model comes back in eval mode.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Main-path convolutions per branch (projection shortcuts excluded).
pub fn branch_conv_counts<T: Element>(model: &Model<T>) -> Vec<usize> {
    (0..3)
        .map(|i| {
            let prefix = format!("branch{i}.");
            model
                .params()
                .iter()
                .filter(|p| {
                    p.kind == ParamKind::ConvWeight
                        && p.name.starts_with(&prefix)
                        && !p.name.contains(".downsample.")
                })
                .count()
        })
        .collect()
}
