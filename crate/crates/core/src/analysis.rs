//! Static accounting: parameter counts, FLOP counts at a given input shape
//! and theoretical receptive fields.
//!
//! Everything here runs the architecture code from [`crate::models`] on a
//! shape-only executor, so the accounting can never drift from the model.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::{bn_param_specs, conv_param_specs, Exec, ParamSpec};
use crate::error::{Error, Result};
use crate::models::{forward, ModelConfig, Ratio, Variant};
use crate::tensor::ConvSpec;

/// Published parameter count of the FCN-ResNet34 baseline.
pub const REFERENCE_FCN_PARAMS: f64 = 21.35e6;
/// Published FLOPs of the FCN-ResNet34 baseline at 4×512×512.
pub const REFERENCE_FCN_FLOPS: f64 = 90.97e9;
/// Published parameter count of MP-ResNet.
pub const REFERENCE_MP_PARAMS: f64 = 54.97e6;
/// Published FLOPs of MP-ResNet at 4×512×512.
pub const REFERENCE_MP_FLOPS: f64 = 115.93e9;
/// Input shape (C, H, W) the published FLOPs refer to.
pub const REFERENCE_INPUT: [usize; 3] = [4, 512, 512];

/// How operations are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Conventions {
    /// FLOPs per multiply-accumulate: 1 or 2.
    pub mac_factor: u8,
    /// Count BN as one multiply-accumulate per element.
    pub counts_bn: bool,
    /// Count bilinear resizing as four multiply-accumulates per output.
    pub counts_upsample: bool,
    /// Count relu, residual additions and max-pool window taps.
    pub counts_elementwise: bool,
    /// Count BN running mean/var as parameters.
    pub counts_running_stats: bool,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            mac_factor: 2,
            counts_bn: true,
            counts_upsample: true,
            counts_elementwise: true,
            counts_running_stats: false,
        }
    }
}

impl Conventions {
    pub fn with_mac_factor(self, mac_factor: u8) -> Self {
        Self { mac_factor, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.mac_factor) {
            return Err(Error::Config(format!("mac_factor {} must be 1 or 2", self.mac_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Conv(ConvSpec),
    ConvTranspose(ConvSpec),
    BatchNorm,
    Relu,
    MaxPool { kernel: usize },
    Add,
    Upsample,
}

impl OpKind {
    pub fn label(&self) -> &'static str {
        match self {
            OpKind::Conv(_) => "conv",
            OpKind::ConvTranspose(_) => "conv_transpose",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::MaxPool { .. } => "max_pool",
            OpKind::Add => "add",
            OpKind::Upsample => "upsample",
        }
    }
}

/// One operation seen by the [`Tracer`].
#[derive(Debug, Clone)]
pub struct TracedOp {
    pub name: String,
    pub kind: OpKind,
    pub input: [usize; 4],
    pub output: [usize; 4],
    pub params: Vec<ParamSpec>,
}

/// Shape-level value: extents plus receptive-field state
/// (`rf` in input pixels, `jump` = input pixels per output step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Traced {
    pub dims: [usize; 4],
    pub rf: f64,
    pub jump: f64,
}

/// Shape-only executor: records every operation and its parameters,
/// checks channel and extent agreement, and propagates receptive fields.
#[derive(Debug, Default)]
pub struct Tracer {
    ops: Vec<TracedOp>,
    context: String,
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&self, dims: [usize; 4]) -> Traced {
        Traced { dims, rf: 1.0, jump: 1.0 }
    }

    pub fn ops(&self) -> &[TracedOp] {
        &self.ops
    }

    pub fn into_ops(self) -> Vec<TracedOp> {
        self.ops
    }

    pub fn into_param_specs(self) -> Vec<ParamSpec> {
        self.ops.into_iter().flat_map(|op| op.params).collect()
    }

    fn record(&mut self, name: String, kind: OpKind, input: [usize; 4], output: [usize; 4], params: Vec<ParamSpec>) {
        self.ops.push(TracedOp {
            name,
            kind,
            input,
            output,
            params,
        });
    }

    fn unnamed(&self, op: &str) -> String {
        if self.context.is_empty() {
            op.to_string()
        } else {
            format!("{}/{op}", self.context)
        }
    }

    fn named(&mut self, name: &str) -> String {
        self.context = name.to_string();
        name.to_string()
    }
}

impl Exec for Tracer {
    type Value = Traced;

    fn dims(&self, v: &Traced) -> [usize; 4] {
        v.dims
    }

    fn conv(&mut self, name: &str, x: &Traced, spec: &ConvSpec) -> Result<Traced> {
        spec.validate()?;
        let [n, c, h, w] = x.dims;
        if c != spec.in_channels {
            return Err(Error::shape("conv", format!("{name} input channels"), spec.in_channels, c));
        }
        let (oh, ow) = spec.conv_out(h, w)?;
        let out = [n, spec.out_channels, oh, ow];
        let span = (spec.dilation * (spec.kernel_h - 1)) as f64;
        let name = self.named(name);
        self.record(name.clone(), OpKind::Conv(*spec), x.dims, out, conv_param_specs(&name, spec, false));
        Ok(Traced {
            dims: out,
            rf: x.rf + span * x.jump,
            jump: x.jump * spec.stride as f64,
        })
    }

    fn conv_transpose(&mut self, name: &str, x: &Traced, spec: &ConvSpec) -> Result<Traced> {
        spec.validate()?;
        let [n, c, h, w] = x.dims;
        if c != spec.in_channels {
            return Err(Error::shape("conv", format!("{name} input channels"), spec.in_channels, c));
        }
        let (oh, ow) = spec.transpose_out(h, w)?;
        let out = [n, spec.out_channels, oh, ow];
        // Each output pixel gathers from ceil(k / stride) input positions.
        let taps = spec.kernel_h.div_ceil(spec.stride) as f64;
        let name = self.named(name);
        self.record(name.clone(), OpKind::ConvTranspose(*spec), x.dims, out, conv_param_specs(&name, spec, true));
        Ok(Traced {
            dims: out,
            rf: x.rf + (taps - 1.0) * x.jump,
            jump: x.jump / spec.stride as f64,
        })
    }

    fn batch_norm(&mut self, name: &str, x: &Traced) -> Result<Traced> {
        let name = self.named(name);
        let params = bn_param_specs(&name, x.dims[1]);
        self.record(name, OpKind::BatchNorm, x.dims, x.dims, params);
        Ok(*x)
    }

    fn relu(&mut self, x: &Traced) -> Result<Traced> {
        self.record(self.unnamed("relu"), OpKind::Relu, x.dims, x.dims, Vec::new());
        Ok(*x)
    }

    fn max_pool(&mut self, x: &Traced, kernel: usize, stride: usize, padding: usize) -> Result<Traced> {
        let [n, c, h, w] = x.dims;
        let ext = |v| crate::tensor::conv_extent(v, kernel, stride, padding, 1);
        let (Some(oh), Some(ow)) = (ext(h), ext(w)) else {
            return Err(Error::Config(format!("max pool {kernel}/{stride}/{padding} does not fit {h}x{w}")));
        };
        let out = [n, c, oh, ow];
        self.record(self.unnamed("max_pool"), OpKind::MaxPool { kernel }, x.dims, out, Vec::new());
        Ok(Traced {
            dims: out,
            rf: x.rf + (kernel - 1) as f64 * x.jump,
            jump: x.jump * stride as f64,
        })
    }

    fn add(&mut self, a: &Traced, b: &Traced) -> Result<Traced> {
        if a.dims != b.dims {
            return Err(Error::shape("add", "operand shape", format!("{:?}", a.dims), format!("{:?}", b.dims)));
        }
        self.record(self.unnamed("add"), OpKind::Add, a.dims, a.dims, Vec::new());
        Ok(Traced {
            dims: a.dims,
            rf: a.rf.max(b.rf),
            jump: a.jump.min(b.jump),
        })
    }

    fn upsample(&mut self, x: &Traced, out_h: usize, out_w: usize) -> Result<Traced> {
        let [n, c, h, _] = x.dims;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("upsample to an empty extent".into()));
        }
        let out = [n, c, out_h, out_w];
        self.record(self.unnamed("upsample"), OpKind::Upsample, x.dims, out, Vec::new());
        Ok(Traced {
            dims: out,
            rf: x.rf + x.jump,
            jump: x.jump * h as f64 / out_h as f64,
        })
    }
}

fn numel(d: [usize; 4]) -> u64 {
    d.iter().map(|&v| v as u64).product()
}

/// Parameters an operation owns under `conv`.
pub fn op_params(op: &TracedOp, conv: &Conventions) -> u64 {
    op.params
        .iter()
        .filter(|p| conv.counts_running_stats || p.kind.is_trainable())
        .map(|p| p.shape.iter().map(|&v| v as u64).product::<u64>())
        .sum()
}

/// FLOPs of one operation under `conv`.
pub fn op_flops(op: &TracedOp, conv: &Conventions) -> u64 {
    let f = conv.mac_factor as u64;
    let out = numel(op.output);
    match &op.kind {
        OpKind::Conv(s) => {
            let macs = (s.kernel_h * s.kernel_w * s.in_channels) as u64 * out;
            f * macs + if s.has_bias { out } else { 0 }
        }
        OpKind::ConvTranspose(s) => {
            let macs = (s.kernel_h * s.kernel_w * s.out_channels) as u64 * numel(op.input);
            f * macs + if s.has_bias { out } else { 0 }
        }
        OpKind::BatchNorm if conv.counts_bn => f * out,
        OpKind::Upsample if conv.counts_upsample => f * 4 * out,
        OpKind::Relu | OpKind::Add if conv.counts_elementwise => out,
        OpKind::MaxPool { kernel } if conv.counts_elementwise => (kernel * kernel) as u64 * out,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub op: &'static str,
    pub params: u64,
    pub flops: u64,
    pub output_shape: [usize; 4],
}

/// Per-layer and total cost of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub arch: Variant,
    /// `N × C × H × W`; absent for parameter-only reports.
    pub input_shape: Option<[usize; 4]>,
    pub conventions: Conventions,
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Key-value header followed by a fixed-width layer table.
    pub fn to_text(&self) -> String {
        let c = &self.conventions;
        let mut s = String::new();
        let _ = writeln!(s, "arch = {}", self.arch);
        match self.input_shape {
            Some([n, ch, h, w]) => {
                let _ = writeln!(s, "input = {n}x{ch}x{h}x{w}");
            }
            None => s.push_str("input = none\n"),
        }
        let _ = writeln!(s, "mac_factor = {}", c.mac_factor);
        let _ = writeln!(s, "counts_bn = {}", c.counts_bn);
        let _ = writeln!(s, "counts_upsample = {}", c.counts_upsample);
        let _ = writeln!(s, "counts_elementwise = {}", c.counts_elementwise);
        let _ = writeln!(s, "counts_running_stats = {}", c.counts_running_stats);
        let _ = writeln!(s, "total_params = {} ({:.2} M)", self.total_params, self.params_millions());
        let _ = writeln!(s, "total_flops = {} ({:.2} G)", self.total_flops, self.gflops());
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<48} {:<15} {:>12} {:>16}  output", "layer", "op", "params", "flops");
        for r in &self.rows {
            let [n, ch, h, w] = r.output_shape;
            let _ = writeln!(
                s,
                "{:<48} {:<15} {:>12} {:>16}  {n}x{ch}x{h}x{w}",
                r.name, r.op, r.params, r.flops
            );
        }
        s
    }
}

fn trace(config: &ModelConfig, input: [usize; 4]) -> Result<Tracer> {
    let mut tracer = Tracer::new();
    let x = tracer.input(input);
    forward(&mut tracer, config, &x)?;
    Ok(tracer)
}

/// Full report for an `N × C × H × W` input.
pub fn cost_report(config: &ModelConfig, input: [usize; 4], conventions: &Conventions) -> Result<CostReport> {
    conventions.validate()?;
    let tracer = trace(config, input)?;
    let rows: Vec<LayerRow> = tracer
        .ops()
        .iter()
        .map(|op| LayerRow {
            name: op.name.clone(),
            op: op.kind.label(),
            params: op_params(op, conventions),
            flops: op_flops(op, conventions),
            output_shape: op.output,
        })
        .collect();
    Ok(CostReport {
        arch: config.variant,
        input_shape: Some(input),
        conventions: *conventions,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

/// Parameter-only report (FLOP columns are zero).
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    let conventions = Conventions::default();
    let mut report = cost_report(config, [1, config.num_input_channels, 32, 32], &conventions)?;
    report.input_shape = None;
    report.rows.retain(|r| r.params > 0);
    for r in &mut report.rows {
        r.flops = 0;
    }
    report.total_flops = 0;
    Ok(report)
}

/// FLOPs for one `C × H × W` sample under the default conventions.
pub fn count_flops(config: &ModelConfig, input_shape: [usize; 3]) -> Result<CostReport> {
    let [c, h, w] = input_shape;
    cost_report(config, [1, c, h, w], &Conventions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchField {
    pub name: String,
    /// Denominator of the branch's resolution.
    pub scale: usize,
    pub rf_pixels: u64,
    pub effective_stride: u64,
}

/// Theoretical receptive field of every branch endpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReceptiveField {
    pub arch: Variant,
    pub branches: Vec<BranchField>,
}

impl ReceptiveField {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for b in &self.branches {
            let _ = writeln!(
                s,
                "receptive_field.{} = {} px (stride {}, scale 1/{})",
                b.name, b.rf_pixels, b.effective_stride, b.scale
            );
        }
        s
    }
}

/// Composition recursion `rf' = rf + (k_eff - 1)·jump`, `jump' = jump·stride`
/// through the encoder; padding truncation is ignored and residual joins
/// take the larger field.
pub fn receptive_field(config: &ModelConfig) -> Result<ReceptiveField> {
    let mut tracer = Tracer::new();
    let x = tracer.input([1, config.num_input_channels, 32, 32]);
    let out = forward(&mut tracer, config, &x)?;
    let field = |name: String, scale: usize, t: &Traced| BranchField {
        name,
        scale,
        rf_pixels: t.rf.round() as u64,
        effective_stride: t.jump.round() as u64,
    };
    let branches = match config.variant {
        Variant::MpResnet => (0..3)
            .map(|i| field(format!("branch{i}"), config.branch_scales[i], &out.branches[i]))
            .collect(),
        Variant::FcnBaseline => vec![field("stage4".into(), 8, &out.branches[0])],
    };
    Ok(ReceptiveField {
        arch: config.variant,
        branches,
    })
}

/// Result of fitting the unstated counting conventions to the published table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub conventions: Conventions,
    pub width_multiplier: String,
    pub fcn_params: u64,
    pub fcn_flops: u64,
    pub mp_params: u64,
    pub mp_flops: u64,
}

impl Calibration {
    pub fn to_text(&self) -> String {
        let rel = |v: u64, r: f64| 100.0 * (v as f64 / r - 1.0);
        format!(
            "mac_factor = {}\nwidth_multiplier = {}\n\
             fcn_baseline.params = {:.2} M ({:+.1}% vs {:.2} M)\n\
             fcn_baseline.flops = {:.2} G ({:+.1}% vs {:.2} G)\n\
             mp_resnet.params = {:.2} M ({:+.1}% vs {:.2} M)\n\
             mp_resnet.flops = {:.2} G ({:+.1}% vs {:.2} G)\n",
            self.conventions.mac_factor,
            self.width_multiplier,
            self.fcn_params as f64 / 1e6,
            rel(self.fcn_params, REFERENCE_FCN_PARAMS),
            REFERENCE_FCN_PARAMS / 1e6,
            self.fcn_flops as f64 / 1e9,
            rel(self.fcn_flops, REFERENCE_FCN_FLOPS),
            REFERENCE_FCN_FLOPS / 1e9,
            self.mp_params as f64 / 1e6,
            rel(self.mp_params, REFERENCE_MP_PARAMS),
            REFERENCE_MP_PARAMS / 1e6,
            self.mp_flops as f64 / 1e9,
            rel(self.mp_flops, REFERENCE_MP_FLOPS),
            REFERENCE_MP_FLOPS / 1e9,
        )
    }
}

fn reference_input(config: &ModelConfig) -> [usize; 4] {
    let [_, h, w] = REFERENCE_INPUT;
    [1, config.num_input_channels, h, w]
}

/// The MAC factor (1 or 2) that puts the FCN baseline nearer the published FLOPs.
pub fn calibrate_mac_factor(fcn: &ModelConfig, base: &Conventions) -> Result<u8> {
    let mut best = (f64::INFINITY, base.mac_factor);
    for factor in [1u8, 2] {
        let report = cost_report(fcn, reference_input(fcn), &base.with_mac_factor(factor))?;
        let err = (report.total_flops as f64 / REFERENCE_FCN_FLOPS).ln().abs();
        if err < best.0 {
            best = (err, factor);
        }
    }
    Ok(best.1)
}

/// Searches multipliers `k/32` in `[1/2, 3/2]` for the one whose MP-ResNet
/// parameters and FLOPs sit closest (squared relative error) to the
/// published figures.
pub fn calibrate_width_multiplier(mp: &ModelConfig, conventions: &Conventions) -> Result<Ratio> {
    let mut best = (f64::INFINITY, Ratio::ONE);
    for k in 16..=48u32 {
        let g = gcd(k, 32);
        let ratio = Ratio::new(k / g, 32 / g);
        let cfg = ModelConfig {
            branch_width_multiplier: ratio,
            ..mp.clone()
        };
        let r = cost_report(&cfg, reference_input(&cfg), conventions)?;
        let ep = r.total_params as f64 / REFERENCE_MP_PARAMS - 1.0;
        let ef = r.total_flops as f64 / REFERENCE_MP_FLOPS - 1.0;
        let err = ep * ep + ef * ef;
        if err < best.0 {
            best = (err, ratio);
        }
    }
    Ok(best.1)
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Calibrate against the reference configurations of both architectures.
pub fn calibrate() -> Result<Calibration> {
    let fcn = ModelConfig::fcn_baseline();
    let base = Conventions::default();
    let conventions = base.with_mac_factor(calibrate_mac_factor(&fcn, &base)?);
    let mut mp = ModelConfig::mp_resnet();
    mp.branch_width_multiplier = calibrate_width_multiplier(&mp, &conventions)?;
    let fcn_report = cost_report(&fcn, reference_input(&fcn), &conventions)?;
    let mp_report = cost_report(&mp, reference_input(&mp), &conventions)?;
    Ok(Calibration {
        conventions,
        width_multiplier: mp.branch_width_multiplier.to_string(),
        fcn_params: fcn_report.total_params,
        fcn_flops: fcn_report.total_flops,
        mp_params: mp_report.total_params,
        mp_flops: mp_report.total_flops,
    })
}
