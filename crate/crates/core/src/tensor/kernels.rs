//! Forward and backward kernels over plain tensors.
//!
//! Convolutions go through im2col/col2im and a GEMM; everything else is a
//! direct loop. The backward functions are the exact adjoints of the
//! (linearised) forward functions and are shared by [`super::Graph`].

use super::{ConvSpec, Element, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy)]
struct Geom {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl From<&ConvSpec> for Geom {
    fn from(s: &ConvSpec) -> Self {
        Self {
            kh: s.kernel_h,
            kw: s.kernel_w,
            stride: s.stride,
            pad: s.padding,
            dil: s.dilation,
        }
    }
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate hit by output index `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dil) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }
}

/// Unfold one `c×h×w` image into a `(c·kh·kw) × (oh·ow)` patch matrix.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, g: Geom, oh: usize, ow: usize, cols: &mut [T]) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match g.src(oy, ky, h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * w..(iy + 1) * w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, g: Geom, oh: usize, ow: usize, x: &mut [T]) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, h) else { continue };
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_operands<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    transposed: bool,
) -> Result<[usize; 4]> {
    spec.validate()?;
    let dims = x.dims4(op)?;
    let expected_w = if transposed {
        [spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w]
    } else {
        [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w]
    };
    if weight.shape() != expected_w {
        return Err(Error::shape(
            op,
            "weight shape",
            format!("{expected_w:?}"),
            format!("{:?}", weight.shape()),
        ));
    }
    if dims[1] != spec.in_channels {
        return Err(Error::shape(op, "input channels", spec.in_channels, dims[1]));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() != [spec.out_channels] => Err(Error::shape(
            op,
            "bias shape",
            format!("[{}]", spec.out_channels),
            format!("{:?}", b.shape()),
        )),
        (None, true) => Err(Error::shape(op, "bias", "present", "absent")),
        (Some(_), false) => Err(Error::shape(op, "bias", "absent", "present")),
        _ => Ok(dims),
    }
}

fn add_bias<T: Element>(y: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in y.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Element>(dy: &[T], c: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); c];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % c] += chunk.iter().copied().sum::<T>();
    }
    Tensor { shape: vec![c], data: db }
}

/// 2-D cross-correlation (no kernel flip).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_conv_operands("conv2d", x, weight, bias, spec, false)?;
    let (oh, ow) = spec.conv_out(h, w)?;
    let g = Geom::from(spec);
    let cout = spec.out_channels;
    let k = c * g.kh * g.kw;
    let p = oh * ow;
    let mut y = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for i in 0..n {
        let xi = &x.data[i * c * h * w..(i + 1) * c * h * w];
        let patches: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, c, h, w, g, oh, ow, &mut cols);
            &cols
        };
        let yi = &mut y[i * cout * p..(i + 1) * cout * p];
        T::gemm(cout, k, p, T::one(), &weight.data, k as isize, 1, patches, p as isize, 1, T::zero(), yi, p as isize, 1);
    }
    if let Some(b) = bias {
        add_bias(&mut y, &b.data, p);
    }
    Ok(Tensor {
        shape: vec![n, cout, oh, ow],
        data: y,
    })
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = x.dims4("conv2d_backward")?;
    let (oh, ow) = spec.conv_out(h, w)?;
    let g = Geom::from(spec);
    let cout = spec.out_channels;
    let k = c * g.kh * g.kw;
    let p = oh * ow;
    if dy.shape() != [n, cout, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            "upstream gradient",
            format!("{:?}", [n, cout, oh, ow]),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.numel()]);
    let mut cols = vec![T::zero(); k * p];
    for i in 0..n {
        let dyi = &dy.data[i * cout * p..(i + 1) * cout * p];
        if let Some(dw) = dw.as_mut() {
            let xi = &x.data[i * c * h * w..(i + 1) * c * h * w];
            let patches: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, c, h, w, g, oh, ow, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(cout, p, k, T::one(), dyi, p as isize, 1, patches, 1, p as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * c * h * w..(i + 1) * c * h * w];
            if g.is_pointwise() {
                T::gemm(k, cout, p, T::one(), &weight.data, 1, k as isize, dyi, p as isize, 1, T::zero(), dxi, p as isize, 1);
            } else {
                // dcols = Wᵀ · dY, then fold back.
                T::gemm(k, cout, p, T::one(), &weight.data, 1, k as isize, dyi, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
                col2im(&cols, c, h, w, g, oh, ow, dxi);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor { shape: x.shape.clone(), data: d }),
        weight: dw.map(|d| Tensor { shape: weight.shape.clone(), data: d }),
        bias: (need[2] && spec.has_bias).then(|| bias_grad(&dy.data, cout, p)),
    })
}

/// Transposed convolution; the adjoint of [`conv2d`] with the same geometry.
/// Weight layout is `[Cin, Cout, kh, kw]`.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = check_conv_operands("conv_transpose2d", x, weight, bias, spec, true)?;
    let (oh, ow) = spec.transpose_out(h, w)?;
    let g = Geom::from(spec);
    let cout = spec.out_channels;
    let kk = cout * g.kh * g.kw;
    let pin = h * w;
    let mut y = vec![T::zero(); n * cout * oh * ow];
    let mut cols = vec![T::zero(); kk * pin];
    for i in 0..n {
        let xi = &x.data[i * cin * pin..(i + 1) * cin * pin];
        // cols = Wᵀ · x
        T::gemm(kk, cin, pin, T::one(), &weight.data, 1, kk as isize, xi, pin as isize, 1, T::zero(), &mut cols, pin as isize, 1);
        let yi = &mut y[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        col2im(&cols, cout, oh, ow, g, h, w, yi);
    }
    if let Some(b) = bias {
        add_bias(&mut y, &b.data, oh * ow);
    }
    Ok(Tensor {
        shape: vec![n, cout, oh, ow],
        data: y,
    })
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [n, cin, h, w] = x.dims4("conv_transpose2d_backward")?;
    let (oh, ow) = spec.transpose_out(h, w)?;
    let g = Geom::from(spec);
    let cout = spec.out_channels;
    let kk = cout * g.kh * g.kw;
    let pin = h * w;
    if dy.shape() != [n, cout, oh, ow] {
        return Err(Error::shape(
            "conv_transpose2d_backward",
            "upstream gradient",
            format!("{:?}", [n, cout, oh, ow]),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.numel()]);
    let mut cols = vec![T::zero(); kk * pin];
    for i in 0..n {
        let dyi = &dy.data[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        im2col(dyi, cout, oh, ow, g, h, w, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * cin * pin..(i + 1) * cin * pin];
            T::gemm(cin, kk, pin, T::one(), &weight.data, kk as isize, 1, &cols, pin as isize, 1, T::zero(), dxi, pin as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x.data[i * cin * pin..(i + 1) * cin * pin];
            T::gemm(cin, pin, kk, T::one(), xi, pin as isize, 1, &cols, 1, pin as isize, T::one(), dw, kk as isize, 1);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor { shape: x.shape.clone(), data: d }),
        weight: dw.map(|d| Tensor { shape: weight.shape.clone(), data: d }),
        bias: (need[2] && spec.has_bias).then(|| bias_grad(&dy.data, cout, oh * ow)),
    })
}

/// Saved state of a train-mode batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance (the one used for normalisation).
    pub batch_var: Vec<f64>,
    pub count: usize,
}

fn check_bn<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = x.dims4("batchnorm2d")?;
    for (what, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [dims[1]] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{what} channels"),
                dims[1],
                format!("{:?}", t.shape()),
            ));
        }
    }
    Ok(dims)
}

/// Batch normalisation with batch statistics.
pub fn batchnorm2d_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = check_bn(x, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(Error::DegenerateBatch {
            op: "batchnorm2d",
            count,
        });
    }
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let off = (i * c + ci) * plane;
            s += x.data[off..off + plane].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut q = 0.0;
        for i in 0..n {
            let off = (i * c + ci) * plane;
            q += x.data[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = q / count as f64;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + epsilon).sqrt())).collect();
    let mut normalized = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for i in 0..n {
        for ci in 0..c {
            let off = (i * c + ci) * plane;
            let m = T::lit(mean[ci]);
            let (g, b, s) = (gamma.data[ci], beta.data[ci], inv_std[ci]);
            for j in off..off + plane {
                let xh = (x.data[j] - m) * s;
                normalized[j] = xh;
                y[j] = g * xh + b;
            }
        }
    }
    Ok((
        Tensor { shape: x.shape.clone(), data: y },
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            count,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)` for a train-mode batch normalisation.
pub fn batchnorm2d_train_backward<T: Element>(
    dims: [usize; 4],
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let m = cache.count as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.numel()];
    for ci in 0..c {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for i in 0..n {
            let off = (i * c + ci) * plane;
            for j in off..off + plane {
                let g = dy.data[j].to_f64().unwrap();
                sdy += g;
                sdyx += g * cache.normalized[j].to_f64().unwrap();
            }
        }
        dgamma[ci] = T::lit(sdyx);
        dbeta[ci] = T::lit(sdy);
        let scale = gamma.data[ci] * cache.inv_std[ci] / T::lit(m);
        let (mean_dy, mean_dyx) = (T::lit(sdy), T::lit(sdyx));
        let mt = T::lit(m);
        for i in 0..n {
            let off = (i * c + ci) * plane;
            for j in off..off + plane {
                dx[j] = scale * (mt * dy.data[j] - mean_dy - cache.normalized[j] * mean_dyx);
            }
        }
    }
    (
        Tensor { shape: dims.to_vec(), data: dx },
        Tensor { shape: vec![c], data: dgamma },
        Tensor { shape: vec![c], data: dbeta },
    )
}

/// Batch normalisation with fixed (running) statistics: a per-channel affine map.
/// Returns the output and the per-channel scale `gamma/sqrt(var+eps)`.
pub fn batchnorm2d_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let [n, c, h, w] = check_bn(x, gamma, beta)?;
    for t in [running_mean, running_var] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm2d", "running stats channels", c, format!("{:?}", t.shape())));
        }
    }
    let plane = h * w;
    let scale: Vec<T> = (0..c)
        .map(|ci| gamma.data[ci] / (running_var.data[ci] + T::lit(epsilon)).sqrt())
        .collect();
    let mut y = x.data.clone();
    for i in 0..n {
        for ci in 0..c {
            let off = (i * c + ci) * plane;
            let (s, m, b) = (scale[ci], running_mean.data[ci], beta.data[ci]);
            for v in &mut y[off..off + plane] {
                *v = (*v - m) * s + b;
            }
        }
    }
    Ok((Tensor { shape: x.shape.clone(), data: y }, scale))
}

/// Gradients `(dx, dgamma, dbeta)` of the fixed-statistics normalisation.
pub fn batchnorm2d_eval_backward<T: Element>(
    x: &Tensor<T>,
    scale: &[T],
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.dims4("batchnorm2d").expect("validated in forward");
    let plane = h * w;
    let mut dx = dy.data.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ci in 0..c {
            let off = (i * c + ci) * plane;
            let inv = T::one() / (running_var.data[ci] + T::lit(epsilon)).sqrt();
            for j in off..off + plane {
                dgamma[ci] += dy.data[j] * (x.data[j] - running_mean.data[ci]) * inv;
                dbeta[ci] += dy.data[j];
                dx[j] = dy.data[j] * scale[ci];
            }
        }
    }
    (
        Tensor { shape: x.shape.clone(), data: dx },
        Tensor { shape: vec![c], data: dgamma },
        Tensor { shape: vec![c], data: dbeta },
    )
}

/// Max pooling. Returns the output and, per output element, the flat input
/// index of the selected element (first maximum in row-major window order).
pub fn maxpool2d<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("maxpool2d")?;
    if kernel == 0 || stride == 0 || 2 * padding > kernel {
        return Err(Error::Config(format!(
            "maxpool2d: invalid geometry kernel={kernel} stride={stride} padding={padding}"
        )));
    }
    let g = Geom {
        kh: kernel,
        kw: kernel,
        stride,
        pad: padding,
        dil: 1,
    };
    let (oh, ow) = match (
        super::conv_extent(h, kernel, stride, padding, 1),
        super::conv_extent(w, kernel, stride, padding, 1),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Config(format!(
                "maxpool2d: non-positive output extent for {h}x{w} input"
            )))
        }
    };
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..kernel {
                    let Some(iy) = g.src(oy, ky, h) else { continue };
                    for kx in 0..kernel {
                        let Some(ix) = g.src(ox, kx, w) else { continue };
                        let idx = base + iy * w + ix;
                        let v = x.data[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("every window overlaps the input");
                y.push(v);
                arg.push(idx);
            }
        }
    }
    Ok((Tensor { shape: vec![n, c, oh, ow], data: y }, arg))
}

pub fn maxpool2d_backward<T: Element>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&dy.data) {
        dx.data[idx] += g;
    }
    dx
}

/// Per-output-index source taps `(i0, i1, frac)` for half-pixel bilinear
/// resampling from `input` to `output` samples.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (align-corners disabled).
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("upsample_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("upsample_bilinear", "output extent", "≥ 1", 0));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut y = vec![T::zero(); n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(1.0 - fy), T::lit(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(1.0 - fx), T::lit(fx));
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                dst[oy * out_w + ox] = top * wy0 + bottom * wy1;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, c, out_h, out_w],
        data: y,
    })
}

pub fn upsample_bilinear_backward<T: Element>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (dy.shape[2], dy.shape[3]);
    let planes = input_shape[0] * input_shape[1];
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    for plane in 0..planes {
        let src = &dy.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(1.0 - fy), T::lit(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(1.0 - fx), T::lit(fx));
                let g = src[oy * out_w + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dx
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

fn same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, "operand shape", format!("{:?}", a.shape), format!("{:?}", b.shape)));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect(),
    })
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?
        .dims4("concat")?;
    let [n, _, h, w] = first;
    let mut total_c = 0;
    for t in parts {
        let d = t.dims4("concat")?;
        for (axis, name) in [(0, "batch"), (2, "height"), (3, "width")] {
            if d[axis] != first[axis] {
                return Err(Error::shape("concat", name, first[axis], d[axis]));
            }
        }
        total_c += d[1];
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total_c * plane);
    for i in 0..n {
        for t in parts {
            let c = t.shape[1];
            data.extend_from_slice(&t.data[i * c * plane..(i + 1) * c * plane]);
        }
    }
    Ok(Tensor {
        shape: vec![n, total_c, h, w],
        data,
    })
}

/// Split a channel-concatenated gradient back into parts of `channels` each.
pub fn concat_channels_backward<T: Element>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let [n, total, h, w] = [dy.shape[0], dy.shape[1], dy.shape[2], dy.shape[3]];
    let plane = h * w;
    let mut out: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    for i in 0..n {
        let mut off = i * total * plane;
        for (part, &c) in out.iter_mut().zip(channels) {
            part.extend_from_slice(&dy.data[off..off + c * plane]);
            off += c * plane;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor {
            shape: vec![n, c, h, w],
            data,
        })
        .collect()
}

/// Softmax over the channel axis of an `N×C×H×W` tensor.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("softmax")?;
    let plane = h * w;
    let mut y = vec![T::zero(); x.numel()];
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for ci in 0..c {
                mx = mx.max(x.data[base + ci * plane + p]);
            }
            let mut s = T::zero();
            for ci in 0..c {
                let e = (x.data[base + ci * plane + p] - mx).exp();
                y[base + ci * plane + p] = e;
                s += e;
            }
            for ci in 0..c {
                y[base + ci * plane + p] = y[base + ci * plane + p] / s;
            }
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data: y })
}

pub fn softmax_channels_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = [y.shape[0], y.shape[1], y.shape[2], y.shape[3]];
    let plane = h * w;
    let mut dx = vec![T::zero(); y.numel()];
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ci in 0..c {
                let j = base + ci * plane + p;
                dot += dy.data[j] * y.data[j];
            }
            for ci in 0..c {
                let j = base + ci * plane + p;
                dx[j] = y.data[j] * (dy.data[j] - dot);
            }
        }
    }
    Tensor { shape: y.shape.clone(), data: dx }
}

/// Mean cross-entropy over non-ignored pixels. `labels` is `N×H×W` in
/// row-major order. Returns the loss, the channel softmax and the number of
/// scored pixels.
pub fn cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore_index: u8,
) -> Result<(T, Tensor<T>, usize)> {
    let [n, c, h, w] = logits.dims4("cross_entropy")?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::shape("cross_entropy", "label count", n * plane, labels.len()));
    }
    for (idx, &l) in labels.iter().enumerate() {
        if l != ignore_index && l as usize >= c {
            return Err(Error::LabelOutOfRange {
                value: l,
                num_classes: c,
                n: idx / plane,
                y: (idx % plane) / w,
                x: idx % w,
            });
        }
    }
    let probs = softmax_channels(logits)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let l = labels[i * plane + p];
            if l == ignore_index {
                continue;
            }
            // log-softmax computed directly for accuracy
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(logits.data[base + ci * plane + p].to_f64().unwrap());
            }
            let mut s = 0.0;
            for ci in 0..c {
                s += (logits.data[base + ci * plane + p].to_f64().unwrap() - mx).exp();
            }
            let z = logits.data[base + l as usize * plane + p].to_f64().unwrap();
            total += -(z - mx - s.ln());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoScoredPixels("every pixel carries the ignore label"));
    }
    Ok((T::lit(total / count as f64), probs, count))
}

pub fn cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[u8],
    ignore_index: u8,
    count: usize,
    upstream: T,
) -> Tensor<T> {
    let [n, c, h, w] = [probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]];
    let plane = h * w;
    let scale = upstream / T::lit(count as f64);
    let mut dx = vec![T::zero(); probs.numel()];
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let l = labels[i * plane + p];
            if l == ignore_index {
                continue;
            }
            for ci in 0..c {
                let j = base + ci * plane + p;
                let target = if ci == l as usize { T::one() } else { T::zero() };
                dx[j] = (probs.data[j] - target) * scale;
            }
        }
    }
    Tensor { shape: probs.shape.clone(), data: dx }
}
