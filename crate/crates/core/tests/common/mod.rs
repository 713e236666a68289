//! Independent reference implementations used as test oracles. These are
//! direct loop formulations and deliberately share no code with the engine.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Six-nested-loop cross-correlation over `[n][c][h][w]` data.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let [n, cin, h, wd] = dims;
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut y = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as i64 - pad as i64;
                                let ix = (ox * stride + kx * dil) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x[((b * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

/// Transposed convolution by scattering every input pixel times the kernel
/// into the (padded) output canvas, then cropping. Weight is `[cin][cout][k][k]`.
#[allow(clippy::too_many_arguments)]
pub fn scatter_conv_transpose2d(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> (Vec<f64>, usize, usize) {
    let [n, cin, h, wd] = dims;
    let full_h = (h - 1) * stride + k + out_pad;
    let full_w = (wd - 1) * stride + k + out_pad;
    let oh = full_h - 2 * pad;
    let ow = full_w - 2 * pad;
    let mut y = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        let mut canvas = vec![0.0; cout * full_h * full_w];
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[((b * cin + ci) * h + iy) * wd + ix];
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = w[((ci * cout + co) * k + ky) * k + kx];
                                canvas[(co * full_h + iy * stride + ky) * full_w + ix * stride + kx] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    y[((b * cout + co) * oh + oy) * ow + ox] = canvas[(co * full_h + oy + pad) * full_w + ox + pad];
                }
            }
        }
    }
    (y, oh, ow)
}

/// Window scan max pool over a single plane, padding ignored.
pub fn window_max(x: &[f64], h: usize, w: usize, k: usize, s: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut y = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..k {
                for dx in 0..k {
                    let iy = (oy * s + dy) as i64 - p as i64;
                    let ix = (ox * s + dx) as i64 - p as i64;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        m = m.max(x[iy as usize * w + ix as usize]);
                    }
                }
            }
            y.push(m);
        }
    }
    (y, oh, ow)
}

/// Bilinear sample at continuous coordinates using half-pixel centres,
/// written as an explicit interpolation formula per output pixel.
pub fn bilinear_resize(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| x[r * w + c];
    let mut y = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        for j in 0..ow {
            let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (r0, c0) = (sy.floor() as usize, sx.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (ty, tx) = (sy - r0 as f64, sx - c0 as f64);
            let v = at(r0, c0) * (1.0 - ty) * (1.0 - tx)
                + at(r0, c1) * (1.0 - ty) * tx
                + at(r1, c0) * ty * (1.0 - tx)
                + at(r1, c1) * ty * tx;
            y.push(v);
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
