//! Independent naive oracles shared by the integration suites.
//!
//! These deliberately restate the operation definitions from scratch: the
//! convolution oracle materializes the zero-padded input and runs the dense
//! sliding-window loops, counting every multiplication it performs, so both
//! the forward values (bit-for-bit in `f64`) and the analytic MAC counts can
//! be checked against something that shares no code with the engine.

// Each integration target compiles this module separately and none uses
// every helper.
#![allow(dead_code)]

use bcpnet::rng::Rng;
use bcpnet::tensor::Tensor4;

/// Dense sliding-window grouped convolution over an explicitly zero-padded
/// copy of the input. Returns the output and the number of scalar
/// multiplications performed.
pub fn naive_conv2d(
    x: &Tensor4<f64>,
    weight: &Tensor4<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Tensor4<f64>, u64) {
    let (n_batch, c_in, in_h, in_w) = x.shape();
    let (c_out, c_in_pg, k, _) = weight.shape();
    let padded_h = in_h + 2 * padding;
    let padded_w = in_w + 2 * padding;
    let mut padded = Tensor4::zeros((n_batch, c_in, padded_h, padded_w)).unwrap();
    for n in 0..n_batch {
        for c in 0..c_in {
            for y in 0..in_h {
                for xx in 0..in_w {
                    padded.set(n, c, y + padding, xx + padding, x.at(n, c, y, xx));
                }
            }
        }
    }
    let out_h = (padded_h - k) / stride + 1;
    let out_w = (padded_w - k) / stride + 1;
    let c_out_pg = c_out / groups;
    let mut out = Tensor4::zeros((n_batch, c_out, out_h, out_w)).unwrap();
    let mut mults = 0u64;
    for n in 0..n_batch {
        for oc in 0..c_out {
            let g = oc / c_out_pg;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0f64;
                    for icg in 0..c_in_pg {
                        let ic = g * c_in_pg + icg;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += weight.at(oc, icg, ky, kx)
                                    * padded.at(n, ic, oy * stride + ky, ox * stride + kx);
                                mults += 1;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[oc];
                    }
                    out.set(n, oc, oy, ox, acc);
                }
            }
        }
    }
    (out, mults)
}

/// Window-by-window pooling straight from the definition: max ignores padded
/// positions, avg divides by the count of in-bounds positions.
pub fn naive_pool2d(
    x: &Tensor4<f64>,
    max_kind: bool,
    k: usize,
    stride: usize,
    padding: usize,
) -> Tensor4<f64> {
    let (n_batch, c, in_h, in_w) = x.shape();
    let out_h = (in_h + 2 * padding - k) / stride + 1;
    let out_w = (in_w + 2 * padding - k) / stride + 1;
    let mut out = Tensor4::zeros((n_batch, c, out_h, out_w)).unwrap();
    for n in 0..n_batch {
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= in_h as isize || ix >= in_w as isize {
                                continue;
                            }
                            let v = x.at(n, ch, iy as usize, ix as usize);
                            if v > best {
                                best = v;
                            }
                            sum += v;
                            count += 1;
                        }
                    }
                    out.set(n, ch, oy, ox, if max_kind { best } else { sum / count as f64 });
                }
            }
        }
    }
    out
}

/// Bilinear resize straight from the half-pixel definition, computed per
/// output element with nested lerps in `f64`.
pub fn naive_bilinear_resize(x: &Tensor4<f64>, out_h: usize, out_w: usize) -> Tensor4<f64> {
    let (n_batch, c, in_h, in_w) = x.shape();
    // src = (dst + 0.5) * (in / out) - 0.5, with in/out a single quotient.
    let sample = |d: usize, in_dim: usize, out_dim: usize| -> (usize, usize, f64) {
        let scale = in_dim as f64 / out_dim as f64;
        let src = (d as f64 + 0.5) * scale - 0.5;
        let lo = src.floor();
        let frac = src - lo;
        let clamp = |v: f64| (v.max(0.0) as usize).min(in_dim - 1);
        (clamp(lo), clamp(lo + 1.0), frac)
    };
    let mut out = Tensor4::zeros((n_batch, c, out_h, out_w)).unwrap();
    for n in 0..n_batch {
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1, fy) = sample(oy, in_h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = sample(ox, in_w, out_w);
                    let a = x.at(n, ch, y0, x0);
                    let b = x.at(n, ch, y0, x1);
                    let c0 = x.at(n, ch, y1, x0);
                    let d = x.at(n, ch, y1, x1);
                    let top = a + fx * (b - a);
                    let bottom = c0 + fx * (d - c0);
                    out.set(n, ch, oy, ox, top + fy * (bottom - top));
                }
            }
        }
    }
    out
}

pub fn random_tensor(rng: &mut Rng, shape: (usize, usize, usize, usize)) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.normal()).unwrap()
}

pub fn bits_equal(a: &Tensor4<f64>, b: &Tensor4<f64>) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
