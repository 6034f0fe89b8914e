//! The differentiable op set.
//!
//! Fixed and enumerated: convolution, affine, rectifier, sigmoid, softmax,
//! pooling (average), bilinear resize, ROI-align, concatenation, elementwise
//! arithmetic, reductions, gather, and the fused loss kernels
//! (softmax cross-entropy, binary cross-entropy, smooth-L1). Everything else
//! is out of contract. No op mutates its inputs; single-image layout is
//! `C x H x W`, row batches are `N x D`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probability floor used by the log-based losses.
pub const PROB_EPS: f64 = 1e-7;

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add<E: Element>(a: &Var<E>, b: &Var<E>) -> Var<E> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn sub<E: Element>(a: &Var<E>, b: &Var<E>) -> Var<E> {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
    )
}

pub fn mul<E: Element>(a: &Var<E>, b: &Var<E>) -> Var<E> {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let out = a.value().zip_map(b.value(), |x, y| x * y);
    let av = a.value().clone();
    let bv = b.value().clone();
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                Some(g.zip_map(&bv, |gv, y| gv * y)),
                Some(g.zip_map(&av, |gv, x| gv * x)),
            ]
        }),
    )
}

pub fn neg<E: Element>(a: &Var<E>) -> Var<E> {
    Var::from_op(
        a.value().map(|x| -x),
        vec![a.clone()],
        Box::new(|g| vec![Some(g.map(|v| -v))]),
    )
}

pub fn scale<E: Element>(a: &Var<E>, c: f64) -> Var<E> {
    let ce = E::of(c);
    Var::from_op(
        a.value().map(|x| ce * x),
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.map(|v| ce * v))]),
    )
}

pub fn add_scalar<E: Element>(a: &Var<E>, c: f64) -> Var<E> {
    let ce = E::of(c);
    Var::from_op(
        a.value().map(|x| x + ce),
        vec![a.clone()],
        Box::new(|g| vec![Some(g.clone())]),
    )
}

/// `1 - x` elementwise.
pub fn one_minus<E: Element>(a: &Var<E>) -> Var<E> {
    Var::from_op(
        a.value().map(|x| E::one() - x),
        vec![a.clone()],
        Box::new(|g| vec![Some(g.map(|v| -v))]),
    )
}

/// Natural log. Callers clamp first; nonpositive inputs yield non-finite
/// values that the backprop finiteness check rejects.
pub fn ln<E: Element>(a: &Var<E>) -> Var<E> {
    let av = a.value().clone();
    Var::from_op(
        a.value().map(|x| x.ln()),
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.zip_map(&av, |gv, x| gv / x))]),
    )
}

/// Clamp to `[lo, hi]`; gradient passes inside the closed interval.
pub fn clamp<E: Element>(a: &Var<E>, lo: f64, hi: f64) -> Var<E> {
    let (l, h) = (E::of(lo), E::of(hi));
    let av = a.value().clone();
    Var::from_op(
        a.value().map(|x| x.max(l).min(h)),
        vec![a.clone()],
        Box::new(move |g| {
            vec![Some(g.zip_map(&av, |gv, x| {
                if x >= l && x <= h {
                    gv
                } else {
                    E::zero()
                }
            }))]
        }),
    )
}

pub fn relu<E: Element>(a: &Var<E>) -> Var<E> {
    let av = a.value().clone();
    Var::from_op(
        a.value().map(|x| x.max(E::zero())),
        vec![a.clone()],
        Box::new(move |g| {
            vec![Some(g.zip_map(&av, |gv, x| {
                if x > E::zero() {
                    gv
                } else {
                    E::zero()
                }
            }))]
        }),
    )
}

pub fn sigmoid<E: Element>(a: &Var<E>) -> Var<E> {
    let out = a.value().map(|x| {
        if x >= E::zero() {
            E::one() / (E::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (E::one() + e)
        }
    });
    let y = out.clone();
    Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.zip_map(&y, |gv, yv| gv * yv * (E::one() - yv)))]),
    )
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<E: Element>(a: &Var<E>) -> Var<E> {
    let s = a.value().data().iter().fold(E::zero(), |acc, &x| acc + x);
    let shape = a.shape().to_vec();
    Var::from_op(
        Tensor::scalar(s),
        vec![a.clone()],
        Box::new(move |g| {
            let gv = g.item();
            vec![Some(Tensor::filled(&shape, gv))]
        }),
    )
}

pub fn mean_all<E: Element>(a: &Var<E>) -> Var<E> {
    let n = a.value().numel();
    scale(&sum_all(a), 1.0 / n as f64)
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

pub fn reshape<E: Element>(a: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
    let out = a.value().reshaped(shape)?;
    let orig = a.shape().to_vec();
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.reshaped(&orig).expect("reshape grad"))]),
    ))
}

/// Channel concatenation of `C_i x H x W` maps with equal spatial extents.
pub fn concat_channels<E: Element>(inputs: &[Var<E>]) -> Var<E> {
    assert!(!inputs.is_empty(), "concat_channels on empty list");
    let (h, w) = (inputs[0].shape()[1], inputs[0].shape()[2]);
    let mut chans = Vec::with_capacity(inputs.len());
    let mut total = 0usize;
    for v in inputs {
        let s = v.shape();
        assert_eq!(s.len(), 3, "concat_channels wants C x H x W");
        assert_eq!((s[1], s[2]), (h, w), "concat_channels spatial mismatch");
        chans.push(s[0]);
        total += s[0];
    }
    let mut data = Vec::with_capacity(total * h * w);
    for v in inputs {
        data.extend_from_slice(v.value().data());
    }
    let out = Tensor::from_vec(&[total, h, w], data).expect("concat shape");
    let plane = h * w;
    let chans_b = chans.clone();
    Var::from_op(
        out,
        inputs.to_vec(),
        Box::new(move |g| {
            let gd = g.data();
            let mut offset = 0usize;
            let mut grads = Vec::with_capacity(chans_b.len());
            for &c in &chans_b {
                let n = c * plane;
                let part = gd[offset..offset + n].to_vec();
                grads.push(Some(
                    Tensor::from_vec(&[c, g.shape()[1], g.shape()[2]], part).expect("split"),
                ));
                offset += n;
            }
            grads
        }),
    )
}

/// Row concatenation of `N1 x D` and `N2 x D`.
pub fn concat_rows<E: Element>(a: &Var<E>, b: &Var<E>) -> Var<E> {
    let (n1, d) = (a.shape()[0], a.shape()[1]);
    let n2 = b.shape()[0];
    assert_eq!(b.shape()[1], d, "concat_rows width mismatch");
    let mut data = Vec::with_capacity((n1 + n2) * d);
    data.extend_from_slice(a.value().data());
    data.extend_from_slice(b.value().data());
    let out = Tensor::from_vec(&[n1 + n2, d], data).expect("concat_rows");
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let gd = g.data();
            vec![
                Some(Tensor::from_vec(&[n1, d], gd[..n1 * d].to_vec()).expect("split")),
                Some(Tensor::from_vec(&[n2, d], gd[n1 * d..].to_vec()).expect("split")),
            ]
        }),
    )
}

/// Append the same vector `b` (`[D2]`) to every row of `a` (`N x D1`).
pub fn concat_cols_broadcast<E: Element>(a: &Var<E>, b: &Var<E>) -> Var<E> {
    let (n, d1) = (a.shape()[0], a.shape()[1]);
    assert_eq!(b.shape().len(), 1, "broadcast vector must be 1-d");
    let d2 = b.shape()[0];
    let mut data = Vec::with_capacity(n * (d1 + d2));
    let ad = a.value().data();
    let bd = b.value().data();
    for r in 0..n {
        data.extend_from_slice(&ad[r * d1..(r + 1) * d1]);
        data.extend_from_slice(bd);
    }
    let out = Tensor::from_vec(&[n, d1 + d2], data).expect("concat_cols");
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let mut da = Vec::with_capacity(n * d1);
            let mut db = vec![E::zero(); d2];
            for r in 0..n {
                let row = &gd[r * (d1 + d2)..(r + 1) * (d1 + d2)];
                da.extend_from_slice(&row[..d1]);
                for (acc, &gv) in db.iter_mut().zip(&row[d1..]) {
                    *acc = *acc + gv;
                }
            }
            vec![
                Some(Tensor::from_vec(&[n, d1], da).expect("da")),
                Some(Tensor::from_vec(&[d2], db).expect("db")),
            ]
        }),
    )
}

/// Pick flat indices out of `a`, producing a `[n]` vector.
pub fn gather<E: Element>(a: &Var<E>, indices: &[usize]) -> Var<E> {
    let data = a.value().data();
    let picked: Vec<E> = indices
        .iter()
        .map(|&i| {
            assert!(i < data.len(), "gather index {i} out of range");
            data[i]
        })
        .collect();
    let out = Tensor::from_vec(&[indices.len().max(1)], if picked.is_empty() {
        vec![E::zero()]
    } else {
        picked
    })
    .expect("gather");
    let shape = a.shape().to_vec();
    let idx = indices.to_vec();
    Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut da = Tensor::zeros(&shape);
            let dd = da.data_mut();
            let gd = g.data();
            for (k, &i) in idx.iter().enumerate() {
                dd[i] = dd[i] + gd[k];
            }
            vec![Some(da)]
        }),
    )
}

// ---------------------------------------------------------------------------
// spatial ops
// ---------------------------------------------------------------------------

/// Broadcast-multiply a `C x H x W` map by an `H x W` spatial map.
pub fn mul_spatial<E: Element>(x: &Var<E>, m: &Var<E>) -> Var<E> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(m.shape(), &[h, w], "spatial map extent mismatch");
    let plane = h * w;
    let xd = x.value().data();
    let md = m.value().data();
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let row = &xd[ch * plane..(ch + 1) * plane];
        out.extend(row.iter().zip(md.iter()).map(|(&a, &b)| a * b));
    }
    let out = Tensor::from_vec(&[c, h, w], out).expect("mul_spatial");
    let xv = x.value().clone();
    let mv = m.value().clone();
    Var::from_op(
        out,
        vec![x.clone(), m.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let xd = xv.data();
            let md = mv.data();
            let mut dx = Vec::with_capacity(c * plane);
            let mut dm = vec![E::zero(); plane];
            for ch in 0..c {
                let grow = &gd[ch * plane..(ch + 1) * plane];
                let xrow = &xd[ch * plane..(ch + 1) * plane];
                dx.extend(grow.iter().zip(md.iter()).map(|(&gv, &b)| gv * b));
                for i in 0..plane {
                    dm[i] = dm[i] + grow[i] * xrow[i];
                }
            }
            vec![
                Some(Tensor::from_vec(&[c, h, w], dx).expect("dx")),
                Some(Tensor::from_vec(&[h, w], dm).expect("dm")),
            ]
        }),
    )
}

struct Axis {
    i0: Vec<usize>,
    i1: Vec<usize>,
    frac: Vec<f64>,
}

fn resize_axis(n_in: usize, n_out: usize) -> Axis {
    // align-corners = false, clamp-to-edge sampling
    let scale = n_in as f64 / n_out as f64;
    let mut axis = Axis {
        i0: Vec::with_capacity(n_out),
        i1: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let s = (o as f64 + 0.5) * scale - 0.5;
        let f = s.floor();
        let frac = s - f;
        let i0 = (f as isize).clamp(0, n_in as isize - 1) as usize;
        let i1 = (f as isize + 1).clamp(0, n_in as isize - 1) as usize;
        axis.i0.push(i0);
        axis.i1.push(i1);
        axis.frac.push(frac);
    }
    axis
}

/// Bilinear resize of a `C x H x W` map (align-corners false), differentiable
/// with respect to the input.
pub fn bilinear_resize<E: Element>(x: &Var<E>, out_h: usize, out_w: usize) -> Result<Var<E>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("bilinear_resize wants C x H x W, got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("bilinear_resize to zero extent".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let ay = resize_axis(h, out_h);
    let ax = resize_axis(w, out_w);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.i0[oy], ay.i1[oy], ay.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.i0[ox], ax.i1[ox], ax.frac[ox]);
                let v00 = xd[base + y0 * w + x0].to64();
                let v01 = xd[base + y0 * w + x1].to64();
                let v10 = xd[base + y1 * w + x0].to64();
                let v11 = xd[base + y1 * w + x1].to64();
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out.push(E::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    let out = Tensor::from_vec(&[c, out_h, out_w], out)?;
    Ok(Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[c, h, w]);
            let dd = dx.data_mut();
            for ch in 0..c {
                let base = ch * h * w;
                let gbase = ch * out_h * out_w;
                for oy in 0..out_h {
                    let (y0, y1, fy) = (ay.i0[oy], ay.i1[oy], ay.frac[oy]);
                    for ox in 0..out_w {
                        let (x0, x1, fx) = (ax.i0[ox], ax.i1[ox], ax.frac[ox]);
                        let gv = gd[gbase + oy * out_w + ox].to64();
                        dd[base + y0 * w + x0] =
                            dd[base + y0 * w + x0] + E::of(gv * (1.0 - fy) * (1.0 - fx));
                        dd[base + y0 * w + x1] = dd[base + y0 * w + x1] + E::of(gv * (1.0 - fy) * fx);
                        dd[base + y1 * w + x0] = dd[base + y1 * w + x0] + E::of(gv * fy * (1.0 - fx));
                        dd[base + y1 * w + x1] = dd[base + y1 * w + x1] + E::of(gv * fy * fx);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Average pooling with square kernel `k`, stride `s`, no padding.
pub fn avg_pool2d<E: Element>(x: &Var<E>, k: usize, s: usize) -> Var<E> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(k >= 1 && s >= 1 && h >= k && w >= k, "avg_pool2d extent");
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let inv = E::of(1.0 / (k * k) as f64);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = E::zero();
                for ky in 0..k {
                    let row = base + (oy * s + ky) * w + ox * s;
                    for kx in 0..k {
                        acc = acc + xd[row + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    let out = Tensor::from_vec(&[c, oh, ow], out).expect("avg_pool2d");
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[c, h, w]);
            let dd = dx.data_mut();
            for ch in 0..c {
                let base = ch * h * w;
                let gbase = ch * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gd[gbase + oy * ow + ox] * inv;
                        for ky in 0..k {
                            let row = base + (oy * s + ky) * w + ox * s;
                            for kx in 0..k {
                                dd[row + kx] = dd[row + kx] + gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Spatial mean per channel: `C x H x W -> [C]`.
pub fn global_avg_pool<E: Element>(x: &Var<E>) -> Var<E> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let inv = E::of(1.0 / plane as f64);
    let xd = x.value().data();
    let out: Vec<E> = (0..c)
        .map(|ch| {
            xd[ch * plane..(ch + 1) * plane]
                .iter()
                .fold(E::zero(), |a, &v| a + v)
                * inv
        })
        .collect();
    let out = Tensor::from_vec(&[c], out).expect("gap");
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = Vec::with_capacity(c * plane);
            for ch in 0..c {
                let gv = gd[ch] * inv;
                dx.extend(std::iter::repeat(gv).take(plane));
            }
            vec![Some(Tensor::from_vec(&[c, h, w], dx).expect("gap grad"))]
        }),
    )
}

// ---------------------------------------------------------------------------
// convolution and affine
// ---------------------------------------------------------------------------

/// Valid output range along one axis: all `o` with `0 <= o*s + off < n_in`,
/// capped at `n_out`.
#[inline]
fn valid_range(off: isize, s: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(s)
    } else {
        0
    };
    let max_in = n_in as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / s + 1).min(n_out);
    (lo.min(hi), hi)
}

/// `out[i] += c * x[i]` over equal-length slices; vectorizes.
#[inline]
fn axpy<E: Element>(out: &mut [E], x: &[E], c: E) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + c * v;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; summation order is fixed (deterministic within a build).
#[inline]
fn dot4<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for j in 0..8 {
            acc[j] = acc[j] + ca[j] * cb[j];
        }
    }
    let done = (a.len() / 8) * 8;
    let mut tail = E::zero();
    for j in done..a.len() {
        tail = tail + a[j] * b[j];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// 2-d convolution of a single `I x H x W` image with weights `O x I x kh x kw`
/// and bias `[O]`.
pub fn conv2d<E: Element>(
    x: &Var<E>,
    w: &Var<E>,
    b: &Var<E>,
    stride: usize,
    pad: usize,
) -> Var<E> {
    let (ci, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wi, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, wi, "conv2d channel mismatch");
    assert_eq!(b.shape(), &[co], "conv2d bias shape");
    assert!(stride >= 1);
    assert!(h + 2 * pad >= kh && win + 2 * pad >= kw, "kernel larger than input");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (win + 2 * pad - kw) / stride + 1;

    let xd = x.value().data();
    let wd = w.value().data();
    let bd = b.value().data();
    let mut out = vec![E::zero(); co * oh * ow];
    for o in 0..co {
        let och = &mut out[o * oh * ow..(o + 1) * oh * ow];
        let bias = bd[o];
        for v in och.iter_mut() {
            *v = bias;
        }
        for i in 0..ci {
            let xch = &xd[i * h * win..(i + 1) * h * win];
            for ky in 0..kh {
                let offy = ky as isize - pad as isize;
                let (ylo, yhi) = valid_range(offy, stride, h, oh);
                for kx in 0..kw {
                    let wv = wd[((o * ci + i) * kh + ky) * kw + kx];
                    if wv == E::zero() {
                        continue;
                    }
                    let offx = kx as isize - pad as isize;
                    let (xlo, xhi) = valid_range(offx, stride, win, ow);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy * stride) as isize + offy;
                        let xrow = &xch[iy as usize * win..(iy as usize + 1) * win];
                        let orow = &mut och[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let base = (xlo as isize + offx) as usize;
                            axpy(&mut orow[xlo..xhi], &xrow[base..base + (xhi - xlo)], wv);
                        } else {
                            for ox in xlo..xhi {
                                let ix = (ox * stride) as isize + offx;
                                orow[ox] = orow[ox] + wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[co, oh, ow], out).expect("conv2d");

    let xv = x.value().clone();
    let wv_all = w.value().clone();
    Var::from_op(
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv_all.data();

            let mut db = vec![E::zero(); co];
            for o in 0..co {
                db[o] = gd[o * oh * ow..(o + 1) * oh * ow]
                    .iter()
                    .fold(E::zero(), |a, &v| a + v);
            }

            let mut dw = vec![E::zero(); co * ci * kh * kw];
            let mut dx = vec![E::zero(); ci * h * win];
            for o in 0..co {
                let gch = &gd[o * oh * ow..(o + 1) * oh * ow];
                for i in 0..ci {
                    let xch = &xd[i * h * win..(i + 1) * h * win];
                    let dxch = &mut dx[i * h * win..(i + 1) * h * win];
                    for ky in 0..kh {
                        let offy = ky as isize - pad as isize;
                        let (ylo, yhi) = valid_range(offy, stride, h, oh);
                        for kx in 0..kw {
                            let offx = kx as isize - pad as isize;
                            let (xlo, xhi) = valid_range(offx, stride, win, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            let widx = ((o * ci + i) * kh + ky) * kw + kx;
                            let wv = wd[widx];
                            let mut wacc = E::zero();
                            for oy in ylo..yhi {
                                let iy = ((oy * stride) as isize + offy) as usize;
                                let xrow = &xch[iy * win..(iy + 1) * win];
                                let dxrow = &mut dxch[iy * win..(iy + 1) * win];
                                let grow = &gch[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let base = (xlo as isize + offx) as usize;
                                    let n = xhi - xlo;
                                    wacc = wacc + dot4(&grow[xlo..xhi], &xrow[base..base + n]);
                                    axpy(&mut dxrow[base..base + n], &grow[xlo..xhi], wv);
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = ((ox * stride) as isize + offx) as usize;
                                        let gv = grow[ox];
                                        wacc = wacc + gv * xrow[ix];
                                        dxrow[ix] = dxrow[ix] + wv * gv;
                                    }
                                }
                            }
                            dw[widx] = dw[widx] + wacc;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&[ci, h, win], dx).expect("dx")),
                Some(Tensor::from_vec(&[co, ci, kh, kw], dw).expect("dw")),
                Some(Tensor::from_vec(&[co], db).expect("db")),
            ]
        }),
    )
}

/// Affine map of row batches: `y = x w^T + b` with `x: N x D`, `w: M x D`,
/// `b: [M]`.
pub fn affine<E: Element>(x: &Var<E>, w: &Var<E>, b: &Var<E>) -> Var<E> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (m, d2) = (w.shape()[0], w.shape()[1]);
    assert_eq!(d, d2, "affine width mismatch");
    assert_eq!(b.shape(), &[m], "affine bias shape");
    let xd = x.value().data();
    let wd = w.value().data();
    let bd = b.value().data();
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        let xrow = &xd[r * d..(r + 1) * d];
        for c in 0..m {
            let wrow = &wd[c * d..(c + 1) * d];
            out.push(dot4(xrow, wrow) + bd[c]);
        }
    }
    let out = Tensor::from_vec(&[n, m], out).expect("affine");
    let xv = x.value().clone();
    let wv = w.value().clone();
    Var::from_op(
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv.data();
            let mut dx = vec![E::zero(); n * d];
            let mut dw = vec![E::zero(); m * d];
            let mut db = vec![E::zero(); m];
            for r in 0..n {
                let grow = &gd[r * m..(r + 1) * m];
                let xrow = &xd[r * d..(r + 1) * d];
                let dxrow = &mut dx[r * d..(r + 1) * d];
                for c in 0..m {
                    let gv = grow[c];
                    if gv == E::zero() {
                        continue;
                    }
                    db[c] = db[c] + gv;
                    axpy(dxrow, &wd[c * d..(c + 1) * d], gv);
                    axpy(&mut dw[c * d..(c + 1) * d], xrow, gv);
                }
            }
            vec![
                Some(Tensor::from_vec(&[n, d], dx).expect("dx")),
                Some(Tensor::from_vec(&[m, d], dw).expect("dw")),
                Some(Tensor::from_vec(&[m], db).expect("db")),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// ROI align
// ---------------------------------------------------------------------------

/// Box in image coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Clone, Copy)]
struct BilinearTap {
    idx: [usize; 4],
    w: [f64; 4],
}

fn bilinear_tap(y: f64, x: f64, h: usize, w: usize) -> BilinearTap {
    // clamp-to-edge sampling
    let yc = y.clamp(0.0, h as f64 - 1.0);
    let xc = x.clamp(0.0, w as f64 - 1.0);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    BilinearTap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    }
}

/// ROI-align: bilinear pooling of image-coordinate boxes into fixed
/// `pooled x pooled` grids with `samples x samples` points per bin.
/// Output is `N x C x pooled x pooled`; differentiable in the feature map.
pub fn roi_align<E: Element>(
    feat: &Var<E>,
    rois: &[RoiBox],
    pooled: usize,
    samples: usize,
    spatial_scale: f64,
) -> Var<E> {
    assert!(pooled >= 1 && samples >= 1);
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let n = rois.len();
    assert!(n > 0, "roi_align with no boxes");

    // Precompute taps per roi/bin/sample; shared by every channel.
    let inv = 1.0 / (samples * samples) as f64;
    let mut taps: Vec<BilinearTap> = Vec::with_capacity(n * pooled * pooled * samples * samples);
    for roi in rois {
        let x1 = roi.x1 * spatial_scale;
        let y1 = roi.y1 * spatial_scale;
        let bw = ((roi.x2 - roi.x1) * spatial_scale).max(1e-6) / pooled as f64;
        let bh = ((roi.y2 - roi.y1) * spatial_scale).max(1e-6) / pooled as f64;
        for by in 0..pooled {
            for bx in 0..pooled {
                for sy in 0..samples {
                    for sx in 0..samples {
                        let yy = y1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bh;
                        let xx = x1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bw;
                        taps.push(bilinear_tap(yy, xx, h, w));
                    }
                }
            }
        }
    }

    // flatten taps to native-precision (index, weight) pairs per bin
    let bins = pooled * pooled;
    let spp = samples * samples;
    let pairs_per_bin = spp * 4;
    let mut pair_idx: Vec<u32> = Vec::with_capacity(taps.len() * 4);
    let mut pair_w: Vec<E> = Vec::with_capacity(taps.len() * 4);
    for t in &taps {
        for q in 0..4 {
            pair_idx.push(t.idx[q] as u32);
            pair_w.push(E::of(t.w[q] * inv));
        }
    }
    drop(taps);

    let fd = feat.value().data();
    let mut out = vec![E::zero(); n * c * bins];
    for r in 0..n {
        for ch in 0..c {
            let fch = &fd[ch * h * w..(ch + 1) * h * w];
            let obase = (r * c + ch) * bins;
            for bin in 0..bins {
                let pbase = (r * bins + bin) * pairs_per_bin;
                let mut acc = E::zero();
                for p in pbase..pbase + pairs_per_bin {
                    acc = acc + pair_w[p] * fch[pair_idx[p] as usize];
                }
                out[obase + bin] = acc;
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, pooled, pooled], out).expect("roi_align");
    Var::from_op(
        out,
        vec![feat.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[c, h, w]);
            let dd = dx.data_mut();
            for r in 0..n {
                for ch in 0..c {
                    let dch = &mut dd[ch * h * w..(ch + 1) * h * w];
                    let obase = (r * c + ch) * bins;
                    for bin in 0..bins {
                        let gv = gd[obase + bin];
                        let pbase = (r * bins + bin) * pairs_per_bin;
                        for p in pbase..pbase + pairs_per_bin {
                            let i = pair_idx[p] as usize;
                            dch[i] = dch[i] + gv * pair_w[p];
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// fused loss kernels
// ---------------------------------------------------------------------------

/// Softmax + cross-entropy over rows of `logits` (`N x K`), mean over rows.
pub fn softmax_xent<E: Element>(logits: &Var<E>, labels: &[usize]) -> Var<E> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), n, "label count mismatch");
    assert!(labels.iter().all(|&y| y < k), "label out of range");
    let zd = logits.value().data();
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; n * k];
    for r in 0..n {
        let row = &zd[r * k..(r + 1) * k];
        let maxv = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.to64()));
        let mut denom = 0.0f64;
        for c in 0..k {
            let e = (row[c].to64() - maxv).exp();
            probs[r * k + c] = e;
            denom += e;
        }
        for c in 0..k {
            probs[r * k + c] /= denom;
        }
        loss += denom.ln() + maxv - row[labels[r]].to64();
    }
    loss /= n as f64;
    let labels = labels.to_vec();
    Var::from_op(
        Tensor::scalar(E::of(loss)),
        vec![logits.clone()],
        Box::new(move |g| {
            let gv = g.item().to64() / n as f64;
            let mut dz = Vec::with_capacity(n * k);
            for r in 0..n {
                for c in 0..k {
                    let y = if labels[r] == c { 1.0 } else { 0.0 };
                    dz.push(E::of((probs[r * k + c] - y) * gv));
                }
            }
            vec![Some(Tensor::from_vec(&[n, k], dz).expect("dz"))]
        }),
    )
}

/// Row-wise softmax over `N x K` (used for inference scores).
pub fn softmax<E: Element>(logits: &Var<E>) -> Var<E> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let zd = logits.value().data();
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        let row = &zd[r * k..(r + 1) * k];
        let maxv = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.to64()));
        let mut denom = 0.0f64;
        let mut exps = [0.0f64; 64];
        assert!(k <= 64, "softmax row too wide");
        for c in 0..k {
            exps[c] = (row[c].to64() - maxv).exp();
            denom += exps[c];
        }
        for e in exps.iter().take(k) {
            out.push(E::of(e / denom));
        }
    }
    let y = Tensor::from_vec(&[n, k], out).expect("softmax");
    let yv = y.clone();
    Var::from_op(
        y,
        vec![logits.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let yd = yv.data();
            let mut dz = Vec::with_capacity(n * k);
            for r in 0..n {
                let grow = &gd[r * k..(r + 1) * k];
                let yrow = &yd[r * k..(r + 1) * k];
                let dot: f64 = grow
                    .iter()
                    .zip(yrow.iter())
                    .map(|(&gv, &yv)| gv.to64() * yv.to64())
                    .sum();
                for c in 0..k {
                    dz.push(E::of(yrow[c].to64() * (grow[c].to64() - dot)));
                }
            }
            vec![Some(Tensor::from_vec(&[n, k], dz).expect("dz"))]
        }),
    )
}

/// Mean binary cross-entropy of probabilities `p` against constant 0/1
/// labels, with the [`PROB_EPS`] floor inside the logs.
pub fn bce_mean<E: Element>(p: &Var<E>, labels: &Tensor<E>) -> Var<E> {
    assert_eq!(p.shape(), labels.shape(), "bce label shape mismatch");
    let n = p.value().numel();
    let eps = E::of(PROB_EPS);
    let pd = p.value().clone();
    let ld = labels.clone();
    let mut loss = 0.0f64;
    for (&pv, &dv) in pd.data().iter().zip(ld.data().iter()) {
        let pv64 = pv.max(eps).min(E::one()).to64();
        let qv64 = (E::one() - pv).max(eps).min(E::one()).to64();
        loss -= dv.to64() * pv64.ln() + (1.0 - dv.to64()) * qv64.ln();
    }
    loss /= n as f64;
    Var::from_op(
        Tensor::scalar(E::of(loss)),
        vec![p.clone()],
        Box::new(move |g| {
            let gv = g.item().to64() / n as f64;
            let mut dp = Vec::with_capacity(n);
            for (&pv, &dv) in pd.data().iter().zip(ld.data().iter()) {
                let d = dv.to64();
                let pv64 = pv.to64();
                // clamp kills the gradient outside [eps, 1-eps] per side
                let t1 = if pv64 >= PROB_EPS { d / pv64.max(PROB_EPS) } else { 0.0 };
                let t2 = if 1.0 - pv64 >= PROB_EPS {
                    (1.0 - d) / (1.0 - pv64).max(PROB_EPS)
                } else {
                    0.0
                };
                dp.push(E::of(gv * (t2 - t1)));
            }
            vec![Some(
                Tensor::from_vec(pd.shape(), dp).expect("bce grad"),
            )]
        }),
    )
}

/// Weighted smooth-L1 between `pred` and a constant `target`:
/// `sum_i w_i * sl1(pred_i - target_i)` with `sl1(d) = 0.5 d^2` for `|d| < 1`,
/// else `|d| - 0.5`.
pub fn smooth_l1_sum<E: Element>(pred: &Var<E>, target: &Tensor<E>, weight: &Tensor<E>) -> Var<E> {
    assert_eq!(pred.shape(), target.shape(), "smooth_l1 target shape");
    assert_eq!(pred.shape(), weight.shape(), "smooth_l1 weight shape");
    let pd = pred.value().clone();
    let td = target.clone();
    let wd = weight.clone();
    let mut loss = 0.0f64;
    for i in 0..pd.numel() {
        let d = (pd.data()[i] - td.data()[i]).to64();
        let v = if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        loss += wd.data()[i].to64() * v;
    }
    Var::from_op(
        Tensor::scalar(E::of(loss)),
        vec![pred.clone()],
        Box::new(move |g| {
            let gv = g.item().to64();
            let mut dp = Vec::with_capacity(pd.numel());
            for i in 0..pd.numel() {
                let d = (pd.data()[i] - td.data()[i]).to64();
                let dd = d.clamp(-1.0, 1.0);
                dp.push(E::of(gv * wd.data()[i].to64() * dd));
            }
            vec![Some(Tensor::from_vec(pd.shape(), dp).expect("sl1 grad"))]
        }),
    )
}

/// Scalar smooth-L1 value (the piecewise formula itself).
pub fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}
