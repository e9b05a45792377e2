//! Dense f64 kernels backing the graph ops: conv triad (im2col + gemm),
//! 2x2 max pooling with explicit indices, bilinear resize and its adjoint,
//! zero padding and broadcasting/reduction helpers.

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Axis, Ix4, IxDyn};
use rayon::prelude::*;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

pub fn bmap(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let sh = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&sh)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&sh)).expect("broadcast rhs");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&sh));
    ndarray::azip!((o in &mut out, &x in &av, &y in &bv) *o = f(x, y));
    out
}

pub fn broadcast_to(x: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    x.broadcast(IxDyn(target))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", x.shape(), target))
        .to_owned()
}

/// Sum `x` down to `target`, the reverse of broadcasting `target` up to `x.shape()`.
pub fn reduce_sum_to(x: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut cur = x.to_owned();
    while cur.ndim() > target.len() {
        cur = cur.sum_axis(Axis(0));
    }
    assert_eq!(cur.ndim(), target.len(), "reduce target rank exceeds input rank");
    for ax in 0..target.len() {
        if target[ax] == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        } else {
            assert_eq!(target[ax], cur.shape()[ax], "reduce shape mismatch");
        }
    }
    cur
}

fn as4(x: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    x.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a rank-4 (N,C,H,W) tensor")
}

fn im2col(x: ArrayView3<'_, f64>, kh: usize, kw: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (ci, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &Array2<f64>, ci: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, ho: usize, wo: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((ci, h, w));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[c, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    img
}

fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> (usize, usize) {
    (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw)
}

/// Cross-correlation, stride 1, symmetric zero padding. x: (N,Ci,H,W), w: (Co,Ci,kh,kw).
pub fn conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, pad: usize) -> ArrayD<f64> {
    let x4 = as4(x);
    let w4 = as4(w);
    let (n, ci, h, wd) = x4.dim();
    let (co, ci2, kh, kw) = w4.dim();
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    let (ho, wo) = conv_out_hw(h, wd, kh, kw, pad);
    let wmat = w4
        .to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap();
    let per: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let col = im2col(x4.index_axis(Axis(0), i), kh, kw, pad, ho, wo);
            wmat.dot(&col)
        })
        .collect();
    let mut out = Array4::<f64>::zeros((n, co, ho, wo));
    for (i, m) in per.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&m.into_shape_with_order((co, ho, wo)).unwrap());
    }
    out.into_dyn()
}

/// Adjoint of `conv2d` in its first argument. a: (N,Co,Ho,Wo) -> (N,Ci,H,W).
pub fn conv2d_transpose(a: &ArrayD<f64>, w: &ArrayD<f64>, pad: usize, out_hw: (usize, usize)) -> ArrayD<f64> {
    let a4 = as4(a);
    let w4 = as4(w);
    let (n, co, ho, wo) = a4.dim();
    let (co2, ci, kh, kw) = w4.dim();
    assert_eq!(co, co2, "conv2d_transpose channel mismatch");
    let (h, wd) = out_hw;
    let wmat = w4
        .to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap();
    let wmat_t = wmat.t().to_owned();
    let per: Vec<Array3<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let amat = a4
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((co, ho * wo))
                .unwrap();
            let col = wmat_t.dot(&amat);
            col2im(&col, ci, h, wd, kh, kw, pad, ho, wo)
        })
        .collect();
    let mut out = Array4::<f64>::zeros((n, ci, h, wd));
    for (i, m) in per.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&m);
    }
    out.into_dyn()
}

/// Adjoint of `conv2d` in the weights. x: (N,Ci,H,W), gy: (N,Co,Ho,Wo) -> (Co,Ci,kh,kw).
pub fn conv2d_wgrad(x: &ArrayD<f64>, gy: &ArrayD<f64>, pad: usize, kshape: [usize; 4]) -> ArrayD<f64> {
    let x4 = as4(x);
    let g4 = as4(gy);
    let (n, ci, _h, _w) = x4.dim();
    let (_n2, co, ho, wo) = g4.dim();
    let [co2, ci2, kh, kw] = kshape;
    assert_eq!(co, co2);
    assert_eq!(ci, ci2);
    let per: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let col = im2col(x4.index_axis(Axis(0), i), kh, kw, pad, ho, wo);
            let gmat = g4
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((co, ho * wo))
                .unwrap();
            gmat.dot(&col.t())
        })
        .collect();
    let mut acc = Array2::<f64>::zeros((co, ci * kh * kw));
    for m in per {
        acc += &m;
    }
    acc.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn()
}

/// 2x2 max pooling, stride 2, floor semantics on odd sizes. Returns pooled
/// values plus the flat spatial index of each selected element.
pub fn maxpool2(x: &ArrayD<f64>) -> (ArrayD<f64>, Vec<u32>) {
    let x4 = as4(x);
    let (n, c, h, w) = x4.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut idx = vec![0u32; n * c * ho * wo];
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bix = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                            let v = x4[[i, ch, iy, ix]];
                            if v > best {
                                best = v;
                                bix = (iy * w + ix) as u32;
                            }
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                    idx[((i * c + ch) * ho + oy) * wo + ox] = bix;
                }
            }
        }
    }
    (out.into_dyn(), idx)
}

/// Scatter pooled-shape values back to input shape at the recorded indices.
pub fn max_unpool2(g: &ArrayD<f64>, idx: &[u32], in_hw: (usize, usize)) -> ArrayD<f64> {
    let g4 = as4(g);
    let (n, c, ho, wo) = g4.dim();
    let (h, w) = in_hw;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let flat = idx[((i * c + ch) * ho + oy) * wo + ox] as usize;
                    out[[i, ch, flat / w, flat % w]] += g4[[i, ch, oy, ox]];
                }
            }
        }
    }
    out.into_dyn()
}

/// Gather input-shape values at the recorded indices (adjoint of `max_unpool2`).
pub fn pool_gather(x: &ArrayD<f64>, idx: &[u32], out_hw: (usize, usize)) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, _h, w) = x4.dim();
    let (ho, wo) = out_hw;
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let flat = idx[((i * c + ch) * ho + oy) * wo + ox] as usize;
                    out[[i, ch, oy, ox]] = x4[[i, ch, flat / w, flat % w]];
                }
            }
        }
    }
    out.into_dyn()
}

/// Per-axis bilinear taps with half-pixel centers and edge clamping.
pub fn lin_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(x: &ArrayD<f64>, hw: (usize, usize)) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, h, w) = x4.dim();
    let (h2, w2) = hw;
    let ty = lin_taps(h2, h);
    let tx = lin_taps(w2, w);
    let mut out = Array4::<f64>::zeros((n, c, h2, w2));
    for i in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = (1.0 - fy) * ((1.0 - fx) * x4[[i, ch, y0, x0]] + fx * x4[[i, ch, y0, x1]])
                        + fy * ((1.0 - fx) * x4[[i, ch, y1, x0]] + fx * x4[[i, ch, y1, x1]]);
                    out[[i, ch, oy, ox]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

pub fn resize_bilinear_adjoint(g: &ArrayD<f64>, in_hw: (usize, usize)) -> ArrayD<f64> {
    let g4 = as4(g);
    let (n, c, h2, w2) = g4.dim();
    let (h, w) = in_hw;
    let ty = lin_taps(h2, h);
    let tx = lin_taps(w2, w);
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g4[[i, ch, oy, ox]];
                    out[[i, ch, y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                    out[[i, ch, y0, x1]] += (1.0 - fy) * fx * gv;
                    out[[i, ch, y1, x0]] += fy * (1.0 - fx) * gv;
                    out[[i, ch, y1, x1]] += fy * fx * gv;
                }
            }
        }
    }
    out.into_dyn()
}

pub fn pad_zero(x: &ArrayD<f64>, top: usize, left: usize, out_hw: (usize, usize)) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, h, w) = x4.dim();
    let (h2, w2) = out_hw;
    assert!(top + h <= h2 && left + w <= w2, "pad window out of range");
    let mut out = Array4::<f64>::zeros((n, c, h2, w2));
    out.slice_mut(ndarray::s![.., .., top..top + h, left..left + w])
        .assign(&x4);
    out.into_dyn()
}

pub fn crop_win(x: &ArrayD<f64>, top: usize, left: usize, hw: (usize, usize)) -> ArrayD<f64> {
    let x4 = as4(x);
    let (h2, w2) = hw;
    x4.slice(ndarray::s![.., .., top..top + h2, left..left + w2])
        .to_owned()
        .into_dyn()
}
