//! Correlation volume, its pooled pyramid, windowed lookup and convex
//! upsampling, as fused differentiable ops.

use crate::autograd::{gemm, Graph, MatRef, Real, Tensor, Var};
use crate::error::{NslError, Result};

/// All-pairs same-row correlation of two `[N, D, H, W]` feature maps.
/// Output `[N, H, W, W]` with `C[n,i,j,k] = Σ_h fl[n,h,i,j]·fr[n,h,i,k]`.
pub fn cost_volume_op<T: Real>(g: &Graph<T>, fl: Var, fr: Var) -> Result<Var> {
    let (vl, vr) = (g.value(fl), g.value(fr));
    if vl.shape() != vr.shape() || vl.shape().len() != 4 {
        return Err(NslError::Shape(format!(
            "cost volume inputs {:?} and {:?}",
            vl.shape(),
            vr.shape()
        )));
    }
    let (n, d, h, w) = vl.dims4();
    let hw = h * w;
    let mut out = vec![T::ZERO; n * h * w * w];
    for b in 0..n {
        for i in 0..h {
            let o = b * d * hw + i * w;
            let a = MatRef {
                data: &vl.data()[o..],
                rows: w,
                cols: d,
                rs: 1,
                cs: hw,
            };
            let bm = MatRef {
                data: &vr.data()[o..],
                rows: d,
                cols: w,
                rs: hw,
                cs: 1,
            };
            let c = &mut out[(b * h + i) * w * w..(b * h + i + 1) * w * w];
            gemm(a, bm, c, T::ONE, T::ZERO);
        }
    }
    Ok(g.record(
        Tensor::new(vec![n, h, w, w], out),
        &[fl, fr],
        move |gr, s| {
            let mut tmp = vec![T::ZERO; w * d];
            for b in 0..n {
                for i in 0..h {
                    let o = b * d * hw + i * w;
                    let dc = &gr[(b * h + i) * w * w..(b * h + i + 1) * w * w];
                    if s.wants(fl) {
                        let frv = MatRef {
                            data: &vr.data()[o..],
                            rows: w,
                            cols: d,
                            rs: 1,
                            cs: hw,
                        };
                        gemm(MatRef::rm(dc, w, w), frv, &mut tmp, T::ONE, T::ZERO);
                        s.add(fl, |dst| scatter_rows(&tmp, dst, o, w, d, hw));
                    }
                    if s.wants(fr) {
                        let flv = MatRef {
                            data: &vl.data()[o..],
                            rows: w,
                            cols: d,
                            rs: 1,
                            cs: hw,
                        };
                        gemm(MatRef::rm_t(dc, w, w), flv, &mut tmp, T::ONE, T::ZERO);
                        s.add(fr, |dst| scatter_rows(&tmp, dst, o, w, d, hw));
                    }
                }
            }
        },
    ))
}

// tmp is [w, d] row-major; dst holds the same entries at o + h·hw + j.
fn scatter_rows<T: Real>(tmp: &[T], dst: &mut [T], o: usize, w: usize, d: usize, hw: usize) {
    for j in 0..w {
        for c in 0..d {
            dst[o + c * hw + j] += tmp[j * d + c];
        }
    }
}

/// Average adjacent pairs along the last axis (odd trailing entry dropped).
pub fn pool_last_op<T: Real>(g: &Graph<T>, x: Var) -> Var {
    let v = g.value(x);
    let shape = v.shape().to_vec();
    let k = *shape.last().expect("rank ≥ 1");
    let ko = k / 2;
    let rows = v.len() / k;
    let half = T::from_f64(0.5);
    let mut out = vec![T::ZERO; rows * ko];
    for (src, dst) in v.data().chunks(k).zip(out.chunks_mut(ko.max(1))) {
        for m in 0..ko {
            dst[m] = half * (src[2 * m] + src[2 * m + 1]);
        }
    }
    let mut oshape = shape;
    *oshape.last_mut().unwrap() = ko;
    g.record(Tensor::new(oshape, out), &[x], move |gr, s| {
        s.add(x, |d| {
            for (dst, src) in d.chunks_mut(k).zip(gr.chunks(ko.max(1))) {
                for m in 0..ko {
                    dst[2 * m] += half * src[m];
                    dst[2 * m + 1] += half * src[m];
                }
            }
        });
    })
}

/// `levels` volumes; level `l` pools the last axis of level `l-1`.
pub fn pyramid_op<T: Real>(g: &Graph<T>, c: Var, levels: usize) -> Result<Vec<Var>> {
    if levels == 0 {
        return Err(NslError::Config("pyramid needs at least one level".into()));
    }
    let k = *g.shape(c).last().unwrap_or(&0);
    if k < 1 << (levels - 1) {
        return Err(NslError::Config(format!(
            "last dimension {k} too small for {levels} pyramid levels"
        )));
    }
    let mut out = vec![c];
    for _ in 1..levels {
        let prev = *out.last().unwrap();
        out.push(pool_last_op(g, prev));
    }
    Ok(out)
}

/// Sample `2·radius+1` entries per level around `(j − scale_n·d)/2^l`.
/// `d` is `[N, 1, H, W]`; `scale` has one factor per batch item. Output is
/// `[N, levels·(2·radius+1), H, W]`, level-major.
pub fn lookup_op<T: Real>(
    g: &Graph<T>,
    pyramid: &[Var],
    d: Var,
    radius: usize,
    scale: &[f64],
) -> Var {
    let vd = g.value(d);
    let (n, one, h, w) = vd.dims4();
    assert_eq!(one, 1, "disparity field must have one channel");
    assert_eq!(scale.len(), n, "one lookup scale per batch item");
    let taps = 2 * radius + 1;
    let nl = pyramid.len();
    let vals: Vec<Tensor<T>> = pyramid.iter().map(|&p| g.value(p)).collect();
    let ks: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
    for v in &vals {
        assert_eq!(&v.shape()[..3], &[n, h, w], "pyramid level shape");
    }
    let cout = nl * taps;
    let hw = h * w;
    let mut out = vec![T::ZERO; n * cout * hw];
    let read = |row: &[T], idx: i64| -> T {
        if idx >= 0 && (idx as usize) < row.len() {
            row[idx as usize]
        } else {
            T::ZERO
        }
    };
    let pos_of = |b: usize, p: usize, l: usize, o: usize| -> (i64, T) {
        let j = (p % w) as f64;
        let c = (j - scale[b] * vd.data()[b * hw + p].to_f64()) / (1u64 << l) as f64;
        let pos = c + o as f64 - radius as f64;
        let x0 = pos.floor();
        (x0 as i64, T::from_f64(pos - x0))
    };
    for b in 0..n {
        for p in 0..hw {
            for (l, v) in vals.iter().enumerate() {
                let k = ks[l];
                let row = &v.data()[(b * hw + p) * k..(b * hw + p + 1) * k];
                for o in 0..taps {
                    let (x0, f) = pos_of(b, p, l, o);
                    let val = (T::ONE - f) * read(row, x0) + f * read(row, x0 + 1);
                    out[(b * cout + l * taps + o) * hw + p] = val;
                }
            }
        }
    }
    let scale = scale.to_vec();
    let mut parents = pyramid.to_vec();
    parents.push(d);
    let pyr = pyramid.to_vec();
    g.record(
        Tensor::new(vec![n, cout, h, w], out),
        &parents,
        move |gr, s| {
            let pos_of = |b: usize, p: usize, l: usize, o: usize| -> (i64, T) {
                let j = (p % w) as f64;
                let c = (j - scale[b] * vd.data()[b * hw + p].to_f64()) / (1u64 << l) as f64;
                let pos = c + o as f64 - radius as f64;
                let x0 = pos.floor();
                (x0 as i64, T::from_f64(pos - x0))
            };
            for (l, &pv) in pyr.iter().enumerate() {
                let k = ks[l];
                s.add(pv, |dst| {
                    for b in 0..n {
                        for p in 0..hw {
                            let row = &mut dst[(b * hw + p) * k..(b * hw + p + 1) * k];
                            for o in 0..taps {
                                let gv = gr[(b * cout + l * taps + o) * hw + p];
                                let (x0, f) = pos_of(b, p, l, o);
                                if x0 >= 0 && (x0 as usize) < k {
                                    row[x0 as usize] += (T::ONE - f) * gv;
                                }
                                if x0 + 1 >= 0 && ((x0 + 1) as usize) < k {
                                    row[(x0 + 1) as usize] += f * gv;
                                }
                            }
                        }
                    }
                });
            }
            s.add(d, |dst| {
                for b in 0..n {
                    for p in 0..hw {
                        let mut acc = T::ZERO;
                        for (l, v) in vals.iter().enumerate() {
                            let k = ks[l];
                            let row = &v.data()[(b * hw + p) * k..(b * hw + p + 1) * k];
                            let dpos = T::from_f64(-scale[b] / (1u64 << l) as f64);
                            for o in 0..taps {
                                let gv = gr[(b * cout + l * taps + o) * hw + p];
                                let (x0, _) = pos_of(b, p, l, o);
                                let slope = read(row, x0 + 1) - read(row, x0);
                                acc += gv * slope * dpos;
                            }
                        }
                        dst[b * hw + p] += acc;
                    }
                }
            });
        },
    )
}

/// Convex-combination upsampling by `factor`: each fine pixel is a softmax
/// weighted mix of the 3×3 coarse neighborhood of `factor·d` (zero padded).
/// `mask` is `[N, 9·factor², H, W]` with channel `k·factor² + a·factor + b`.
pub fn convex_upsample_op<T: Real>(g: &Graph<T>, mask: Var, d: Var, factor: usize) -> Var {
    let (vm, vd) = (g.value(mask), g.value(d));
    let (n, _, h, w) = vd.dims4();
    let ff = factor * factor;
    assert_eq!(vm.shape(), &[n, 9 * ff, h, w], "convex mask shape");
    let (ho, wo) = (h * factor, w * factor);
    let hw = h * w;
    let fac = T::from_f64(factor as f64);
    let neighbor = move |b: usize, i: usize, j: usize, k: usize| -> Option<usize> {
        let y = i as i64 + (k / 3) as i64 - 1;
        let x = j as i64 + (k % 3) as i64 - 1;
        (y >= 0 && y < h as i64 && x >= 0 && x < w as i64)
            .then(|| b * hw + y as usize * w + x as usize)
    };
    // softmax weights, kept for backward: [n, ff, h, w, 9]
    let mut weights = vec![T::ZERO; n * ff * hw * 9];
    let mut out = vec![T::ZERO; n * ho * wo];
    for b in 0..n {
        for sub in 0..ff {
            for p in 0..hw {
                let wk = &mut weights[((b * ff + sub) * hw + p) * 9..][..9];
                let mut mx = T::from_f64(f64::NEG_INFINITY);
                for (k, wv) in wk.iter_mut().enumerate() {
                    *wv = vm.data()[((b * 9 * ff) + k * ff + sub) * hw + p];
                    mx = mx.max(*wv);
                }
                let mut z = T::ZERO;
                for wv in wk.iter_mut() {
                    *wv = (*wv - mx).exp();
                    z += *wv;
                }
                let (i, j) = (p / w, p % w);
                let mut acc = T::ZERO;
                for (k, wv) in wk.iter_mut().enumerate() {
                    *wv = *wv / z;
                    if let Some(q) = neighbor(b, i, j, k) {
                        acc += *wv * fac * vd.data()[q];
                    }
                }
                let (a, c) = (sub / factor, sub % factor);
                out[b * ho * wo + (i * factor + a) * wo + j * factor + c] = acc;
            }
        }
    }
    g.record(
        Tensor::new(vec![n, 1, ho, wo], out),
        &[mask, d],
        move |gr, s| {
            let go = |b: usize, sub: usize, p: usize| {
                let (a, c) = (sub / factor, sub % factor);
                gr[b * ho * wo + ((p / w) * factor + a) * wo + (p % w) * factor + c]
            };
            s.add(mask, |dst| {
                for b in 0..n {
                    for sub in 0..ff {
                        for p in 0..hw {
                            let gv = go(b, sub, p);
                            let wk = &weights[((b * ff + sub) * hw + p) * 9..][..9];
                            let u: Vec<T> = (0..9)
                                .map(|k| {
                                    neighbor(b, p / w, p % w, k)
                                        .map_or(T::ZERO, |q| fac * vd.data()[q])
                                })
                                .collect();
                            let mean: T = wk.iter().zip(&u).map(|(&a, &b)| a * b).sum();
                            for k in 0..9 {
                                dst[((b * 9 * ff) + k * ff + sub) * hw + p] +=
                                    gv * wk[k] * (u[k] - mean);
                            }
                        }
                    }
                }
            });
            s.add(d, |dst| {
                for b in 0..n {
                    for sub in 0..ff {
                        for p in 0..hw {
                            let gv = go(b, sub, p) * fac;
                            let wk = &weights[((b * ff + sub) * hw + p) * 9..][..9];
                            for (k, &wv) in wk.iter().enumerate() {
                                if let Some(q) = neighbor(b, p / w, p % w, k) {
                                    dst[q] += gv * wv;
                                }
                            }
                        }
                    }
                }
            });
        },
    )
}

/// Non-differentiable correlation volume of two `[N, D, H, W]` maps.
pub fn build_cost_volume<T: Real>(fl: &Tensor<T>, fr: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let (a, b) = (g.constant(fl.clone()), g.constant(fr.clone()));
    let c = cost_volume_op(&g, a, b)?;
    Ok(g.value(c))
}

/// Non-differentiable pyramid of a `[.., K]` volume.
pub fn build_pyramid<T: Real>(c: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    let g = Graph::new();
    let v = g.constant(c.clone());
    Ok(pyramid_op(&g, v, levels)?
        .into_iter()
        .map(|l| g.value(l))
        .collect())
}

/// Non-differentiable lookup at a `[N, 1, H, W]` disparity field.
pub fn lookup<T: Real>(pyramid: &[Tensor<T>], d: &Tensor<T>, radius: usize) -> Tensor<T> {
    let g = Graph::new();
    let levels: Vec<Var> = pyramid.iter().map(|t| g.constant(t.clone())).collect();
    let dv = g.constant(d.clone());
    let scale = vec![1.0; d.shape()[0]];
    let out = lookup_op(&g, &levels, dv, radius, &scale);
    g.value(out)
}
