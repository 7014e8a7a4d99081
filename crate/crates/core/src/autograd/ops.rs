//! Differentiable NCHW operations recorded on a [`Graph`].

use super::graph::{Graph, Tensor, Var};
use super::real::{gemm, MatRef, Real};

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &str) {
    let (sa, sb) = (g.shape(a), g.shape(b));
    assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
}

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub const SAME3: Conv2d = Conv2d { stride: 1, pad: 1 };
    pub const DOWN3: Conv2d = Conv2d { stride: 2, pad: 1 };
    pub const POINT: Conv2d = Conv2d { stride: 1, pad: 0 };

    pub fn out_dim(&self, n: usize, k: usize) -> usize {
        assert!(
            n + 2 * self.pad >= k,
            "convolution kernel larger than padded input"
        );
        (n + 2 * self.pad - k) / self.stride + 1
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[ox_lo, ox_hi)` whose input column stays in range
    /// for kernel column `kx`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(kx)).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            out.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..lo].fill(T::ZERO);
                        out[hi..].fill(T::ZERO);
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (o, i) in out[lo..hi].iter_mut().zip((ix0..).step_by(self.stride)) {
                                *o = src[i];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &row[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (&v, i) in src.iter().zip((ix0..).step_by(self.stride)) {
                                dst[i] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Elementwise `a + b`.
    pub fn add(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.record(
            Tensor::new(va.shape().to_vec(), out),
            &[a, b],
            move |g, s| {
                for p in [a, b] {
                    s.add(p, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
            },
        )
    }

    /// Elementwise `a - b`.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        self.record(
            Tensor::new(va.shape().to_vec(), out),
            &[a, b],
            move |g, s| {
                s.add(a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                s.add(b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            },
        )
    }

    /// Elementwise `a * b`.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.record(
            Tensor::new(va.shape().to_vec(), out),
            &[a, b],
            move |g, s| {
                s.add(a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb.data()) {
                        *d += g * y;
                    }
                });
                s.add(b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va.data()) {
                        *d += g * x;
                    }
                });
            },
        )
    }

    /// `scale·a + shift`.
    pub fn affine(&self, a: Var, scale: T, shift: T) -> Var {
        let va = self.value(a);
        let out = va.map(|x| scale * x + shift);
        self.record(out, &[a], move |g, s| {
            s.add(a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += scale * g)
            });
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(T::ZERO));
        self.record(out, &[a], move |g, s| {
            s.add(a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(va.data()) {
                    if x > T::ZERO {
                        *d += g;
                    }
                }
            });
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let y = self.value(a).map(T::sigmoid);
        let yk = y.clone();
        self.record(y, &[a], move |g, s| {
            s.add(a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(yk.data()) {
                    *d += g * y * (T::ONE - y);
                }
            });
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let y = self.value(a).map(T::tanh);
        let yk = y.clone();
        self.record(y, &[a], move |g, s| {
            s.add(a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(yk.data()) {
                    *d += g * (T::ONE - y * y);
                }
            });
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let total: T = va.data().iter().copied().sum();
        self.record(Tensor::scalar(total), &[a], move |g, s| {
            let g = g[0];
            s.add(a, |d| d.iter_mut().for_each(|d| *d += g));
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let total = self.sum(a);
        self.affine(total, T::ONE / T::from_f64(n as f64), T::ZERO)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut total = T::ZERO;
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        let terms = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.record(Tensor::scalar(total), &parents, move |g, s| {
            for &(v, w) in &terms {
                s.add(v, |d| d[0] += w * g[0]);
            }
        })
    }

    /// 2-D convolution. `w` is `[co, ci, kh, kw]`, `bias` is `[co]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, geom: Conv2d) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, c, h, wd) = vx.dims4();
        let ws = vw.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(
            ws[1], c,
            "conv2d: input has {c} channels, weight expects {}",
            ws[1]
        );
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let cg = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho: geom.out_dim(h, kh),
            wo: geom.out_dim(wd, kw),
            stride: geom.stride,
            pad: geom.pad,
        };
        let p = cg.ho * cg.wo;
        let k = c * kh * kw;
        let vb = bias.map(|b| {
            let vb = self.value(b);
            assert_eq!(vb.len(), co, "conv2d bias length");
            vb
        });
        let mut out = vec![T::ZERO; n * co * p];
        let mut col = if cg.is_pointwise() {
            Vec::new()
        } else {
            vec![T::ZERO; k * p]
        };
        for b in 0..n {
            let xb = &vx.data()[b * c * h * wd..(b + 1) * c * h * wd];
            let ob = &mut out[b * co * p..(b + 1) * co * p];
            if let Some(vb) = &vb {
                for (o, &bv) in ob.chunks_mut(p).zip(vb.data()) {
                    o.fill(bv);
                }
            }
            let colb: &[T] = if cg.is_pointwise() {
                xb
            } else {
                cg.im2col(xb, &mut col);
                &col
            };
            let beta = if vb.is_some() { T::ONE } else { T::ZERO };
            gemm(
                MatRef::rm(vw.data(), co, k),
                MatRef::rm(colb, k, p),
                ob,
                T::ONE,
                beta,
            );
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let shape = vec![n, co, cg.ho, cg.wo];
        self.record(Tensor::new(shape, out), &parents, move |g, s| {
            let want_x = s.wants(x);
            let want_w = s.wants(w);
            let mut col = if cg.is_pointwise() {
                Vec::new()
            } else {
                vec![T::ZERO; k * p]
            };
            let mut dcol = if want_x && !cg.is_pointwise() {
                vec![T::ZERO; k * p]
            } else {
                Vec::new()
            };
            for b in 0..n {
                let gb = &g[b * co * p..(b + 1) * co * p];
                let xb = &vx.data()[b * c * h * wd..(b + 1) * c * h * wd];
                if let Some(bv) = bias {
                    s.add(bv, |d| {
                        for (d, row) in d.iter_mut().zip(gb.chunks(p)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                }
                if want_w {
                    let colb: &[T] = if cg.is_pointwise() {
                        xb
                    } else {
                        cg.im2col(xb, &mut col);
                        &col
                    };
                    s.add(w, |d| {
                        gemm(
                            MatRef::rm(gb, co, p),
                            MatRef::rm_t(colb, p, k),
                            d,
                            T::ONE,
                            T::ONE,
                        )
                    });
                }
                if want_x {
                    let off = b * c * h * wd;
                    let len = c * h * wd;
                    if cg.is_pointwise() {
                        s.add(x, |d| {
                            gemm(
                                MatRef::rm_t(vw.data(), k, co),
                                MatRef::rm(gb, co, p),
                                &mut d[off..off + len],
                                T::ONE,
                                T::ONE,
                            )
                        });
                    } else {
                        gemm(
                            MatRef::rm_t(vw.data(), k, co),
                            MatRef::rm(gb, co, p),
                            &mut dcol,
                            T::ONE,
                            T::ZERO,
                        );
                        s.add(x, |d| cg.col2im(&dcol, &mut d[off..off + len]));
                    }
                }
            }
        })
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let inv_hw = T::ONE / T::from_f64(hw as f64);
        let mut out = vec![T::ZERO; vx.len()];
        let mut inv_std = vec![T::ZERO; n * c];
        for (i, (src, dst)) in vx.data().chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let mu = src.iter().copied().sum::<T>() * inv_hw;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_hw;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[i] = is;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mu) * is;
            }
        }
        let y = Tensor::new(vec![n, c, h, w], out);
        let yk = y.clone();
        self.record(y, &[x], move |g, s| {
            s.add(x, |d| {
                for (i, ((dd, gy), yy)) in d
                    .chunks_mut(hw)
                    .zip(g.chunks(hw))
                    .zip(yk.data().chunks(hw))
                    .enumerate()
                {
                    let mg = gy.iter().copied().sum::<T>() * inv_hw;
                    let mgy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    let is = inv_std[i];
                    for ((d, &gv), &yv) in dd.iter_mut().zip(gy).zip(yy) {
                        *d += is * (gv - mg - yv * mgy);
                    }
                }
            });
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat: incompatible shapes");
                vc
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let parts = parts.to_vec();
        self.record(
            Tensor::new(vec![n, ctot, h, w], out),
            &parts.clone(),
            move |g, s| {
                let mut start = 0;
                for (&p, &c) in parts.iter().zip(&chans) {
                    s.add(p, |d| {
                        for b in 0..n {
                            let src = &g[(b * ctot + start) * hw..(b * ctot + start + c) * hw];
                            for (d, &v) in d[b * c * hw..(b + 1) * c * hw].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    });
                    start += c;
                }
            },
        )
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&vx.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        self.record(Tensor::new(vec![n, len, h, w], out), &[x], move |g, s| {
            s.add(x, |d| {
                for b in 0..n {
                    let dst = &mut d[(b * c + start) * hw..(b * c + start + len) * hw];
                    for (d, &v) in dst.iter_mut().zip(&g[b * len * hw..(b + 1) * len * hw]) {
                        *d += v;
                    }
                }
            });
        })
    }

    /// 2×2 average pooling with stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2 on a {h}x{w} map");
        let q = T::from_f64(0.25);
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for (src, dst) in vx.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = q * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        self.record(Tensor::new(vec![n, c, ho, wo], out), &[x], move |g, s| {
            s.add(x, |d| {
                for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = q * src[y * wo + xx];
                            let i = 2 * y * w + 2 * xx;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
            });
        })
    }

    /// Bilinear resize with corner pixels aligned.
    pub fn resize_bilinear(&self, x: Var, ho: usize, wo: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let ys = resize_taps(h, ho);
        let xs = resize_taps(w, wo);
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for (src, dst) in vx.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let top = src[y0 * w + x0] * (T::ONE - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::ONE - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (T::ONE - fy) + bot * fy;
                }
            }
        }
        self.record(Tensor::new(vec![n, c, ho, wo], out), &[x], move |g, s| {
            s.add(x, |d| {
                for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        let fy = T::from_f64(fy);
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let fx = T::from_f64(fx);
                            let gv = src[oy * wo + ox];
                            let gt = gv * (T::ONE - fy);
                            let gb = gv * fy;
                            dst[y0 * w + x0] += gt * (T::ONE - fx);
                            dst[y0 * w + x1] += gt * fx;
                            dst[y1 * w + x0] += gb * (T::ONE - fx);
                            dst[y1 * w + x1] += gb * fx;
                        }
                    }
                }
            });
        })
    }

    /// `Σ mask·|a − target| / Σ mask`; `target` and `mask` are constants.
    pub fn masked_l1(&self, a: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "masked_l1 target shape");
        assert_eq!(va.shape(), mask.shape(), "masked_l1 mask shape");
        let count: T = mask.data().iter().copied().sum();
        assert!(count > T::ZERO, "masked_l1 with an empty mask");
        let inv = T::ONE / count;
        let mut total = T::ZERO;
        let mut sign = vec![T::ZERO; va.len()];
        for (i, ((&p, &t), &m)) in va
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .enumerate()
        {
            if m > T::ZERO {
                total += m * (p - t).abs();
                sign[i] = m * (p - t).signum0() * inv;
            }
        }
        self.record(Tensor::scalar(total * inv), &[a], move |g, s| {
            let g = g[0];
            s.add(a, |d| {
                d.iter_mut().zip(&sign).for_each(|(d, &sg)| *d += g * sg)
            });
        })
    }

    /// Edge term of the depth loss: mean over valid horizontal pairs of
    /// `|∂x a − ∂x t|` plus the same over vertical pairs. A pair counts
    /// when both members are valid.
    pub fn gradient_l1(&self, a: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "gradient_l1 target shape");
        assert_eq!(va.shape(), mask.shape(), "gradient_l1 mask shape");
        let (_, _, h, w) = va.dims4();
        let hw = h * w;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let (p, t, m) = (va.data(), target.data(), mask.data());
        for base in (0..p.len()).step_by(hw) {
            for y in 0..h {
                for x in 0..w {
                    let i = base + y * w + x;
                    if m[i] <= T::ZERO {
                        continue;
                    }
                    if x + 1 < w && m[i + 1] > T::ZERO {
                        xs.push(i);
                    }
                    if y + 1 < h && m[i + w] > T::ZERO {
                        ys.push(i);
                    }
                }
            }
        }
        let mut total = T::ZERO;
        let mut coefs: Vec<(usize, usize, T)> = Vec::with_capacity(xs.len() + ys.len());
        for (pairs, step) in [(&xs, 1usize), (&ys, w)] {
            if pairs.is_empty() {
                continue;
            }
            let inv = T::ONE / T::from_f64(pairs.len() as f64);
            for &i in pairs.iter() {
                let e = (p[i + step] - p[i]) - (t[i + step] - t[i]);
                total += e.abs() * inv;
                coefs.push((i, i + step, e.signum0() * inv));
            }
        }
        self.record(Tensor::scalar(total), &[a], move |g, s| {
            let g = g[0];
            s.add(a, |d| {
                for &(i, j, c) in &coefs {
                    d[j] += g * c;
                    d[i] -= g * c;
                }
            });
        })
    }
}

/// Source taps `(lo, hi, frac)` for an align-corners resize from `n` to `m`.
fn resize_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    (0..m)
        .map(|o| {
            let pos = if m > 1 {
                o as f64 * (n - 1) as f64 / (m - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
