//! Differentiable tensor operations.
//!
//! Each operation has a value-level implementation (shared with the
//! non-training code paths) plus a tape wrapper that records the backward
//! closure.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use super::{accum, Scalar, Tape, Var};

/// Per-output (lo, hi, frac) rows for corner-aligned linear interpolation.
pub(crate) fn lerp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn flat<F: Scalar>(a: &ArrayD<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

/// Bilinear spatial upsampling of every channel slice, corner-aligned.
/// Input `(B, K, h, w)`, output `(B, K, H, W)`.
pub(crate) fn val_bilinear_up2d<F: Scalar>(x: &ArrayD<F>, h2: usize, w2: usize) -> ArrayD<F> {
    let sh = x.shape();
    let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let ys = lerp_table(h, h2);
    let xs = lerp_table(w, w2);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, k, h2, w2]));
    let src = flat(x);
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ki in 0..k {
            let sbase = (bi * k + ki) * h * w;
            let dbase = (bi * k + ki) * h2 * w2;
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let ty = F::c(ty);
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let tx = F::c(tx);
                    let one = F::one();
                    let v00 = src[sbase + y0 * w + x0];
                    let v01 = src[sbase + y0 * w + x1];
                    let v10 = src[sbase + y1 * w + x0];
                    let v11 = src[sbase + y1 * w + x1];
                    let top = v00 * (one - tx) + v01 * tx;
                    let bot = v10 * (one - tx) + v11 * tx;
                    dst[dbase + oy * w2 + ox] = top * (one - ty) + bot * ty;
                }
            }
        }
    }
    out
}

/// Riffles `n` stage volumes `(B, k, H, W)` into `(B, n*k, H, W)`:
/// output level `m*n + i` comes from stage `i`, cell `m`.
pub(crate) fn val_interleave<F: Scalar>(stages: &[&ArrayD<F>]) -> ArrayD<F> {
    let n = stages.len();
    let sh = stages[0].shape();
    let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    for s in stages {
        assert_eq!(s.shape(), sh, "stage volumes must share a shape");
    }
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, n * k, h, w]));
    for (i, s) in stages.iter().enumerate() {
        for m in 0..k {
            out.index_axis_mut(Axis(1), m * n + i).assign(&s.index_axis(Axis(1), m));
        }
    }
    out
}

/// Inverse of [`val_interleave`].
pub(crate) fn val_deinterleave<F: Scalar>(full: &ArrayD<F>, n: usize) -> Vec<ArrayD<F>> {
    let sh = full.shape();
    let (b, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert_eq!(d % n, 0);
    let k = d / n;
    (0..n)
        .map(|i| {
            let mut s = ArrayD::<F>::zeros(IxDyn(&[b, k, h, w]));
            for m in 0..k {
                s.index_axis_mut(Axis(1), m).assign(&full.index_axis(Axis(1), m * n + i));
            }
            s
        })
        .collect()
}

/// Softmax along axis 1 of a `(B, C, ...)` tensor.
pub(crate) fn val_softmax1<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    lanewise(x, |lane, out| {
        let mut mx = lane[0];
        for &v in lane.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for (o, &v) in out.iter_mut().zip(lane.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    })
}

/// Log-softmax along axis 1.
pub(crate) fn val_log_softmax1<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    lanewise(x, |lane, out| {
        let mut mx = lane[0];
        for &v in lane.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for &v in lane.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in out.iter_mut().zip(lane.iter()) {
            *o = v - lse;
        }
    })
}

/// Applies `f` to every axis-1 lane of a `(B, C, ...)` tensor.
fn lanewise<F: Scalar>(x: &ArrayD<F>, f: impl Fn(&[F], &mut [F])) -> ArrayD<F> {
    let sh = x.shape().to_vec();
    let b = sh[0];
    let c = sh[1];
    let m: usize = sh[2..].iter().product();
    let src = flat(x);
    let mut out = ArrayD::<F>::zeros(IxDyn(&sh));
    let dst = out.as_slice_mut().unwrap();
    let mut lane = vec![F::zero(); c];
    let mut olane = vec![F::zero(); c];
    for bi in 0..b {
        for mi in 0..m {
            let base = bi * c * m + mi;
            for ci in 0..c {
                lane[ci] = src[base + ci * m];
            }
            f(&lane, &mut olane);
            for ci in 0..c {
                dst[base + ci * m] = olane[ci];
            }
        }
    }
    out
}

/// Expectation of the axis-1 index under a normalized `(B, D, H, W)` volume.
pub(crate) fn val_soft_argmax1<F: Scalar>(p: &ArrayD<F>) -> ArrayD<F> {
    let sh = p.shape();
    let (b, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let m = h * w;
    let src = flat(p);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, h, w]));
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for mi in 0..m {
            let base = bi * d * m + mi;
            let mut acc = F::zero();
            for di in 0..d {
                acc += F::c(di as f64) * src[base + di * m];
            }
            dst[bi * m + mi] = acc;
        }
    }
    out
}

/// Linear interpolation along the disparity axis: `(B, k, H, W)` scores at
/// stride-`n` candidates expanded to `(B, d_max, H, W)`, clamped past the
/// last candidate.
pub(crate) fn val_disp_lerp<F: Scalar>(x: &ArrayD<F>, n: usize, d_max: usize) -> ArrayD<F> {
    let sh = x.shape();
    let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let m = h * w;
    let table: Vec<(usize, usize, f64)> = (0..d_max)
        .map(|d| {
            let pos = d as f64 / n as f64;
            let j0 = (pos.floor() as usize).min(k - 1);
            let j1 = (j0 + 1).min(k - 1);
            let t = if j0 == j1 { 0.0 } else { pos - j0 as f64 };
            (j0, j1, t)
        })
        .collect();
    let src = flat(x);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, d_max, h, w]));
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for (d, &(j0, j1, t)) in table.iter().enumerate() {
            let t = F::c(t);
            let one = F::one();
            for mi in 0..m {
                let v0 = src[(bi * k + j0) * m + mi];
                let v1 = src[(bi * k + j1) * m + mi];
                dst[(bi * d_max + d) * m + mi] = v0 * (one - t) + v1 * t;
            }
        }
    }
    out
}

/// Nearest-neighbor 3D upsampling to an explicit target shape; each axis is
/// either kept or doubled (then cropped), matching the encoder's halving.
pub(crate) fn val_upsample_nearest3d_to<F: Scalar>(x: &ArrayD<F>, target: [usize; 3]) -> ArrayD<F> {
    let sh = x.shape();
    let (b, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let [d2, h2, w2] = target;
    let fd = if d2 > d { 2 } else { 1 };
    let fh = if h2 > h { 2 } else { 1 };
    let fw = if w2 > w { 2 } else { 1 };
    assert!(d2 <= 2 * d && h2 <= 2 * h && w2 <= 2 * w, "target more than 2x source");
    let src = flat(x);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, d2, h2, w2]));
    let dst = out.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let sbase = bc * d * h * w;
        let dbase = bc * d2 * h2 * w2;
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = sbase + (z / fd) * h * w + (y / fh) * w;
                let drow = dbase + (z * h2 + y) * w2;
                for xx in 0..w2 {
                    dst[drow + xx] = src[srow + xx / fw];
                }
            }
        }
    }
    out
}

impl<F: Scalar> Tape<F> {
    fn next_idx(&self) -> usize {
        self.len()
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let va = self.value(a);
            let vb = self.value(b);
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            &*va + &*vb
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.clone());
            })),
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                accum(grads, ai, g.mapv(|v| v * c));
            })),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        let out = self.value(a).mapv(|v| if v < F::zero() { v * slope } else { v });
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[ai], |gi, &xi| {
                    if xi < F::zero() {
                        *gi *= slope;
                    }
                });
                accum(grads, ai, d);
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(a);
        let out = self
            .value_owned(a)
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let d = g.clone().into_shape_with_order(IxDyn(&in_shape)).unwrap();
                accum(grads, ai, d);
            })),
        )
    }

    /// Concatenation along axis 1.
    pub fn concat_ch(&self, a: Var, b: Var) -> Var {
        let out = {
            let va = self.value(a);
            let vb = self.value(b);
            // concatenate leaves the join axis outermost; restore C order
            concatenate(Axis(1), &[va.view(), vb.view()])
                .expect("concat shapes")
                .as_standard_layout()
                .to_owned()
        };
        let c1 = self.shape(a)[1];
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let ga = g.slice_axis(Axis(1), Slice::from(0..c1)).to_owned();
                let gb = g.slice_axis(Axis(1), Slice::from(c1..)).to_owned();
                accum(grads, ai, ga);
                accum(grads, bi, gb);
            })),
        )
    }

    /// Selects channel `i` along axis 1, dropping the axis.
    pub fn select_ch(&self, a: Var, i: usize) -> Var {
        let out = self.value(a).index_axis(Axis(1), i).to_owned();
        let in_shape = self.shape(a);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let mut d = ArrayD::<F>::zeros(IxDyn(&in_shape));
                d.index_axis_mut(Axis(1), i).assign(g);
                accum(grads, ai, d);
            })),
        )
    }

    pub fn bilinear_up2d(&self, a: Var, h2: usize, w2: usize) -> Var {
        let out = val_bilinear_up2d(&self.value(a), h2, w2);
        let sh = self.shape(a);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let ys = lerp_table(h, h2);
                let xs = lerp_table(w, w2);
                let mut d = ArrayD::<F>::zeros(IxDyn(&sh));
                let dd = d.as_slice_mut().unwrap();
                let gg = g.as_slice().expect("standard layout");
                for bi in 0..b {
                    for ki in 0..k {
                        let sbase = (bi * k + ki) * h * w;
                        let dbase = (bi * k + ki) * h2 * w2;
                        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                            let ty = F::c(ty);
                            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                                let tx = F::c(tx);
                                let one = F::one();
                                let gv = gg[dbase + oy * w2 + ox];
                                dd[sbase + y0 * w + x0] += gv * (one - ty) * (one - tx);
                                dd[sbase + y0 * w + x1] += gv * (one - ty) * tx;
                                dd[sbase + y1 * w + x0] += gv * ty * (one - tx);
                                dd[sbase + y1 * w + x1] += gv * ty * tx;
                            }
                        }
                    }
                }
                accum(grads, ai, d);
            })),
        )
    }

    pub fn interleave(&self, stages: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = stages.iter().map(|v| self.value(*v)).collect();
            let refs: Vec<&ArrayD<F>> = vals.iter().map(|r| &**r).collect();
            val_interleave(&refs)
        };
        let idxs: Vec<usize> = stages.iter().map(|v| v.0).collect();
        let n = idxs.len();
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let parts = val_deinterleave(g, n);
                for (i, p) in parts.into_iter().enumerate() {
                    accum(grads, idxs[i], p);
                }
            })),
        )
    }

    pub fn softmax1(&self, a: Var) -> Var {
        let out = val_softmax1(&self.value(a));
        let ai = a.0;
        let oi = self.next_idx();
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                // gx = p * (g - sum_c g*p), lanewise over axis 1
                let p = &vals[oi];
                let sh = p.shape();
                let b = sh[0];
                let c = sh[1];
                let m: usize = sh[2..].iter().product();
                let ps = p.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::<F>::zeros(IxDyn(sh));
                let ds = d.as_slice_mut().unwrap();
                for bi in 0..b {
                    for mi in 0..m {
                        let base = bi * c * m + mi;
                        let mut dot = F::zero();
                        for ci in 0..c {
                            let k = base + ci * m;
                            dot += gs[k] * ps[k];
                        }
                        for ci in 0..c {
                            let k = base + ci * m;
                            ds[k] = ps[k] * (gs[k] - dot);
                        }
                    }
                }
                accum(grads, ai, d);
            })),
        )
    }

    pub fn log_softmax1(&self, a: Var) -> Var {
        let out = val_log_softmax1(&self.value(a));
        let ai = a.0;
        let oi = self.next_idx();
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                // gx = g - exp(out) * sum_c g
                let o = &vals[oi];
                let sh = o.shape();
                let b = sh[0];
                let c = sh[1];
                let m: usize = sh[2..].iter().product();
                let os = o.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::<F>::zeros(IxDyn(sh));
                let ds = d.as_slice_mut().unwrap();
                for bi in 0..b {
                    for mi in 0..m {
                        let base = bi * c * m + mi;
                        let mut gsum = F::zero();
                        for ci in 0..c {
                            gsum += gs[base + ci * m];
                        }
                        for ci in 0..c {
                            let k = base + ci * m;
                            ds[k] = gs[k] - os[k].exp() * gsum;
                        }
                    }
                }
                accum(grads, ai, d);
            })),
        )
    }

    /// Disparity expectation over a normalized `(B, D, H, W)` volume.
    pub fn soft_argmax1(&self, a: Var) -> Var {
        let out = val_soft_argmax1(&self.value(a));
        let sh = self.shape(a);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let (b, dch, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let m = h * w;
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::<F>::zeros(IxDyn(&sh));
                let ds = d.as_slice_mut().unwrap();
                for bi in 0..b {
                    for di in 0..dch {
                        let c = F::c(di as f64);
                        let base = (bi * dch + di) * m;
                        for mi in 0..m {
                            ds[base + mi] = c * gs[bi * m + mi];
                        }
                    }
                }
                accum(grads, ai, d);
            })),
        )
    }

    pub fn disp_lerp(&self, a: Var, n: usize, d_max: usize) -> Var {
        let out = val_disp_lerp(&self.value(a), n, d_max);
        let sh = self.shape(a);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let m = h * w;
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::<F>::zeros(IxDyn(&sh));
                let ds = d.as_slice_mut().unwrap();
                for bi in 0..b {
                    for dd in 0..d_max {
                        let pos = dd as f64 / n as f64;
                        let j0 = (pos.floor() as usize).min(k - 1);
                        let j1 = (j0 + 1).min(k - 1);
                        let t = if j0 == j1 { 0.0 } else { pos - j0 as f64 };
                        let t = F::c(t);
                        let one = F::one();
                        let gbase = (bi * d_max + dd) * m;
                        for mi in 0..m {
                            let gv = gs[gbase + mi];
                            let k0 = (bi * k + j0) * m + mi;
                            let k1 = (bi * k + j1) * m + mi;
                            ds[k0] += gv * (one - t);
                            ds[k1] += gv * t;
                        }
                    }
                }
                accum(grads, ai, d);
            })),
        )
    }

    pub fn upsample_nearest3d_to(&self, a: Var, target: [usize; 3]) -> Var {
        let out = val_upsample_nearest3d_to(&self.value(a), target);
        let sh = self.shape(a);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let (b, c, dz, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
                let [d2, h2, w2] = target;
                let fd = if d2 > dz { 2 } else { 1 };
                let fh = if h2 > h { 2 } else { 1 };
                let fw = if w2 > w { 2 } else { 1 };
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::<F>::zeros(IxDyn(&sh));
                let ds = d.as_slice_mut().unwrap();
                for bc in 0..b * c {
                    let sbase = bc * dz * h * w;
                    let dbase = bc * d2 * h2 * w2;
                    for z in 0..d2 {
                        for y in 0..h2 {
                            let srow = sbase + (z / fd) * h * w + (y / fh) * w;
                            let drow = dbase + (z * h2 + y) * w2;
                            for xx in 0..w2 {
                                ds[srow + xx / fw] += gs[drow + xx];
                            }
                        }
                    }
                }
                accum(grads, ai, d);
            })),
        )
    }

    /// Scalar product with a constant tensor, reduced to a 0-d scalar.
    pub fn dot_const(&self, a: Var, weights: ArrayD<F>) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.shape(), weights.shape(), "dot_const shape mismatch");
            let mut acc = F::zero();
            for (x, w) in va.iter().zip(weights.iter()) {
                acc += *x * *w;
            }
            ndarray::arr0(acc).into_dyn()
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let gv = g[[]];
                accum(grads, ai, weights.mapv(|w| w * gv));
            })),
        )
    }

    /// Weighted mean absolute deviation from a constant target:
    /// `sum(weights * |a - target|)`. Weights fold in the mask and the
    /// 1/|valid| normalization.
    pub fn masked_l1(&self, a: Var, target: ArrayD<F>, weights: ArrayD<F>) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.shape(), target.shape());
            assert_eq!(va.shape(), weights.shape());
            let mut acc = F::zero();
            for ((x, t), w) in va.iter().zip(target.iter()).zip(weights.iter()) {
                acc += *w * (*x - *t).abs();
            }
            ndarray::arr0(acc).into_dyn()
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let gv = g[[]];
                let va = &vals[ai];
                let mut d = ArrayD::<F>::zeros(va.raw_dim());
                for ((di, (x, t)), w) in
                    d.iter_mut().zip(va.iter().zip(target.iter())).zip(weights.iter())
                {
                    let diff = *x - *t;
                    let s = if diff > F::zero() {
                        F::one()
                    } else if diff < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    *di = gv * *w * s;
                }
                accum(grads, ai, d);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::fdiff;
    use super::*;
    use ndarray::ArrayD;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        fdiff::rand_array(shape, seed)
    }

    fn scalarize(tape: &Tape<f64>, v: Var, seed: u64) -> Var {
        let w = rand_arr(&tape.shape(v), seed ^ 0x5eed);
        tape.dot_const(v, w)
    }

    #[test]
    fn add_scale_lrelu_grads() {
        let a = rand_arr(&[2, 3, 4], 1);
        let b = rand_arr(&[2, 3, 4], 2);
        let err = fdiff::check_grads(&[a, b], 1e-5, 1e-6, |t, vs| {
            let s = t.add(vs[0], vs[1]);
            let s = t.scale(s, 1.7);
            let s = t.leaky_relu(s, 0.1);
            scalarize(t, s, 3)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn reshape_concat_select_grads() {
        let a = rand_arr(&[2, 2, 3, 2, 2], 3);
        let b = rand_arr(&[2, 3, 3, 2, 2], 4);
        let err = fdiff::check_grads(&[a, b], 1e-5, 1e-6, |t, vs| {
            let c = t.concat_ch(vs[0], vs[1]);
            let s = t.select_ch(c, 4);
            let r = t.reshape(s, &[2, 12]);
            scalarize(t, r, 5)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn softmax_value_and_grad() {
        let x = rand_arr(&[1, 5, 2, 2], 7);
        let p = val_softmax1(&x);
        for mi in 0..4 {
            let (y, xx) = (mi / 2, mi % 2);
            let s: f64 = (0..5).map(|c| p[[0, c, y, xx]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let err = fdiff::check_grads(&[x], 1e-5, 1e-6, |t, vs| {
            let p = t.softmax1(vs[0]);
            scalarize(t, p, 8)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn log_softmax_grad() {
        let x = rand_arr(&[2, 4, 3], 9);
        let err = fdiff::check_grads(&[x], 1e-5, 1e-6, |t, vs| {
            let p = t.log_softmax1(vs[0]);
            scalarize(t, p, 10)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn soft_argmax_expectation() {
        let tape: Tape<f64> = Tape::new();
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[1, 8, 1, 1]));
        p.fill(1.0 / 8.0);
        let v = tape.input(p);
        let d = tape.soft_argmax1(v);
        assert!((tape.value_owned(d)[[0, 0, 0]] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_grad_through_softmax() {
        let x = rand_arr(&[1, 6, 2, 3], 11);
        let err = fdiff::check_grads(&[x], 1e-5, 1e-6, |t, vs| {
            let p = t.softmax1(vs[0]);
            let d = t.soft_argmax1(p);
            scalarize(t, d, 12)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn bilinear_upsample_grad() {
        let x = rand_arr(&[1, 2, 3, 4], 13);
        let err = fdiff::check_grads(&[x], 1e-5, 1e-6, |t, vs| {
            let u = t.bilinear_up2d(vs[0], 6, 8);
            scalarize(t, u, 14)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn interleave_round_trip_and_grad() {
        let a = rand_arr(&[2, 3, 2, 2], 15);
        let b = rand_arr(&[2, 3, 2, 2], 16);
        let full = val_interleave(&[&a, &b]);
        let parts = val_deinterleave(&full, 2);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let err = fdiff::check_grads(&[a, b], 1e-5, 1e-6, |t, vs| {
            let f = t.interleave(&[vs[0], vs[1]]);
            scalarize(t, f, 17)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn disp_lerp_grad() {
        let x = rand_arr(&[1, 3, 2, 2], 18);
        let err = fdiff::check_grads(&[x], 1e-5, 1e-6, |t, vs| {
            let f = t.disp_lerp(vs[0], 2, 6);
            scalarize(t, f, 19)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn nearest_upsample_grad() {
        let x = rand_arr(&[1, 2, 2, 3, 2], 20);
        let err = fdiff::check_grads(&[x], 1e-5, 1e-6, |t, vs| {
            let u = t.upsample_nearest3d_to(vs[0], [3, 6, 4]);
            scalarize(t, u, 21)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn masked_l1_matches_manual() {
        let x = rand_arr(&[1, 2, 2], 22);
        let tgt = rand_arr(&[1, 2, 2], 23);
        let mut w = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2]));
        w[[0, 0, 0]] = 0.5;
        w[[0, 1, 1]] = 0.5;
        let tape: Tape<f64> = Tape::new();
        let v = tape.input(x.clone());
        let l = tape.masked_l1(v, tgt.clone(), w.clone());
        let want = 0.5 * (x[[0, 0, 0]] - tgt[[0, 0, 0]]).abs()
            + 0.5 * (x[[0, 1, 1]] - tgt[[0, 1, 1]]).abs();
        assert!((tape.value_owned(l)[[]] - want).abs() < 1e-12);
        let err = fdiff::check_grads(&[x], 1e-6, 1e-5, |t, vs| {
            t.masked_l1(vs[0], tgt.clone(), w.clone())
        });
        assert!(err < 1e-5, "max rel err {err}");
    }
}
