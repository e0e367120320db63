//! Correlation volume kernels: group-wise correlation and feature
//! concatenation across disparity levels.
//!
//! Level `j` pairs reference position `x` with source position `x - j`;
//! positions with `x < j` have no source sample and are zero-filled.

use ndarray::{ArrayD, IxDyn};

use super::{accum, Scalar, Tape, Var};

/// Group-wise correlation: `(B, C, h, w)` feature pairs to
/// `(B, groups, k, h, w)` with the per-group mean of channel products.
pub(crate) fn val_gwc_corr<F: Scalar>(
    fl: &ArrayD<F>,
    fr: &ArrayD<F>,
    groups: usize,
    k: usize,
) -> ArrayD<F> {
    let sh = fl.shape();
    assert_eq!(fl.shape(), fr.shape(), "feature shape mismatch");
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert_eq!(c % groups, 0, "groups must divide channels");
    let cpg = c / groups;
    let scale = F::c(1.0 / cpg as f64);
    let l = fl.as_slice().expect("standard layout");
    let r = fr.as_slice().expect("standard layout");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, groups, k, h, w]));
    let o = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for g in 0..groups {
            for j in 0..k {
                for y in 0..h {
                    let obase = ((((bi * groups + g) * k + j) * h) + y) * w;
                    for x in j..w {
                        let mut acc = F::zero();
                        for ci in g * cpg..(g + 1) * cpg {
                            let fbase = ((bi * c + ci) * h + y) * w;
                            acc += l[fbase + x] * r[fbase + x - j];
                        }
                        o[obase + x] = acc * scale;
                    }
                }
            }
        }
    }
    out
}

/// Concatenation volume from compressed features: `(B, Cc, h, w)` pairs to
/// `(B, 2*Cc, k, h, w)`. The first half carries the reference feature at
/// every level; the second half carries the shifted source feature, zero
/// where out of range.
pub(crate) fn val_cat_corr<F: Scalar>(flc: &ArrayD<F>, frc: &ArrayD<F>, k: usize) -> ArrayD<F> {
    let sh = flc.shape();
    assert_eq!(flc.shape(), frc.shape(), "feature shape mismatch");
    let (b, cc, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let l = flc.as_slice().expect("standard layout");
    let r = frc.as_slice().expect("standard layout");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, 2 * cc, k, h, w]));
    let o = out.as_slice_mut().unwrap();
    let khw = k * h * w;
    for bi in 0..b {
        for ci in 0..cc {
            let fbase = (bi * cc + ci) * h * w;
            let lbase = (bi * 2 * cc + ci) * khw;
            let rbase = (bi * 2 * cc + cc + ci) * khw;
            for j in 0..k {
                for y in 0..h {
                    let orow_l = lbase + (j * h + y) * w;
                    let orow_r = rbase + (j * h + y) * w;
                    let frow = fbase + y * w;
                    o[orow_l..orow_l + w].copy_from_slice(&l[frow..frow + w]);
                    for x in j..w {
                        o[orow_r + x] = r[frow + x - j];
                    }
                }
            }
        }
    }
    out
}

impl<F: Scalar> Tape<F> {
    pub fn gwc_corr(&self, fl: Var, fr: Var, groups: usize, k: usize) -> Var {
        let out = val_gwc_corr(&self.value(fl), &self.value(fr), groups, k);
        let sh = self.shape(fl);
        let (li, ri) = (fl.0, fr.0);
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let cpg = c / groups;
                let scale = F::c(1.0 / cpg as f64);
                let l = vals[li].as_slice().unwrap();
                let r = vals[ri].as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let k = g.shape()[2];
                let mut gl = ArrayD::<F>::zeros(IxDyn(&sh));
                let mut gr = ArrayD::<F>::zeros(IxDyn(&sh));
                let gls = gl.as_slice_mut().unwrap();
                let grs = gr.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let grp = ci / cpg;
                        for y in 0..h {
                            let fbase = ((bi * c + ci) * h + y) * w;
                            for j in 0..k {
                                let obase = ((((bi * groups + grp) * k + j) * h) + y) * w;
                                for x in j..w {
                                    let gv = gs[obase + x] * scale;
                                    gls[fbase + x] += gv * r[fbase + x - j];
                                    grs[fbase + x - j] += gv * l[fbase + x];
                                }
                            }
                        }
                    }
                }
                accum(grads, li, gl);
                accum(grads, ri, gr);
            })),
        )
    }

    pub fn cat_corr(&self, flc: Var, frc: Var, k: usize) -> Var {
        let out = val_cat_corr(&self.value(flc), &self.value(frc), k);
        let sh = self.shape(flc);
        let (li, ri) = (flc.0, frc.0);
        self.push(
            out,
            Some(Box::new(move |_, g, grads| {
                let (b, cc, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let gs = g.as_slice().unwrap();
                let k = g.shape()[2];
                let khw = k * h * w;
                let mut gl = ArrayD::<F>::zeros(IxDyn(&sh));
                let mut gr = ArrayD::<F>::zeros(IxDyn(&sh));
                let gls = gl.as_slice_mut().unwrap();
                let grs = gr.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..cc {
                        let fbase = (bi * cc + ci) * h * w;
                        let lbase = (bi * 2 * cc + ci) * khw;
                        let rbase = (bi * 2 * cc + cc + ci) * khw;
                        for j in 0..k {
                            for y in 0..h {
                                let orow_l = lbase + (j * h + y) * w;
                                let orow_r = rbase + (j * h + y) * w;
                                let frow = fbase + y * w;
                                for x in 0..w {
                                    gls[frow + x] += gs[orow_l + x];
                                }
                                for x in j..w {
                                    grs[frow + x - j] += gs[orow_r + x];
                                }
                            }
                        }
                    }
                }
                accum(grads, li, gl);
                accum(grads, ri, gr);
            })),
        )
    }
}
