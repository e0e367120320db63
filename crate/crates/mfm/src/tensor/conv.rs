//! 3D convolution via im2col + matrix multiply.
//!
//! 2D convolutions reuse this path with a singleton leading kernel axis.
//! The column matrix is rebuilt in the backward closure instead of being
//! cached, trading a little compute for a much smaller live set.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix5, IxDyn};

use super::{accum, Scalar, Tape, Var};

/// Kernel geometry of one 3D convolution: per-axis kernel/stride/padding
/// over the (depth, height, width) axes of a `(B, C, D, H, W)` tensor.
#[derive(Debug, Clone, Copy)]
pub struct Conv3dSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv3dSpec { kernel: [kernel; 3], stride: [1; 3], pad: [kernel / 2; 3] }
    }

    pub fn down2(kernel: usize) -> Self {
        Conv3dSpec { kernel: [kernel; 3], stride: [2; 3], pad: [kernel / 2; 3] }
    }
}

/// Output spatial dims for an input of `in_dims`.
pub fn conv3d_shape(in_dims: [usize; 3], spec: &Conv3dSpec) -> [usize; 3] {
    std::array::from_fn(|i| {
        let padded = in_dims[i] + 2 * spec.pad[i];
        assert!(padded >= spec.kernel[i], "kernel larger than padded input");
        (padded - spec.kernel[i]) / spec.stride[i] + 1
    })
}

fn im2col<F: Scalar>(x: &ArrayD<F>, spec: &Conv3dSpec) -> Array2<F> {
    let sh = x.shape();
    let (b, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let [kd, kh, kw] = spec.kernel;
    let [sd, sy, sx] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = conv3d_shape([d, h, w], spec);
    let k_rows = c * kd * kh * kw;
    let n_cols = b * od * oh * ow;
    let mut col = Array2::<F>::zeros((k_rows, n_cols));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sy + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_base =
                                    (((bi * c + ci) * d + iz as usize) * h + iy as usize) * w;
                                let col_base = row * n_cols + ((bi * od + oz) * oh + oy) * ow;
                                if sx == 1 {
                                    let off = kx as isize - pw as isize;
                                    let ox_min = (-off).max(0) as usize;
                                    let ox_max =
                                        (w as isize - off).clamp(0, ow as isize) as usize;
                                    if ox_min < ox_max {
                                        let src0 = (x_base as isize + ox_min as isize + off)
                                            as usize;
                                        cs[col_base + ox_min..col_base + ox_max].copy_from_slice(
                                            &xs[src0..src0 + (ox_max - ox_min)],
                                        );
                                    }
                                } else {
                                    for ox in 0..ow {
                                        let ix = (ox * sx + kx) as isize - pw as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        cs[col_base + ox] = xs[x_base + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(gcol: &Array2<F>, xshape: &[usize], spec: &Conv3dSpec) -> ArrayD<F> {
    let (b, c, d, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3], xshape[4]);
    let [kd, kh, kw] = spec.kernel;
    let [sd, sy, sx] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = conv3d_shape([d, h, w], spec);
    let n_cols = b * od * oh * ow;
    let mut gx = ArrayD::<F>::zeros(IxDyn(xshape));
    let gs = gx.as_slice_mut().unwrap();
    let cs = gcol.as_slice().expect("standard layout");
    for bi in 0..b {
        for ci in 0..c {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sy + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_base =
                                    (((bi * c + ci) * d + iz as usize) * h + iy as usize) * w;
                                let col_base = row * n_cols + ((bi * od + oz) * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ix = (ox * sx + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = x_base + ix as usize;
                                    gs[xi] += cs[col_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Plain (non-tape) convolution forward.
pub(crate) fn conv3d_val<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    b: &ArrayD<F>,
    spec: &Conv3dSpec,
) -> ArrayD<F> {
    let xsh = x.shape();
    let wsh = w.shape();
    assert_eq!(xsh.len(), 5, "conv3d input must be (B,C,D,H,W)");
    assert_eq!(wsh.len(), 5, "conv3d weight must be (Co,Ci,kd,kh,kw)");
    assert_eq!(xsh[1], wsh[1], "channel mismatch");
    assert_eq!([wsh[2], wsh[3], wsh[4]], spec.kernel, "weight/spec kernel mismatch");
    let (bsz, co) = (xsh[0], wsh[0]);
    let [od, oh, ow] = conv3d_shape([xsh[2], xsh[3], xsh[4]], spec);
    let k_rows: usize = wsh[1] * wsh[2] * wsh[3] * wsh[4];

    let col = im2col(x, spec);
    let wm = w.view().into_shape_with_order((co, k_rows)).unwrap();
    let mut om = wm.dot(&col);
    for (mut row, bv) in om.axis_iter_mut(Axis(0)).zip(b.iter()) {
        let bv = *bv;
        row.mapv_inplace(|v| v + bv);
    }
    let om5 = om.into_shape_with_order((co, bsz, od, oh, ow)).unwrap();
    om5.permuted_axes([1, 0, 2, 3, 4]).as_standard_layout().to_owned().into_dyn()
}

fn conv3d_back<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    g: &ArrayD<F>,
    spec: &Conv3dSpec,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let xsh = x.shape().to_vec();
    let wsh = w.shape().to_vec();
    let co = wsh[0];
    let k_rows: usize = wsh[1] * wsh[2] * wsh[3] * wsh[4];
    let g5 = g.view().into_dimensionality::<Ix5>().unwrap();
    let n_cols = g5.len() / co;
    let gm = g5
        .permuted_axes([1, 0, 2, 3, 4])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((co, n_cols))
        .unwrap();
    let col = im2col(x, spec);
    let gw = gm.dot(&col.t()).into_shape_with_order(IxDyn(&wsh)).unwrap();
    let gb: Array1<F> = gm.sum_axis(Axis(1));
    let wm = w.view().into_shape_with_order((co, k_rows)).unwrap();
    let gcol: Array2<F> = wm.t().dot(&gm).into_dimensionality::<Ix2>().unwrap();
    let gx = col2im(&gcol, &xsh, spec);
    (gx, gw, gb.into_dyn())
}

impl<F: Scalar> Tape<F> {
    /// 3D convolution with bias. `x: (B, Ci, D, H, W)`, `w: (Co, Ci, kd, kh, kw)`,
    /// `b: (Co)`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Var {
        let out = {
            let vx = self.value(x);
            let vw = self.value(w);
            let vb = self.value(b);
            conv3d_val(&vx, &vw, &vb, &spec)
        };
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let (gx, gw, gb) = conv3d_back(&vals[xi], &vals[wi], g, &spec);
                accum(grads, xi, gx);
                accum(grads, wi, gw);
                accum(grads, bi, gb);
            })),
        )
    }
}
