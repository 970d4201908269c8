//! Forward and backward kernels for the graph operations.
//!
//! Convolutions are lowered to GEMM through an im2col buffer built per
//! (batch item, depth chunk) task. Tasks run on rayon and their partial
//! results are reduced in task order, so outputs do not depend on the
//! thread schedule.

use rayon::prelude::*;

use crate::tensor::{Real, Shape, Tensor};

/// Target number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 20;

/// Cubic convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_dim(&self, input: usize) -> usize {
        assert!(
            input + 2 * self.padding >= self.kernel,
            "input extent {input} smaller than kernel {}",
            self.kernel
        );
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        [self.out_dim(s[0]), self.out_dim(s[1]), self.out_dim(s[2])]
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    cout: usize,
    i: [usize; 3],
    o: [usize; 3],
    g: ConvGeometry,
}

impl ConvDims {
    fn k_rows(&self) -> usize {
        self.cin * self.g.kernel.pow(3)
    }

    fn in_len(&self) -> usize {
        self.i[0] * self.i[1] * self.i[2]
    }

    fn out_len(&self) -> usize {
        self.o[0] * self.o[1] * self.o[2]
    }

    fn plane(&self) -> usize {
        self.o[1] * self.o[2]
    }

    /// Output depth ranges processed by one task each.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per = (COLS_BUDGET / (self.k_rows() * self.plane()).max(1)).max(1);
        (0..self.o[0])
            .step_by(per)
            .map(|d0| (d0, (d0 + per).min(self.o[0])))
            .collect()
    }

    /// Input depth range touched by output depths `[od0, od1)`.
    fn in_depth_range(&self, od0: usize, od1: usize) -> (usize, usize) {
        let lo = (od0 * self.g.stride).saturating_sub(self.g.padding);
        let hi = ((od1 - 1) * self.g.stride + self.g.kernel)
            .saturating_sub(self.g.padding)
            .min(self.i[0]);
        (lo, hi.max(lo))
    }
}

/// Output columns `[lo, hi)` whose input index `ow * s + kw - p` lies inside `[0, iw)`.
fn valid_range(ow: usize, iw: usize, s: usize, kw: usize, p: usize) -> (usize, usize) {
    let lo = if kw >= p { 0 } else { (p - kw).div_ceil(s) };
    // largest ow with ow * s + kw - p <= iw - 1
    let hi = if iw + p > kw {
        ((iw + p - kw - 1) / s + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Fills `cols` (`k_rows x P`) for output depths `[od0, od1)` of one item.
fn im2col<T: Real>(x: &[T], dims: &ConvDims, od0: usize, od1: usize, cols: &mut [T]) {
    let ConvGeometry {
        kernel: k,
        stride: s,
        padding: p,
    } = dims.g;
    let [id_, ih_, iw_] = dims.i;
    let [_, oh_, ow_] = dims.o;
    let p_len = (od1 - od0) * oh_ * ow_;
    let in_len = dims.in_len();
    let mut row = 0;
    for ci in 0..dims.cin {
        let xc = &x[ci * in_len..(ci + 1) * in_len];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * p_len..(row + 1) * p_len];
                    let mut col = 0;
                    for od in od0..od1 {
                        let id = (od * s + kd) as isize - p as isize;
                        if id < 0 || id >= id_ as isize {
                            dst[col..col + oh_ * ow_].fill(T::ZERO);
                            col += oh_ * ow_;
                            continue;
                        }
                        for oh in 0..oh_ {
                            let ih = (oh * s + kh) as isize - p as isize;
                            let seg = &mut dst[col..col + ow_];
                            col += ow_;
                            if ih < 0 || ih >= ih_ as isize {
                                seg.fill(T::ZERO);
                                continue;
                            }
                            let base = (id as usize * ih_ + ih as usize) * iw_;
                            let (lo, hi) = valid_range(ow_, iw_, s, kw, p);
                            seg[..lo].fill(T::ZERO);
                            seg[hi..].fill(T::ZERO);
                            if s == 1 {
                                let start = base + lo + kw - p;
                                seg[lo..hi].copy_from_slice(&xc[start..start + hi - lo]);
                            } else {
                                for (ow, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                    *v = xc[base + ow * s + kw - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` into a depth slab of the input gradient starting at
/// input depth `slab_d0`.
fn col2im<T: Real>(
    cols: &[T],
    dims: &ConvDims,
    od0: usize,
    od1: usize,
    slab_d0: usize,
    slab_d1: usize,
    slab: &mut [T],
) {
    let ConvGeometry {
        kernel: k,
        stride: s,
        padding: p,
    } = dims.g;
    let [_, ih_, iw_] = dims.i;
    let [_, oh_, ow_] = dims.o;
    let p_len = (od1 - od0) * oh_ * ow_;
    let slab_depth = slab_d1 - slab_d0;
    let slab_len = slab_depth * ih_ * iw_;
    let mut row = 0;
    for ci in 0..dims.cin {
        let sc = &mut slab[ci * slab_len..(ci + 1) * slab_len];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * p_len..(row + 1) * p_len];
                    row += 1;
                    let mut col = 0;
                    for od in od0..od1 {
                        let id = (od * s + kd) as isize - p as isize;
                        if id < slab_d0 as isize || id >= slab_d1 as isize {
                            col += oh_ * ow_;
                            continue;
                        }
                        let zd = id as usize - slab_d0;
                        for oh in 0..oh_ {
                            let ih = (oh * s + kh) as isize - p as isize;
                            let seg = &src[col..col + ow_];
                            col += ow_;
                            if ih < 0 || ih >= ih_ as isize {
                                continue;
                            }
                            let base = (zd * ih_ + ih as usize) * iw_;
                            let (lo, hi) = valid_range(ow_, iw_, s, kw, p);
                            if s == 1 {
                                let start = base + lo + kw - p;
                                for (a, &v) in
                                    sc[start..start + hi - lo].iter_mut().zip(&seg[lo..hi])
                                {
                                    *a += v;
                                }
                            } else {
                                for (ow, &v) in seg.iter().enumerate().take(hi).skip(lo) {
                                    sc[base + ow * s + kw - p] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeometry) -> ConvDims {
    let ws = w.shape().0;
    assert_eq!(ws[2], g.kernel, "weight kernel does not match geometry");
    assert_eq!(
        ws[1],
        x.shape().channels(),
        "convolution expects {} input channels, got {}",
        ws[1],
        x.shape().channels()
    );
    ConvDims {
        cin: ws[1],
        cout: ws[0],
        i: x.shape().spatial(),
        o: g.out_spatial(x.shape().spatial()),
        g,
    }
}

/// `x: [N, Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`, `b: [1, Cout, 1, 1, 1]`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: ConvGeometry,
) -> Tensor<T> {
    let dims = conv_dims(x, w, g);
    let n = x.shape().batch();
    let out_shape = Shape::new(n, dims.cout, dims.o[0], dims.o[1], dims.o[2]);
    let chunks = dims.chunks();
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|ni| chunks.iter().map(move |&(a, b)| (ni, a, b)))
        .collect();
    let kr = dims.k_rows();
    let parts: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(ni, od0, od1)| {
            let p_len = (od1 - od0) * dims.plane();
            let mut cols = vec![T::ZERO; kr * p_len];
            im2col(x.item(ni), &dims, od0, od1, &mut cols);
            let mut out = vec![T::ZERO; dims.cout * p_len];
            unsafe {
                T::gemm(
                    dims.cout,
                    kr,
                    p_len,
                    T::ONE,
                    w.data().as_ptr(),
                    kr as isize,
                    1,
                    cols.as_ptr(),
                    p_len as isize,
                    1,
                    T::ZERO,
                    out.as_mut_ptr(),
                    p_len as isize,
                    1,
                );
            }
            out
        })
        .collect();
    let mut out = Tensor::zeros(out_shape);
    let out_len = dims.out_len();
    for (&(ni, od0, od1), part) in tasks.iter().zip(parts) {
        let p_len = (od1 - od0) * dims.plane();
        let item = out.item_mut(ni);
        for co in 0..dims.cout {
            let bias = b.data()[co];
            let dst = &mut item[co * out_len + od0 * dims.plane()..][..p_len];
            for (d, &s) in dst.iter_mut().zip(&part[co * p_len..(co + 1) * p_len]) {
                *d = s + bias;
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeometry,
    gout: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let dims = conv_dims(x, w, g);
    let n = x.shape().batch();
    let kr = dims.k_rows();
    let out_len = dims.out_len();
    let in_len = dims.in_len();
    let chunks = dims.chunks();
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|ni| chunks.iter().map(move |&(a, b)| (ni, a, b)))
        .collect();

    struct Part<T> {
        dw: Option<Vec<T>>,
        dx: Option<(usize, usize, Vec<T>)>,
    }

    let parts: Vec<Part<T>> = tasks
        .par_iter()
        .map(|&(ni, od0, od1)| {
            let p_len = (od1 - od0) * dims.plane();
            let gptr = gout.item(ni)[od0 * dims.plane()..].as_ptr();
            let dw = need_dw.then(|| {
                let mut cols = vec![T::ZERO; kr * p_len];
                im2col(x.item(ni), &dims, od0, od1, &mut cols);
                let mut dw = vec![T::ZERO; dims.cout * kr];
                unsafe {
                    T::gemm(
                        dims.cout,
                        p_len,
                        kr,
                        T::ONE,
                        gptr,
                        out_len as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        p_len as isize,
                        T::ZERO,
                        dw.as_mut_ptr(),
                        kr as isize,
                        1,
                    );
                }
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::ZERO; kr * p_len];
                unsafe {
                    T::gemm(
                        kr,
                        dims.cout,
                        p_len,
                        T::ONE,
                        w.data().as_ptr(),
                        1,
                        kr as isize,
                        gptr,
                        out_len as isize,
                        1,
                        T::ZERO,
                        dcols.as_mut_ptr(),
                        p_len as isize,
                        1,
                    );
                }
                let (d0, d1) = dims.in_depth_range(od0, od1);
                let mut slab = vec![T::ZERO; dims.cin * (d1 - d0) * dims.i[1] * dims.i[2]];
                col2im(&dcols, &dims, od0, od1, d0, d1, &mut slab);
                (d0, d1, slab)
            });
            Part { dw, dx }
        })
        .collect();

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    for (&(ni, _, _), part) in tasks.iter().zip(parts) {
        if let (Some(acc), Some(p)) = (dw.as_mut(), part.dw) {
            for (a, v) in acc.data_mut().iter_mut().zip(p) {
                *a += v;
            }
        }
        if let (Some(acc), Some((d0, d1, slab))) = (dx.as_mut(), part.dx) {
            let plane = dims.i[1] * dims.i[2];
            let slab_len = (d1 - d0) * plane;
            let item = acc.item_mut(ni);
            for ci in 0..dims.cin {
                let dst = &mut item[ci * in_len + d0 * plane..][..slab_len];
                for (a, &v) in dst
                    .iter_mut()
                    .zip(&slab[ci * slab_len..(ci + 1) * slab_len])
                {
                    *a += v;
                }
            }
        }
    }
    let db = need_dw.then(|| channel_sums(gout));
    ConvGrads { dx, dw, db }
}

/// Per-channel sums over batch and space, shaped `[1, C, 1, 1, 1]`.
pub fn channel_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = t.shape().0;
    let mut out = Tensor::zeros(Shape::new(1, c, 1, 1, 1));
    for ni in 0..n {
        for ci in 0..c {
            out.data_mut()[ci] += t.channel(ni, ci).iter().copied().sum::<T>();
        }
    }
    out
}

/// Transposed convolution with kernel 2 and stride 2.
///
/// `x: [N, Cin, D, H, W]`, `w: [Cin, Cout, 2, 2, 2]`, output `[N, Cout, 2D, 2H, 2W]`.
pub fn conv_transpose2_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, cin, d, h, wd] = x.shape().0;
    let ws = w.shape().0;
    assert_eq!(
        ws[0], cin,
        "transposed convolution expects {} input channels, got {cin}",
        ws[0]
    );
    assert_eq!(&ws[2..], &[2, 2, 2]);
    let cout = ws[1];
    let p = d * h * wd;
    let rows = cout * 8;
    let out_shape = Shape::new(n, cout, 2 * d, 2 * h, 2 * wd);
    let parts: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut y = vec![T::ZERO; rows * p];
            unsafe {
                T::gemm(
                    rows,
                    cin,
                    p,
                    T::ONE,
                    w.data().as_ptr(),
                    1,
                    rows as isize,
                    x.item(ni).as_ptr(),
                    p as isize,
                    1,
                    T::ZERO,
                    y.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            y
        })
        .collect();
    let mut out = Tensor::zeros(out_shape);
    let (oh, ow) = (2 * h, 2 * wd);
    let out_len = 8 * p;
    for (ni, y) in parts.into_iter().enumerate() {
        let item = out.item_mut(ni);
        for co in 0..cout {
            let bias = b.data()[co];
            let oc = &mut item[co * out_len..(co + 1) * out_len];
            for tap in 0..8 {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let src = &y[(co * 8 + tap) * p..(co * 8 + tap + 1) * p];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                        let s = &src[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                        for (xx, &v) in s.iter().enumerate() {
                            oc[row + 2 * xx] = v + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let [n, cin, d, h, wd] = x.shape().0;
    let cout = w.shape().0[1];
    let p = d * h * wd;
    let rows = cout * 8;
    let (oh, ow) = (2 * h, 2 * wd);
    let out_len = 8 * p;
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let gi = gout.item(ni);
            let mut gm = vec![T::ZERO; rows * p];
            for co in 0..cout {
                let gc = &gi[co * out_len..(co + 1) * out_len];
                for tap in 0..8 {
                    let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                    let dst = &mut gm[(co * 8 + tap) * p..(co * 8 + tap + 1) * p];
                    for z in 0..d {
                        for yy in 0..h {
                            let row = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                            let s = &mut dst[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                            for (xx, v) in s.iter_mut().enumerate() {
                                *v = gc[row + 2 * xx];
                            }
                        }
                    }
                }
            }
            let dx = need_dx.then(|| {
                let mut dx = vec![T::ZERO; cin * p];
                unsafe {
                    T::gemm(
                        cin,
                        rows,
                        p,
                        T::ONE,
                        w.data().as_ptr(),
                        rows as isize,
                        1,
                        gm.as_ptr(),
                        p as isize,
                        1,
                        T::ZERO,
                        dx.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                dx
            });
            let dw = need_dw.then(|| {
                let mut dw = vec![T::ZERO; cin * rows];
                unsafe {
                    T::gemm(
                        cin,
                        p,
                        rows,
                        T::ONE,
                        x.item(ni).as_ptr(),
                        p as isize,
                        1,
                        gm.as_ptr(),
                        1,
                        p as isize,
                        T::ZERO,
                        dw.as_mut_ptr(),
                        rows as isize,
                        1,
                    );
                }
                dw
            });
            (dx, dw)
        })
        .collect();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    for (ni, (pdx, pdw)) in parts.into_iter().enumerate() {
        if let (Some(acc), Some(v)) = (dx.as_mut(), pdx) {
            acc.item_mut(ni).copy_from_slice(&v);
        }
        if let (Some(acc), Some(v)) = (dw.as_mut(), pdw) {
            for (a, b) in acc.data_mut().iter_mut().zip(v) {
                *a += b;
            }
        }
    }
    let db = need_dw.then(|| channel_sums(gout));
    ConvGrads { dx, dw, db }
}

/// Instance normalization statistics and output.
pub fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, ..] = x.shape().0;
    let s = x.shape().spatial_len();
    let inv_n = T::ONE / T::from_f64(s as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_stds = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.channel(ni, ci);
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv_std = T::ONE / (var + eps).sqrt();
            inv_stds.push(inv_std);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let xh = xhat.channel_mut(ni, ci);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mean) * inv_std;
            }
            let xh = xhat.channel(ni, ci).to_vec();
            for (o, v) in y.channel_mut(ni, ci).iter_mut().zip(xh) {
                *o = g * v + b;
            }
        }
    }
    (y, xhat, inv_stds)
}

pub fn instance_norm_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    gout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, ..] = xhat.shape().0;
    let s = T::from_f64(xhat.shape().spatial_len() as f64);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(xhat.shape()));
    for ni in 0..n {
        for ci in 0..c {
            let xh = xhat.channel(ni, ci);
            let g = gout.channel(ni, ci);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma.data_mut()[ci] += sum_gx;
            dbeta.data_mut()[ci] += sum_g;
            if let Some(dx) = dx.as_mut() {
                let k = gamma.data()[ci] * inv_std[ni * c + ci] / s;
                for ((o, &gv), &xv) in dx.channel_mut(ni, ci).iter_mut().zip(g).zip(xh) {
                    *o = k * (s * gv - sum_g - xv * sum_gx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax across the channel axis at every voxel.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = x.shape().0;
    let s = x.shape().spatial_len();
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        let xi = x.item(ni);
        let oi = out.item_mut(ni);
        for v in 0..s {
            let mut m = xi[v];
            for ci in 1..c {
                m = m.max(xi[ci * s + v]);
            }
            let mut total = T::ZERO;
            for ci in 0..c {
                let e = (xi[ci * s + v] - m).exp();
                oi[ci * s + v] = e;
                total += e;
            }
            let inv = T::ONE / total;
            for ci in 0..c {
                oi[ci * s + v] *= inv;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(a: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = a.shape().0;
    let s = a.shape().spatial_len();
    let mut dx = Tensor::zeros(a.shape());
    for ni in 0..n {
        let (ai, gi) = (a.item(ni), gout.item(ni));
        let di = dx.item_mut(ni);
        for v in 0..s {
            let mut dot = T::ZERO;
            for ci in 0..c {
                dot += ai[ci * s + v] * gi[ci * s + v];
            }
            for ci in 0..c {
                di[ci * s + v] = ai[ci * s + v] * (gi[ci * s + v] - dot);
            }
        }
    }
    dx
}

/// `out[n, f] = sum_c attn[n, c] * z[n, c * F + f]` voxelwise.
pub fn weighted_sum<T: Real>(attn: &Tensor<T>, z: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = attn.shape().0;
    let zc = z.shape().channels();
    assert_eq!(
        attn.shape().spatial(),
        z.shape().spatial(),
        "fusion spatial mismatch"
    );
    assert_eq!(
        zc % c,
        0,
        "embedding channels {zc} not divisible by {c} modalities"
    );
    let f = zc / c;
    let s = attn.shape().spatial_len();
    let mut out = Tensor::zeros(z.shape().with_channels(f));
    for ni in 0..n {
        for fi in 0..f {
            let o = &mut out.item_mut(ni)[fi * s..(fi + 1) * s];
            for ci in 0..c {
                let a = attn.channel(ni, ci);
                let zz = z.channel(ni, ci * f + fi);
                for ((o, &a), &zv) in o.iter_mut().zip(a).zip(zz) {
                    *o += a * zv;
                }
            }
        }
    }
    out
}

pub fn weighted_sum_backward<T: Real>(
    attn: &Tensor<T>,
    z: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, ..] = attn.shape().0;
    let f = z.shape().channels() / c;
    let mut da = Tensor::zeros(attn.shape());
    let mut dz = Tensor::zeros(z.shape());
    for ni in 0..n {
        for ci in 0..c {
            for fi in 0..f {
                let g = gout.channel(ni, fi);
                let a = attn.channel(ni, ci);
                let zz = z.channel(ni, ci * f + fi).to_vec();
                for ((o, &gv), &av) in dz.channel_mut(ni, ci * f + fi).iter_mut().zip(g).zip(a) {
                    *o = av * gv;
                }
                for ((o, &gv), zv) in da.channel_mut(ni, ci).iter_mut().zip(g).zip(zz) {
                    *o += zv * gv;
                }
            }
        }
    }
    (da, dz)
}

/// Soft-Dice and binary cross-entropy terms of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceBceTerms {
    /// Mean over batch items of `1 - (2I + s) / (P + G + s)`.
    pub dice: f64,
    /// Mean voxelwise binary cross-entropy.
    pub bce: f64,
}

pub const DICE_SMOOTH: f64 = 1.0;

pub fn clamp_eps<T: Real>() -> T {
    if std::mem::size_of::<T>() == 4 {
        T::from_f64(1e-7)
    } else {
        T::from_f64(1e-12)
    }
}

pub fn dice_bce_forward<T: Real>(pred: &Tensor<T>, label: &Tensor<T>) -> DiceBceTerms {
    let n = pred.shape().batch();
    let eps = clamp_eps::<T>();
    let mut dice = 0.0;
    let mut bce = 0.0;
    for ni in 0..n {
        let (p, y) = (pred.item(ni), label.item(ni));
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (&pv, &yv) in p.iter().zip(y) {
            let (pf, yf) = (pv.to_f64(), yv.to_f64());
            inter += pf * yf;
            sp += pf;
            sy += yf;
            let pc = pv.max(eps).min(T::ONE - eps).to_f64();
            bce -= yf * pc.ln() + (1.0 - yf) * (1.0 - pc).ln();
        }
        dice += 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH);
    }
    DiceBceTerms {
        dice: dice / n as f64,
        bce: bce / pred.len() as f64,
    }
}

pub fn dice_bce_backward<T: Real>(pred: &Tensor<T>, label: &Tensor<T>, upstream: T) -> Tensor<T> {
    let n = pred.shape().batch();
    let eps = clamp_eps::<T>();
    let m = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ni in 0..n {
        let (p, y) = (pred.item(ni), label.item(ni));
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (&pv, &yv) in p.iter().zip(y) {
            inter += pv.to_f64() * yv.to_f64();
            sp += pv.to_f64();
            sy += yv.to_f64();
        }
        let u = sp + sy + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        let up = upstream.to_f64();
        for ((g, &pv), &yv) in grad.item_mut(ni).iter_mut().zip(p).zip(y) {
            let yf = yv.to_f64();
            let d_dice = -(2.0 * yf * u - num) / (u * u) / n as f64;
            let pc = pv.max(eps).min(T::ONE - eps).to_f64();
            let d_bce = (-yf / pc + (1.0 - yf) / (1.0 - pc)) / m;
            *g = T::from_f64(up * (d_dice + d_bce));
        }
    }
    grad
}
