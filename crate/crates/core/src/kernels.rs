//! Forward/backward kernels used by the autodiff tape and by image preprocessing.

use crate::scalar::{matmul_acc, matmul_at_acc, matmul_bt_acc, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const PLAIN: ConvGeom = ConvGeom { stride: 1, pad: 0, dilation: 1 };

    /// Same-size 3×3 geometry for a given dilation.
    pub fn same3(dilation: usize) -> Self {
        Self { stride: 1, pad: dilation, dilation }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (len + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, g: ConvGeom, cols: &mut [T]) {
    let p = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, g: ConvGeom, dx: &mut [T]) {
    let p = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> ConvDims {
    let [_, cin, h, wd] = x.shape();
    let [_, _, kh, kw] = w.shape();
    ConvDims { cin, h, w: wd, kh, kw, ho: g.out_len(h, kh), wo: g.out_len(wd, kw) }
}

/// `x: [n, cin, h, w]`, `weight: [cout, cin, kh, kw]`, `bias: [1, cout, 1, 1]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let d = dims(x, weight, g);
    let (n, cout) = (x.n(), weight.n());
    let k = d.cin * d.kh * d.kw;
    let p = d.ho * d.wo;
    let mut out = Tensor::zeros([n, cout, d.ho, d.wo]);
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..n {
        let dst = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let src: &[T] = if pointwise {
            x.sample(s)
        } else {
            im2col(x.sample(s), &d, g, &mut cols);
            &cols
        };
        matmul_acc(cout, k, p, weight.data(), src, dst);
    }
    out
}

/// Returns `(dx, dweight, dbias)` for the requested inputs.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = dims(x, weight, g);
    let (n, cout) = (x.n(), weight.n());
    let k = d.cin * d.kh * d.kw;
    let p = d.ho * d.wo;
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = need_db.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if need_dx && !pointwise { k * p } else { 0 }];
    for s in 0..n {
        let dys = dy.sample(s);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(p).enumerate() {
                let acc: T = chunk.iter().copied().sum();
                db.data_mut()[co] += acc;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                x.sample(s)
            } else {
                im2col(x.sample(s), &d, g, &mut cols);
                &cols
            };
            matmul_bt_acc(cout, p, k, dys, src, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let stride = d.cin * d.h * d.w;
            let dxs = &mut dx.data_mut()[s * stride..(s + 1) * stride];
            if pointwise {
                matmul_at_acc(k, cout, p, weight.data(), dys, dxs);
            } else {
                dcols.fill(T::zero());
                matmul_at_acc(k, cout, p, weight.data(), dys, &mut dcols);
                col2im(&dcols, &d, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Per-axis bilinear sampling table with half-pixel centres.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { pos - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let plane_out = oh * ow;
    for (ch, dst) in out.data_mut().chunks_mut(plane_out).enumerate() {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = T::of(ty.frac[oy]);
            let r0 = &src[ty.lo[oy] * w..ty.lo[oy] * w + w];
            let r1 = &src[ty.hi[oy] * w..ty.hi[oy] * w + w];
            for ox in 0..ow {
                let fx = T::of(tx.frac[ox]);
                let (l, r) = (tx.lo[ox], tx.hi[ox]);
                let top = r0[l] + (r0[r] - r0[l]) * fx;
                let bot = r1[l] + (r1[r] - r1[l]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (ch, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let src = &dy.data()[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let fy = T::of(ty.frac[oy]);
            for ox in 0..ow {
                let fx = T::of(tx.frac[ox]);
                let g = src[oy * ow + ox];
                let (l, r) = (tx.lo[ox], tx.hi[ox]);
                let (t, b) = (ty.lo[oy], ty.hi[oy]);
                let one = T::one();
                dst[t * w + l] += g * (one - fy) * (one - fx);
                dst[t * w + r] += g * (one - fy) * fx;
                dst[b * w + l] += g * fy * (one - fx);
                dst[b * w + r] += g * fy * fx;
            }
        }
    }
    dx
}

/// Mirror every plane left to right.
pub fn flip_horizontal<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.w();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Numerically stable softmax across the channel axis.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let p = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let src = x.sample(s);
        let dst = &mut out.data_mut()[s * c * p..(s + 1) * c * p];
        for i in 0..p {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[ch * p + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (src[ch * p + i] - m).exp();
                dst[ch * p + i] = e;
                z += e;
            }
            for ch in 0..c {
                dst[ch * p + i] = dst[ch * p + i] / z;
            }
        }
    }
    out
}

/// Index of the largest channel per pixel (first wins on ties): `[n, h*w]` row-major.
pub fn argmax_channels<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<usize>> {
    let [n, c, h, w] = x.shape();
    let p = h * w;
    (0..n)
        .map(|s| {
            let src = x.sample(s);
            (0..p)
                .map(|i| {
                    let mut best = 0;
                    for ch in 1..c {
                        if src[ch * p + i] > src[best * p + i] {
                            best = ch;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_matches_ceil_for_stride_two() {
        let g = ConvGeom { stride: 2, pad: 1, dilation: 1 };
        for len in 1..100 {
            assert_eq!(g.out_len(len, 3), len.div_ceil(2));
        }
        assert_eq!(ConvGeom::same3(3).out_len(8, 3), 8);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 5], |[_, c, y, x]| (c * 7 + y * 3 + x) as f64);
        assert_eq!(resize_bilinear(&x, 3, 5), x);
        let k = Tensor::<f64>::full([1, 1, 1, 1], 2.5);
        let up = resize_bilinear(&k, 4, 4);
        assert!(up.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 4], |[_, _, y, x]| ((y * 4 + x) as f64).sin());
        let dy = Tensor::<f64>::from_fn([1, 1, 7, 5], |[_, _, y, x]| ((y * 5 + x) as f64 * 0.3).cos());
        let y = resize_bilinear(&x, 7, 5);
        let dx = resize_bilinear_backward(&dy, 3, 4);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flip_is_involution() {
        let x = Tensor::<f32>::from_fn([1, 2, 2, 3], |[_, c, y, x]| (c * 6 + y * 3 + x) as f32);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)), x);
        assert_eq!(flip_horizontal(&x).at(0, 0, 0, 0), 2.0);
    }
}
