//! Dense row-major `f64` tensors and the convolution kernels shared by the
//! forward and backward passes.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored row-major as `m x k` (or `k x m` when `trans_a`); likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        ConvGeom {
            stride: 1,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub fn out_size(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(input: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<Self> {
        if input.shape().len() != 3 || weight.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects CHW input and OIHW weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            )));
        }
        let (cin, h, w) = input.chw();
        let ws = weight.shape();
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = geom.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::Shape(format!(
                "conv2d channels: input {cin}, weight {ws:?}, groups {g}"
            )));
        }
        let (ho, wo) = match (geom.out_size(h, kh), geom.out_size(w, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {}",
                    geom.pad
                )))
            }
        };
        Ok(ConvDims {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
        })
    }
}

fn im2col(x: &[f64], c0: usize, cg: usize, d: &ConvDims, geom: ConvGeom, cols: &mut [f64]) {
    let n = d.ho * d.wo;
    let pad = geom.pad as isize;
    for c in 0..cg {
        let plane = &x[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c0: usize, cg: usize, d: &ConvDims, geom: ConvGeom, dx: &mut [f64]) {
    let n = d.ho * d.wo;
    let pad = geom.pad as isize;
    for c in 0..cg {
        let plane = &mut dx[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            line[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.pad == 0
}

/// Grouped 2-D cross-correlation of a `(C, H, W)` input with `(O, C/g, kh, kw)` weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let d = ConvDims::new(input, weight, geom)?;
    if let Some(b) = bias {
        if b.len() != d.cout {
            return Err(Error::Shape(format!("conv2d bias length {} != {}", b.len(), d.cout)));
        }
    }
    let g = geom.groups;
    let (cg, og) = (d.cin / g, d.cout / g);
    let k = cg * d.kh * d.kw;
    let n = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.cout, d.ho, d.wo]);
    let pointwise = is_pointwise(&d, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * n] };
    for gi in 0..g {
        let b_mat: &[f64] = if pointwise {
            &input.data()[gi * cg * n..(gi + 1) * cg * n]
        } else {
            im2col(input.data(), gi * cg, cg, &d, geom, &mut cols);
            &cols
        };
        let w = &weight.data()[gi * og * k..(gi + 1) * og * k];
        let o = &mut out.data_mut()[gi * og * n..(gi + 1) * og * n];
        gemm(og, k, n, w, false, b_mat, false, 0.0, o);
    }
    if let Some(b) = bias {
        for (plane, &bv) in out.data_mut().chunks_mut(n).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]; each output is computed only when requested.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeom,
    grad_out: &Tensor,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let d = ConvDims::new(input, weight, geom).expect("shapes validated in forward");
    let g = geom.groups;
    let (cg, og) = (d.cin / g, d.cout / g);
    let k = cg * d.kh * d.kw;
    let n = d.ho * d.wo;
    let pointwise = is_pointwise(&d, geom);

    let grad_bias = Tensor::vector(grad_out.data().chunks(n).map(|p| p.iter().sum()).collect());
    let mut gw = want_weight.then(|| Tensor::zeros(weight.shape()));
    let mut gx = want_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![0.0; if pointwise && !want_input { 0 } else { k * n }];

    for gi in 0..g {
        let go = &grad_out.data()[gi * og * n..(gi + 1) * og * n];
        if let Some(gw) = gw.as_mut() {
            let b_mat: &[f64] = if pointwise {
                &input.data()[gi * cg * n..(gi + 1) * cg * n]
            } else {
                im2col(input.data(), gi * cg, cg, &d, geom, &mut cols);
                &cols
            };
            let dst = &mut gw.data_mut()[gi * og * k..(gi + 1) * og * k];
            gemm(og, n, k, go, false, b_mat, true, 0.0, dst);
        }
        if let Some(gx) = gx.as_mut() {
            let w = &weight.data()[gi * og * k..(gi + 1) * og * k];
            if pointwise {
                let dst = &mut gx.data_mut()[gi * cg * n..(gi + 1) * cg * n];
                gemm(k, og, n, w, true, go, false, 0.0, dst);
            } else {
                gemm(k, og, n, w, true, go, false, 0.0, &mut cols);
                col2im(&cols, gi * cg, cg, &d, geom, gx.data_mut());
            }
        }
    }
    (gx, gw, grad_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], geom: ConvGeom) -> Tensor {
        let (cin, h, wd) = x.chw();
        let ws = w.shape();
        let (cout, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let og = cout / geom.groups;
        let ho = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let wo = (wd + 2 * geom.pad - kw) / geom.stride + 1;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for o in 0..cout {
            let gi = o / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((gi * cg + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * cg + c) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let _ = cin;
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect())
            .unwrap()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(groups, stride, pad, k) in &[(1, 1, 1, 3), (2, 2, 1, 3), (4, 2, 0, 1), (1, 1, 0, 1), (1, 1, 4, 9)] {
            let x = ramp(&[4, 11, 13], 1.0);
            let w = ramp(&[8, 4 / groups, k, k], 0.3);
            let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
            let geom = ConvGeom { stride, pad, groups };
            let got = conv2d(&x, &w, Some(&Tensor::vector(b.clone())), geom).unwrap();
            let want = naive_conv(&x, &w, &b, geom);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, ConvGeom { stride: 1, pad: 0, groups: 1 }).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
