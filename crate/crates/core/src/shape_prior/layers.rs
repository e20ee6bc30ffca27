//! Stride-2 3-D convolutions (kernel 3, padding 1), their transposes, and
//! dense layers, each with a hand-written backward pass. Tensors are
//! channel-major with x fastest.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

pub(crate) type Dims = [usize; 3];

pub(crate) fn half(d: Dims) -> Dims {
    d.map(|n| n.div_ceil(2))
}

pub(crate) fn volume(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// For each coarse index along one axis, the (kernel tap, fine index) pairs
/// with `fine = 2 * coarse + tap - 1` inside `0..fine_len`.
fn axis_taps(fine_len: usize) -> Vec<Vec<(usize, usize)>> {
    (0..fine_len.div_ceil(2))
        .map(|o| (0..3).filter_map(|k| (2 * o + k).checked_sub(1).filter(|&i| i < fine_len).map(|i| (k, i))).collect())
        .collect()
}

/// Every (coarse voxel, fine voxel, kernel offset) triple.
fn taps(fine: Dims) -> Vec<(usize, usize, usize)> {
    let coarse = half(fine);
    let [tx, ty, tz] = [axis_taps(fine[0]), axis_taps(fine[1]), axis_taps(fine[2])];
    let mut out = Vec::with_capacity(volume(coarse) * 27);
    for oz in 0..coarse[2] {
        for oy in 0..coarse[1] {
            for ox in 0..coarse[0] {
                let o = ox + coarse[0] * (oy + coarse[1] * oz);
                for &(kz, iz) in &tz[oz] {
                    for &(ky, iy) in &ty[oy] {
                        for &(kx, ix) in &tx[ox] {
                            out.push((o, ix + fine[0] * (iy + fine[1] * iz), kx + 3 * ky + 9 * kz));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch matrix `(coarse voxels) x (channels * 27)` of a fine tensor.
fn im2col(x: &[f64], c: usize, fine: Dims) -> DMatrix<f64> {
    let (vi, vo) = (volume(fine), volume(half(fine)));
    let mut col = DMatrix::zeros(vo, c * 27);
    let t = taps(fine);
    for ch in 0..c {
        let xc = &x[ch * vi..(ch + 1) * vi];
        for &(o, i, k) in &t {
            col[(o, ch * 27 + k)] = xc[i];
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `x`.
fn col2im(col: &DMatrix<f64>, c: usize, fine: Dims, x: &mut [f64]) {
    let vi = volume(fine);
    let t = taps(fine);
    for ch in 0..c {
        let xc = &mut x[ch * vi..(ch + 1) * vi];
        for &(o, i, k) in &t {
            xc[i] += col[(o, ch * 27 + k)];
        }
    }
}

fn add_bias(y: &mut DMatrix<f64>, b: &[f64]) {
    for (mut column, &bc) in y.column_iter_mut().zip(b) {
        column.add_scalar_mut(bc);
    }
}

fn bias_grad(gy: &DMatrixView<f64>, gb: &mut [f64]) {
    for (g, column) in gb.iter_mut().zip(gy.column_iter()) {
        *g += column.sum();
    }
}

/// Weights `[cout][cin][27]`; maps `(cin, fine)` to `(cout, half(fine))`.
pub(crate) fn conv_forward(x: &[f64], cin: usize, fine: Dims, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let wt = DMatrixView::from_slice(w, cin * 27, cout);
    let mut y = im2col(x, cin, fine) * wt;
    add_bias(&mut y, b);
    y.data.into()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    cin: usize,
    fine: Dims,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let vo = volume(half(fine));
    let gy = DMatrixView::from_slice(gy, vo, cout);
    bias_grad(&gy, gb);
    let col = im2col(x, cin, fine);
    let mut gwt = DMatrixViewMut::from_slice(gw, cin * 27, cout);
    gwt.gemm_tr(1.0, &col, &gy, 1.0);
    if let Some(gx) = gx {
        let wt = DMatrixView::from_slice(w, cin * 27, cout);
        col2im(&(gy * wt.transpose()), cin, fine, gx);
    }
}

/// Transpose of [`conv_forward`]. Weights `[cin][cout][27]`; maps
/// `(cin, half(fine))` to `(cout, fine)`.
pub(crate) fn tconv_forward(x: &[f64], cin: usize, fine: Dims, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let vo = volume(half(fine));
    let xm = DMatrixView::from_slice(x, vo, cin);
    let wt = DMatrixView::from_slice(w, cout * 27, cin);
    let mut y = DMatrix::zeros(volume(fine), cout);
    col2im(&(xm * wt.transpose()), cout, fine, y.as_mut_slice());
    add_bias(&mut y, b);
    y.data.into()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv_backward(
    x: &[f64],
    cin: usize,
    fine: Dims,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let vo = volume(half(fine));
    bias_grad(&DMatrixView::from_slice(gy, volume(fine), cout), gb);
    let col = im2col(gy, cout, fine);
    let xm = DMatrixView::from_slice(x, vo, cin);
    let mut gwt = DMatrixViewMut::from_slice(gw, cout * 27, cin);
    gwt.gemm_tr(1.0, &col, &xm, 1.0);
    if let Some(gx) = gx {
        let wt = DMatrixView::from_slice(w, cout * 27, cin);
        let g = col * wt;
        for (a, b) in gx.iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
}

/// `y = W x + b` with `W` row-major `[n_out][n_in]`.
pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter().enumerate().map(|(o, &bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

pub(crate) fn dense_backward(x: &[f64], w: &[f64], gy: &[f64], mut gx: Option<&mut [f64]>, gw: &mut [f64], gb: &mut [f64]) {
    let n_in = x.len();
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *gwi += g * xi;
        }
        if let Some(gx) = gx.as_deref_mut() {
            for (gxi, wi) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *gxi += g * wi;
            }
        }
    }
}

pub(crate) fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zero the gradient where the ReLU output was clipped.
pub(crate) fn relu_backward(act: &[f64], g: &mut [f64]) {
    for (gi, a) in g.iter_mut().zip(act) {
        if *a <= 0.0 {
            *gi = 0.0;
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
