//! Forward/backward kernels for the layer types used by the classifiers.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis, Ix2};

use crate::scalar::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfolds `x` into `[C*k*k, N*Ho*Wo]` columns.
pub fn im2col<T: Real>(x: ArrayView4<T>, g: &ConvGeometry) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = g.out_hw(h, w);
    let k = g.kernel;
    let l = ho * wo;
    let mut col = Array2::<T>::zeros((c * k * k, n * l));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let cols = n * l;
    let colbuf = col.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut colbuf[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let src = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let base = ni * l + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds column gradients back onto an `[N, C, H, W]` input gradient.
pub fn col2im<T: Real>(dcol: ArrayView2<T>, g: &ConvGeometry, in_shape: (usize, usize, usize, usize)) -> Array4<T> {
    let (n, c, h, w) = in_shape;
    let (ho, wo) = g.out_hw(h, w);
    let k = g.kernel;
    let l = ho * wo;
    let cols = n * l;
    let mut dx = Array4::<T>::zeros(in_shape);
    let dxs = dx.as_slice_mut().expect("fresh array is contiguous");
    let dcol = dcol.as_standard_layout();
    let dc = dcol.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let srcrow = &dc[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let dst = &mut dxs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let base = ni * l + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += srcrow[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub struct ConvOut<T: Real> {
    pub y: Array4<T>,
    pub col: Array2<T>,
}

pub fn conv_forward<T: Real>(x: ArrayView4<T>, weight: ArrayView2<T>, g: &ConvGeometry) -> ConvOut<T> {
    let (n, _, h, w) = x.dim();
    let (ho, wo) = g.out_hw(h, w);
    let col = im2col(x, g);
    let out = weight.dot(&col);
    let y = out
        .into_shape_with_order((g.out_ch, n, ho, wo))
        .expect("gemm output is contiguous")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned();
    ConvOut { y, col }
}

/// Returns `(dx, dW)`; `dW` only when requested.
pub fn conv_backward<T: Real>(
    dy: ArrayView4<T>,
    col: &Array2<T>,
    weight: ArrayView2<T>,
    g: &ConvGeometry,
    in_shape: (usize, usize, usize, usize),
    want_dw: bool,
) -> (Array4<T>, Option<Array2<T>>) {
    let (n, co, ho, wo) = dy.dim();
    let dy2 = dy
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, n * ho * wo))
        .expect("contiguous");
    let dw = want_dw.then(|| dy2.dot(&col.t()));
    let dcol = weight.t().dot(&dy2);
    (col2im(dcol.view(), g, in_shape), dw)
}

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct BnOut<T: Real> {
    pub y: Array4<T>,
    pub xhat: Array4<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BnStats<T>>,
}

/// Batch norm using batch statistics (`running = None`) or running ones.
pub fn bn_forward<T: Real>(
    x: ArrayView4<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> BnOut<T> {
    let (n, c, h, w) = x.dim();
    let m = n * h * w;
    let eps = T::of(BN_EPS);
    let (mean, var, stats) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let ch = x.index_axis(Axis(1), ci);
                let mu = ch.iter().copied().sum::<T>() / T::of(m as f64);
                let v = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / T::of(m as f64);
                mean[ci] = mu;
                var[ci] = v;
            }
            (mean, var, true)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.as_standard_layout().into_owned();
    let mut y = Array4::<T>::zeros((n, c, h, w));
    for ci in 0..c {
        let (mu, is, ga, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        let mut xh = xhat.index_axis_mut(Axis(1), ci);
        let mut yc = y.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut xh).and(&mut yc).for_each(|xv, yv| {
            *xv = (*xv - mu) * is;
            *yv = ga * *xv + be;
        });
    }
    BnOut {
        y,
        xhat,
        inv_std,
        stats: stats.then_some(BnStats { mean, var, count: m }),
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward<T: Real>(
    dy: ArrayView4<T>,
    xhat: &Array4<T>,
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Array4<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.dim();
    let m = T::of((n * h * w) as f64);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let dyc = dy.index_axis(Axis(1), ci);
        let xh = xhat.index_axis(Axis(1), ci);
        let mut dg = T::zero();
        let mut db = T::zero();
        ndarray::Zip::from(&dyc).and(&xh).for_each(|&d, &x| {
            dg += d * x;
            db += d;
        });
        dgamma[ci] = dg;
        dbeta[ci] = db;
        let scale = gamma[ci] * inv_std[ci];
        let mut dxc = dx.index_axis_mut(Axis(1), ci);
        if batch_stats {
            let k = scale / m;
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| *o = k * (m * d - db - x * dg));
        } else {
            ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| *o = scale * d);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Real>(x: Array4<T>) -> Array4<T> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its output (derivative 0 at the kink).
pub fn relu_backward<T: Real>(dy: Array4<T>, y: &Array4<T>) -> Array4<T> {
    let mut dx = dy;
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn gap_forward<T: Real>(x: ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let hw = T::of((h * w) as f64);
    Array2::from_shape_fn((n, c), |(i, j)| {
        x.slice(ndarray::s![i, j, .., ..]).iter().copied().sum::<T>() / hw
    })
}

pub fn gap_backward<T: Real>(dy: ArrayView2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let hw = T::of((h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| dy[[i, j]] / hw)
}

pub fn linear_forward<T: Real>(x: ArrayView2<T>, weight: ArrayView2<T>, bias: &[T]) -> Array2<T> {
    let mut y = x.dot(&weight.t());
    for mut row in y.axis_iter_mut(Axis(0)) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

/// Returns `(dx, dW, db)`; parameter gradients only when requested.
#[allow(clippy::type_complexity)]
pub fn linear_backward<T: Real>(
    dy: ArrayView2<T>,
    x: &Array2<T>,
    weight: ArrayView2<T>,
    want_param_grads: bool,
) -> (Array2<T>, Option<(Array2<T>, Vec<T>)>) {
    let dx = dy.dot(&weight);
    let pg = want_param_grads.then(|| {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0)).to_vec();
        (dw, db)
    });
    (dx, pg)
}

pub fn as_matrix<T: Real>(a: &ndarray::ArrayD<T>) -> ArrayView2<'_, T> {
    let rows = a.shape()[0];
    let cols = a.len() / rows.max(1);
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("parameters are stored contiguously")
        .into_dimensionality::<Ix2>()
        .expect("rank 2")
}
