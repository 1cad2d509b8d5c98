//! Network layers with hand-derived backward passes.
//!
//! Convolutions run as im2col + GEMM in strips of output rows so the column
//! buffer stays bounded at full resolution; the backward pass rebuilds each
//! strip instead of caching it. All math is f64 and single-threaded, so
//! results are bitwise reproducible and finite-difference checks converge
//! tightly.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView4, Ix1, Ix4};
use rand_chacha::ChaCha8Rng;

use super::param::{he_normal, ones, zeros, Grads, ParamId, ParamStore};

/// Upper bound on output pixels per im2col strip. At 512×512 with a 32×9
/// patch basis this caps the column buffer near 40 MB.
pub(crate) const STRIP_PIXELS: usize = 16384;

fn view4(ps: &ParamStore, id: ParamId) -> ArrayView4<'_, f64> {
    ps.get(id)
        .view()
        .into_dimensionality::<Ix4>()
        .expect("stored as 4-d")
}

fn view1(ps: &ParamStore, id: ParamId) -> ArrayView1<'_, f64> {
    ps.get(id)
        .view()
        .into_dimensionality::<Ix1>()
        .expect("stored as 1-d")
}

/// Copy sample `n` of `x` into the zero-padded scratch buffer.
fn fill_padded(xpad: &mut Array3<f64>, x: &Array4<f64>, n: usize, pad: usize) {
    xpad.fill(0.0);
    let (_, c_in, h, w) = x.dim();
    let wp = w + 2 * pad;
    let xs = x.as_slice().expect("standard layout");
    let ps = xpad.as_slice_mut().expect("standard layout");
    let hp = h + 2 * pad;
    for c in 0..c_in {
        for y in 0..h {
            let src = ((n * c_in + c) * h + y) * w;
            let dst = (c * hp + y + pad) * wp + pad;
            ps[dst..dst + w].copy_from_slice(&xs[src..src + w]);
        }
    }
}

/// Gather the im2col matrix for output rows [y0, y1): one row per
/// (channel, ky, kx) patch coordinate, one column per output pixel.
fn fill_cols(
    cols: &mut Array2<f64>,
    xpad: &Array3<f64>,
    k: usize,
    y0: usize,
    y1: usize,
    w_out: usize,
) {
    let (c_in, hp, wp) = xpad.dim();
    let xs = xpad.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let px = (y1 - y0) * w_out;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for y in y0..y1 {
                    let src = (c * hp + y + ky) * wp + kx;
                    let dst = row * px + (y - y0) * w_out;
                    cs[dst..dst + w_out].copy_from_slice(&xs[src..src + w_out]);
                }
            }
        }
    }
}

/// Scatter-add the gradient of the im2col matrix back into the padded
/// input gradient (exact adjoint of [`fill_cols`]).
fn scatter_cols(
    dcols: &Array2<f64>,
    dxpad: &mut Array3<f64>,
    k: usize,
    y0: usize,
    y1: usize,
    w_out: usize,
) {
    let (c_in, hp, wp) = dxpad.dim();
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dxpad.as_slice_mut().expect("standard layout");
    let px = (y1 - y0) * w_out;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for y in y0..y1 {
                    let dst = (c * hp + y + ky) * wp + kx;
                    let src = row * px + (y - y0) * w_out;
                    for i in 0..w_out {
                        xs[dst + i] += ds[src + i];
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution, strip-wise im2col + GEMM.
pub(crate) fn conv2d_forward(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    pad: usize,
    strip_px: usize,
) -> Array4<f64> {
    let (n_batch, c_in, h, wd) = x.dim();
    let (c_out, c_in_w, k, _) = w.dim();
    assert_eq!(c_in, c_in_w, "input channels match kernel");
    let h_out = h + 2 * pad + 1 - k;
    let w_out = wd + 2 * pad + 1 - k;
    let rows = c_in * k * k;
    let wmat = w
        .into_shape_with_order((c_out, rows))
        .expect("contiguous kernel");
    let mut out = Array4::zeros((n_batch, c_out, h_out, w_out));
    let strip_rows = (strip_px / w_out).max(1);
    let mut xpad = Array3::zeros((c_in, h + 2 * pad, wd + 2 * pad));
    for n in 0..n_batch {
        fill_padded(&mut xpad, x, n, pad);
        let mut y0 = 0;
        while y0 < h_out {
            let y1 = (y0 + strip_rows).min(h_out);
            let px = (y1 - y0) * w_out;
            let mut cols = Array2::zeros((rows, px));
            fill_cols(&mut cols, &xpad, k, y0, y1, w_out);
            let mut y_strip = wmat.dot(&cols);
            for co in 0..c_out {
                let bias = b[co];
                y_strip.row_mut(co).mapv_inplace(|v| v + bias);
            }
            let ys = y_strip.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            for co in 0..c_out {
                for y in y0..y1 {
                    let dst = ((n * c_out + co) * h_out + y) * w_out;
                    let src = co * px + (y - y0) * w_out;
                    os[dst..dst + w_out].copy_from_slice(&ys[src..src + w_out]);
                }
            }
            y0 = y1;
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel, and bias.
pub(crate) fn conv2d_backward(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    dy: &Array4<f64>,
    pad: usize,
    strip_px: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n_batch, c_in, h, wd) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let (_, _, h_out, w_out) = dy.dim();
    let rows = c_in * k * k;
    let wmat = w
        .into_shape_with_order((c_out, rows))
        .expect("contiguous kernel");
    let mut dwmat = Array2::<f64>::zeros((c_out, rows));
    let mut db = Array1::<f64>::zeros(c_out);
    let mut dx = Array4::zeros((n_batch, c_in, h, wd));
    let strip_rows = (strip_px / w_out).max(1);
    let mut xpad = Array3::zeros((c_in, h + 2 * pad, wd + 2 * pad));
    let mut dxpad = Array3::zeros((c_in, h + 2 * pad, wd + 2 * pad));
    for n in 0..n_batch {
        fill_padded(&mut xpad, x, n, pad);
        dxpad.fill(0.0);
        let mut y0 = 0;
        while y0 < h_out {
            let y1 = (y0 + strip_rows).min(h_out);
            let px = (y1 - y0) * w_out;
            let mut cols = Array2::zeros((rows, px));
            fill_cols(&mut cols, &xpad, k, y0, y1, w_out);
            // Gather the strip of dy.
            let mut dy_strip = Array2::zeros((c_out, px));
            {
                let ds = dy.as_slice().expect("standard layout");
                let ss = dy_strip.as_slice_mut().expect("standard layout");
                for co in 0..c_out {
                    for y in y0..y1 {
                        let src = ((n * c_out + co) * h_out + y) * w_out;
                        let dst = co * px + (y - y0) * w_out;
                        ss[dst..dst + w_out].copy_from_slice(&ds[src..src + w_out]);
                    }
                }
            }
            dwmat = dwmat + dy_strip.dot(&cols.t());
            db = db + dy_strip.sum_axis(ndarray::Axis(1));
            let dcols = wmat.t().dot(&dy_strip);
            scatter_cols(&dcols, &mut dxpad, k, y0, y1, w_out);
            y0 = y1;
        }
        // Crop padding off the accumulated input gradient.
        dx.slice_mut(s![n, .., .., ..]).assign(&dxpad.slice(s![
            ..,
            pad..pad + h,
            pad..pad + wd
        ]));
    }
    let dw = dwmat
        .into_shape_with_order((c_out, c_in, k, k))
        .expect("contiguous");
    (dx, dw, db)
}

/// Same-padded stride-1 convolution layer (k odd, pad = k/2).
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            he_normal(rng, &[c_out, c_in, k, k], c_in * k * k),
            true,
        );
        let b = ps.add(format!("{name}.b"), zeros(&[c_out]), true);
        Conv2d { w, b, pad: k / 2 }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        conv2d_forward(x, view4(ps, self.w), view1(ps, self.b), self.pad, STRIP_PIXELS)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let (dx, dw, db) = conv2d_backward(x, view4(ps, self.w), dy, self.pad, STRIP_PIXELS);
        grads.add_to(self.w, &dw.into_dyn());
        grads.add_to(self.b, &db.into_dyn());
        dx
    }
}

/// 2×2 stride-2 transposed convolution (exact upsampling mirror of the 2×2
/// pool). Taps never overlap, so each tap is one GEMM plus a scatter.
#[derive(Debug, Clone)]
pub(crate) struct ConvTranspose2 {
    pub w: ParamId, // (c_in, c_out, 2, 2)
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2 {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            he_normal(rng, &[c_in, c_out, 2, 2], c_in * 4),
            true,
        );
        let b = ps.add(format!("{name}.b"), zeros(&[c_out]), true);
        ConvTranspose2 { w, b, c_in, c_out }
    }

    /// Input (N, C_in, H, W) to output (N, C_out, 2H, 2W).
    pub fn forward(&self, ps: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        let (n_batch, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in);
        let wt = view4(ps, self.w);
        let b = view1(ps, self.b);
        let xmat = to_pixel_major(x); // (N·H·W, C_in)
        let mut out = Array4::zeros((n_batch, self.c_out, 2 * h, 2 * w));
        let os = out.as_slice_mut().expect("standard layout");
        for di in 0..2 {
            for dj in 0..2 {
                let w_tap: Array2<f64> = wt.slice(s![.., .., di, dj]).to_owned(); // (C_in, C_out)
                let y_tap: Array2<f64> = xmat.dot(&w_tap); // (N·H·W, C_out)
                let ys = y_tap.as_slice().expect("standard layout");
                for n in 0..n_batch {
                    for i in 0..h {
                        for j in 0..w {
                            let p = (n * h + i) * w + j;
                            for co in 0..self.c_out {
                                let dst = ((n * self.c_out + co) * 2 * h + 2 * i + di) * 2 * w
                                    + 2 * j
                                    + dj;
                                os[dst] = ys[p * self.c_out + co] + b[co];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let (n_batch, c_in, h, w) = x.dim();
        let wt = view4(ps, self.w);
        let xmat = to_pixel_major(x);
        let mut dxmat = Array2::<f64>::zeros((n_batch * h * w, c_in));
        let mut dw = Array4::<f64>::zeros((c_in, self.c_out, 2, 2));
        let mut db = Array1::<f64>::zeros(self.c_out);
        let dys = dy.as_slice().expect("standard layout");
        for di in 0..2 {
            for dj in 0..2 {
                let mut dy_tap = Array2::<f64>::zeros((n_batch * h * w, self.c_out));
                {
                    let ds = dy_tap.as_slice_mut().expect("standard layout");
                    for n in 0..n_batch {
                        for i in 0..h {
                            for j in 0..w {
                                let p = (n * h + i) * w + j;
                                for co in 0..self.c_out {
                                    let src = ((n * self.c_out + co) * 2 * h + 2 * i + di)
                                        * 2
                                        * w
                                        + 2 * j
                                        + dj;
                                    ds[p * self.c_out + co] = dys[src];
                                }
                            }
                        }
                    }
                }
                let dw_tap: Array2<f64> = xmat.t().dot(&dy_tap); // (C_in, C_out)
                dw.slice_mut(s![.., .., di, dj]).assign(&dw_tap);
                db = db + dy_tap.sum_axis(ndarray::Axis(0));
                let w_tap: Array2<f64> = wt.slice(s![.., .., di, dj]).to_owned();
                dxmat = dxmat + dy_tap.dot(&w_tap.t());
            }
        }
        grads.add_to(self.w, &dw.into_dyn());
        grads.add_to(self.b, &db.into_dyn());
        from_pixel_major(&dxmat, n_batch, c_in, h, w)
    }
}

/// Permute (N, C, H, W) to a (N·H·W, C) matrix.
fn to_pixel_major(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::zeros((n * h * w, c));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for nn in 0..n {
        for cc in 0..c {
            for y in 0..h {
                let src = ((nn * c + cc) * h + y) * w;
                for xx in 0..w {
                    os[((nn * h + y) * w + xx) * c + cc] = xs[src + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`to_pixel_major`].
fn from_pixel_major(m: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::zeros((n, c, h, w));
    let ms = m.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for nn in 0..n {
        for cc in 0..c {
            for y in 0..h {
                let dst = ((nn * c + cc) * h + y) * w;
                for xx in 0..w {
                    os[dst + xx] = ms[((nn * h + y) * w + xx) * c + cc];
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling. Returns the pooled map and a 2-bit argmax code
/// (row-major within the window, first maximum wins ties).
pub(crate) fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, ho, wo));
    let mut arg = Array4::<u8>::zeros((n, c, ho, wo));
    for nn in 0..n {
        for cc in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = x[[nn, cc, 2 * i, 2 * j]];
                    let mut code = 0u8;
                    for (idx, (dy, dx)) in
                        [(0usize, 1usize), (1, 0), (1, 1)].into_iter().enumerate()
                    {
                        let v = x[[nn, cc, 2 * i + dy, 2 * j + dx]];
                        if v > best {
                            best = v;
                            code = idx as u8 + 1;
                        }
                    }
                    y[[nn, cc, i, j]] = best;
                    arg[[nn, cc, i, j]] = code;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool2_backward(
    dy: &Array4<f64>,
    arg: &Array4<u8>,
    in_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, ho, wo) = dy.dim();
    let mut dx = Array4::zeros(in_shape);
    for nn in 0..n {
        for cc in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let code = arg[[nn, cc, i, j]] as usize;
                    let (oy, ox) = (code / 2, code % 2);
                    dx[[nn, cc, 2 * i + oy, 2 * j + ox]] += dy[[nn, cc, i, j]];
                }
            }
        }
    }
    dx
}

/// Batch normalization over (N, H, W) per channel; Keras-style running
/// statistics (momentum 0.99, biased batch variance, epsilon 1e-3).
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub eps: f64,
}

pub(crate) struct BnCache {
    pub x_hat: Array4<f64>,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

/// Deferred update to running statistics: the forward pass stays pure and
/// the training loop commits updates explicitly.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPS: f64 = 1e-3;

    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), ones(&[channels]), true),
            beta: ps.add(format!("{name}.beta"), zeros(&[channels]), true),
            run_mean: ps.add(format!("{name}.running_mean"), zeros(&[channels]), false),
            run_var: ps.add(format!("{name}.running_var"), ones(&[channels]), false),
            eps: Self::EPS,
        }
    }

    /// `use_batch_stats = true` normalizes by this batch's moments and emits
    /// the running-stat update; `false` normalizes by running statistics.
    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        use_batch_stats: bool,
    ) -> (Array4<f64>, BnCache, Option<BnUpdate>) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let gamma = view1(ps, self.gamma);
        let beta = view1(ps, self.beta);
        let (mean, var): (Vec<f64>, Vec<f64>) = if use_batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for cc in 0..c {
                let mut sum = 0.0;
                for nn in 0..n {
                    sum += x.slice(s![nn, cc, .., ..]).sum();
                }
                mean[cc] = sum / m;
                let mut sq = 0.0;
                for nn in 0..n {
                    for v in x.slice(s![nn, cc, .., ..]).iter() {
                        let d = v - mean[cc];
                        sq += d * d;
                    }
                }
                var[cc] = sq / m;
            }
            (mean, var)
        } else {
            (
                view1(ps, self.run_mean).to_vec(),
                view1(ps, self.run_var).to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        for cc in 0..c {
            let (mu, is, g, b) = (mean[cc], inv_std[cc], gamma[cc], beta[cc]);
            for nn in 0..n {
                let xin = x.slice(s![nn, cc, .., ..]);
                let mut xh = x_hat.slice_mut(s![nn, cc, .., ..]);
                let mut yo = y.slice_mut(s![nn, cc, .., ..]);
                ndarray::Zip::from(&mut xh).and(&mut yo).and(&xin).for_each(
                    |xh_v, y_v, &x_v| {
                        let normalized = (x_v - mu) * is;
                        *xh_v = normalized;
                        *y_v = g * normalized + b;
                    },
                );
            }
        }
        let update = use_batch_stats.then(|| BnUpdate {
            run_mean: self.run_mean,
            run_var: self.run_var,
            mean,
            var,
        });
        let cache = BnCache {
            x_hat,
            inv_std,
            batch_stats: use_batch_stats,
        };
        (y, cache, update)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &BnCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let gamma = view1(ps, self.gamma);
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = Array4::zeros((n, c, h, w));
        for cc in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for nn in 0..n {
                let d = dy.slice(s![nn, cc, .., ..]);
                let xh = cache.x_hat.slice(s![nn, cc, .., ..]);
                sum_dy += d.sum();
                sum_dy_xhat += (&d * &xh).sum();
            }
            dgamma[cc] = sum_dy_xhat;
            dbeta[cc] = sum_dy;
            let g_is = gamma[cc] * cache.inv_std[cc];
            for nn in 0..n {
                let d = dy.slice(s![nn, cc, .., ..]);
                let xh = cache.x_hat.slice(s![nn, cc, .., ..]);
                let mut out = dx.slice_mut(s![nn, cc, .., ..]);
                if cache.batch_stats {
                    ndarray::Zip::from(&mut out).and(&d).and(&xh).for_each(
                        |o, &dv, &xv| {
                            *o = g_is / m * (m * dv - sum_dy - xv * sum_dy_xhat);
                        },
                    );
                } else {
                    ndarray::Zip::from(&mut out)
                        .and(&d)
                        .for_each(|o, &dv| *o = g_is * dv);
                }
            }
        }
        grads.add_to(self.gamma, &dgamma.into_dyn());
        grads.add_to(self.beta, &dbeta.into_dyn());
        dx
    }

    /// Fold deferred batch statistics into the running estimates:
    /// running ← momentum·running + (1−momentum)·batch.
    pub fn commit(ps: &mut ParamStore, update: &BnUpdate, momentum: f64) {
        let rm = ps.get_mut(update.run_mean);
        for (r, b) in rm.iter_mut().zip(&update.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        let rv = ps.get_mut(update.run_var);
        for (r, b) in rv.iter_mut().zip(&update.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

pub(crate) fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU using the cached output (y > 0 ⟺ x > 0).
pub(crate) fn relu_backward(dy: &Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(y)
        .for_each(|d, &yv| {
            if yv <= 0.0 {
                *d = 0.0;
            }
        });
    dx
}

pub(crate) fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub(crate) fn sigmoid_backward(dy: &Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(y)
        .for_each(|d, &yv| *d *= yv * (1.0 - yv));
    dx
}
