//! Spatial attention gate.
//!
//! The gate compresses channels to a mean map and a max map, convolves the
//! 2-channel stack with one k×k kernel, and squashes through a sigmoid. The
//! resulting H×W gate multiplies every channel, so attention reweights
//! locations rather than channels.

use ndarray::{s, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use super::layers::{conv2d_forward, sigmoid, Conv2d, STRIP_PIXELS};
use super::param::{Grads, ParamStore};
use super::ModelError;

/// Apply spatial attention to a C×H×W feature tensor with explicit gate
/// parameters: `gate_weights` of shape (1, 2, k, k) with odd k, and a scalar
/// bias. Returns features ⊙ sigmoid(conv([mean; max])).
pub fn spatial_attention(
    features: &Array3<f64>,
    gate_weights: &Array4<f64>,
    gate_bias: f64,
) -> Result<Array3<f64>, ModelError> {
    let (c, h, w) = features.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(ModelError::Shape {
            message: format!("spatial attention needs nonempty features, got {c}×{h}×{w}"),
        });
    }
    let (c_out, c_in, k, k2) = gate_weights.dim();
    if c_out != 1 || c_in != 2 || k != k2 {
        return Err(ModelError::Config {
            message: format!(
                "attention gate weights must have shape (1, 2, k, k), got ({c_out}, {c_in}, {k}, {k2})"
            ),
        });
    }
    if k % 2 == 0 {
        return Err(ModelError::Config {
            message: format!("attention kernel must be odd, got {k}"),
        });
    }
    let stacked = stack_mean_max(&features.view().insert_axis(ndarray::Axis(0)).to_owned()).0;
    let bias = ndarray::Array1::from_elem(1, gate_bias);
    let pre = conv2d_forward(&stacked, gate_weights.view(), bias.view(), k / 2, STRIP_PIXELS);
    let gate = sigmoid(&pre); // (1, 1, H, W)
    let mut out = features.clone();
    for cc in 0..c {
        let mut plane = out.slice_mut(s![cc, .., ..]);
        let g = gate.slice(s![0, 0, .., ..]);
        plane.zip_mut_with(&g, |p, &gv| *p *= gv);
    }
    Ok(out)
}

/// Channel-wise mean and max maps stacked as (N, 2, H, W), plus the argmax
/// channel per pixel for routing the max path's gradient.
fn stack_mean_max(x: &Array4<f64>) -> (Array4<f64>, Array3<usize>) {
    let (n, c, h, w) = x.dim();
    let mut stacked = Array4::zeros((n, 2, h, w));
    let mut argmax = Array3::<usize>::zeros((n, h, w));
    for nn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for cc in 0..c {
                    let v = x[[nn, cc, y, xx]];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = cc;
                    }
                }
                stacked[[nn, 0, y, xx]] = sum / c as f64;
                stacked[[nn, 1, y, xx]] = best;
                argmax[[nn, y, xx]] = best_c;
            }
        }
    }
    (stacked, argmax)
}

/// In-network batched attention gate (owns the k×k gate convolution).
#[derive(Debug, Clone)]
pub(crate) struct AttnGate {
    pub conv: Conv2d,
}

pub(crate) struct AttnCache {
    stacked: Array4<f64>,
    argmax: Array3<usize>,
    gate: Array4<f64>,
}

impl AttnGate {
    pub fn new(ps: &mut ParamStore, name: &str, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnGate {
            conv: Conv2d::new(ps, name, 2, 1, kernel, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array4<f64>) -> (Array4<f64>, AttnCache) {
        let (n, c, _, _) = x.dim();
        let (stacked, argmax) = stack_mean_max(x);
        let gate = sigmoid(&self.conv.forward(ps, &stacked)); // (N, 1, H, W)
        let mut y = x.clone();
        for nn in 0..n {
            for cc in 0..c {
                let g = gate.slice(s![nn, 0, .., ..]);
                let mut plane = y.slice_mut(s![nn, cc, .., ..]);
                plane.zip_mut_with(&g, |p, &gv| *p *= gv);
            }
        }
        (
            y,
            AttnCache {
                stacked,
                argmax,
                gate,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        cache: &AttnCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        // Direct path: y = x ⊙ g.
        let mut dx = Array4::zeros((n, c, h, w));
        for nn in 0..n {
            for cc in 0..c {
                let g = cache.gate.slice(s![nn, 0, .., ..]);
                let d = dy.slice(s![nn, cc, .., ..]);
                let mut out = dx.slice_mut(s![nn, cc, .., ..]);
                ndarray::Zip::from(&mut out)
                    .and(&d)
                    .and(&g)
                    .for_each(|o, &dv, &gv| *o = dv * gv);
            }
        }
        // Gate path: dL/dgate = Σ_c dy ⊙ x, then through sigmoid and conv.
        let mut dgate = Array4::zeros((n, 1, h, w));
        for nn in 0..n {
            for cc in 0..c {
                let d = dy.slice(s![nn, cc, .., ..]);
                let xv = x.slice(s![nn, cc, .., ..]);
                let mut acc = dgate.slice_mut(s![nn, 0, .., ..]);
                ndarray::Zip::from(&mut acc)
                    .and(&d)
                    .and(&xv)
                    .for_each(|a, &dv, &xvv| *a += dv * xvv);
            }
        }
        let mut dpre = dgate;
        {
            let g = &cache.gate;
            ndarray::Zip::from(&mut dpre)
                .and(g)
                .for_each(|d, &gv| *d *= gv * (1.0 - gv));
        }
        let dstacked = self.conv.backward(ps, &cache.stacked, &dpre, grads);
        // Mean path spreads evenly; max path routes to the argmax channel.
        let inv_c = 1.0 / c as f64;
        for nn in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let dmean = dstacked[[nn, 0, y, xx]] * inv_c;
                    for cc in 0..c {
                        dx[[nn, cc, y, xx]] += dmean;
                    }
                    dx[[nn, cache.argmax[[nn, y, xx]], y, xx]] += dstacked[[nn, 1, y, xx]];
                }
            }
        }
        dx
    }
}
