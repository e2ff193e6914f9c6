//! 3x3, stride-2, zero-padded convolution on `[channel][row][col]` buffers.

use serde::{Deserialize, Serialize};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
const PAD: isize = 1;

/// Spatial output size of one block for an input of size `n`.
pub fn out_size(n: usize) -> usize {
    (n - 1) / STRIDE + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// x * sigmoid(x); smooth, so finite-difference checks stay clean.
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
}

impl ConvShape {
    pub fn h_out(&self) -> usize {
        out_size(self.h_in)
    }

    pub fn w_out(&self) -> usize {
        out_size(self.w_in)
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * KERNEL * KERNEL
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out() * self.w_out()
    }

    /// Output rows `oy` with valid input row `2 * oy + k - 1`, as `(oy, iy)`.
    fn taps(n_out: usize, n_in: usize, k: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..n_out).filter_map(move |o| {
            let i = (o * STRIDE) as isize + k as isize - PAD;
            (i >= 0 && (i as usize) < n_in).then_some((o, i as usize))
        })
    }
}

/// `out = conv(input, weight) + bias`, overwriting `out`.
pub fn forward(s: &ConvShape, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let (ho, wo) = (s.h_out(), s.w_out());
    let plane_in = s.h_in * s.w_in;
    let plane_out = ho * wo;
    for co in 0..s.c_out {
        let o = &mut out[co * plane_out..(co + 1) * plane_out];
        o.fill(bias[co]);
        for ci in 0..s.c_in {
            let x = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let w = weight[((co * s.c_in + ci) * KERNEL + ky) * KERNEL + kx];
                    for (oy, iy) in ConvShape::taps(ho, s.h_in, ky) {
                        let orow = &mut o[oy * wo..(oy + 1) * wo];
                        let xrow = &x[iy * s.w_in..(iy + 1) * s.w_in];
                        for (ox, ix) in ConvShape::taps(wo, s.w_in, kx) {
                            orow[ox] += w * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients and, when `grad_in` is given, the
/// input gradient.
pub fn backward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let (ho, wo) = (s.h_out(), s.w_out());
    let plane_in = s.h_in * s.w_in;
    let plane_out = ho * wo;
    for co in 0..s.c_out {
        let g = &grad_out[co * plane_out..(co + 1) * plane_out];
        grad_bias[co] += g.iter().sum::<f64>();
        for ci in 0..s.c_in {
            let x = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let widx = ((co * s.c_in + ci) * KERNEL + ky) * KERNEL + kx;
                    let w = weight[widx];
                    let mut gw = 0.0;
                    for (oy, iy) in ConvShape::taps(ho, s.h_in, ky) {
                        let grow = &g[oy * wo..(oy + 1) * wo];
                        let xrow = &x[iy * s.w_in..(iy + 1) * s.w_in];
                        for (ox, ix) in ConvShape::taps(wo, s.w_in, kx) {
                            gw += grow[ox] * xrow[ix];
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let girow = &mut gi[ci * plane_in + iy * s.w_in..ci * plane_in + (iy + 1) * s.w_in];
                            for (ox, ix) in ConvShape::taps(wo, s.w_in, kx) {
                                girow[ix] += w * grow[ox];
                            }
                        }
                    }
                    grad_weight[widx] += gw;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct definition with explicit zero padding, independent of the
    /// row/column tap iteration above.
    fn naive(s: &ConvShape, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo) = (s.h_out(), s.w_out());
        let mut out = vec![0.0; s.out_len()];
        for co in 0..s.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..s.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = 2 * oy as isize + ky as isize - 1;
                                let ix = 2 * ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= s.h_in as isize || ix >= s.w_in as isize {
                                    continue;
                                }
                                acc += weight[((co * s.c_in + ci) * 3 + ky) * 3 + kx]
                                    * input[(ci * s.h_in + iy as usize) * s.w_in + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn setup(seed: u64, s: &ConvShape) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        (v(s.c_in * s.h_in * s.w_in), v(s.weight_len()), v(s.c_out))
    }

    #[test]
    fn output_sizes() {
        assert_eq!(out_size(64), 32);
        assert_eq!(out_size(5), 3);
        assert_eq!(out_size(1), 1);
    }

    #[test]
    fn forward_matches_naive() {
        for (h, w) in [(7, 5), (8, 8), (1, 3)] {
            let s = ConvShape { c_in: 3, c_out: 2, h_in: h, w_in: w };
            let (x, wt, b) = setup(h as u64, &s);
            let mut out = vec![0.0; s.out_len()];
            forward(&s, &x, &wt, &b, &mut out);
            let oracle = naive(&s, &x, &wt, &b);
            for (a, b) in out.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = ConvShape { c_in: 2, c_out: 3, h_in: 6, w_in: 5 };
        let (x, wt, b) = setup(3, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe: Vec<f64> = (0..s.out_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
            naive(&s, x, wt, b).iter().zip(&probe).map(|(o, p)| o * p).sum()
        };
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; b.len()];
        let mut gx = vec![0.0; x.len()];
        backward(&s, &x, &wt, &probe, &mut gw, &mut gb, Some(&mut gx));
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for i in 0..wt.len() {
            let g = fd(&|d| {
                let mut w2 = wt.clone();
                w2[i] += d;
                loss(&x, &w2, &b)
            });
            assert!((g - gw[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let g = fd(&|d| {
                let mut x2 = x.clone();
                x2[i] += d;
                loss(&x2, &wt, &b)
            });
            assert!((g - gx[i]).abs() < 1e-7);
        }
        for i in 0..b.len() {
            let g = fd(&|d| {
                let mut b2 = b.clone();
                b2[i] += d;
                loss(&x, &wt, &b2)
            });
            assert!((g - gb[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Tanh, Activation::Silu, Activation::Relu] {
            for x in [-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8);
            }
        }
    }
}
