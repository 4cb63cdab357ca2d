//! Plain (non-reparameterized) layers and small graph helpers.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::optim::Param;
use crate::tensor::Tensor;

pub fn randn(rng: &mut ChaCha20Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u1: f32 = rng.gen_range(1e-7f32..1.0);
            let u2: f32 = rng.gen_range(0.0f32..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos() * std
        })
        .collect()
}

/// Token-major linear layer, weight (c_in, c_out).
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn init(c_in: usize, c_out: usize, bias: bool, rng: &mut ChaCha20Rng) -> Linear {
        let std = (1.0 / c_in as f32).sqrt();
        Linear {
            w: Param::new(randn(rng, c_in * c_out, std), &[c_in, c_out]),
            b: bias.then(|| Param::zeros(&[c_out])),
            c_in,
            c_out,
        }
    }

    pub fn init_zero(c_in: usize, c_out: usize, bias: bool) -> Linear {
        Linear {
            w: Param::zeros(&[c_in, c_out]),
            b: bias.then(|| Param::zeros(&[c_out])),
            c_in,
            c_out,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = vec![self.w.clone()];
        if let Some(b) = &self.b {
            ps.push(b.clone());
        }
        ps
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let y = h.matmul(&self.w.leaf())?;
        match &self.b {
            Some(b) => y.add(&b.leaf().reshape(&[1, self.c_out])?),
            None => Ok(y),
        }
    }
}

/// NCHW convolution layer with optional bias.
pub struct Conv2dLayer {
    pub k: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init(
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha20Rng,
    ) -> Conv2dLayer {
        let fan_in = c_in * ksize * ksize;
        let std = (2.0 / fan_in as f32).sqrt();
        Conv2dLayer {
            k: Param::new(randn(rng, c_out * fan_in, std), &[c_out, c_in, ksize, ksize]),
            b: Some(Param::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn init_zero(c_in: usize, c_out: usize, ksize: usize, stride: usize, pad: usize) -> Conv2dLayer {
        Conv2dLayer {
            k: Param::zeros(&[c_out, c_in, ksize, ksize]),
            b: Some(Param::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = vec![self.k.clone()];
        if let Some(b) = &self.b {
            ps.push(b.clone());
        }
        ps
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.k.leaf(), self.stride, self.pad)?;
        match &self.b {
            Some(b) => {
                let c = b.numel();
                let shape = if y.shape().len() == 4 {
                    vec![1, c, 1, 1]
                } else {
                    vec![c, 1, 1]
                };
                y.add(&b.leaf().reshape(&shape)?)
            }
            None => Ok(y),
        }
    }
}

/// Differentiable standard-normal CDF (tanh approximation, ~1e-3 accurate).
/// The coding path derives its fixed-point tables elsewhere; this one only
/// shapes training gradients.
pub fn normal_cdf_graph(x: &Tensor) -> Result<Tensor> {
    // Phi(x) ~ 0.5 (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    let x3 = x.mul(x)?.mul(x)?;
    let inner = x.add(&x3.scale(0.044715))?.scale(0.797_884_56);
    Ok(inner.tanh().affine(0.5, 0.5))
}

/// Per-element code length in bits of `sym` under N(mu, sigma), with the
/// discretized-Gaussian bin probability floored by `p_min`.
pub fn gaussian_bits(sym: &Tensor, mu: &Tensor, sigma: &Tensor, p_min: f32) -> Result<Tensor> {
    let centered = sym.sub(mu)?;
    let hi = normal_cdf_graph(&centered.affine(1.0, 0.5).div(sigma)?)?;
    let lo = normal_cdf_graph(&centered.affine(1.0, -0.5).div(sigma)?)?;
    let p = hi.sub(&lo)?.affine(1.0, p_min);
    Ok(p.log().scale(-std::f32::consts::LOG2_E))
}
