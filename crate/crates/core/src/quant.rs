//! Learnable channel-wise quantization with training-time relaxations.
//!
//! Forward and inverse scales are independent multipliers (no division in
//! either direction). Hard rounding is half-away-from-zero. Training uses
//! two relaxations: annealed soft-rounding plus additive noise inside the
//! rate term, and the straight-through estimator on the distortion path.

use crate::error::{CodecError, Result};
use crate::tensor::{round_half_away, Tensor};

/// 4.12 fixed point for inverse-scale side information.
pub const QSCALE_FRAC_BITS: u32 = 12;
const QSCALE_ONE: f32 = 4096.0;
pub const QSCALE_MIN: f32 = 1.0 / 4096.0;
pub const QSCALE_MAX: f32 = 65535.0 / 4096.0;

pub fn qscale_to_fp(x: f32) -> u16 {
    let v = (x.clamp(QSCALE_MIN, QSCALE_MAX) * QSCALE_ONE).round();
    (v as u32).clamp(1, u16::MAX as u32) as u16
}

pub fn qscale_from_fp(fp: u16) -> f32 {
    fp.max(1) as f32 / QSCALE_ONE
}

/// Channel-wise quantization scales for one latent level, plus the scalar
/// scales for that level's weight updates.
#[derive(Clone, Debug)]
pub struct QuantParams {
    /// Forward scales per channel, > 0.
    pub q: Vec<f32>,
    /// Inverse scales per channel, > 0; coded as 16-bit fixed point.
    pub q_inv: Vec<f32>,
    /// Forward scale for weight updates.
    pub q_psi: f32,
    /// Inverse scale for weight updates.
    pub q_psi_inv: f32,
}

impl QuantParams {
    pub fn identity(channels: usize) -> QuantParams {
        QuantParams {
            q: vec![1.0; channels],
            q_inv: vec![1.0; channels],
            q_psi: 1.0,
            q_psi_inv: 1.0,
        }
    }

    /// Snap inverse scales onto the 16-bit side-info grid.
    pub fn snap_to_grid(&mut self) {
        for v in &mut self.q_inv {
            *v = qscale_from_fp(qscale_to_fp(*v));
        }
        self.q_psi_inv = qscale_from_fp(qscale_to_fp(self.q_psi_inv));
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.iter().any(|&v| v <= 0.0)
            || self.q_inv.iter().any(|&v| v <= 0.0)
            || self.q_psi <= 0.0
            || self.q_psi_inv <= 0.0
        {
            return Err(CodecError::Param("quantization scales must be positive".into()));
        }
        Ok(())
    }
}

fn check_scales(q: &[f32]) -> Result<()> {
    if q.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(CodecError::Param("non-positive quantization scale".into()));
    }
    Ok(())
}

fn channel_count(shape: &[usize]) -> usize {
    shape[0]
}

/// Hard quantization: round(q[c] * y), half away from zero.
pub fn quantize(y: &Tensor, q: &[f32]) -> Result<Vec<i32>> {
    check_scales(q)?;
    let c = channel_count(y.shape());
    if c != q.len() {
        return Err(CodecError::Shape(format!(
            "{} channels vs {} scales",
            c,
            q.len()
        )));
    }
    let per = y.numel() / c;
    let mut out = Vec::with_capacity(y.numel());
    for (i, &v) in y.data().iter().enumerate() {
        out.push(round_half_away(q[i / per] * v) as i32);
    }
    Ok(out)
}

/// Inverse quantization: q_inv[c] * sym, a pure multiply.
pub fn dequantize(sym: &[i32], shape: &[usize], q_inv: &[f32]) -> Result<Tensor> {
    let c = channel_count(shape);
    if c != q_inv.len() {
        return Err(CodecError::Shape(format!(
            "{} channels vs {} inverse scales",
            c,
            q_inv.len()
        )));
    }
    let per = sym.len() / c;
    let data: Vec<f32> = sym
        .iter()
        .enumerate()
        .map(|(i, &s)| q_inv[i / per] * s as f32)
        .collect();
    Tensor::from_vec(data, shape)
}

/// Temperature schedule for soft rounding: log-linear descent.
#[derive(Clone, Debug)]
pub struct SoftRoundState {
    pub tau_start: f32,
    pub tau_end: f32,
    pub steps: usize,
}

impl SoftRoundState {
    pub fn new(steps: usize) -> SoftRoundState {
        SoftRoundState {
            tau_start: 0.3,
            tau_end: 1e-4,
            steps: steps.max(1),
        }
    }

    pub fn tau(&self, step: usize) -> f32 {
        if self.steps <= 1 {
            return self.tau_end;
        }
        let t = (step.min(self.steps - 1)) as f32 / (self.steps - 1) as f32;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

fn broadcast_channels(scales: &[f32], rank: usize) -> Result<Tensor> {
    let mut shape = vec![1usize; rank];
    shape[0] = scales.len();
    Tensor::from_slice(scales, &shape)
}

/// Differentiable soft rounding of q*y at temperature tau, in quantized
/// units. `noise` (same shape, values in (-0.5, 0.5)) is added on top;
/// pass zeros for the deterministic center.
pub fn soft_round_symbols(y: &Tensor, q: &[f32], tau: f32, noise: &Tensor) -> Result<Tensor> {
    check_scales(q)?;
    if tau <= 0.0 {
        return Err(CodecError::Param("soft-round temperature must be > 0".into()));
    }
    let qb = broadcast_channels(q, y.shape().len())?;
    let z = y.mul(&qb)?;
    let fl = z.floor_detached();
    // s(z) = floor(z) + tanh(delta/tau) / (2 tanh(0.5/tau)) + 0.5
    let delta = z.sub(&fl)?.affine(1.0, -0.5);
    let denom = 2.0 * (0.5f32 / tau).tanh();
    let soft = fl
        .add(&delta.scale(1.0 / tau).tanh().scale(1.0 / denom))?
        .affine(1.0, 0.5);
    soft.add(noise)
}

/// Soft surrogate of quantize-then-dequantize in the value domain.
pub fn soft_round(y: &Tensor, q: &[f32], q_inv: &[f32], tau: f32, noise: &Tensor) -> Result<Tensor> {
    check_scales(q_inv)?;
    let sym = soft_round_symbols(y, q, tau, noise)?;
    let qi = broadcast_channels(q_inv, y.shape().len())?;
    sym.mul(&qi)
}

/// Straight-through round trip: forward equals the hard quantize/dequantize
/// exactly; the backward pass treats rounding as identity so gradients are
/// q_inv[c] * q[c] per element.
pub fn ste_round(y: &Tensor, q: &[f32], q_inv: &[f32]) -> Result<Tensor> {
    check_scales(q)?;
    check_scales(q_inv)?;
    let rank = y.shape().len();
    let qb = broadcast_channels(q, rank)?;
    let qi = broadcast_channels(q_inv, rank)?;
    y.mul(&qb)?.ste_round().mul(&qi)
}

fn channels_view(scales: &Tensor, rank: usize) -> Result<Tensor> {
    let mut shape = vec![1usize; rank];
    shape[0] = scales.numel();
    scales.reshape(&shape)
}

/// Graph variants: scales are tensors so gradients reach learned QPs.
pub fn soft_round_symbols_t(y: &Tensor, q: &Tensor, tau: f32, noise: &Tensor) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(CodecError::Param("soft-round temperature must be > 0".into()));
    }
    let qb = channels_view(q, y.shape().len())?;
    let z = y.mul(&qb)?;
    let fl = z.floor_detached();
    let delta = z.sub(&fl)?.affine(1.0, -0.5);
    let denom = 2.0 * (0.5f32 / tau).tanh();
    let soft = fl
        .add(&delta.scale(1.0 / tau).tanh().scale(1.0 / denom))?
        .affine(1.0, 0.5);
    soft.add(noise)
}

/// Graph STE round trip with tensor scales.
pub fn ste_round_t(y: &Tensor, q: &Tensor, q_inv: &Tensor) -> Result<Tensor> {
    let rank = y.shape().len();
    let qb = channels_view(q, rank)?;
    let qi = channels_view(q_inv, rank)?;
    y.mul(&qb)?.ste_round().mul(&qi)
}

/// Snap values onto the 16-bit fixed-point grid with a straight-through
/// gradient (forward matches `qscale_from_fp(qscale_to_fp(x))` up to the
/// clamp region).
pub fn ste_snap_qscale(x: &Tensor) -> Tensor {
    x.affine(4096.0, 0.0).ste_round().affine(1.0 / 4096.0, 0.0)
}
