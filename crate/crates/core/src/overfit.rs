//! Two-phase optimization: offline pretraining of the full model on a
//! procedural corpus, and per-frame online overfitting of latents,
//! encoder/motion weights, quantization parameters, and entropy-model
//! residuals.
//!
//! Rate terms use annealed soft rounding plus noise; the distortion path
//! sees straight-through hard rounding. The hard-quantized objective is
//! evaluated on a fixed cadence with the exact fixed-point tables and the
//! best iterate's coded materials are what the packet carries, so
//! overfitting can only improve on the warm start.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::bitstream::format::{write_sequence, FramePacket, SequenceHeader};
use crate::bitstream::{checkpoint_hash, write_checkpoint};
use crate::entropy::model::{code_level, NullSink};
use crate::entropy::{decoded_mask, CtxInputs};
use crate::error::{CodecError, Result};
use crate::metrics::ms_ssim_graph;
use crate::model::{CodecConfig, CodecModel, DeployModel};
use crate::nn::gaussian_bits;
use crate::optim::{begin_step, Adam, Param, ParamGroup, Snapshot};
use crate::pipeline::codec::{FrameCoder, LevelEncodeInput};
use crate::pipeline::decoder::{decode_frame, DecodeMode, TSource};
use crate::pipeline::gop::{build_gop, schedule_q_glob, FrameKind, FrameRecord, GopMode};
use crate::pipeline::motion::MotionPyramid;
use crate::pipeline::{crop, pad_to_multiple};
use crate::quant::{
    qscale_from_fp, qscale_to_fp, quantize, ste_round_t, ste_snap_qscale, soft_round_symbols_t,
    SoftRoundState,
};
use crate::range_coder::value_bits;
use crate::tensor::{backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionKind {
    Mse,
    MsSsim,
}

/// Training/overfitting distortion. MSE for PSNR-oriented models,
/// 200 (1 - MS-SSIM) for perceptual ones.
pub fn distortion(x: &Tensor, xhat: &Tensor, kind: DistortionKind) -> Result<Tensor> {
    if x.shape() != xhat.shape() {
        return Err(CodecError::Shape(format!(
            "distortion shapes {:?} vs {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    match kind {
        DistortionKind::Mse => Ok(x.sub(xhat)?.square()?.mean_all()),
        DistortionKind::MsSsim => Ok(ms_ssim_graph(x, xhat)?.affine(-200.0, 200.0)),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RdConfig {
    pub lambda: f32,
    pub distortion: DistortionKind,
    pub steps_i: usize,
    pub steps_pb: usize,
    pub lr_latents: f32,
    pub lr_network: f32,
    /// Fraction of steps that refine the encoder/motion nets before the
    /// latents detach into free variables.
    pub phase1_frac: f32,
    pub eval_every: usize,
    /// Stochastic rate estimation: decode steps sampled per level per
    /// optimizer step (8 = exact).
    pub rate_steps_per_level: usize,
    pub seed: u64,
}

impl Default for RdConfig {
    fn default() -> Self {
        RdConfig {
            lambda: 400.0,
            distortion: DistortionKind::Mse,
            steps_i: 300,
            steps_pb: 100,
            lr_latents: 1e-3,
            lr_network: 1e-4,
            phase1_frac: 0.3,
            eval_every: 10,
            rate_steps_per_level: 2,
            seed: 7,
        }
    }
}

/// Per-level quantization-scale state carried across frames (warm start).
#[derive(Clone, Debug)]
pub struct WarmQp {
    pub log_q: Vec<Vec<f32>>,
    pub log_q_inv: Vec<Vec<f32>>,
    pub log_q_psi: Vec<f32>,
    pub log_q_psi_inv: Vec<f32>,
}

impl WarmQp {
    pub fn from_model(model: &DeployModel) -> WarmQp {
        WarmQp {
            log_q: model.qp_init.iter().map(|q| q.log_q.clone()).collect(),
            log_q_inv: model.qp_init.iter().map(|q| q.log_q_inv.clone()).collect(),
            log_q_psi: model.qp_init.iter().map(|q| q.log_q_psi).collect(),
            log_q_psi_inv: model.qp_init.iter().map(|q| q.log_q_psi_inv).collect(),
        }
    }
}

/// Result of overfitting one frame.
pub struct FrameOutcome {
    pub inputs: Vec<LevelEncodeInput>,
    /// Hard Eq-6 objective of the warm start (step 0).
    pub obj_initial: f64,
    /// Hard Eq-6 objective of the returned (best) iterate.
    pub obj_best: f64,
    /// Soft (training) objective at the final annealing temperature.
    pub obj_soft_final: f64,
    /// Soft rate (bits) of the last step, at the final temperature.
    pub soft_rate_final: f64,
    /// Exact table rate (bits) of the last step's hard materials.
    pub hard_rate_final: f64,
}

/// Additive-noise amplitude at temperature tau (1 at the schedule start,
/// ~0 at the end).
fn noise_amp(tau: f32) -> f32 {
    (tau / 0.3).clamp(0.0, 1.0)
}

fn exp_clamped(v: &[f32]) -> Vec<f32> {
    v.iter().map(|x| x.exp().clamp(1e-3, 64.0)).collect()
}

/// Constant side-information bits of one frame (inverse scales).
fn side_bits(cfg: &CodecConfig) -> f64 {
    (cfg.levels * (2 * cfg.c_lat) * 16 + cfg.levels * 16) as f64
}

/// Hard-quantized coded materials from current values.
#[allow(clippy::too_many_arguments)]
fn hard_materials(
    coder: &FrameCoder,
    y_data: &[Vec<f32>],
    y_shapes: &[Vec<usize>],
    qp: &WarmQp,
    deltas: Option<&[Param]>,
) -> Result<Vec<LevelEncodeInput>> {
    let levels = coder.model.cfg.levels;
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let q = exp_clamped(&qp.log_q[l]);
        let q_inv: Vec<f32> = exp_clamped(&qp.log_q_inv[l])
            .iter()
            .map(|&v| qscale_from_fp(qscale_to_fp(v)))
            .collect();
        let y = Tensor::from_slice(&y_data[l], &y_shapes[l])?;
        let symbols = quantize(&y, &q)?;
        let (delta_symbols, q_psi_inv) = match deltas {
            Some(ds) if coder.model.cfg.reparam_overfit => {
                let qp_psi = qp.log_q_psi[l].exp().clamp(1e-3, 64.0);
                let qi = qscale_from_fp(qscale_to_fp(qp.log_q_psi_inv[l].exp().clamp(1e-3, 64.0)));
                let d = ds[l].values();
                let syms: Vec<i32> = d
                    .iter()
                    .map(|&v| crate::tensor::round_half_away(qp_psi * v) as i32)
                    .collect();
                (syms, qi)
            }
            _ => (Vec::new(), 1.0),
        };
        out.push(LevelEncodeInput {
            symbols,
            q_inv,
            delta_symbols,
            q_psi_inv,
        });
    }
    Ok(out)
}

/// Exact hard objective of coded materials: table rates (replayed with the
/// null coder), weight-update rates under the prior, side info, and the
/// hard-decode distortion.
fn hard_objective(
    coder: &FrameCoder,
    record: &FrameRecord,
    x: &Tensor,
    q_glob: f32,
    rd: &RdConfig,
    inputs: &[LevelEncodeInput],
) -> Result<f64> {
    let cfg = coder.model.cfg;
    let levels = cfg.levels;
    let c2 = 2 * cfg.c_lat;
    let (ph, pw) = coder.padded_dims();
    let extents = cfg.grid_extents(ph, pw)?;
    let prior_table = coder.model.prior.pmf_table();
    let grouping = coder.grouping;
    let steps = crate::entropy::schedule_quadtree(&grouping);
    let shrinks = cfg.level_shrinks()?;

    let mut bits = side_bits(&cfg);
    let mut deq: Vec<Option<Tensor>> = vec![None; levels];
    let mut cache = crate::range_coder::GaussTableCache::new();
    for step_idx in 0..levels {
        let l = levels - 1 - step_idx;
        let (gh, gw) = extents[l];
        let li = &inputs[l];
        let delta_vals: Option<Vec<f32>> = if li.delta_symbols.is_empty() {
            None
        } else {
            for &s in &li.delta_symbols {
                bits += value_bits(&prior_table, s);
            }
            Some(li.delta_symbols.iter().map(|&s| li.q_psi_inv * s as f32).collect())
        };
        let layers = coder.model.entropy.apply_weight_update(delta_vals.as_deref())?;
        let hier = match deq[l + 1..].iter().flatten().next() {
            Some(c) => Some(c.resize_bilinear(gh, gw)?),
            None => None,
        };
        let t1 = match record.ref1 {
            Some(d) => Some(coder.buffer.get(d)?.latents[l].detach()),
            None => None,
        };
        let t2 = match record.ref2 {
            Some(d) => Some(coder.buffer.get(d)?.latents[l].detach()),
            None => None,
        };
        let out = code_level(
            &coder.model.entropy,
            &layers,
            &grouping,
            &steps,
            &[c2, gh, gw],
            &li.q_inv,
            hier.as_ref(),
            t1.as_ref(),
            t2.as_ref(),
            &mut NullSink,
            &mut NullSink,
            Some(&li.symbols),
            &mut cache,
        )?;
        bits += out.est_bits_gamma + out.est_bits_beta;
        deq[l] = Some(out.dequant);
    }

    let latents: Vec<Tensor> = deq.into_iter().map(Option::unwrap).collect();
    let ref_frame = match record.kind {
        FrameKind::I => None,
        _ => {
            let d = record
                .ref1
                .ok_or_else(|| CodecError::State("inter frame without ref".into()))?;
            Some(coder.buffer.get(d)?.recon.detach())
        }
    };
    let t_source = match &ref_frame {
        None => TSource::Bias,
        Some(r) => TSource::Reference(r),
    };
    let recon = decode_frame(
        &DecodeMode::Deploy { w: &coder.model.decoder },
        &latents,
        &t_source,
        &shrinks,
        ph,
        pw,
    )?;
    let recon = crop(&recon, coder.frame_h, coder.frame_w)?;
    let d = distortion(x, &recon, rd.distortion)?.item() as f64;
    let pixels = (coder.frame_h * coder.frame_w) as f64;
    Ok(bits / pixels + q_glob as f64 * rd.lambda as f64 * d)
}

/// Differentiable rate of one level under the schedule, with decode steps
/// subsampled for speed (scaled back to the full-step total). `forward`
/// evaluates the entropy network in whichever mode the caller trains.
#[allow(clippy::too_many_arguments)]
fn level_rate_graph<F>(
    grouping: &crate::entropy::ChannelGrouping,
    y: &Tensor,
    q_t: &Tensor,
    q_inv_t: &Tensor,
    tau: f32,
    hier: Option<&Tensor>,
    t1: Option<&Tensor>,
    t2: Option<&Tensor>,
    chosen: &[usize],
    rng: &mut ChaCha20Rng,
    forward: F,
) -> Result<(Tensor, Tensor)>
where
    F: Fn(&CtxInputs) -> Result<(Tensor, Tensor)>,
{
    let shape = y.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let steps = crate::entropy::schedule_quadtree(grouping);
    // Noise amplitude anneals with the temperature so the late-stage soft
    // rate converges to the exact coded rate.
    let amp = noise_amp(tau);
    let noise_data: Vec<f32> = (0..y.numel()).map(|_| rng.gen_range(-0.5f32..0.5) * amp).collect();
    let noise = Tensor::from_vec(noise_data, &shape)?;
    let soft_syms = soft_round_symbols_t(y, q_t, tau, &noise)?;
    let ste_deq = ste_round_t(y, q_t, q_inv_t)?;

    let mut total: Option<Tensor> = None;
    for &si in chosen {
        let before = decoded_mask(grouping, h, w, &steps, si);
        let after = decoded_mask(grouping, h, w, &steps, si + 1);
        let slot: Vec<f32> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
        let mask_t = Tensor::from_vec(before, &shape)?;
        let slot_t = Tensor::from_vec(slot, &shape)?;
        let ctx = CtxInputs {
            cur: ste_deq.mul(&mask_t)?,
            hier: hier.cloned(),
            t1: t1.cloned(),
            t2: t2.cloned(),
        };
        let (mu, sigma) = forward(&ctx)?;
        let bits = gaussian_bits(&soft_syms, &mu, &sigma, 1.0 / 65536.0)?;
        let step_bits = bits.mul(&slot_t)?.sum_all();
        total = Some(match total {
            Some(t) => t.add(&step_bits)?,
            None => step_bits,
        });
    }
    let scale = steps.len() as f32 / chosen.len() as f32;
    Ok((total.unwrap().scale(scale), ste_deq))
}

fn pick_steps(total: usize, want: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if want >= total {
        return (0..total).collect();
    }
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..want {
        let j = i + (rng.gen_range(0..(total - i) as u32) as usize);
        idx.swap(i, j);
    }
    let mut chosen = idx[..want].to_vec();
    chosen.sort_unstable();
    chosen
}

struct FrameTrainables {
    latents: Vec<Param>,
    log_q: Vec<Param>,
    log_q_inv: Vec<Param>,
    log_q_psi: Vec<Param>,
    log_q_psi_inv: Vec<Param>,
    deltas: Vec<Param>,
}

impl FrameTrainables {
    fn all(&self) -> Vec<Param> {
        let mut ps = self.latents.clone();
        ps.extend(self.log_q.iter().cloned());
        ps.extend(self.log_q_inv.iter().cloned());
        ps.extend(self.log_q_psi.iter().cloned());
        ps.extend(self.log_q_psi_inv.iter().cloned());
        ps.extend(self.deltas.iter().cloned());
        ps
    }

    fn qp_snapshot(&self) -> WarmQp {
        WarmQp {
            log_q: self.log_q.iter().map(|p| p.values()).collect(),
            log_q_inv: self.log_q_inv.iter().map(|p| p.values()).collect(),
            log_q_psi: self.log_q_psi.iter().map(|p| p.values()[0]).collect(),
            log_q_psi_inv: self.log_q_psi_inv.iter().map(|p| p.values()[0]).collect(),
        }
    }
}

/// Overfit one frame against the Eq-6 objective and return the coded
/// materials of the best hard-quantized iterate.
pub fn overfit_frame(
    coder: &mut FrameCoder,
    record: &FrameRecord,
    x: &Tensor,
    q_glob: f32,
    rd: &RdConfig,
) -> Result<FrameOutcome> {
    let warm_net: Vec<Param> = {
        let mut ps = coder.model.encoder.params();
        ps.extend(coder.model.motion.params());
        ps
    };
    let warm_snapshot = Snapshot::take(&warm_net);
    let mut lr_factor = 1.0f32;
    for attempt in 0..2 {
        match overfit_frame_attempt(coder, record, x, q_glob, rd, lr_factor, attempt as u64) {
            Ok(out) => return Ok(out),
            Err(CodecError::Overfit(msg)) if attempt == 0 => {
                // NaN loss: roll back to the warm start, halve the rate.
                warm_snapshot.restore();
                lr_factor = 0.5;
                let _ = msg;
            }
            Err(e) => return Err(e),
        }
    }
    Err(CodecError::Overfit("diverged twice".into()))
}

#[allow(clippy::too_many_arguments)]
fn overfit_frame_attempt(
    coder: &mut FrameCoder,
    record: &FrameRecord,
    x: &Tensor,
    q_glob: f32,
    rd: &RdConfig,
    lr_factor: f32,
    attempt: u64,
) -> Result<FrameOutcome> {
    let cfg = coder.model.cfg;
    let levels = cfg.levels;
    let align = cfg.alignment();
    let (x_pad, _, _) = pad_to_multiple(x, align)?;
    let (ph, pw) = coder.padded_dims();
    let extents = cfg.grid_extents(ph, pw)?;
    let shrinks = cfg.level_shrinks()?;
    let pixels = (coder.frame_h * coder.frame_w) as f64;
    let total_steps = match record.kind {
        FrameKind::I => rd.steps_i,
        _ => rd.steps_pb,
    };
    let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(
        rd.seed ^ (record.display as u64) << 16 ^ attempt << 40,
    );

    // Reference reconstructions and motion pyramids (encoder side).
    let refs: Vec<Option<Tensor>> = [record.ref1, record.ref2]
        .iter()
        .map(|r| match r {
            Some(d) => coder.buffer.get(*d).map(|f| Some(f.recon.detach())),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let warm = WarmQp::from_model(&coder.model);

    let delta_len = coder.model.entropy.delta_len();
    let use_delta = cfg.reparam_overfit;
    let tr = FrameTrainables {
        latents: (0..levels)
            .map(|l| Param::zeros(&[2 * cfg.c_lat, extents[l].0, extents[l].1]))
            .collect(),
        log_q: warm.log_q.iter().map(|v| Param::new(v.clone(), &[v.len()])).collect(),
        log_q_inv: warm
            .log_q_inv
            .iter()
            .map(|v| Param::new(v.clone(), &[v.len()]))
            .collect(),
        log_q_psi: warm.log_q_psi.iter().map(|&v| Param::new(vec![v], &[1])).collect(),
        log_q_psi_inv: warm
            .log_q_psi_inv
            .iter()
            .map(|&v| Param::new(vec![v], &[1]))
            .collect(),
        deltas: (0..levels).map(|_| Param::zeros(&[delta_len])).collect(),
    };

    let phase1_steps = ((total_steps as f32) * rd.phase1_frac).round() as usize;
    let soft_state = SoftRoundState::new(total_steps.max(1));

    // Encoder forward for the current warm weights (also the zero-step
    // materials source).
    let encoder_latents = |coder: &FrameCoder, with_graph: bool| -> Result<Vec<Tensor>> {
        let pyrs: Vec<Option<MotionPyramid>> = refs
            .iter()
            .map(|r| match r {
                Some(rf) => coder.model.motion.estimate(&x_pad, rf).map(Some),
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        let refs_opt: Vec<Option<&MotionPyramid>> = pyrs.iter().map(|p| p.as_ref()).collect();
        let ys = coder.model.encoder.forward(&x_pad, &refs_opt, &extents)?;
        if with_graph {
            Ok(ys)
        } else {
            Ok(ys.iter().map(|y| y.detach()).collect())
        }
    };

    // Step-0 (warm start) materials and objective.
    let y0: Vec<Tensor> = encoder_latents(coder, false)?;
    let y0_data: Vec<Vec<f32>> = y0.iter().map(|t| t.data().to_vec()).collect();
    let y0_shapes: Vec<Vec<usize>> = y0.iter().map(|t| t.shape().to_vec()).collect();
    let init_qp = tr.qp_snapshot();
    let init_inputs = hard_materials(coder, &y0_data, &y0_shapes, &init_qp, None)?;
    let obj_initial = hard_objective(coder, record, x, q_glob, rd, &init_inputs)?;

    let mut best_obj = obj_initial;
    let mut best_inputs = init_inputs;
    if phase1_steps == 0 {
        for (p, y) in tr.latents.iter().zip(&y0) {
            p.set_values(y.data().to_vec());
        }
    }

    let mut opt = Adam::new(vec![
        ParamGroup {
            params: {
                let mut v = tr.latents.clone();
                v.extend(tr.log_q.iter().cloned());
                v.extend(tr.log_q_inv.iter().cloned());
                v.extend(tr.log_q_psi.iter().cloned());
                v.extend(tr.log_q_psi_inv.iter().cloned());
                v
            },
            lr: rd.lr_latents * lr_factor,
        },
        ParamGroup {
            params: {
                let mut v = coder.model.encoder.params();
                v.extend(coder.model.motion.params());
                v.extend(tr.deltas.iter().cloned());
                v
            },
            lr: rd.lr_network * lr_factor,
        },
    ])
    .with_cosine_decay(total_steps.max(1));

    let mut all_params = tr.all();
    all_params.extend(coder.model.encoder.params());
    all_params.extend(coder.model.motion.params());

    let mut obj_soft_final = obj_initial;
    let mut soft_rate_last = 0.0f64;
    let mut hard_rate_last = 0.0f64;
    for step in 0..total_steps {
        begin_step(&all_params);
        let in_phase1 = step < phase1_steps;
        if step == phase1_steps && phase1_steps > 0 {
            let seed = encoder_latents(coder, false)?;
            for (p, y) in tr.latents.iter().zip(&seed) {
                p.set_values(y.data().to_vec());
            }
            begin_step(&all_params);
        }
        let tau = soft_state.tau(step);

        let ys: Vec<Tensor> = if in_phase1 {
            encoder_latents(coder, true)?
        } else {
            tr.latents.iter().map(|p| p.leaf()).collect()
        };

        // Rates, coarse to fine so the hierarchical context exists.
        let mut rate: Option<Tensor> = None;
        let mut ste_levels: Vec<Option<Tensor>> = vec![None; levels];
        for idx in 0..levels {
            let l = levels - 1 - idx;
            let q_t = tr.log_q[l].leaf().exp();
            let q_inv_t = ste_snap_qscale(&tr.log_q_inv[l].leaf().exp());
            let hier = match ste_levels[l + 1..].iter().flatten().next() {
                Some(c) => Some(c.resize_bilinear(extents[l].0, extents[l].1)?),
                None => None,
            };
            let t1 = match record.ref1 {
                Some(d) => Some(coder.buffer.get(d)?.latents[l].detach()),
                None => None,
            };
            let t2 = match record.ref2 {
                Some(d) => Some(coder.buffer.get(d)?.latents[l].detach()),
                None => None,
            };
            let chosen = pick_steps(8, rd.rate_steps_per_level.max(1), &mut rng);

            let delta_tensors: Option<[Tensor; 5]> = if use_delta {
                let qp_t = tr.log_q_psi[l].leaf().exp();
                let qpi_t = ste_snap_qscale(&tr.log_q_psi_inv[l].leaf().exp());
                // Scalar scales broadcast over the flat update vector.
                let d_used = tr.deltas[l]
                    .leaf()
                    .mul(&qp_t)?
                    .ste_round()
                    .mul(&qpi_t)?;
                let zero = vec![0.0f32; delta_len];
                let lens: Vec<usize> = coder
                    .model
                    .entropy
                    .split_delta(&zero)?
                    .iter()
                    .map(|p| p.len())
                    .collect();
                let mut offs = 0usize;
                let mut arr: Vec<Tensor> = Vec::with_capacity(5);
                for len in lens {
                    arr.push(d_used.slice_axis(0, offs, len)?);
                    offs += len;
                }
                Some([
                    arr[0].clone(),
                    arr[1].clone(),
                    arr[2].clone(),
                    arr[3].clone(),
                    arr[4].clone(),
                ])
            } else {
                None
            };

            let zero_layers = match &delta_tensors {
                None => Some(coder.model.entropy.apply_weight_update(None)?),
                Some(_) => None,
            };
            let entropy = &coder.model.entropy;
            let (r, ste) = level_rate_graph(
                &coder.grouping,
                &ys[l],
                &q_t,
                &q_inv_t,
                tau,
                hier.as_ref(),
                t1.as_ref(),
                t2.as_ref(),
                &chosen,
                &mut rng,
                |ctx| match &delta_tensors {
                    Some(d) => entropy.forward_with_deltas(ctx, d),
                    None => entropy.forward_coding(zero_layers.as_ref().unwrap(), ctx),
                },
            )?;
            rate = Some(match rate {
                Some(t) => t.add(&r)?,
                None => r,
            });

            // Weight-update rate under the frozen factorized prior.
            if use_delta {
                let qp_t = tr.log_q_psi[l].leaf().exp();
                let amp = noise_amp(tau);
                let noise_d: Vec<f32> =
                    (0..delta_len).map(|_| rng.gen_range(-0.5f32..0.5) * amp).collect();
                let noise_t = Tensor::from_vec(noise_d, &[delta_len])?;
                // Soft symbols of the update under its scalar scale.
                let z = tr.deltas[l].leaf().mul(&qp_t)?;
                let fl = z.floor_detached();
                let dlt = z.sub(&fl)?.affine(1.0, -0.5);
                let denom = 2.0 * (0.5f32 / tau).tanh();
                let soft_d = fl
                    .add(&dlt.scale(1.0 / tau).tanh().scale(1.0 / denom))?
                    .affine(1.0, 0.5)
                    .add(&noise_t)?;
                let dbits = coder.model.prior.bits_graph(&soft_d)?.sum_all();
                rate = Some(rate.unwrap().add(&dbits)?);
            }

            ste_levels[l] = Some(ste);
        }

        // Distortion through the frozen deploy decoder (STE latents).
        let latents_ste: Vec<Tensor> = ste_levels.into_iter().map(Option::unwrap).collect();
        let recon_padded = match record.kind {
            FrameKind::I => decode_frame(
                &DecodeMode::Deploy { w: &coder.model.decoder },
                &latents_ste,
                &TSource::Bias,
                &shrinks,
                ph,
                pw,
            )?,
            _ => {
                let r = refs[0]
                    .as_ref()
                    .ok_or_else(|| CodecError::State("inter frame without ref".into()))?;
                decode_frame(
                    &DecodeMode::Deploy { w: &coder.model.decoder },
                    &latents_ste,
                    &TSource::Reference(r),
                    &shrinks,
                    ph,
                    pw,
                )?
            }
        };
        let recon = crop(&recon_padded, coder.frame_h, coder.frame_w)?;
        let d = distortion(x, &recon, rd.distortion)?;

        let rate_t = rate.unwrap();
        let rate_value = rate_t.item();
        let loss = rate_t
            .scale(1.0 / pixels as f32)
            .add(&d.scale(q_glob * rd.lambda))?
            .sum_all();
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(CodecError::Overfit(format!(
                "non-finite loss at step {}",
                step
            )));
        }
        obj_soft_final = loss_val as f64 + side_bits(&cfg) / pixels;
        soft_rate_last = rate_value as f64;
        let grads = backward(&loss)?;
        opt.step(&grads);

        // Best-iterate tracking on the exact hard objective.
        let last = step + 1 == total_steps;
        if (step + 1) % rd.eval_every.max(1) == 0 || last {
            let y_now: Vec<Tensor> = if step + 1 <= phase1_steps {
                encoder_latents(coder, false)?
            } else {
                tr.latents.iter().map(|p| p.leaf().detach()).collect()
            };
            let y_data: Vec<Vec<f32>> = y_now.iter().map(|t| t.data().to_vec()).collect();
            let y_shapes: Vec<Vec<usize>> = y_now.iter().map(|t| t.shape().to_vec()).collect();
            let qp_now = tr.qp_snapshot();
            let mats = hard_materials(
                coder,
                &y_data,
                &y_shapes,
                &qp_now,
                use_delta.then_some(tr.deltas.as_slice()),
            )?;
            let obj = hard_objective(coder, record, x, q_glob, rd, &mats)?;
            if last {
                hard_rate_last = hard_rate_bits(coder, record, &mats)?;
            }
            if obj.is_finite() && obj < best_obj {
                best_obj = obj;
                best_inputs = mats;
            }
        }
    }

    Ok(FrameOutcome {
        inputs: best_inputs,
        obj_initial,
        obj_best: best_obj,
        obj_soft_final,
        soft_rate_final: soft_rate_last,
        hard_rate_final: hard_rate_last,
    })
}

/// Exact coded bits (latents plus weight updates, no side info) of a
/// materials set, replayed against the fixed-point tables.
fn hard_rate_bits(
    coder: &FrameCoder,
    record: &FrameRecord,
    inputs: &[LevelEncodeInput],
) -> Result<f64> {
    let cfg = coder.model.cfg;
    let levels = cfg.levels;
    let c2 = 2 * cfg.c_lat;
    let (ph, pw) = coder.padded_dims();
    let extents = cfg.grid_extents(ph, pw)?;
    let prior_table = coder.model.prior.pmf_table();
    let grouping = coder.grouping;
    let steps = crate::entropy::schedule_quadtree(&grouping);
    let mut bits = 0.0f64;
    let mut deq: Vec<Option<Tensor>> = vec![None; levels];
    let mut cache = crate::range_coder::GaussTableCache::new();
    for step_idx in 0..levels {
        let l = levels - 1 - step_idx;
        let (gh, gw) = extents[l];
        let li = &inputs[l];
        let delta_vals: Option<Vec<f32>> = if li.delta_symbols.is_empty() {
            None
        } else {
            for &s in &li.delta_symbols {
                bits += value_bits(&prior_table, s);
            }
            Some(li.delta_symbols.iter().map(|&s| li.q_psi_inv * s as f32).collect())
        };
        let layers = coder.model.entropy.apply_weight_update(delta_vals.as_deref())?;
        let hier = match deq[l + 1..].iter().flatten().next() {
            Some(c) => Some(c.resize_bilinear(gh, gw)?),
            None => None,
        };
        let t1 = match record.ref1 {
            Some(d) => Some(coder.buffer.get(d)?.latents[l].detach()),
            None => None,
        };
        let t2 = match record.ref2 {
            Some(d) => Some(coder.buffer.get(d)?.latents[l].detach()),
            None => None,
        };
        let out = code_level(
            &coder.model.entropy,
            &layers,
            &grouping,
            &steps,
            &[c2, gh, gw],
            &li.q_inv,
            hier.as_ref(),
            t1.as_ref(),
            t2.as_ref(),
            &mut NullSink,
            &mut NullSink,
            Some(&li.symbols),
            &mut cache,
        )?;
        bits += out.est_bits_gamma + out.est_bits_beta;
        deq[l] = Some(out.dequant);
    }
    Ok(bits)
}

/// Everything produced by encoding a sequence.
pub struct EncodeOutcome {
    pub bytes: Vec<u8>,
    pub header: SequenceHeader,
    pub packets: Vec<FramePacket>,
    /// Reconstructions in display order.
    pub recons: Vec<Tensor>,
    /// Per frame, decode order: (display, kind, packet bytes, obj_initial,
    /// obj_best).
    pub frame_stats: Vec<(usize, FrameKind, usize, f64, f64)>,
}

/// Encode a full sequence: GOP scheduling, per-frame overfitting, packets.
pub fn encode_sequence(
    model: DeployModel,
    frames: &[Tensor],
    mode: GopMode,
    gop_n: usize,
    intra_period: usize,
    rd: &RdConfig,
) -> Result<EncodeOutcome> {
    if frames.is_empty() {
        return Err(CodecError::Param("no frames to encode".into()));
    }
    let shape = frames[0].shape().to_vec();
    for f in frames {
        if f.shape() != shape {
            return Err(CodecError::Shape("frame dimensions differ".into()));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    let gop = build_gop(mode, gop_n, intra_period, frames.len())?;
    gop.validate_causality()?;
    let cfg = model.cfg;
    let qtable = cfg.qglob;
    let ckpt_hash = checkpoint_hash(&write_checkpoint(&model));
    let mut coder = FrameCoder::new(model, h, w)?;

    let mut packets = Vec::with_capacity(gop.len());
    let mut recons: Vec<Option<Tensor>> = vec![None; frames.len()];
    let mut stats = Vec::with_capacity(gop.len());
    let records = gop.frames.clone();
    for (pos, record) in records.iter().enumerate() {
        let x = &frames[record.display];
        let q_glob = schedule_q_glob(&qtable, gop.mode, record);
        let outcome = overfit_frame(&mut coder, record, x, q_glob, rd)?;
        let coded = coder.encode_frame(record, q_glob, &outcome.inputs)?;
        let packet_bytes = coded.packet.framed_len();
        stats.push((
            record.display,
            record.kind,
            packet_bytes,
            outcome.obj_initial,
            outcome.obj_best,
        ));
        recons[record.display] = Some(coded.recon.clone());
        packets.push(coded.packet);
        coder.buffer.retain_needed(&gop, pos + 1);
    }

    let header = sequence_header_for(&coder, &gop, frames.len(), ckpt_hash);
    let bytes = write_sequence(&header, &packets);
    Ok(EncodeOutcome {
        bytes,
        header,
        packets,
        recons: recons.into_iter().map(Option::unwrap).collect(),
        frame_stats: stats,
    })
}

fn sequence_header_for(
    coder: &FrameCoder,
    gop: &crate::pipeline::gop::GopStructure,
    frames: usize,
    ckpt_hash: [u8; 32],
) -> SequenceHeader {
    let cfg = &coder.model.cfg;
    let bases: Vec<u16> = cfg
        .base_schedule()
        .map(|s| s.bases().iter().map(|&b| b as u16).collect())
        .unwrap_or_default();
    SequenceHeader {
        width: coder.frame_w as u32,
        height: coder.frame_h as u32,
        frames: frames as u32,
        mode: gop.mode,
        gop_len: gop.gop_len as u16,
        intra_period: gop.intra_period as u32,
        levels: cfg.levels as u8,
        c_lat: cfg.c_lat as u16,
        patch: cfg.patch as u16,
        grid_scale: cfg.grid_scale as f32,
        scaled_grids: cfg.scaled_grids,
        grouping: crate::bitstream::checkpoint::grouping_to_u8(cfg.grouping),
        fusion: crate::bitstream::checkpoint::fusion_to_u8(cfg.fusion),
        weight_policy: crate::bitstream::checkpoint::policy_to_u8(cfg.weight_policy),
        bases,
        checkpoint_hash: ckpt_hash,
    }
}

// ---- offline pretraining ----

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub clip_h: usize,
    pub clip_w: usize,
    pub clips: usize,
    pub clip_frames: usize,
    /// Frames per sampled Low-Delay chain (the dyadic sample always uses 3).
    pub gop_frames: usize,
    pub lambda: f32,
    pub lr: f32,
    /// Fraction of steps over which the token-mixer mask decays to zero.
    pub mask_frac: f32,
    pub rate_steps_per_level: usize,
    pub distortion: DistortionKind,
    pub seed: u64,
    pub log_every: usize,
    pub calibrate_prior: bool,
    pub calib_frames: usize,
    pub calib_steps: usize,
    pub calib_fit_steps: usize,
    /// Photometric flow warmup steps before the main loop.
    pub flow_warmup_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            clip_h: 64,
            clip_w: 64,
            clips: 9,
            clip_frames: 5,
            gop_frames: 3,
            lambda: 400.0,
            lr: 1e-3,
            mask_frac: 0.5,
            rate_steps_per_level: 2,
            distortion: DistortionKind::Mse,
            seed: 11,
            log_every: 25,
            calibrate_prior: true,
            calib_frames: 3,
            calib_steps: 30,
            calib_fit_steps: 300,
            flow_warmup_steps: 80,
        }
    }
}

/// One logged checkpoint of the pretraining curve.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointStat {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub bpp_estimate: f64,
}

pub struct PretrainReport {
    pub checkpoints: Vec<CheckpointStat>,
    pub final_mask: f32,
}

/// Rate-distortion loss of one mini-GOP under the expanded model (the
/// per-GOP pretraining objective); returns (loss, mean psnr, mean bpp).
#[allow(clippy::too_many_arguments)]
fn pretrain_gop_pass(
    model: &CodecModel,
    clip: &[Tensor],
    records: &[FrameRecord],
    mode: GopMode,
    mask: f32,
    tau: f32,
    cfg: &PretrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, f64, f64)> {
    let ccfg = model.cfg;
    let levels = ccfg.levels;
    let grouping = crate::entropy::split_for(ccfg.grouping, ccfg.c_lat)?;
    let align = ccfg.alignment();
    let shrinks = ccfg.level_shrinks()?;
    let mut buffer: std::collections::HashMap<usize, (Tensor, Vec<Tensor>)> =
        std::collections::HashMap::new();
    let mut total: Option<Tensor> = None;
    let mut psnr_sum = 0.0f64;
    let mut bits_sum = 0.0f64;
    let mut pix_sum = 0.0f64;
    for record in records {
        let x = &clip[record.display];
        let (x_pad, _, _) = pad_to_multiple(x, align)?;
        let (ph, pw) = (x_pad.shape()[1], x_pad.shape()[2]);
        let extents = ccfg.grid_extents(ph, pw)?;

        // Motion pyramids against buffered reconstructions.
        let pyrs: Vec<Option<MotionPyramid>> = [record.ref1, record.ref2]
            .iter()
            .map(|r| match r {
                Some(d) => {
                    let (recon, _) = buffer
                        .get(d)
                        .ok_or_else(|| CodecError::State(format!("missing ref {}", d)))?;
                    model.motion.estimate(&x_pad, recon).map(Some)
                }
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        let refs_opt: Vec<Option<&MotionPyramid>> = pyrs.iter().map(|p| p.as_ref()).collect();
        let ys = model.encoder.forward(&x_pad, &refs_opt, &extents)?;

        // Rates, coarse to fine.
        let mut rate: Option<Tensor> = None;
        let mut ste_levels: Vec<Option<Tensor>> = vec![None; levels];
        for idx in 0..levels {
            let l = levels - 1 - idx;
            let q_t = model.qp[l].log_q.leaf().exp();
            let q_inv_t = ste_snap_qscale(&model.qp[l].log_q_inv.leaf().exp());
            let hier = match ste_levels[l + 1..].iter().flatten().next() {
                Some(c) => Some(c.resize_bilinear(extents[l].0, extents[l].1)?),
                None => None,
            };
            let t1 = record
                .ref1
                .and_then(|d| buffer.get(&d).map(|(_, lats)| lats[l].detach()));
            let t2 = record
                .ref2
                .and_then(|d| buffer.get(&d).map(|(_, lats)| lats[l].detach()));
            let chosen = pick_steps(8, cfg.rate_steps_per_level.max(1), rng);
            let (r, ste) = level_rate_graph(
                &grouping,
                &ys[l],
                &q_t,
                &q_inv_t,
                tau,
                hier.as_ref(),
                t1.as_ref(),
                t2.as_ref(),
                &chosen,
                rng,
                |ctx| model.entropy.forward_expanded(ctx, mask),
            )?;
            rate = Some(match rate {
                Some(t) => t.add(&r)?,
                None => r,
            });
            ste_levels[l] = Some(ste);
        }

        // Reconstruction through the expanded decoder.
        let latents: Vec<Tensor> = ste_levels.into_iter().map(Option::unwrap).collect();
        let ref_frame = record.ref1.map(|d| buffer.get(&d).unwrap().0.detach());
        let t_source = match &ref_frame {
            None => TSource::Bias,
            Some(r) => TSource::Reference(r),
        };
        let recon_padded = decode_frame(
            &DecodeMode::Train { dec: &model.decoder, mask },
            &latents,
            &t_source,
            &shrinks,
            ph,
            pw,
        )?;
        let recon = crop(&recon_padded, x.shape()[1], x.shape()[2])?;
        let d = distortion(x, &recon, cfg.distortion)?;
        let q_glob = schedule_q_glob(&ccfg.qglob, mode, record);
        let pixels = (x.shape()[1] * x.shape()[2]) as f32;
        let frame_loss = rate
            .as_ref()
            .unwrap()
            .scale(1.0 / pixels)
            .add(&d.scale(q_glob * cfg.lambda))?;
        total = Some(match total {
            Some(t) => t.add(&frame_loss)?,
            None => frame_loss,
        });

        psnr_sum += crate::metrics::psnr(x, &recon)?;
        bits_sum += rate.unwrap().item() as f64;
        pix_sum += pixels as f64;
        buffer.insert(
            record.display,
            (recon_padded.detach(), latents.iter().map(|t| t.detach()).collect()),
        );
    }
    let n = records.len() as f32;
    Ok((
        total.unwrap().scale(1.0 / n).sum_all(),
        psnr_sum / records.len() as f64,
        bits_sum / pix_sum,
    ))
}

/// Offline pretraining on procedural clips (plus any supplied extras),
/// followed by consolidation and factorized-prior calibration.
pub fn pretrain(
    model_cfg: CodecConfig,
    cfg: &PretrainConfig,
    extra_corpus: &[Vec<Tensor>],
) -> Result<(DeployModel, PretrainReport)> {
    let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let model = CodecModel::init(model_cfg, &mut rng);
    let mut corpus = crate::synth::corpus(cfg.clips, cfg.clip_frames, cfg.clip_h, cfg.clip_w, cfg.seed);
    corpus.extend(extra_corpus.iter().cloned());
    if corpus.iter().any(|c| c.len() < 3) {
        return Err(CodecError::Param("pretraining clips need >= 3 frames".into()));
    }

    // Flow warmup: photometric self-supervision on panning pairs so the
    // motion net starts out estimating real displacements.
    if cfg.flow_warmup_steps > 0 {
        let pairs: Vec<(Tensor, Tensor)> = corpus
            .iter()
            .filter(|c| c.len() >= 2)
            .take(6)
            .map(|c| (c[1].detach(), c[0].detach()))
            .collect();
        if !pairs.is_empty() {
            crate::pipeline::motion::pretrain_flow(
                &model.motion,
                &pairs,
                cfg.flow_warmup_steps,
                2e-3,
            )?;
        }
    }

    let params = model.params();
    let mut opt = Adam::new(vec![ParamGroup {
        params: params.clone(),
        lr: cfg.lr,
    }])
    .with_cosine_decay(cfg.steps.max(1));
    let soft = SoftRoundState::new(cfg.steps.max(1));
    let mask_end = ((cfg.steps as f32) * cfg.mask_frac) as usize;

    let mut report = PretrainReport {
        checkpoints: Vec::new(),
        final_mask: 1.0,
    };
    let mut last_good = Snapshot::take(&params);
    let mut last_good_step = 0usize;

    for step in 0..cfg.steps {
        begin_step(&params);
        let mask = if model_cfg.token_mixer {
            crate::modmixer::decay_mask(step, mask_end)
        } else {
            0.0
        };
        report.final_mask = mask;
        let clip = &corpus[step % corpus.len()];
        // Alternate a Low-Delay chain with a dyadic I/B/P sample.
        let (records, mode) = if step % 2 == 0 {
            let n = cfg.gop_frames.clamp(2, clip.len());
            let g = build_gop(GopMode::LowDelay, 1, 0, n)?;
            (g.frames, GopMode::LowDelay)
        } else {
            let g = build_gop(GopMode::RandomAccess, 2, 4, 3)?;
            (g.frames, GopMode::RandomAccess)
        };
        // Random clip window so every offset gets visited.
        let span = records.iter().map(|r| r.display).max().unwrap() + 1;
        let offset = if clip.len() > span {
            (rng.gen_range(0..(clip.len() - span) as u32)) as usize
        } else {
            0
        };
        let window = &clip[offset..offset + span];

        let tau = soft.tau(step);
        let (loss, psnr, bpp) =
            pretrain_gop_pass(&model, window, &records, mode, mask, tau, cfg, &mut rng)?;
        let lv = loss.item();
        if !lv.is_finite() {
            last_good.restore();
            return Err(CodecError::Train {
                step,
                last_good: last_good_step,
            });
        }
        let grads = backward(&loss)?;
        opt.step(&grads);

        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            report.checkpoints.push(CheckpointStat {
                step: step + 1,
                loss: lv as f64,
                psnr,
                bpp_estimate: bpp,
            });
            last_good = Snapshot::take(&params);
            last_good_step = step + 1;
        }
    }

    let mut deploy = model.consolidate();
    if cfg.calibrate_prior && model_cfg.reparam_overfit {
        calibrate_prior(&mut deploy, &corpus, cfg)?;
    }
    Ok((deploy, report))
}

/// Fit the factorized prior to weight-update symbols harvested from short
/// overfitting runs on corpus frames.
fn calibrate_prior(deploy: &mut DeployModel, corpus: &[Vec<Tensor>], cfg: &PretrainConfig) -> Result<()> {
    let mut samples: Vec<i32> = Vec::new();
    let rd = RdConfig {
        lambda: cfg.lambda,
        distortion: cfg.distortion,
        steps_i: cfg.calib_steps,
        steps_pb: cfg.calib_steps,
        phase1_frac: 0.0,
        eval_every: cfg.calib_steps.max(1),
        rate_steps_per_level: 1,
        seed: cfg.seed ^ 0xca11b,
        ..Default::default()
    };
    for (i, clip) in corpus.iter().take(cfg.calib_frames.max(1)).enumerate() {
        let x = &clip[0];
        let mut coder = FrameCoder::new(deploy.duplicate()?, x.shape()[1], x.shape()[2])?;
        let record = FrameRecord {
            display: 0,
            kind: FrameKind::I,
            ref1: None,
            ref2: None,
            temporal_layer: 0,
        };
        let out = overfit_frame(&mut coder, &record, x, 1.0, &rd)?;
        for li in &out.inputs {
            samples.extend(li.delta_symbols.iter().copied());
        }
        let _ = i;
    }
    samples.retain(|&s| s.abs() <= 256);
    if samples.is_empty() {
        return Ok(());
    }
    let sym_t = Tensor::from_vec(samples.iter().map(|&s| s as f32).collect(), &[samples.len()])?;
    let params = deploy.prior.params();
    let mut opt = Adam::new(vec![ParamGroup {
        params: params.clone(),
        lr: 1e-2,
    }]);
    for _ in 0..cfg.calib_fit_steps {
        begin_step(&params);
        let bits = deploy.prior.bits_graph(&sym_t)?.mean_all();
        if !bits.item().is_finite() {
            break;
        }
        let grads = backward(&bits)?;
        opt.step(&grads);
    }
    Ok(())
}

// ---- lambda sweeps ----

/// One sweep result: the measured RD point plus the full encode outcome.
pub struct SweepPoint {
    pub lambda: f32,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub outcome: EncodeOutcome,
}

/// Encode the sequence once per lambda. Points run in parallel threads,
/// each rebuilding the model from the checkpoint bytes.
pub fn lambda_sweep(
    ckpt_bytes: &[u8],
    frames: &[Tensor],
    mode: GopMode,
    gop_n: usize,
    intra_period: usize,
    lambdas: &[f32],
    rd_base: &RdConfig,
) -> Result<Vec<SweepPoint>> {
    if lambdas.len() < 2 {
        return Err(CodecError::Param("sweep needs >= 2 lambda values".into()));
    }
    // Tensors hold Rc internals and cannot cross threads; each worker
    // returns plain buffers and the main thread rebuilds tensors.
    struct RawPoint {
        lambda: f32,
        bpp: f64,
        psnr: f64,
        ms_ssim: f64,
        bytes: Vec<u8>,
        header: SequenceHeader,
        packets: Vec<FramePacket>,
        recons: Vec<(Vec<usize>, Vec<f32>)>,
        frame_stats: Vec<(usize, FrameKind, usize, f64, f64)>,
    }
    let frames_raw: Vec<(Vec<usize>, Vec<f32>)> = frames
        .iter()
        .map(|f| (f.shape().to_vec(), f.data().to_vec()))
        .collect();
    let frames_raw = &frames_raw;
    let results: Vec<Result<RawPoint>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .iter()
            .map(|&lambda| {
                let rd = RdConfig { lambda, ..*rd_base };
                scope.spawn(move || -> Result<RawPoint> {
                    let frames: Vec<Tensor> = frames_raw
                        .iter()
                        .map(|(s, d)| Tensor::from_slice(d, s))
                        .collect::<Result<_>>()?;
                    let model = crate::bitstream::read_checkpoint(ckpt_bytes)?;
                    let outcome =
                        encode_sequence(model, &frames, mode, gop_n, intra_period, &rd)?;
                    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
                    let bpp = crate::bitstream::measure_bpp(&outcome.bytes, frames.len(), h, w);
                    let mut psnr_sum = 0.0;
                    let mut ssim_sum = 0.0;
                    for (x, r) in frames.iter().zip(&outcome.recons) {
                        psnr_sum += crate::metrics::psnr(x, r)?;
                        ssim_sum += crate::metrics::ms_ssim(x, r)?;
                    }
                    Ok(RawPoint {
                        lambda,
                        bpp,
                        psnr: psnr_sum / frames.len() as f64,
                        ms_ssim: ssim_sum / frames.len() as f64,
                        bytes: outcome.bytes,
                        header: outcome.header,
                        packets: outcome.packets,
                        recons: outcome
                            .recons
                            .iter()
                            .map(|r| (r.shape().to_vec(), r.data().to_vec()))
                            .collect(),
                        frame_stats: outcome.frame_stats,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep thread")).collect()
    });
    results
        .into_iter()
        .map(|r| {
            let raw = r?;
            Ok(SweepPoint {
                lambda: raw.lambda,
                bpp: raw.bpp,
                psnr: raw.psnr,
                ms_ssim: raw.ms_ssim,
                outcome: EncodeOutcome {
                    bytes: raw.bytes,
                    header: raw.header,
                    packets: raw.packets,
                    recons: raw
                        .recons
                        .iter()
                        .map(|(s, d)| Tensor::from_slice(d, s))
                        .collect::<Result<_>>()?,
                    frame_stats: raw.frame_stats,
                },
            })
        })
        .collect()
}
