//! Frame packetization: entropy-code latents and weight updates into
//! FramePackets and reconstruct frames through the deploy decoder.
//!
//! The encoder and decoder walk the same per-level loop (weight update,
//! then gamma/beta streams, coarse to fine) with the same dequantized
//! context evolution, so an encoder-side reconstruction is byte-identical
//! to the decoder's.

use std::collections::HashMap;

use crate::bitstream::format::{FramePacket, LevelPayload};
use crate::entropy::model::{code_level, CodingLayers, DecodeSink, EncodeSink, LevelCode};
use crate::entropy::{schedule_quadtree, split_for, ChannelGrouping, DecodeStep};
use crate::error::{CodecError, Result};
use crate::model::DeployModel;
use crate::pipeline::decoder::{decode_frame, DecodeMode, TSource};
use crate::pipeline::gop::{FrameKind, FrameRecord, GopStructure};
use crate::quant::{qscale_from_fp, qscale_to_fp};
use crate::range_coder::{
    decode_value, encode_value, value_bits, FreqTable, GaussTableCache, RangeDecoder, RangeEncoder,
};
use crate::tensor::Tensor;

/// Reconstruction plus decoded latents of one reference frame.
pub struct BufferedFrame {
    /// Padded reconstruction (3, PH, PW).
    pub recon: Tensor,
    /// Dequantized latents, finest level first.
    pub latents: Vec<Tensor>,
}

#[derive(Default)]
pub struct FrameBuffer {
    entries: HashMap<usize, BufferedFrame>,
}

impl FrameBuffer {
    pub fn new() -> FrameBuffer {
        FrameBuffer::default()
    }

    pub fn insert(&mut self, display: usize, frame: BufferedFrame) {
        self.entries.insert(display, frame);
    }

    pub fn get(&self, display: usize) -> Result<&BufferedFrame> {
        self.entries.get(&display).ok_or_else(|| {
            CodecError::State(format!("reference frame {} not in buffer", display))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop frames no future frame (at decode position >= next_pos) needs.
    pub fn retain_needed(&mut self, gop: &GopStructure, next_pos: usize) {
        self.entries
            .retain(|&d, _| gop.last_use(d).is_some_and(|lu| lu >= next_pos));
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Everything produced by coding one frame.
pub struct CodedFrame {
    pub packet: FramePacket,
    /// Padded reconstruction as stored in the frame buffer.
    pub recon_padded: Tensor,
    /// Reconstruction cropped to the true frame size.
    pub recon: Tensor,
    /// Table-exact (gamma, beta) bit estimates per level, coarse first.
    pub est_bits: Vec<(f64, f64)>,
    /// Weight-update bits per level, coarse first.
    pub delta_bits: Vec<f64>,
}

/// Per-level data the overfitting loop hands to the encoder.
pub struct LevelEncodeInput {
    /// Hard symbols of the (gamma || beta) grid, finest-first indexing.
    pub symbols: Vec<i32>,
    /// Snapped inverse scales (one per channel).
    pub q_inv: Vec<f32>,
    /// Quantized weight-update symbols (empty = no update).
    pub delta_symbols: Vec<i32>,
    /// Snapped inverse scale for the weight update.
    pub q_psi_inv: f32,
}

pub struct FrameCoder {
    pub model: DeployModel,
    pub buffer: FrameBuffer,
    pub grouping: ChannelGrouping,
    steps: Vec<DecodeStep>,
    shrinks: Vec<f64>,
    prior_table: FreqTable,
    cache: GaussTableCache,
    /// True frame extents (set per sequence).
    pub frame_w: usize,
    pub frame_h: usize,
}

impl FrameCoder {
    pub fn new(model: DeployModel, frame_h: usize, frame_w: usize) -> Result<FrameCoder> {
        let grouping = split_for(model.cfg.grouping, model.cfg.c_lat)?;
        let steps = schedule_quadtree(&grouping);
        let shrinks = model.cfg.level_shrinks()?;
        let prior_table = model.prior.pmf_table();
        Ok(FrameCoder {
            model,
            buffer: FrameBuffer::new(),
            grouping,
            steps,
            shrinks,
            prior_table,
            cache: GaussTableCache::new(),
            frame_w,
            frame_h,
        })
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        let a = self.model.cfg.alignment();
        (self.frame_h.div_ceil(a) * a, self.frame_w.div_ceil(a) * a)
    }

    fn grid_extents(&self) -> Result<Vec<(usize, usize)>> {
        let (ph, pw) = self.padded_dims();
        self.model.cfg.grid_extents(ph, pw)
    }

    fn ref_latents(&self, display: Option<u32>, level: usize) -> Result<Option<Tensor>> {
        match display {
            None => Ok(None),
            Some(d) => {
                let f = self.buffer.get(d as usize)?;
                Ok(Some(f.latents[level].detach()))
            }
        }
    }

    /// Code one frame. `inputs` (finest level first) carries the encoder's
    /// hard symbols; pass `None` on the decoder side with the packet.
    fn code_frame_inner(
        &mut self,
        record: &FrameRecord,
        q_glob: f32,
        inputs: Option<&[LevelEncodeInput]>,
        packet_in: Option<&FramePacket>,
    ) -> Result<CodedFrame> {
        let levels = self.model.cfg.levels;
        let c2 = 2 * self.model.cfg.c_lat;
        let extents = self.grid_extents()?;
        let (ph, pw) = self.padded_dims();
        let delta_len = self.model.entropy.delta_len();
        let reparam = self.model.cfg.reparam_overfit;

        let mut payloads: Vec<LevelPayload> = Vec::with_capacity(levels);
        let mut level_deq: Vec<Option<Tensor>> = vec![None; levels];
        let mut est_bits = Vec::with_capacity(levels);
        let mut delta_bits_all = Vec::with_capacity(levels);

        // Coarse-to-fine over levels.
        for step_idx in 0..levels {
            let l = levels - 1 - step_idx;
            let (gh, gw) = extents[l];
            let shape = [c2, gh, gw];

            // Side info and weight-update symbols for this level.
            let (q_inv, q_psi_inv, q_inv_fp, q_psi_inv_fp) = match (inputs, packet_in) {
                (Some(inp), _) => {
                    let li = &inp[l];
                    let fp: Vec<u16> = li.q_inv.iter().map(|&v| qscale_to_fp(v)).collect();
                    let qiv: Vec<f32> = fp.iter().map(|&v| qscale_from_fp(v)).collect();
                    let pfp = qscale_to_fp(li.q_psi_inv);
                    (qiv, qscale_from_fp(pfp), fp, pfp)
                }
                (None, Some(pkt)) => {
                    let lv = &pkt.levels[step_idx];
                    if lv.q_inv_fp.len() != c2 {
                        return Err(CodecError::Corrupt(format!(
                            "level {} carries {} scales, want {}",
                            l,
                            lv.q_inv_fp.len(),
                            c2
                        )));
                    }
                    let qiv: Vec<f32> = lv.q_inv_fp.iter().map(|&v| qscale_from_fp(v)).collect();
                    (
                        qiv,
                        qscale_from_fp(lv.q_psi_inv_fp),
                        lv.q_inv_fp.clone(),
                        lv.q_psi_inv_fp,
                    )
                }
                (None, None) => {
                    return Err(CodecError::State("coder needs inputs or a packet".into()))
                }
            };

            // Weight update: encode or decode the delta symbols.
            let (delta_bytes, delta_vals, dbits) = if !reparam {
                (Vec::new(), None, 0.0)
            } else {
                match (inputs, packet_in) {
                    (Some(inp), _) => {
                        let syms = &inp[l].delta_symbols;
                        if syms.is_empty() {
                            (Vec::new(), None, 0.0)
                        } else {
                            if syms.len() != delta_len {
                                return Err(CodecError::Shape(format!(
                                    "delta symbols {} != {}",
                                    syms.len(),
                                    delta_len
                                )));
                            }
                            let mut enc = RangeEncoder::new();
                            let mut bits = 0.0;
                            for &s in syms {
                                bits += value_bits(&self.prior_table, s);
                                encode_value(&mut enc, &self.prior_table, s)?;
                            }
                            let vals: Vec<f32> =
                                syms.iter().map(|&s| q_psi_inv * s as f32).collect();
                            (enc.finish(), Some(vals), bits)
                        }
                    }
                    (None, Some(pkt)) => {
                        let seg = &pkt.levels[step_idx].delta;
                        if seg.is_empty() {
                            (Vec::new(), None, 0.0)
                        } else {
                            let mut dec = RangeDecoder::new(seg)?;
                            let mut vals = Vec::with_capacity(delta_len);
                            let mut bits = 0.0;
                            for _ in 0..delta_len {
                                let s = decode_value(&mut dec, &self.prior_table)?;
                                bits += value_bits(&self.prior_table, s);
                                vals.push(q_psi_inv * s as f32);
                            }
                            (seg.clone(), Some(vals), bits)
                        }
                    }
                    (None, None) => unreachable!(),
                }
            };

            let layers: CodingLayers = self
                .model
                .entropy
                .apply_weight_update(delta_vals.as_deref())?;

            // Contexts: coarser level resized to this level, plus refs.
            let hier = match level_deq[l + 1..].iter().flatten().next() {
                Some(coarser) => Some(coarser.resize_bilinear(gh, gw)?),
                None => None,
            };
            let t1 = self.ref_latents(record.ref1.map(|v| v as u32), l)?;
            let t2 = self.ref_latents(record.ref2.map(|v| v as u32), l)?;

            let known = inputs.map(|inp| inp[l].symbols.as_slice());
            let code: LevelCode = match known {
                Some(syms) => {
                    let mut enc_g = RangeEncoder::new();
                    let mut enc_b = RangeEncoder::new();
                    let out = code_level(
                        &self.model.entropy,
                        &layers,
                        &self.grouping,
                        &self.steps,
                        &shape,
                        &q_inv,
                        hier.as_ref(),
                        t1.as_ref(),
                        t2.as_ref(),
                        &mut EncodeSink { enc: &mut enc_g },
                        &mut EncodeSink { enc: &mut enc_b },
                        Some(syms),
                        &mut self.cache,
                    )?;
                    payloads.push(LevelPayload {
                        q_inv_fp,
                        q_psi_inv_fp,
                        delta: delta_bytes,
                        gamma: enc_g.finish(),
                        beta: enc_b.finish(),
                    });
                    out
                }
                None => {
                    let pkt = packet_in.unwrap();
                    let lv = &pkt.levels[step_idx];
                    let mut dec_g = RangeDecoder::new(&lv.gamma)?;
                    let mut dec_b = RangeDecoder::new(&lv.beta)?;
                    let out = code_level(
                        &self.model.entropy,
                        &layers,
                        &self.grouping,
                        &self.steps,
                        &shape,
                        &q_inv,
                        hier.as_ref(),
                        t1.as_ref(),
                        t2.as_ref(),
                        &mut DecodeSink { dec: &mut dec_g },
                        &mut DecodeSink { dec: &mut dec_b },
                        None,
                        &mut self.cache,
                    )?;
                    payloads.push(lv.clone());
                    out
                }
            };
            est_bits.push((code.est_bits_gamma, code.est_bits_beta));
            delta_bits_all.push(dbits);
            level_deq[l] = Some(code.dequant);
        }

        // Reconstruct through the deploy decoder.
        let latents: Vec<Tensor> = level_deq.into_iter().map(Option::unwrap).collect();
        let ref_frame = match record.ref1 {
            Some(d) => Some(self.buffer.get(d)?.recon.detach()),
            None => None,
        };
        let t_source = match (&record.kind, &ref_frame) {
            (FrameKind::I, _) => TSource::Bias,
            (_, Some(r)) => TSource::Reference(r),
            (_, None) => {
                return Err(CodecError::State("inter frame without reference".into()))
            }
        };
        let recon_padded = decode_frame(
            &DecodeMode::Deploy { w: &self.model.decoder },
            &latents,
            &t_source,
            &self.shrinks,
            ph,
            pw,
        )?;
        let recon = super::crop(&recon_padded, self.frame_h, self.frame_w)?;

        self.buffer.insert(
            record.display,
            BufferedFrame {
                recon: recon_padded.detach(),
                latents: latents.iter().map(|t| t.detach()).collect(),
            },
        );

        let packet = FramePacket {
            display: record.display as u32,
            kind: record.kind,
            ref1: record.ref1.map(|v| v as u32),
            ref2: record.ref2.map(|v| v as u32),
            q_glob,
            pad_h: (ph - self.frame_h) as u16,
            pad_w: (pw - self.frame_w) as u16,
            levels: payloads,
        };
        Ok(CodedFrame {
            packet,
            recon_padded,
            recon,
            est_bits,
            delta_bits: delta_bits_all,
        })
    }

    /// Encoder side: pack overfitted symbols into a packet and reconstruct.
    pub fn encode_frame(
        &mut self,
        record: &FrameRecord,
        q_glob: f32,
        inputs: &[LevelEncodeInput],
    ) -> Result<CodedFrame> {
        if inputs.len() != self.model.cfg.levels {
            return Err(CodecError::Shape("one input per level required".into()));
        }
        self.code_frame_inner(record, q_glob, Some(inputs), None)
    }

    /// Decoder side: reconstruct a frame from its packet.
    pub fn decode_packet(&mut self, packet: &FramePacket) -> Result<CodedFrame> {
        if packet.levels.len() != self.model.cfg.levels {
            return Err(CodecError::Corrupt(format!(
                "packet has {} levels, model wants {}",
                packet.levels.len(),
                self.model.cfg.levels
            )));
        }
        let record = FrameRecord {
            display: packet.display as usize,
            kind: packet.kind,
            ref1: packet.ref1.map(|v| v as usize),
            ref2: packet.ref2.map(|v| v as usize),
            temporal_layer: 0,
        };
        self.code_frame_inner(&record, packet.q_glob, None, Some(packet))
    }
}

/// Decode a full container with a loaded model: header, packets in decode
/// order, reconstructions returned in display order. The caller is
/// responsible for checking the header's checkpoint hash against the model
/// it loaded. Desk-scale sequences keep every decoded frame buffered.
pub fn decode_sequence(
    model: DeployModel,
    bytes: &[u8],
) -> Result<(crate::bitstream::SequenceHeader, Vec<Tensor>)> {
    let (header, packets) = crate::bitstream::read_sequence(bytes)?;
    let mut coder = FrameCoder::new(model, header.height as usize, header.width as usize)?;
    let mut recons: Vec<Option<Tensor>> = vec![None; header.frames as usize];
    for pkt in packets {
        let p = pkt?;
        if p.display as usize >= recons.len() {
            return Err(CodecError::Corrupt(format!(
                "packet display index {} outside sequence of {}",
                p.display, header.frames
            )));
        }
        let out = coder.decode_packet(&p)?;
        recons[p.display as usize] = Some(out.recon);
    }
    let frames: Option<Vec<Tensor>> = recons.into_iter().collect();
    frames
        .map(|f| (header.clone(), f))
        .ok_or_else(|| CodecError::Corrupt("stream is missing frames".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodecConfig, CodecModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_model(seed: u64) -> DeployModel {
        let cfg = CodecConfig {
            c_lat: 4,
            enc_width: 8,
            ent_hidden: 8,
            branches: 2,
            patch: 16,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        CodecModel::init(cfg, &mut rng).consolidate()
    }

    fn rand_inputs(coder: &FrameCoder, seed: u64, with_delta: bool) -> Vec<LevelEncodeInput> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (ph, pw) = coder.padded_dims();
        let extents = coder.model.cfg.grid_extents(ph, pw).unwrap();
        let c2 = 2 * coder.model.cfg.c_lat;
        let dl = coder.model.entropy.delta_len();
        extents
            .iter()
            .map(|&(gh, gw)| LevelEncodeInput {
                symbols: (0..c2 * gh * gw).map(|_| rng.gen_range(-5i32..=5)).collect(),
                q_inv: vec![0.5; c2],
                delta_symbols: if with_delta {
                    (0..dl).map(|_| rng.gen_range(-2i32..=2)).collect()
                } else {
                    Vec::new()
                },
                q_psi_inv: 0.25,
            })
            .collect()
    }

    #[test]
    fn encode_then_decode_reproduces_reconstruction() {
        let model = tiny_model(1);
        let mut enc_coder = FrameCoder::new(model, 20, 24).unwrap();
        let record = FrameRecord {
            display: 0,
            kind: FrameKind::I,
            ref1: None,
            ref2: None,
            temporal_layer: 0,
        };
        let inputs = rand_inputs(&enc_coder, 7, true);
        let coded = enc_coder.encode_frame(&record, 1.4, &inputs).unwrap();
        assert_eq!(coded.recon.shape(), &[3, 20, 24]);

        // Fresh decoder from the same checkpoint bytes.
        let model2 = tiny_model(1);
        let mut dec_coder = FrameCoder::new(model2, 20, 24).unwrap();
        let decoded = dec_coder.decode_packet(&coded.packet).unwrap();
        assert_eq!(
            coded.recon_padded.data(),
            decoded.recon_padded.data(),
            "encoder and decoder reconstructions must be bit-identical"
        );
        assert_eq!(coded.packet, decoded.packet);
    }

    #[test]
    fn inter_frame_uses_references() {
        let model = tiny_model(2);
        let mut coder = FrameCoder::new(model, 16, 16).unwrap();
        let i_rec = FrameRecord {
            display: 0,
            kind: FrameKind::I,
            ref1: None,
            ref2: None,
            temporal_layer: 0,
        };
        let inputs = rand_inputs(&coder, 8, false);
        coder.encode_frame(&i_rec, 1.4, &inputs).unwrap();

        let p_rec = FrameRecord {
            display: 1,
            kind: FrameKind::P,
            ref1: Some(0),
            ref2: None,
            temporal_layer: 0,
        };
        let inputs_p = rand_inputs(&coder, 9, true);
        let coded_p = coder.encode_frame(&p_rec, 1.0, &inputs_p).unwrap();
        // I-frame packets carry no reference ids; P packets do.
        assert_eq!(coded_p.packet.ref1, Some(0));

        let model2 = tiny_model(2);
        let mut dec = FrameCoder::new(model2, 16, 16).unwrap();
        let i_pkt = {
            let mut e2 = FrameCoder::new(tiny_model(2), 16, 16).unwrap();
            e2.encode_frame(&i_rec, 1.4, &inputs).unwrap().packet
        };
        dec.decode_packet(&i_pkt).unwrap();
        let out = dec.decode_packet(&coded_p.packet).unwrap();
        assert_eq!(out.recon_padded.data(), coded_p.recon_padded.data());
    }

    #[test]
    fn missing_reference_is_state_error() {
        let model = tiny_model(3);
        let mut coder = FrameCoder::new(model, 16, 16).unwrap();
        let rec = FrameRecord {
            display: 1,
            kind: FrameKind::P,
            ref1: Some(0),
            ref2: None,
            temporal_layer: 0,
        };
        let inputs = rand_inputs(&coder, 10, false);
        assert!(matches!(
            coder.encode_frame(&rec, 1.0, &inputs),
            Err(CodecError::State(_))
        ));
    }

    #[test]
    fn buffer_retention_follows_gop() {
        use crate::pipeline::gop::{build_gop, GopMode};
        let gop = build_gop(GopMode::LowDelay, 1, 0, 4).unwrap();
        let mut buf = FrameBuffer::new();
        for pos in 0..3 {
            buf.insert(
                pos,
                BufferedFrame {
                    recon: Tensor::zeros(&[3, 4, 4]),
                    latents: vec![],
                },
            );
            buf.retain_needed(&gop, pos + 1);
        }
        // Only the newest frame is a future reference in an LD chain.
        assert_eq!(buf.len(), 1);
        assert!(buf.get(2).is_ok());
    }
}
