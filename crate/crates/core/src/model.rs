//! Codec configuration and the full parameter containers.
//!
//! `CodecModel` is the pretraining form (expanded blocks, token mixers);
//! `consolidate` folds it into the `DeployModel` that encoding, decoding,
//! and per-frame overfitting run on: contracted decoder and entropy
//! weights (plus their frozen reparameterization bases), encoder heads
//! rescaled so the coded grids live in the deploy parameterization, and
//! the global quantization-scale initializers.

use rand_chacha::ChaCha20Rng;

use crate::entropy::prior::PriorKind;
use crate::entropy::{ContractedEntropy, EntropyConfig, EntropyModel, FactorizedPrior, Fusion, GroupingKind};
use crate::error::{CodecError, Result};
use crate::hierpe::{BaseSchedule, WeightPolicy};
use crate::optim::Param;
use crate::pipeline::decoder::{DecoderWeights, FieldDecoder};
use crate::pipeline::encoder::ImageEncoder;
use crate::pipeline::gop::QGlobTable;
use crate::pipeline::motion::MotionEncoder;

#[derive(Clone, Copy, Debug)]
pub struct CodecConfig {
    pub levels: usize,
    pub c_lat: usize,
    pub enc_width: usize,
    pub ent_hidden: usize,
    pub branches: usize,
    pub patch: usize,
    /// Scale ratio k for the rescaled-bases grid layout.
    pub grid_scale: f64,
    /// Scaled hierarchical griding on/off (V4.1 ablation when off).
    pub scaled_grids: bool,
    /// Context fusion: modulation, or concatenation (V3.2 ablation).
    pub fusion: Fusion,
    /// Channel grouping: uneven 1:1:2:4, or even (V3.1 ablation).
    pub grouping: GroupingKind,
    /// Token mixers during pretraining (V1.4 ablation when off).
    pub token_mixer: bool,
    /// Residual weight updates during overfitting (V1.2 ablation when off).
    pub reparam_overfit: bool,
    pub weight_policy: WeightPolicy,
    pub prior_kind: PriorKind,
    pub qglob: QGlobTable,
    pub flow_width: usize,
    pub flow_feat: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            levels: 3,
            c_lat: 8,
            enc_width: 32,
            ent_hidden: 16,
            branches: 3,
            patch: 32,
            grid_scale: 2.0,
            scaled_grids: true,
            fusion: Fusion::Modulation,
            grouping: GroupingKind::Uneven,
            token_mixer: true,
            reparam_overfit: true,
            weight_policy: WeightPolicy::LogEven,
            prior_kind: PriorKind::Learned,
            qglob: QGlobTable::default(),
            flow_width: 16,
            flow_feat: 8,
        }
    }
}

impl CodecConfig {
    /// Mixed-radix base schedule implied by the patch geometry,
    /// coarse-to-fine, with the configured scale ratio.
    pub fn base_schedule(&self) -> Result<BaseSchedule> {
        let coarse = self.patch >> self.levels;
        if coarse == 0 {
            return Err(CodecError::Param(format!(
                "patch {} too small for {} levels",
                self.patch, self.levels
            )));
        }
        let mut bases = vec![coarse as u32];
        bases.extend(std::iter::repeat(2u32).take(self.levels - 1));
        let k = if self.scaled_grids { self.grid_scale } else { 1.0 };
        BaseSchedule::new(&bases, k, self.weight_policy)
    }

    /// Cumulative per-level grid shrink factors, finest first.
    pub fn level_shrinks(&self) -> Result<Vec<f64>> {
        let sched = self.base_schedule()?;
        Ok((0..self.levels).map(|l| sched.level_shrink(l)).collect())
    }

    /// Grid extents for a padded frame, finest first.
    pub fn grid_extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let shrinks = self.level_shrinks()?;
        Ok((0..self.levels)
            .map(|l| {
                let nh = h >> (l + 1);
                let nw = w >> (l + 1);
                let s = shrinks[l];
                (
                    ((nh as f64 / s).round() as usize).max(1),
                    ((nw as f64 / s).round() as usize).max(1),
                )
            })
            .collect())
    }

    /// Frames must pad to a multiple of this before encoding.
    pub fn alignment(&self) -> usize {
        self.patch.max(1 << self.levels)
    }

    pub fn entropy_config(&self) -> EntropyConfig {
        EntropyConfig {
            c_lat: self.c_lat,
            hidden: self.ent_hidden,
            branches: self.branches,
            fusion: self.fusion,
            grouping: self.grouping,
        }
    }
}

/// Per-level quantization-scale parameters, trained in log space.
pub struct LevelQp {
    pub log_q: Param,
    pub log_q_inv: Param,
    pub log_q_psi: Param,
    pub log_q_psi_inv: Param,
}

impl LevelQp {
    fn zeros(c2: usize) -> LevelQp {
        LevelQp {
            log_q: Param::zeros(&[c2]),
            log_q_inv: Param::zeros(&[c2]),
            log_q_psi: Param::zeros(&[1]),
            log_q_psi_inv: Param::zeros(&[1]),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.log_q.clone(),
            self.log_q_inv.clone(),
            self.log_q_psi.clone(),
            self.log_q_psi_inv.clone(),
        ]
    }
}

/// Pretraining-form model.
pub struct CodecModel {
    pub cfg: CodecConfig,
    pub encoder: ImageEncoder,
    pub motion: MotionEncoder,
    pub decoder: FieldDecoder,
    pub entropy: EntropyModel,
    pub prior: FactorizedPrior,
    pub qp: Vec<LevelQp>,
}

impl CodecModel {
    pub fn init(cfg: CodecConfig, rng: &mut ChaCha20Rng) -> CodecModel {
        CodecModel {
            cfg,
            encoder: ImageEncoder::init(cfg.levels, cfg.enc_width, cfg.c_lat, cfg.flow_feat, rng),
            motion: MotionEncoder::init(cfg.levels + 1, cfg.flow_width, cfg.flow_feat, rng),
            decoder: FieldDecoder::init(cfg.levels, cfg.c_lat, cfg.patch, cfg.branches, rng),
            entropy: EntropyModel::init(cfg.entropy_config(), rng),
            prior: FactorizedPrior::init(cfg.prior_kind, rng),
            qp: (0..cfg.levels).map(|_| LevelQp::zeros(2 * cfg.c_lat)).collect(),
        }
    }

    /// Every trainable parameter of the pretraining phase.
    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.encoder.params();
        ps.extend(self.motion.params());
        ps.extend(self.decoder.params());
        ps.extend(self.entropy.params());
        ps.extend(self.prior.params());
        for qp in &self.qp {
            ps.extend(qp.params());
        }
        ps
    }

    /// Fold into the deploy form: contracted decoder and entropy model,
    /// encoder heads scaled so coded grids carry the residual fold.
    pub fn consolidate(mut self) -> DeployModel {
        self.encoder.scale_heads(0.5);
        DeployModel {
            cfg: self.cfg,
            encoder: self.encoder,
            motion: self.motion,
            decoder: self.decoder.consolidate(),
            entropy: self.entropy.contract(),
            prior: self.prior,
            qp_init: self
                .qp
                .iter()
                .map(|qp| QpInit {
                    log_q: qp.log_q.values(),
                    log_q_inv: qp.log_q_inv.values(),
                    log_q_psi: qp.log_q_psi.values()[0],
                    log_q_psi_inv: qp.log_q_psi_inv.values()[0],
                })
                .collect(),
        }
    }
}

/// Global QP initializers carried by the checkpoint.
#[derive(Clone, Debug)]
pub struct QpInit {
    pub log_q: Vec<f32>,
    pub log_q_inv: Vec<f32>,
    pub log_q_psi: f32,
    pub log_q_psi_inv: f32,
}

/// Deploy-form model: what the checkpoint stores and both the encoder and
/// decoder load. Encoder and motion weights keep training per frame; the
/// decoder weights, entropy bases, prior, and quality table are frozen.
pub struct DeployModel {
    pub cfg: CodecConfig,
    pub encoder: ImageEncoder,
    pub motion: MotionEncoder,
    pub decoder: DecoderWeights,
    pub entropy: ContractedEntropy,
    pub prior: FactorizedPrior,
    pub qp_init: Vec<QpInit>,
}

impl DeployModel {
    /// Value-level deep copy (parameters are otherwise shared handles).
    pub fn duplicate(&self) -> Result<DeployModel> {
        DeployModel::from_tensors(self.cfg, &self.to_tensors())
    }

    /// Deterministic flat listing of every tensor for serialization.
    pub fn to_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let mut push_params = |prefix: &str, params: &[(String, Param)]| {
            for (name, p) in params {
                out.push((format!("{prefix}.{name}"), p.shape(), p.values()));
            }
        };
        push_params("enc", &self.encoder.named_params());
        push_params("mot", &self.motion.named_params());
        push_params("prior", &self.prior.named_params());

        let mut push_raw = |name: String, shape: Vec<usize>, data: Vec<f32>| {
            out.push((name, shape, data));
        };
        // Decoder weights.
        for (l, b) in self.decoder.blocks.iter().enumerate() {
            push_raw(format!("dec.block{l}.w"), vec![b.c_in, b.c_out], b.w.clone());
            push_raw(format!("dec.block{l}.b"), vec![b.c_out], b.b.clone());
        }
        push_raw("dec.t_bias".into(), vec![self.decoder.t_bias.len()], self.decoder.t_bias.clone());
        let dri = self.decoder.ref_embed_w.len() / self.decoder.c_lat;
        push_raw("dec.ref_embed.w".into(), vec![dri, self.decoder.c_lat], self.decoder.ref_embed_w.clone());
        push_raw("dec.ref_embed.b".into(), vec![self.decoder.c_lat], self.decoder.ref_embed_b.clone());
        push_raw("dec.out_head.w".into(), vec![self.decoder.c_lat, 3], self.decoder.out_head_w.clone());
        push_raw("dec.out_head.b".into(), vec![3], self.decoder.out_head_b.clone());
        // Entropy model.
        for (name, layer) in [
            ("embed", &self.entropy.embed),
            ("block1", &self.entropy.block1),
            ("block2", &self.entropy.block2),
            ("head_mu", &self.entropy.head_mu),
            ("head_sigma", &self.entropy.head_sigma),
        ] {
            push_raw(format!("ent.{name}.w"), vec![layer.c_in, layer.c_out], layer.w.clone());
            push_raw(format!("ent.{name}.b"), vec![layer.c_out], layer.b.clone());
            for (m, e) in layer.basis_e.iter().enumerate() {
                push_raw(format!("ent.{name}.e{m}"), vec![layer.c_in, layer.c_out], e.clone());
            }
            for (m, b) in layer.basis_b.iter().enumerate() {
                push_raw(format!("ent.{name}.bb{m}"), vec![layer.c_out], b.clone());
            }
        }
        let c2 = 2 * self.cfg.c_lat;
        let d = self.cfg.ent_hidden;
        push_raw("ent.embed_concat.w".into(), vec![4 * c2 + d, d], self.entropy.embed_concat_w.clone());
        push_raw("ent.embed_concat.b".into(), vec![d], self.entropy.embed_concat_b.clone());
        push_raw("ent.spat.k".into(), vec![d, c2, 3, 3], self.entropy.spat_k.clone());
        push_raw("ent.spat.b".into(), vec![d], self.entropy.spat_b.clone());
        push_raw("ent.gen_spat.w".into(), vec![d, 2 * d], self.entropy.gen_spat.clone());
        push_raw("ent.gen_hier.w".into(), vec![c2, 2 * d], self.entropy.gen_hier.clone());
        push_raw("ent.gen_t1.w".into(), vec![c2, 2 * d], self.entropy.gen_t1.clone());
        push_raw("ent.gen_t2.w".into(), vec![c2, 2 * d], self.entropy.gen_t2.clone());
        // QP initializers.
        for (l, qp) in self.qp_init.iter().enumerate() {
            push_raw(format!("qp{l}.log_q"), vec![qp.log_q.len()], qp.log_q.clone());
            push_raw(format!("qp{l}.log_q_inv"), vec![qp.log_q_inv.len()], qp.log_q_inv.clone());
            push_raw(format!("qp{l}.log_q_psi"), vec![1], vec![qp.log_q_psi]);
            push_raw(format!("qp{l}.log_q_psi_inv"), vec![1], vec![qp.log_q_psi_inv]);
        }
        out
    }

    /// Rebuild from the flat tensor listing.
    pub fn from_tensors(cfg: CodecConfig, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<DeployModel> {
        use std::collections::HashMap;
        let map: HashMap<&str, (&Vec<usize>, &Vec<f32>)> = tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let get = |name: &str| -> Result<Vec<f32>> {
            map.get(name)
                .map(|(_, d)| (*d).clone())
                .ok_or_else(|| CodecError::Format(format!("checkpoint missing tensor {name}")))
        };

        // Skeletons from a fixed seed; every value is overwritten below.
        let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = CodecModel::init(cfg, &mut rng);
        for (name, p) in model.encoder.named_params() {
            p.set_values(get(&format!("enc.{name}"))?);
        }
        for (name, p) in model.motion.named_params() {
            p.set_values(get(&format!("mot.{name}"))?);
        }
        for (name, p) in model.prior.named_params() {
            p.set_values(get(&format!("prior.{name}"))?);
        }
        // Encoder heads in a checkpoint already carry the deploy fold.
        model.encoder.head_scale = 0.5;

        let decoder = {
            let mut w = model.decoder.consolidate();
            for (l, block) in w.blocks.iter_mut().enumerate() {
                block.w = get(&format!("dec.block{l}.w"))?;
                block.b = get(&format!("dec.block{l}.b"))?;
            }
            w.t_bias = get("dec.t_bias")?;
            w.ref_embed_w = get("dec.ref_embed.w")?;
            w.ref_embed_b = get("dec.ref_embed.b")?;
            w.out_head_w = get("dec.out_head.w")?;
            w.out_head_b = get("dec.out_head.b")?;
            w
        };

        let mut entropy = model.entropy.contract();
        for (name, layer) in [
            ("embed", &mut entropy.embed),
            ("block1", &mut entropy.block1),
            ("block2", &mut entropy.block2),
            ("head_mu", &mut entropy.head_mu),
            ("head_sigma", &mut entropy.head_sigma),
        ] {
            layer.w = get(&format!("ent.{name}.w"))?;
            layer.b = get(&format!("ent.{name}.b"))?;
            for m in 0..layer.basis_e.len() {
                layer.basis_e[m] = get(&format!("ent.{name}.e{m}"))?;
                layer.basis_b[m] = get(&format!("ent.{name}.bb{m}"))?;
            }
        }
        entropy.embed_concat_w = get("ent.embed_concat.w")?;
        entropy.embed_concat_b = get("ent.embed_concat.b")?;
        entropy.spat_k = get("ent.spat.k")?;
        entropy.spat_b = get("ent.spat.b")?;
        entropy.gen_spat = get("ent.gen_spat.w")?;
        entropy.gen_hier = get("ent.gen_hier.w")?;
        entropy.gen_t1 = get("ent.gen_t1.w")?;
        entropy.gen_t2 = get("ent.gen_t2.w")?;

        let mut qp_init = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            qp_init.push(QpInit {
                log_q: get(&format!("qp{l}.log_q"))?,
                log_q_inv: get(&format!("qp{l}.log_q_inv"))?,
                log_q_psi: get(&format!("qp{l}.log_q_psi"))?[0],
                log_q_psi_inv: get(&format!("qp{l}.log_q_psi_inv"))?[0],
            });
        }

        Ok(DeployModel {
            cfg,
            encoder: model.encoder,
            motion: model.motion,
            decoder,
            entropy,
            prior: model.prior,
            qp_init,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_geometry() {
        let cfg = CodecConfig::default();
        let sched = cfg.base_schedule().unwrap();
        assert_eq!(sched.bases(), &[4, 2, 2]);
        let shrinks = cfg.level_shrinks().unwrap();
        assert!((shrinks[0] - 1.0).abs() < 1e-9, "finest level unshrunk");
        assert!((shrinks[2] - 2.0).abs() < 1e-9, "coarsest absorbs k");
        let ext = cfg.grid_extents(64, 64).unwrap();
        assert_eq!(ext[0], (32, 32));
        assert_eq!(ext[2], (4, 4));
    }

    #[test]
    fn unscaled_extents_are_natural() {
        let cfg = CodecConfig {
            scaled_grids: false,
            ..Default::default()
        };
        let ext = cfg.grid_extents(64, 64).unwrap();
        assert_eq!(ext, vec![(32, 32), (16, 16), (8, 8)]);
    }

    #[test]
    fn consolidate_and_roundtrip_tensors() {
        let cfg = CodecConfig {
            c_lat: 4,
            enc_width: 8,
            ent_hidden: 8,
            branches: 2,
            patch: 16,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let deploy = CodecModel::init(cfg, &mut rng).consolidate();
        let tensors = deploy.to_tensors();
        let rebuilt = DeployModel::from_tensors(cfg, &tensors).unwrap();
        let again = rebuilt.to_tensors();
        assert_eq!(tensors.len(), again.len());
        for ((n1, s1, d1), (n2, s2, d2)) in tensors.iter().zip(&again) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(d1, d2, "tensor {} differs after roundtrip", n1);
        }
    }
}
