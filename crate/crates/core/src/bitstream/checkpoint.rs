//! Versioned checkpoint container for the deploy-form model.
//!
//! Fixed-width config block followed by a named tensor table, all
//! big-endian; the sha256 of the full byte stream binds bitstreams to the
//! exact model that produced them.

use sha2::{Digest, Sha256};

use super::byteio::{ByteReader, ByteWriter};
use crate::entropy::prior::PriorKind;
use crate::entropy::{Fusion, GroupingKind};
use crate::error::{CodecError, Result};
use crate::hierpe::WeightPolicy;
use crate::model::{CodecConfig, DeployModel};
use crate::pipeline::gop::QGlobTable;

pub const CKPT_MAGIC: [u8; 4] = *b"OVCK";
pub const CKPT_VERSION: u16 = 1;

pub fn fusion_to_u8(f: Fusion) -> u8 {
    match f {
        Fusion::Modulation => 0,
        Fusion::Concat => 1,
    }
}

pub fn fusion_from_u8(v: u8) -> Result<Fusion> {
    match v {
        0 => Ok(Fusion::Modulation),
        1 => Ok(Fusion::Concat),
        _ => Err(CodecError::Corrupt(format!("bad fusion tag {}", v))),
    }
}

pub fn grouping_to_u8(g: GroupingKind) -> u8 {
    match g {
        GroupingKind::Uneven => 0,
        GroupingKind::Even => 1,
    }
}

pub fn grouping_from_u8(v: u8) -> Result<GroupingKind> {
    match v {
        0 => Ok(GroupingKind::Uneven),
        1 => Ok(GroupingKind::Even),
        _ => Err(CodecError::Corrupt(format!("bad grouping tag {}", v))),
    }
}

pub fn policy_to_u8(p: WeightPolicy) -> u8 {
    match p {
        WeightPolicy::LogEven => 0,
        WeightPolicy::Uniform => 1,
    }
}

pub fn policy_from_u8(v: u8) -> Result<WeightPolicy> {
    match v {
        0 => Ok(WeightPolicy::LogEven),
        1 => Ok(WeightPolicy::Uniform),
        _ => Err(CodecError::Corrupt(format!("bad weight policy {}", v))),
    }
}

fn write_config(w: &mut ByteWriter, cfg: &CodecConfig) {
    w.u8(cfg.levels as u8);
    w.u16(cfg.c_lat as u16);
    w.u16(cfg.enc_width as u16);
    w.u16(cfg.ent_hidden as u16);
    w.u8(cfg.branches as u8);
    w.u16(cfg.patch as u16);
    w.f64(cfg.grid_scale);
    w.u8(cfg.scaled_grids as u8);
    w.u8(fusion_to_u8(cfg.fusion));
    w.u8(grouping_to_u8(cfg.grouping));
    w.u8(cfg.token_mixer as u8);
    w.u8(cfg.reparam_overfit as u8);
    w.u8(policy_to_u8(cfg.weight_policy));
    w.u8(match cfg.prior_kind {
        PriorKind::Learned => 0,
        PriorKind::Laplace => 1,
    });
    w.f32(cfg.qglob.i_frame);
    w.f32(cfg.qglob.ld_p);
    w.f32(cfg.qglob.ra_p);
    w.f32(cfg.qglob.b_layer1);
    w.f32(cfg.qglob.b_decay);
    w.u8(cfg.qglob.adaptive as u8);
    w.u16(cfg.flow_width as u16);
    w.u16(cfg.flow_feat as u16);
}

fn read_config(r: &mut ByteReader) -> Result<CodecConfig> {
    Ok(CodecConfig {
        levels: r.u8()? as usize,
        c_lat: r.u16()? as usize,
        enc_width: r.u16()? as usize,
        ent_hidden: r.u16()? as usize,
        branches: r.u8()? as usize,
        patch: r.u16()? as usize,
        grid_scale: r.f64()?,
        scaled_grids: r.u8()? != 0,
        fusion: fusion_from_u8(r.u8()?)?,
        grouping: grouping_from_u8(r.u8()?)?,
        token_mixer: r.u8()? != 0,
        reparam_overfit: r.u8()? != 0,
        weight_policy: policy_from_u8(r.u8()?)?,
        prior_kind: match r.u8()? {
            0 => PriorKind::Learned,
            1 => PriorKind::Laplace,
            v => return Err(CodecError::Corrupt(format!("bad prior kind {}", v))),
        },
        qglob: QGlobTable {
            i_frame: r.f32()?,
            ld_p: r.f32()?,
            ra_p: r.f32()?,
            b_layer1: r.f32()?,
            b_decay: r.f32()?,
            adaptive: r.u8()? != 0,
        },
        flow_width: r.u16()? as usize,
        flow_feat: r.u16()? as usize,
    })
}

pub fn write_checkpoint(model: &DeployModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(&CKPT_MAGIC);
    w.u16(CKPT_VERSION);
    write_config(&mut w, &model.cfg);
    let tensors = model.to_tensors();
    w.u32(tensors.len() as u32);
    for (name, shape, data) in &tensors {
        w.str(name);
        w.u8(shape.len() as u8);
        for &d in shape {
            w.u32(d as u32);
        }
        for &v in data {
            w.f32(v);
        }
    }
    w.into_bytes()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<DeployModel> {
    let mut r = ByteReader::new(bytes);
    let magic = r
        .bytes(4)
        .map_err(|_| CodecError::Format("checkpoint too short".into()))?;
    if magic != CKPT_MAGIC {
        return Err(CodecError::Format("not a checkpoint file".into()));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(CodecError::Version(format!(
            "checkpoint version {} unsupported",
            version
        )));
    }
    let cfg = read_config(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let nd = r.u8()? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        tensors.push((name, shape, data));
    }
    DeployModel::from_tensors(cfg, &tensors)
}

/// Binding hash of a serialized checkpoint.
pub fn checkpoint_hash(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_cfg() -> CodecConfig {
        CodecConfig {
            c_lat: 4,
            enc_width: 8,
            ent_hidden: 8,
            branches: 2,
            patch: 16,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let model = crate::model::CodecModel::init(small_cfg(), &mut rng).consolidate();
        let bytes = write_checkpoint(&model);
        let back = read_checkpoint(&bytes).unwrap();
        let bytes2 = write_checkpoint(&back);
        assert_eq!(bytes, bytes2, "checkpoint must reserialize identically");
        assert_eq!(checkpoint_hash(&bytes), checkpoint_hash(&bytes2));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let model = crate::model::CodecModel::init(small_cfg(), &mut rng).consolidate();
        let mut bytes = write_checkpoint(&model);
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(read_checkpoint(&bad), Err(CodecError::Format(_))));
        bytes[5] = 99;
        assert!(matches!(read_checkpoint(&bytes), Err(CodecError::Version(_))));
    }
}
