//! Whole-pipeline integration: overfit, pack, serialize, decode on a
//! fresh coder, compare bit-exactly. Uses a tiny seeded model without
//! pretraining; the acceptance suite covers trained behavior.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ovc_core::bitstream::{checkpoint_hash, read_checkpoint, write_checkpoint};
use ovc_core::model::{CodecConfig, CodecModel};
use ovc_core::overfit::{encode_sequence, RdConfig};
use ovc_core::pipeline::codec::decode_sequence;
use ovc_core::pipeline::gop::GopMode;
use ovc_core::synth::{clip, ClipKind};

fn tiny_cfg() -> CodecConfig {
    CodecConfig {
        c_lat: 4,
        enc_width: 8,
        ent_hidden: 8,
        branches: 2,
        patch: 16,
        ..Default::default()
    }
}

fn tiny_rd(steps: usize) -> RdConfig {
    RdConfig {
        steps_i: steps,
        steps_pb: steps,
        eval_every: 5,
        lambda: 400.0,
        ..Default::default()
    }
}

#[test]
fn encode_decode_roundtrip_ld() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let model = CodecModel::init(tiny_cfg(), &mut rng).consolidate();
    let ckpt = write_checkpoint(&model);
    let frames = clip(ClipKind::MovingShapes, 3, 32, 32, 5);

    let outcome = encode_sequence(
        read_checkpoint(&ckpt).unwrap(),
        &frames,
        GopMode::LowDelay,
        1,
        0,
        &tiny_rd(6),
    )
    .unwrap();
    assert_eq!(outcome.recons.len(), 3);
    assert_eq!(
        outcome.header.checkpoint_hash,
        checkpoint_hash(&ckpt),
        "header binds the checkpoint"
    );

    let (header, decoded) = decode_sequence(read_checkpoint(&ckpt).unwrap(), &outcome.bytes).unwrap();
    assert_eq!(header.frames, 3);
    for (enc, dec) in outcome.recons.iter().zip(&decoded) {
        assert_eq!(enc.data(), dec.data(), "byte-identical reconstruction");
    }
}

#[test]
fn encode_decode_roundtrip_ra() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let model = CodecModel::init(tiny_cfg(), &mut rng).consolidate();
    let ckpt = write_checkpoint(&model);
    let frames = clip(ClipKind::GlobalPan, 5, 32, 32, 9);

    let outcome = encode_sequence(
        read_checkpoint(&ckpt).unwrap(),
        &frames,
        GopMode::RandomAccess,
        4,
        4,
        &tiny_rd(4),
    )
    .unwrap();
    // Decode order: 0, 4, 2, 1, 3.
    let displays: Vec<u32> = outcome.packets.iter().map(|p| p.display).collect();
    assert_eq!(displays, vec![0, 4, 2, 1, 3]);

    let (_, decoded) = decode_sequence(read_checkpoint(&ckpt).unwrap(), &outcome.bytes).unwrap();
    for (enc, dec) in outcome.recons.iter().zip(&decoded) {
        assert_eq!(enc.data(), dec.data());
    }
}

#[test]
fn overfitting_never_worsens_objective() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let model = CodecModel::init(tiny_cfg(), &mut rng).consolidate();
    let ckpt = write_checkpoint(&model);
    let frames = clip(ClipKind::NoiseTexture, 2, 32, 32, 11);
    let outcome = encode_sequence(
        read_checkpoint(&ckpt).unwrap(),
        &frames,
        GopMode::LowDelay,
        1,
        0,
        &tiny_rd(20),
    )
    .unwrap();
    for (display, _, _, obj0, obj_best) in &outcome.frame_stats {
        assert!(
            obj_best <= obj0,
            "frame {}: best {} exceeds initial {}",
            display,
            obj_best,
            obj0
        );
    }
}

#[test]
fn zero_step_overfit_is_pretrained_coding() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let model = CodecModel::init(tiny_cfg(), &mut rng).consolidate();
    let ckpt = write_checkpoint(&model);
    let frames = clip(ClipKind::MovingShapes, 2, 32, 32, 13);
    let a = encode_sequence(
        read_checkpoint(&ckpt).unwrap(),
        &frames,
        GopMode::LowDelay,
        1,
        0,
        &tiny_rd(0),
    )
    .unwrap();
    let b = encode_sequence(
        read_checkpoint(&ckpt).unwrap(),
        &frames,
        GopMode::LowDelay,
        1,
        0,
        &tiny_rd(0),
    )
    .unwrap();
    assert_eq!(a.bytes, b.bytes, "zero-step coding is deterministic");
    for (_, _, _, obj0, obj_best) in &a.frame_stats {
        assert_eq!(obj0, obj_best, "zero steps cannot improve");
    }
}
