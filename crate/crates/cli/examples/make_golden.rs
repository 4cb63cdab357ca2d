//! Regenerate the golden fixtures under tests/data: a seeded checkpoint,
//! the low-delay bitstream of the reference clip, and the sha256 of every
//! reconstruction. Run from the repository root:
//!
//!     cargo run --release -p ovc-cli --example make_golden

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ovc_core::bitstream::{checkpoint_hash, read_checkpoint, write_checkpoint};
use ovc_core::frameio::{atomic_write, ppm_bytes};
use ovc_core::model::{CodecConfig, CodecModel};
use ovc_core::overfit::{encode_sequence, RdConfig};
use ovc_core::pipeline::gop::GopMode;
use ovc_core::synth::{clip, ClipKind};

pub fn golden_config() -> CodecConfig {
    CodecConfig {
        c_lat: 4,
        enc_width: 8,
        ent_hidden: 8,
        branches: 2,
        patch: 16,
        ..Default::default()
    }
}

pub fn golden_rd() -> RdConfig {
    RdConfig {
        lambda: 400.0,
        steps_i: 6,
        steps_pb: 6,
        eval_every: 3,
        seed: 17,
        ..Default::default()
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn main() {
    let data = Path::new("crates/cli/tests/data");
    std::fs::create_dir_all(data).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(0x601d);
    let model = CodecModel::init(golden_config(), &mut rng).consolidate();
    let ckpt = write_checkpoint(&model);
    atomic_write(&data.join("golden.ovck"), &ckpt).unwrap();
    println!("checkpoint: {} bytes, hash {}", ckpt.len(), sha_hex(&checkpoint_hash(&ckpt)));

    let frames = clip(ClipKind::MovingShapes, 8, 64, 64, 0xc11f);
    let outcome = encode_sequence(
        read_checkpoint(&ckpt).unwrap(),
        &frames,
        GopMode::LowDelay,
        1,
        0,
        &golden_rd(),
    )
    .unwrap();
    atomic_write(&data.join("golden_ld.ovc"), &outcome.bytes).unwrap();
    println!("bitstream: {} bytes", outcome.bytes.len());

    let mut lines = String::new();
    for (i, r) in outcome.recons.iter().enumerate() {
        let ppm = ppm_bytes(r).unwrap();
        lines.push_str(&format!("{} {}\n", i, sha_hex(&ppm)));
    }
    atomic_write(&data.join("golden_recon_sha256.txt"), lines.as_bytes()).unwrap();
    println!("recon hashes written");
}
