use ovc_core::bitstream::{read_checkpoint, write_checkpoint};
use ovc_core::model::{CodecConfig, CodecModel};
use ovc_core::overfit::{encode_sequence, RdConfig};
use ovc_core::pipeline::gop::GopMode;
use ovc_core::synth::{clip, ClipKind};
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let cfg = CodecConfig::default();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
    let model = CodecModel::init(cfg, &mut rng).consolidate();
    let ckpt = write_checkpoint(&model);
    println!("checkpoint: {} KB", ckpt.len() / 1024);
    let frames = clip(ClipKind::MovingShapes, 2, 128, 128, 5);
    let rd = RdConfig {
        steps_i: 30,
        steps_pb: 30,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = encode_sequence(read_checkpoint(&ckpt).unwrap(), &frames, GopMode::LowDelay, 1, 0, &rd).unwrap();
    let dt = t0.elapsed();
    println!(
        "2 frames x 30 steps at 128x128: {:.2?} ({:.0} ms/step), {} bytes",
        dt,
        dt.as_secs_f64() * 1000.0 / 60.0,
        out.bytes.len()
    );
}
