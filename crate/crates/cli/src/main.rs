//! ovc: encode, decode, and measure overfitted-codec bitstreams.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ovc_core::bitstream::{checkpoint_hash, read_checkpoint, read_sequence, write_checkpoint};
use ovc_core::error::CodecError;
use ovc_core::frameio::{atomic_write, read_csv, save_frames, write_csv, FrameSource, SweepRow};
use ovc_core::metrics::{bd_rate, ms_ssim, psnr, RdPoint};
use ovc_core::overfit::{encode_sequence, lambda_sweep, pretrain, RdConfig};
use ovc_core::pipeline::codec::decode_sequence;
use ovc_core::pipeline::gop::GopMode;

mod config;

#[derive(Parser)]
#[command(name = "ovc", version, about = "Overfitted neural video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ld,
    Ra,
}

impl From<Mode> for GopMode {
    fn from(m: Mode) -> GopMode {
        match m {
            Mode::Ld => GopMode::LowDelay,
            Mode::Ra => GopMode::RandomAccess,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode frames (PPM directory or raw RGB24 + sidecar) to a bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "ld")]
        mode: Mode,
        /// GOP length (random access; power of two).
        #[arg(long, default_value_t = 8)]
        gop: usize,
        /// Intra period (random access; 0 = one GOP per intra).
        #[arg(long, default_value_t = 0)]
        intra_period: usize,
        #[arg(long, default_value_t = 400.0)]
        lambda: f32,
        /// Overfitting steps per frame (I frames; P/B use the same value
        /// unless --overfit-steps-pb is given).
        #[arg(long, default_value_t = 100)]
        overfit_steps: usize,
        #[arg(long)]
        overfit_steps_pb: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode a bitstream to a directory of PPM frames.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PSNR and MS-SSIM between two frame sequences.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Encode once per lambda and write an RD CSV.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated lambda list.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f32>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "ld")]
        mode: Mode,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        #[arg(long, default_value_t = 0)]
        intra_period: usize,
        #[arg(long, default_value_t = 100)]
        overfit_steps: usize,
    },
    /// BD-rate of a test RD curve against an anchor (CSV inputs).
    Bdrate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
    },
    /// Pretrain a model on procedural clips (plus an optional corpus dir).
    Pretrain {
        /// Directory of clips: each subdirectory a PPM sequence, or .rgb
        /// files with sidecars.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// TOML config overriding model/pretrain defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_model_checked(
    checkpoint: &PathBuf,
    expect_hash: Option<[u8; 32]>,
) -> Result<ovc_core::model::DeployModel, CodecError> {
    let bytes = std::fs::read(checkpoint)?;
    if let Some(expect) = expect_hash {
        let actual = checkpoint_hash(&bytes);
        if actual != expect {
            return Err(CodecError::Param(format!(
                "checkpoint hash mismatch: stream was encoded with {}, loaded model is {}",
                hex32(&expect),
                hex32(&actual)
            )));
        }
    }
    read_checkpoint(&bytes)
}

fn hex32(h: &[u8; 32]) -> String {
    h.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn run(cli: Cli) -> Result<(), CodecError> {
    match cli.cmd {
        Cmd::Encode {
            input,
            output,
            mode,
            gop,
            intra_period,
            lambda,
            overfit_steps,
            overfit_steps_pb,
            checkpoint,
        } => {
            let frames = FrameSource::detect(&input)?.load()?;
            let model = load_model_checked(&checkpoint, None)?;
            let rd = RdConfig {
                lambda,
                steps_i: overfit_steps,
                steps_pb: overfit_steps_pb.unwrap_or(overfit_steps),
                ..Default::default()
            };
            let outcome = encode_sequence(model, &frames, mode.into(), gop, intra_period, &rd)?;
            atomic_write(&output, &outcome.bytes)?;
            let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
            let bpp = ovc_core::bitstream::measure_bpp(&outcome.bytes, frames.len(), h, w);
            let mut psnr_sum = 0.0;
            for (x, r) in frames.iter().zip(&outcome.recons) {
                psnr_sum += psnr(x, r)?;
            }
            println!(
                "encoded {} frames: {} bytes, {:.4} bpp, {:.2} dB",
                frames.len(),
                outcome.bytes.len(),
                bpp,
                psnr_sum / frames.len() as f64
            );
            Ok(())
        }
        Cmd::Decode {
            input,
            output,
            checkpoint,
        } => {
            let bytes = std::fs::read(&input)?;
            let (header, _) = read_sequence(&bytes)?;
            let model = load_model_checked(&checkpoint, Some(header.checkpoint_hash))?;
            let (header, frames) = decode_sequence(model, &bytes)?;
            save_frames(&output, &frames)?;
            println!(
                "decoded {} frames of {}x{} to {}",
                frames.len(),
                header.width,
                header.height,
                output.display()
            );
            Ok(())
        }
        Cmd::Metrics { reference, test } => {
            let ref_frames = FrameSource::detect(&reference)?.load()?;
            let test_frames = FrameSource::detect(&test)?.load()?;
            if ref_frames.len() != test_frames.len() {
                return Err(CodecError::Param(format!(
                    "frame counts differ: {} vs {}",
                    ref_frames.len(),
                    test_frames.len()
                )));
            }
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            for (i, (a, b)) in ref_frames.iter().zip(&test_frames).enumerate() {
                let p = psnr(a, b)?;
                let s = ms_ssim(a, b)?;
                println!("frame {:4}: psnr {:7.3} dB  ms-ssim {:.5}", i, p, s);
                psnr_sum += p;
                ssim_sum += s;
            }
            let n = ref_frames.len() as f64;
            println!("mean: psnr {:.3} dB  ms-ssim {:.5}", psnr_sum / n, ssim_sum / n);
            Ok(())
        }
        Cmd::Sweep {
            input,
            checkpoint,
            lambdas,
            csv,
            mode,
            gop,
            intra_period,
            overfit_steps,
        } => {
            let frames = FrameSource::detect(&input)?.load()?;
            let ckpt_bytes = std::fs::read(&checkpoint)?;
            let rd = RdConfig {
                steps_i: overfit_steps,
                steps_pb: overfit_steps,
                ..Default::default()
            };
            let points = lambda_sweep(
                &ckpt_bytes,
                &frames,
                mode.into(),
                gop,
                intra_period,
                &lambdas,
                &rd,
            )?;
            let rows: Vec<SweepRow> = points
                .iter()
                .map(|p| SweepRow {
                    lambda: p.lambda as f64,
                    bpp: p.bpp,
                    psnr: p.psnr,
                    ms_ssim: p.ms_ssim,
                })
                .collect();
            write_csv(&csv, &rows)?;
            for r in &rows {
                println!(
                    "lambda {:10.4}: {:.4} bpp, {:.2} dB, ms-ssim {:.5}",
                    r.lambda, r.bpp, r.psnr, r.ms_ssim
                );
            }
            println!("wrote {}", csv.display());
            Ok(())
        }
        Cmd::Bdrate { test, anchor } => {
            let to_points = |rows: &[SweepRow], use_ssim: bool| -> Vec<RdPoint> {
                let mut pts: Vec<RdPoint> = rows
                    .iter()
                    .map(|r| RdPoint {
                        bpp: r.bpp,
                        quality: if use_ssim { r.ms_ssim } else { r.psnr },
                    })
                    .collect();
                pts.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
                pts
            };
            let t = read_csv(&test)?;
            let a = read_csv(&anchor)?;
            let bd_psnr = bd_rate(&to_points(&t, false), &to_points(&a, false))?;
            println!("bd-rate (psnr):    {:+.2}%", bd_psnr);
            match bd_rate(&to_points(&t, true), &to_points(&a, true)) {
                Ok(bd_ssim) => println!("bd-rate (ms-ssim): {:+.2}%", bd_ssim),
                Err(e) => eprintln!("ms-ssim bd-rate unavailable: {e}"),
            }
            Ok(())
        }
        Cmd::Pretrain { corpus, config, out } => {
            let (model_cfg, pt_cfg) = config::load(config.as_deref())?;
            let extra = match corpus {
                Some(dir) => config::load_corpus(&dir)?,
                None => Vec::new(),
            };
            let (model, report) = pretrain(model_cfg, &pt_cfg, &extra)?;
            for c in &report.checkpoints {
                println!(
                    "step {:5}: loss {:9.4}  psnr {:6.2} dB  rate {:7.4} bpp",
                    c.step, c.loss, c.psnr, c.bpp_estimate
                );
            }
            let bytes = write_checkpoint(&model);
            atomic_write(&out, &bytes)?;
            println!(
                "wrote {} ({} KB, hash {})",
                out.display(),
                bytes.len() / 1024,
                hex32(&checkpoint_hash(&bytes))
            );
            Ok(())
        }
    }
}
