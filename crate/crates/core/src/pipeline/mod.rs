//! Frame-level orchestration: encoders, the neural-field decoder, GOP
//! scheduling, and the frame coding loop.

pub mod codec;
pub mod decoder;
pub mod encoder;
pub mod gop;
pub mod motion;

pub use codec::{CodedFrame, FrameBuffer, FrameCoder};
pub use decoder::{decode_frame, DecoderWeights};
pub use encoder::ImageEncoder;
pub use gop::{build_gop, schedule_q_glob, FrameKind, FrameRecord, GopMode, GopStructure, QGlobTable};
pub use motion::{MotionEncoder, MotionPyramid};

use crate::error::{CodecError, Result};
use crate::tensor::Tensor;

/// Replicate-pad a (C,H,W) frame to multiples of `align` on both axes.
pub fn pad_to_multiple(x: &Tensor, align: usize) -> Result<(Tensor, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(CodecError::Shape(format!("pad expects (C,H,W), got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let ph = h.div_ceil(align) * align;
    let pw = w.div_ceil(align) * align;
    if ph == h && pw == w {
        return Ok((x.reshape(s)?, 0, 0));
    }
    let mut data = vec![0.0f32; c * ph * pw];
    let src = x.data();
    for ch in 0..c {
        for i in 0..ph {
            let si = i.min(h - 1);
            for j in 0..pw {
                let sj = j.min(w - 1);
                data[(ch * ph + i) * pw + j] = src[(ch * h + si) * w + sj];
            }
        }
    }
    Ok((Tensor::from_vec(data, &[c, ph, pw])?, ph - h, pw - w))
}

/// Crop a padded (C,H,W) frame back to its true extent.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    let (c, ph, pw) = (s[0], s[1], s[2]);
    if h > ph || w > pw {
        return Err(CodecError::Shape("crop larger than source".into()));
    }
    if h == ph && w == pw {
        return x.reshape(s);
    }
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            data[(ch * h + i) * w..(ch * h + i) * w + w]
                .copy_from_slice(&x.data()[(ch * ph + i) * pw..(ch * ph + i) * pw + w]);
        }
    }
    Tensor::from_vec(data, &[c, h, w])
}

#[cfg(test)]
mod pad_tests {
    use super::*;

    #[test]
    fn pad_and_crop_roundtrip() {
        let data: Vec<f32> = (0..3 * 5 * 6).map(|v| v as f32).collect();
        let x = Tensor::from_slice(&data, &[3, 5, 6]).unwrap();
        let (padded, dh, dw) = pad_to_multiple(&x, 8).unwrap();
        assert_eq!(padded.shape(), &[3, 8, 8]);
        assert_eq!((dh, dw), (3, 2));
        // Replicated edges.
        assert_eq!(padded.data()[(0 * 8 + 7) * 8 + 7], data[(0 * 5 + 4) * 6 + 5]);
        let back = crop(&padded, 5, 6).unwrap();
        assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn pad_noop_when_aligned() {
        let x = Tensor::zeros(&[1, 8, 8]);
        let (p, dh, dw) = pad_to_multiple(&x, 8).unwrap();
        assert_eq!(p.shape(), &[1, 8, 8]);
        assert_eq!((dh, dw), (0, 0));
    }
}
