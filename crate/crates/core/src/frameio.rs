//! Raw frame IO: binary PPM (P6), raw RGB24 sequences, CSV reports.
//!
//! Output files are written to a temp file in the target directory and
//! atomically renamed, so a failed run never leaves partial output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CodecError, Result};
use crate::tensor::Tensor;

/// Write bytes via temp-file-plus-rename in the destination directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_bytes(frame: &Tensor) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CodecError::Shape(format!("frame must be (3,H,W), got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = (d[(c * h + i) * w + j].clamp(0.0, 1.0) * 255.0).round();
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

fn from_bytes(bytes: &[u8], h: usize, w: usize) -> Result<Tensor> {
    if bytes.len() != 3 * h * w {
        return Err(CodecError::Format(format!(
            "pixel payload {} bytes, want {}",
            bytes.len(),
            3 * h * w
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[(c * h + i) * w + j] = bytes[(i * w + j) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(data, &[3, h, w])
}

/// Serialize one frame as binary PPM (P6, maxval 255).
pub fn ppm_bytes(frame: &Tensor) -> Result<Vec<u8>> {
    let s = frame.shape();
    let mut out = format!("P6\n{} {}\n255\n", s[2], s[1]).into_bytes();
    out.extend(to_bytes(frame)?);
    Ok(out)
}

pub fn save_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    atomic_write(path, &ppm_bytes(frame)?)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CodecError::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err(CodecError::Format("not a binary P6 ppm".into()));
    }
    let w: usize = token(bytes)?
        .parse()
        .map_err(|_| CodecError::Format("bad ppm width".into()))?;
    let h: usize = token(bytes)?
        .parse()
        .map_err(|_| CodecError::Format("bad ppm height".into()))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| CodecError::Format("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(CodecError::Format(format!("only maxval 255 supported, got {}", maxval)));
    }
    // Exactly one whitespace byte separates header and pixels.
    pos += 1;
    if bytes.len() < pos {
        return Err(CodecError::Format("missing ppm payload".into()));
    }
    from_bytes(&bytes[pos..], h, w)
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    parse_ppm(&fs::read(path)?)
}

/// A directory of PPM frames (lexicographic) or a raw RGB24 file with a
/// text sidecar `<file>.txt` holding "width height frames".
pub enum FrameSource {
    PpmDir(PathBuf),
    Raw(PathBuf),
}

impl FrameSource {
    pub fn detect(path: &Path) -> Result<FrameSource> {
        if path.is_dir() {
            Ok(FrameSource::PpmDir(path.to_path_buf()))
        } else if path.is_file() {
            Ok(FrameSource::Raw(path.to_path_buf()))
        } else {
            Err(CodecError::Format(format!("no such input: {}", path.display())))
        }
    }

    pub fn load(&self) -> Result<Vec<Tensor>> {
        match self {
            FrameSource::PpmDir(dir) => {
                let mut names: Vec<PathBuf> = fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension().map(|e| e.eq_ignore_ascii_case("ppm")).unwrap_or(false)
                    })
                    .collect();
                names.sort();
                if names.is_empty() {
                    return Err(CodecError::Format(format!(
                        "no .ppm frames in {}",
                        dir.display()
                    )));
                }
                let frames: Vec<Tensor> =
                    names.iter().map(|p| load_ppm(p)).collect::<Result<_>>()?;
                let shape = frames[0].shape().to_vec();
                for f in &frames {
                    if f.shape() != shape {
                        return Err(CodecError::Format("frame dimensions differ".into()));
                    }
                }
                Ok(frames)
            }
            FrameSource::Raw(file) => {
                let sidecar = file.with_extension("txt");
                let desc = fs::read_to_string(&sidecar).map_err(|_| {
                    CodecError::Format(format!("missing sidecar {}", sidecar.display()))
                })?;
                let nums: Vec<usize> = desc
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| CodecError::Format("sidecar must hold W H T".into()))?;
                if nums.len() != 3 {
                    return Err(CodecError::Format("sidecar must hold W H T".into()));
                }
                let (w, h, t) = (nums[0], nums[1], nums[2]);
                let bytes = fs::read(file)?;
                if bytes.len() != 3 * w * h * t {
                    return Err(CodecError::Format(format!(
                        "raw file is {} bytes, descriptor implies {}",
                        bytes.len(),
                        3 * w * h * t
                    )));
                }
                (0..t)
                    .map(|i| from_bytes(&bytes[i * 3 * h * w..(i + 1) * 3 * h * w], h, w))
                    .collect()
            }
        }
    }
}

/// Save frames as frame_%05d.ppm under a directory.
pub fn save_frames(dir: &Path, frames: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_ppm(&dir.join(format!("frame_{:05}.ppm", i)), f)?;
    }
    Ok(())
}

/// RD sweep row.
#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

pub fn write_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from("lambda,bpp,psnr,ms_ssim\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.lambda, r.bpp, r.psnr, r.ms_ssim));
    }
    atomic_write(path, s.as_bytes())
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(CodecError::Format(format!("bad csv row: {}", line)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| CodecError::Format(format!("bad csv number: {}", s)))
        };
        rows.push(SweepRow {
            lambda: num(parts[0])?,
            bpp: num(parts[1])?,
            psnr: num(parts[2])?,
            ms_ssim: num(parts[3])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn checker(h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    data[(c * h + i) * w + j] = ((i + j + c) % 2) as f32;
                }
            }
        }
        Tensor::from_vec(data, &[3, h, w]).unwrap()
    }

    #[test]
    fn ppm_roundtrip_byte_exact() {
        let d = tmpdir();
        let frame = checker(6, 5);
        let p = d.path().join("x.ppm");
        save_ppm(&p, &frame).unwrap();
        let bytes1 = std::fs::read(&p).unwrap();
        let loaded = load_ppm(&p).unwrap();
        let p2 = d.path().join("y.ppm");
        save_ppm(&p2, &loaded).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(loaded.shape(), &[3, 6, 5]);
    }

    #[test]
    fn ppm_with_comments_parses() {
        let mut bytes = b"P6\n# a comment\n4 2\n# another\n255\n".to_vec();
        bytes.extend(std::iter::repeat(128u8).take(4 * 2 * 3));
        let t = parse_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 4]);
        assert!((t.data()[0] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn ppm_truncated_is_format_error() {
        let bytes = b"P6\n4 2\n255\nxx".to_vec();
        assert!(matches!(parse_ppm(&bytes), Err(CodecError::Format(_))));
    }

    #[test]
    fn raw_rgb_with_sidecar() {
        let d = tmpdir();
        let raw = d.path().join("clip.rgb");
        let bytes: Vec<u8> = (0..3 * 4 * 2 * 3).map(|i| (i % 251) as u8).collect();
        atomic_write(&raw, &bytes).unwrap();
        atomic_write(&d.path().join("clip.txt"), b"4 2 3").unwrap();
        let frames = FrameSource::detect(&raw).unwrap().load().unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].shape(), &[3, 2, 4]);
        // Interleaved byte (x=1, y=0, c=2) of frame 0.
        assert!((frames[0].data()[(2 * 2 * 4) + 1] - (5 % 251) as f32 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn raw_rgb_size_mismatch() {
        let d = tmpdir();
        let raw = d.path().join("c.rgb");
        atomic_write(&raw, &[0u8; 10]).unwrap();
        atomic_write(&d.path().join("c.txt"), b"4 2 3").unwrap();
        assert!(matches!(
            FrameSource::detect(&raw).unwrap().load(),
            Err(CodecError::Format(_))
        ));
    }

    #[test]
    fn ppm_dir_loads_sorted_and_validates() {
        let d = tmpdir();
        save_ppm(&d.path().join("b.ppm"), &checker(4, 4)).unwrap();
        save_ppm(&d.path().join("a.ppm"), &checker(4, 4).scale(0.5)).unwrap();
        let frames = FrameSource::detect(d.path()).unwrap().load().unwrap();
        assert_eq!(frames.len(), 2);
        // a.ppm sorts first.
        assert!(frames[0].data()[0] <= frames[1].data()[0]);
    }

    #[test]
    fn csv_roundtrip() {
        let d = tmpdir();
        let rows = vec![
            SweepRow { lambda: 0.01, bpp: 0.42, psnr: 31.5, ms_ssim: 0.93 },
            SweepRow { lambda: 0.05, bpp: 0.9, psnr: 35.0, ms_ssim: 0.97 },
        ];
        let p = d.path().join("rd.csv");
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("lambda,bpp,psnr,ms_ssim\n"));
        let back = read_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].bpp, 0.9);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let d = tmpdir();
        let p = d.path().join("f.bin");
        atomic_write(&p, b"hello").unwrap();
        let entries: Vec<_> = std::fs::read_dir(d.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
