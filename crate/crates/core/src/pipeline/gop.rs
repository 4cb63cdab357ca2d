//! GOP construction, decode ordering, and the hierarchical quality table.

use crate::error::{CodecError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GopMode {
    LowDelay,
    RandomAccess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    I,
    P,
    B,
}

#[derive(Clone, Copy, Debug)]
pub struct FrameRecord {
    pub display: usize,
    pub kind: FrameKind,
    /// Display indices of the references (ref1, ref2).
    pub ref1: Option<usize>,
    pub ref2: Option<usize>,
    pub temporal_layer: usize,
}

#[derive(Clone, Debug)]
pub struct GopStructure {
    pub mode: GopMode,
    pub gop_len: usize,
    pub intra_period: usize,
    /// Frames in decode order.
    pub frames: Vec<FrameRecord>,
}

/// Build the coding structure for `total` frames.
///
/// Low Delay is a linear chain (one intra, every P referencing its
/// predecessor). Random Access builds dyadic hierarchies per GOP span:
/// the span endpoint is coded first (I at intra-period boundaries, P
/// otherwise), then midpoints recursively referencing the span ends.
pub fn build_gop(mode: GopMode, n: usize, intra_period: usize, total: usize) -> Result<GopStructure> {
    if total == 0 {
        return Err(CodecError::Param("empty sequence".into()));
    }
    match mode {
        GopMode::LowDelay => {
            let mut frames = Vec::with_capacity(total);
            for d in 0..total {
                frames.push(FrameRecord {
                    display: d,
                    kind: if d == 0 { FrameKind::I } else { FrameKind::P },
                    ref1: if d == 0 { None } else { Some(d - 1) },
                    ref2: None,
                    temporal_layer: 0,
                });
            }
            Ok(GopStructure {
                mode,
                gop_len: 1,
                intra_period: 0,
                frames,
            })
        }
        GopMode::RandomAccess => {
            if n < 2 || !n.is_power_of_two() {
                return Err(CodecError::Param(format!(
                    "random-access GOP length {} must be a power of two >= 2",
                    n
                )));
            }
            let ip = if intra_period == 0 { n } else { intra_period };
            if ip % n != 0 {
                return Err(CodecError::Param(format!(
                    "intra period {} must be a multiple of GOP length {}",
                    ip, n
                )));
            }
            let mut frames = vec![FrameRecord {
                display: 0,
                kind: FrameKind::I,
                ref1: None,
                ref2: None,
                temporal_layer: 0,
            }];
            let mut lo = 0usize;
            while lo + 1 < total {
                let hi = (lo + n).min(total - 1);
                let kind = if hi % ip == 0 { FrameKind::I } else { FrameKind::P };
                frames.push(FrameRecord {
                    display: hi,
                    kind,
                    ref1: (kind == FrameKind::P).then_some(lo),
                    ref2: None,
                    temporal_layer: 0,
                });
                push_mids(&mut frames, lo, hi, 1);
                lo = hi;
            }
            Ok(GopStructure {
                mode,
                gop_len: n,
                intra_period: ip,
                frames,
            })
        }
    }
}

fn push_mids(frames: &mut Vec<FrameRecord>, lo: usize, hi: usize, layer: usize) {
    if hi - lo < 2 {
        return;
    }
    let mid = (lo + hi) / 2;
    frames.push(FrameRecord {
        display: mid,
        kind: FrameKind::B,
        ref1: Some(lo),
        ref2: Some(hi),
        temporal_layer: layer,
    });
    push_mids(frames, lo, mid, layer + 1);
    push_mids(frames, mid, hi, layer + 1);
}

impl GopStructure {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Every reference decodes strictly before its user.
    pub fn validate_causality(&self) -> Result<()> {
        let mut decoded = std::collections::HashSet::new();
        for f in &self.frames {
            for r in [f.ref1, f.ref2].into_iter().flatten() {
                if !decoded.contains(&r) {
                    return Err(CodecError::State(format!(
                        "frame {} references undecoded frame {}",
                        f.display, r
                    )));
                }
            }
            decoded.insert(f.display);
        }
        Ok(())
    }

    /// Output reorder delay in frames: how far ahead of a frame's display
    /// index the decoder must already have read.
    pub fn measured_latency(&self) -> usize {
        let mut max_seen = 0usize;
        let mut latency = 0usize;
        for f in &self.frames {
            max_seen = max_seen.max(f.display);
            latency = latency.max(max_seen - f.display);
        }
        latency
    }

    /// Decode position of the last frame that references `display`.
    pub fn last_use(&self, display: usize) -> Option<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.ref1 == Some(display) || f.ref2 == Some(display))
            .map(|(pos, _)| pos)
            .max()
    }
}

/// Frame-level quality weights implementing the hierarchical quality
/// structure. Fixed after pretraining; `adaptive = false` flattens every
/// weight to 1 (the V2.1/V2.2 ablation).
#[derive(Clone, Copy, Debug)]
pub struct QGlobTable {
    pub i_frame: f32,
    pub ld_p: f32,
    pub ra_p: f32,
    pub b_layer1: f32,
    pub b_decay: f32,
    pub adaptive: bool,
}

impl Default for QGlobTable {
    fn default() -> Self {
        QGlobTable {
            i_frame: 1.4,
            ld_p: 1.0,
            ra_p: 1.3,
            b_layer1: 1.2,
            b_decay: 0.85,
            adaptive: true,
        }
    }
}

/// Quality weight for one frame of a GOP structure.
pub fn schedule_q_glob(table: &QGlobTable, mode: GopMode, record: &FrameRecord) -> f32 {
    if !table.adaptive {
        return 1.0;
    }
    match record.kind {
        FrameKind::I => table.i_frame,
        FrameKind::P => match mode {
            GopMode::LowDelay => table.ld_p,
            GopMode::RandomAccess => table.ra_p,
        },
        FrameKind::B => {
            table.b_layer1 * table.b_decay.powi(record.temporal_layer.saturating_sub(1) as i32)
        }
    }
}
