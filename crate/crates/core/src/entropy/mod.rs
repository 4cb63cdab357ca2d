//! Semi-autoregressive conditional entropy model over hierarchical latents.
//!
//! Channels split into four uneven groups (1:1:2:4); each group's plane is
//! coded in two spatial phases of a 2x2 checkerboard (anchors then
//! non-anchors), giving eight decode steps per level regardless of
//! resolution. The gamma and beta halves of a latent share the grouping and
//! are coded in the same steps into parallel streams.

pub mod model;
pub mod prior;

pub use model::{ContractedEntropy, CtxInputs, EntropyConfig, EntropyModel, Fusion};
pub use prior::FactorizedPrior;

use crate::error::{CodecError, Result};
use crate::range_coder::{value_bits, value_to_symbol, GaussParams, GaussTableCache};

/// Four channel-group sizes for one stream (gamma or beta).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelGrouping {
    pub sizes: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupingKind {
    /// 1:1:2:4 proportions (later groups see more context).
    Uneven,
    /// Four equal groups; the ablation baseline.
    Even,
}

/// Split C channels into four groups proportional to 1:1:2:4.
///
/// Largest-remainder assignment for non-divisible counts (ties go to the
/// later group); every group keeps at least one channel.
pub fn split_channels(c: usize) -> Result<ChannelGrouping> {
    split_with_weights(c, [1.0, 1.0, 2.0, 4.0])
}

/// Even 4-way split (V3.1 ablation).
pub fn split_channels_even(c: usize) -> Result<ChannelGrouping> {
    split_with_weights(c, [1.0, 1.0, 1.0, 1.0])
}

pub fn split_for(kind: GroupingKind, c: usize) -> Result<ChannelGrouping> {
    match kind {
        GroupingKind::Uneven => split_channels(c),
        GroupingKind::Even => split_channels_even(c),
    }
}

fn split_with_weights(c: usize, w: [f64; 4]) -> Result<ChannelGrouping> {
    if c < 4 {
        return Err(CodecError::Param(format!(
            "need >= 4 channels for grouping, got {}",
            c
        )));
    }
    let total: f64 = w.iter().sum();
    let ideal: Vec<f64> = w.iter().map(|wi| c as f64 * wi / total).collect();
    let mut sizes = [0usize; 4];
    for (i, id) in ideal.iter().enumerate() {
        sizes[i] = id.floor() as usize;
    }
    let mut assigned: usize = sizes.iter().sum();
    // Distribute leftovers by largest remainder, later group on ties.
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(b.cmp(&a))
    });
    let mut k = 0;
    while assigned < c {
        sizes[order[k % 4]] += 1;
        assigned += 1;
        k += 1;
    }
    // Min-1 repair: steal from the largest group.
    for g in 0..4 {
        while sizes[g] == 0 {
            let donor = (0..4).max_by_key(|&i| sizes[i]).unwrap();
            if sizes[donor] <= 1 {
                return Err(CodecError::Param("cannot keep all groups non-empty".into()));
            }
            sizes[donor] -= 1;
            sizes[g] += 1;
        }
    }
    Ok(ChannelGrouping { sizes })
}

impl ChannelGrouping {
    pub fn channels(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Channel range of group g within one stream.
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..g].iter().sum();
        start..start + self.sizes[g]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Anchor,
    NonAnchor,
}

/// One decode step: every slot of one channel group in one spatial phase,
/// in both the gamma and beta streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeStep {
    pub group: usize,
    pub phase: Phase,
}

/// The fixed 8-step schedule: two phases per group, groups in order.
pub fn schedule_quadtree(grouping: &ChannelGrouping) -> Vec<DecodeStep> {
    let _ = grouping;
    let mut steps = Vec::with_capacity(8);
    for group in 0..4 {
        steps.push(DecodeStep {
            group,
            phase: Phase::Anchor,
        });
        steps.push(DecodeStep {
            group,
            phase: Phase::NonAnchor,
        });
    }
    steps
}

/// Row-major positions of a phase on an h x w plane. The checkerboard
/// anchors are the (i + j) even cells; a 1 x 1 plane has no non-anchors.
pub fn phase_positions(h: usize, w: usize, phase: Phase) -> Vec<(usize, usize)> {
    let want = match phase {
        Phase::Anchor => 0,
        Phase::NonAnchor => 1,
    };
    let mut out = Vec::with_capacity(h * w / 2 + 1);
    for i in 0..h {
        for j in 0..w {
            if (i + j) % 2 == want {
                out.push((i, j));
            }
        }
    }
    out
}

/// 0/1 mask over (2C, h, w) covering every slot scheduled before `upto`.
pub fn decoded_mask(
    grouping: &ChannelGrouping,
    h: usize,
    w: usize,
    steps: &[DecodeStep],
    upto: usize,
) -> Vec<f32> {
    let c = grouping.channels();
    let mut mask = vec![0.0f32; 2 * c * h * w];
    for step in &steps[..upto] {
        for (i, j) in phase_positions(h, w, step.phase) {
            for ch in grouping.range(step.group) {
                mask[(ch * h + i) * w + j] = 1.0;
                mask[((c + ch) * h + i) * w + j] = 1.0;
            }
        }
    }
    mask
}

/// Exact coded size in bits of a symbol tensor under per-symbol Gaussian
/// parameters, measured against the same fixed-point tables the range
/// coder uses. Escaped outliers pay their 32 raw bits.
pub fn estimate_rate(
    symbols: &[i32],
    mu: &[f32],
    sigma: &[f32],
    cache: &mut GaussTableCache,
) -> f64 {
    debug_assert_eq!(symbols.len(), mu.len());
    debug_assert_eq!(symbols.len(), sigma.len());
    let mut bits = 0.0f64;
    for i in 0..symbols.len() {
        let table = cache.get(GaussParams::quantize(mu[i], sigma[i]));
        bits += value_bits(table, symbols[i]);
    }
    bits
}

/// Probability of one symbol under quantized Gaussian parameters.
pub fn symbol_prob(sym: i32, mu: f32, sigma: f32, cache: &mut GaussTableCache) -> f64 {
    let table = cache.get(GaussParams::quantize(mu, sigma));
    table.prob(value_to_symbol(sym))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_channels(16).unwrap().sizes, [2, 2, 4, 8]);
        assert_eq!(split_channels(8).unwrap().sizes, [1, 1, 2, 4]);
        // Largest remainder: 10 * (1,1,2,4)/8 = (1.25,1.25,2.5,5).
        assert_eq!(split_channels(10).unwrap().sizes, [1, 1, 3, 5]);
    }

    #[test]
    fn split_rejects_small() {
        assert!(matches!(split_channels(3), Err(CodecError::Param(_))));
    }

    #[test]
    fn split_sums_and_ordering() {
        for c in 4..100 {
            let g = split_channels(c).unwrap();
            assert_eq!(g.channels(), c, "sum for C={}", c);
            assert!(g.sizes.iter().all(|&s| s >= 1));
            for w in g.sizes.windows(2) {
                assert!(w[0] <= w[1], "ratio ordering for C={}: {:?}", c, g.sizes);
            }
        }
    }

    #[test]
    fn split_even_variant() {
        assert_eq!(split_channels_even(8).unwrap().sizes, [2, 2, 2, 2]);
        assert_eq!(split_channels_even(10).unwrap().sizes, [2, 2, 3, 3]);
    }

    #[test]
    fn schedule_has_eight_steps_partitioning_plane() {
        let g = split_channels(8).unwrap();
        let steps = schedule_quadtree(&g);
        assert_eq!(steps.len(), 8);
        // Every (channel, position) slot appears in exactly one step.
        let (h, w) = (2, 2);
        let mut seen = vec![0usize; 2 * 8 * h * w];
        for (idx, _step) in steps.iter().enumerate() {
            let before = decoded_mask(&g, h, w, &steps, idx);
            let after = decoded_mask(&g, h, w, &steps, idx + 1);
            for i in 0..seen.len() {
                if after[i] > before[i] {
                    seen[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&n| n == 1), "partition property violated");
    }

    #[test]
    fn degenerate_single_cell_plane() {
        let g = split_channels(8).unwrap();
        let steps = schedule_quadtree(&g);
        // 1x1: non-anchor phases are empty, so only 4 steps carry slots.
        let nonempty = steps
            .iter()
            .filter(|s| !phase_positions(1, 1, s.phase).is_empty())
            .count();
        assert_eq!(nonempty, 4);
    }

    #[test]
    fn anchors_decodable_from_prior_steps_only() {
        // Causality replay on a 4x4 plane: the mask available to each step
        // never includes slots scheduled at or after it.
        let g = split_channels(8).unwrap();
        let steps = schedule_quadtree(&g);
        let (h, w) = (4, 4);
        for (idx, _) in steps.iter().enumerate() {
            let before = decoded_mask(&g, h, w, &steps, idx);
            let after = decoded_mask(&g, h, w, &steps, idx + 1);
            for i in 0..before.len() {
                assert!(after[i] >= before[i], "mask must grow monotonically");
            }
        }
        // The final mask covers everything.
        let full = decoded_mask(&g, h, w, &steps, steps.len());
        assert!(full.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn rate_reference_value() {
        // mu=0, sigma=1, v=0: P = Phi(.5) - Phi(-.5) ~ 0.3829 -> 1.385 bits.
        let mut cache = GaussTableCache::new();
        let bits = estimate_rate(&[0], &[0.0], &[1.0], &mut cache);
        assert!((bits - 1.385).abs() < 0.01, "rate {}", bits);
    }

    #[test]
    fn rate_peaked_and_nonnegative() {
        let mut cache = GaussTableCache::new();
        // Every other symbol keeps its 2^-16 floor, so the minimum rate is
        // -log2(1 - 514/65536) ~ 0.0114 bits.
        let peaked = estimate_rate(&[0], &[0.0], &[0.01], &mut cache);
        assert!(peaked < 0.02, "near-zero rate at the mode, got {}", peaked);
        for v in [-3, -1, 0, 2, 7] {
            let bits = estimate_rate(&[v], &[0.3], &[2.0], &mut cache);
            assert!(bits >= 0.0);
        }
    }
}
