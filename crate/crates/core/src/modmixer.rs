//! Reparameterized building block: multi-branch serial-parallel linear
//! layers with channel-wise affine mixands, a decaying token mixer during
//! pretraining, and algebraic contraction to a single linear layer for
//! inference.
//!
//! Weight matrices are stored input-major, (c_in, c_out): tokens are rows
//! and a forward pass is `h . W + b`. Branch m composes `depth = m + 1`
//! serial factors. Contraction runs in f64 over the frozen factors.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CodecError, Result};
use crate::optim::Param;
use crate::tensor::{softmax_rows, Tensor};

/// One parallel branch: serial factors, bias, and four mixand vectors.
pub struct Branch {
    /// Serial factors, applied first-to-last; chain (c_in -> c_out -> ...).
    pub factors: Vec<Param>,
    pub bias: Param,
    /// Channel-wise mixands, each c_out long.
    pub mix_gw: Param,
    pub mix_bw: Param,
    pub mix_gb: Param,
    pub mix_bb: Param,
}

pub struct ExpandedLinear {
    pub c_in: usize,
    pub c_out: usize,
    pub branches: Vec<Branch>,
}

fn randn(rng: &mut ChaCha20Rng, n: usize, std: f32) -> Vec<f32> {
    // Box-Muller on uniform draws.
    (0..n)
        .map(|_| {
            let u1: f32 = rng.gen_range(1e-7f32..1.0);
            let u2: f32 = rng.gen_range(0.0f32..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos() * std
        })
        .collect()
}

impl ExpandedLinear {
    /// Fresh expanded layer with `m_branches` branches of depths 1..=M.
    pub fn init(c_in: usize, c_out: usize, m_branches: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut branches = Vec::with_capacity(m_branches);
        for m in 0..m_branches {
            let depth = m + 1;
            let mut factors = Vec::with_capacity(depth);
            for j in 0..depth {
                let (din, dout) = if j == 0 { (c_in, c_out) } else { (c_out, c_out) };
                let std = (1.0 / din as f32).sqrt();
                factors.push(Param::new(randn(rng, din * dout, std), &[din, dout]));
            }
            branches.push(Branch {
                factors,
                bias: Param::zeros(&[c_out]),
                mix_gw: Param::new(vec![1.0 / m_branches as f32; c_out], &[c_out]),
                mix_bw: Param::zeros(&[c_out]),
                mix_gb: Param::new(vec![1.0 / m_branches as f32; c_out], &[c_out]),
                mix_bb: Param::zeros(&[c_out]),
            });
        }
        ExpandedLinear {
            c_in,
            c_out,
            branches,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = Vec::new();
        for b in &self.branches {
            ps.extend(b.factors.iter().cloned());
            ps.push(b.bias.clone());
            ps.push(b.mix_gw.clone());
            ps.push(b.mix_bw.clone());
            ps.push(b.mix_gb.clone());
            ps.push(b.mix_bb.clone());
        }
        ps
    }

    /// Branch-wise expanded evaluation of h (tokens, c_in).
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        if h.shape().len() != 2 || h.shape()[1] != self.c_in {
            return Err(CodecError::Shape(format!(
                "expanded linear expects (N,{}), got {:?}",
                self.c_in,
                h.shape()
            )));
        }
        let mut acc: Option<Tensor> = None;
        // Row-sum of h feeds the rowwise beta-W term.
        let hsum = h.sum_axes(&[1])?;
        for br in &self.branches {
            let mut u = h.clone();
            for f in &br.factors {
                u = u.matmul(&f.leaf())?;
            }
            let gw = br.mix_gw.leaf().reshape(&[1, self.c_out])?;
            let bw = br.mix_bw.leaf().reshape(&[1, self.c_out])?;
            let gb = br.mix_gb.leaf().reshape(&[1, self.c_out])?;
            let bb = br.mix_bb.leaf().reshape(&[1, self.c_out])?;
            let bias = br.bias.leaf().reshape(&[1, self.c_out])?;
            let weight_term = u.mul(&gw)?.add(&hsum.matmul(&bw)?)?;
            let bias_term = bias.mul(&gb)?.add(&bb)?;
            let term = weight_term.add(&bias_term)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| CodecError::Param("expanded linear with zero branches".into()))
    }

    /// Composed branch matrices E_m = F_1 . F_2 ... F_depth in f64.
    fn composed_branches(&self) -> Vec<Vec<f64>> {
        self.branches
            .iter()
            .map(|br| {
                let mut e: Vec<f64> = br.factors[0].values().iter().map(|&v| v as f64).collect();
                let rows = self.c_in;
                for f in &br.factors[1..] {
                    let fv = f.values();
                    let fshape = f.shape();
                    let (k, cols) = (fshape[0], fshape[1]);
                    let mut out = vec![0.0f64; rows * cols];
                    for i in 0..rows {
                        for kk in 0..k {
                            let a = e[i * k + kk];
                            if a == 0.0 {
                                continue;
                            }
                            for j in 0..cols {
                                out[i * cols + j] += a * fv[kk * cols + j] as f64;
                            }
                        }
                    }
                    e = out;
                }
                e
            })
            .collect()
    }

    /// Algebraic contraction to one (c_in, c_out) weight and bias.
    pub fn contract(&self) -> (Vec<f32>, Vec<f32>) {
        let composed = self.composed_branches();
        let mut w = vec![0.0f64; self.c_in * self.c_out];
        let mut b = vec![0.0f64; self.c_out];
        for (br, e) in self.branches.iter().zip(&composed) {
            let gw = br.mix_gw.values();
            let bw = br.mix_bw.values();
            let gb = br.mix_gb.values();
            let bb = br.mix_bb.values();
            let bias = br.bias.values();
            for i in 0..self.c_in {
                for o in 0..self.c_out {
                    w[i * self.c_out + o] += gw[o] as f64 * e[i * self.c_out + o] + bw[o] as f64;
                }
            }
            for o in 0..self.c_out {
                b[o] += gb[o] as f64 * bias[o] as f64 + bb[o] as f64;
            }
        }
        (
            w.iter().map(|&v| v as f32).collect(),
            b.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Single weight + bias, the inference form: one matmul, one add.
#[derive(Clone, Debug)]
pub struct ContractedLinear {
    pub c_in: usize,
    pub c_out: usize,
    /// (c_in, c_out) input-major.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl ContractedLinear {
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        if h.shape().len() != 2 || h.shape()[1] != self.c_in {
            return Err(CodecError::Shape(format!(
                "contracted linear expects (N,{}), got {:?}",
                self.c_in,
                h.shape()
            )));
        }
        let w = Tensor::from_slice(&self.w, &[self.c_in, self.c_out])?;
        let b = Tensor::from_slice(&self.b, &[1, self.c_out])?;
        h.matmul(&w)?.add(&b)
    }
}

/// Cosine mask decay: 1 at step 0, exactly 0 at and after `end`.
pub fn decay_mask(step: usize, end: usize) -> f32 {
    if end == 0 || step >= end {
        return 0.0;
    }
    let t = step as f32 / end as f32;
    0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Single-head scaled dot-product mixing over token rows.
pub struct TokenMixer {
    pub dim: usize,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
}

impl TokenMixer {
    pub fn init(dim: usize, rng: &mut ChaCha20Rng) -> TokenMixer {
        let std = (1.0 / dim as f32).sqrt();
        TokenMixer {
            dim,
            wq: Param::new(randn(rng, dim * dim, std), &[dim, dim]),
            wk: Param::new(randn(rng, dim * dim, std), &[dim, dim]),
            wv: Param::new(randn(rng, dim * dim, std), &[dim, dim]),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.wq.clone(), self.wk.clone(), self.wv.clone()]
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let q = h.matmul(&self.wq.leaf())?;
        let k = h.matmul(&self.wk.leaf())?;
        let v = h.matmul(&self.wv.leaf())?;
        // attn = softmax(q k^T / sqrt(d)) v.
        let kt = k.transpose2d()?;
        let scores = q.matmul(&kt)?.scale(1.0 / (self.dim as f32).sqrt());
        let attn = softmax_rows(&scores)?;
        attn.matmul(&v)
    }
}

/// Masked token-mixer residual stage: M (.) TM(h) + (1 - M) (.) h + h.
///
/// At mask 0 this is exactly 2h and the mixer is not evaluated.
pub fn token_stage_combine(h: &Tensor, mixed: &Tensor, mask: f32) -> Result<Tensor> {
    mixed.scale(mask).add(&h.scale(2.0 - mask))
}

/// Training-form block: token mixer plus an expanded linear.
pub struct ModMixerBlock {
    pub mixer: TokenMixer,
    pub linear: ExpandedLinear,
}

impl ModMixerBlock {
    pub fn init(dim: usize, m_branches: usize, rng: &mut ChaCha20Rng) -> ModMixerBlock {
        ModMixerBlock {
            mixer: TokenMixer::init(dim, rng),
            linear: ExpandedLinear::init(dim, dim, m_branches, rng),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.mixer.params();
        ps.extend(self.linear.params());
        ps
    }

    pub fn token_stage(&self, h: &Tensor, mask: f32) -> Result<Tensor> {
        if mask == 0.0 {
            return Ok(h.scale(2.0));
        }
        let mixed = self.mixer.forward(h)?;
        token_stage_combine(h, &mixed, mask)
    }

    pub fn forward_expanded(&self, h: &Tensor, mask: f32) -> Result<Tensor> {
        let staged = self.token_stage(h, mask)?;
        self.linear.forward(&staged)
    }

    /// Contraction with the mask-zero skip factor folded into the weights:
    /// the contracted layer reproduces `forward_expanded(h, 0)` on h.
    pub fn contract(&self) -> ContractedLinear {
        let (w, b) = self.linear.contract();
        ContractedLinear {
            c_in: self.linear.c_in,
            c_out: self.linear.c_out,
            w: w.iter().map(|v| 2.0 * v).collect(),
            b,
        }
    }
}

/// Frozen reparameterization basis of one layer: the contracted weights
/// plus the composed branch matrices that residual mixand updates act on.
#[derive(Clone, Debug)]
pub struct ReparamLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub m: usize,
    /// Skip-fold factor baked into `w` (2 for block layers, 1 for heads);
    /// residual weight deltas must scale by the same factor.
    pub fold: f32,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    /// Composed branch matrices E_m, (c_in, c_out) each.
    pub basis_e: Vec<Vec<f32>>,
    /// Branch biases b_m.
    pub basis_b: Vec<Vec<f32>>,
}

/// Residual layout within a flat delta vector: four mixand groups.
pub const DELTA_GROUPS: usize = 4;

impl ReparamLayer {
    pub fn from_expanded(x: &ExpandedLinear, fold: f32) -> ReparamLayer {
        let (w, b) = x.contract();
        ReparamLayer {
            c_in: x.c_in,
            c_out: x.c_out,
            m: x.branches.len(),
            fold,
            w: w.iter().map(|v| fold * v).collect(),
            b,
            basis_e: x
                .composed_branches()
                .iter()
                .map(|e| e.iter().map(|&v| v as f32).collect())
                .collect(),
            basis_b: x.branches.iter().map(|br| br.bias.values()).collect(),
        }
    }

    pub fn contracted(&self) -> ContractedLinear {
        ContractedLinear {
            c_in: self.c_in,
            c_out: self.c_out,
            w: self.w.clone(),
            b: self.b.clone(),
        }
    }

    /// Length of this layer's flat residual vector:
    /// [gw | bw | gb | bb], each m * c_out.
    pub fn delta_len(&self) -> usize {
        DELTA_GROUPS * self.m * self.c_out
    }

    /// Consolidate dequantized residuals into explicit weight/bias deltas.
    pub fn apply_delta(&self, delta: &[f32]) -> ContractedLinear {
        debug_assert_eq!(delta.len(), self.delta_len());
        let mc = self.m * self.c_out;
        let (dgw, rest) = delta.split_at(mc);
        let (dbw, rest) = rest.split_at(mc);
        let (dgb, dbb) = rest.split_at(mc);
        let mut w = self.w.clone();
        let mut b = self.b.clone();
        for m in 0..self.m {
            let e = &self.basis_e[m];
            for i in 0..self.c_in {
                for o in 0..self.c_out {
                    w[i * self.c_out + o] += self.fold
                        * (dgw[m * self.c_out + o] * e[i * self.c_out + o]
                            + dbw[m * self.c_out + o]);
                }
            }
            for o in 0..self.c_out {
                b[o] += dgb[m * self.c_out + o] * self.basis_b[m][o] + dbb[m * self.c_out + o];
            }
        }
        ContractedLinear {
            c_in: self.c_in,
            c_out: self.c_out,
            w,
            b,
        }
    }

    /// Differentiable forward with a live residual tensor (flat layout as
    /// in `apply_delta`); gradients flow into `delta`.
    pub fn forward_with_delta(&self, h: &Tensor, delta: &Tensor) -> Result<Tensor> {
        if delta.numel() != self.delta_len() {
            return Err(CodecError::Shape(format!(
                "delta length {} != {}",
                delta.numel(),
                self.delta_len()
            )));
        }
        let mc = self.m * self.c_out;
        let flat = delta.reshape(&[self.delta_len()])?;
        let w0 = Tensor::from_slice(&self.w, &[self.c_in, self.c_out])?;
        let b0 = Tensor::from_slice(&self.b, &[1, self.c_out])?;
        let mut w_live = w0;
        let mut b_live = b0;
        for m in 0..self.m {
            let dgw = flat.slice_axis(0, m * self.c_out, self.c_out)?.reshape(&[1, self.c_out])?;
            let dbw = flat
                .slice_axis(0, mc + m * self.c_out, self.c_out)?
                .reshape(&[1, self.c_out])?;
            let dgb = flat
                .slice_axis(0, 2 * mc + m * self.c_out, self.c_out)?
                .reshape(&[1, self.c_out])?;
            let dbb = flat
                .slice_axis(0, 3 * mc + m * self.c_out, self.c_out)?
                .reshape(&[1, self.c_out])?;
            let e = Tensor::from_slice(&self.basis_e[m], &[self.c_in, self.c_out])?;
            let bm = Tensor::from_slice(&self.basis_b[m], &[1, self.c_out])?;
            let dw = e.mul(&dgw)?.add(&dbw)?.scale(self.fold);
            w_live = w_live.add(&dw)?;
            b_live = b_live.add(&bm.mul(&dgb)?.add(&dbb)?)?;
        }
        h.matmul(&w_live)?.add(&b_live)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_tokens(n: usize, c: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data: Vec<f32> = (0..n * c).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_slice(&data, &[n, c]).unwrap()
    }

    fn identity_expanded(c: usize) -> ExpandedLinear {
        let x = ExpandedLinear::init(c, c, 1, &mut rng(0));
        let mut eye = vec![0.0f32; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        x.branches[0].factors[0].set_values(eye);
        x.branches[0].bias.set_values(vec![0.0; c]);
        x.branches[0].mix_gw.set_values(vec![1.0; c]);
        x.branches[0].mix_bw.set_values(vec![0.0; c]);
        x.branches[0].mix_gb.set_values(vec![1.0; c]);
        x.branches[0].mix_bb.set_values(vec![0.0; c]);
        x
    }

    #[test]
    fn contract_single_branch_identity_mixands() {
        // M=1 with trivial mixands returns W, b unchanged.
        let x = ExpandedLinear::init(3, 2, 1, &mut rng(1));
        x.branches[0].mix_gw.set_values(vec![1.0, 1.0]);
        x.branches[0].mix_bw.set_values(vec![0.0, 0.0]);
        x.branches[0].mix_gb.set_values(vec![1.0, 1.0]);
        x.branches[0].mix_bb.set_values(vec![0.0, 0.0]);
        x.branches[0].bias.set_values(vec![0.5, -0.25]);
        let (w, b) = x.contract();
        let wf = x.branches[0].factors[0].values();
        for (a, e) in w.iter().zip(&wf) {
            assert!((a - e).abs() < 1e-7);
        }
        assert_eq!(b, vec![0.5, -0.25]);
    }

    #[test]
    fn contract_two_identity_branches_halved() {
        let mut x = ExpandedLinear::init(2, 2, 2, &mut rng(2));
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        x.branches[0].factors[0].set_values(eye.clone());
        x.branches[1].factors[0].set_values(eye.clone());
        x.branches[1].factors[1].set_values(eye.clone());
        for br in &mut x.branches {
            br.bias.set_values(vec![0.0, 0.0]);
            br.mix_gw.set_values(vec![0.5, 0.5]);
            br.mix_bw.set_values(vec![0.0, 0.0]);
            br.mix_gb.set_values(vec![0.5, 0.5]);
            br.mix_bb.set_values(vec![0.0, 0.0]);
        }
        let (w, b) = x.contract();
        assert!((w[0] - 1.0).abs() < 1e-7 && (w[3] - 1.0).abs() < 1e-7);
        assert!(w[1].abs() < 1e-7 && w[2].abs() < 1e-7);
        assert!(b.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn expanded_matches_contracted_on_random_inputs() {
        // Brute-force expanded evaluation against the contracted layer.
        for seed in 0..10 {
            let x = ExpandedLinear::init(6, 5, 3, &mut rng(100 + seed));
            let (w, b) = x.contract();
            let lin = ContractedLinear {
                c_in: 6,
                c_out: 5,
                w,
                b,
            };
            for trial in 0..10 {
                let h = rand_tokens(4, 6, seed * 100 + trial);
                let ye = x.forward(&h).unwrap();
                let yc = lin.forward(&h).unwrap();
                for i in 0..ye.numel() {
                    let denom = ye.data()[i].abs().max(yc.data()[i].abs()).max(1.0);
                    assert!(
                        (ye.data()[i] - yc.data()[i]).abs() / denom < 1e-5,
                        "mismatch {} vs {}",
                        ye.data()[i],
                        yc.data()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn contracted_forward_identity_and_bias_only() {
        let id = ContractedLinear {
            c_in: 2,
            c_out: 2,
            w: vec![1.0, 0.0, 0.0, 1.0],
            b: vec![0.0, 0.0],
        };
        let h = rand_tokens(3, 2, 7);
        let y = id.forward(&h).unwrap();
        for i in 0..h.numel() {
            assert!((y.data()[i] - h.data()[i]).abs() < 1e-7);
        }
        let bias_only = ContractedLinear {
            c_in: 2,
            c_out: 2,
            w: vec![0.0; 4],
            b: vec![3.0, -1.0],
        };
        let y2 = bias_only.forward(&h).unwrap();
        for r in 0..3 {
            assert_eq!(y2.data()[r * 2], 3.0);
            assert_eq!(y2.data()[r * 2 + 1], -1.0);
        }
    }

    #[test]
    fn mask_schedule_endpoints_and_monotone() {
        assert_eq!(decay_mask(0, 100), 1.0);
        assert_eq!(decay_mask(100, 100), 0.0);
        assert_eq!(decay_mask(250, 100), 0.0);
        assert!((decay_mask(50, 100) - 0.5).abs() < 1e-6);
        let mut prev = 1.0f32;
        for s in 0..=100 {
            let m = decay_mask(s, 100);
            assert!(m <= prev + 1e-7);
            prev = m;
        }
    }

    #[test]
    fn token_stage_mask_zero_is_double() {
        let blk = ModMixerBlock::init(4, 2, &mut rng(3));
        let h = rand_tokens(5, 4, 9);
        let out = blk.token_stage(&h, 0.0).unwrap();
        for i in 0..h.numel() {
            assert!((out.data()[i] - 2.0 * h.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn token_stage_identity_mixer_formula() {
        // With TM(h) = h the combination is 2h at any mask value.
        let h = rand_tokens(4, 3, 11);
        for mask in [0.0f32, 0.3, 1.0] {
            let out = token_stage_combine(&h, &h, mask).unwrap();
            for i in 0..h.numel() {
                assert!((out.data()[i] - 2.0 * h.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn block_mask_zero_identity_linear_doubles() {
        let mut blk = ModMixerBlock::init(3, 1, &mut rng(4));
        blk.linear = identity_expanded(3);
        let h = rand_tokens(4, 3, 13);
        let out = blk.forward_expanded(&h, 0.0).unwrap();
        for i in 0..h.numel() {
            assert!((out.data()[i] - 2.0 * h.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn block_contract_matches_expanded_at_mask_zero() {
        for seed in 0..5 {
            let blk = ModMixerBlock::init(6, 3, &mut rng(40 + seed));
            let lin = blk.contract();
            let h = rand_tokens(7, 6, 17 + seed);
            let a = blk.forward_expanded(&h, 0.0).unwrap();
            let b = lin.forward(&h).unwrap();
            for i in 0..a.numel() {
                let denom = a.data()[i].abs().max(b.data()[i].abs()).max(1.0);
                assert!((a.data()[i] - b.data()[i]).abs() / denom < 1e-5);
            }
        }
    }

    #[test]
    fn token_mixer_mixes_and_differentiates() {
        let mx = TokenMixer::init(4, &mut rng(5));
        let h = rand_tokens(6, 4, 19);
        let out = mx.forward(&h).unwrap();
        assert_eq!(out.shape(), &[6, 4]);
        let loss = out.sum_all();
        let grads = crate::tensor::backward(&loss).unwrap();
        assert!(grads.get(&mx.wq.leaf()).is_some());
    }

    #[test]
    fn residual_zero_is_noop() {
        let x = ExpandedLinear::init(4, 4, 3, &mut rng(6));
        let layer = ReparamLayer::from_expanded(&x, 2.0);
        let zero = vec![0.0f32; layer.delta_len()];
        let updated = layer.apply_delta(&zero);
        assert_eq!(updated.w, layer.w);
        assert_eq!(updated.b, layer.b);
    }

    #[test]
    fn residual_bias_path_is_exact() {
        let x = ExpandedLinear::init(4, 4, 2, &mut rng(7));
        let layer = ReparamLayer::from_expanded(&x, 1.0);
        let mut delta = vec![0.0f32; layer.delta_len()];
        // Only the beta-b group of branch 0.
        let off = 3 * layer.m * layer.c_out;
        delta[off] = 0.37;
        delta[off + 2] = -0.12;
        let updated = layer.apply_delta(&delta);
        assert!((updated.b[0] - (layer.b[0] + 0.37)).abs() < 1e-7);
        assert!((updated.b[2] - (layer.b[2] - 0.12)).abs() < 1e-7);
        assert_eq!(updated.w, layer.w);
    }

    #[test]
    fn residual_consolidation_matches_recontraction() {
        // contract(pretrained + residuals) == apply_delta(residuals).
        let mut r = rng(8);
        for _ in 0..5 {
            let x = ExpandedLinear::init(5, 4, 3, &mut r);
            let layer = ReparamLayer::from_expanded(&x, 1.0);
            let mut dr = rng(991);
            let delta: Vec<f32> =
                (0..layer.delta_len()).map(|_| dr.gen_range(-0.1f32..0.1)).collect();
            let updated = layer.apply_delta(&delta);

            // Mutate the expanded layer's mixands by the same residuals.
            let mc = layer.m * layer.c_out;
            for m in 0..layer.m {
                let add = |p: &Param, seg: &[f32]| {
                    let mut v = p.values();
                    for (vi, si) in v.iter_mut().zip(seg) {
                        *vi += si;
                    }
                    p.set_values(v);
                };
                let c = layer.c_out;
                add(&x.branches[m].mix_gw, &delta[m * c..(m + 1) * c]);
                add(&x.branches[m].mix_bw, &delta[mc + m * c..mc + (m + 1) * c]);
                add(&x.branches[m].mix_gb, &delta[2 * mc + m * c..2 * mc + (m + 1) * c]);
                add(&x.branches[m].mix_bb, &delta[3 * mc + m * c..3 * mc + (m + 1) * c]);
            }
            let (w2, b2) = x.contract();
            for i in 0..w2.len() {
                assert!(
                    (w2[i] - updated.w[i]).abs() <= 1e-6 * w2[i].abs().max(1.0),
                    "weight path {} vs {}",
                    w2[i],
                    updated.w[i]
                );
            }
            for o in 0..b2.len() {
                assert!((b2[o] - updated.b[o]).abs() <= 1e-6 * b2[o].abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_with_delta_matches_apply_delta() {
        let x = ExpandedLinear::init(4, 3, 2, &mut rng(9));
        let layer = ReparamLayer::from_expanded(&x, 2.0);
        let mut dr = rng(77);
        let delta: Vec<f32> = (0..layer.delta_len()).map(|_| dr.gen_range(-0.2f32..0.2)).collect();
        let h = rand_tokens(5, 4, 23);
        let dt = Tensor::from_slice(&delta, &[delta.len()]).unwrap();
        let live = layer.forward_with_delta(&h, &dt).unwrap();
        let folded = layer.apply_delta(&delta).forward(&h).unwrap();
        for i in 0..live.numel() {
            let denom = live.data()[i].abs().max(1.0);
            assert!((live.data()[i] - folded.data()[i]).abs() / denom < 1e-5);
        }
    }
}
