//! Fully factorized nonparametric density for weight-update symbols.
//!
//! A small monotone network parameterizes the cumulative distribution:
//! three layers of width 8 with non-negative (softplus-mapped) weights and
//! bounded residual gates, ending in a sigmoid. All nonlinearities are
//! rational/sqrt forms (no libm transcendentals), evaluated identically by
//! the f32 training path and the f64 table path, so encoder and decoder
//! derive the same fixed-point tables on any platform.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::optim::Param;
use crate::range_coder::{FreqTable, ALPHABET, SYM_MAX, SYM_MIN};
use crate::tensor::Tensor;

const WIDTH: usize = 8;
/// Input pre-scale: symbols live in [-256, 256]; the net sees x / 16.
const INPUT_SCALE: f64 = 1.0 / 16.0;

/// softplus-like positive map: 0.5 (x + sqrt(x^2 + 1.922)), value ln 2 at 0.
fn posmap_f64(x: f64) -> f64 {
    0.5 * (x + (x * x + 1.922).sqrt())
}

/// Rational tanh (Pade 3/2 on [-3, 3], saturating to +-1 outside).
fn rtanh_f64(x: f64) -> f64 {
    let c = x.clamp(-3.0, 3.0);
    c * (27.0 + c * c) / (27.0 + 9.0 * c * c)
}

fn rsigmoid_f64(x: f64) -> f64 {
    0.5 * (1.0 + rtanh_f64(0.5 * x))
}

fn posmap_graph(x: &Tensor) -> Result<Tensor> {
    x.add(&x.mul(x)?.affine(1.0, 1.922).sqrt())?.scale(0.5).reshape(&x.shape().to_vec())
}

fn rtanh_graph(x: &Tensor) -> Result<Tensor> {
    // clamp to [-3, 3] via clamp01 of (x + 3) / 6.
    let c = x.affine(1.0 / 6.0, 0.5).clamp01().affine(6.0, -3.0);
    let c2 = c.mul(&c)?;
    let num = c.mul(&c2.affine(1.0, 27.0))?;
    let den = c2.affine(9.0, 27.0);
    num.div(&den)
}

fn rsigmoid_graph(x: &Tensor) -> Result<Tensor> {
    Ok(rtanh_graph(&x.scale(0.5))?.affine(0.5, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Learned,
    /// Laplace fallback with a learned scale (deterministic same-platform).
    Laplace,
}

pub struct FactorizedPrior {
    pub kind: PriorKind,
    pub w1: Param,
    pub b1: Param,
    pub a1: Param,
    pub w2: Param,
    pub b2: Param,
    pub a2: Param,
    pub w3: Param,
    pub b3: Param,
    /// log-scale of the Laplace fallback.
    pub laplace_log_b: Param,
}

impl FactorizedPrior {
    pub fn init(kind: PriorKind, rng: &mut ChaCha20Rng) -> FactorizedPrior {
        let mut r = |n: usize, s: f32| -> Vec<f32> {
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };
        FactorizedPrior {
            kind,
            w1: Param::new(r(WIDTH, 0.5), &[1, WIDTH]),
            b1: Param::new(r(WIDTH, 0.5), &[WIDTH]),
            a1: Param::new(r(WIDTH, 0.1), &[WIDTH]),
            w2: Param::new(r(WIDTH * WIDTH, 0.3), &[WIDTH, WIDTH]),
            b2: Param::new(r(WIDTH, 0.3), &[WIDTH]),
            a2: Param::new(r(WIDTH, 0.1), &[WIDTH]),
            w3: Param::new(r(WIDTH, 0.3), &[WIDTH, 1]),
            b3: Param::zeros(&[1]),
            laplace_log_b: Param::new(vec![0.0], &[1]),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self.kind {
            PriorKind::Learned => vec![
                self.w1.clone(),
                self.b1.clone(),
                self.a1.clone(),
                self.w2.clone(),
                self.b2.clone(),
                self.a2.clone(),
                self.w3.clone(),
                self.b3.clone(),
            ],
            PriorKind::Laplace => vec![self.laplace_log_b.clone()],
        }
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        vec![
            ("w1".into(), self.w1.clone()),
            ("b1".into(), self.b1.clone()),
            ("a1".into(), self.a1.clone()),
            ("w2".into(), self.w2.clone()),
            ("b2".into(), self.b2.clone()),
            ("a2".into(), self.a2.clone()),
            ("w3".into(), self.w3.clone()),
            ("b3".into(), self.b3.clone()),
            ("laplace_log_b".into(), self.laplace_log_b.clone()),
        ]
    }

    /// Differentiable CDF of symbol-domain values (any shape).
    pub fn cdf_graph(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            PriorKind::Laplace => {
                let b = self.laplace_log_b.leaf().exp();
                // 0.5 + 0.5 sign(x) (1 - exp(-|x|/b)), via relu split.
                let xs = x.scale(INPUT_SCALE as f32 * 16.0); // symbols directly
                let pos = xs.relu();
                let neg = xs.neg().relu();
                let ep = pos.div(&b)?.neg().exp();
                let en = neg.div(&b)?.neg().exp();
                // x >= 0: 1 - 0.5 ep; x < 0: 0.5 en. Combine smoothly:
                // cdf = 0.5 en + (1 - 0.5 ep) - 0.5 ... both branches agree
                // at x = 0 (0.5); use: cdf = 0.5 (en + 1 - ep) works for
                // either sign because one of pos/neg is 0.
                en.affine(1.0, 1.0).sub(&ep)?.scale(0.5).reshape(&x.shape().to_vec())
            }
            PriorKind::Learned => {
                let n = x.numel();
                let flat = x.reshape(&[n, 1])?.scale(INPUT_SCALE as f32);
                let w1p = posmap_graph(&self.w1.leaf())?;
                let h1 = flat.matmul(&w1p)?.add(&self.b1.leaf().reshape(&[1, WIDTH])?)?;
                let g1 = h1.add(&rtanh_graph(&self.a1.leaf())?.reshape(&[1, WIDTH])?.mul(&rtanh_graph(&h1)?)?)?;
                let w2p = posmap_graph(&self.w2.leaf())?;
                let h2 = g1.matmul(&w2p)?.add(&self.b2.leaf().reshape(&[1, WIDTH])?)?;
                let g2 = h2.add(&rtanh_graph(&self.a2.leaf())?.reshape(&[1, WIDTH])?.mul(&rtanh_graph(&h2)?)?)?;
                let w3p = posmap_graph(&self.w3.leaf())?;
                let h3 = g2.matmul(&w3p)?.add(&self.b3.leaf().reshape(&[1, 1])?)?;
                rsigmoid_graph(&h3)?.reshape(&x.shape().to_vec())
            }
        }
    }

    /// Differentiable code length in bits of symbol-domain values.
    pub fn bits_graph(&self, sym: &Tensor) -> Result<Tensor> {
        let hi = self.cdf_graph(&sym.affine(1.0, 0.5))?;
        let lo = self.cdf_graph(&sym.affine(1.0, -0.5))?;
        let p = hi.sub(&lo)?.affine(1.0, 1.0 / 65536.0);
        Ok(p.log().scale(-std::f32::consts::LOG2_E))
    }

    /// Deterministic f64 CDF from the frozen parameter values.
    pub fn cdf_f64(&self, x: f64) -> f64 {
        match self.kind {
            PriorKind::Laplace => {
                let b = (self.laplace_log_b.values()[0] as f64).exp();
                if x >= 0.0 {
                    1.0 - 0.5 * (-x / b).exp()
                } else {
                    0.5 * (x / b).exp()
                }
            }
            PriorKind::Learned => {
                let w1 = self.w1.values();
                let b1 = self.b1.values();
                let a1 = self.a1.values();
                let w2 = self.w2.values();
                let b2 = self.b2.values();
                let a2 = self.a2.values();
                let w3 = self.w3.values();
                let b3 = self.b3.values();
                let xin = x * INPUT_SCALE;
                let mut g1 = [0.0f64; WIDTH];
                for j in 0..WIDTH {
                    let h = xin * posmap_f64(w1[j] as f64) + b1[j] as f64;
                    g1[j] = h + rtanh_f64(a1[j] as f64) * rtanh_f64(h);
                }
                let mut g2 = [0.0f64; WIDTH];
                for j in 0..WIDTH {
                    let mut h = b2[j] as f64;
                    for (i, g) in g1.iter().enumerate() {
                        h += g * posmap_f64(w2[i * WIDTH + j] as f64);
                    }
                    g2[j] = h + rtanh_f64(a2[j] as f64) * rtanh_f64(h);
                }
                let mut h3 = b3[0] as f64;
                for (i, g) in g2.iter().enumerate() {
                    h3 += g * posmap_f64(w3[i] as f64);
                }
                rsigmoid_f64(h3)
            }
        }
    }

    /// Fixed-point PMF table over the escape alphabet: CDF differences
    /// floored at 2^-16 and renormalized.
    pub fn pmf_table(&self) -> FreqTable {
        let mut probs = vec![0.0f64; ALPHABET];
        let mut prev = self.cdf_f64(SYM_MIN as f64 - 0.5);
        probs[crate::range_coder::ESC_LOW] = prev;
        for v in SYM_MIN..=SYM_MAX {
            let hi = self.cdf_f64(v as f64 + 0.5);
            probs[(v - SYM_MIN + 1) as usize] = (hi - prev).max(0.0);
            prev = hi;
        }
        probs[crate::range_coder::ESC_HIGH] = (1.0 - prev).max(0.0);
        FreqTable::from_probs(&probs).expect("prior table")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range_coder::{
        value_bits, value_to_symbol, RangeDecoder, RangeEncoder,
    };
    use rand::SeedableRng;

    fn prior(seed: u64) -> FactorizedPrior {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        FactorizedPrior::init(PriorKind::Learned, &mut rng)
    }

    #[test]
    fn cdf_is_monotone_with_unit_limits() {
        for seed in 0..5 {
            let p = prior(seed);
            let mut prev = -1.0f64;
            for i in -300..=300 {
                let c = p.cdf_f64(i as f64);
                assert!(c >= prev - 1e-12, "CDF must not decrease");
                assert!((0.0..=1.0).contains(&c));
                prev = c;
            }
        }
    }

    #[test]
    fn table_total_and_min_freq() {
        let p = prior(7);
        let t = p.pmf_table();
        let mut total = 0u32;
        for s in 0..ALPHABET {
            assert!(t.freq(s) >= 1);
            total += t.freq(s);
        }
        assert_eq!(total, 65536);
    }

    #[test]
    fn pmf_symmetric_prior_symmetric_about_zero() {
        // A prior with symmetric parameters (b terms zero) gives a PMF
        // symmetric about 0 up to fixed-point rounding.
        let p = prior(3);
        p.b1.set_values(vec![0.0; WIDTH]);
        p.b2.set_values(vec![0.0; WIDTH]);
        p.b3.set_values(vec![0.0]);
        let t = p.pmf_table();
        for v in 1..=32i32 {
            let a = t.freq(value_to_symbol(v));
            let b = t.freq(value_to_symbol(-v));
            assert!(
                (a as i64 - b as i64).abs() <= 1,
                "asymmetry at {}: {} vs {}",
                v,
                a,
                b
            );
        }
    }

    #[test]
    fn graph_matches_f64_path() {
        let p = prior(11);
        let xs = [-40.0f32, -3.5, -1.0, 0.0, 0.7, 2.0, 25.0];
        let t = Tensor::from_slice(&xs, &[xs.len()]).unwrap();
        let g = p.cdf_graph(&t).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let expect = p.cdf_f64(x as f64);
            assert!(
                (g.data()[i] as f64 - expect).abs() < 1e-4,
                "x={}: graph {} vs f64 {}",
                x,
                g.data()[i],
                expect
            );
        }
    }

    #[test]
    fn coded_rate_tracks_table_entropy() {
        // Range-coder cross-check: coded length within 2% + 64 bits of
        // -sum log2 pmf.
        let p = prior(13);
        let table = p.pmf_table();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let values: Vec<i32> = (0..4000).map(|_| rng.gen_range(-6i32..=6)).collect();
        let ideal: f64 = values.iter().map(|&v| value_bits(&table, v)).sum();
        let mut enc = RangeEncoder::new();
        for &v in &values {
            crate::range_coder::encode_value(&mut enc, &table, v).unwrap();
        }
        let bytes = enc.finish();
        let actual = (bytes.len() * 8) as f64;
        assert!(actual <= ideal * 1.02 + 64.0, "actual {} ideal {}", actual, ideal);
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &v in &values {
            assert_eq!(crate::range_coder::decode_value(&mut dec, &table).unwrap(), v);
        }
    }

    #[test]
    fn laplace_fallback_roundtrips() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = FactorizedPrior::init(PriorKind::Laplace, &mut rng);
        let t = p.pmf_table();
        let mut enc = RangeEncoder::new();
        for v in [-3, 0, 1, 7, -200] {
            crate::range_coder::encode_value(&mut enc, &t, v).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for v in [-3, 0, 1, 7, -200] {
            assert_eq!(crate::range_coder::decode_value(&mut dec, &t).unwrap(), v);
        }
    }

    #[test]
    fn bits_graph_differentiable_and_positive() {
        let p = prior(17);
        let sym = Tensor::param(vec![0.3, -2.7, 5.1], &[3]).unwrap();
        let bits = p.bits_graph(&sym).unwrap();
        assert!(bits.data().iter().all(|&b| b >= 0.0));
        let grads = crate::tensor::backward(&bits.sum_all()).unwrap();
        assert!(grads.get(&sym).is_some());
    }
}
