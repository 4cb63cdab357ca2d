use super::*;

fn t(data: &[f32], shape: &[usize]) -> Tensor {
    Tensor::from_slice(data, shape).unwrap()
}

fn p(data: &[f32], shape: &[usize]) -> Tensor {
    Tensor::param(data.to_vec(), shape).unwrap()
}

fn lcg(seed: &mut u64) -> f32 {
    // Uniform in [-1, 1], deterministic.
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (((*seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0) as f32
}

fn rand_vec(n: usize, seed: &mut u64) -> Vec<f32> {
    (0..n).map(|_| lcg(seed)).collect()
}

fn assert_close(a: &[f32], b: &[f32], rel: f32) {
    assert_eq!(a.len(), b.len());
    for i in 0..a.len() {
        let denom = a[i].abs().max(b[i].abs()).max(1.0);
        assert!(
            (a[i] - b[i]).abs() / denom <= rel,
            "index {}: {} vs {} (rel {})",
            i,
            a[i],
            b[i],
            rel
        );
    }
}

/// Vector-norm relative error between gradient vectors.
fn assert_grads_close(analytic: &[f32], numeric: &[f64], rel: f64) {
    assert_eq!(analytic.len(), numeric.len());
    let mut d2 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut n2 = 0.0f64;
    for i in 0..analytic.len() {
        let (a, n) = (analytic[i] as f64, numeric[i]);
        d2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
    let err = d2.sqrt() / denom;
    assert!(
        err <= rel,
        "gradient mismatch: rel {} > {} (analytic {:?}, numeric {:?})",
        err,
        rel,
        &analytic[..analytic.len().min(8)],
        &numeric[..numeric.len().min(8)]
    );
}

/// Central finite-difference check, step 1e-3, rel error <= 1e-3.
///
/// `build` maps the leaf to any output tensor; a fixed random cotangent w
/// turns it into the scalar <w, out>. The backward pass runs on the f32
/// graph; the FD oracle reduces <w, out> in f64 so the elementwise f32
/// roundings of unperturbed entries cancel exactly between the two central
/// evaluations. `valid` rejects instances within the FD step of a kink
/// (ReLU crossing, bilinear cell edge), where one-sided slopes differ.
fn grad_check_when<F, V>(build: F, shape: &[usize], seed: u64, valid: V)
where
    F: Fn(&Tensor) -> Tensor,
    V: Fn(&Tensor) -> bool,
{
    for attempt in 0..64u64 {
        let mut s = seed.wrapping_add(attempt.wrapping_mul(0x2545_F491_4F6C_DD1D));
        let data = rand_vec(numel(shape), &mut s);
        let leaf = p(&data, shape);
        if !valid(&leaf) {
            continue;
        }
        let out = build(&leaf);
        let mut ws = seed ^ 0x9e37_79b9_7f4a_7c15;
        let w = rand_vec(out.numel(), &mut ws);
        let wt = t(&w, &[out.numel()]);
        let loss = out.reshape(&[out.numel()]).unwrap().mul(&wt).unwrap().sum_all();
        let grads = backward(&loss).unwrap();
        let analytic = grads.get(&leaf).expect("leaf gradient missing");

        let f = |xs: &[f32]| -> f64 {
            let o = build(&t(xs, shape));
            o.data()
                .iter()
                .zip(&w)
                .map(|(&oi, &wi)| oi as f64 * wi as f64)
                .sum()
        };
        let step = 1e-3f32;
        let mut numeric = vec![0.0f64; data.len()];
        for i in 0..data.len() {
            let mut xp = data.clone();
            let mut xm = data.clone();
            xp[i] += step;
            xm[i] -= step;
            numeric[i] = (f(&xp) - f(&xm)) / (2.0 * step as f64);
        }
        assert_grads_close(analytic, &numeric, 1e-3);
        return;
    }
    panic!("no valid FD instance found for seed {}", seed);
}

fn grad_check<F>(build: F, shape: &[usize], seed: u64)
where
    F: Fn(&Tensor) -> Tensor,
{
    grad_check_when(build, shape, seed, |_| true);
}

/// No value within `margin` of a kink location given by `pre`.
fn away_from<F>(pre: F, margin: f32) -> impl Fn(&Tensor) -> bool
where
    F: Fn(&Tensor) -> Vec<f32>,
{
    move |x: &Tensor| pre(x).iter().all(|&v| v.abs() > margin)
}

// ── elementwise ───────────────────────────────────────────────────

#[test]
fn add_direct() {
    let r = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
    assert_eq!(r.data(), &[4.0, 6.0]);
}

#[test]
fn relu_definition() {
    let r = t(&[-1.0, 2.0], &[2]).relu();
    assert_eq!(r.data(), &[0.0, 2.0]);
}

#[test]
fn mul_broadcasts() {
    let r = t(&[2.0], &[1])
        .mul(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]))
        .unwrap();
    assert_eq!(r.data(), &[2.0, 4.0, 6.0, 8.0]);
    assert_eq!(r.shape(), &[2, 2]);
}

#[test]
fn shape_mismatch_errors() {
    let e = t(&[1.0, 2.0], &[2]).add(&t(&[1.0, 2.0, 3.0], &[3]));
    assert!(matches!(e, Err(CodecError::Shape(_))));
}

#[test]
fn broadcast_add_mul_commute_associate() {
    let mut s = 7u64;
    let a = t(&rand_vec(12, &mut s), &[3, 4]);
    let b = t(&rand_vec(4, &mut s), &[4]);
    let c = t(&rand_vec(12, &mut s), &[3, 4]);
    let ab = a.add(&b).unwrap();
    let ba = b.add(&a).unwrap();
    assert_close(ab.data(), ba.data(), 1e-6);
    let l = ab.add(&c).unwrap();
    let r = a.add(&b.add(&c).unwrap()).unwrap();
    assert_close(l.data(), r.data(), 1e-6);
    let m1 = a.mul(&b).unwrap().mul(&c).unwrap();
    let m2 = a.mul(&b.mul(&c).unwrap()).unwrap();
    assert_close(m1.data(), m2.data(), 1e-6);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        grad_check_when(
            |x| x.relu(),
            &[6],
            100 + seed,
            away_from(|x| x.data().to_vec(), 5e-3),
        );
        grad_check(|x| x.mul(x).unwrap(), &[6], 150 + seed);
        grad_check(|x| x.affine(0.3, 0.1).exp(), &[5], 200 + seed);
        grad_check(|x| x.sigmoid(), &[5], 300 + seed);
        grad_check(|x| x.tanh(), &[5], 400 + seed);
        grad_check(|x| x.affine(0.25, 2.0).log(), &[5], 500 + seed);
        grad_check(|x| x.affine(0.25, 2.0).sqrt(), &[5], 600 + seed);
        grad_check(
            |x| {
                let c = t(&[0.5, -0.25, 1.5], &[3]);
                x.div(&c).unwrap()
            },
            &[3],
            700 + seed,
        );
        grad_check(
            |x| {
                let c = t(&[0.5, -0.25, 1.5], &[3]);
                c.div(&x.affine(0.2, 2.0)).unwrap()
            },
            &[3],
            750 + seed,
        );
    }
}

#[test]
fn broadcast_gradients_match_finite_differences() {
    // (3,4) * (4,) reduced over the broadcast axis.
    for seed in 0..5u64 {
        grad_check(
            |x| {
                let mut s = 881u64;
                let big = t(&rand_vec(12, &mut s), &[3, 4]);
                big.mul(x).unwrap()
            },
            &[4],
            800 + seed,
        );
        grad_check(
            |x| {
                let mut s = 882u64;
                let small = t(&rand_vec(4, &mut s), &[4]);
                x.add(&small).unwrap()
            },
            &[3, 4],
            850 + seed,
        );
    }
}

// ── matmul ────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let v = t(&[1.0, 2.0], &[2, 1]);
    let r = i2.matmul(&v).unwrap();
    assert_eq!(r.data(), &[1.0, 2.0]);
}

#[test]
fn matmul_direct() {
    let r = t(&[1.0, 2.0], &[1, 2])
        .matmul(&t(&[3.0, 4.0], &[2, 1]))
        .unwrap();
    assert_eq!(r.data(), &[11.0]);
}

#[test]
fn matmul_inner_mismatch() {
    let e = t(&[1.0; 6], &[2, 3]).matmul(&t(&[1.0; 8], &[4, 2]));
    assert!(matches!(e, Err(CodecError::Shape(_))));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    // Random 4x3 . 3x2, both operands, against the central-difference oracle.
    for seed in 0..20u64 {
        let mut s = 40 + seed;
        let bdata = rand_vec(6, &mut s);
        grad_check(
            move |x| {
                let b = t(&bdata, &[3, 2]);
                x.matmul(&b).unwrap()
            },
            &[4, 3],
            900 + seed,
        );
        let mut s2 = 80 + seed;
        let adata = rand_vec(12, &mut s2);
        grad_check(
            move |x| {
                let a = t(&adata, &[4, 3]);
                a.matmul(x).unwrap()
            },
            &[3, 2],
            950 + seed,
        );
    }
}

// ── conv2d ────────────────────────────────────────────────────────

#[test]
fn conv2d_sum_of_ones() {
    let x = t(&[1.0; 9], &[1, 1, 3, 3]);
    let k = t(&[1.0; 9], &[1, 1, 3, 3]);
    let r = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(r.shape(), &[1, 1, 1, 1]);
    assert_eq!(r.data(), &[9.0]);
}

#[test]
fn conv2d_stride2_block_sums() {
    let x = t(&(1..=16).map(|v| v as f32).collect::<Vec<_>>(), &[1, 1, 4, 4]);
    let k = t(&[1.0; 4], &[1, 1, 2, 2]);
    let r = x.conv2d(&k, 2, 0).unwrap();
    assert_eq!(r.shape(), &[1, 1, 2, 2]);
    assert_eq!(
        r.data(),
        &[
            1.0 + 2.0 + 5.0 + 6.0,
            3.0 + 4.0 + 7.0 + 8.0,
            9.0 + 10.0 + 13.0 + 14.0,
            11.0 + 12.0 + 15.0 + 16.0
        ]
    );
}

#[test]
fn conv2d_invalid_geometry() {
    let x = t(&[1.0; 4], &[1, 1, 2, 2]);
    let k = t(&[1.0; 9], &[1, 1, 3, 3]);
    assert!(matches!(x.conv2d(&k, 1, 0), Err(CodecError::Shape(_))));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut s = 11u64;
    let kdata = rand_vec(2 * 2 * 3 * 3, &mut s);
    for seed in 0..20u64 {
        let kd = kdata.clone();
        grad_check(
            move |x| {
                let k = t(&kd, &[2, 2, 3, 3]);
                x.conv2d(&k, 2, 1).unwrap()
            },
            &[1, 2, 4, 4],
            1000 + seed,
        );
    }
    // Kernel gradient.
    let xdata = rand_vec(2 * 4 * 4, &mut s);
    for seed in 0..20u64 {
        let xd = xdata.clone();
        grad_check(
            move |k| {
                let x = t(&xd, &[1, 2, 4, 4]);
                x.conv2d(k, 1, 1).unwrap()
            },
            &[1, 2, 3, 3],
            2000 + seed,
        );
    }
}

// ── instance norm ─────────────────────────────────────────────────

#[test]
fn instance_norm_constant_plane_is_zero() {
    let x = t(&[3.5; 8], &[1, 2, 2, 2]);
    let r = instance_norm(&x, 1e-5).unwrap();
    for &v in r.data() {
        assert!(v.abs() < 1e-4);
    }
}

#[test]
fn instance_norm_two_point_plane() {
    let x = t(&[1.0, 3.0], &[1, 1, 1, 2]);
    let r = instance_norm(&x, 1e-12).unwrap();
    assert!((r.data()[0] + 1.0).abs() < 1e-4);
    assert!((r.data()[1] - 1.0).abs() < 1e-4);
}

#[test]
fn instance_norm_scale_invariance() {
    let mut s = 5u64;
    let data = rand_vec(2 * 3 * 4 * 4, &mut s);
    let x = t(&data, &[2, 3, 4, 4]);
    let scaled = x.scale(7.5);
    let a = instance_norm(&x, 1e-9).unwrap();
    let b = instance_norm(&scaled, 1e-9).unwrap();
    for i in 0..a.numel() {
        assert!((a.data()[i] - b.data()[i]).abs() < 1e-5);
    }
}

#[test]
fn instance_norm_moments() {
    // Non-degenerate planes: unit-ish spread so the eps bias stays << 1e-4.
    let mut s = 17u64;
    let data: Vec<f32> = rand_vec(3 * 2 * 6 * 6, &mut s).iter().map(|v| v * 3.0).collect();
    let x = t(&data, &[3, 2, 6, 6]);
    let r = instance_norm(&x, 1e-5).unwrap();
    let hw = 36;
    for plane in 0..6 {
        let d = &r.data()[plane * hw..(plane + 1) * hw];
        let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var: f64 =
            d.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / hw as f64;
        assert!(mean.abs() <= 1e-5, "mean {}", mean);
        assert!((var - 1.0).abs() <= 1e-4, "var {}", var);
    }
}

#[test]
fn instance_norm_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        grad_check(|x| instance_norm(x, 1e-3).unwrap(), &[1, 1, 3, 3], 3000 + seed);
        grad_check(|x| instance_norm(x, 1e-3).unwrap(), &[2, 2, 2, 3], 3500 + seed);
    }
}

// ── bilinear interpolation ────────────────────────────────────────

#[test]
fn interp_exact_at_integer_coords() {
    let g = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
    let r = g.interp_bilinear(&[(0.0, 0.0), (1.0, 2.0), (0.0, 1.0)]).unwrap();
    assert_eq!(r.data(), &[1.0, 6.0, 2.0]);
}

#[test]
fn interp_midpoint() {
    let g = t(&[0.0, 2.0], &[1, 1, 2]);
    let r = g.interp_bilinear(&[(0.0, 0.5)]).unwrap();
    assert_eq!(r.data(), &[1.0]);
}

#[test]
fn interp_out_of_range_errors() {
    let g = t(&[0.0, 2.0], &[1, 1, 2]);
    assert!(matches!(
        g.interp_bilinear(&[(0.0, 1.5)]),
        Err(CodecError::Coord(_))
    ));
    assert!(matches!(
        g.interp_bilinear(&[(-0.1, 0.0)]),
        Err(CodecError::Coord(_))
    ));
}

#[test]
fn interp_matches_four_tap_oracle() {
    let mut s = 23u64;
    let data = rand_vec(2 * 4 * 5, &mut s);
    let g = t(&data, &[2, 4, 5]);
    for _ in 0..50 {
        let y = (lcg(&mut s) * 0.5 + 0.5) * 3.0;
        let x = (lcg(&mut s) * 0.5 + 0.5) * 4.0;
        let r = g.interp_bilinear(&[(y, x)]).unwrap();
        for ch in 0..2 {
            // Independent direct 4-tap evaluation.
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(4));
            let (fy, fx) = (y - y0 as f32, x - x0 as f32);
            let at = |iy: usize, ix: usize| data[ch * 20 + iy * 5 + ix];
            let expect = (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                + (1.0 - fy) * fx * at(y0, x1)
                + fy * (1.0 - fx) * at(y1, x0)
                + fy * fx * at(y1, x1);
            assert!((r.data()[ch] - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn interp_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        grad_check(
            |g| g.interp_bilinear(&[(0.3, 1.7), (1.9, 0.2), (1.0, 1.0)]).unwrap(),
            &[2, 3, 3],
            4000 + seed,
        );
    }
}

#[test]
fn warp_identity_flow_is_identity() {
    let mut s = 3u64;
    let data = rand_vec(3 * 4 * 4, &mut s);
    let img = t(&data, &[3, 4, 4]);
    let flow = Tensor::zeros(&[2, 4, 4]);
    let r = img.warp_bilinear(&flow).unwrap();
    assert_close(r.data(), &data, 1e-6);
}

#[test]
fn warp_gradients_match_finite_differences() {
    let mut s = 31u64;
    let idata = rand_vec(2 * 4 * 4, &mut s);
    // Warp is piecewise-linear in the flow: reject instances whose source
    // coordinates land within the FD step of a cell edge or of the clamp
    // boundary. Deep inside the clamp region both sides are flat, which is
    // fine; the boundary itself is not.
    let coords_clear = |f: &Tensor| -> bool {
        let d = f.data();
        let hw = 16;
        (0..hw).all(|pp| {
            [(pp / 4) as f32 + 0.4 * d[pp], (pp % 4) as f32 + 0.4 * d[hw + pp]]
                .iter()
                .all(|&c| {
                    let frac_dist = (c - c.round()).abs();
                    (c < -0.01) || (c > 3.01) || (frac_dist > 0.01 && c > 0.01 && c < 2.99)
                })
        })
    };
    for seed in 0..10u64 {
        // Flow gradient.
        let idc = idata.clone();
        grad_check_when(
            move |f| {
                let img = t(&idc, &[2, 4, 4]);
                img.warp_bilinear(&f.scale(0.4)).unwrap()
            },
            &[2, 4, 4],
            5000 + seed,
            coords_clear,
        );
        // Image gradient (linear in the image, no kink issue).
        let mut s2 = 60 + seed;
        let fdata: Vec<f32> = rand_vec(2 * 16, &mut s2).iter().map(|v| v * 0.4).collect();
        grad_check(
            move |img| {
                let flow = t(&fdata, &[2, 4, 4]);
                img.warp_bilinear(&flow).unwrap()
            },
            &[2, 4, 4],
            6000 + seed,
        );
    }
}

// ── structure ops ─────────────────────────────────────────────────

#[test]
fn concat_slice_roundtrip_and_grads() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[5.0, 6.0], &[1, 2]);
    let c = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
    assert_eq!(c.shape(), &[3, 2]);
    assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let back = c.slice_axis(0, 0, 2).unwrap();
    assert_eq!(back.data(), a.data());
    for seed in 0..5u64 {
        grad_check(
            |x| {
                let fixed = t(&[0.5, -0.5], &[1, 2]);
                let cat = Tensor::concat(&[x.clone(), fixed], 0).unwrap();
                cat.slice_axis(0, 1, 2).unwrap()
            },
            &[2, 2],
            7000 + seed,
        );
    }
}

#[test]
fn tokens_roundtrip() {
    let mut s = 9u64;
    let data = rand_vec(3 * 2 * 4, &mut s);
    let x = t(&data, &[3, 2, 4]);
    let tok = x.chw_to_tokens().unwrap();
    assert_eq!(tok.shape(), &[8, 3]);
    let back = tok.tokens_to_chw(2, 4).unwrap();
    assert_close(back.data(), &data, 0.0);
    for seed in 0..5u64 {
        grad_check(|x| x.chw_to_tokens().unwrap(), &[3, 2, 2], 8000 + seed);
    }
}

#[test]
fn upsample_avgpool_gradients() {
    for seed in 0..10u64 {
        grad_check(|x| x.upsample2x().unwrap(), &[1, 2, 3, 3], 9000 + seed);
        grad_check(|x| x.avg_pool2().unwrap(), &[1, 2, 4, 4], 9100 + seed);
        grad_check(|x| x.resize_bilinear(5, 2).unwrap(), &[2, 3, 3], 9200 + seed);
    }
}

#[test]
fn resize_matches_upsample_and_identity() {
    let mut s = 41u64;
    let data = rand_vec(2 * 3 * 4, &mut s);
    let x = t(&data, &[2, 3, 4]);
    let a = x.upsample2x().unwrap();
    let b = x.resize_bilinear(6, 8).unwrap();
    assert_close(a.data(), b.data(), 1e-6);
    let same = x.resize_bilinear(3, 4).unwrap();
    assert_close(same.data(), &data, 0.0);
}

#[test]
fn upsample_preserves_constant() {
    let x = Tensor::full(&[1, 1, 3, 3], 2.5);
    let r = x.upsample2x().unwrap();
    assert_eq!(r.shape(), &[1, 1, 6, 6]);
    for &v in r.data() {
        assert!((v - 2.5).abs() < 1e-6);
    }
}

// ── backward-specific contracts ───────────────────────────────────

#[test]
fn backward_linear_case() {
    // loss = sum(w * x) with x fixed => grad(w) = x.
    let x = t(&[2.0, -3.0, 0.5], &[3]);
    let w = p(&[1.0, 1.0, 1.0], &[3]);
    let loss = w.mul(&x).unwrap().sum_all();
    let grads = backward(&loss).unwrap();
    assert_eq!(grads.get(&w).unwrap(), x.data());
}

#[test]
fn backward_zero_case() {
    let w = p(&[4.0, 5.0], &[2]);
    let loss = w.scale(0.0).sum_all();
    let grads = backward(&loss).unwrap();
    assert_eq!(grads.get(&w).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let w = p(&[1.0, 2.0], &[2]);
    let e = backward(&w.relu());
    assert!(matches!(e, Err(CodecError::Shape(_))));
}

#[test]
fn backward_composite_decoder_layer_matches_finite_differences() {
    // ReLU(W((g * IN(h) + b) + h)): the decoder layer shape.
    let mut s = 77u64;
    let wdata = rand_vec(4 * 4, &mut s);
    let gdata = rand_vec(4, &mut s);
    let bdata = rand_vec(4, &mut s);
    for seed in 0..20u64 {
        let (wd, gd, bd) = (wdata.clone(), gdata.clone(), bdata.clone());
        let pre_relu = move |h: &Tensor| -> Tensor {
            let w = t(&wd, &[4, 4]);
            let gamma = t(&gd, &[4, 1, 1]);
            let beta = t(&bd, &[4, 1, 1]);
            let normed = instance_norm(h, 1e-3).unwrap();
            let v = gamma
                .mul(&normed)
                .unwrap()
                .add(&beta)
                .unwrap()
                .add(h)
                .unwrap();
            v.chw_to_tokens().unwrap().matmul(&w).unwrap()
        };
        let pre_for_filter = pre_relu.clone();
        grad_check_when(
            move |h| pre_relu(h).relu(),
            &[4, 3, 3],
            10_000 + seed,
            away_from(move |h| pre_for_filter(h).data().to_vec(), 2e-2),
        );
    }
}

#[test]
fn ste_round_forward_and_passthrough() {
    let x = p(&[0.2, 0.5, -0.5, 1.49, -2.7], &[5]);
    let r = x.ste_round();
    assert_eq!(r.data(), &[0.0, 1.0, -1.0, 1.0, -3.0]);
    let grads = backward(&r.sum_all()).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[1.0; 5]);
}

#[test]
fn softmax_rows_sums_to_one_and_grads() {
    let mut s = 13u64;
    let data = rand_vec(6, &mut s);
    let x = t(&data, &[2, 3]);
    let sm = softmax_rows(&x).unwrap();
    for r in 0..2 {
        let sum: f32 = sm.data()[r * 3..(r + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
    for seed in 0..10u64 {
        grad_check(|x| softmax_rows(x).unwrap(), &[2, 3], 11_000 + seed);
    }
}

#[test]
fn grad_accumulates_over_reuse() {
    // loss = sum(x*x) + sum(x) => grad = 2x + 1.
    let x = p(&[1.0, -2.0, 3.0], &[3]);
    let loss = x.square().unwrap().sum_all().add(&x.sum_all()).unwrap().sum_all();
    let grads = backward(&loss).unwrap();
    let g = grads.get(&x).unwrap();
    assert_close(g, &[3.0, -3.0, 7.0], 1e-5);
}
