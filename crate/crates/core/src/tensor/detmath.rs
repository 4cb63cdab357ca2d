//! Deterministic transcendentals built from IEEE-exact operations only
//! (+, -, *, /, sqrt, rounding, exponent manipulation), so every tensor
//! op produces bit-identical results on any IEEE-754 platform. libm
//! implementations are correctly rounded nowhere and differ across libcs;
//! these polynomials are accurate to ~1e-7 relative, far below the f32
//! working precision of the nets.

/// e^x for f32 inputs, evaluated in f64: 2^(x log2 e) with a degree-6
/// polynomial for the fractional power and exact exponent scaling.
pub fn exp_det(x: f32) -> f32 {
    if x.is_nan() {
        return f32::NAN;
    }
    let t = x as f64 * std::f64::consts::LOG2_E;
    if t >= 128.0 {
        return f32::INFINITY;
    }
    if t <= -150.0 {
        return 0.0;
    }
    let n = t.round();
    let f = t - n;
    // 2^f on [-0.5, 0.5]: Taylor of exp(f ln 2) through degree 6.
    const C1: f64 = 0.693_147_180_559_945_3;
    const C2: f64 = 0.240_226_506_959_100_7;
    const C3: f64 = 0.055_504_108_664_821_6;
    const C4: f64 = 0.009_618_129_107_628_477;
    const C5: f64 = 0.001_333_355_814_642_844;
    const C6: f64 = 0.000_154_035_303_933_816;
    let p = 1.0 + f * (C1 + f * (C2 + f * (C3 + f * (C4 + f * (C5 + f * C6)))));
    // Scale by 2^n through the exponent bits.
    let bits = ((n as i64 + 1023) as u64) << 52;
    (p * f64::from_bits(bits)) as f32
}

/// Natural log for f32 inputs: exponent split plus atanh series.
pub fn ln_det(x: f32) -> f32 {
    if x.is_nan() || x < 0.0 {
        return f32::NAN;
    }
    if x == 0.0 {
        return f32::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f32::INFINITY;
    }
    let xd = x as f64;
    let bits = xd.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    // Center the mantissa on [sqrt(1/2), sqrt(2)).
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    // ln(m) = 2 atanh(s); |s| <= 0.1716 so degree 9 reaches ~1e-10.
    let series = s * (2.0 + s2 * (2.0 / 3.0 + s2 * (2.0 / 5.0 + s2 * (2.0 / 7.0 + s2 * (2.0 / 9.0)))));
    ((e as f64) * std::f64::consts::LN_2 + series) as f32
}

pub fn sigmoid_det(x: f32) -> f32 {
    if x >= 0.0 {
        let e = exp_det(-x);
        1.0 / (1.0 + e)
    } else {
        let e = exp_det(x);
        e / (1.0 + e)
    }
}

pub fn tanh_det(x: f32) -> f32 {
    if x > 20.0 {
        return 1.0;
    }
    if x < -20.0 {
        return -1.0;
    }
    let e2 = exp_det(2.0 * x);
    ((e2 as f64 - 1.0) / (e2 as f64 + 1.0)) as f32
}
