//! Reference implementations used as test oracles. They work on exact
//! rationals and explicit bit loops, sharing no arithmetic with the crate.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub fn pow2(e: i32) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    if e >= 0 {
        num_traits::pow(two, e as usize)
    } else {
        BigRational::one() / num_traits::pow(two, (-e) as usize)
    }
}

pub fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap()
}

/// Round half to even on an exact rational.
pub fn round_half_even(x: &BigRational) -> BigInt {
    let floor = x.floor();
    let rem = x - &floor;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let f = floor.to_integer();
    if rem > half || (rem == half && (&f % 2u8) != BigInt::zero()) {
        f + 1
    } else {
        f
    }
}

/// Quantization of an exact value into Q`iwl`.`frac`: the scaled integer and
/// whether the value was out of range.
pub fn quantize_oracle(x: &BigRational, iwl: u32, frac: u32) -> (i64, bool) {
    let max: BigInt = (BigInt::one() << (iwl + frac)) - 1;
    if x.abs() >= pow2(iwl as i32) {
        let raw = if x.is_negative() { -max } else { max };
        return (raw.to_i64().unwrap(), true);
    }
    let r = round_half_even(&(x * pow2(frac as i32)));
    let r = r.clamp(-max.clone(), max);
    (r.to_i64().unwrap(), false)
}

fn sign(raw: i64) -> i64 {
    if raw < 0 {
        -1
    } else {
        1
    }
}

fn bit(raw: i64, k: u32) -> i64 {
    ((raw.unsigned_abs() >> k) & 1) as i64
}

/// S_H written out term by term: sign product times the weighted XNOR
/// agreement of every magnitude bit.
pub fn hamming_oracle(u: &[i64], v: &[i64], bits: u32, alpha: i32) -> BigRational {
    let mut total = BigRational::zero();
    for (&a, &b) in u.iter().zip(v) {
        let mut agree = BigRational::zero();
        for k in 0..bits - 1 {
            if bit(a, k) == bit(b, k) {
                agree += pow2(k as i32 + alpha - bits as i32);
            }
        }
        total += BigRational::from_integer(BigInt::from(sign(a) * sign(b))) * agree;
    }
    total
}

/// The approximate backward rule evaluated symbolically, per element:
/// S_u 2^a (S_u - S_v) - sum_k S_v 2^a (u_k - v_k).
pub fn eq7_oracle(u: &[i64], v: &[i64], bits: u32, alpha: i32) -> Vec<BigRational> {
    let step = pow2(alpha);
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let (su, sv) = (sign(a), sign(b));
            let mut g = BigRational::from_integer(BigInt::from(su * (su - sv))) * &step;
            for k in 0..bits - 1 {
                g -= BigRational::from_integer(BigInt::from(sv * (bit(a, k) - bit(b, k)))) * &step;
            }
            g
        })
        .collect()
}
