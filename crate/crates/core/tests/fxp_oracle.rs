mod common;

use common::{exact, pow2, quantize_oracle};
use proptest::prelude::*;
use qmann::fxp::*;

fn fmt(s: &str) -> QFormat {
    s.parse().unwrap()
}

fn formats() -> impl Strategy<Value = QFormat> {
    (0u32..8, 1u32..10).prop_map(|(i, f)| QFormat::new(i, f).unwrap())
}

#[test]
fn worked_examples() {
    let mut ctx = ArithContext::new();
    assert_eq!(quantize(0.0, fmt("Q2.5"), &mut ctx).unwrap().to_f64(), 0.0);
    assert_eq!(quantize(1.3, fmt("Q2.5"), &mut ctx).unwrap().to_f64(), 1.3125);
    assert_eq!(ctx.overflows(), 0);
    assert_eq!(quantize(5.0, fmt("Q2.5"), &mut ctx).unwrap().to_f64(), 3.96875);
    assert_eq!(ctx.overflows(), 1);

    assert_eq!(error_bound(1.0, fmt("Q5.2")), 0.25);
    assert_eq!(error_bound(40.0, fmt("Q5.2")), 8.0);
    assert_eq!(error_bound(0.0, fmt("Q2.7")), 2f64.powi(-7));

    let q = |x, f| quantize(x, fmt(f), &mut ArithContext::new()).unwrap();
    let mut ctx = ArithContext::new();
    assert_eq!(fx_add(q(1.5, "Q5.2"), q(-1.5, "Q5.2"), &mut ctx).unwrap().to_f64(), 0.0);
    assert_eq!(fx_mul(q(1.5, "Q2.5"), q(2.0, "Q2.5"), &mut ctx).unwrap().to_f64(), 3.0);
    assert_eq!(ctx.overflows(), 0);
    assert_eq!(fx_add(q(3.5, "Q2.5"), q(1.0, "Q2.5"), &mut ctx).unwrap().to_f64(), 3.96875);
    assert_eq!(ctx.overflows(), 1);
    assert!(fx_add(q(1.0, "Q2.5"), q(1.0, "Q5.2"), &mut ctx).is_err());

    let all = FixedScalar::from_parts(1, &[true; 7], fmt("Q2.5")).unwrap();
    assert_eq!(dequantize(all), 3.96875);
    let mut one = [false; 7];
    one[5] = true;
    assert_eq!(dequantize(FixedScalar::from_parts(-1, &one, fmt("Q2.5")).unwrap()), -1.0);
}

#[test]
fn nan_is_rejected() {
    assert!(quantize(f64::NAN, fmt("Q5.2"), &mut ArithContext::new()).is_err());
}

proptest! {
    #[test]
    fn quantize_matches_rational_oracle(f in formats(), x in -300.0f64..300.0) {
        let mut ctx = ArithContext::new();
        let (q, of) = quantize_flagged(x, f, &mut ctx).unwrap();
        let (raw, oracle_of) = quantize_oracle(&exact(x), f.iwl(), f.frac());
        prop_assert_eq!(q.raw(), raw);
        prop_assert_eq!(of, oracle_of);
        prop_assert_eq!(ctx.overflows(), oracle_of as u64);
    }

    #[test]
    fn quantize_error_case_split(f in formats(), x in -300.0f64..300.0) {
        let q = quantize(x, f, &mut ArithContext::new()).unwrap().to_f64();
        let err = (q - x).abs();
        if x.abs() < f.limit() {
            // Round to nearest halves the printed bound.
            prop_assert!(err <= f.resolution() / 2.0);
            prop_assert!(err < error_bound(x, f));
        } else {
            prop_assert_eq!(q.abs(), f.max_value());
            prop_assert!((err - error_bound(x, f)).abs() <= f.resolution());
        }
    }

    #[test]
    fn quantize_is_idempotent_and_round_trips(f in formats(), raw in any::<i64>()) {
        let raw = raw % (f.max_raw() + 1);
        let a = FixedScalar::from_raw(raw, f).unwrap();
        let mut ctx = ArithContext::new();
        let back = quantize(dequantize(a), f, &mut ctx).unwrap();
        prop_assert_eq!(back, a);
        prop_assert_eq!(ctx.overflows(), 0);
        let again = quantize(back.to_f64(), f, &mut ctx).unwrap();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn add_and_mul_match_rational_oracle(f in formats(), a in any::<i64>(), b in any::<i64>()) {
        let a = FixedScalar::from_raw(a % (f.max_raw() + 1), f).unwrap();
        let b = FixedScalar::from_raw(b % (f.max_raw() + 1), f).unwrap();
        let ea = exact(a.to_f64());
        let eb = exact(b.to_f64());

        let mut ctx = ArithContext::new();
        let sum = fx_add(a, b, &mut ctx).unwrap();
        let (raw, of) = quantize_oracle(&(&ea + &eb), f.iwl(), f.frac());
        prop_assert_eq!(sum.raw(), raw);
        prop_assert_eq!(ctx.overflows(), of as u64);

        let mut ctx = ArithContext::new();
        let prod = fx_mul(a, b, &mut ctx).unwrap();
        let (raw, of) = quantize_oracle(&(&ea * &eb), f.iwl(), f.frac());
        prop_assert_eq!(prod.raw(), raw);
        prop_assert_eq!(ctx.overflows(), of as u64);

        // Commutativity.
        prop_assert_eq!(fx_add(b, a, &mut ctx).unwrap(), sum);
        prop_assert_eq!(fx_mul(b, a, &mut ctx).unwrap(), prod);
    }

    #[test]
    fn rescaled_add_matches_oracle(a in -127i64..=127, b in -127i64..=127) {
        let (fa, fb) = (fmt("Q2.5"), fmt("Q5.2"));
        let a = FixedScalar::from_raw(a, fa).unwrap();
        let b = FixedScalar::from_raw(b, fb).unwrap();
        let mut ctx = ArithContext::new();
        let got = fx_add_rescaled(a, b, &mut ctx);
        let (b_raw, _) = quantize_oracle(&exact(b.to_f64()), fa.iwl(), fa.frac());
        let b_q = FixedScalar::from_raw(b_raw, fa).unwrap();
        let (raw, _) = quantize_oracle(&(exact(a.to_f64()) + exact(b_q.to_f64())), fa.iwl(), fa.frac());
        prop_assert_eq!(got.raw(), raw);
    }

    #[test]
    fn matvec_matches_rational_oracle(
        w in prop::collection::vec(-127i64..=127, 12),
        v in prop::collection::vec(-127i64..=127, 4),
    ) {
        let f = fmt("Q2.5");
        let m = FixedTensor::from_raw(vec![3, 4], f, w.clone()).unwrap();
        let x = FixedTensor::from_raw(vec![4], f, v.clone()).unwrap();
        let mut ctx = ArithContext::new();
        let out = m.matvec(&x, f, &mut ctx).unwrap();
        let mut expected_of = 0;
        for r in 0..3 {
            let mut acc = num_rational::BigRational::from_integer(0.into());
            for c in 0..4 {
                acc += exact(w[r * 4 + c] as f64) * exact(v[c] as f64) * pow2(-10);
            }
            let (raw, of) = quantize_oracle(&acc, 2, 5);
            prop_assert_eq!(out.raw()[r], raw);
            expected_of += of as u64;
        }
        prop_assert_eq!(out.overflow_count(), expected_of);
        prop_assert_eq!(ctx.overflows(), expected_of);
    }

    #[test]
    fn tensor_overflow_count_never_decreases(v in prop::collection::vec(-10.0f64..10.0, 1..16)) {
        let f = fmt("Q2.5");
        let mut ctx = ArithContext::new();
        let a = FixedTensor::vector(&v, f, &mut ctx).unwrap();
        let b = a.add(&a, &mut ctx).unwrap();
        let c = b.add(&a, &mut ctx).unwrap();
        prop_assert!(b.overflow_count() >= a.overflow_count());
        prop_assert!(c.overflow_count() >= b.overflow_count());
    }

    #[test]
    fn stochastic_rounding_lands_on_a_neighbour(x in -3.9f64..3.9, seed in any::<u64>()) {
        let f = fmt("Q2.5");
        let q = quantize(x, f, &mut ArithContext::stochastic(seed)).unwrap().to_f64();
        prop_assert!((q - x).abs() < f.resolution());
        let again = quantize(x, f, &mut ArithContext::stochastic(seed)).unwrap().to_f64();
        prop_assert_eq!(q, again);
    }
}

#[test]
fn stochastic_rounding_is_unbiased() {
    let f = fmt("Q2.5");
    let mut ctx = ArithContext::stochastic(7);
    let x = 1.0 + 0.3 * f.resolution();
    let n = 20_000;
    let mean: f64 = (0..n).map(|_| quantize(x, f, &mut ctx).unwrap().to_f64()).sum::<f64>() / n as f64;
    // Standard error of the mean is about 0.0032 resolution steps.
    assert!((mean - x).abs() < 0.015 * f.resolution(), "mean {mean} vs {x}");
}
