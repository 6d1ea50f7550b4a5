use approx::assert_relative_eq;
use multiquant::analysis::{
    accumulated_msqe, clipping_noise, msqe_analytic, msqe_report, noise_transplant_residual, quantization_noise,
    BinModel, ClippingVariant, ErrorModelConfig, Transplant,
};
use multiquant::Tensor;
use proptest::prelude::*;

fn exact(b: u8, u: f64) -> ErrorModelConfig {
    ErrorModelConfig::new(b, u).with_variant(ClippingVariant::Squared, BinModel::Exact)
}

#[test]
fn exact_bin_model_matches_monte_carlo() {
    for b in [4u8, 6, 8] {
        for u in [1.0, 2.0, 3.0] {
            let r = msqe_report(&exact(b, u).with_samples(1_000_000, 3)).unwrap();
            let gap = r.relative_gap.unwrap();
            assert!(
                gap <= 0.05,
                "b={b} u={u}: analytic {} mc {:?} gap {gap}",
                r.total_analytic,
                r.total_monte_carlo
            );
        }
    }
}

#[test]
fn power_of_two_bins_stay_close_from_four_bits() {
    for b in [4u8, 6, 8] {
        let ratio = quantization_noise(2.0, b, BinModel::PowerOfTwo) / quantization_noise(2.0, b, BinModel::Exact);
        assert!((1.0 - ratio).abs() <= 0.15, "b={b}: {ratio}");
    }
    let ratio = quantization_noise(2.0, 2, BinModel::PowerOfTwo) / quantization_noise(2.0, 2, BinModel::Exact);
    assert_relative_eq!(ratio, 9.0 / 16.0, max_relative = 1e-12);
}

#[test]
fn accumulated_error_sums_single_widths() {
    let v = ClippingVariant::Squared;
    let m = BinModel::PowerOfTwo;
    let single = msqe_analytic(&ErrorModelConfig::new(8, 1.0)).unwrap().total_analytic;
    assert_relative_eq!(accumulated_msqe(&[8], 1.0, v, m).unwrap(), single, max_relative = 1e-15);
    let four = accumulated_msqe(&[2, 4, 6, 8], 2.0, v, m).unwrap();
    let by_hand: f64 = [2u8, 4, 6, 8]
        .iter()
        .map(|&b| msqe_analytic(&ErrorModelConfig::new(b, 2.0)).unwrap().total_analytic)
        .sum();
    assert_relative_eq!(four, by_hand, max_relative = 1e-15);
    assert!(accumulated_msqe(&[2, 4, 6, 8], 1.0, v, m).unwrap() > single);
}

/// Deterministic inputs so the value can be reproduced outside this crate.
fn transplant_inputs() -> (Tensor, Tensor) {
    let w = Tensor::new(
        vec![2, 2, 3, 3],
        (0..36).map(|i| 0.6 * (1.3 * i as f64 + 0.5).sin()).collect(),
    )
    .unwrap();
    let a = Tensor::new(
        vec![1, 2, 10, 10],
        (0..200)
            .map(|i| 0.05 + (0.37 * i as f64 + 0.2).sin().abs() * 1.5)
            .collect(),
    )
    .unwrap();
    (w, a)
}

#[test]
fn transplant_residual_at_four_bits() {
    let (w, a) = transplant_inputs();
    let Transplant::Fit(f) = noise_transplant_residual(&w, &a, 4).unwrap() else {
        panic!("inconclusive")
    };
    // numpy lstsq on the same im2col system
    assert_relative_eq!(f.residual, 0.04086947591184139, max_relative = 1e-8);
    assert_eq!(f.support, 200);
}

proptest! {
    #[test]
    fn clipping_falls_and_resolution_rises_with_u(u in 0.1..5.0f64, du in 0.01..1.0f64, b in 2u8..=8) {
        for v in [ClippingVariant::AsWritten, ClippingVariant::Squared] {
            prop_assert!(clipping_noise(u + du, v) <= clipping_noise(u, v));
        }
        for m in [BinModel::PowerOfTwo, BinModel::Exact] {
            prop_assert!(quantization_noise(u + du, b, m) > quantization_noise(u, b, m));
        }
    }

    #[test]
    fn accumulated_error_ignores_order(mut bits in prop::collection::vec(2u8..=10, 1..6), u in 0.5..3.0f64) {
        let a = accumulated_msqe(&bits, u, ClippingVariant::Squared, BinModel::Exact).unwrap();
        bits.reverse();
        let b = accumulated_msqe(&bits, u, ClippingVariant::Squared, BinModel::Exact).unwrap();
        prop_assert!((a - b).abs() <= 1e-15 * a.abs());
    }
}
