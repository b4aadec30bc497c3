//! Randomized invariant checks over generated shapes, seeds, and data.

use proptest::prelude::*;

use fino::data::{quantize_u8, Image};
use fino::flow::{self, FlowModel};
use fino::kernels;
use fino::metrics;
use fino::rng::SeededRng;
use fino::tape::Tape;
use fino::tensor::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The wavelet squeeze is orthonormal: energy-preserving and exactly
    /// invertible up to floating-point round-off.
    #[test]
    fn haar_is_orthonormal(
        n in 1usize..3,
        c in 1usize..4,
        half_h in 1usize..7,
        half_w in 1usize..7,
        seed in any::<u64>(),
    ) {
        let x = random_tensor(&[n, c, 2 * half_h, 2 * half_w], seed);
        let y = kernels::haar_fwd(&x).unwrap();
        let back = kernels::haar_inv(&y).unwrap();
        prop_assert!((x.sq_norm() - y.sq_norm()).abs() <= 1e-12 * x.sq_norm().max(1.0));
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }

    /// Decoding an encoding reproduces the input for any model geometry.
    #[test]
    fn flow_inverts_forward(
        blocks in 1usize..3,
        layers in 1usize..4,
        channels in 1usize..3,
        seed in any::<u64>(),
    ) {
        let model = FlowModel::new_random(channels, blocks, layers, 8, seed);
        let side = 4 * model.spatial_factor();
        let x = random_tensor(&[1, channels, side, side], seed ^ 0xABCD);
        prop_assert!(flow::roundtrip_error(&model, &x).unwrap() < 1e-9);
    }

    /// Swapping noise codes twice restores both latents bit-exactly, and
    /// the clean parts always stay in place.
    #[test]
    fn latent_swap_is_an_involution(seed in any::<u64>()) {
        let model = FlowModel::new_random(1, 1, 2, 8, seed);
        let tape = Tape::new();
        let tm = model.bind(&tape, false);
        let a = tape.constant(random_tensor(&[2, 1, 8, 8], seed ^ 1));
        let b = tape.constant(random_tensor(&[2, 1, 8, 8], seed ^ 2));
        let za = flow::flow_forward(a, &tm).unwrap();
        let zb = flow::flow_forward(b, &tm).unwrap();
        let (sa, sb) = flow::latent_swap(za, zb).unwrap();
        let (clean_a, _) = za.split().unwrap();
        let (clean_sa, _) = sa.split().unwrap();
        prop_assert_eq!(clean_a.value(), clean_sa.value());
        let (ra, rb) = flow::latent_swap(sa, sb).unwrap();
        prop_assert_eq!(ra.z.value(), za.z.value());
        prop_assert_eq!(rb.z.value(), zb.z.value());
    }

    /// PSNR agrees with a direct MSE computation for any image pair.
    #[test]
    fn psnr_mse_duality(seed in any::<u64>(), side in 4usize..12) {
        let a = Image::new(random_tensor(&[1, side, side], seed).map(|v| v.abs().min(1.0))).unwrap();
        let b = Image::new(random_tensor(&[1, side, side], seed ^ 9).map(|v| v.abs().min(1.0))).unwrap();
        let mut direct = 0.0;
        for (x, y) in a.pixels.data().iter().zip(b.pixels.data()) {
            direct += (x - y) * (x - y);
        }
        direct /= a.pixels.len() as f64;
        let p = metrics::psnr(&a, &b, 1.0).unwrap();
        if direct == 0.0 {
            prop_assert!(p.is_infinite());
        } else {
            prop_assert!((p - 10.0 * (1.0 / direct).log10()).abs() < 1e-9);
        }
    }

    /// 8-bit quantization: round(v·255), clamped, monotone in v.
    #[test]
    fn quantization_law(v in -0.5f64..1.5, w in -0.5f64..1.5) {
        let q = quantize_u8(v);
        let expected = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        prop_assert_eq!(q, expected);
        if v <= w {
            prop_assert!(q <= quantize_u8(w));
        }
    }

    /// Tensor dump round-trips bit-exactly in f64.
    #[test]
    fn tensor_file_roundtrip(
        d0 in 1usize..5,
        d1 in 1usize..5,
        seed in any::<u64>(),
    ) {
        let t = random_tensor(&[d0, d1], seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fnt");
        t.save_fnt(&p, fino::tensor::Dtype::F64).unwrap();
        prop_assert_eq!(Tensor::load_fnt(&p).unwrap(), t);
    }

    /// Substreams derived from the same (seed, index) agree; different
    /// indices diverge.
    #[test]
    fn rng_substreams_are_stable(seed in any::<u64>(), idx in any::<u64>()) {
        let a = SeededRng::substream(seed, idx).normal_vec(16);
        let b = SeededRng::substream(seed, idx).normal_vec(16);
        prop_assert_eq!(&a, &b);
        let c = SeededRng::substream(seed, idx.wrapping_add(1)).normal_vec(16);
        prop_assert_ne!(&a, &c);
    }
}
