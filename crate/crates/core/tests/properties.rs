use num_complex::Complex64;
use proptest::prelude::*;

use spirit_sde::cxt;
use spirit_sde::diffusion::{perturb, NoiseSchedule, ScheduleParams};
use spirit_sde::encoding::{adjoint_a, coil_project, forward_a, AcsRegion, CoilSensitivities, SamplingMask};
use spirit_sde::metrics::{nmse, psnr, ssim};
use spirit_sde::rng;
use spirit_sde::simulation::{make_coil_maps, make_mask, MaskPattern, MaskSpec, ACCELERATION_TOLERANCE};
use spirit_sde::spirit::{adjoint_of_g_minus_i, apply_g, PsiOperator, SpiritKernel};
use spirit_sde::{ComplexArray, RealImage};

fn random(shape: &[usize], seed: u64) -> ComplexArray {
    rng::complex_normal(&mut rng::stream(seed, 17), shape)
}

fn random_mask(rows: usize, cols: usize, seed: u64) -> SamplingMask {
    let mut prng = rng::stream(seed, 18);
    let mut v: Vec<bool> = (0..rows * cols).map(|_| rng::standard_normal(&mut prng) > 0.0).collect();
    let acs = AcsRegion::centered((rows, cols), (2, 2)).unwrap();
    for r in 0..rows {
        for c in 0..cols {
            if acs.contains(r, c) {
                v[r * cols + c] = true;
            }
        }
    }
    SamplingMask::new(rows, cols, v, acs).unwrap()
}

fn random_kernel(nc: usize, k: usize, seed: u64) -> SpiritKernel {
    let mut w = random(&[nc, nc, k, k], seed).scale(0.2);
    let c = k / 2;
    for t in 0..nc {
        w.data_mut()[((t * nc + t) * k + c) * k + c] = Complex64::new(0.0, 0.0);
    }
    SpiritKernel::from_parts(w, 0.0, 0.0).unwrap()
}

fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

fn positive_image(rows: usize, cols: usize, seed: u64) -> RealImage {
    let mut prng = rng::stream(seed, 19);
    RealImage::from_fn(rows, cols, |_, _| 0.1 + rng::standard_normal(&mut prng).abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fft_round_trip_and_parseval(rows in 2usize..24, cols in 2usize..24, nc in 1usize..4, seed in any::<u64>()) {
        let x = random(&[nc, rows, cols], seed);
        let k = x.fft2c().unwrap();
        prop_assert!(k.ifft2c().unwrap().max_abs_diff(&x) <= 1e-12 * x.norm().max(1.0));
        prop_assert!((k.norm_sqr() - x.norm_sqr()).abs() <= 1e-12 * x.norm_sqr());
    }

    #[test]
    fn encoding_adjoint(n in 4usize..20, nc in 1usize..5, seed in any::<u64>()) {
        let s = make_coil_maps((n, n), nc, seed % 1000).unwrap();
        let mask = random_mask(n, n, seed);
        let x = random(&[n, n], seed ^ 1);
        let y = mask.apply(&random(&[nc, n, n], seed ^ 2));
        let lhs = forward_a(&x, &s, &mask).unwrap().inner(&y).unwrap();
        let rhs = x.inner(&adjoint_a(&y, &s, &mask).unwrap()).unwrap();
        prop_assert!(rel(lhs, rhs) <= 1e-10);
    }

    #[test]
    fn coil_projection_is_an_orthogonal_projector(n in 2usize..16, nc in 1usize..5, seed in any::<u64>()) {
        let s = make_coil_maps((n, n), nc, seed % 1000).unwrap();
        let u = random(&[nc, n, n], seed);
        let v = random(&[nc, n, n], seed ^ 3);
        let pu = coil_project(&u, &s).unwrap();
        prop_assert!(coil_project(&pu, &s).unwrap().max_abs_diff(&pu) <= 1e-10 * u.norm());
        let a = pu.inner(&v).unwrap();
        let b = u.inner(&coil_project(&v, &s).unwrap()).unwrap();
        prop_assert!(rel(a, b) <= 1e-10);
    }

    #[test]
    fn g_minus_i_adjoint(rows in 5usize..14, cols in 5usize..14, nc in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>()) {
        let kern = random_kernel(nc, k, seed);
        let u = random(&[nc, rows, cols], seed ^ 4);
        let v = random(&[nc, rows, cols], seed ^ 5);
        let gu = &apply_g(&u, &kern).unwrap() - &u;
        let lhs = gu.inner(&v).unwrap();
        let rhs = u.inner(&adjoint_of_g_minus_i(&v, &kern).unwrap()).unwrap();
        prop_assert!(rel(lhs, rhs) <= 1e-10);
    }

    #[test]
    fn psi_is_hermitian_psd(n in 5usize..14, nc in 1usize..4, seed in any::<u64>()) {
        let kern = random_kernel(nc, 3, seed);
        let psi = PsiOperator::new(&kern, (n, n)).unwrap();
        let u = random(&[nc, n, n], seed ^ 6);
        let v = random(&[nc, n, n], seed ^ 7);
        let q = psi.quadratic(&u).unwrap();
        prop_assert!(q >= -1e-10 * u.norm_sqr());
        let a = psi.apply(&u).unwrap().inner(&v).unwrap();
        let b = u.inner(&psi.apply(&v).unwrap()).unwrap();
        prop_assert!(rel(a, b) <= 1e-10);
        prop_assert!(psi.apply(&u).unwrap().norm() <= psi.norm_bound() * u.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn cxt_round_trip_of_single_precision_data(dims in prop::collection::vec(1usize..6, 1..4), seed in any::<u64>()) {
        let x = random(&dims, seed).quantize_f32();
        let mut buf = Vec::new();
        cxt::write_to(&mut buf, &x).unwrap();
        let back = cxt::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn masks_hit_the_acceleration_and_keep_acs(acc in 2.0f64..6.0, seed in any::<u64>(), vd in any::<bool>()) {
        let spec = MaskSpec {
            pattern: if vd { MaskPattern::VariableDensityRandom } else { MaskPattern::UniformCartesian },
            acceleration: acc,
            acs: (8, 8),
            seed,
            density_exponent: 2.0,
        };
        let m = make_mask(&spec, (48, 48)).unwrap();
        prop_assert!((m.acceleration() - acc).abs() <= ACCELERATION_TOLERANCE * acc);
        let acs = m.acs();
        for r in acs.row0..acs.row0 + acs.rows {
            for c in acs.col0..acs.col0 + acs.cols {
                prop_assert!(m.is_sampled(r, c));
            }
        }
    }

    #[test]
    fn perturbation_stays_in_coil_range(t in 0.0f64..1.0, seed in any::<u64>()) {
        let s = make_coil_maps((12, 12), 3, 4).unwrap();
        let x0 = coil_project(&random(&[3, 12, 12], seed), &s).unwrap();
        let sched = NoiseSchedule::new(ScheduleParams { beta_min: 0.01, beta_max: 20.0, eta0: 0.0, n_steps: 10 }).unwrap();
        let z = random(&[3, 12, 12], seed ^ 8);
        let xt = perturb(&x0, &sched, t, &s, &z).unwrap();
        prop_assert!(coil_project(&xt, &s).unwrap().max_abs_diff(&xt) <= 1e-10 * xt.norm().max(1.0));
    }

    #[test]
    fn metrics_scaling_laws(scale in 0.01f64..100.0, seed in any::<u64>()) {
        let a = positive_image(16, 16, seed);
        let b = positive_image(16, 16, seed ^ 9);
        let sa = a.map(|v| v * scale);
        let sb = b.map(|v| v * scale);
        let n0 = nmse(&a, &b, None).unwrap();
        prop_assert!(n0 >= 0.0);
        prop_assert!((nmse(&sa, &sb, None).unwrap() - n0).abs() <= 1e-12 * n0);
        let s0 = ssim(&a, &b, None).unwrap();
        prop_assert!(s0 <= 1.0);
        prop_assert!((ssim(&sa, &sb, None).unwrap() - s0).abs() <= 1e-12);
        let p0 = psnr(&a, &b, None).unwrap();
        prop_assert!((psnr(&sa, &sb, None).unwrap() - p0).abs() <= 1e-9);
        // scaling only the test image changes the error, never the peak
        let peak = a.data.iter().cloned().fold(0.0, f64::max);
        let mse: f64 = a.data.iter().zip(&sb.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 256.0;
        prop_assert!((psnr(&a, &sb, None).unwrap() - 10.0 * (peak * peak / mse).log10()).abs() <= 1e-9);
    }

    #[test]
    fn maps_are_normalized_on_support(n in 4usize..20, nc in 1usize..6, seed in 0u64..500) {
        let s: CoilSensitivities = make_coil_maps((n, n), nc, seed).unwrap();
        let maps = s.maps();
        for p in 0..n * n {
            let e: f64 = (0..nc).map(|c| maps.slice(c)[p].norm_sqr()).sum();
            if s.support()[p] {
                prop_assert!((e - 1.0).abs() <= 1e-12);
            } else {
                prop_assert!(e == 0.0);
            }
        }
    }
}
