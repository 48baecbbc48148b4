//! Randomized invariants across modules.

use proptest::prelude::*;

use crate::config::RunConfig;
use crate::denoiser::Ablation;
use crate::geometry::{depth_range, epipolar_residual, fundamental_matrix, Camera, Intrinsics, RingSpec, SphericalPose};
use crate::image::Image;
use crate::metrics::{psnr, Summary};
use crate::scheduler::{ddim_update, posterior_mean, q_sample, ScheduleSpec};
use crate::tensor::{Rng, Tensor};

fn camera(az: f64, el: f64, r: f64) -> Camera {
    Camera::new(SphericalPose::new(az, el, r).unwrap(), Intrinsics::for_image(32, 32))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn projection_round_trip(az in -3.2f64..3.2, el in -1.4f64..1.4, r in 1.0f64..4.0,
                             x in -0.5f64..0.5, y in -0.5f64..0.5, z in -0.5f64..0.5) {
        let cam = camera(az, el, r);
        let p = nalgebra::Point3::new(x, y, z);
        let q = cam.project(&p);
        prop_assert!(q.depth > 0.0);
        prop_assert!((cam.unproject(q.u, q.v, q.depth) - p).norm() < 1e-9);
    }

    #[test]
    fn epipolar_constraint_for_any_pair(a1 in -3.2f64..3.2, e1 in -1.2f64..1.2, a2 in -3.2f64..3.2, e2 in -1.2f64..1.2,
                                        u in 0.0f64..32.0, v in 0.0f64..32.0, s in 0.0f64..1.0) {
        let (ci, cj) = (camera(a1, e1, 1.5), camera(a2, e2, 1.5));
        prop_assume!((ci.center() - cj.center()).norm() > 1e-3);
        let f = fundamental_matrix(&ci, &cj).unwrap();
        let (near, far) = depth_range(1.5);
        let p = cj.project(&ci.unproject(u, v, near + s * (far - near)));
        prop_assume!(p.depth > 1e-3);
        prop_assert!(epipolar_residual(&f, (u, v), (p.u, p.v)).abs() < 1e-6);
    }

    #[test]
    fn canonical_order_is_listing_invariant(shift in 0usize..8, el in -0.2f64..0.7) {
        let ring = RingSpec::desk().build(el).unwrap();
        let r = ring.rotated(shift);
        let a: Vec<_> = ring.canonical_order().iter().map(|&i| ring.targets[i].clone()).collect();
        let b: Vec<_> = r.canonical_order().iter().map(|&i| r.targets[i].clone()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn true_noise_inverts_forward_process(t in 1usize..=100, seed in any::<u64>()) {
        let s = ScheduleSpec::DESK.build().unwrap();
        let mut rng = Rng::new(seed);
        let x0 = Tensor::randn(&[2, 3, 2, 2], &mut rng);
        let eps = Tensor::randn(&[2, 3, 2, 2], &mut rng);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        // A deterministic jump to t = 0 with the exact noise lands on x0.
        let back = ddim_update(&xt, &eps, t, 0, &s).unwrap();
        prop_assert!(back.max_abs_diff(&x0) < 1e-9);
        // At t = 1 the posterior mean with the exact noise is x0 itself.
        if t == 1 {
            prop_assert!(posterior_mean(&xt, &eps, 1, &s).unwrap().max_abs_diff(&x0) < 1e-9);
        }
    }

    #[test]
    fn ppm_round_trip(bytes in proptest::collection::vec(any::<u8>(), 3 * 6 * 5)) {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        let img = Image::new(6, 5, data).unwrap();
        let enc = img.to_ppm();
        prop_assert_eq!(&enc[11..], &bytes_interleaved(&bytes, 30)[..]);
        prop_assert_eq!(Image::from_ppm(&enc).unwrap(), img);
    }

    #[test]
    fn psnr_is_symmetric(a in proptest::collection::vec(0.0f32..1.0, 48), b in proptest::collection::vec(0.0f32..1.0, 48)) {
        let (x, y) = (Image::new(4, 4, a).unwrap(), Image::new(4, 4, b).unwrap());
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!(psnr(&x, &y).unwrap() <= 99.0);
    }

    #[test]
    fn summary_mean_is_bounded(v in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let s = Summary::of(&v).unwrap();
        prop_assert!(s.min <= s.mean && s.mean <= s.max);
    }

    #[test]
    fn config_round_trip(steps in 1usize..100_000, lr in 1e-5f64..1e-2, count in 1usize..5000, seed in 0u64..1 << 40, ab in 0usize..3) {
        let mut c = RunConfig::default();
        c.train.steps = steps;
        c.train.lr_start = lr;
        c.train.seed = seed;
        c.data.count = count;
        c.model.ablation = Ablation::ALL[ab];
        prop_assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}

/// Planar `[3, H·W]` bytes to interleaved RGB.
fn bytes_interleaved(planar: &[u8], plane: usize) -> Vec<u8> {
    (0..plane).flat_map(|i| (0..3).map(move |c| planar[c * plane + i])).collect()
}
