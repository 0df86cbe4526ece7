use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tada_core::classical::{
    asd_pocs, asd_pocs_with, sart, total_variation, tv_descent_step, tv_gradient, AsdPocsConfig,
    SartConfig,
};
use tada_core::tomo::{self, Geometry, RampFilter};
use tada_core::toolkit::{metrics, shepp_logan_3d};
use tada_core::{Sinogram, Volume};

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(shape, |_, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn tv_gradient_matches_finite_differences() {
    let x = random_volume([5, 6, 7], 1);
    let g = tv_gradient(&x);
    let h = 1e-3f32;
    let mut numeric = Vec::with_capacity(x.len());
    let mut work = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        work.data_mut()[i] = x0 + h;
        let plus = total_variation(&work);
        work.data_mut()[i] = x0 - h;
        let minus = total_variation(&work);
        work.data_mut()[i] = x0;
        let step = (x0 + h) as f64 - (x0 - h) as f64;
        numeric.push((plus - minus) / step);
    }
    let dot: f64 = g.iter().zip(&numeric).map(|(a, b)| a * b).sum();
    let na: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let cosine = dot / (na * nb);
    assert!(cosine > 0.999, "cosine {cosine}");
}

#[test]
fn tv_step_smooths_noisy_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Volume::from_fn(
        [6, 12, 12],
        |_, _, c| if c < 6 { 0.2 } else { 0.8 } + rng.random_range(-0.05..0.05),
    );
    let before = total_variation(&x);
    let mut y = x.clone();
    for _ in 0..10 {
        y = tv_descent_step(&y, 0.5).unwrap();
    }
    assert!(total_variation(&y) < before);
    assert!(tv_descent_step(&x, 0.0).is_err());
    assert!(tv_descent_step(&x, -1.0).is_err());
}

#[test]
fn one_small_step_lowers_tv_of_sharp_edge() {
    let x = Volume::from_fn([4, 8, 8], |_, _, c| if c < 4 { 0.0 } else { 1.0 });
    let y = tv_descent_step(&x, 0.01).unwrap();
    assert!(total_variation(&y) < total_variation(&x));
}

#[test]
fn tv_of_two_voxels_and_homogeneity() {
    let x = Volume::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
    assert!((total_variation(&x) - 1.0).abs() < 1e-6);
    let r = random_volume([4, 5, 6], 9);
    let scaled = Volume::new(r.shape(), r.data().iter().map(|v| 2.5 * v).collect()).unwrap();
    assert!(
        (total_variation(&scaled) - 2.5 * total_variation(&r)).abs()
            < 1e-4 * total_variation(&scaled)
    );
}

#[test]
fn tv_of_constant_volume_vanishes() {
    let x = Volume::filled([3, 4, 5], 0.7);
    assert!(total_variation(&x) < 1e-3);
    assert_eq!(tv_descent_step(&x, 1.0).unwrap(), x);
}

fn short_config(iterations: usize) -> AsdPocsConfig {
    AsdPocsConfig {
        iterations,
        num_subsets: 5,
        tv_steps_per_iter: 10,
        ..AsdPocsConfig::default()
    }
}

#[test]
fn zero_measurements_give_zero_volume() {
    let g = Geometry::parallel([3, 12, 12], 10).unwrap();
    let y = Sinogram::zeros(g.sinogram_shape());
    let (x, trace) = asd_pocs(&y, &g, &short_config(5)).unwrap();
    assert!(x.data().iter().all(|&v| v == 0.0));
    assert_eq!(trace.records.len(), 5);
}

#[test]
fn every_iterate_is_nonnegative() {
    let g = Geometry::parallel([3, 16, 16], 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = (0..g.sinogram_shape().iter().product())
        .map(|_| rng.random_range(-2.0..5.0))
        .collect();
    let y = Sinogram::new(g.sinogram_shape(), data).unwrap();
    let mut seen = 0;
    asd_pocs_with(&y, &g, &short_config(8), |_, x| {
        seen += 1;
        assert!(x.data().iter().all(|&v| v >= 0.0));
    })
    .unwrap();
    assert_eq!(seen, 8);
}

#[test]
fn data_phase_residual_is_monotone() {
    let x = shepp_logan_3d(16).unwrap();
    let g = Geometry::parallel(x.shape(), 20).unwrap();
    let y = tomo::forward_project(&x, &g).unwrap();
    let cfg = AsdPocsConfig {
        iterations: 50,
        num_subsets: 20,
        ..AsdPocsConfig::default()
    };
    let (_, trace) = asd_pocs(&y, &g, &cfg).unwrap();
    for w in trace.records.windows(2) {
        let (a, b) = (w[0].data_phase_residual, w[1].data_phase_residual);
        assert!(b <= a * 1.01, "iteration {}: {b} > {a}", w[1].iteration);
    }
}

#[test]
fn without_tv_steps_matches_sart() {
    let x = shepp_logan_3d(16).unwrap();
    let g = Geometry::parallel(x.shape(), 15).unwrap();
    let y = tomo::forward_project(&x, &g).unwrap();
    let cfg = AsdPocsConfig {
        tv_steps_per_iter: 0,
        ..short_config(6)
    };
    let (a, _) = asd_pocs(&y, &g, &cfg).unwrap();
    let b = sart(
        &y,
        &g,
        &SartConfig {
            iterations: 6,
            num_subsets: 5,
            lambda: cfg.lambda,
            lambda_decay: cfg.lambda_decay,
            nonnegativity: true,
        },
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn beats_fbp_on_sparse_views() {
    let x = shepp_logan_3d(32).unwrap();
    let g = Geometry::parallel(x.shape(), 20).unwrap();
    let y = tomo::forward_project(&x, &g).unwrap();
    let fbp = metrics::psnr(&tomo::fbp(&y, &g, RampFilter::RamLak).unwrap(), &x, 1.0).unwrap();
    let (r, _) = asd_pocs(&y, &g, &short_config(40)).unwrap();
    let tv = metrics::psnr(&r, &x, 1.0).unwrap();
    assert!(tv > fbp + 2.0, "ASD-POCS {tv:.2} dB vs FBP {fbp:.2} dB");
}

#[test]
fn subsets_are_clamped_to_view_count() {
    let x = shepp_logan_3d(16).unwrap();
    let g = Geometry::parallel(x.shape(), 4).unwrap();
    let y = tomo::forward_project(&x, &g).unwrap();
    let many = AsdPocsConfig {
        num_subsets: 30,
        ..short_config(3)
    };
    let exact = AsdPocsConfig {
        num_subsets: 4,
        ..short_config(3)
    };
    assert_eq!(
        asd_pocs(&y, &g, &many).unwrap().0,
        asd_pocs(&y, &g, &exact).unwrap().0
    );
}

#[test]
fn invalid_configs_are_rejected() {
    let g = Geometry::parallel([2, 8, 8], 4).unwrap();
    let y = Sinogram::zeros(g.sinogram_shape());
    for cfg in [
        AsdPocsConfig {
            lambda: 2.5,
            ..AsdPocsConfig::default()
        },
        AsdPocsConfig {
            iterations: 0,
            ..AsdPocsConfig::default()
        },
        AsdPocsConfig {
            num_subsets: 0,
            ..AsdPocsConfig::default()
        },
        AsdPocsConfig {
            tv_fraction: -0.1,
            ..AsdPocsConfig::default()
        },
    ] {
        assert!(asd_pocs(&y, &g, &cfg).is_err(), "{cfg:?}");
    }
    let wrong = Sinogram::zeros([2, 5, g.num_det()]);
    assert!(asd_pocs(&wrong, &g, &short_config(1)).is_err());
}
