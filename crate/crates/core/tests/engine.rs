use tada_core::engine::{
    input_update, noise_sigma, run_tada_dip, run_tada_dip_with, run_vanilla_dip,
    run_vanilla_dip_with, synthesize_measurements, tada_loss, Iteration, TadaConfig,
};
use tada_core::tomo::Geometry;
use tada_core::toolkit::shepp_logan_3d;
use tada_core::unet::UNetConfig;
use tada_core::{Sinogram, Volume};

fn problem(n: usize, views: usize) -> (Volume, Sinogram, Geometry) {
    let x = shepp_logan_3d(n).unwrap();
    let g = Geometry::parallel(x.shape(), views).unwrap();
    let y = synthesize_measurements(&x, &g, 0.0, 0).unwrap();
    (x, y, g)
}

fn tiny(iterations: usize) -> TadaConfig {
    TadaConfig {
        iterations,
        learning_rate: 1e-2,
        eval_every: 5,
        unet: UNetConfig {
            depth: 1,
            base_channels: 2,
            channel_growth: 2,
            skip: true,
        },
        ..TadaConfig::default()
    }
}

/// (σ, η, z, x̂, z', loss, fidelity, regularizer) per iteration.
type Seen = (f64, Volume, Volume, Volume, Volume, f64, f64, f64);

fn collect<F>(run: F) -> Vec<Seen>
where
    F: FnOnce(&mut dyn FnMut(&Iteration) -> tada_core::Result<()>),
{
    let mut seen = Vec::new();
    run(&mut |it: &Iteration| {
        seen.push((
            it.sigma,
            it.eta.clone(),
            it.z.clone(),
            it.xhat.clone(),
            it.z_next.clone(),
            it.loss,
            it.data_fidelity,
            it.regularizer,
        ));
        Ok(())
    });
    seen
}

#[test]
fn reduces_to_sequential_autoencoding_at_alpha0_gamma1() {
    let (_, y, g) = problem(8, 6);
    let cfg = TadaConfig {
        alpha: 0.0,
        gamma: 1.0,
        ..tiny(6)
    };
    let seen = collect(|obs| {
        run_tada_dip_with(&y, &g, &cfg, None, obs).unwrap();
    });
    assert_eq!(seen.len(), 6);
    for (sigma, eta, _, xhat, z_next, ..) in &seen {
        assert_eq!(*sigma, 0.0);
        assert!(eta.data().iter().all(|&v| v == 0.0));
        let same = xhat
            .data()
            .iter()
            .zip(z_next.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "z' must equal x̂ bitwise");
    }
}

#[test]
fn noise_is_fresh_and_scaled() {
    let (_, y, g) = problem(8, 6);
    let cfg = tiny(100);
    let mut prev: Option<Volume> = None;
    let mut count = 0;
    run_tada_dip_with(&y, &g, &cfg, None, &mut |it| {
        assert_eq!(it.sigma, noise_sigma(it.z, cfg.alpha));
        assert!(it.sigma > 0.0);
        if let Some(p) = &prev {
            assert_ne!(p, it.eta);
        }
        let n = it.eta.len() as f64;
        let std = (it
            .eta
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(
            (std / it.sigma - 1.0).abs() < 0.25,
            "sample std {std} vs σ {}",
            it.sigma
        );
        prev = Some(it.eta.clone());
        count += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(count, 100);
}

#[test]
fn input_moves_toward_output_by_gamma() {
    let (_, y, g) = problem(8, 6);
    let cfg = tiny(8);
    let seen = collect(|obs| {
        run_tada_dip_with(&y, &g, &cfg, None, obs).unwrap();
    });
    for w in seen.windows(2) {
        assert_eq!(w[0].4, w[1].2, "next iteration starts from z'");
    }
    for (_, _, z, xhat, z_next, ..) in &seen {
        assert_eq!(*z_next, input_update(z, xhat, cfg.gamma).unwrap());
        let step: f64 = z
            .data()
            .iter()
            .zip(z_next.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let gap: f64 = z
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        assert!(step.sqrt() <= cfg.gamma * gap.sqrt() * (1.0 + 1e-4) + 1e-6);
    }
}

#[test]
fn loss_decomposes_into_fidelity_and_regularizer() {
    let (_, y, g) = problem(8, 6);
    let cfg = TadaConfig {
        p: 2,
        beta: 0.3,
        ..tiny(5)
    };
    let seen = collect(|obs| {
        run_tada_dip_with(&y, &g, &cfg, None, obs).unwrap();
    });
    for (_, _, z, xhat, _, loss, fid, reg) in &seen {
        assert!(*reg > 0.0);
        assert!((loss - (fid + cfg.beta * reg)).abs() <= 1e-4 * loss.abs());
        let reference = tada_loss(&y, xhat, z, &g, cfg.beta, cfg.p).unwrap();
        assert!(
            (loss - reference).abs() <= 1e-4 * reference,
            "{loss} vs {reference}"
        );
    }
}

#[test]
fn no_gradient_reaches_inputs_or_measurements() {
    let (_, y, g) = problem(8, 6);
    let mut checked = 0;
    run_tada_dip_with(&y, &g, &tiny(3), None, &mut |it| {
        assert!(!it.tape.needs_grad(it.input_var));
        assert!(it.tape.grad(it.input_var).is_none());
        let z = it.z_var.expect("β > 0 records z");
        assert!(!it.tape.needs_grad(z));
        assert!(it.tape.grad(z).is_none());
        checked += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(checked, 3);
}

#[test]
fn vanilla_keeps_input_fixed_and_noise_free() {
    let (_, y, g) = problem(8, 6);
    let seen = collect(|obs| {
        run_vanilla_dip_with(&y, &g, &tiny(5), None, obs).unwrap();
    });
    let z0 = seen[0].2.clone();
    for (sigma, eta, z, _, z_next, loss, fid, reg) in &seen {
        assert_eq!(*sigma, 0.0);
        assert!(eta.data().iter().all(|&v| v == 0.0));
        assert_eq!(*z, z0);
        assert_eq!(*z_next, z0);
        assert_eq!(*reg, 0.0);
        assert_eq!(loss, fid);
    }
}

#[test]
fn same_seed_same_run_different_seed_different_run() {
    let (x, y, g) = problem(12, 6);
    let cfg = tiny(10);
    let (a, ta) = run_tada_dip(&y, &g, &cfg, Some(&x)).unwrap();
    let (b, tb) = run_tada_dip(&y, &g, &cfg, Some(&x)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = run_tada_dip(&y, &g, &TadaConfig { seed: 1, ..cfg }, Some(&x)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn returned_volume_is_the_ema() {
    let (_, y, g) = problem(8, 6);
    let mut last = None;
    let (out, _) = run_tada_dip_with(&y, &g, &tiny(4), None, &mut |it| {
        last = Some(it.ema.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(Some(out), last);
}

#[test]
fn trace_cadence_and_metrics() {
    let (x, y, g) = problem(12, 6);
    let cfg = TadaConfig {
        eval_every: 4,
        ..tiny(10)
    };
    let (_, trace) = run_vanilla_dip(&y, &g, &cfg, Some(&x)).unwrap();
    let its: Vec<usize> = trace.records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![1, 4, 8, 10]);
    assert!(trace
        .records
        .iter()
        .all(|r| r.psnr_ema.is_some() && r.ssim_ema.is_some()));
    let (_, trace) = run_vanilla_dip(&y, &g, &cfg, None).unwrap();
    assert!(trace.records.iter().all(|r| r.psnr_ema.is_none()));
}

#[test]
fn loss_decreases_within_200_iterations() {
    let (x, y, g) = problem(16, 10);
    let cfg = TadaConfig {
        eval_every: 50,
        ..tiny(200)
    };
    let (_, trace) = run_tada_dip(&y, &g, &cfg, Some(&x)).unwrap();
    let first = trace.records.first().unwrap().data_fidelity;
    let last = trace.records.last().unwrap().data_fidelity;
    assert!(last < 0.5 * first, "data fidelity {first} -> {last}");
}

#[test]
fn output_vanishes_outside_measured_support() {
    let (_, y, g) = problem(12, 6);
    let (out, _) = run_tada_dip(&y, &g, &tiny(3), None).unwrap();
    assert_eq!(out.get(0, 0, 0), 0.0);
    assert_eq!(out.get(5, 11, 11), 0.0);
    assert!(out.get(6, 6, 6) > 0.0);
}

#[test]
fn rejects_inconsistent_inputs() {
    let (x, y, g) = problem(8, 6);
    let bad_truth = Volume::zeros([8, 8, 4]);
    assert!(run_tada_dip(&y, &g, &tiny(1), Some(&bad_truth)).is_err());
    let other = Geometry::parallel(x.shape(), 5).unwrap();
    assert!(run_tada_dip(&y, &other, &tiny(1), None).is_err());
    let odd = Geometry::parallel([7, 8, 8], 6).unwrap();
    let odd_y = synthesize_measurements(&Volume::zeros([7, 8, 8]), &odd, 0.0, 0).unwrap();
    assert!(run_tada_dip(&odd_y, &odd, &tiny(1), None).is_err());
    assert!(run_tada_dip(&y, &g, &TadaConfig { p: 3, ..tiny(1) }, None).is_err());
}
