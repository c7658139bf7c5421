use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use symflow::rng;
use symflow::signal::{add_white_noise, clean_signal, ParamPrior, ShiftPrior, SignalKind, SignalParams, TimeGrid};
use symflow::validation::{
    credible_level, crb_widths, grid_posterior, kolmogorov_pvalue, ks_statistic, marginal_credible_level,
    ShiftHandling,
};

#[test]
fn gaussian_joint_level_at_unit_radius() {
    let mut r = rng::stream(1, 0, 0);
    let lp = |x: f64, y: f64| -0.5 * (x * x + y * y);
    let samples: Vec<f64> = (0..200_000)
        .map(|_| lp(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)))
        .collect();
    let level = credible_level(&samples, lp(0.6, 0.8)).unwrap();
    let exact = 1.0 - (-0.5f64).exp();
    assert!((level - exact).abs() < 3e-3, "{level} vs {exact}");
}

#[test]
fn gaussian_marginal_level_at_one_sigma() {
    let mut r = rng::stream(2, 0, 0);
    let xs: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut r)).collect();
    let level = marginal_credible_level(&xs, 1.0).unwrap();
    assert!((level - 0.682_689_492).abs() < 3e-3, "{level}");
}

#[test]
fn ks_pvalues_are_roughly_uniform_under_the_null() {
    let mut r = rng::stream(3, 0, 0);
    let trials = 400;
    let mut rejected = 0;
    for _ in 0..trials {
        let xs: Vec<f64> = (0..200).map(|_| r.gen::<f64>()).collect();
        if kolmogorov_pvalue(ks_statistic(&xs), xs.len()) < 0.05 {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / trials as f64;
    assert!((0.02..=0.09).contains(&rate), "{rate}");
    let skewed: Vec<f64> = (0..200).map(|_| r.gen::<f64>().powi(2)).collect();
    assert!(kolmogorov_pvalue(ks_statistic(&skewed), 200) < 1e-6);
}

/// Second derivative of the exact log likelihood along each axis, by central
/// differences, as an independent estimate of the Fisher information.
fn fd_widths(p: &SignalParams, grid: &TimeGrid, sigma: f64) -> [f64; 2] {
    let h = 1e-4;
    let y0 = clean_signal(p, grid, 0).unwrap().values;
    let ll = |v: [f64; 2]| {
        let y = clean_signal(&SignalParams::new(p.kind(), v).unwrap(), grid, 0).unwrap().values;
        -0.5 * y.iter().zip(&y0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (sigma * sigma)
    };
    let v = p.values();
    std::array::from_fn(|k| {
        let (mut vp, mut vm) = (v, v);
        vp[k] += h;
        vm[k] -= h;
        let d2 = (ll(vp) - 2.0 * ll(v) + ll(vm)) / (h * h);
        1.0 / (-d2).sqrt()
    })
}

#[test]
fn crb_matches_curvature_of_likelihood() {
    for (kind, v) in [(SignalKind::Sho, [1.5, 0.2]), (SignalKind::Sho, [0.7, 0.5]), (SignalKind::Sg, [1.0, 0.3])] {
        let grid = TimeGrid::default_for(kind);
        let p = SignalParams::new(kind, v).unwrap();
        let a = crb_widths(&p, &grid, 0.4).unwrap().widths;
        let n = fd_widths(&p, &grid, 0.4);
        for k in 0..2 {
            assert!((a[k] - n[k]).abs() / n[k] < 1e-3, "{kind} {v:?} {k}: {} vs {}", a[k], n[k]);
        }
    }
}

#[test]
fn oracle_widths_approach_crb_at_high_snr() {
    let sigma = 0.05;
    for (kind, v) in [(SignalKind::Sho, [1.5, 0.2]), (SignalKind::Sg, [1.0, 0.3])] {
        let grid = TimeGrid::default_for(kind);
        let prior = ParamPrior::default_for(kind);
        let shift = ShiftPrior::default_for(&grid);
        let p = SignalParams::new(kind, v).unwrap();
        let crb = crb_widths(&p, &grid, sigma).unwrap().widths;
        let mut stream = rng::stream(7, 0, 0);
        let data = add_white_noise(&clean_signal(&p, &grid, 5).unwrap(), sigma, &mut stream).unwrap();
        let post = grid_posterior(&data, &prior, sigma, 128, ShiftHandling::Known(5), &shift).unwrap();
        let sd = post.std();
        let mean = post.mean();
        for k in 0..2 {
            assert!((sd[k] / crb[k] - 1.0).abs() < 0.2, "{kind} {k}: {} vs {}", sd[k], crb[k]);
            assert!((mean[k] - v[k]).abs() < 4.0 * crb[k]);
        }
    }
}

#[test]
fn marginalising_shift_never_narrows_the_posterior() {
    let kind = SignalKind::Sho;
    let grid = TimeGrid::default_for(kind);
    let prior = ParamPrior::default_for(kind);
    let shift = ShiftPrior::default_for(&grid);
    let p = SignalParams::new(kind, [1.2, 0.3]).unwrap();
    let mut stream = rng::stream(8, 0, 0);
    let data = add_white_noise(&clean_signal(&p, &grid, 20).unwrap(), 0.4, &mut stream).unwrap();
    let known = grid_posterior(&data, &prior, 0.4, 64, ShiftHandling::Known(20), &shift).unwrap();
    let marg = grid_posterior(&data, &prior, 0.4, 64, ShiftHandling::Marginalize, &shift).unwrap();
    let total: f64 = marg.mass.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    for k in 0..2 {
        assert!(marg.std()[k] >= 0.95 * known.std()[k]);
    }
}
