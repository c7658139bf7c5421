use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use symflow::diffcore::{gradcheck, ParamStore, Tensor};
use symflow::flow::{repeat_context, ConditionalMaf, FlowConfig, ParamScaler, Permutation};
use symflow::rng;

fn perturbed(cfg: FlowConfig, scaler: ParamScaler, seed: u64, scale: f64) -> (ConditionalMaf, ParamStore) {
    let flow = ConditionalMaf::new(cfg, scaler).unwrap();
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 0, 0);
    flow.init_params(&mut store, &mut r).unwrap();
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            let e: f64 = StandardNormal.sample(&mut r);
            *v += scale * e;
        }
    }
    (flow, store)
}

fn small(context: usize) -> FlowConfig {
    FlowConfig {
        n_transforms: 3,
        hidden: vec![16, 16],
        context_dim: context,
        permutation: Permutation::Swap,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inverse_undoes_forward(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, c in -2.0f64..2.0) {
        let (flow, store) = perturbed(small(2), ParamScaler::identity(), seed, 0.1);
        let ctx = repeat_context(&[c, -c], 1);
        let z = flow.forward_transform(&store, &[[a, b]], &ctx).unwrap()[0].0;
        let back = flow.inverse_transform(&store, &[z], &ctx).unwrap()[0];
        prop_assert!((back[0] - a).abs() < 1e-9 && (back[1] - b).abs() < 1e-9);
    }

    #[test]
    fn log_prob_is_finite_everywhere(seed in 0u64..1000, a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let (flow, store) = perturbed(small(1), ParamScaler::identity(), seed, 0.3);
        let lp = flow.log_prob(&store, &[[a, b]], &repeat_context(&[0.5], 1)).unwrap()[0];
        prop_assert!(lp.is_finite());
    }
}

#[test]
fn single_transform_is_autoregressive() {
    let cfg = FlowConfig {
        n_transforms: 1,
        hidden: vec![16, 16],
        context_dim: 2,
        permutation: Permutation::None,
    };
    let (flow, store) = perturbed(cfg, ParamScaler::identity(), 4, 0.3);
    let ctx = repeat_context(&[0.2, 0.7], 1);
    let base = flow.forward_transform(&store, &[[0.3, -0.4]], &ctx).unwrap()[0].0;
    let moved = flow.forward_transform(&store, &[[0.3, 1.9]], &ctx).unwrap()[0].0;
    assert_eq!(base[0], moved[0]);
    assert_ne!(base[1], moved[1]);
    let other = flow.forward_transform(&store, &[[1.1, -0.4]], &ctx).unwrap()[0].0;
    assert_ne!(base[1], other[1]);
}

/// Midpoint-rule integral of the density over a box wide enough to hold
/// essentially all of its mass.
fn grid_moments(flow: &ConditionalMaf, store: &ParamStore, ctx: &[f64], half: f64, n: usize) -> (f64, [f64; 2]) {
    let h = 2.0 * half / n as f64;
    let pts: Vec<[f64; 2]> = (0..n * n)
        .map(|k| [-half + (k / n) as f64 * h + h / 2.0, -half + (k % n) as f64 * h + h / 2.0])
        .collect();
    let lp = flow.log_prob(store, &pts, &repeat_context(ctx, pts.len())).unwrap();
    let mut mass = 0.0;
    let mut mean = [0.0; 2];
    for (p, l) in pts.iter().zip(&lp) {
        let w = l.exp() * h * h;
        mass += w;
        mean[0] += w * p[0];
        mean[1] += w * p[1];
    }
    (mass, mean)
}

#[test]
fn density_integrates_to_one() {
    for seed in 0..3 {
        let (flow, store) = perturbed(small(1), ParamScaler::identity(), seed, 0.08);
        let (mass, _) = grid_moments(&flow, &store, &[0.4], 9.0, 400);
        assert!((mass - 1.0).abs() < 1e-3, "seed {seed}: mass {mass}");
    }
    let scaler = ParamScaler::new([0.0, 1.0], [2.0, 5.0]).unwrap();
    let (flow, store) = perturbed(small(1), scaler, 9, 0.08);
    let h = 0.02;
    let pts: Vec<[f64; 2]> = (0..900 * 900)
        .map(|k| [-8.0 + (k / 900) as f64 * h + h / 2.0, -15.0 + (k % 900) as f64 * h * 2.0 + h])
        .collect();
    let lp = flow.log_prob(&store, &pts, &repeat_context(&[-0.3], pts.len())).unwrap();
    let mass: f64 = lp.iter().map(|l| l.exp() * h * 2.0 * h).sum();
    assert!((mass - 1.0).abs() < 1e-3, "scaled mass {mass}");
}

#[test]
fn sampling_matches_density_moments() {
    let (flow, store) = perturbed(small(1), ParamScaler::identity(), 2, 0.08);
    let (mass, mean) = grid_moments(&flow, &store, &[0.4], 9.0, 400);
    let mut r = rng::stream(5, 0, 0);
    let n = 40_000;
    let z: Vec<[f64; 2]> = (0..n)
        .map(|_| [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)])
        .collect();
    let xs = flow.inverse_transform(&store, &z, &repeat_context(&[0.4], n)).unwrap();
    for k in 0..2 {
        let m = xs.iter().map(|x| x[k]).sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let target = mean[k] / mass;
        assert!((m - target).abs() < 4.0 * sd / (n as f64).sqrt(), "dim {k}: {m} vs {target}");
    }
}

#[test]
fn log_prob_gradients_match_finite_differences() {
    let (flow, store) = perturbed(small(2), ParamScaler::identity(), 6, 0.2);
    let theta = Tensor::new(vec![3, 2], vec![0.3, -0.2, 1.1, 0.5, -0.7, 0.9]).unwrap();
    let ctx = Tensor::new(vec![3, 2], vec![0.1, 0.4, -0.6, 0.2, 0.8, -0.3]).unwrap();
    let report = gradcheck(&[("theta", theta), ("ctx", ctx)], 1e-5, |g, v| {
        let lp = flow.log_prob_graph(g, &store, v[0], v[1])?;
        g.sum(lp)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn identity_flow_is_standard_normal() {
    let flow = ConditionalMaf::new(small(1), ParamScaler::identity()).unwrap();
    let mut store = ParamStore::new();
    flow.init_params(&mut store, &mut rng::stream(0, 0, 0)).unwrap();
    let pts = [[0.0, 0.0], [1.0, -2.0], [0.5, 3.0]];
    let lp = flow.log_prob(&store, &pts, &repeat_context(&[1.0], 3)).unwrap();
    for (p, l) in pts.iter().zip(lp) {
        let expect = -(2.0 * std::f64::consts::PI).ln() - 0.5 * (p[0] * p[0] + p[1] * p[1]);
        assert!((l - expect).abs() < 1e-14);
    }
}
