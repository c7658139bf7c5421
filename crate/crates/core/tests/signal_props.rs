use proptest::prelude::*;
use symflow::signal::{
    clean_signal, generate_dataset, generate_record, DatasetSpec, ParamPrior, SignalKind, SignalParams, TimeGrid,
};

fn params_in(kind: SignalKind) -> impl Strategy<Value = SignalParams> {
    let b = ParamPrior::default_for(kind).bounds;
    (b[0][0]..b[0][1], b[1][0]..b[1][1]).prop_map(move |(a, c)| SignalParams::new(kind, [a, c]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sho_stays_under_envelope(p in params_in(SignalKind::Sho), k in 0usize..64) {
        let grid = TimeGrid::default_for(SignalKind::Sho);
        let y = clean_signal(&p, &grid, k).unwrap();
        let [w, b] = p.values();
        for (i, v) in y.values.iter().enumerate() {
            let t = grid.time(i as isize - k as isize) - grid.t_start;
            let env = if t < 0.0 { 0.0 } else { (-b * w * t).exp() };
            prop_assert!(v.abs() <= env + 1e-12);
        }
    }

    #[test]
    fn sg_stays_under_envelope(p in params_in(SignalKind::Sg), k in 0usize..128) {
        let grid = TimeGrid::default_for(SignalKind::Sg);
        let y = clean_signal(&p, &grid, k).unwrap();
        let [_, tau] = p.values();
        for (i, v) in y.values.iter().enumerate() {
            let t = grid.time(i as isize - k as isize);
            prop_assert!(v.abs() <= (-(t * t) / (tau * tau)).exp() + 1e-12);
        }
    }

    #[test]
    fn shifting_translates_samples(p in params_in(SignalKind::Sho), k in 0usize..64) {
        let grid = TimeGrid::default_for(SignalKind::Sho);
        let base = clean_signal(&p, &grid, 0).unwrap();
        let moved = clean_signal(&p, &grid, k).unwrap();
        for i in k..grid.n_samples {
            prop_assert!((moved.values[i] - base.values[i - k]).abs() < 1e-12);
        }
        for v in &moved.values[..k] {
            prop_assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn records_do_not_depend_on_dataset_size(seed in any::<u64>(), i in 0usize..8) {
        let spec = DatasetSpec::defaults(SignalKind::Sg, 8, seed, true);
        let ds = generate_dataset(&spec).unwrap();
        let mut bigger = spec.clone();
        bigger.n = 16;
        prop_assert_eq!(&ds.records[i], &generate_record(&bigger, i).unwrap());
    }
}

#[test]
fn datasets_are_deterministic() {
    let spec = DatasetSpec::defaults(SignalKind::Sho, 32, 11, true);
    assert_eq!(generate_dataset(&spec).unwrap().records, generate_dataset(&spec).unwrap().records);
    let mut other = spec.clone();
    other.seed = 12;
    assert_ne!(generate_dataset(&spec).unwrap().records, generate_dataset(&other).unwrap().records);
}

#[test]
fn noise_has_requested_level() {
    let spec = DatasetSpec::defaults(SignalKind::Sho, 64, 3, false);
    let ds = generate_dataset(&spec).unwrap();
    let mut ss = 0.0;
    let mut n = 0.0;
    for r in &ds.records {
        let k = spec.grid.shift_steps(r.shift).unwrap() as usize;
        let clean = clean_signal(&r.params, &spec.grid, k).unwrap();
        for (a, b) in r.data.values.iter().zip(&clean.values) {
            ss += (a - b) * (a - b);
            n += 1.0;
        }
    }
    let sd = (ss / n).sqrt();
    assert!((sd - spec.sigma).abs() < 0.01, "{sd}");
}
