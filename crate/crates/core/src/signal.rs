//! Damped-oscillator and sine-Gaussian time series, priors and dataset
//! generation.
//!
//! Shifts are always whole numbers of samples. A waveform shifted by `k`
//! samples is evaluated at `grid.time(i - k)`, which makes time-shift
//! equivariance exact in floating point.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Damped simple harmonic oscillator, parameters `(omega0, beta)`.
    Sho,
    /// Sine-Gaussian pulse, parameters `(f0, tau)`.
    Sg,
}

impl SignalKind {
    pub fn param_names(self) -> [&'static str; 2] {
        match self {
            SignalKind::Sho => ["omega0", "beta"],
            SignalKind::Sg => ["f0", "tau"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sho" => Ok(SignalKind::Sho),
            "sg" => Ok(SignalKind::Sg),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Sho => "sho",
            SignalKind::Sg => "sg",
        })
    }
}

/// Intrinsic parameters of one signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalParams {
    Sho { omega0: f64, beta: f64 },
    Sg { f0: f64, tau: f64 },
}

impl SignalParams {
    pub fn new(kind: SignalKind, values: [f64; 2]) -> Result<Self> {
        let p = match kind {
            SignalKind::Sho => SignalParams::Sho {
                omega0: values[0],
                beta: values[1],
            },
            SignalKind::Sg => SignalParams::Sg {
                f0: values[0],
                tau: values[1],
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn kind(&self) -> SignalKind {
        match self {
            SignalParams::Sho { .. } => SignalKind::Sho,
            SignalParams::Sg { .. } => SignalKind::Sg,
        }
    }

    pub fn values(&self) -> [f64; 2] {
        match *self {
            SignalParams::Sho { omega0, beta } => [omega0, beta],
            SignalParams::Sg { f0, tau } => [f0, tau],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SignalParams::Sho { omega0, beta } => {
                omega0.is_finite() && omega0 > 0.0 && (0.0..1.0).contains(&beta)
            }
            SignalParams::Sg { f0, tau } => {
                f0.is_finite() && tau.is_finite() && f0 > 0.0 && tau > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid signal parameters {self:?}")))
        }
    }

    /// Noise-free amplitude at local time `t` (time since onset for SHO,
    /// time from pulse centre for SG).
    pub fn amplitude(&self, t: f64) -> f64 {
        match *self {
            SignalParams::Sho { omega0, beta } => {
                if t < 0.0 {
                    0.0
                } else {
                    (-beta * omega0 * t).exp() * (omega0 * t * (1.0 - beta * beta).sqrt()).cos()
                }
            }
            SignalParams::Sg { f0, tau } => {
                (-(t * t) / (tau * tau)).exp() * (2.0 * PI * f0 * t).sin()
            }
        }
    }
}

/// Uniform sampling grid `t_i = t_start + i * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_samples: usize,
    pub dt: f64,
    pub t_start: f64,
}

impl TimeGrid {
    pub fn new(n_samples: usize, dt: f64, t_start: f64) -> Result<Self> {
        let g = Self {
            n_samples,
            dt,
            t_start,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || !(self.dt > 0.0) || !self.dt.is_finite() || !self.t_start.is_finite()
        {
            return Err(Error::Config(format!("invalid time grid {self:?}")));
        }
        Ok(())
    }

    /// Time at a possibly negative sample index.
    pub fn time(&self, i: isize) -> f64 {
        self.t_start + i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        self.n_samples as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples as isize).map(|i| self.time(i)).collect()
    }

    /// Default grid per model: 256 x 0.04 from t = 0 for SHO, 512 x 0.005
    /// centred on zero for SG.
    pub fn default_for(kind: SignalKind) -> Self {
        match kind {
            SignalKind::Sho => Self {
                n_samples: 256,
                dt: 0.04,
                t_start: 0.0,
            },
            SignalKind::Sg => Self {
                n_samples: 512,
                dt: 0.005,
                t_start: -1.28,
            },
        }
    }

    /// Whole samples in `shift`, if `shift` is (to rounding) a multiple of `dt`.
    pub fn shift_steps(&self, shift: f64) -> Option<isize> {
        let k = (shift / self.dt).round();
        if (k * self.dt - shift).abs() <= 1e-9 * self.dt.max(shift.abs()) {
            Some(k as isize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    /// Standard deviation of the added white noise; zero for clean signals.
    pub sigma: f64,
}

impl TimeSeries {
    pub fn new(grid: TimeGrid, values: Vec<f64>, sigma: f64) -> Result<Self> {
        if values.len() != grid.n_samples {
            return Err(Error::Shape(format!(
                "series has {} values, grid {}",
                values.len(),
                grid.n_samples
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("time series"));
        }
        Ok(Self {
            grid,
            values,
            sigma,
        })
    }
}

/// Independent uniform prior per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPrior {
    pub kind: SignalKind,
    pub bounds: [[f64; 2]; 2],
}

impl ParamPrior {
    pub fn new(kind: SignalKind, bounds: [[f64; 2]; 2]) -> Result<Self> {
        let p = Self { kind, bounds };
        p.validate()?;
        Ok(p)
    }

    pub fn default_for(kind: SignalKind) -> Self {
        match kind {
            SignalKind::Sho => Self {
                kind,
                bounds: [[0.5, 3.0], [0.05, 0.9]],
            },
            SignalKind::Sg => Self {
                kind,
                bounds: [[0.2, 1.5], [0.1, 1.0]],
            },
        }
    }

    /// Bounds must be ordered (equal bounds give a point mass) and both
    /// corners must be valid parameters.
    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.bounds {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid prior bounds {:?}", self.bounds)));
            }
        }
        SignalParams::new(self.kind, [self.bounds[0][0], self.bounds[1][0]])
            .and_then(|_| SignalParams::new(self.kind, [self.bounds[0][1], self.bounds[1][1]]))
            .map_err(|_| Error::Config(format!("prior {:?} admits invalid parameters", self.bounds)))?;
        Ok(())
    }

    pub fn contains(&self, values: [f64; 2]) -> bool {
        values
            .iter()
            .zip(&self.bounds)
            .all(|(v, [lo, hi])| (*lo..=*hi).contains(v))
    }

    pub fn widths(&self) -> [f64; 2] {
        [
            self.bounds[0][1] - self.bounds[0][0],
            self.bounds[1][1] - self.bounds[1][0],
        ]
    }
}

/// Uniform prior over whole-sample shifts `0..=max_steps(grid)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftPrior {
    pub shift_max: f64,
}

impl ShiftPrior {
    /// A quarter of the grid duration.
    pub fn default_for(grid: &TimeGrid) -> Self {
        Self {
            shift_max: 0.25 * grid.duration(),
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(self.shift_max >= 0.0) || self.shift_max >= grid.duration() {
            return Err(Error::Config(format!(
                "shift_max {} must lie in [0, {})",
                self.shift_max,
                grid.duration()
            )));
        }
        Ok(())
    }

    pub fn max_steps(&self, grid: &TimeGrid) -> usize {
        (self.shift_max / grid.dt + 1e-9).floor() as usize
    }

    pub fn sample_steps<R: Rng>(&self, grid: &TimeGrid, rng: &mut R) -> usize {
        rng.gen_range(0..=self.max_steps(grid))
    }
}

fn waveform(params: &SignalParams, grid: &TimeGrid, shift: f64) -> Result<TimeSeries> {
    params.validate()?;
    grid.validate()?;
    let values = match grid.shift_steps(shift) {
        Some(k) => (0..grid.n_samples as isize)
            .map(|i| params.amplitude(grid.time(i - k)))
            .collect(),
        None => (0..grid.n_samples as isize)
            .map(|i| params.amplitude(grid.time(i) - shift))
            .collect(),
    };
    TimeSeries::new(*grid, values, 0.0)
}

/// Damped oscillator started at `t_shift`; zero before the start.
pub fn sho_waveform(params: &SignalParams, grid: &TimeGrid, t_shift: f64) -> Result<TimeSeries> {
    if params.kind() != SignalKind::Sho {
        return Err(Error::Domain("sho_waveform needs SHO parameters".into()));
    }
    if !t_shift.is_finite() || t_shift < 0.0 {
        return Err(Error::Domain(format!("shift {t_shift} must be non-negative")));
    }
    waveform(params, grid, t_shift)
}

/// Sine-Gaussian pulse centred at `t_center`.
pub fn sg_waveform(params: &SignalParams, grid: &TimeGrid, t_center: f64) -> Result<TimeSeries> {
    if params.kind() != SignalKind::Sg {
        return Err(Error::Domain("sg_waveform needs SG parameters".into()));
    }
    let end = grid.time(grid.n_samples as isize - 1);
    if !(grid.t_start..=end).contains(&t_center) {
        return Err(Error::Domain(format!(
            "pulse centre {t_center} outside [{}, {end}]",
            grid.t_start
        )));
    }
    waveform(params, grid, t_center)
}

/// Clean signal for either model with the shift counted in samples from the
/// reference arrival (onset at `t = 0` for SHO, centre at `t = 0` for SG).
pub fn clean_signal(params: &SignalParams, grid: &TimeGrid, shift_steps: usize) -> Result<TimeSeries> {
    let shift = shift_steps as f64 * grid.dt;
    match params.kind() {
        SignalKind::Sho => sho_waveform(params, grid, shift),
        SignalKind::Sg => sg_waveform(params, grid, shift),
    }
}

pub fn add_white_noise(ts: &TimeSeries, sigma: f64, stream: &mut Stream) -> Result<TimeSeries> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise sigma {sigma} must be >= 0")));
    }
    let values = if sigma == 0.0 {
        ts.values.clone()
    } else {
        ts.values
            .iter()
            .map(|v| v + sigma * stream.sample::<f64, _>(StandardNormal))
            .collect()
    };
    TimeSeries::new(ts.grid, values, sigma)
}

pub fn sample_prior(prior: &ParamPrior, stream: &mut Stream) -> Result<SignalParams> {
    prior.validate()?;
    let mut v = [0.0; 2];
    for (slot, [lo, hi]) in v.iter_mut().zip(prior.bounds) {
        *slot = if lo == hi { lo } else { stream.gen_range(lo..hi) };
    }
    SignalParams::new(prior.kind, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub params: SignalParams,
    /// Shift of `data` (or of `data_aug` for SSL pairs), in time units.
    pub shift: f64,
    pub data: TimeSeries,
    pub data_aug: Option<TimeSeries>,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: SignalKind,
    pub grid: TimeGrid,
    pub prior: ParamPrior,
    pub shift_prior: ShiftPrior,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
    pub ssl_pairs: bool,
}

impl DatasetSpec {
    /// Defaults for `kind` with the given size, seed and pairing.
    pub fn defaults(kind: SignalKind, n: usize, seed: u64, ssl_pairs: bool) -> Self {
        let grid = TimeGrid::default_for(kind);
        Self {
            kind,
            grid,
            prior: ParamPrior::default_for(kind),
            shift_prior: ShiftPrior::default_for(&grid),
            sigma: 0.4,
            n,
            seed,
            ssl_pairs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.prior.validate()?;
        self.shift_prior.validate(&self.grid)?;
        if self.prior.kind != self.kind {
            return Err(Error::Config("prior kind differs from dataset kind".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("dataset needs at least one record".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.sigma)));
        }
        if self.kind == SignalKind::Sg {
            let end = self.grid.time(self.grid.n_samples as isize - 1);
            if self.grid.t_start > 0.0 || self.shift_prior.shift_max > end {
                return Err(Error::Config("SG pulse centre range leaves the grid".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn kind(&self) -> SignalKind {
        self.spec.kind
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.spec.grid
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

const VIEW_PARAMS: u64 = 0;
const VIEW_NOISE: u64 = 1;
const VIEW_NOISE_AUG: u64 = 2;

/// Record `index` of the dataset described by `spec`. Each record draws from
/// its own streams, so this is independent of every other record.
pub fn generate_record(spec: &DatasetSpec, index: usize) -> Result<Record> {
    let seed = rng::derive_seed(spec.seed, "dataset");
    let mut draw = rng::stream(seed, index as u64, VIEW_PARAMS);
    let params = sample_prior(&spec.prior, &mut draw)?;
    let steps = spec.shift_prior.sample_steps(&spec.grid, &mut draw);
    let mut noise = rng::stream(seed, index as u64, VIEW_NOISE);
    if spec.ssl_pairs {
        let reference = clean_signal(&params, &spec.grid, 0)?;
        let shifted = clean_signal(&params, &spec.grid, steps)?;
        let mut noise_aug = rng::stream(seed, index as u64, VIEW_NOISE_AUG);
        Ok(Record {
            params,
            shift: steps as f64 * spec.grid.dt,
            data: add_white_noise(&reference, spec.sigma, &mut noise)?,
            data_aug: Some(add_white_noise(&shifted, spec.sigma, &mut noise_aug)?),
        })
    } else {
        let clean = clean_signal(&params, &spec.grid, steps)?;
        Ok(Record {
            params,
            shift: steps as f64 * spec.grid.dt,
            data: add_white_noise(&clean, spec.sigma, &mut noise)?,
            data_aug: None,
        })
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let records = (0..spec.n)
        .map(|i| generate_record(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sho(omega0: f64, beta: f64) -> SignalParams {
        SignalParams::new(SignalKind::Sho, [omega0, beta]).unwrap()
    }

    fn sg(f0: f64, tau: f64) -> SignalParams {
        SignalParams::new(SignalKind::Sg, [f0, tau]).unwrap()
    }

    #[test]
    fn sho_starts_at_one() {
        let grid = TimeGrid::new(8, 0.1, 0.0).unwrap();
        let ts = sho_waveform(&sho(1.5, 0.2), &grid, 0.0).unwrap();
        assert_eq!(ts.values[0], 1.0);
        assert_eq!(ts.sigma, 0.0);
    }

    #[test]
    fn undamped_sho_is_a_cosine() {
        let grid = TimeGrid::new(50, 0.13, 0.0).unwrap();
        let ts = sho_waveform(&sho(2.3, 0.0), &grid, 0.0).unwrap();
        for (i, v) in ts.values.iter().enumerate() {
            assert!((v - (2.3 * grid.time(i as isize)).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn sho_reference_value() {
        // e^{-0.3} cos(1.5 sqrt(0.96)) = 0.0747710 (evaluated independently)
        let grid = TimeGrid::new(2, 1.0, 0.0).unwrap();
        let ts = sho_waveform(&sho(1.5, 0.2), &grid, 0.0).unwrap();
        assert!((ts.values[1] - 0.07477).abs() < 5e-6, "{}", ts.values[1]);
    }

    #[test]
    fn sho_is_zero_before_onset() {
        let grid = TimeGrid::new(20, 0.1, 0.0).unwrap();
        let ts = sho_waveform(&sho(1.0, 0.1), &grid, 0.5).unwrap();
        assert!(ts.values[..5].iter().all(|&v| v == 0.0));
        assert_eq!(ts.values[5], 1.0);
    }

    #[test]
    fn invalid_parameters_are_domain_errors() {
        assert!(matches!(
            SignalParams::new(SignalKind::Sho, [1.0, 1.0]),
            Err(Error::Domain(_))
        ));
        assert!(SignalParams::new(SignalKind::Sho, [0.0, 0.1]).is_err());
        assert!(SignalParams::new(SignalKind::Sg, [0.7, 0.0]).is_err());
        assert!(SignalParams::new(SignalKind::Sg, [-0.7, 0.3]).is_err());
    }

    #[test]
    fn sg_vanishes_at_centre_and_far_away() {
        let p = sg(0.7, 0.3);
        assert_eq!(p.amplitude(0.0), 0.0);
        assert!(p.amplitude(10.0 * 0.3).abs() < 1e-40);
        // e^{-0.25} sin(2 pi 0.105) = 0.4773325 (evaluated independently)
        assert!((p.amplitude(0.15) - 0.477332).abs() < 5e-6, "{}", p.amplitude(0.15));
    }

    #[test]
    fn sg_centre_must_lie_on_grid() {
        let grid = TimeGrid::default_for(SignalKind::Sg);
        assert!(sg_waveform(&sg(0.7, 0.3), &grid, 5.0).is_err());
        assert!(sg_waveform(&sg(0.7, 0.3), &grid, 0.2).is_ok());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let grid = TimeGrid::default_for(SignalKind::Sho);
        let ts = sho_waveform(&sho(1.5, 0.2), &grid, 0.0).unwrap();
        let mut s = rng::stream(1, 0, 0);
        assert_eq!(add_white_noise(&ts, 0.0, &mut s).unwrap().values, ts.values);
        assert!(add_white_noise(&ts, -0.1, &mut s).is_err());
    }

    #[test]
    fn noise_is_reproducible_and_has_the_right_scale() {
        let grid = TimeGrid::new(4096, 0.01, 0.0).unwrap();
        let clean = TimeSeries::new(grid, vec![0.0; 4096], 0.0).unwrap();
        let a = add_white_noise(&clean, 0.4, &mut rng::stream(9, 0, 0)).unwrap();
        let b = add_white_noise(&clean, 0.4, &mut rng::stream(9, 0, 0)).unwrap();
        assert_eq!(a, b);
        let n = a.values.len() as f64;
        let mean = a.values.iter().sum::<f64>() / n;
        let std = (a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.38..=0.42).contains(&std), "{std}");
    }

    #[test]
    fn degenerate_prior_is_a_point_mass() {
        let prior = ParamPrior::new(SignalKind::Sho, [[1.2, 1.2], [0.3, 0.3]]).unwrap();
        let p = sample_prior(&prior, &mut rng::stream(0, 0, 0)).unwrap();
        assert_eq!(p.values(), [1.2, 0.3]);
    }

    #[test]
    fn prior_mean_matches_midpoint() {
        let prior = ParamPrior::default_for(SignalKind::Sho);
        let mut s = rng::stream(11, 0, 0);
        let n = 10_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let v = sample_prior(&prior, &mut s).unwrap().values();
            assert!(prior.contains(v));
            sums[0] += v[0];
            sums[1] += v[1];
        }
        for j in 0..2 {
            let [lo, hi] = prior.bounds[j];
            let tol = 3.0 * (hi - lo) / (12.0 * n as f64).sqrt();
            assert!((sums[j] / n as f64 - 0.5 * (lo + hi)).abs() < tol);
        }
    }

    #[test]
    fn ssl_pair_without_noise_or_shift_is_identical() {
        let mut spec = DatasetSpec::defaults(SignalKind::Sho, 1, 4, true);
        spec.sigma = 0.0;
        spec.shift_prior.shift_max = 0.0;
        let ds = generate_dataset(&spec).unwrap();
        let r = &ds.records[0];
        assert_eq!(r.data.values, r.data_aug.as_ref().unwrap().values);
    }

    #[test]
    fn shift_max_beyond_duration_is_a_config_error() {
        let mut spec = DatasetSpec::defaults(SignalKind::Sho, 4, 0, false);
        spec.shift_prior.shift_max = spec.grid.duration();
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn sg_dataset_records_respect_bounds() {
        let spec = DatasetSpec::defaults(SignalKind::Sg, 1000, 21, false);
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 1000);
        for r in &ds.records {
            assert!(spec.prior.contains(r.params.values()));
            assert!((0.0..=spec.shift_prior.shift_max).contains(&r.shift));
            assert!(r.data_aug.is_none());
            assert_eq!(r.data.values.len(), 512);
        }
    }

    #[test]
    fn ssl_views_have_independent_noise() {
        let mut spec = DatasetSpec::defaults(SignalKind::Sho, 1, 8, true);
        spec.grid = TimeGrid::new(512, 0.02, 0.0).unwrap();
        spec.shift_prior = ShiftPrior::default_for(&spec.grid);
        let ds = generate_dataset(&spec).unwrap();
        let r = &ds.records[0];
        let clean = clean_signal(&r.params, &spec.grid, 0).unwrap();
        let steps = spec.grid.shift_steps(r.shift).unwrap() as usize;
        let clean_aug = clean_signal(&r.params, &spec.grid, steps).unwrap();
        let n1: Vec<f64> = r.data.values.iter().zip(&clean.values).map(|(a, b)| a - b).collect();
        let n2: Vec<f64> = r
            .data_aug
            .as_ref()
            .unwrap()
            .values
            .iter()
            .zip(&clean_aug.values)
            .map(|(a, b)| a - b)
            .collect();
        let m1 = n1.iter().sum::<f64>() / 512.0;
        let m2 = n2.iter().sum::<f64>() / 512.0;
        let cov: f64 = n1.iter().zip(&n2).map(|(a, b)| (a - m1) * (b - m2)).sum();
        let v1: f64 = n1.iter().map(|a| (a - m1).powi(2)).sum();
        let v2: f64 = n2.iter().map(|b| (b - m2).powi(2)).sum();
        assert!((cov / (v1 * v2).sqrt()).abs() < 0.1);
    }
}
