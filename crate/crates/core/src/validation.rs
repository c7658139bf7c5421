//! Reference machinery: exhaustive grid posterior, Cramér-Rao widths,
//! credible levels and P-P calibration curves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::PosteriorModel;
use crate::io::write_f64s;
use crate::rng::{self, Stream};
use crate::signal::{ParamPrior, Record, ShiftPrior, SignalKind, SignalParams, TimeGrid, TimeSeries};

pub const MIN_GRID_RESOLUTION: usize = 64;
pub const MIN_CREDIBLE_SAMPLES: usize = 100;
pub const MIN_PP_LEVELS: usize = 50;
pub const GRID_FORMAT: &str = "symflow-grid";

/// How the oracle treats the arrival time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftHandling {
    /// Shift known exactly, in whole samples.
    Known(usize),
    /// Uniform over the whole-sample shift grid of the prior.
    Marginalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPosterior {
    pub kind: SignalKind,
    /// Cell centres per parameter.
    pub axes: [Vec<f64>; 2],
    /// Cell widths per parameter.
    pub steps: [f64; 2],
    /// Normalised mass, row-major with the first parameter slowest.
    pub mass: Vec<f64>,
}

impl GridPosterior {
    pub fn resolution(&self) -> [usize; 2] {
        [self.axes[0].len(), self.axes[1].len()]
    }

    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let [n0, n1] = self.resolution();
        match k {
            0 => (0..n0).map(|i| self.mass[i * n1..(i + 1) * n1].iter().sum()).collect(),
            _ => (0..n1).map(|j| (0..n0).map(|i| self.mass[i * n1 + j]).sum()).collect(),
        }
    }

    pub fn mean(&self) -> [f64; 2] {
        std::array::from_fn(|k| {
            self.marginal(k)
                .iter()
                .zip(&self.axes[k])
                .map(|(m, x)| m * x)
                .sum()
        })
    }

    /// Marginal standard deviations, with the within-cell variance of a
    /// uniform cell added.
    pub fn std(&self) -> [f64; 2] {
        let mean = self.mean();
        std::array::from_fn(|k| {
            let v: f64 = self
                .marginal(k)
                .iter()
                .zip(&self.axes[k])
                .map(|(m, x)| m * (x - mean[k]).powi(2))
                .sum();
            (v + self.steps[k].powi(2) / 12.0).sqrt()
        })
    }

    pub fn argmax(&self) -> [f64; 2] {
        let n1 = self.axes[1].len();
        let best = self
            .mass
            .iter()
            .enumerate()
            .fold(0, |b, (i, m)| if *m > self.mass[b] { i } else { b });
        [self.axes[0][best / n1], self.axes[1][best % n1]]
    }

    /// True if `theta` lies inside cell `(i, j)`.
    pub fn cell_contains(&self, i: usize, j: usize, theta: [f64; 2]) -> bool {
        let c = [self.axes[0][i], self.axes[1][j]];
        (0..2).all(|k| (theta[k] - c[k]).abs() <= 0.5 * self.steps[k] * (1.0 + 1e-12))
    }

    pub fn argmax_index(&self) -> (usize, usize) {
        let n1 = self.axes[1].len();
        let best = self
            .mass
            .iter()
            .enumerate()
            .fold(0, |b, (i, m)| if *m > self.mass[b] { i } else { b });
        (best / n1, best % n1)
    }

    /// One JSON header line (kind, axes) followed by the mass as
    /// little-endian f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::json!({
            "format": GRID_FORMAT,
            "format_version": 1,
            "kind": self.kind,
            "axes": self.axes,
            "steps": self.steps,
        });
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        write_f64s(w, &self.mass)?;
        Ok(())
    }
}

/// Log-likelihood values on a grid, max-subtracted, exponentiated and
/// normalised.
pub fn normalize_log_weights(logw: &[f64]) -> Result<Vec<f64>> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("grid log-likelihood"));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gaussian log-likelihood (up to a constant) of `data` for one parameter
/// point, over the allowed shifts.
struct LikelihoodEval<'a> {
    data: &'a TimeSeries,
    grid: TimeGrid,
    shifts: Vec<usize>,
    inv_two_var: f64,
}

impl LikelihoodEval<'_> {
    fn log_like(&self, params: &SignalParams, tmpl: &mut Vec<f64>, per_shift: &mut Vec<f64>) -> f64 {
        let n = self.grid.n_samples;
        let k_max = *self.shifts.iter().max().unwrap_or(&0);
        // tmpl[j + k_max] holds the waveform at grid index j, j in [-k_max, n).
        tmpl.clear();
        tmpl.extend((-(k_max as isize)..n as isize).map(|j| params.amplitude(self.grid.time(j))));
        per_shift.clear();
        let y = &self.data.values;
        for &k in &self.shifts {
            let seg = &tmpl[k_max - k..k_max - k + n];
            let mut r = 0.0;
            for (a, b) in y.iter().zip(seg) {
                let d = a - b;
                r += d * d;
            }
            per_shift.push(-r * self.inv_two_var);
        }
        if per_shift.len() == 1 {
            per_shift[0]
        } else {
            log_sum_exp(per_shift) - (per_shift.len() as f64).ln()
        }
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> (Vec<f64>, f64) {
    let step = (hi - lo) / n as f64;
    ((0..n).map(|i| lo + (i as f64 + 0.5) * step).collect(), step)
}

fn grid_on_box(
    eval: &LikelihoodEval,
    kind: SignalKind,
    bounds: [[f64; 2]; 2],
    res: usize,
) -> Result<GridPosterior> {
    let (a0, s0) = axis(bounds[0][0], bounds[0][1], res);
    let (a1, s1) = axis(bounds[1][0], bounds[1][1], res);
    let mut logw = Vec::with_capacity(res * res);
    let (mut tmpl, mut per_shift) = (Vec::new(), Vec::new());
    for &x0 in &a0 {
        for &x1 in &a1 {
            let p = SignalParams::new(kind, [x0, x1])?;
            logw.push(eval.log_like(&p, &mut tmpl, &mut per_shift));
        }
    }
    Ok(GridPosterior {
        kind,
        axes: [a0, a1],
        steps: [s0, s1],
        mass: normalize_log_weights(&logw)?,
    })
}

/// Exhaustive posterior under flat priors. A coarse pass over the prior box
/// locates the mass; the requested resolution is then spent on a box of
/// eight coarse standard deviations around it (clipped to the prior).
pub fn grid_posterior(
    data: &TimeSeries,
    prior: &ParamPrior,
    sigma: f64,
    resolution: usize,
    shift: ShiftHandling,
    shift_prior: &ShiftPrior,
) -> Result<GridPosterior> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("likelihood sigma {sigma} must be > 0")));
    }
    if resolution < MIN_GRID_RESOLUTION {
        return Err(Error::Domain(format!(
            "grid resolution {resolution} below {MIN_GRID_RESOLUTION}"
        )));
    }
    prior.validate()?;
    if prior.bounds.iter().any(|[lo, hi]| lo >= hi) {
        return Err(Error::Domain("grid posterior needs a prior box of positive width".into()));
    }
    let grid = data.grid;
    let shifts = match shift {
        ShiftHandling::Known(k) => vec![k],
        ShiftHandling::Marginalize => {
            shift_prior.validate(&grid)?;
            (0..=shift_prior.max_steps(&grid)).collect()
        }
    };
    if shifts.iter().any(|&k| k >= grid.n_samples) {
        return Err(Error::Domain("shift exceeds the series length".into()));
    }
    let eval = LikelihoodEval {
        data,
        grid,
        shifts,
        inv_two_var: 0.5 / (sigma * sigma),
    };
    let coarse = grid_on_box(&eval, prior.kind, prior.bounds, MIN_GRID_RESOLUTION)?;
    let (m, s) = (coarse.mean(), coarse.std());
    let fine_box: [[f64; 2]; 2] = std::array::from_fn(|k| {
        let half = (8.0 * s[k]).max(2.0 * coarse.steps[k]);
        [
            (m[k] - half).max(prior.bounds[k][0]),
            (m[k] + half).min(prior.bounds[k][1]),
        ]
    });
    grid_on_box(&eval, prior.kind, fine_box, resolution)
}

/// Cramér-Rao one-sigma widths for the two parameters of a signal model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrbWidths {
    pub kind: SignalKind,
    pub widths: [f64; 2],
}

/// Closed-form widths from the quadratic expansion of the Gaussian
/// likelihood, summed over the grid times at the reference arrival.
pub fn crb_widths(params: &SignalParams, grid: &TimeGrid, sigma: f64) -> Result<CrbWidths> {
    params.validate()?;
    grid.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma {sigma} must be > 0")));
    }
    let ts = grid.times();
    let widths = match *params {
        SignalParams::Sho { omega0, beta } => {
            if beta >= 1.0 {
                return Err(Error::Domain("damping ratio must be below 1".into()));
            }
            let s = (1.0 - beta * beta).sqrt();
            let (mut f_w, mut f_b) = (0.0, 0.0);
            for &t in ts.iter().filter(|t| **t >= 0.0) {
                let e = (-2.0 * beta * omega0 * t).exp();
                let (sn, cs) = (omega0 * t * s).sin_cos();
                f_w += t * t * e * (s * sn + beta * cs).powi(2);
                f_b += omega0 * omega0 * t * t * e * (beta * sn / s - cs).powi(2);
            }
            [sigma / f_w.sqrt(), sigma / f_b.sqrt()]
        }
        SignalParams::Sg { f0, tau } => {
            let (mut f_f, mut f_t) = (0.0, 0.0);
            for &t in &ts {
                let e = (-2.0 * t * t / (tau * tau)).exp();
                let (sn, cs) = (2.0 * std::f64::consts::PI * f0 * t).sin_cos();
                f_f += 4.0 * std::f64::consts::PI.powi(2) * t * t * e * cs * cs;
                f_t += 4.0 * t.powi(4) * e * sn * sn;
            }
            [sigma / f_f.sqrt(), sigma * tau.powi(3) / f_t.sqrt()]
        }
    };
    if widths.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::Domain(format!("degenerate Fisher information for {params:?}")));
    }
    Ok(CrbWidths {
        kind: params.kind(),
        widths,
    })
}

/// Fraction of posterior samples denser than the truth: the mass of the
/// smallest highest-density region that encloses the truth.
pub fn credible_level(sample_log_probs: &[f64], truth_log_prob: f64) -> Result<f64> {
    if sample_log_probs.len() < MIN_CREDIBLE_SAMPLES {
        return Err(Error::Domain(format!(
            "credible level needs >= {MIN_CREDIBLE_SAMPLES} samples, got {}",
            sample_log_probs.len()
        )));
    }
    if !truth_log_prob.is_finite() && truth_log_prob != f64::NEG_INFINITY {
        return Err(Error::NonFinite("truth log density"));
    }
    let above = sample_log_probs.iter().filter(|l| **l > truth_log_prob).count();
    Ok(above as f64 / sample_log_probs.len() as f64)
}

/// Equal-tailed 1-D credible level of `truth` among `samples`.
pub fn marginal_credible_level(samples: &[f64], truth: f64) -> Result<f64> {
    if samples.len() < MIN_CREDIBLE_SAMPLES {
        return Err(Error::Domain(format!(
            "credible level needs >= {MIN_CREDIBLE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let below = samples.iter().filter(|s| **s < truth).count() as f64;
    let equal = samples.iter().filter(|s| **s == truth).count() as f64;
    let cdf = (below + 0.5 * equal) / n;
    Ok((2.0 * cdf - 1.0).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpCurve {
    pub n: usize,
    pub nominal: Vec<f64>,
    /// Fraction of instances whose truth lies inside the region of each
    /// nominal mass.
    pub coverage: Vec<f64>,
    /// Binomial 1/2/3-sigma bands around the diagonal, as (lo, hi).
    pub bands: [Vec<(f64, f64)>; 3],
    pub ks_stat: f64,
    pub ks_pvalue: f64,
}

impl PpCurve {
    /// True if every coverage point lies inside the band of `n_sigma`.
    pub fn within_band(&self, n_sigma: usize) -> bool {
        self.coverage
            .iter()
            .zip(&self.bands[n_sigma - 1])
            .all(|(c, (lo, hi))| *lo <= *c && *c <= *hi)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "level,coverage,lo1,hi1,lo2,hi2,lo3,hi3")?;
        for (i, (p, c)) in self.nominal.iter().zip(&self.coverage).enumerate() {
            write!(w, "{p:.16e},{c:.16e}")?;
            for b in &self.bands {
                write!(w, ",{:.16e},{:.16e}", b[i].0, b[i].1)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Empirical coverage of credible levels on `n_grid` evenly spaced nominal
/// levels in `[0, 1]`, with binomial bands and a KS test against U(0, 1).
pub fn pp_curve(levels: &[f64], n_grid: usize) -> Result<PpCurve> {
    if levels.len() < MIN_PP_LEVELS {
        return Err(Error::Domain(format!(
            "P-P curve needs >= {MIN_PP_LEVELS} levels, got {}",
            levels.len()
        )));
    }
    if n_grid < 2 {
        return Err(Error::Domain("P-P grid needs at least two points".into()));
    }
    if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Domain("credible levels must lie in [0, 1]".into()));
    }
    let n = levels.len();
    let nf = n as f64;
    let nominal: Vec<f64> = (0..n_grid).map(|i| i as f64 / (n_grid - 1) as f64).collect();
    let coverage = nominal
        .iter()
        .map(|&p| {
            if p >= 1.0 {
                1.0
            } else {
                levels.iter().filter(|l| **l < p).count() as f64 / nf
            }
        })
        .collect();
    let bands = std::array::from_fn(|s| {
        let k = (s + 1) as f64;
        nominal
            .iter()
            .map(|&p| {
                let half = k * (p * (1.0 - p) / nf).sqrt();
                ((p - half).max(0.0), (p + half).min(1.0))
            })
            .collect()
    });
    let ks_stat = ks_statistic(levels);
    Ok(PpCurve {
        n,
        nominal,
        coverage,
        bands,
        ks_stat,
        ks_pvalue: kolmogorov_pvalue(ks_stat, n),
    })
}

/// One-sample KS distance to U(0, 1).
pub fn ks_statistic(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov tail probability with the usual small-sample
/// correction of the argument.
pub fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub name: String,
    pub truth: f64,
    pub flow_mean: f64,
    pub flow_std: f64,
    pub oracle_mean: f64,
    pub oracle_std: f64,
    pub crb: f64,
    pub flow_over_oracle: f64,
    pub oracle_over_crb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub rows: Vec<WidthRow>,
}

impl WidthReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "param,truth,flow_mean,flow_std,oracle_mean,oracle_std,crb,flow_over_oracle,oracle_over_crb")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.name,
                r.truth,
                r.flow_mean,
                r.flow_std,
                r.oracle_mean,
                r.oracle_std,
                r.crb,
                r.flow_over_oracle,
                r.oracle_over_crb
            )?;
        }
        Ok(())
    }
}

/// Side-by-side widths for one data instance.
pub fn width_report(
    truth: &SignalParams,
    flow_mean: [f64; 2],
    flow_std: [f64; 2],
    oracle: &GridPosterior,
    crb: &CrbWidths,
) -> WidthReport {
    let (om, os) = (oracle.mean(), oracle.std());
    let names = truth.kind().param_names();
    let tv = truth.values();
    WidthReport {
        rows: (0..2)
            .map(|k| WidthRow {
                name: names[k].to_string(),
                truth: tv[k],
                flow_mean: flow_mean[k],
                flow_std: flow_std[k],
                oracle_mean: om[k],
                oracle_std: os[k],
                crb: crb.widths[k],
                flow_over_oracle: flow_std[k] / os[k],
                oracle_over_crb: os[k] / crb.widths[k],
            })
            .collect(),
    }
}

/// Sample mean and unbiased standard deviation per parameter.
pub fn sample_moments(samples: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let n = samples.len() as f64;
    let m: [f64; 2] = std::array::from_fn(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n);
    let s = std::array::from_fn(|k| {
        (samples.iter().map(|x| (x[k] - m[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (m, s)
}

/// Credible levels of one test instance: joint (density rank) and one per
/// parameter (equal-tailed marginal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceLevels {
    pub joint: f64,
    pub marginal: [f64; 2],
}

/// Draws `n_samples` from the posterior of each record and ranks the truth.
/// Instance `i` uses sample stream `(seed, i)`.
pub fn calibration_levels(
    model: &PosteriorModel,
    records: &[Record],
    n_samples: usize,
    prior: &ParamPrior,
    seed: u64,
) -> Result<Vec<InstanceLevels>> {
    let series: Vec<&[f64]> = records.iter().map(|r| r.data.values.as_slice()).collect();
    let contexts = model.contexts(&series)?;
    records
        .iter()
        .zip(&contexts)
        .enumerate()
        .map(|(i, (rec, ctx))| {
            let s = model.sample(n_samples, ctx, prior, &mut rng::stream(seed, i as u64, 0))?;
            let lp = model.log_prob(&s.samples, ctx)?;
            let truth = rec.params.values();
            let truth_lp = model.log_prob(&[truth], ctx)?[0];
            let marginal = std::array::from_fn(|k| {
                let xs: Vec<f64> = s.samples.iter().map(|x| x[k]).collect();
                marginal_credible_level(&xs, truth[k])
            });
            let [m0, m1] = marginal;
            Ok(InstanceLevels {
                joint: credible_level(&lp, truth_lp)?,
                marginal: [m0?, m1?],
            })
        })
        .collect()
}

/// Flow, oracle and bound widths for one record.
pub fn consistency_report(
    model: &PosteriorModel,
    record: &Record,
    prior: &ParamPrior,
    shift_prior: &ShiftPrior,
    sigma: f64,
    resolution: usize,
    n_samples: usize,
    stream: &mut Stream,
) -> Result<WidthReport> {
    let ctx = model.context(&record.data)?;
    let s = model.sample(n_samples, &ctx, prior, stream)?;
    let oracle = grid_posterior(
        &record.data,
        prior,
        sigma,
        resolution,
        ShiftHandling::Marginalize,
        shift_prior,
    )?;
    let crb = crb_widths(&record.params, &record.data.grid, sigma)?;
    Ok(width_report(&record.params, s.mean(), s.std(), &oracle, &crb))
}
