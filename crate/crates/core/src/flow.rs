//! Conditional masked autoregressive flow over the two signal parameters,
//! and the posterior models built on it: one conditioned on the pretrained
//! embedding, one conditioned on raw data through a jointly trained network.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Optimizer, OptimizerConfig, ParamStore, Tensor, Var};
use crate::embedding::{self, batch_tensor, Encoder, EncoderConfig, CONV_PREFIX, EMBED_DIM};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::signal::{Dataset, ParamPrior, SignalKind, SignalParams, TimeSeries};

pub const PARAM_DIM: usize = 2;
pub const LOG_SCALE_CLAMP: f64 = 7.0;
pub const FLOW_PREFIX: &str = "flow.";
pub const SUMMARY_PREFIX: &str = "raw.fc";

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permutation {
    /// Reverse the dimension order between consecutive transforms.
    #[default]
    Swap,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_transforms: usize,
    pub hidden: Vec<usize>,
    pub context_dim: usize,
    pub permutation: Permutation,
}

impl FlowConfig {
    pub fn with_context(context_dim: usize) -> Self {
        Self {
            n_transforms: 5,
            hidden: vec![64, 64],
            context_dim,
            permutation: Permutation::Swap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_transforms == 0 {
            return Err(Error::Config("flow needs at least one transform".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h < PARAM_DIM) {
            return Err(Error::Config(format!(
                "conditioner hidden widths must be >= {PARAM_DIM}"
            )));
        }
        Ok(())
    }
}

/// Affine map between the physical prior box and `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamScaler {
    pub lo: [f64; PARAM_DIM],
    pub hi: [f64; PARAM_DIM],
}

impl ParamScaler {
    pub fn new(lo: [f64; PARAM_DIM], hi: [f64; PARAM_DIM]) -> Result<Self> {
        for k in 0..PARAM_DIM {
            if !(lo[k].is_finite() && hi[k].is_finite() && hi[k] > lo[k]) {
                return Err(Error::Config(format!(
                    "scaler needs lo < hi, got [{}, {}]",
                    lo[k], hi[k]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn identity() -> Self {
        Self {
            lo: [-1.0; PARAM_DIM],
            hi: [1.0; PARAM_DIM],
        }
    }

    pub fn from_prior(prior: &ParamPrior) -> Result<Self> {
        Self::new(
            [prior.bounds[0][0], prior.bounds[1][0]],
            [prior.bounds[0][1], prior.bounds[1][1]],
        )
    }

    pub fn to_scaled(&self, x: [f64; PARAM_DIM]) -> [f64; PARAM_DIM] {
        std::array::from_fn(|k| 2.0 * (x[k] - self.lo[k]) / (self.hi[k] - self.lo[k]) - 1.0)
    }

    pub fn to_physical(&self, s: [f64; PARAM_DIM]) -> [f64; PARAM_DIM] {
        std::array::from_fn(|k| self.lo[k] + (s[k] + 1.0) * 0.5 * (self.hi[k] - self.lo[k]))
    }

    /// `log |d scaled / d physical|`.
    pub fn log_abs_det(&self) -> f64 {
        (0..PARAM_DIM)
            .map(|k| (2.0 / (self.hi[k] - self.lo[k])).ln())
            .sum()
    }
}

/// Input, hidden and output degrees for a MADE conditioner. Context inputs
/// have degree 0 and reach every output.
pub fn made_masks(context_dim: usize, hidden: &[usize]) -> Vec<Tensor> {
    let d = PARAM_DIM;
    let mut prev: Vec<usize> = (1..=d).chain(std::iter::repeat(0).take(context_dim)).collect();
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    for &h in hidden {
        let deg: Vec<usize> = (0..h).map(|j| j % d).collect();
        masks.push(mask_tensor(&prev, &deg, |i, o| i <= o));
        prev = deg;
    }
    let out: Vec<usize> = (0..2 * d).map(|j| j % d + 1).collect();
    masks.push(mask_tensor(&prev, &out, |i, o| i < o));
    masks
}

fn mask_tensor(inp: &[usize], out: &[usize], keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let keep = &keep;
    let data = inp
        .iter()
        .flat_map(|&i| out.iter().map(move |&o| if keep(i, o) { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![inp.len(), out.len()], data).expect("mask shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMaf {
    pub config: FlowConfig,
    pub scaler: ParamScaler,
}

impl ConditionalMaf {
    pub fn new(config: FlowConfig, scaler: ParamScaler) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, scaler })
    }

    /// Hidden layers He-initialised; the output layer is zero so every
    /// transform starts as the identity.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        for t in 0..self.config.n_transforms {
            let mut fan_in = PARAM_DIM + self.config.context_dim;
            for (l, &h) in self.config.hidden.iter().enumerate() {
                store.insert_he(format!("{FLOW_PREFIX}t{t}.l{l}.w"), &[fan_in, h], fan_in, 1.0, rng)?;
                store.insert_zeros(format!("{FLOW_PREFIX}t{t}.l{l}.b"), &[h])?;
                fan_in = h;
            }
            let l = self.config.hidden.len();
            store.insert_zeros(format!("{FLOW_PREFIX}t{t}.l{l}.w"), &[fan_in, 2 * PARAM_DIM])?;
            store.insert_zeros(format!("{FLOW_PREFIX}t{t}.l{l}.b"), &[2 * PARAM_DIM])?;
        }
        Ok(())
    }

    /// Shift and clamped log-scale `[B, 2]` each, for transform `t`.
    fn conditioner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        masks: &[Var],
        t: usize,
        x: Var,
        ctx: Var,
    ) -> Result<(Var, Var)> {
        let mut h = g.concat_cols(&[x, ctx])?;
        for (l, &mask) in masks.iter().enumerate() {
            let w = g.param(store, &format!("{FLOW_PREFIX}t{t}.l{l}.w"))?;
            let b = g.param(store, &format!("{FLOW_PREFIX}t{t}.l{l}.b"))?;
            let wm = g.mul(w, mask)?;
            h = g.dense(h, wm, b)?;
            if l + 1 < masks.len() {
                h = g.relu(h)?;
            }
        }
        let mu = g.slice_cols(h, 0, PARAM_DIM)?;
        let raw = g.slice_cols(h, PARAM_DIM, 2 * PARAM_DIM)?;
        let alpha = g.clamp(raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        Ok((mu, alpha))
    }

    fn mask_vars(&self, g: &mut Graph) -> Vec<Var> {
        made_masks(self.config.context_dim, &self.config.hidden)
            .into_iter()
            .map(|m| g.constant(m))
            .collect()
    }

    fn permute(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.config.permutation {
            Permutation::None => Ok(x),
            Permutation::Swap => {
                let cols: Vec<Var> = (0..PARAM_DIM)
                    .rev()
                    .map(|k| g.slice_cols(x, k, k + 1))
                    .collect::<Result<_>>()?;
                g.concat_cols(&cols)
            }
        }
    }

    fn check_context(&self, g: &Graph, theta: Var, ctx: Var) -> Result<()> {
        let (b, d) = g.value(theta).dims2()?;
        let (bc, c) = g.value(ctx).dims2()?;
        if d != PARAM_DIM || c != self.config.context_dim || b != bc {
            return Err(Error::Shape(format!(
                "flow expects theta [B,{PARAM_DIM}] and context [B,{}], got [{b},{d}] and [{bc},{c}]",
                self.config.context_dim
            )));
        }
        Ok(())
    }

    /// Scaled parameters to base space: `z [B,2]` and `logdet [B,1]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        theta: Var,
        ctx: Var,
    ) -> Result<(Var, Var)> {
        self.check_context(g, theta, ctx)?;
        let masks = self.mask_vars(g);
        let mut x = theta;
        let mut logdet = None;
        for t in 0..self.config.n_transforms {
            if t > 0 {
                x = self.permute(g, x)?;
            }
            let (mu, alpha) = self.conditioner(g, store, &masks, t, x, ctx)?;
            let scale = g.exp(alpha)?;
            let xs = g.mul(x, scale)?;
            x = g.add(xs, mu)?;
            let ld = g.row_sum(alpha)?;
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => g.add(acc, ld)?,
            });
        }
        Ok((x, logdet.expect("n_transforms >= 1")))
    }

    /// Log density of scaled parameters `[B,1]`, including the scaler
    /// Jacobian so the result is a density over physical parameters.
    pub fn log_prob_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        theta_scaled: Var,
        ctx: Var,
    ) -> Result<Var> {
        let (z, logdet) = self.forward_graph(g, store, theta_scaled, ctx)?;
        let z2 = g.square(z)?;
        let q = g.row_sum(z2)?;
        let q = g.scale(q, -0.5)?;
        let lp = g.add(q, logdet)?;
        g.add_scalar(lp, self.scaler.log_abs_det() - 0.5 * PARAM_DIM as f64 * LN_2PI)
    }

    /// Batch forward transform in scaled space.
    pub fn forward_transform(
        &self,
        store: &ParamStore,
        theta_scaled: &[[f64; PARAM_DIM]],
        ctx: &Tensor,
    ) -> Result<Vec<([f64; PARAM_DIM], f64)>> {
        let mut g = Graph::new();
        let th = g.constant(rows_tensor(theta_scaled)?);
        let c = g.constant(ctx.clone());
        let (z, ld) = self.forward_graph(&mut g, store, th, c)?;
        let (zt, lt) = (g.value(z), g.value(ld));
        Ok((0..theta_scaled.len())
            .map(|i| (to_pair(zt.row(i)), lt.row(i)[0]))
            .collect())
    }

    /// Batch inverse transform in scaled space. Each transform is undone one
    /// dimension at a time, since output `k` depends only on inputs `< k`.
    pub fn inverse_transform(
        &self,
        store: &ParamStore,
        z: &[[f64; PARAM_DIM]],
        ctx: &Tensor,
    ) -> Result<Vec<[f64; PARAM_DIM]>> {
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inverse_transform input"));
        }
        let mut y: Vec<[f64; PARAM_DIM]> = z.to_vec();
        for t in (0..self.config.n_transforms).rev() {
            let mut x = vec![[0.0; PARAM_DIM]; y.len()];
            for k in 0..PARAM_DIM {
                let mut g = Graph::new();
                let masks = self.mask_vars(&mut g);
                let xv = g.constant(rows_tensor(&x)?);
                let c = g.constant(ctx.clone());
                self.check_context(&g, xv, c)?;
                let (mu, alpha) = self.conditioner(&mut g, store, &masks, t, xv, c)?;
                let (mu, alpha) = (g.value(mu), g.value(alpha));
                for (i, xi) in x.iter_mut().enumerate() {
                    xi[k] = (y[i][k] - mu.row(i)[k]) * (-alpha.row(i)[k]).exp();
                    if !xi[k].is_finite() {
                        return Err(Error::NonFinite("inverse_transform"));
                    }
                }
            }
            if t > 0 && self.config.permutation == Permutation::Swap {
                for xi in x.iter_mut() {
                    xi.reverse();
                }
            }
            y = x;
        }
        Ok(y)
    }

    /// Log density of physical parameters given one context row per entry.
    pub fn log_prob(&self, store: &ParamStore, theta: &[[f64; PARAM_DIM]], ctx: &Tensor) -> Result<Vec<f64>> {
        if theta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("log_prob needs finite parameters".into()));
        }
        let scaled: Vec<[f64; PARAM_DIM]> = theta.iter().map(|t| self.scaler.to_scaled(*t)).collect();
        let mut g = Graph::new();
        let th = g.constant(rows_tensor(&scaled)?);
        let c = g.constant(ctx.clone());
        let lp = self.log_prob_graph(&mut g, store, th, c)?;
        Ok(g.value(lp).data().to_vec())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut fan_in = PARAM_DIM + self.config.context_dim;
        for &h in self.config.hidden.iter().chain(std::iter::once(&(2 * PARAM_DIM))) {
            n += fan_in * h + h;
            fan_in = h;
        }
        n * self.config.n_transforms
    }

    /// MACs of one density evaluation per sample (masked weights counted in
    /// full, as a dense kernel would execute them).
    pub fn macs_per_sample(&self) -> u64 {
        let mut n = 0u64;
        let mut fan_in = PARAM_DIM + self.config.context_dim;
        for &h in self.config.hidden.iter().chain(std::iter::once(&(2 * PARAM_DIM))) {
            n += (fan_in * h) as u64;
            fan_in = h;
        }
        n * self.config.n_transforms as u64
    }
}

fn rows_tensor(rows: &[[f64; PARAM_DIM]]) -> Result<Tensor> {
    Tensor::new(
        vec![rows.len(), PARAM_DIM],
        rows.iter().flatten().copied().collect(),
    )
}

fn to_pair(row: &[f64]) -> [f64; PARAM_DIM] {
    [row[0], row[1]]
}

/// Repeats one context vector `n` times.
pub fn repeat_context(ctx: &[f64], n: usize) -> Tensor {
    let data = (0..n).flat_map(|_| ctx.iter().copied()).collect();
    Tensor::new(vec![n, ctx.len()], data).expect("context shape")
}

/// Dense summary of the raw series used by the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSummaryConfig {
    pub input_len: usize,
    pub widths: Vec<usize>,
}

impl RawSummaryConfig {
    /// First layer sized (in multiples of 128) so the network just reaches a
    /// million parameters: `in -> w -> 256 -> 32`.
    pub fn default_for(input_len: usize) -> Self {
        let tail = 256 * 32 + 32;
        let need = (1_000_000 - tail - 256) as f64 / (input_len + 1 + 256) as f64;
        let first = (need / 128.0).ceil() as usize * 128;
        Self {
            input_len,
            widths: vec![first, 256, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("raw summary needs non-empty positive widths".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        dense_stack(self.input_len, &self.widths).0
    }

    pub fn macs_per_sample(&self) -> u64 {
        dense_stack(self.input_len, &self.widths).1
    }
}

fn dense_stack(input: usize, widths: &[usize]) -> (usize, u64) {
    let (mut p, mut m, mut fan_in) = (0, 0u64, input);
    for &w in widths {
        p += fan_in * w + w;
        m += (fan_in * w) as u64;
        fan_in = w;
    }
    (p, m)
}

/// How the flow context is obtained from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContextNet {
    /// Pretrained encoder; the conv trunk is frozen, its FC head trains.
    Embedded { encoder: EncoderConfig },
    /// Raw series through a dense network trained jointly with the flow.
    Baseline { summary: RawSummaryConfig },
}

/// Parameter and compute accounting for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub trainable_params: usize,
    pub total_params: usize,
    pub macs_per_forward: u64,
    pub batch_size: usize,
}

/// A context network plus conditional flow, with all parameters in one store.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorModel {
    pub kind: SignalKind,
    pub context: ContextNet,
    pub flow: ConditionalMaf,
    pub store: ParamStore,
}

/// Draws from a posterior for one conditioning series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub kind: SignalKind,
    pub samples: Vec<[f64; PARAM_DIM]>,
    /// Context vector the draws were conditioned on.
    pub context: Vec<f64>,
    /// Per draw: true if it falls outside the prior box.
    pub outside_prior: Vec<bool>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_outside(&self) -> usize {
        self.outside_prior.iter().filter(|b| **b).count()
    }

    pub fn mean(&self) -> [f64; PARAM_DIM] {
        let n = self.samples.len() as f64;
        std::array::from_fn(|k| self.samples.iter().map(|s| s[k]).sum::<f64>() / n)
    }

    /// Unbiased per-parameter standard deviation.
    pub fn std(&self) -> [f64; PARAM_DIM] {
        let m = self.mean();
        let n = self.samples.len() as f64;
        std::array::from_fn(|k| {
            (self.samples.iter().map(|s| (s[k] - m[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
    }
}

impl PosteriorModel {
    /// Embedded model from a pretrained embedding store. Only the encoder
    /// parameters are carried over; the conv trunk is frozen.
    pub fn embedded(
        kind: SignalKind,
        encoder: EncoderConfig,
        pretrained: &ParamStore,
        flow: FlowConfig,
        prior: &ParamPrior,
        seed: u64,
    ) -> Result<Self> {
        if flow.context_dim != EMBED_DIM {
            return Err(Error::Config(format!(
                "embedded flow context must be {EMBED_DIM}-D, got {}",
                flow.context_dim
            )));
        }
        Encoder::new(encoder.clone())?;
        let mut store = pretrained.subset("enc.");
        if store.is_empty() {
            return Err(Error::Config("pretrained store has no encoder parameters".into()));
        }
        embedding::freeze_conv(&mut store);
        let flow = ConditionalMaf::new(flow, ParamScaler::from_prior(prior)?)?;
        flow.init_params(&mut store, &mut rng::stage_stream(seed, "flow-init"))?;
        Ok(Self {
            kind,
            context: ContextNet::Embedded { encoder },
            flow,
            store,
        })
    }

    pub fn baseline(
        kind: SignalKind,
        summary: RawSummaryConfig,
        flow: FlowConfig,
        prior: &ParamPrior,
        seed: u64,
    ) -> Result<Self> {
        summary.validate()?;
        if flow.context_dim != summary.output_dim() {
            return Err(Error::Config("baseline flow context must match the summary width".into()));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stage_stream(seed, "baseline-init");
        embedding::init_mlp(&mut store, SUMMARY_PREFIX, summary.input_len, &summary.widths, &mut r)?;
        let flow = ConditionalMaf::new(flow, ParamScaler::from_prior(prior)?)?;
        flow.init_params(&mut store, &mut r)?;
        Ok(Self {
            kind,
            context: ContextNet::Baseline { summary },
            flow,
            store,
        })
    }

    pub fn input_len(&self) -> usize {
        match &self.context {
            ContextNet::Embedded { encoder } => encoder.input_len,
            ContextNet::Baseline { summary } => summary.input_len,
        }
    }

    fn encoder(&self) -> Option<Encoder> {
        match &self.context {
            ContextNet::Embedded { encoder } => Some(Encoder {
                config: encoder.clone(),
            }),
            ContextNet::Baseline { .. } => None,
        }
    }

    /// Per-record inputs that do not change during training: pooled conv
    /// features for the embedded model, raw values for the baseline.
    pub fn training_inputs(&self, series: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if let Some(s) = series.iter().find(|s| s.len() != self.input_len()) {
            return Err(Error::Shape(format!(
                "model expects {} samples, got {}",
                self.input_len(),
                s.len()
            )));
        }
        match self.encoder() {
            Some(enc) => enc.features_batch(&self.store, series),
            None => Ok(series.iter().map(|s| s.to_vec()).collect()),
        }
    }

    /// Context `[B, c]` from the output of [`Self::training_inputs`].
    pub fn context_graph(&self, g: &mut Graph, store: &ParamStore, inputs: Var) -> Result<Var> {
        match &self.context {
            ContextNet::Embedded { encoder } => Encoder {
                config: encoder.clone(),
            }
            .head(g, store, inputs),
            ContextNet::Baseline { summary } => {
                embedding::mlp(g, store, SUMMARY_PREFIX, summary.widths.len(), inputs)
            }
        }
    }

    /// Context vectors for many series.
    pub fn contexts(&self, series: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let inputs = self.training_inputs(series)?;
        let mut out = Vec::with_capacity(series.len());
        for chunk in inputs.chunks(256) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(chunk)?);
            let c = self.context_graph(&mut g, &self.store, x)?;
            let t = g.value(c);
            out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn context(&self, d: &TimeSeries) -> Result<Vec<f64>> {
        Ok(self.contexts(&[&d.values])?.remove(0))
    }

    /// Posterior log density of physical parameters for one context.
    pub fn log_prob(&self, theta: &[[f64; PARAM_DIM]], ctx: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(theta.len());
        for chunk in theta.chunks(4096) {
            out.extend(self.flow.log_prob(&self.store, chunk, &repeat_context(ctx, chunk.len()))?);
        }
        Ok(out)
    }

    /// Draws `n` posterior samples; deterministic per stream state.
    pub fn sample(&self, n: usize, ctx: &[f64], prior: &ParamPrior, stream: &mut Stream) -> Result<PosteriorSamples> {
        if n == 0 {
            return Err(Error::Domain("need at least one sample".into()));
        }
        let z: Vec<[f64; PARAM_DIM]> = (0..n)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(stream)))
            .collect();
        let mut samples = Vec::with_capacity(n);
        for chunk in z.chunks(4096) {
            let th = self
                .flow
                .inverse_transform(&self.store, chunk, &repeat_context(ctx, chunk.len()))?;
            samples.extend(th.into_iter().map(|s| self.flow.scaler.to_physical(s)));
        }
        let outside_prior = samples.iter().map(|s| !prior.contains(*s)).collect();
        Ok(PosteriorSamples {
            kind: self.kind,
            samples,
            context: ctx.to_vec(),
            outside_prior,
        })
    }

    pub fn complexity(&self, batch_size: usize) -> Complexity {
        let (ctx_params, ctx_macs) = match &self.context {
            ContextNet::Embedded { encoder } => (
                self.store.subset("enc.").total_count(),
                encoder_macs_per_sample(encoder),
            ),
            ContextNet::Baseline { summary } => (summary.param_count(), summary.macs_per_sample()),
        };
        Complexity {
            trainable_params: self.store.trainable_count(),
            total_params: ctx_params + self.flow.param_count(),
            macs_per_forward: (ctx_macs + self.flow.macs_per_sample()) * batch_size as u64,
            batch_size,
        }
    }

    /// True if every conv parameter is frozen (or there are none).
    pub fn conv_frozen(&self) -> bool {
        self.store
            .iter()
            .filter(|(n, _)| n.starts_with(CONV_PREFIX))
            .all(|(_, e)| e.frozen)
    }

    pub fn manifest(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "kind": self.kind,
            "context": self.context,
            "flow": self.flow,
        }))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save(path, &self.manifest()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{k}`")))
        };
        Ok(Self {
            kind: serde_json::from_value(field("kind")?)?,
            context: serde_json::from_value(field("context")?)?,
            flow: serde_json::from_value(field("flow")?)?,
            store,
        })
    }
}

/// Analytic MACs of the encoder (input pooling, conv blocks, FC head).
pub fn encoder_macs_per_sample(cfg: &EncoderConfig) -> u64 {
    let mut macs = if cfg.input_pool > 1 { cfg.input_len as u64 } else { 0 };
    let mut c_in = 1;
    let mut len = cfg.pooled_len();
    for (&c, l_out) in cfg.channels.iter().zip(cfg.block_lengths()) {
        macs += (c * c_in * cfg.kernel * l_out) as u64;
        macs += (c * c * cfg.kernel * l_out) as u64;
        macs += (c * c_in * l_out) as u64;
        c_in = c;
        len = l_out;
    }
    macs += (c_in * len) as u64;
    macs + dense_stack(c_in, &cfg.fc_widths).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            optimizer: OptimizerConfig::adam(5e-4),
            val_fraction: 0.1,
            patience: 20,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Validation loss before any update.
    pub initial_val: f64,
    pub history: Vec<LossRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Trains the embedded model: conv trunk frozen, encoder head and flow
/// updated on cached conv features.
pub fn train_flow(model: &mut PosteriorModel, dataset: &Dataset, cfg: &FlowTrainConfig, seed: u64) -> Result<TrainOutcome> {
    if !matches!(model.context, ContextNet::Embedded { .. }) {
        return Err(Error::Config("train_flow needs an embedded model".into()));
    }
    if !model.conv_frozen() {
        return Err(Error::Config("encoder conv trunk must be frozen".into()));
    }
    train_posterior(model, dataset, cfg, seed)
}

/// Trains the baseline: summary network and flow jointly from scratch.
pub fn train_baseline(model: &mut PosteriorModel, dataset: &Dataset, cfg: &FlowTrainConfig, seed: u64) -> Result<TrainOutcome> {
    if !matches!(model.context, ContextNet::Baseline { .. }) {
        return Err(Error::Config("train_baseline needs a baseline model".into()));
    }
    train_posterior(model, dataset, cfg, seed)
}

/// Deterministic train/validation split of `n` record indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stage_stream(seed, "train-split"));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn train_posterior(model: &mut PosteriorModel, dataset: &Dataset, cfg: &FlowTrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.spec.ssl_pairs {
        return Err(Error::Config("flow training needs a non-SSL dataset".into()));
    }
    if dataset.kind() != model.kind {
        return Err(Error::Config("dataset kind differs from model kind".into()));
    }
    if dataset.len() < 2 {
        return Err(Error::Config("flow training needs at least two records".into()));
    }
    let series: Vec<&[f64]> = dataset.records.iter().map(|r| r.data.values.as_slice()).collect();
    let inputs = model.training_inputs(&series)?;
    let targets: Vec<[f64; PARAM_DIM]> = dataset
        .records
        .iter()
        .map(|r| model.flow.scaler.to_scaled(r.params.values()))
        .collect();
    let (train, val) = split_indices(dataset.len(), cfg.val_fraction, seed);

    let eval = |m: &PosteriorModel| -> Result<f64> {
        let mut total = 0.0;
        for chunk in val.chunks(1024) {
            let (nll, _) = batch_nll(m, &m.store, &inputs, &targets, chunk)?;
            total += g_item(&nll) * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    };

    let initial_val = eval(model)?;
    let mut best_val = initial_val;
    let mut best_epoch = None;
    let mut best_store = model.store.clone();
    let mut history = Vec::new();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order = train.clone();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(rng::derive_seed(seed, "train-shuffle"), epoch as u64, 0));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_nll(model, &model.store, &inputs, &targets, idx)?;
            let grads = grads.expect("training graph");
            opt.step(&mut model.store, &grads)?;
            sum += g_item(&loss) * idx.len() as f64;
            count += idx.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = eval(model)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: train {train_loss}, val {val_loss}"
            )));
        }
        history.push(LossRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = Some(epoch);
            best_store = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.store = best_store;
    Ok(TrainOutcome {
        initial_val,
        history,
        best_epoch,
        best_val,
        stopped_early,
    })
}

fn g_item(t: &Tensor) -> f64 {
    t.item()
}

/// Mean negative log-likelihood over `idx`, with gradients when any
/// parameter is trainable.
fn batch_nll(
    model: &PosteriorModel,
    store: &ParamStore,
    inputs: &[Vec<f64>],
    targets: &[[f64; PARAM_DIM]],
    idx: &[usize],
) -> Result<(Tensor, Option<crate::diffcore::Gradients>)> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
    let th: Vec<[f64; PARAM_DIM]> = idx.iter().map(|&i| targets[i]).collect();
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&rows)?);
    let ctx = model.context_graph(&mut g, store, x)?;
    let t = g.constant(rows_tensor(&th)?);
    let lp = model.flow.log_prob_graph(&mut g, store, t, ctx)?;
    let m = g.mean(lp)?;
    let nll = g.scale(m, -1.0)?;
    let grads = g.backward(nll)?;
    Ok((g.value(nll).clone(), Some(grads)))
}

/// Mean negative log-likelihood of a set of records under the model.
pub fn mean_nll(model: &PosteriorModel, records: &[&crate::signal::Record]) -> Result<f64> {
    let series: Vec<&[f64]> = records.iter().map(|r| r.data.values.as_slice()).collect();
    let ctx = model.contexts(&series)?;
    let mut total = 0.0;
    for (r, c) in records.iter().zip(&ctx) {
        total -= model.log_prob(&[r.params.values()], c)?[0];
    }
    Ok(total / records.len() as f64)
}

/// Expected loss of an identity flow when targets fill the scaled box
/// uniformly: `log 2pi + E|s|^2 / 2 - log|scaler|`, with `E s_k^2 = 1/3`.
pub fn identity_init_loss(scaler: &ParamScaler) -> f64 {
    LN_2PI + PARAM_DIM as f64 / 6.0 - scaler.log_abs_det()
}

pub fn signal_params(kind: SignalKind, theta: [f64; PARAM_DIM]) -> Result<SignalParams> {
    SignalParams::new(kind, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn random_flow(seed: u64, n_transforms: usize) -> (ConditionalMaf, ParamStore) {
        let cfg = FlowConfig {
            n_transforms,
            hidden: vec![8, 8],
            context_dim: 3,
            permutation: Permutation::Swap,
        };
        let flow = ConditionalMaf::new(cfg, ParamScaler::identity()).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, 0, 0);
        flow.init_params(&mut store, &mut r).unwrap();
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            for v in t.data_mut() {
                let n: f64 = StandardNormal.sample(&mut r);
                *v += 0.3 * n;
            }
        }
        (flow, store)
    }

    #[test]
    fn identity_init_is_identity() {
        let flow = ConditionalMaf::new(FlowConfig::with_context(3), ParamScaler::identity()).unwrap();
        let mut store = ParamStore::new();
        flow.init_params(&mut store, &mut rng::stream(0, 0, 0)).unwrap();
        let ctx = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0; 3]]).unwrap();
        let out = flow.forward_transform(&store, &[[0.4, -0.7], [0.0, 0.0]], &ctx).unwrap();
        assert_eq!(out[0], ([0.4, -0.7], 0.0));
        let back = flow.inverse_transform(&store, &[[0.4, -0.7], [1.0, 2.0]], &ctx).unwrap();
        assert_eq!(back[0], [0.4, -0.7]);
        let lp = flow.log_prob(&store, &[[0.0, 0.0]], &ctx.clone().reshape(vec![2, 3]).unwrap()).err();
        assert!(lp.is_some());
        let lp = flow.log_prob(&store, &[[0.0, 0.0]], &repeat_context(&[0.0; 3], 1)).unwrap();
        assert!((lp[0] + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_log_scale_gives_twice_it() {
        let cfg = FlowConfig {
            n_transforms: 1,
            hidden: vec![4],
            context_dim: 1,
            permutation: Permutation::None,
        };
        let flow = ConditionalMaf::new(cfg, ParamScaler::identity()).unwrap();
        let mut store = ParamStore::new();
        flow.init_params(&mut store, &mut rng::stream(0, 0, 0)).unwrap();
        let b = store.get_mut("flow.t0.l1.b").unwrap();
        b.data_mut()[2] = 0.25;
        b.data_mut()[3] = 0.25;
        let out = flow
            .forward_transform(&store, &[[1.0, 2.0]], &repeat_context(&[0.5], 1))
            .unwrap();
        assert!((out[0].1 - 0.5).abs() < 1e-15);
        let s = 0.25f64.exp();
        assert!((out[0].0[0] - s).abs() < 1e-15 && (out[0].0[1] - 2.0 * s).abs() < 1e-15);
    }

    #[test]
    fn masks_are_autoregressive() {
        let masks = made_masks(3, &[5, 4]);
        // Connectivity from input i to output j is the boolean matrix product.
        let mut reach: Vec<Vec<bool>> = (0..5).map(|i| (0..5).map(|j| i == j).collect()).collect();
        let mut dims = 5;
        for m in &masks {
            let (r, c) = m.dims2().unwrap();
            assert_eq!(r, dims);
            reach = reach
                .iter()
                .map(|row| {
                    (0..c)
                        .map(|j| (0..r).any(|h| row[h] && m.data()[h * c + j] != 0.0))
                        .collect()
                })
                .collect();
            dims = c;
        }
        // outputs: mu0, mu1, a0, a1
        for out in [0, 2] {
            assert!(!reach[0][out] && !reach[1][out]);
            assert!((2..5).all(|i| reach[i][out]));
        }
        for out in [1, 3] {
            assert!(reach[0][out] && !reach[1][out]);
        }
    }

    #[test]
    fn round_trip_and_first_dim_probe() {
        let (flow, store) = random_flow(5, 3);
        let ctx = repeat_context(&[0.2, -0.4, 1.1], 3);
        let th = [[0.1, 0.2], [-1.5, 0.7], [2.0, -2.0]];
        let z: Vec<_> = flow.forward_transform(&store, &th, &ctx).unwrap();
        let zz: Vec<[f64; 2]> = z.iter().map(|p| p.0).collect();
        let back = flow.inverse_transform(&store, &zz, &ctx).unwrap();
        for (a, b) in th.iter().zip(&back) {
            assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        }
        let (f1, s1) = random_flow(6, 1);
        let f1 = ConditionalMaf {
            config: FlowConfig {
                permutation: Permutation::None,
                ..f1.config
            },
            ..f1
        };
        let a = f1.forward_transform(&s1, &[[0.3, 0.1]], &repeat_context(&[0.0; 3], 1)).unwrap();
        let b = f1.forward_transform(&s1, &[[0.3, 5.0]], &repeat_context(&[0.0; 3], 1)).unwrap();
        assert_eq!(a[0].0[0], b[0].0[0]);
        assert_ne!(a[0].0[1], b[0].0[1]);
    }

    #[test]
    fn scaler_round_trip_and_jacobian() {
        let s = ParamScaler::new([0.5, 0.05], [3.0, 0.9]).unwrap();
        let x = [1.7, 0.33];
        let back = s.to_physical(s.to_scaled(x));
        assert!((back[0] - x[0]).abs() < 1e-15 && (back[1] - x[1]).abs() < 1e-15);
        assert_eq!(s.to_scaled([0.5, 0.9]), [-1.0, 1.0]);
        assert!((s.log_abs_det() - (0.8f64.ln() + (2.0 / 0.85f64).ln())).abs() < 1e-15);
        assert!(ParamScaler::new([1.0, 0.0], [1.0, 1.0]).is_err());
        assert_eq!(ParamScaler::identity().log_abs_det(), 0.0);
    }

    #[test]
    fn raw_summary_default_reaches_a_million() {
        for len in [256, 512] {
            let c = RawSummaryConfig::default_for(len);
            assert!(c.param_count() >= 1_000_000, "{len}: {}", c.param_count());
            assert_eq!(c.output_dim(), 32);
        }
        let c = RawSummaryConfig {
            input_len: 10,
            widths: vec![4],
        };
        assert_eq!(c.param_count(), 44);
        assert_eq!(c.macs_per_sample(), 40);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (tr, va) = split_indices(100, 0.1, 3);
        assert_eq!(va.len(), 10);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 3), (tr, va));
    }
}
