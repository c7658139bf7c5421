//! Encoder `f` (residual 1-D conv trunk + fully connected contraction to 3-D),
//! expander `h` (3 -> 12) and VICReg pretraining on time-shifted pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Optimizer, OptimizerConfig, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::signal::{Dataset, TimeSeries};

pub const EMBED_DIM: usize = 3;
pub const EXPAND_DIM: usize = 12;

/// Prefix shared by all convolutional encoder parameters.
pub const CONV_PREFIX: &str = "enc.conv.";
pub const ENCODER_FC_PREFIX: &str = "enc.fc";
pub const EXPANDER_PREFIX: &str = "exp.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Samples per input series.
    pub input_len: usize,
    /// Non-overlapping average pooling applied to the raw series first.
    pub input_pool: usize,
    /// Output channels of each residual block; every block halves the length.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Fully connected contraction after global average pooling; ends in 3.
    pub fc_widths: Vec<usize>,
}

impl EncoderConfig {
    /// Three residual blocks (8/16/32 channels, kernel 7) on a series pooled
    /// down to 64 samples, then 32 -> 16 -> 3.
    pub fn default_for(input_len: usize) -> Self {
        Self {
            input_len,
            input_pool: (input_len / 64).max(1),
            channels: vec![8, 16, 32],
            kernel: 7,
            fc_widths: vec![16, EMBED_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fc_widths.last() != Some(&EMBED_DIM) {
            return Err(Error::Config("encoder must end in a 3-D layer".into()));
        }
        if self.channels.is_empty() || self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("encoder needs >=1 block and an odd kernel".into()));
        }
        if self.input_pool == 0 || self.input_len % self.input_pool != 0 {
            return Err(Error::Config(format!(
                "input pooling {} does not divide {}",
                self.input_pool, self.input_len
            )));
        }
        if self.pooled_len() >> self.channels.len() == 0 {
            return Err(Error::Config("too many blocks for the input length".into()));
        }
        Ok(())
    }

    pub fn pooled_len(&self) -> usize {
        self.input_len / self.input_pool
    }

    /// Length after each residual block.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut l = self.pooled_len();
        self.channels
            .iter()
            .map(|_| {
                l = (l - 1) / 2 + 1;
                l
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpanderConfig {
    pub widths: Vec<usize>,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, EXPAND_DIM],
        }
    }
}

impl ExpanderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.last() != Some(&EXPAND_DIM) {
            return Err(Error::Config("expander must end in a 12-D layer".into()));
        }
        Ok(())
    }
}

/// Output of the encoder for one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub gamma: [f64; EMBED_DIM],
}

/// Stacks equally long series into a `[B, N]` tensor.
pub fn batch_tensor(series: &[&[f64]]) -> Result<Tensor> {
    let n = series.first().map_or(0, |s| s.len());
    if series.iter().any(|s| s.len() != n) {
        return Err(Error::Shape("series of unequal length in one batch".into()));
    }
    let data = series.iter().flat_map(|s| s.iter().copied()).collect();
    Tensor::new(vec![series.len(), n], data)
}

/// Chain of dense layers with ReLU between them (none after the last).
pub(crate) fn mlp(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    n_layers: usize,
    mut x: Var,
) -> Result<Var> {
    for i in 0..n_layers {
        let w = g.param(store, &format!("{prefix}{i}.w"))?;
        let b = g.param(store, &format!("{prefix}{i}.b"))?;
        x = g.dense(x, w, b)?;
        if i + 1 < n_layers {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

pub(crate) fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    widths: &[usize],
    rng: &mut Stream,
) -> Result<()> {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        store.insert_he(format!("{prefix}{i}.w"), &[fan_in, w], fan_in, 1.0, rng)?;
        store.insert_zeros(format!("{prefix}{i}.b"), &[w])?;
        fan_in = w;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        let k = self.config.kernel;
        let mut c_in = 1;
        for (i, &c) in self.config.channels.iter().enumerate() {
            let p = format!("{CONV_PREFIX}b{i}");
            store.insert_he(format!("{p}.c1.w"), &[c, c_in, k], c_in * k, 1.0, rng)?;
            store.insert_zeros(format!("{p}.c1.b"), &[c])?;
            store.insert_he(format!("{p}.c2.w"), &[c, c, k], c * k, 1.0, rng)?;
            store.insert_zeros(format!("{p}.c2.b"), &[c])?;
            store.insert_he(format!("{p}.skip.w"), &[c, c_in, 1], c_in, 1.0, rng)?;
            store.insert_zeros(format!("{p}.skip.b"), &[c])?;
            c_in = c;
        }
        init_mlp(store, ENCODER_FC_PREFIX, c_in, &self.config.fc_widths, rng)
    }

    /// Convolutional trunk: `[B, N] -> [B, C]` globally pooled features.
    pub fn conv_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (bs, n) = g.value(x).dims2()?;
        if n != self.config.input_len {
            return Err(Error::Shape(format!(
                "encoder expects {} samples, got {n}",
                self.config.input_len
            )));
        }
        let pad = self.config.kernel / 2;
        let mut h = g.reshape(x, vec![bs, 1, n])?;
        if self.config.input_pool > 1 {
            h = g.avg_pool1d(h, self.config.input_pool)?;
        }
        for i in 0..self.config.channels.len() {
            let p = format!("{CONV_PREFIX}b{i}");
            let w1 = g.param(store, &format!("{p}.c1.w"))?;
            let b1 = g.param(store, &format!("{p}.c1.b"))?;
            let w2 = g.param(store, &format!("{p}.c2.w"))?;
            let b2 = g.param(store, &format!("{p}.c2.b"))?;
            let ws = g.param(store, &format!("{p}.skip.w"))?;
            let bsk = g.param(store, &format!("{p}.skip.b"))?;
            let a = g.conv1d(h, w1, b1, 2, pad)?;
            let a = g.relu(a)?;
            let a = g.conv1d(a, w2, b2, 1, pad)?;
            let s = g.conv1d(h, ws, bsk, 2, 0)?;
            let sum = g.add(a, s)?;
            h = g.relu(sum)?;
        }
        g.global_avg_pool(h)
    }

    /// Fully connected contraction `[B, C] -> [B, 3]`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        mlp(g, store, ENCODER_FC_PREFIX, self.config.fc_widths.len(), features)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.conv_features(g, store, x)?;
        self.head(g, store, f)
    }

    /// Pooled conv features for many series, computed in chunks.
    pub fn features_batch(&self, store: &ParamStore, series: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(256) {
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(chunk)?);
            let f = self.conv_features(&mut g, store, x)?;
            let t = g.value(f);
            out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn encode_batch(&self, store: &ParamStore, series: &[&[f64]]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(256) {
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(chunk)?);
            let y = self.forward(&mut g, store, x)?;
            let t = g.value(y);
            out.extend((0..chunk.len()).map(|i| Embedding {
                gamma: t.row(i).try_into().expect("3-D output"),
            }));
        }
        Ok(out)
    }

    pub fn encode(&self, store: &ParamStore, d: &TimeSeries) -> Result<Embedding> {
        if d.values.len() != self.config.input_len {
            return Err(Error::Shape(format!(
                "encoder configured for {} samples, series has {}",
                self.config.input_len,
                d.values.len()
            )));
        }
        Ok(self.encode_batch(store, &[&d.values])?[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expander {
    pub config: ExpanderConfig,
}

impl Expander {
    pub fn new(config: ExpanderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        init_mlp(store, "exp.fc", EMBED_DIM, &self.config.widths, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, gamma: Var) -> Result<Var> {
        mlp(g, store, "exp.fc", self.config.widths.len(), gamma)
    }

    pub fn expand(&self, store: &ParamStore, gammas: &[[f64; EMBED_DIM]]) -> Result<Vec<[f64; EXPAND_DIM]>> {
        let rows: Vec<Vec<f64>> = gammas.iter().map(|g| g.to_vec()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows)?);
        let y = self.forward(&mut g, store, x)?;
        let t = g.value(y);
        Ok((0..gammas.len())
            .map(|i| t.row(i).try_into().expect("12-D output"))
            .collect())
    }
}

/// How the variance term of the VICReg loss is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceForm {
    /// `mean_j max(0, target_std - sqrt(Var_j + eps))`, averaged over both
    /// views.
    #[default]
    Hinge,
    /// `mean_j sqrt(Var_j + eps)` summed over both views. Minimising it
    /// shrinks the representation.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicRegWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epsilon: f64,
    pub target_std: f64,
}

impl VicRegWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            epsilon: 1e-4,
            target_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda1, self.lambda2, self.lambda3];
        if ls.iter().any(|l| !(*l >= 0.0)) || ls.iter().all(|l| *l == 0.0) {
            return Err(Error::Config("VICReg weights must be >= 0, not all zero".into()));
        }
        if !(self.epsilon > 0.0) || !(self.target_std > 0.0) {
            return Err(Error::Config("VICReg epsilon and target std must be > 0".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant weights by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub stages: Vec<(usize, VicRegWeights)>,
}

impl Default for WeightSchedule {
    /// (25, 25, 1) for the first 30 epochs, then equal weights.
    fn default() -> Self {
        Self {
            stages: vec![
                (0, VicRegWeights::new(25.0, 25.0, 1.0)),
                (30, VicRegWeights::new(1.0, 1.0, 1.0)),
            ],
        }
    }
}

impl WeightSchedule {
    pub fn validate(&self) -> Result<()> {
        match self.stages.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Config("schedule must start at epoch 0".into())),
        }
        if self.stages.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("schedule thresholds must increase".into()));
        }
        self.stages.iter().try_for_each(|(_, w)| w.validate())
    }

    pub fn at(&self, epoch: usize) -> VicRegWeights {
        self.stages
            .iter()
            .rev()
            .find(|(start, _)| *start <= epoch)
            .map(|(_, w)| *w)
            .unwrap_or(self.stages[0].1)
    }
}

/// Loss value nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct VicRegVars {
    pub total: Var,
    pub invariance: Var,
    pub variance: Var,
    pub covariance: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicRegLoss {
    pub total: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn variance_term(g: &mut Graph, x: Var, w: &VicRegWeights, form: VarianceForm) -> Result<Var> {
    let (_, var) = g.batch_mean_var(x)?;
    let v = g.add_scalar(var, w.epsilon)?;
    let std = g.sqrt(v)?;
    match form {
        VarianceForm::Hinge => {
            let neg = g.scale(std, -1.0)?;
            let gap = g.add_scalar(neg, w.target_std)?;
            let hinge = g.relu(gap)?;
            g.mean(hinge)
        }
        VarianceForm::Literal => g.mean(std),
    }
}

/// Sum of squared off-diagonal covariance entries divided by the dimension.
fn covariance_term(g: &mut Graph, x: Var) -> Result<Var> {
    let (bs, d) = g.value(x).dims2()?;
    let (mean, _) = g.batch_mean_var(x)?;
    let neg = g.scale(mean, -1.0)?;
    let centred = g.add_row(x, neg)?;
    let ct = g.transpose(centred)?;
    let gram = g.matmul(ct, centred)?;
    let cov = g.scale(gram, 1.0 / (bs as f64 - 1.0))?;
    let mut mask = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        mask.data_mut()[i * d + i] = 0.0;
    }
    let m = g.constant(mask);
    let off = g.mul(cov, m)?;
    let sq = g.square(off)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / d as f64)
}

/// Builds the VICReg loss between two `[B, D]` batches on the tape.
pub fn vicreg_vars(
    g: &mut Graph,
    x: Var,
    x_aug: Var,
    w: &VicRegWeights,
    form: VarianceForm,
) -> Result<VicRegVars> {
    let (bs, _) = g.value(x).dims2()?;
    if bs < 2 {
        return Err(Error::Shape("VICReg needs a batch of at least 2".into()));
    }
    if g.shape(x) != g.shape(x_aug) {
        return Err(Error::Shape("VICReg views differ in shape".into()));
    }
    let invariance = g.mse(x, x_aug)?;
    let v1 = variance_term(g, x, w, form)?;
    let v2 = variance_term(g, x_aug, w, form)?;
    let vsum = g.add(v1, v2)?;
    let variance = match form {
        VarianceForm::Hinge => g.scale(vsum, 0.5)?,
        VarianceForm::Literal => vsum,
    };
    let c1 = covariance_term(g, x)?;
    let c2 = covariance_term(g, x_aug)?;
    let covariance = g.add(c1, c2)?;
    let ti = g.scale(invariance, w.lambda1)?;
    let tv = g.scale(variance, w.lambda2)?;
    let tc = g.scale(covariance, w.lambda3)?;
    let t1 = g.add(ti, tv)?;
    let total = g.add(t1, tc)?;
    Ok(VicRegVars {
        total,
        invariance,
        variance,
        covariance,
    })
}

/// VICReg loss of two `[B, D]` batches.
pub fn vicreg_loss(
    x: &Tensor,
    x_aug: &Tensor,
    w: &VicRegWeights,
    form: VarianceForm,
) -> Result<VicRegLoss> {
    w.validate()?;
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(x_aug.clone());
    let v = vicreg_vars(&mut g, a, b, w, form)?;
    Ok(VicRegLoss {
        total: g.value(v.total).item(),
        invariance: g.value(v.invariance).item(),
        variance: g.value(v.variance).item(),
        covariance: g.value(v.covariance).item(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: WeightSchedule,
    pub variance_form: VarianceForm,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            optimizer: OptimizerConfig::adam(1e-3),
            schedule: WeightSchedule::default(),
            variance_form: VarianceForm::Hinge,
        }
    }
}

/// Per-epoch means of the unweighted loss components, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub weights: VicRegWeights,
}

/// Encoder plus expander sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub encoder: Encoder,
    pub expander: Expander,
    pub store: ParamStore,
}

impl EmbeddingModel {
    pub fn new(encoder: EncoderConfig, expander: ExpanderConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(encoder)?;
        let expander = Expander::new(expander)?;
        let mut store = ParamStore::new();
        let mut rng = rng::stage_stream(seed, "embedding-init");
        encoder.init_params(&mut store, &mut rng)?;
        expander.init_params(&mut store, &mut rng)?;
        Ok(Self {
            encoder,
            expander,
            store,
        })
    }

    pub fn conv_param_count(&self) -> usize {
        self.store.subset(CONV_PREFIX).total_count()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "encoder": self.encoder.config,
            "expander": self.expander.config,
        });
        self.store.save(path, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("embedding checkpoint lacks `{k}`")))
        };
        Ok(Self {
            encoder: Encoder::new(serde_json::from_value(field("encoder")?)?)?,
            expander: Expander::new(serde_json::from_value(field("expander")?)?)?,
            store,
        })
    }
}

/// Self-supervised pretraining on a dataset of shifted pairs. Returns one
/// [`EpochLosses`] per epoch.
pub fn pretrain(
    model: &mut EmbeddingModel,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<EpochLosses>> {
    cfg.schedule.validate()?;
    if !dataset.spec.ssl_pairs {
        return Err(Error::Config("pretraining needs a dataset built with ssl_pairs".into()));
    }
    if dataset.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::Config("pretraining needs batches of at least 2".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(epoch_pass(model, dataset, &order, cfg, 0, None)?);
    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::stream(rng::derive_seed(seed, "pretrain-shuffle"), epoch as u64 - 1, 0);
        order.shuffle(&mut shuffle);
        history.push(epoch_pass(model, dataset, &order, cfg, epoch, Some(&mut opt))?);
    }
    Ok(history)
}

/// One pass over the data. Without an optimizer the model is only evaluated,
/// which gives the untrained reference row at epoch 0.
fn epoch_pass(
    model: &mut EmbeddingModel,
    dataset: &Dataset,
    order: &[usize],
    cfg: &PretrainConfig,
    epoch: usize,
    mut opt: Option<&mut Optimizer>,
) -> Result<EpochLosses> {
    let w = cfg.schedule.at(epoch.saturating_sub(1));
    let mut sums = [0.0; 4];
    let mut batches = 0usize;
    for idx in order.chunks(cfg.batch_size) {
        if idx.len() < 2 {
            continue;
        }
        let (loss, parts) = pretrain_step(model, dataset, idx, &w, cfg.variance_form, opt.as_deref_mut())?;
        sums[0] += loss;
        for (s, p) in sums[1..].iter_mut().zip(parts) {
            *s += p;
        }
        batches += 1;
    }
    let n = batches as f64;
    let e = EpochLosses {
        epoch,
        total: sums[0] / n,
        invariance: sums[1] / n,
        variance: sums[2] / n,
        covariance: sums[3] / n,
        weights: w,
    };
    if ![e.total, e.invariance, e.variance, e.covariance]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::Divergence(format!("non-finite VICReg loss at epoch {epoch}: {e:?}")));
    }
    Ok(e)
}

fn pretrain_step(
    model: &mut EmbeddingModel,
    dataset: &Dataset,
    idx: &[usize],
    w: &VicRegWeights,
    form: VarianceForm,
    opt: Option<&mut Optimizer>,
) -> Result<(f64, [f64; 3])> {
    let mut views: Vec<&[f64]> = idx.iter().map(|&i| dataset.records[i].data.values.as_slice()).collect();
    for &i in idx {
        let aug = dataset.records[i]
            .data_aug
            .as_ref()
            .ok_or_else(|| Error::Config(format!("record {i} lacks an augmented view")))?;
        views.push(&aug.values);
    }
    let b = idx.len();
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&views)?);
    let gamma = model.encoder.forward(&mut g, &model.store, x)?;
    let expanded = model.expander.forward(&mut g, &model.store, gamma)?;
    let xa = g.slice_rows(expanded, 0, b)?;
    let xb = g.slice_rows(expanded, b, 2 * b)?;
    let v = vicreg_vars(&mut g, xa, xb, w, form)?;
    if let Some(opt) = opt {
        let grads = g.backward(v.total)?;
        opt.step(&mut model.store, &grads)?;
    }
    Ok((
        g.value(v.total).item(),
        [
            g.value(v.invariance).item(),
            g.value(v.variance).item(),
            g.value(v.covariance).item(),
        ],
    ))
}

/// Freezes the convolutional trunk; returns the number of frozen scalars.
pub fn freeze_conv(store: &mut ParamStore) -> usize {
    store.freeze_prefix(CONV_PREFIX)
}

/// Mean within-label pairwise distance over mean between-label pairwise
/// distance. Small values mean tight, well separated clusters.
pub fn cluster_separation(points: &[([f64; EMBED_DIM], usize)]) -> Result<f64> {
    let mut labels: Vec<usize> = points.iter().map(|(_, l)| *l).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Domain("cluster separation needs at least two labels".into()));
    }
    for l in &labels {
        if points.iter().filter(|(_, p)| p == l).count() < 2 {
            return Err(Error::Domain(format!("label {l} has fewer than two points")));
        }
    }
    let dist = |a: &[f64; EMBED_DIM], b: &[f64; EMBED_DIM]| {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(&points[i].0, &points[j].0);
            if points[i].1 == points[j].1 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let inter = inter / n_inter as f64;
    if inter == 0.0 {
        return Err(Error::Domain("all labels coincide".into()));
    }
    Ok(intra / n_intra as f64 / inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_dataset, DatasetSpec, SignalKind};

    fn small_model(seed: u64) -> EmbeddingModel {
        let mut enc = EncoderConfig::default_for(64);
        enc.channels = vec![4, 8];
        EmbeddingModel::new(enc, ExpanderConfig::default(), seed).unwrap()
    }

    #[test]
    fn default_encoder_shapes() {
        let cfg = EncoderConfig::default_for(256);
        assert_eq!(cfg.input_pool, 4);
        assert_eq!(cfg.block_lengths(), vec![32, 16, 8]);
        let cfg = EncoderConfig::default_for(512);
        assert_eq!(cfg.input_pool, 8);
        assert!(EncoderConfig {
            fc_widths: vec![16, 4],
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn encode_is_deterministic_and_batch_consistent() {
        let m = small_model(1);
        let series: Vec<Vec<f64>> = (0..5)
            .map(|s| (0..64).map(|i| ((i * (s + 1)) as f64 * 0.1).sin()).collect())
            .collect();
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let batch = m.encoder.encode_batch(&m.store, &refs).unwrap();
        let again = m.encoder.encode_batch(&m.store, &refs).unwrap();
        assert_eq!(batch, again);
        for (i, s) in refs.iter().enumerate() {
            let one = m.encoder.encode_batch(&m.store, &[s]).unwrap();
            assert_eq!(one[0], batch[i]);
        }
        let gammas: Vec<[f64; 3]> = batch.iter().map(|e| e.gamma).collect();
        let x = m.expander.expand(&m.store, &gammas).unwrap();
        let x1 = m.expander.expand(&m.store, &gammas[2..3]).unwrap();
        assert_eq!(x[2], x1[0]);
        assert!(x.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let m = small_model(2);
        let grid = crate::signal::TimeGrid::new(32, 0.1, 0.0).unwrap();
        let ts = TimeSeries::new(grid, vec![0.0; 32], 0.0).unwrap();
        assert!(matches!(m.encoder.encode(&m.store, &ts), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_lookup() {
        let s = WeightSchedule::default();
        assert_eq!(s.at(0).lambda1, 25.0);
        assert_eq!(s.at(29).lambda2, 25.0);
        assert_eq!(s.at(30).lambda1, 1.0);
        assert_eq!(s.at(500).lambda3, 1.0);
        let bad = WeightSchedule {
            stages: vec![(1, VicRegWeights::new(1.0, 1.0, 1.0))],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn vicreg_needs_two_rows() {
        let x = Tensor::zeros(&[1, 12]);
        let w = VicRegWeights::new(1.0, 1.0, 1.0);
        assert!(vicreg_loss(&x, &x, &w, VarianceForm::Hinge).is_err());
    }

    #[test]
    fn constant_batch_has_maximal_hinge() {
        let x = Tensor::full(&[6, 12], 0.3);
        let w = VicRegWeights::new(1.0, 2.0, 1.0);
        let l = vicreg_loss(&x, &x, &w, VarianceForm::Hinge).unwrap();
        assert!((l.variance - (1.0 - 1e-4f64.sqrt())).abs() < 1e-15);
        assert_eq!(l.invariance, 0.0);
        assert_eq!(l.covariance, 0.0);
        assert!((l.total - 2.0 * l.variance).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = small_model(3);
        let before = m.store.clone();
        let mut spec = DatasetSpec::defaults(SignalKind::Sho, 8, 0, true);
        spec.grid = crate::signal::TimeGrid::new(64, 0.16, 0.0).unwrap();
        spec.shift_prior = crate::signal::ShiftPrior::default_for(&spec.grid);
        let ds = generate_dataset(&spec).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let hist = pretrain(&mut m, &ds, &cfg, 0).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].epoch, 0);
        assert_eq!(m.store, before);
    }

    #[test]
    fn pretraining_rejects_unpaired_data() {
        let mut m = small_model(3);
        let mut spec = DatasetSpec::defaults(SignalKind::Sho, 4, 0, false);
        spec.grid = crate::signal::TimeGrid::new(64, 0.16, 0.0).unwrap();
        spec.shift_prior = crate::signal::ShiftPrior::default_for(&spec.grid);
        let ds = generate_dataset(&spec).unwrap();
        assert!(pretrain(&mut m, &ds, &PretrainConfig::default(), 0).is_err());
    }

    #[test]
    fn freezing_removes_exactly_the_conv_parameters() {
        let mut m = small_model(4);
        let total = m.store.trainable_count();
        let conv = m.conv_param_count();
        assert_eq!(freeze_conv(&mut m.store), conv);
        assert_eq!(m.store.trainable_count(), total - conv);
    }

    #[test]
    fn separated_point_clusters_have_zero_ratio() {
        let pts = vec![
            ([0.0, 0.0, 0.0], 0),
            ([0.0, 0.0, 0.0], 0),
            ([1.0, 2.0, 3.0], 1),
            ([1.0, 2.0, 3.0], 1),
        ];
        assert_eq!(cluster_separation(&pts).unwrap(), 0.0);
        assert!(cluster_separation(&pts[..3]).is_err());
        assert!(cluster_separation(&[([0.0; 3], 0), ([1.0; 3], 0)]).is_err());
    }
}
