use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use symflow::config::{DatasetRole, RunConfig};
use symflow::embedding::{pretrain, EmbeddingModel, CONV_PREFIX};
use symflow::flow::{train_baseline, train_flow, PosteriorModel, TrainOutcome};
use symflow::io::{load_dataset, save_dataset};
use symflow::rng;
use symflow::signal::{
    add_white_noise, clean_signal, generate_dataset, Dataset, Record, SignalKind, SignalParams,
};
use symflow::validation::{
    calibration_levels, crb_widths, grid_posterior, pp_curve, width_report, PpCurve,
    ShiftHandling,
};

use crate::args::{Cli, Command, Common, Role};
use crate::manifest::{sha256_hex, verify_dir, Check, RunManifest};
use crate::tables;
use crate::{CliError, CliResult};

pub const MIN_CALIBRATION_INSTANCES: usize = 50;

/// Loads the configuration file or the defaults for `--model`, then applies
/// command-line overrides.
pub fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            symflow::Error::Io(io) => CliError::Io(format!("{}: {io}", p.display())),
            other => CliError::Config(format!("{}: {other}", p.display())),
        })?,
        None => RunConfig::defaults(common.model.map_or(SignalKind::Sho, Into::into)),
    };
    if let Some(m) = common.model {
        let kind: SignalKind = m.into();
        if kind != cfg.kind {
            return Err(CliError::Config(format!(
                "--model {kind} contradicts configuration model {}",
                cfg.kind
            )));
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory, artifact list and timing for one command.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    started: Instant,
    artifacts: Vec<String>,
}

impl Run {
    fn new(cfg: RunConfig, out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let mut run = Self {
            cfg,
            out: out.to_path_buf(),
            started: Instant::now(),
            artifacts: Vec::new(),
        };
        let text = run.cfg.to_json()? + "\n";
        run.write("config.json", text.as_bytes())?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.record(name);
        Ok(())
    }

    fn table(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn finish(self, command: &str, metrics: serde_json::Value) -> CliResult<()> {
        let artifacts = self
            .artifacts
            .iter()
            .map(|a| RunManifest::artifact(&self.out, a))
            .collect::<CliResult<_>>()?;
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(self.cfg.to_json()?.as_bytes()),
            seed: self.cfg.seed,
            artifacts,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            metrics,
        }
        .write(&self.out)?;
        Ok(())
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    if let Command::Verify = cli.command {
        return verify(&cli.common.out);
    }
    let cfg = resolve_config(&cli.common)?;
    let mut run = Run::new(cfg, &cli.common.out)?;
    let metrics = match &cli.command {
        Command::Simulate { role, n, sigma } => simulate(&mut run, *role, *n, *sigma)?,
        Command::Pretrain { dataset, epochs, n } => cmd_pretrain(&mut run, dataset.as_deref(), *epochs, *n)?,
        Command::Train {
            dataset,
            embedding,
            epochs,
            n,
        } => cmd_train(&mut run, dataset.as_deref(), Some(embedding), *epochs, *n)?,
        Command::TrainBaseline { dataset, epochs, n } => cmd_train(&mut run, dataset.as_deref(), None, *epochs, *n)?,
        Command::Infer {
            flow,
            data,
            index,
            simulate_truth,
            shift,
            n_samples,
            oracle,
        } => infer(
            &mut run,
            flow,
            data.as_deref(),
            *index,
            simulate_truth.as_deref(),
            *shift,
            *n_samples,
            *oracle,
        )?,
        Command::Calibrate {
            flow,
            n_instances,
            n_samples,
        } => calibrate(&mut run, flow, *n_instances, *n_samples)?,
        Command::Crb { params, sigma } => crb(&mut run, params, *sigma)?,
        Command::Complexity { checkpoints, batch } => complexity(&mut run, checkpoints, *batch)?,
        Command::Verify => unreachable!(),
    };
    run.finish(cli.command.name(), metrics)
}

fn simulate(run: &mut Run, role: Role, n: Option<usize>, sigma: Option<f64>) -> CliResult<serde_json::Value> {
    let (role, default_n, name) = match role {
        Role::Pretrain => (DatasetRole::Pretrain, run.cfg.data.n_pretrain, "pretrain.dataset"),
        Role::Train => (DatasetRole::Train, run.cfg.data.n_train, "train.dataset"),
        Role::Test => (DatasetRole::Test, run.cfg.calibrate.n_instances, "test.dataset"),
    };
    let mut spec = run.cfg.dataset_spec(role, n.unwrap_or(default_n))?;
    if let Some(s) = sigma {
        spec.sigma = s;
        spec.validate()?;
    }
    let ds = generate_dataset(&spec)?;
    save_dataset(&run.path(name), &ds)?;
    run.record(name);
    println!(
        "wrote {} records of {} samples to {}",
        ds.len(),
        spec.grid.n_samples,
        run.path(name).display()
    );
    Ok(json!({ "records": ds.len(), "n_samples": spec.grid.n_samples }))
}

fn dataset_for(run: &Run, path: Option<&Path>, role: DatasetRole, n: usize) -> CliResult<Dataset> {
    let ds = match path {
        Some(p) => load_dataset(p).map_err(|e| match e {
            symflow::Error::Io(io) => CliError::Io(format!("{}: {io}", p.display())),
            other => CliError::from(other),
        })?,
        None => generate_dataset(&run.cfg.dataset_spec(role, n)?)?,
    };
    if ds.kind() != run.cfg.kind || *ds.grid() != run.cfg.data.grid {
        return Err(CliError::Config("dataset model or grid differs from the configuration".into()));
    }
    Ok(ds)
}

fn cmd_pretrain(run: &mut Run, dataset: Option<&Path>, epochs: Option<usize>, n: Option<usize>) -> CliResult<serde_json::Value> {
    let ds = dataset_for(run, dataset, DatasetRole::Pretrain, n.unwrap_or(run.cfg.data.n_pretrain))?;
    let seeds = run.cfg.seeds();
    let mut model = EmbeddingModel::new(run.cfg.encoder.clone(), run.cfg.expander.clone(), seeds.init)?;
    let mut cfg = run.cfg.pretrain.clone();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let hist = pretrain(&mut model, &ds, &cfg, seeds.pretrain)?;
    model.save(&run.path("embedding.ckpt"))?;
    run.record("embedding.ckpt");
    run.table("pretrain_loss.csv", |w| tables::pretrain_losses(w, &hist))?;
    if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
        println!(
            "epoch 0: inv {:.4e} var {:.4e} cov {:.4e}; epoch {}: inv {:.4e} var {:.4e} cov {:.4e}",
            first.invariance, first.variance, first.covariance, last.epoch, last.invariance, last.variance, last.covariance
        );
    }
    Ok(json!({ "epochs": hist.len(), "final": hist.last() }))
}

fn cmd_train(
    run: &mut Run,
    dataset: Option<&Path>,
    embedding: Option<&PathBuf>,
    epochs: Option<usize>,
    n: Option<usize>,
) -> CliResult<serde_json::Value> {
    let ds = dataset_for(run, dataset, DatasetRole::Train, n.unwrap_or(run.cfg.data.n_train))?;
    let seeds = run.cfg.seeds();
    let mut tcfg = run.cfg.train.clone();
    if let Some(e) = epochs {
        tcfg.epochs = e;
    }
    let prior = run.cfg.data.prior;
    let (name, mut model) = match embedding {
        Some(p) => {
            let emb = EmbeddingModel::load(p).map_err(|e| match e {
                symflow::Error::Io(io) => CliError::Io(format!("{}: {io}", p.display())),
                other => CliError::from(other),
            })?;
            let m = PosteriorModel::embedded(
                run.cfg.kind,
                emb.encoder.config.clone(),
                &emb.store,
                run.cfg.flow.clone(),
                &prior,
                seeds.init,
            )?;
            ("flow", m)
        }
        None => (
            "baseline",
            PosteriorModel::baseline(run.cfg.kind, run.cfg.baseline.clone(), run.cfg.baseline_flow.clone(), &prior, seeds.init)?,
        ),
    };
    if model.input_len() != run.cfg.data.grid.n_samples {
        return Err(CliError::Config("checkpoint input length differs from the grid".into()));
    }
    let c = model.complexity(1);
    println!("params: trainable {} total {}", c.trainable_params, c.total_params);
    let conv_before = model.store.subset(CONV_PREFIX);
    let outcome: TrainOutcome = if embedding.is_some() {
        train_flow(&mut model, &ds, &tcfg, seeds.train)?
    } else {
        train_baseline(&mut model, &ds, &tcfg, seeds.train)?
    };
    if model.store.subset(CONV_PREFIX) != conv_before {
        return Err(CliError::Numeric("frozen conv parameters changed during training".into()));
    }
    model.save(&run.path(&format!("{name}.ckpt")))?;
    run.record(&format!("{name}.ckpt"));
    run.table(&format!("{name}_loss.csv"), |w| {
        tables::flow_losses(w, outcome.initial_val, &outcome.history)
    })?;
    println!(
        "validation loss: init {:.6} best {:.6} (epoch {:?})",
        outcome.initial_val, outcome.best_val, outcome.best_epoch
    );
    Ok(json!({
        "trainable_params": c.trainable_params,
        "total_params": c.total_params,
        "initial_val": outcome.initial_val,
        "best_val": outcome.best_val,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
    }))
}

fn load_model(run: &Run, path: &Path) -> CliResult<PosteriorModel> {
    let m = PosteriorModel::load(path).map_err(|e| match e {
        symflow::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::from(other),
    })?;
    if m.kind != run.cfg.kind || m.input_len() != run.cfg.data.grid.n_samples {
        return Err(CliError::Config(format!(
            "{} was trained for {} with {} samples",
            path.display(),
            m.kind,
            m.input_len()
        )));
    }
    Ok(m)
}

#[allow(clippy::too_many_arguments)]
fn infer(
    run: &mut Run,
    flow: &Path,
    data: Option<&Path>,
    index: usize,
    truth: Option<&[f64]>,
    shift: usize,
    n_samples: Option<usize>,
    oracle: bool,
) -> CliResult<serde_json::Value> {
    let model = load_model(run, flow)?;
    let seeds = run.cfg.seeds();
    let record = match (data, truth) {
        (Some(p), _) => {
            let ds = dataset_for(run, Some(p), DatasetRole::Test, 0)?;
            ds.records
                .get(index)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("record {index} out of range ({})", ds.len())))?
        }
        (None, Some(t)) => {
            let theta: [f64; 2] = t
                .try_into()
                .map_err(|_| CliError::Config("--simulate-truth takes two values".into()))?;
            let params = SignalParams::new(run.cfg.kind, theta)?;
            let grid = run.cfg.data.grid;
            let clean = clean_signal(&params, &grid, shift)?;
            let mut noise = rng::stage_stream(seeds.infer, "infer-noise");
            Record {
                params,
                shift: shift as f64 * grid.dt,
                data: add_white_noise(&clean, run.cfg.data.sigma, &mut noise)?,
                data_aug: None,
            }
        }
        (None, None) => return Err(CliError::Config("pass --data or --simulate-truth".into())),
    };
    let n = n_samples.unwrap_or(run.cfg.infer.n_samples);
    let prior = run.cfg.data.prior;
    let ctx = model.context(&record.data)?;
    let s = model.sample(n, &ctx, &prior, &mut rng::stage_stream(seeds.infer, "infer-samples"))?;
    run.table("samples.csv", |w| tables::samples(w, model.kind, &s.samples))?;
    let (mean, std) = (s.mean(), s.std());
    let names = model.kind.param_names();
    for k in 0..2 {
        println!("{}: mean {:.6} std {:.6} (truth {:.6})", names[k], mean[k], std[k], record.params.values()[k]);
    }
    let mut metrics = json!({ "n_samples": n, "mean": mean, "std": std, "outside_prior": s.n_outside() });
    if oracle {
        let g = grid_posterior(
            &record.data,
            &prior,
            run.cfg.data.sigma,
            run.cfg.infer.grid_resolution,
            ShiftHandling::Marginalize,
            &run.cfg.data.shift_prior,
        )?;
        let crb = crb_widths(&record.params, &record.data.grid, run.cfg.data.sigma)?;
        let rep = width_report(&record.params, mean, std, &g, &crb);
        run.table("widths.csv", |w| rep.write_csv(w).map_err(std::io::Error::other))?;
        for r in &rep.rows {
            println!(
                "{}: flow {:.5} oracle {:.5} crb {:.5} flow/oracle {:.3} oracle/crb {:.3}",
                r.name, r.flow_std, r.oracle_std, r.crb, r.flow_over_oracle, r.oracle_over_crb
            );
        }
        metrics["widths"] = serde_json::to_value(&rep.rows).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(metrics)
}

fn calibrate(run: &mut Run, flow: &Path, n_instances: Option<usize>, n_samples: Option<usize>) -> CliResult<serde_json::Value> {
    let n_inst = n_instances.unwrap_or(run.cfg.calibrate.n_instances);
    if n_inst < MIN_CALIBRATION_INSTANCES {
        return Err(CliError::Config(format!(
            "calibration needs at least {MIN_CALIBRATION_INSTANCES} instances, got {n_inst}"
        )));
    }
    let n_samp = n_samples.unwrap_or(run.cfg.calibrate.n_samples);
    let model = load_model(run, flow)?;
    let seeds = run.cfg.seeds();
    let ds = generate_dataset(&run.cfg.dataset_spec(DatasetRole::Test, n_inst)?)?;
    let levels = calibration_levels(&model, &ds.records, n_samp, &run.cfg.data.prior, seeds.calibrate)?;
    run.table("levels.csv", |w| tables::levels(w, model.kind, &levels))?;
    let n_levels = run.cfg.calibrate.n_levels;
    let names = model.kind.param_names();
    let mut curves: Vec<(String, PpCurve)> = vec![(
        "joint".into(),
        pp_curve(&levels.iter().map(|l| l.joint).collect::<Vec<_>>(), n_levels)?,
    )];
    for k in 0..2 {
        let ls: Vec<f64> = levels.iter().map(|l| l.marginal[k]).collect();
        curves.push((names[k].to_string(), pp_curve(&ls, n_levels)?));
    }
    let mut summary = Vec::new();
    writeln!(summary, "curve,n,ks_stat,ks_pvalue,within_3sigma")?;
    let mut metrics = serde_json::Map::new();
    for (name, c) in &curves {
        run.table(&format!("pp_{name}.csv"), |w| c.write_csv(w).map_err(std::io::Error::other))?;
        writeln!(summary, "{name},{},{:.16e},{:.16e},{}", c.n, c.ks_stat, c.ks_pvalue, c.within_band(3))?;
        println!("{name}: KS {:.4} p {:.4} within 3-sigma band: {}", c.ks_stat, c.ks_pvalue, c.within_band(3));
        metrics.insert(name.clone(), json!({ "ks_stat": c.ks_stat, "ks_pvalue": c.ks_pvalue, "within_3sigma": c.within_band(3) }));
    }
    run.write("calibration.csv", &summary)?;
    Ok(serde_json::Value::Object(metrics))
}

fn crb(run: &mut Run, params: &[f64], sigma: Option<f64>) -> CliResult<serde_json::Value> {
    let theta: [f64; 2] = params
        .try_into()
        .map_err(|_| CliError::Config("--params takes two values".into()))?;
    let p = SignalParams::new(run.cfg.kind, theta)?;
    let sigma = sigma.unwrap_or(run.cfg.data.sigma);
    let c = crb_widths(&p, &run.cfg.data.grid, sigma)?;
    run.table("crb.csv", |w| tables::crb(w, theta, &c))?;
    for (k, name) in c.kind.param_names().iter().enumerate() {
        println!("{name} = {}: crb width {:.6}", theta[k], c.widths[k]);
    }
    Ok(json!({ "widths": c.widths }))
}

fn complexity(run: &mut Run, checkpoints: &[PathBuf], batch: usize) -> CliResult<serde_json::Value> {
    let mut rows = Vec::new();
    for p in checkpoints {
        let m = load_model(run, p)?;
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        let c = m.complexity(batch);
        println!(
            "{name}: trainable {} total {} MACs at batch {batch}: {:.3e}",
            c.trainable_params, c.total_params, c.macs_per_forward as f64
        );
        rows.push((name, c));
    }
    run.table("complexity.csv", |w| tables::complexity(w, &rows))?;
    Ok(serde_json::to_value(&rows).map_err(|e| CliError::Io(e.to_string()))?)
}

fn verify(out: &Path) -> CliResult<()> {
    let results = verify_dir(out)?;
    let mut bad = 0;
    for (cmd, path, check) in &results {
        let tag = match check {
            Check::Ok => "ok",
            Check::Missing => "MISSING",
            Check::Mismatch => "MISMATCH",
        };
        if *check != Check::Ok {
            bad += 1;
        }
        println!("{tag} {cmd} {path}");
    }
    if bad > 0 {
        return Err(CliError::Io(format!("{bad} of {} artifacts failed verification", results.len())));
    }
    Ok(())
}
