//! Subcommand bodies.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{anyhow, bail};
use log::{error, info, warn};

use freqlens::attacks::{self, evaluate_against, AttackKind, AttackSpec, Classifier, LowPassed};
use freqlens::cka::{cka_matrix, shallow_deep_similarity, LayerFilter};
use freqlens::data::{probe_batch, Dataset, ImageBatch};
use freqlens::export::{self, fmt_f64, minmax, Provenance, Table};
use freqlens::nn::checkpoint::{self, CheckpointInfo};
use freqlens::nn::{build_resnet, LayerDesc, Network};
use freqlens::par;
use freqlens::spectral::{self, Normalization, SpectrumMap};
use freqlens::train::{self, stem_ratio, RunReport};

use crate::config::{self, parse_value, value_string, Axis, ExperimentConfig, Override};
use crate::{Classify, Common, Failure, SpectraMode};

/// Resolved config plus where outputs go and what they are stamped with.
struct Run {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    hash: String,
    out: PathBuf,
}

impl Run {
    /// Loads the config, then `--set` overrides, then the subcommand's flags.
    fn setup(common: &Common, flags: Vec<Override>) -> Result<Run, Failure> {
        let mut overrides = common
            .overrides
            .iter()
            .map(|s| Override::parse(s))
            .collect::<anyhow::Result<Vec<_>>>()
            .config()?;
        overrides.extend(flags);
        let loaded = config::load(common.config.as_deref(), &overrides).config()?;
        let out = common.out.clone().unwrap_or_else(|| loaded.config.output_dir.clone());
        info!("config hash {}", loaded.hash);
        Ok(Run {
            cfg: loaded.config,
            base_dir: loaded.base_dir,
            hash: loaded.hash,
            out,
        })
    }

    /// Folds an input file into the hash, so outputs for different
    /// checkpoints under one config do not collide.
    fn bind_input(&mut self, bytes: &[u8]) {
        let mixed = format!("{}:{}", self.hash, config::short_digest(bytes));
        self.hash = config::short_digest(mixed.as_bytes());
    }

    fn prov(&self) -> Provenance {
        Provenance::new(&self.hash, self.cfg.seed).with_source(source_version())
    }

    fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.out.join(format!("{stem}-{}.{ext}", self.hash))
    }

    fn write_csv(&self, stem: &str, table: &Table) -> Result<PathBuf, Failure> {
        let p = self.path(stem, "csv");
        export::write_csv(&p, table, &self.prov()).runtime()?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn write_pgm(&self, stem: &str, width: usize, height: usize, values: &[f64]) -> Result<PathBuf, Failure> {
        let p = self.path(stem, "pgm");
        export::write_pgm(&p, width, height, values, &self.prov()).runtime()?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    /// A spectrum as a graymap plus the exact values as CSV.
    fn write_map(&self, stem: &str, map: &SpectrumMap) -> Result<(), Failure> {
        self.write_csv(stem, &grid_table(map.width, &map.values))?;
        self.write_pgm(stem, map.width, map.height, &map.values)?;
        Ok(())
    }

    fn data(&self) -> Result<Dataset, Failure> {
        self.cfg.dataset(&self.base_dir).config()
    }

    fn checkpoint(&mut self, path: &Path, data: &Dataset) -> Result<(Network, CheckpointInfo), Failure> {
        let bytes = std::fs::read(path)
            .map_err(|e| anyhow!("reading checkpoint {}: {e}", path.display()))
            .config()?;
        let (net, info) = checkpoint::decode(&bytes)
            .map_err(|e| anyhow!("{}: {e}", path.display()))
            .runtime()?;
        let channels = data.train.dims().1.max(data.test.dims().1);
        if net.input_channels != channels || net.num_classes != data.num_classes {
            return Err(Failure::Config(anyhow!(
                "{} expects {} channels and {} classes; the dataset has {} and {}",
                path.display(),
                net.input_channels,
                net.num_classes,
                channels,
                data.num_classes
            )));
        }
        self.bind_input(&bytes);
        Ok((net, info))
    }

    fn eval_split(&self, data: &Dataset) -> ImageBatch {
        match self.cfg.eval.size {
            0 => data.test.clone(),
            n => data.test.take(n),
        }
    }

    fn probe(&self, data: &Dataset) -> Result<ImageBatch, Failure> {
        let p = data.test.take(self.cfg.eval.probe_size);
        if p.is_empty() {
            return Err(Failure::Config(anyhow!("the test split is empty")));
        }
        Ok(p)
    }
}

/// `git describe` of the tree the binary was built from, when available.
fn source_version() -> Option<String> {
    static V: OnceLock<Option<String>> = OnceLock::new();
    V.get_or_init(|| {
        let out = std::process::Command::new("git")
            .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty"])
            .output()
            .ok()?;
        out.status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
            .filter(|s| !s.is_empty())
    })
    .clone()
}

fn grid_table(width: usize, values: &[f64]) -> Table {
    let mut t = Table::new((0..width).map(|j| format!("c{j}")));
    for row in values.chunks(width) {
        t.push(row.iter().map(|&v| fmt_f64(v)));
    }
    t
}

fn print_table(t: &Table) {
    println!("{}", t.header.join("\t"));
    for r in &t.rows {
        println!("{}", r.join("\t"));
    }
}

pub fn train_model(cfg: &ExperimentConfig, data: &Dataset) -> anyhow::Result<(Network, RunReport)> {
    let net = build_resnet(&cfg.resnet(data), cfg.seed)?;
    Ok(train::train(net, data, &cfg.train_config())?)
}

fn aborted(report: &RunReport) -> anyhow::Result<()> {
    if let Some(e) = report.aborted {
        bail!(
            "loss became non-finite in epoch {e}; kept the weights from epoch {}",
            e - 1
        );
    }
    Ok(())
}

fn write_training(run: &Run, net: &Network, report: &RunReport) -> Result<PathBuf, Failure> {
    let info = CheckpointInfo {
        seed: run.cfg.seed,
        epoch: report.rows.len(),
        config_hash: run.hash.clone(),
    };
    let ck = run.path("model", "fql");
    checkpoint::save(&ck, net, &info).runtime()?;
    export::write_meta(&ck, &run.prov()).runtime()?;
    info!("wrote {}", ck.display());
    run.write_csv("metrics", &report.metrics_table())?;
    if report.initial_ratio.is_some() {
        run.write_csv("ratio", &report.ratio_table())?;
    }
    if !report.final_table.is_empty() {
        run.write_csv("final", &report.final_eval_table())?;
    }
    Ok(ck)
}

pub fn train(common: &Common) -> Result<(), Failure> {
    let run = Run::setup(common, vec![])?;
    let data = run.data()?;
    let (net, report) = train_model(&run.cfg, &data).runtime()?;
    write_training(&run, &net, &report)?;
    print_table(&report.metrics_table());
    aborted(&report).runtime()
}

fn check_lpf(cfg: &ExperimentConfig, data: &Dataset) -> anyhow::Result<()> {
    if let Some(d) = cfg.eval.lpf_degree {
        let (_, _, h, w) = data.test.dims();
        if d == 0 || d > h.min(w) {
            bail!("lpf_degree {d} outside 1..={}", h.min(w));
        }
    }
    Ok(())
}

/// `(column, accuracy)` for every configured attack column.
fn eval_row(cfg: &ExperimentConfig, net: &Network, split: &ImageBatch) -> anyhow::Result<Vec<(String, f64)>> {
    let filtered = cfg.eval.lpf_degree.map(|degree| LowPassed { inner: net, degree });
    let defender: &dyn Classifier = match &filtered {
        Some(f) => f,
        None => net,
    };
    let attacker: &dyn Classifier = if cfg.eval.oblivious { net } else { defender };
    cfg.eval
        .columns()?
        .into_iter()
        .map(|(label, spec)| {
            let acc = evaluate_against(attacker, defender, split, spec.as_ref(), cfg.seed)?;
            Ok((label, acc))
        })
        .collect()
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    lpf_degree: Option<usize>,
    oblivious: bool,
    attacks: &[String],
) -> Result<(), Failure> {
    let mut flags = vec![];
    if let Some(d) = lpf_degree {
        flags.push(Override::new("eval.lpf_degree", d as i64));
    }
    if oblivious {
        flags.push(Override::new("eval.oblivious", true));
    }
    if !attacks.is_empty() {
        flags.push(Override::new("eval.attacks", attacks.to_vec()));
    }
    let mut run = Run::setup(common, flags)?;
    let data = run.data()?;
    check_lpf(&run.cfg, &data).config()?;
    let (net, _) = run.checkpoint(checkpoint, &data)?;
    let split = run.eval_split(&data);
    let row = eval_row(&run.cfg, &net, &split).runtime()?;
    let mut t = Table::new(["attack", "accuracy"]);
    for (label, acc) in row {
        t.push([label, fmt_f64(acc)]);
    }
    print_table(&t);
    run.write_csv("eval", &t)?;
    Ok(())
}

pub fn spectra(
    common: &Common,
    mode: SpectraMode,
    checkpoints: &[PathBuf],
    attack: Option<&str>,
    diff_mode: Option<&str>,
) -> Result<(), Failure> {
    let mut flags = vec![];
    if let Some(a) = attack {
        flags.push(Override::new("eval.diff_attack", a));
    }
    if let Some(m) = diff_mode {
        flags.push(Override::new("eval.diff_mode", m));
    }
    let mut run = Run::setup(common, flags)?;
    let data = run.data()?;
    let single = |paths: &[PathBuf]| -> Result<PathBuf, Failure> {
        match paths {
            [p] => Ok(p.clone()),
            _ => Err(Failure::Config(anyhow!("this mode needs exactly one --checkpoint"))),
        }
    };
    match mode {
        SpectraMode::InputDiff => {
            let name =
                run.cfg.eval.diff_attack.clone().ok_or_else(|| {
                    Failure::Config(anyhow!("input-diff needs an attack (--attack or eval.diff_attack)"))
                })?;
            let spec = run.cfg.eval.attack(&name).config()?;
            let probe = run.probe(&data)?;
            let adv = match spec {
                None => probe.clone(),
                Some(AttackSpec {
                    kind: AttackKind::Gn,
                    sigma,
                    ..
                }) => attacks::gn(&probe, sigma, run.cfg.seed).runtime()?.adv,
                Some(s) => {
                    let (net, _) = run.checkpoint(&single(checkpoints)?, &data)?;
                    attacks::attack(&net, &probe, &s, run.cfg.seed).runtime()?.adv
                }
            };
            let norm = Normalization::Log1pMinMax;
            let clean = spectral::mean_spectrum(&probe, norm).runtime()?;
            let attacked = spectral::mean_spectrum(&adv, norm).runtime()?;
            let diff = spectral::spectrum_diff(&probe, &adv, run.cfg.eval.diff_mode, norm).runtime()?;
            run.write_map("spectrum-clean", &clean)?;
            run.write_map("spectrum-adv", &attacked)?;
            run.write_map("spectrum-diff", &diff)?;
        }
        SpectraMode::Kernel => {
            let (net, _) = run.checkpoint(&single(checkpoints)?, &data)?;
            let mut hf = Table::new(["layer", "hf_energy_fraction"]);
            let linear: Vec<&str> = net
                .layers
                .iter()
                .filter_map(|l| match l {
                    LayerDesc::Linear { name, .. } => Some(name.as_str()),
                    _ => None,
                })
                .collect();
            let convs = net
                .weighted_layer_names()
                .into_iter()
                .filter(|l| !linear.contains(&l.as_str()));
            for layer in convs {
                let ks = net
                    .effective_weight(&layer)
                    .and_then(|w| spectral::kernel_spectrum(&w))
                    .runtime()?;
                let stem = format!("kernel-{layer}");
                run.write_csv(&stem, &grid_table(ks.cols, &ks.values))?;
                let shown: Vec<f64> = ks.values.iter().map(|v| v.ln_1p()).collect();
                run.write_pgm(&stem, ks.cols, ks.rows, &minmax(&shown))?;
                hf.push([layer, fmt_f64(spectral::mean_hf_energy(&ks).runtime()?)]);
            }
            print_table(&hf);
            run.write_csv("kernel-hf", &hf)?;
        }
        SpectraMode::ActivationRatio => {
            if checkpoints.is_empty() {
                return Err(Failure::Config(anyhow!(
                    "activation-ratio needs at least one --checkpoint"
                )));
            }
            let probe = probe_batch(&data.train, run.cfg.train.batch_size);
            if probe.is_empty() {
                return Err(Failure::Config(anyhow!("the training split is empty")));
            }
            let mut t = Table::new(["checkpoint", "epoch", "R"]);
            for p in checkpoints {
                let (net, info) = run.checkpoint(p, &data)?;
                let r = stem_ratio(&net, &probe).runtime()?;
                t.push([p.display().to_string(), info.epoch.to_string(), fmt_f64(r)]);
            }
            print_table(&t);
            run.write_csv("activation-ratio", &t)?;
        }
    }
    Ok(())
}

pub fn cka(
    common: &Common,
    checkpoint: &Path,
    attack: Option<&str>,
    pre_activation: bool,
    layers: &[String],
) -> Result<(), Failure> {
    let mut flags = vec![];
    if let Some(a) = attack {
        flags.push(Override::new("eval.cka_attack", a));
    }
    if pre_activation {
        flags.push(Override::new("eval.cka_pre_activation", true));
    }
    if !layers.is_empty() {
        flags.push(Override::new("eval.cka_layers", layers.to_vec()));
    }
    let mut run = Run::setup(common, flags)?;
    let data = run.data()?;
    let (net, _) = run.checkpoint(checkpoint, &data)?;
    let known = net.weighted_layer_names();
    if let Some(l) = run.cfg.eval.cka_layers.iter().find(|l| !known.contains(l)) {
        return Err(Failure::Config(anyhow!(
            "no conv or linear layer named `{l}`; known layers: {}",
            known.join(", ")
        )));
    }
    let probe = run.probe(&data)?;
    let spec = match &run.cfg.eval.cka_attack {
        Some(a) => run.cfg.eval.attack(a).config()?,
        None => None,
    };
    let input = match spec {
        Some(s) => attacks::attack(&net, &probe, &s, run.cfg.seed).runtime()?.adv,
        None => probe,
    };
    let filter = LayerFilter {
        layers: (!run.cfg.eval.cka_layers.is_empty()).then(|| run.cfg.eval.cka_layers.clone()),
        pre_activation: run.cfg.eval.cka_pre_activation,
    };
    let m = cka_matrix(&net, &input, &filter).runtime()?;
    run.write_csv("cka", &Table::from_matrix(&m.layers, &m.values))?;
    run.write_pgm("cka", m.len(), m.len(), &m.values)?;
    let split = run.cfg.eval.cka_split;
    let sd = shallow_deep_similarity(&m, split).runtime()?;
    let mut t = Table::new(["split", "shallow_deep_similarity"]);
    t.push([fmt_f64(split), fmt_f64(sd)]);
    print_table(&t);
    run.write_csv("cka-summary", &t)?;
    Ok(())
}

/// Config for one sweep row. `none` on the LPF axis means no filter.
fn row_config(base: &ExperimentConfig, axis: Axis, value: &toml::Value) -> anyhow::Result<ExperimentConfig> {
    if axis == Axis::LpfDegree && value.as_str().is_some_and(|s| s.eq_ignore_ascii_case("none")) {
        let mut c = base.clone();
        c.eval.lpf_degree = None;
        return Ok(c);
    }
    config::with_override(base, &Override::new(axis.key(), value.clone()))
}

fn sweep_row(
    base: &ExperimentConfig,
    axis: Axis,
    value: &toml::Value,
    data: &Dataset,
    split: &ImageBatch,
    model: Option<&Network>,
) -> anyhow::Result<Vec<(String, f64)>> {
    let cfg = row_config(base, axis, value)?;
    check_lpf(&cfg, data)?;
    let trained;
    let net = match model {
        Some(n) => n,
        None => {
            let (n, report) = train_model(&cfg, data)?;
            aborted(&report)?;
            trained = n;
            &trained
        }
    };
    eval_row(&cfg, net, split)
}

pub fn sweep(common: &Common, axis: Option<Axis>, values: &[String], checkpoint: Option<&Path>) -> Result<(), Failure> {
    let mut flags = vec![];
    if let Some(a) = axis {
        flags.push(Override::new("sweep.axis", a.name()));
    }
    if !values.is_empty() {
        let v: Vec<toml::Value> = values.iter().map(|s| parse_value(s.trim())).collect();
        flags.push(Override::new("sweep.values", v));
    }
    let mut run = Run::setup(common, flags)?;
    let axis = run
        .cfg
        .sweep
        .axis
        .ok_or_else(|| Failure::Config(anyhow!("sweep needs an axis (--axis or sweep.axis)")))?;
    let values = run.cfg.sweep.values.clone();
    if values.is_empty() {
        return Err(Failure::Config(anyhow!(
            "sweep needs values (--values or sweep.values)"
        )));
    }
    let data = run.data()?;
    // Only the LPF axis evaluates one model; every other axis retrains.
    let model = match (axis, checkpoint) {
        (Axis::LpfDegree, Some(p)) => Some(run.checkpoint(p, &data)?.0),
        (Axis::LpfDegree, None) => {
            let (net, report) = train_model(&run.cfg, &data).runtime()?;
            write_training(&run, &net, &report)?;
            aborted(&report).runtime()?;
            Some(net)
        }
        (_, Some(_)) => {
            warn!("--checkpoint is ignored on the {} axis", axis.name());
            None
        }
        (_, None) => None,
    };
    let columns = run.cfg.eval.columns().config()?;
    let split = run.eval_split(&data);
    let rows = par::map_indexed(values.len(), |i| {
        sweep_row(&run.cfg, axis, &values[i], &data, &split, model.as_ref())
    });

    let mut t = Table::new(
        std::iter::once(axis.column().to_string())
            .chain(columns.iter().map(|(l, _)| l.clone()))
            .chain(["status".to_string()]),
    );
    let mut failed = 0;
    for (v, r) in values.iter().zip(rows) {
        let v = value_string(v);
        match r {
            Ok(accs) => t.push(
                std::iter::once(v)
                    .chain(accs.iter().map(|(_, a)| fmt_f64(*a)))
                    .chain(["ok".to_string()]),
            ),
            Err(e) => {
                error!("{} = {v}: {e:#}", axis.name());
                failed += 1;
                t.push(
                    std::iter::once(v)
                        .chain(columns.iter().map(|_| String::new()))
                        .chain([format!("failed: {e:#}")]),
                );
            }
        }
    }
    print_table(&t);
    run.write_csv(&format!("sweep-{}", axis.name()), &t)?;
    if failed > 0 {
        return Err(Failure::PartialSweep {
            failed,
            total: values.len(),
        });
    }
    Ok(())
}

pub fn inspect(path: &Path, json: bool) -> Result<(), Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| anyhow!("reading checkpoint {}: {e}", path.display()))
        .config()?;
    let with_path = |e: freqlens::Error| anyhow!("{}: {e}", path.display());
    let (meta, _) = checkpoint::decode_metadata(&bytes).map_err(with_path).runtime()?;
    // Decoding the whole file also checks every tensor's length.
    let (net, _) = checkpoint::decode(&bytes).map_err(with_path).runtime()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&meta).runtime()?);
        return Ok(());
    }
    println!("format version  {}", meta.format_version);
    println!("seed            {}", meta.info.seed);
    println!("epoch           {}", meta.info.epoch);
    println!("config hash     {}", meta.info.config_hash);
    println!("input channels  {}", meta.input_channels);
    println!("classes         {}", meta.num_classes);
    println!("layers          {}", meta.layers.len());
    println!("parameters      {}", net.param_count());
    for p in &meta.params {
        let frozen = if p.trainable { "" } else { " (frozen)" };
        println!("  {:<28} {:?}{frozen}", p.name, p.shape);
    }
    Ok(())
}
