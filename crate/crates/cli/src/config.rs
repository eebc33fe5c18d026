//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use freqlens::attacks::{self, AttackKind, AttackSpec, DEFAULT_ALPHA, DEFAULT_EPSILON, DEFAULT_KAPPA, DEFAULT_SIGMA};
use freqlens::data::{self, Dataset, SynthConfig};
use freqlens::nn::ResNetConfig;
use freqlens::spectral::DiffMode;
use freqlens::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives weight initialization, batch order, augmentation and attacks.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// ResNet builder arguments; class and channel counts follow the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth_blocks: usize,
    pub width: usize,
    pub quant_bits: u32,
    pub fat: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth_blocks: 3,
            width: 1,
            quant_bits: 32,
            fat: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Synth,
    Cifar10,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    /// CIFAR-10 binary batches, relative to the config file.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// Keep only these classes, relabelled `0..n` in the listed order.
    pub classes: Option<Vec<usize>>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Table columns in order, e.g. `natural`, `gn`, `fgsm`, `pgd-20`.
    pub attacks: Vec<String>,
    /// Test examples evaluated (0 = all).
    pub size: usize,
    pub lpf_degree: Option<usize>,
    /// Filter only the defender's input; attacks see the bare model.
    pub oblivious: bool,
    pub epsilon: f32,
    pub alpha: f32,
    pub sigma: f32,
    pub kappa: f32,
    /// Examples in the batch used by `spectra` and `cka`.
    pub probe_size: usize,
    /// Attack for the input-difference spectra.
    pub diff_attack: Option<String>,
    pub diff_mode: DiffMode,
    /// Attack applied to the CKA probe batch; clean inputs when unset.
    pub cka_attack: Option<String>,
    /// Layers in the CKA map; every weighted layer when empty.
    pub cka_layers: Vec<String>,
    pub cka_pre_activation: bool,
    /// Fraction of layers on each side for the shallow/deep similarity.
    pub cka_split: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attacks: attacks::standard_suite()
                .iter()
                .map(|s| attacks::column_label(s.as_ref()))
                .collect(),
            size: 1000,
            lpf_degree: None,
            oblivious: false,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            sigma: DEFAULT_SIGMA,
            kappa: DEFAULT_KAPPA,
            probe_size: 64,
            diff_attack: None,
            diff_mode: DiffMode::OfDifference,
            cka_attack: None,
            cka_layers: vec![],
            cka_pre_activation: false,
            cka_split: 0.5,
        }
    }
}

impl EvalConfig {
    /// Column name to attack (`None` for clean inputs) with this section's
    /// budgets applied.
    pub fn attack(&self, name: &str) -> Result<Option<AttackSpec>> {
        let Some(mut spec) = attacks::parse_column(name)? else {
            return Ok(None);
        };
        match spec.kind {
            AttackKind::Gn => spec.sigma = self.sigma,
            AttackKind::Fgsm => {
                spec.epsilon = self.epsilon;
                spec.alpha = self.epsilon;
            }
            _ => {
                spec.epsilon = self.epsilon;
                spec.alpha = self.alpha;
                spec.kappa = self.kappa;
            }
        }
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn columns(&self) -> Result<Vec<(String, Option<AttackSpec>)>> {
        self.attacks
            .iter()
            .map(|a| Ok((attacks::column_label(self.attack(a)?.as_ref()), self.attack(a)?)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    LpfDegree,
    BatchSize,
    QuantBits,
    Augmentation,
}

impl Axis {
    /// Config key the axis sets.
    pub fn key(self) -> &'static str {
        match self {
            Axis::LpfDegree => "eval.lpf_degree",
            Axis::BatchSize => "train.batch_size",
            Axis::QuantBits => "model.quant_bits",
            Axis::Augmentation => "train.augmentation",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::LpfDegree => "lpf_degree",
            Axis::BatchSize => "batch_size",
            Axis::QuantBits => "quant_bits",
            Axis::Augmentation => "augmentation",
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Axis::LpfDegree => "LPF",
            Axis::BatchSize => "Batch size",
            Axis::QuantBits => "Bits",
            Axis::Augmentation => "Augmentation",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: Option<Axis>,
    pub values: Vec<toml::Value>,
}

pub fn value_string(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parsed configuration plus where it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

/// One `key.path = value` assignment applied on top of the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `key.path=value`; the value is read as TOML, and a bare word
    /// that is not valid TOML becomes a string.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
        if key.trim().is_empty() {
            bail!("override `{spec}` has an empty key");
        }
        Ok(Self::new(key.trim(), parse_value(raw.trim())))
    }
}

/// Reads `path` (or the defaults when `None`) and applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Loaded> {
    let (text, name, base_dir) = match path {
        Some(p) => (
            std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            p.display().to_string(),
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (String::new(), "<defaults>".to_string(), PathBuf::from(".")),
    };
    // Parse the file on its own first so errors point at its lines, then
    // apply overrides to the fully defaulted document.
    let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| anyhow!("{name}: {e}"))?;
    if !overrides.is_empty() {
        let mut doc = to_table(&config)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| anyhow!("{name} with overrides: {e}"))?;
    }
    config.validate()?;
    let hash = config_hash(&config)?;
    Ok(Loaded { config, base_dir, hash })
}

fn apply_override(doc: &mut toml::Table, o: &Override) -> Result<()> {
    let parts: Vec<&str> = o.key.split('.').map(str::trim).collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{}`: `{p}` is not a section", o.key))?;
    }
    table.insert(last.to_string(), o.value.clone());
    Ok(())
}

/// `config` with one more override applied.
pub fn with_override(config: &ExperimentConfig, o: &Override) -> Result<ExperimentConfig> {
    let mut doc = to_table(config)?;
    apply_override(&mut doc, o)?;
    let c: ExperimentConfig = toml::Value::Table(doc).try_into()?;
    c.validate()?;
    Ok(c)
}

fn to_table(config: &ExperimentConfig) -> Result<toml::Table> {
    match toml::Value::try_from(config)? {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("a struct serializes to a table"),
    }
}

pub fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form. The
/// output directory does not take part.
pub fn config_hash(c: &ExperimentConfig) -> Result<String> {
    let c = ExperimentConfig {
        output_dir: PathBuf::new(),
        ..c.clone()
    };
    Ok(short_digest(&serde_json::to_vec(&c)?))
}

pub fn short_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    /// The training section with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate().context("[train]")?;
        self.eval.columns().context("[eval] attacks")?;
        if !(self.eval.cka_split > 0.0 && self.eval.cka_split <= 1.0) {
            bail!("[eval] cka_split must lie in (0, 1]");
        }
        if let Some(a) = &self.eval.diff_attack {
            self.eval.attack(a).context("[eval] diff_attack")?;
        }
        if let Some(a) = &self.eval.cka_attack {
            self.eval.attack(a).context("[eval] cka_attack")?;
        }
        if self.eval.probe_size == 0 {
            bail!("[eval] probe_size must be positive");
        }
        if self.data.source == Source::Cifar10 && self.data.train_files.is_empty() && self.data.test_files.is_empty() {
            bail!("[data] source = \"cifar10\" needs train_files and/or test_files");
        }
        Ok(())
    }

    pub fn resnet(&self, data: &Dataset) -> ResNetConfig {
        ResNetConfig {
            depth_blocks: self.model.depth_blocks,
            width: self.model.width,
            num_classes: data.num_classes,
            input_channels: data.train.dims().1.max(data.test.dims().1),
            quant_bits: self.model.quant_bits,
            fat: self.model.fat,
        }
    }

    pub fn dataset(&self, base_dir: &Path) -> Result<Dataset> {
        let mut ds = match self.data.source {
            Source::Synth => self.synth.generate()?,
            Source::Cifar10 => {
                let abs = |v: &[PathBuf]| v.iter().map(|p| base_dir.join(p)).collect::<Vec<_>>();
                data::load_cifar10_bin(&abs(&self.data.train_files), &abs(&self.data.test_files))?
            }
        };
        if let Some(classes) = &self.data.classes {
            if classes.len() < 2 || classes.iter().any(|&c| c >= ds.num_classes) {
                bail!("[data] classes must list at least two labels below {}", ds.num_classes);
            }
            ds.train = ds.train.filter_classes(classes);
            ds.test = ds.test.filter_classes(classes);
            ds.num_classes = classes.len();
        }
        if let Some(n) = self.data.train_limit {
            ds.train = ds.train.take(n);
        }
        if let Some(n) = self.data.test_limit {
            ds.test = ds.test.take(n);
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("exp.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_file_is_the_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        let a = load(Some(&p), &[]).unwrap();
        let b = load(None, &[]).unwrap();
        assert_eq!(a.config, b.config);
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.base_dir, dir.path());
        assert_eq!(a.config.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 3\n\n[train]\nepochs = 2\nbogus = 1\n");
        let e = format!("{:#}", load(Some(&p), &[]).unwrap_err());
        assert!(e.contains("line 5"), "{e}");
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn overrides_reach_sections_missing_from_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 1\n");
        let o = [
            Override::parse("train.inner_attack.steps=3").unwrap(),
            Override::parse("train.augmentation=A-cutmix").unwrap(),
            Override::parse("eval.lpf_degree=8").unwrap(),
        ];
        let c = load(Some(&p), &o).unwrap().config;
        assert_eq!(c.train.inner_attack.steps, 3);
        assert_eq!(c.train.augmentation.to_string(), "A-cutmix");
        assert_eq!(c.eval.lpf_degree, Some(8));
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn override_values_parse_as_toml() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("\"x y\""), toml::Value::String("x y".into()));
        assert_eq!(parse_value("pgd-20"), toml::Value::String("pgd-20".into()));
        assert!(Override::parse("no-equals").is_err());
        assert!(Override::parse("=3").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        for o in [
            "train.epochs=-1",
            "eval.cka_split=0.0",
            "eval.attacks=[\"pgd-x\"]",
            "eval.probe_size=0",
            "model.nope=1",
        ] {
            assert!(load(None, &[Override::parse(o).unwrap()]).is_err(), "{o} accepted");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let base = load(None, &[]).unwrap().hash;
        let moved = load(None, &[Override::new("output_dir", "elsewhere")]).unwrap().hash;
        let reseeded = load(None, &[Override::new("seed", 5)]).unwrap().hash;
        assert_eq!(base, moved);
        assert_ne!(base, reseeded);
        assert_eq!(base.len(), 16);
        assert!(base.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn hash_is_the_truncated_sha256_of_the_json() {
        let c = load(None, &[]).unwrap();
        let json = serde_json::to_vec(&ExperimentConfig {
            output_dir: PathBuf::new(),
            ..c.config.clone()
        })
        .unwrap();
        let full: String = Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(c.hash, full[..16]);
    }

    #[test]
    fn axis_keys_are_valid_overrides() {
        let c = load(None, &[]).unwrap().config;
        for (axis, v) in [
            (Axis::LpfDegree, toml::Value::Integer(4)),
            (Axis::BatchSize, toml::Value::Integer(16)),
            (Axis::QuantBits, toml::Value::Integer(2)),
            (Axis::Augmentation, toml::Value::String("A-mixup".into())),
        ] {
            with_override(&c, &Override::new(axis.key(), v)).unwrap();
        }
    }

    #[test]
    fn class_filter_and_limits_apply() {
        let c = load(
            None,
            &[
                Override::new("synth.classes", 3),
                Override::parse("data.classes=[2, 0]").unwrap(),
                Override::new("data.train_limit", 7),
            ],
        )
        .unwrap()
        .config;
        let ds = c.dataset(Path::new(".")).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.train.len(), 7);
        assert!(ds.test.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn the_full_scale_config_loads() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/full_scale.cfg");
        let c = load(Some(&p), &[]).unwrap().config;
        assert_eq!(c.train.epochs, 120);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!(c.train.lr_decay, vec![(60, 0.1), (90, 0.1), (110, 0.5)]);
    }
}
