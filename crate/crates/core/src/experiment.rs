//! Config-driven experiments.
//!
//! An experiment is a TOML file naming a pipeline (`kind`), a seed, a data
//! source and kind-specific parameters, plus optional `[[check]]` assertions
//! on the metrics it computes. Relative paths inside a config resolve
//! against the config file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::Deserialize;

use crate::anchors::{
    check_general_position, covering_radius, gradient_check, sample_anchors_iid, train_layer_sgd, unit_square_grid,
    Loss, TrainingConfig,
};
use crate::error::{Error, Result};
use crate::graph_layer::{Activation, GraphLayer, Network, PairwiseFunction};
use crate::io::{self, Artifact, ArtifactKind, CsvTable};
use crate::regions::{
    epsilon_partition, sample_discrete, sample_regioned, sample_uniform_box, unlabeled_dataset, DiscreteSpec,
    LabeledDataset, RegionSpec,
};
use crate::separators::{
    construct_conv_separator, construct_discrete_separator, construct_linear_separator, construct_relu_separator,
    conv_pair_margin, sample_patched, BiasMode, PatchSpec,
};
use crate::sufficiency::{
    collision_report, default_k, estimation_gap, region_separation_report, CodeMatrix, GapMetrics, GapReport,
    DEFAULT_COLLISION_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Generate,
    Construct,
    Train,
    Evaluate,
    Sweep,
    Conv,
}

impl Kind {
    pub fn name(&self) -> &'static str {
        match self {
            Kind::Generate => "generate",
            Kind::Construct => "construct",
            Kind::Train => "train",
            Kind::Evaluate => "evaluate",
            Kind::Sweep => "sweep",
            Kind::Conv => "conv",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    RegionSpec {
        path: PathBuf,
        n: usize,
    },
    SeparatedBalls {
        count: usize,
        dim: usize,
        radius: f64,
        min_separation: f64,
        low: f64,
        high: f64,
        classes: usize,
        n: usize,
    },
    UniformBox {
        dim: usize,
        n: usize,
    },
    Discrete {
        path: PathBuf,
        n: usize,
    },
    Patches {
        path: PathBuf,
        n: usize,
    },
    Dataset {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Saved layer; when absent a layer with i.i.d. anchors is drawn.
    pub path: Option<PathBuf>,
    pub pairwise: Option<PairwiseFunction>,
    pub activation: Option<Activation>,
    pub m: Option<usize>,
    /// Redraw anchors until their Gram matrix is nonsingular.
    #[serde(default)]
    pub require_general_position: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparatorKind {
    Discrete,
    Linear,
    Relu,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeSource {
    /// Region centers, support points or zero-padded patterns of the data.
    #[default]
    Data,
    /// The standard basis of the input space.
    Identity,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureProbe {
    pub separator: SeparatorKind,
    #[serde(default)]
    pub bias_mode: BiasMode,
    #[serde(default)]
    pub representatives: RepresentativeSource,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructConfig {
    pub separator: SeparatorKind,
    #[serde(default)]
    pub bias_mode: BiasMode,
    /// Second layer built over the first layer's representative codes.
    pub then: Option<SeparatorKind>,
    /// Noise radius for the ReLU own-coordinate lower bound.
    pub own_coordinate_delta: Option<f64>,
    /// Constructions expected to be rejected with a code collision.
    #[serde(default)]
    pub expect_failure: Vec<FailureProbe>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub m: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_clip: Option<f64>,
    pub loss: LossName,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Standard deviation of the initial readout entries.
    #[serde(default = "default_readout_scale")]
    pub readout_scale: f64,
    /// Number of random small instances for the finite-difference check.
    #[serde(default)]
    pub gradient_checks: usize,
}

fn default_activation() -> Activation {
    Activation::ReLU
}

fn default_readout_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Mse,
    CrossEntropy,
}

impl From<LossName> for Loss {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Mse => Loss::MeanSquaredError,
            LossName::CrossEntropy => Loss::CrossEntropy,
        }
    }
}

/// Neighbourhood size: an integer, `"sqrt"` (`ceil(√n)`) or `"lookup"`
/// (smallest region sample count minus one).
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum KSetting {
    Fixed(usize),
    Named(String),
}

impl Default for KSetting {
    fn default() -> Self {
        KSetting::Named("sqrt".into())
    }
}

impl KSetting {
    fn resolve(&self, data: &LabeledDataset) -> Result<usize> {
        match self {
            KSetting::Fixed(k) => Ok(*k),
            KSetting::Named(name) if name == "sqrt" => Ok(default_k(data.len())),
            KSetting::Named(name) if name == "lookup" => {
                let smallest = data
                    .region_sizes()
                    .into_iter()
                    .filter(|&s| s > 0)
                    .min()
                    .unwrap_or(0);
                if smallest < 2 {
                    return Err(Error::Config("lookup k needs at least two samples per region".into()));
                }
                Ok(smallest - 1)
            }
            KSetting::Named(other) => Err(Error::Config(format!(
                "k must be an integer, \"sqrt\" or \"lookup\", got \"{other}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    Layer,
    Raw,
    EpsilonPartition,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default)]
    pub k: KSetting,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub representation: Representation,
    /// Compute the sufficiency gap (needs labelled data).
    #[serde(default = "default_true")]
    pub gap: bool,
    pub eps: Option<f64>,
    pub lipschitz: Option<f64>,
}

fn default_tolerance() -> f64 {
    DEFAULT_COLLISION_TOL
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Gaussian-kernel layer, identity activation.
    Gaussian,
    /// Inner-product layer with ReLU, zero bias.
    Relu,
    /// Covering radius of the anchors alone.
    CoveringRadius,
}

impl Family {
    fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Relu => "relu",
            Family::CoveringRadius => "covering_radius",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub families: Vec<Family>,
    pub m_values: Vec<usize>,
    pub seeds: usize,
    #[serde(default)]
    pub k: KSetting,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Side of the probe grid on `[0, 1]²`; the data rows are probed otherwise.
    pub probe_grid: Option<usize>,
}

fn default_bandwidth() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub deltas: Vec<f64>,
}

/// Assertion on a metric; every bound given must hold.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub less_than: Option<f64>,
    pub greater_than: Option<f64>,
    pub equals: Option<f64>,
}

impl Check {
    fn bounds(&self) -> Vec<(&'static str, f64)> {
        [
            (">=", self.min),
            ("<=", self.max),
            ("<", self.less_than),
            (">", self.greater_than),
            ("==", self.equals),
        ]
        .into_iter()
        .filter_map(|(op, v)| v.map(|v| (op, v)))
        .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<DataConfig>,
    pub layer: Option<LayerConfig>,
    pub construct: Option<ConstructConfig>,
    pub train: Option<TrainConfig>,
    pub evaluate: Option<EvaluateConfig>,
    pub sweep: Option<SweepConfig>,
    pub conv: Option<ConvConfig>,
    #[serde(default)]
    pub check: Vec<Check>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        ExperimentConfig::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("`seed` is required (no implicit seeding)".into()))
    }

    fn require<'a, T>(&self, section: &'a Option<T>, name: &str) -> Result<&'a T> {
        section
            .as_ref()
            .ok_or_else(|| Error::Config(format!("kind `{}` requires a [{name}] section", self.kind)))
    }

    /// Checks that the sections the kind needs are present.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.require(&self.data, "data")?;
        match self.kind {
            Kind::Generate => {}
            Kind::Construct => {
                self.require(&self.construct, "construct")?;
            }
            Kind::Train => {
                self.require(&self.train, "train")?;
            }
            Kind::Evaluate => {
                let ev = self.require(&self.evaluate, "evaluate")?;
                if ev.representation == Representation::Layer {
                    self.require(&self.layer, "layer")?;
                }
                if ev.representation == Representation::EpsilonPartition && (ev.eps.is_none() || ev.lipschitz.is_none())
                {
                    return Err(Error::Config("epsilon_partition needs `eps` and `lipschitz`".into()));
                }
            }
            Kind::Sweep => {
                let sw = self.require(&self.sweep, "sweep")?;
                if sw.m_values.is_empty() || sw.families.is_empty() || sw.seeds == 0 {
                    return Err(Error::Config("sweep needs families, m_values and seeds > 0".into()));
                }
            }
            Kind::Conv => {
                self.require(&self.conv, "conv")?;
                if !matches!(self.data, Some(DataConfig::Patches { .. })) {
                    return Err(Error::Config("kind `conv` needs a `patches` data source".into()));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub metric: String,
    pub value: f64,
    pub condition: String,
    pub passed: bool,
}

/// Metrics in computation order, check results and written files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub metrics: Vec<(String, f64)>,
    pub checks: Vec<CheckResult>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push((name.into(), value));
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DATA_STREAM: u64 = 0;
const ANCHOR_STREAM: u64 = 1;
const READOUT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const GRADCHECK_STREAM: u64 = 4;

enum Generator {
    Regions(RegionSpec),
    Discrete(DiscreteSpec),
    Patches(PatchSpec),
    UniformBox(usize),
    Fixed,
}

struct Data {
    dataset: LabeledDataset,
    generator: Generator,
}

impl Data {
    fn load(cfg: &ExperimentConfig, seed: u64) -> Result<Data> {
        let source = cfg.require(&cfg.data, "data")?;
        let (generator, dataset) = match source {
            DataConfig::RegionSpec { path, n } => {
                let spec: RegionSpec = io::read_json(&cfg.resolve(path))?;
                let data = sample_regioned(&spec, *n, seed)?;
                (Generator::Regions(spec), data)
            }
            DataConfig::SeparatedBalls {
                count,
                dim,
                radius,
                min_separation,
                low,
                high,
                classes,
                n,
            } => {
                let spec = RegionSpec::separated_balls(
                    *count,
                    *dim,
                    *radius,
                    *min_separation,
                    *low,
                    *high,
                    *classes,
                    sub_seed(seed, DATA_STREAM),
                )?;
                let data = sample_regioned(&spec, *n, seed)?;
                (Generator::Regions(spec), data)
            }
            DataConfig::UniformBox { dim, n } => {
                let data = unlabeled_dataset(sample_uniform_box(*n, *dim, seed))?;
                (Generator::UniformBox(*dim), data)
            }
            DataConfig::Discrete { path, n } => {
                let spec: DiscreteSpec = io::read_json(&cfg.resolve(path))?;
                let data = sample_discrete(&spec, *n, seed)?;
                (Generator::Discrete(spec), data)
            }
            DataConfig::Patches { path, n } => {
                let spec: PatchSpec = io::read_json(&cfg.resolve(path))?;
                let data = sample_patched(&spec, *n, seed)?;
                (Generator::Patches(spec), data)
            }
            DataConfig::Dataset { path } => {
                let path = cfg.resolve(path);
                let data = match io::load_artifact(&path, ArtifactKind::Dataset)? {
                    Artifact::Dataset(d) => d,
                    _ => unreachable!("dataset kind requested"),
                };
                (Generator::Fixed, data)
            }
        };
        Ok(Data { dataset, generator })
    }

    /// Representatives as the columns of a `p × m` matrix.
    fn representatives(&self) -> Result<Array2<f64>> {
        match &self.generator {
            Generator::Regions(spec) => {
                let p = spec.dim();
                Ok(Array2::from_shape_fn((p, spec.regions.len()), |(i, j)| {
                    spec.regions[j].center[i]
                }))
            }
            Generator::Discrete(spec) => Ok(spec.support_matrix()),
            Generator::Patches(spec) => Ok(spec.padded_patterns()),
            Generator::UniformBox(_) | Generator::Fixed => Err(Error::Config(
                "this data source has no region representatives".into(),
            )),
        }
    }

    /// `m` i.i.d. draws from the input distribution as the columns of a
    /// `p × m` matrix. Fixed datasets fall back to resampling rows.
    fn fresh_anchors(&self, m: usize, seed: u64) -> Result<Array2<f64>> {
        if m == 0 {
            return Err(Error::InvalidParameter("anchor count must be positive".into()));
        }
        let rows = match &self.generator {
            Generator::Regions(spec) => sample_regioned(spec, m, seed)?.inputs().to_owned(),
            Generator::Discrete(spec) => sample_discrete(spec, m, seed)?.inputs().to_owned(),
            Generator::Patches(spec) => sample_patched(spec, m, seed)?.inputs().to_owned(),
            Generator::UniformBox(dim) => sample_uniform_box(m, *dim, seed),
            Generator::Fixed => return sample_anchors_iid(self.dataset.inputs(), m, seed),
        };
        Ok(rows.reversed_axes())
    }
}

fn count(v: usize) -> f64 {
    v as f64
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn gap_metrics(out: &mut Outcome, prefix: &str, report: &GapReport) {
    out.push(format!("{prefix}l2_gap"), report.l2_gap);
    out.push(format!("{prefix}max_tv_gap"), report.max_tv_gap);
    out.push(format!("{prefix}noise_floor"), report.noise_floor);
    out.push(format!("{prefix}noise_floor_max_tv"), report.noise_floor_max_tv);
    out.push(format!("{prefix}max_tv_excess"), report.max_tv_gap - report.noise_floor_max_tv);
    out.push(format!("{prefix}k"), count(report.k));
}

/// Runs the experiment, writing artifacts under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let data = Data::load(cfg, seed)?;
    let mut out = Outcome::default();
    let mut tables = Vec::new();
    match cfg.kind {
        Kind::Generate => run_generate(&data, out_dir, &mut out)?,
        Kind::Construct => run_construct(cfg, &data, out_dir, &mut out, &mut tables)?,
        Kind::Train => run_train(cfg, &data, seed, out_dir, &mut out, &mut tables)?,
        Kind::Evaluate => run_evaluate(cfg, &data, seed, out_dir, &mut out, &mut tables)?,
        Kind::Sweep => run_sweep(cfg, &data, seed, &mut out, &mut tables)?,
        Kind::Conv => run_conv(cfg, &data, seed, &mut out, &mut tables)?,
    }

    for check in &cfg.check {
        let value = out.metric(&check.metric).ok_or_else(|| {
            Error::Config(format!("check names unknown metric `{}`", check.metric))
        })?;
        let bounds = check.bounds();
        if bounds.is_empty() {
            return Err(Error::Config(format!("check on `{}` has no bound", check.metric)));
        }
        for (op, bound) in bounds {
            let passed = match op {
                ">=" => value >= bound,
                "<=" => value <= bound,
                "<" => value < bound,
                ">" => value > bound,
                _ => value == bound,
            };
            out.checks.push(CheckResult {
                metric: check.metric.clone(),
                value,
                condition: format!("{op} {bound}"),
                passed,
            });
        }
    }

    let mut metrics = CsvTable::new("metrics", &["metric", "value"]);
    for (name, value) in &out.metrics {
        metrics.push(vec![name.clone(), io::fmt_f64(*value)]);
    }
    tables.push(metrics);
    if !out.checks.is_empty() {
        let mut checks = CsvTable::new("checks", &["metric", "value", "condition", "passed"]);
        for c in &out.checks {
            checks.push(vec![
                c.metric.clone(),
                io::fmt_f64(c.value),
                c.condition.clone(),
                c.passed.to_string(),
            ]);
        }
        tables.push(checks);
    }
    out.files.extend(io::emit_reports(out_dir, &tables)?);
    Ok(out)
}

fn save(out_dir: &Path, name: &str, artifact: Artifact, out: &mut Outcome) -> Result<()> {
    let path = out_dir.join(name);
    io::save_artifact(&path, &artifact)?;
    out.files.push(path);
    Ok(())
}

fn run_generate(data: &Data, out_dir: &Path, out: &mut Outcome) -> Result<()> {
    let d = &data.dataset;
    out.push("rows", count(d.len()));
    out.push("regions", count(d.region_count()));
    save(out_dir, "dataset.csv", Artifact::Dataset(d.clone()), out)?;
    match &data.generator {
        Generator::Regions(spec) => save(out_dir, "region_spec.json", Artifact::RegionSpec(spec.clone()), out)?,
        Generator::Patches(spec) => save(out_dir, "patch_spec.json", Artifact::PatchSpec(spec.clone()), out)?,
        _ => {}
    }
    Ok(())
}

fn build_separator(
    kind: SeparatorKind,
    mode: BiasMode,
    representatives: &Array2<f64>,
    data: &Data,
) -> Result<GraphLayer> {
    match kind {
        SeparatorKind::Discrete => construct_discrete_separator(representatives.view()),
        SeparatorKind::Linear => construct_linear_separator(representatives.view()),
        SeparatorKind::Relu => construct_relu_separator(representatives.view(), mode),
        SeparatorKind::Conv => match &data.generator {
            Generator::Patches(spec) => construct_conv_separator(spec),
            _ => Err(Error::Config("the conv separator needs a `patches` data source".into())),
        },
    }
}

fn run_construct(
    cfg: &ExperimentConfig,
    data: &Data,
    out_dir: &Path,
    out: &mut Outcome,
    tables: &mut Vec<CsvTable>,
) -> Result<()> {
    let cc = cfg.require(&cfg.construct, "construct")?;
    let d = &data.dataset;
    let reps = data.representatives()?;
    let first = build_separator(cc.separator, cc.bias_mode, &reps, data)?;
    let mut layers = vec![first.clone()];
    if let Some(second) = cc.then {
        let reps2 = first.forward_batch(reps.t())?.reversed_axes();
        layers.push(build_separator(second, BiasMode::default(), &reps2, data)?);
    }
    let net = Network::new(layers)?;

    let rep_codes = CodeMatrix::from_network(&net, reps.t())?;
    let rep_collisions = if rep_codes.len() >= 2 {
        collision_report(&rep_codes, DEFAULT_COLLISION_TOL)?.pair_count
    } else {
        0
    };
    out.push("representative_collisions", rep_collisions as f64);

    let first_codes = CodeMatrix::from_layer(&first, d.inputs())?;
    let codes = CodeMatrix::from_network(&net, d.inputs())?;
    if d.len() >= 2 {
        let collisions = collision_report(&codes, DEFAULT_COLLISION_TOL)?;
        out.push("collisions", collisions.pair_count as f64);
        tables.push(io::collision_table(&collisions));
    }
    let separation = region_separation_report(&codes, d.region_ids())?;
    out.push("cross_region_collisions", separation.cross_region_collisions as f64);
    out.push("cross_region_fraction", separation.fraction);
    tables.push(io::separation_table(&separation));

    if let Some(delta) = cc.own_coordinate_delta {
        out.push(
            "own_coordinate_violations",
            count(own_coordinate_violations(&first, &reps, d, first_codes.codes().view(), delta)),
        );
    }
    if let Generator::Patches(spec) = &data.generator {
        if cc.separator == SeparatorKind::Conv {
            let mut worst = 0.0_f64;
            for (row, &r) in first_codes.codes().rows().into_iter().zip(d.region_ids()) {
                let region = &spec.regions[r - 1];
                let target = 0.5 * region.pattern.iter().map(|v| v * v).sum::<f64>();
                worst = worst.max((row[r - 1] - target).abs());
            }
            out.push("exact_patch_max_error", worst);
        }
    }

    if let Some(ev) = &cfg.evaluate {
        if ev.gap {
            let k = ev.k.resolve(d)?;
            let floor = estimation_gap(d, &CodeMatrix::raw(d.inputs())?, k)?;
            let report = GapReport::from_parts(estimation_gap(d, &codes, k)?, floor, k, d.len());
            gap_metrics(out, "", &report);
            tables.push(io::gap_table(&report));
            if net.layers().len() > 1 {
                let single = GapReport::from_parts(estimation_gap(d, &first_codes, k)?, floor, k, d.len());
                out.push("first_layer.l2_gap", single.l2_gap);
                out.push("l2_gap_delta_vs_first_layer", (report.l2_gap - single.l2_gap).abs());
            }
        }
    }

    let mut raised = 0;
    for probe in &cc.expect_failure {
        let probe_reps = match probe.representatives {
            RepresentativeSource::Data => reps.clone(),
            RepresentativeSource::Identity => Array2::eye(d.dim()),
        };
        if matches!(
            build_separator(probe.separator, probe.bias_mode, &probe_reps, data),
            Err(Error::CodeCollision(..))
        ) {
            raised += 1;
        }
    }
    if !cc.expect_failure.is_empty() {
        out.push("expected_failures", count(cc.expect_failure.len()));
        out.push("expected_failures_raised", count(raised));
    }

    if net.layers().len() == 1 {
        save(out_dir, "layer.json", Artifact::Layer(first), out)?;
    } else {
        save(out_dir, "network.json", Artifact::Network(net), out)?;
    }
    Ok(())
}

/// Samples with `Z_i(x) < σ(‖c_i‖² + β_i − δ‖c_i‖) − 1e-9`, where `i` is
/// the sample's region.
fn own_coordinate_violations(
    layer: &GraphLayer,
    reps: &Array2<f64>,
    data: &LabeledDataset,
    codes: ArrayView2<f64>,
    delta: f64,
) -> usize {
    let bounds: Vec<f64> = (0..reps.ncols())
        .map(|i| {
            let c = reps.column(i);
            let norm_sq = c.dot(&c);
            layer
                .activation()
                .apply_scalar(norm_sq + layer.bias()[i] - delta * norm_sq.sqrt())
        })
        .collect();
    codes
        .rows()
        .into_iter()
        .zip(data.region_ids())
        .filter(|(row, &r)| row[r - 1] < bounds[r - 1] - 1e-9)
        .count()
}

fn run_train(
    cfg: &ExperimentConfig,
    data: &Data,
    seed: u64,
    out_dir: &Path,
    out: &mut Outcome,
    tables: &mut Vec<CsvTable>,
) -> Result<()> {
    let tc = cfg.require(&cfg.train, "train")?;
    let d = &data.dataset;
    let anchors = data.fresh_anchors(tc.m, sub_seed(seed, ANCHOR_STREAM))?;
    let layer = GraphLayer::unbiased(anchors, PairwiseFunction::InnerProduct, tc.activation)?;
    let readout = {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sub_seed(seed, READOUT_STREAM));
        Array2::from_shape_fn((tc.m, d.num_classes()), |_| {
            tc.readout_scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    };
    let training = TrainingConfig {
        learning_rate: tc.learning_rate,
        epochs: tc.epochs,
        batch_size: tc.batch_size,
        gradient_clip: tc.gradient_clip,
        loss: tc.loss.into(),
        seed: sub_seed(seed, TRAIN_STREAM),
    };
    let (trained, readout, trace) = train_layer_sgd(&layer, readout.view(), d, &training)?;
    let kinds = |name: &str| trace.flags.iter().filter(|f| f.kind.name() == name).count();
    out.push("initial_loss", trace.loss[0]);
    out.push("final_loss", *trace.loss.last().expect("initial state recorded"));
    out.push("final_covering_radius", *trace.covering_radius.last().expect("initial state recorded"));
    out.push(
        "max_step_displacement",
        trace.max_step_displacement.iter().copied().fold(0.0, f64::max),
    );
    out.push("flags", count(trace.flags.len()));
    out.push("unbounded_iterates", count(kinds("unbounded-iterates")));
    out.push("snapshot_collisions", count(kinds("snapshot-collision")));
    if tc.gradient_checks > 0 {
        out.push(
            "gradcheck.max_rel_error",
            gradient_check(tc.gradient_checks, sub_seed(seed, GRADCHECK_STREAM))?,
        );
    }
    tables.push(io::trace_table(&trace));
    save(out_dir, "layer.json", Artifact::Layer(trained), out)?;
    let rows: Vec<Vec<f64>> = readout.rows().into_iter().map(|r| r.to_vec()).collect();
    let path = out_dir.join("readout.json");
    io::write_json(&path, &rows)?;
    out.files.push(path);
    Ok(())
}

fn layer_from_config(lc: &LayerConfig, cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<GraphLayer> {
    if let Some(path) = &lc.path {
        return match io::load_artifact(&cfg.resolve(path), ArtifactKind::Layer)? {
            Artifact::Layer(l) => Ok(l),
            _ => unreachable!("layer kind requested"),
        };
    }
    let m = lc
        .m
        .ok_or_else(|| Error::Config("[layer] needs `path` or `m`".into()))?;
    let pairwise = lc.pairwise.unwrap_or(PairwiseFunction::InnerProduct);
    let activation = lc.activation.unwrap_or(Activation::Identity);
    const MAX_ATTEMPTS: u64 = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let anchors = data.fresh_anchors(m, sub_seed(seed, ANCHOR_STREAM + 16 * attempt))?;
        if !lc.require_general_position || check_general_position(anchors.view())?.nonsingular {
            return GraphLayer::unbiased(anchors, pairwise, activation);
        }
    }
    Err(Error::InvalidParameter(format!(
        "no anchors in general position after {MAX_ATTEMPTS} draws"
    )))
}

fn run_evaluate(
    cfg: &ExperimentConfig,
    data: &Data,
    seed: u64,
    out_dir: &Path,
    out: &mut Outcome,
    tables: &mut Vec<CsvTable>,
) -> Result<()> {
    let ev = cfg.require(&cfg.evaluate, "evaluate")?;
    let d = &data.dataset;
    let codes = match ev.representation {
        Representation::Raw => CodeMatrix::raw(d.inputs())?,
        Representation::Layer => {
            let lc = cfg.require(&cfg.layer, "layer")?;
            let layer = layer_from_config(lc, cfg, data, seed)?;
            let gp = check_general_position(layer.anchors())?;
            out.push("general_position", flag(gp.nonsingular));
            out.push("gram_determinant", gp.gram_determinant);
            let codes = CodeMatrix::from_layer(&layer, d.inputs())?;
            save(out_dir, "layer.json", Artifact::Layer(layer), out)?;
            codes
        }
        Representation::EpsilonPartition => {
            let eps = ev.eps.expect("validated");
            let lipschitz = ev.lipschitz.expect("validated");
            let partition = epsilon_partition(d, eps, lipschitz)?;
            out.push("cells", count(partition.cell_count));
            out.push("cell_diameter", partition.cell_diameter);
            out.push("within_cell_variation", within_cell_variation(d, &partition.assignment));
            let ids = Array2::from_shape_fn((d.len(), 1), |(i, _)| partition.assignment[i] as f64);
            CodeMatrix::new(ids, format!("epsilon-partition cell ids, {} cells", partition.cell_count))?
        }
    };

    let collisions = collision_report(&codes, ev.tolerance)?;
    out.push("collisions", collisions.pair_count as f64);
    out.push("collision_fraction", collisions.fraction());
    out.push(
        "min_nonzero_distance",
        collisions.min_nonzero_distance.unwrap_or(f64::NAN),
    );
    tables.push(io::collision_table(&collisions));
    tables.push(io::collision_pairs_table(&collisions));

    if ev.gap {
        let k = ev.k.resolve(d)?;
        let floor = estimation_gap(d, &CodeMatrix::raw(d.inputs())?, k)?;
        let report = GapReport::from_parts(estimation_gap(d, &codes, k)?, floor, k, d.len());
        gap_metrics(out, "", &report);
        tables.push(io::gap_table(&report));
    }
    Ok(())
}

/// Largest L1 distance between the true conditionals of two samples that
/// share a cell, by brute force over all pairs.
fn within_cell_variation(data: &LabeledDataset, assignment: &[usize]) -> f64 {
    let q = data.true_conditionals();
    let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        by_cell.entry(c).or_default().push(i);
    }
    let mut worst = 0.0_f64;
    for members in by_cell.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let l1: f64 = q.row(i).iter().zip(q.row(j)).map(|(x, y)| (x - y).abs()).sum();
                worst = worst.max(l1);
            }
        }
    }
    worst
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run_sweep(
    cfg: &ExperimentConfig,
    data: &Data,
    seed: u64,
    out: &mut Outcome,
    tables: &mut Vec<CsvTable>,
) -> Result<()> {
    let sw = cfg.require(&cfg.sweep, "sweep")?;
    let d = &data.dataset;
    let mut m_values = sw.m_values.clone();
    m_values.sort_unstable();
    m_values.dedup();

    let needs_gap = sw.families.iter().any(|f| *f != Family::CoveringRadius);
    let k = if needs_gap { sw.k.resolve(d)? } else { 0 };
    let floor = if needs_gap {
        Some(estimation_gap(d, &CodeMatrix::raw(d.inputs())?, k)?)
    } else {
        None
    };
    if let Some(f) = floor {
        out.push("noise_floor", f.l2);
        out.push("noise_floor_max_tv", f.max_tv);
        out.push("k", count(k));
    }

    for family in &sw.families {
        let name = family.name();
        // results[seed][m index]
        let mut results: Vec<Vec<(GapMetrics, f64)>> = Vec::with_capacity(sw.seeds);
        let probes = match (family, sw.probe_grid) {
            (Family::CoveringRadius, Some(side)) => {
                if d.dim() != 2 {
                    return Err(Error::Config("probe_grid needs two-dimensional data".into()));
                }
                unit_square_grid(side)
            }
            _ => d.inputs().to_owned(),
        };
        for s in 0..sw.seeds {
            let mut row = Vec::with_capacity(m_values.len());
            for (mi, &m) in m_values.iter().enumerate() {
                let anchor_seed = sub_seed(sub_seed(seed, ANCHOR_STREAM + 16 * mi as u64), s as u64);
                let anchors = data.fresh_anchors(m, anchor_seed)?;
                let entry = match family {
                    Family::CoveringRadius => (
                        GapMetrics { l2: f64::NAN, max_tv: f64::NAN },
                        covering_radius(anchors.view(), probes.view())?,
                    ),
                    Family::Gaussian | Family::Relu => {
                        let layer = if *family == Family::Gaussian {
                            GraphLayer::unbiased(anchors, PairwiseFunction::gaussian(sw.bandwidth)?, Activation::Identity)?
                        } else {
                            GraphLayer::unbiased(anchors, PairwiseFunction::InnerProduct, Activation::ReLU)?
                        };
                        let codes = CodeMatrix::from_layer(&layer, d.inputs())?;
                        let collisions = collision_report(&codes, DEFAULT_COLLISION_TOL)?;
                        (estimation_gap(d, &codes, k)?, collisions.fraction())
                    }
                };
                row.push(entry);
            }
            results.push(row);
        }

        let mut runs;
        let mut summary;
        let mut plot = CsvTable::new(format!("plot_{name}"), &["x", "y"]);
        if *family == Family::CoveringRadius {
            runs = CsvTable::new(format!("sweep_{name}_runs"), &["seed", "m", "covering_radius"]);
            summary = CsvTable::new(format!("sweep_{name}"), &["m", "median_covering_radius"]);
            let mut medians = Vec::new();
            for (mi, &m) in m_values.iter().enumerate() {
                let mut radii: Vec<f64> = results.iter().map(|r| r[mi].1).collect();
                for (s, &r) in radii.iter().enumerate() {
                    runs.push(vec![s.to_string(), m.to_string(), io::fmt_f64(r)]);
                }
                let med = median(&mut radii);
                out.push(format!("{name}.m{m}.median"), med);
                summary.push(vec![m.to_string(), io::fmt_f64(med)]);
                plot.push(vec![m.to_string(), io::fmt_f64(med)]);
                medians.push(med);
            }
            let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
            out.push(format!("{name}.strictly_decreasing"), flag(decreasing));
        } else {
            let floor = floor.expect("computed for gap families");
            runs = CsvTable::new(
                format!("sweep_{name}_runs"),
                &["seed", "m", "l2_gap", "max_tv_gap", "noise_floor", "collision_fraction"],
            );
            summary = CsvTable::new(
                format!("sweep_{name}"),
                &["m", "l2_gap", "noise_floor", "collision_fraction"],
            );
            for (mi, &m) in m_values.iter().enumerate() {
                for (s, r) in results.iter().enumerate() {
                    let (g, frac) = r[mi];
                    runs.push(vec![
                        s.to_string(),
                        m.to_string(),
                        io::fmt_f64(g.l2),
                        io::fmt_f64(g.max_tv),
                        io::fmt_f64(floor.l2),
                        io::fmt_f64(frac),
                    ]);
                }
                let med_gap = median(&mut results.iter().map(|r| r[mi].0.l2).collect::<Vec<_>>());
                let med_frac = median(&mut results.iter().map(|r| r[mi].1).collect::<Vec<_>>());
                out.push(format!("{name}.m{m}.median_l2_gap"), med_gap);
                summary.push(vec![
                    m.to_string(),
                    io::fmt_f64(med_gap),
                    io::fmt_f64(floor.l2),
                    io::fmt_f64(med_frac),
                ]);
                plot.push(vec![m.to_string(), io::fmt_f64(med_gap)]);
            }
            let (lo, hi) = (0, m_values.len() - 1);
            let wins = results.iter().filter(|r| r[hi].0.l2 <= r[lo].0.l2).count();
            let worst_excess = results
                .iter()
                .map(|r| r[hi].0.l2 - 2.0 * floor.l2)
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(format!("{name}.wins"), count(wins));
            out.push(format!("{name}.seeds"), count(sw.seeds));
            out.push(format!("{name}.worst_excess_over_2floor"), worst_excess);
        }
        tables.push(summary);
        tables.push(runs);
        tables.push(plot);
    }
    Ok(())
}

fn run_conv(
    cfg: &ExperimentConfig,
    data: &Data,
    seed: u64,
    out: &mut Outcome,
    tables: &mut Vec<CsvTable>,
) -> Result<()> {
    let cc = cfg.require(&cfg.conv, "conv")?;
    let (base, n) = match (&data.generator, &cfg.data) {
        (Generator::Patches(spec), Some(DataConfig::Patches { n, .. })) => (spec, *n),
        _ => return Err(Error::Config("kind `conv` needs a `patches` data source".into())),
    };
    let mut overall = f64::INFINITY;
    let mut guaranteed = 0;
    let mut excluded = 0;
    for (idx, &delta) in cc.deltas.iter().enumerate() {
        let spec = PatchSpec {
            delta,
            ..base.clone()
        };
        let sample = sample_patched(&spec, n, sub_seed(seed, DATA_STREAM + 16 * (idx as u64 + 1)))?;
        let layer = construct_conv_separator(&spec)?;
        let codes = CodeMatrix::from_layer(&layer, sample.inputs())?;
        let report = conv_pair_margin(&spec, &sample, &codes)?;
        let slack = report.min_slack().unwrap_or(f64::INFINITY);
        overall = overall.min(slack);
        guaranteed += report.pairs.iter().filter(|p| p.guaranteed).count();
        excluded += report.pairs.iter().filter(|p| !p.guaranteed).count();
        let min_emp = report
            .pairs
            .iter()
            .filter_map(|p| p.empirical)
            .fold(f64::INFINITY, f64::min);
        out.push(format!("delta[{idx}].delta"), delta);
        out.push(format!("delta[{idx}].min_margin_slack"), slack);
        out.push(format!("delta[{idx}].min_empirical_margin"), min_emp);
        tables.push(io::margin_table(&report, format!("margins_{idx}")));
    }
    out.push("min_margin_slack", overall);
    out.push("guaranteed_pairs", count(guaranteed));
    out.push("excluded_pairs", count(excluded));
    Ok(())
}
