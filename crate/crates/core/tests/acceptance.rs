//! Acceptance suite: every criterion runs its shipped config and prints one
//! PASS/FAIL line. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use graphvar::experiment::{run_experiment, ExperimentConfig, Outcome};
use graphvar::io::{load_artifact, save_artifact, Artifact, ArtifactKind};
use graphvar::regions::sample_regioned;
use graphvar::RegionSpec;
use tempfile::TempDir;

const CONFIGS: [&str; 12] = [
    "c01_injectivity",
    "c02_covering_radius",
    "c03_width_sweep",
    "c04_training",
    "c05_discrete",
    "c06_linear",
    "c07_relu",
    "c08_conv_exact",
    "c09_conv_margin",
    "c10_partition",
    "c11_composition",
    "generate_two_regions",
];

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Run {
    outcome: Outcome,
    files: BTreeMap<String, Vec<u8>>,
}

impl Run {
    fn metric(&self, name: &str) -> f64 {
        self.outcome
            .metric(name)
            .unwrap_or_else(|| panic!("metric {name} missing"))
    }
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("output directory") {
        let path = entry.expect("dir entry").path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&path).expect("output file"));
    }
    files
}

fn execute(name: &str, out: &Path) -> graphvar::Result<Run> {
    let cfg = ExperimentConfig::from_path(&config_dir().join(format!("{name}.toml")))?;
    let outcome = run_experiment(&cfg, out)?;
    Ok(Run {
        outcome,
        files: read_dir_bytes(out),
    })
}

struct Suite {
    scratch: TempDir,
    runs: BTreeMap<&'static str, Run>,
}

impl Suite {
    fn run(&mut self, name: &'static str) -> &Run {
        if !self.runs.contains_key(name) {
            let out = self.scratch.path().join("first").join(name);
            let run = execute(name, &out).unwrap_or_else(|e| panic!("{name}: {e}"));
            self.runs.insert(name, run);
        }
        &self.runs[name]
    }
}

/// Named sub-checks of one criterion.
struct Verdict(Vec<(String, bool)>);

impl Verdict {
    fn new() -> Self {
        Verdict(Vec::new())
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) -> &mut Self {
        self.0.push((what.into(), ok));
        self
    }

    fn passed(&self) -> bool {
        self.0.iter().all(|(_, ok)| *ok)
    }
}

fn injectivity(s: &mut Suite) -> Verdict {
    let run = s.run("c01_injectivity");
    let mut v = Verdict::new();
    v.check("anchors in general position", run.metric("general_position") == 1.0)
        .check(format!("collisions = {}", run.metric("collisions")), run.metric("collisions") == 0.0);
    v
}

fn covering_radius(s: &mut Suite) -> Verdict {
    let run = s.run("c02_covering_radius");
    let r: Vec<f64> = [10, 100, 1000]
        .iter()
        .map(|m| run.metric(&format!("covering_radius.m{m}.median")))
        .collect();
    let mut v = Verdict::new();
    v.check(format!("medians {r:?} strictly decrease"), r[0] > r[1] && r[1] > r[2]);
    v
}

fn width_sweep(s: &mut Suite) -> Verdict {
    let run = s.run("c03_width_sweep");
    let mut v = Verdict::new();
    for fam in ["gaussian", "relu"] {
        let wins = run.metric(&format!("{fam}.wins"));
        let excess = run.metric(&format!("{fam}.worst_excess_over_2floor"));
        v.check(format!("{fam}: m=64 beats m=4 in {wins}/10 seeds"), wins >= 9.0)
            .check(format!("{fam}: worst l2_gap(64) - 2 floor = {excess:.3e}"), excess <= 0.0);
    }
    v
}

fn training(s: &mut Suite) -> Verdict {
    let run = s.run("c04_training");
    let grad = run.metric("gradcheck.max_rel_error");
    let mut v = Verdict::new();
    v.check("no unbounded iterates", run.metric("unbounded_iterates") == 0.0)
        .check("no snapshot collisions", run.metric("snapshot_collisions") == 0.0)
        .check(format!("20 gradient checks, max relative error {grad:.2e}"), grad <= 1e-5);
    v
}

fn discrete(s: &mut Suite) -> Verdict {
    let run = s.run("c05_discrete");
    let tv = run.metric("max_tv_gap");
    let mut v = Verdict::new();
    v.check("support codes distinct", run.metric("representative_collisions") == 0.0)
        .check(format!("max_tv_gap {tv:.4}"), tv <= 0.05);
    v
}

fn linear(s: &mut Suite) -> Verdict {
    let run = s.run("c06_linear");
    let frac = run.metric("cross_region_fraction");
    let tv = run.metric("max_tv_gap");
    let floor = run.metric("noise_floor_max_tv");
    let mut v = Verdict::new();
    v.check("representative codes distinct", run.metric("representative_collisions") == 0.0)
        .check(format!("cross-region fraction {frac:.2e}"), frac < 1e-3)
        .check(format!("max_tv_gap {tv:.4} vs floor {floor:.4}"), tv <= floor + 0.05);
    v
}

fn relu(s: &mut Suite) -> Verdict {
    let run = s.run("c07_relu");
    let frac = run.metric("cross_region_fraction");
    let mut v = Verdict::new();
    v.check("own-coordinate bound holds", run.metric("own_coordinate_violations") == 0.0)
        .check(format!("cross-region fraction {frac:.2e}"), frac < 1e-3)
        .check("full-norm bias on orthonormal representatives raises collision", run.metric("expected_failures_raised") == 1.0);
    v
}

fn conv_exact(s: &mut Suite) -> Verdict {
    let run = s.run("c08_conv_exact");
    let err = run.metric("exact_patch_max_error");
    let tv = run.metric("max_tv_gap");
    let floor = run.metric("noise_floor_max_tv");
    let mut v = Verdict::new();
    v.check(format!("exact patch error {err:.2e}"), err <= 1e-12)
        .check("cross-region codes all separated", run.metric("cross_region_collisions") == 0.0)
        .check(format!("max_tv_gap {tv:.4} vs floor {floor:.4}"), tv <= floor + 0.05);
    v
}

fn conv_margin(s: &mut Suite) -> Verdict {
    let run = s.run("c09_conv_margin");
    let mut v = Verdict::new();
    for i in 0..2 {
        let delta = run.metric(&format!("delta[{i}].delta"));
        let slack = run.metric(&format!("delta[{i}].min_margin_slack"));
        v.check(format!("delta {delta}: min empirical margin - gamma = {slack:.4}"), slack >= -1e-9);
    }
    v.check("some pair guaranteed", run.metric("guaranteed_pairs") >= 1.0);
    v
}

fn partition(s: &mut Suite) -> Verdict {
    let run = s.run("c10_partition");
    let cells = run.metric("cells");
    let var = run.metric("within_cell_variation");
    let tv = run.metric("max_tv_gap");
    let floor = run.metric("noise_floor_max_tv");
    let mut v = Verdict::new();
    v.check(format!("{cells} cells"), cells <= 10.0)
        .check(format!("within-cell variation {var:.4}"), var <= 0.2)
        .check(format!("max_tv_gap {tv:.4} vs floor {floor:.4}"), tv <= 0.2 + floor);
    v
}

fn composition(s: &mut Suite) -> Verdict {
    let run = s.run("c11_composition");
    let frac = run.metric("cross_region_fraction");
    let delta = run.metric("l2_gap_delta_vs_first_layer");
    let mut v = Verdict::new();
    v.check(format!("cross-region fraction {frac:.2e}"), frac < 1e-3)
        .check(format!("|l2_gap - first layer l2_gap| = {delta:.2e}"), delta.abs() <= 1e-6);
    v
}

fn resave(path: &Path, kind: ArtifactKind, scratch: &Path) -> Option<String> {
    let name = path.file_name()?.to_string_lossy().into_owned();
    let first = load_artifact(path, kind).ok()?;
    let a = scratch.join(format!("a_{name}"));
    let b = scratch.join(format!("b_{name}"));
    save_artifact(&a, &first).ok()?;
    let second = load_artifact(&a, kind).ok()?;
    save_artifact(&b, &second).ok()?;
    let same = first == second && std::fs::read(&a).ok()? == std::fs::read(&b).ok()?;
    same.then_some(name)
}

fn determinism(s: &mut Suite) -> Verdict {
    let mut v = Verdict::new();
    for name in CONFIGS {
        let first = s.run(name).files.clone();
        let out = s.scratch.path().join("second").join(name);
        let second = execute(name, &out).unwrap_or_else(|e| panic!("{name}: {e}"));
        let diff: Vec<&String> = first
            .keys()
            .chain(second.files.keys())
            .filter(|k| first.get(*k) != second.files.get(*k))
            .collect();
        v.check(format!("{name} reruns byte-identically ({} files)", first.len()), diff.is_empty());
    }
    let generated = s.run("generate_two_regions").files.clone();
    v.check("generated dataset has 100 rows", generated["dataset.csv"].iter().filter(|&&b| b == b'\n').count() == 101);

    let scratch = s.scratch.path().join("roundtrip");
    std::fs::create_dir_all(&scratch).expect("scratch dir");
    let first = s.scratch.path().join("first");
    let mut artifacts = vec![
        (first.join("generate_two_regions/dataset.csv"), ArtifactKind::Dataset),
        (first.join("generate_two_regions/region_spec.json"), ArtifactKind::RegionSpec),
        (first.join("c01_injectivity/layer.json"), ArtifactKind::Layer),
        (first.join("c04_training/layer.json"), ArtifactKind::Layer),
        (first.join("c05_discrete/layer.json"), ArtifactKind::Layer),
        (first.join("c11_composition/network.json"), ArtifactKind::Network),
        (config_dir().join("specs/patches36.json"), ArtifactKind::PatchSpec),
        (config_dir().join("specs/tilt_regression.json"), ArtifactKind::RegionSpec),
    ];
    let spec: RegionSpec = graphvar::io::read_json(&config_dir().join("specs/tilt_regression.json")).expect("spec");
    let big = sample_regioned(&spec, 10_000, 12).expect("sample");
    let big_path = scratch.join("large.csv");
    save_artifact(&big_path, &Artifact::Dataset(big)).expect("save");
    artifacts.push((big_path, ArtifactKind::Dataset));
    for (path, kind) in artifacts {
        let parts: Vec<_> = path.components().rev().take(2).collect();
        let label = format!("{}/{}", parts[1].as_os_str().to_string_lossy(), parts[0].as_os_str().to_string_lossy());
        let ok = resave(&path, kind, &scratch).is_some();
        v.check(format!("save/load/save identical: {label}"), ok);
    }
    v
}

type Criterion = (u32, &'static str, fn(&mut Suite) -> Verdict);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "inner-product layer injectivity", injectivity),
        (2, "covering radius shrinks with anchor count", covering_radius),
        (3, "sufficiency gap shrinks with width", width_sweep),
        (4, "training keeps anchors healthy", training),
        (5, "discrete exact sufficiency", discrete),
        (6, "linear separator", linear),
        (7, "ReLU separator", relu),
        (8, "convolutional separator, exact patches", conv_exact),
        (9, "convolutional margin formula", conv_margin),
        (10, "epsilon-partition preservation", partition),
        (11, "multi-layer composition", composition),
        (12, "determinism and artifact round trips", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite {
        scratch: TempDir::new().expect("temp dir"),
        runs: BTreeMap::new(),
    };
    let mut failed = 0;
    for (n, title, f) in criteria {
        let tag = format!("criterion {n}");
        if !filter.is_empty() && !filter.iter().any(|w| tag.contains(w.as_str()) || title.contains(w.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = f(&mut suite);
        let status = if verdict.passed() { "PASS" } else { "FAIL" };
        println!("{tag:<12} {title:<45} {status} ({:.2} s)", start.elapsed().as_secs_f64());
        for (what, ok) in &verdict.0 {
            println!("             {} {what}", if *ok { "ok  " } else { "FAIL" });
        }
        failed += usize::from(!verdict.passed());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
