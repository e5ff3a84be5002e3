//! Multi-run evaluation protocols driven by a TOML protocol file:
//!
//! - `cross_domain`: train on one manifest, test on each of several others.
//! - `corruption_grid`: train once, test one manifest under every
//!   corruption kind.
//! - `ablation`: for each category, train on the union of the others and
//!   test on the held-out one (Case A holds out the first category).
//!
//! Relative paths in a protocol file resolve against that file's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use texvit_autodiff::RngState;

use crate::config::{preset, TexViTConfig};
use crate::data::{load_manifest, CorruptionKind, CorruptionSpec, DatasetManifest, Split};
use crate::error::{config_err, io_err, Error, Result};
use crate::metrics::MetricsReport;
use crate::train::{evaluate_manifest, train_manifests, LogHooks, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub protocol: String,
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Training settings; `training.seed` seeds every run, the validation
    /// split and evaluation noise.
    #[serde(default)]
    pub training: TrainConfig,
    /// Corruption parameters; the kind is set per grid row.
    #[serde(default)]
    pub corruption: CorruptionSpec,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    #[serde(default)]
    pub categories: Vec<Category>,
}

fn default_preset() -> String {
    "desk".into()
}

impl ProtocolSpec {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut spec: Self = toml::from_str(text).map_err(|e| config_err(format!("protocol spec: {e}")))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        spec.train.iter_mut().chain(spec.val.iter_mut()).chain(spec.test.iter_mut()).for_each(fix);
        spec.categories.iter_mut().for_each(|c| fix(&mut c.manifest));
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn model(&self) -> Result<TexViTConfig> {
        preset(&self.preset)
    }
}

/// One trained-and-tested cell of a protocol grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    /// Row label: a case letter, a test manifest name or a corruption kind.
    pub row: String,
    pub train: Vec<String>,
    pub test: String,
    pub checkpoint: PathBuf,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub protocol: String,
    /// Number of models trained.
    pub runs: usize,
    pub cells: Vec<Cell>,
}

impl ProtocolReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,train,test,corruption,precision,recall,f1,auc,accuracy,tp,fp,tn,fn\n");
        for c in &self.cells {
            let m = &c.metrics;
            let auc = m.auc.map_or_else(String::new, |a| a.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.row,
                c.train.join("+"),
                c.test,
                m.corruption,
                m.precision,
                m.recall,
                m.f1,
                auc,
                m.accuracy,
                m.tp,
                m.fp,
                m.tn,
                m.fn_
            )
            .unwrap();
        }
        s
    }
}

/// A protocol kind. Implementations only plan and run cells; writing the
/// grid files is shared.
pub trait Protocol: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, spec: &ProtocolSpec, out_dir: &Path) -> Result<ProtocolReport>;
}

pub struct CrossDomain;
pub struct CorruptionGrid;
pub struct Ablation;

pub fn protocols() -> Vec<Box<dyn Protocol>> {
    vec![Box::new(CrossDomain), Box::new(CorruptionGrid), Box::new(Ablation)]
}

pub fn protocol(name: &str) -> Result<Box<dyn Protocol>> {
    protocols().into_iter().find(|p| p.name() == name).ok_or_else(|| {
        let names: Vec<_> = protocols().iter().map(|p| p.name()).collect();
        config_err(format!("unknown protocol `{name}` (expected one of {})", names.join(", ")))
    })
}

fn stem(path: &Path) -> String {
    let s = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if matches!(s.as_str(), "train" | "val" | "test") => format!("{}/{s}", dir.to_string_lossy()),
        _ => s,
    }
}

fn require(path: &Option<PathBuf>, what: &str, proto: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| config_err(format!("protocol `{proto}` needs `{what}`")))
}

/// Errors if any image of `test` is also used for training or validation.
pub fn check_overlap(train: &DatasetManifest, test: &DatasetManifest, test_name: &str) -> Result<()> {
    let seen: HashSet<_> = train.canonical_paths().into_iter().collect();
    if let Some(p) = test.canonical_paths().into_iter().find(|p| seen.contains(p)) {
        return Err(Error::Protocol(format!("`{}` from test set `{test_name}` is also a training image", p.display())));
    }
    Ok(())
}

/// Seeded 15% hold-out from a training union (at least one sample on each
/// side).
pub fn carve_validation(union: &DatasetManifest, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if union.len() < 2 {
        return Err(config_err("need at least 2 training images to hold out validation data"));
    }
    let mut idx: Vec<usize> = (0..union.len()).collect();
    RngState::derive(seed, "validation_split").shuffle(&mut idx);
    let n_val = (union.len() * 15 / 100).clamp(1, union.len() - 1);
    let mut val_idx = idx.split_off(union.len() - n_val);
    idx.sort_unstable();
    val_idx.sort_unstable();
    let pick = |ix: &[usize], split| {
        DatasetManifest::new(union.root.clone(), Some(split), ix.iter().map(|&i| union.entries[i].clone()).collect())
    };
    Ok((pick(&idx, Split::Train), pick(&val_idx, Split::Val)))
}

/// Training and validation manifests for a run.
fn training_data(parts: &[PathBuf], val: Option<&Path>, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let loaded = parts.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>>>()?;
    let union = DatasetManifest::union(&loaded.iter().collect::<Vec<_>>(), Some(Split::Train));
    match val {
        Some(v) => {
            let v = load_manifest(v)?;
            let v = DatasetManifest::union(&[&v], Some(Split::Val));
            check_overlap(&union, &v, "validation")?;
            Ok((union, v))
        }
        None => carve_validation(&union, seed),
    }
}

struct Run<'a> {
    row: String,
    train: &'a [PathBuf],
    tests: Vec<(String, &'a Path, CorruptionSpec)>,
}

/// Trains one model per run and evaluates its cells. Every overlap is
/// checked before any training starts.
fn execute(spec: &ProtocolSpec, name: &str, runs: &[Run<'_>], out_dir: &Path) -> Result<ProtocolReport> {
    let model = spec.model()?;
    spec.training.validate()?;
    spec.corruption.validate()?;
    let seed = spec.training.seed;
    let mut prepared = Vec::with_capacity(runs.len());
    for run in runs {
        let (tr, va) = training_data(run.train, spec.val.as_deref(), seed)?;
        let seen = DatasetManifest::union(&[&tr, &va], None);
        let mut tests = Vec::with_capacity(run.tests.len());
        for (row, path, corruption) in &run.tests {
            let t = load_manifest(path)?;
            check_overlap(&seen, &t, &stem(path))?;
            tests.push((row.clone(), stem(path), t, corruption.clone()));
        }
        prepared.push((run, tr, va, tests));
    }

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut cells = Vec::new();
    for (run, tr, va, tests) in prepared {
        log::info!("{name}: run {} on {} training images", run.row, tr.len());
        let outcome = train_manifests(&model, &spec.training, &tr, &va, &mut LogHooks)?;
        let ckpt_path = out_dir.join(format!("{}.ckpt", run.row));
        outcome.checkpoint.save(&ckpt_path)?;
        for (row, test_name, manifest, corruption) in tests {
            let metrics = evaluate_manifest(&outcome.checkpoint, &manifest, &corruption, seed)?;
            cells.push(Cell {
                row,
                train: run.train.iter().map(|p| stem(p)).collect(),
                test: test_name,
                checkpoint: ckpt_path.clone(),
                metrics,
            });
        }
    }
    Ok(ProtocolReport { protocol: name.to_string(), runs: runs.len(), cells })
}

impl Protocol for CrossDomain {
    fn name(&self) -> &'static str {
        "cross_domain"
    }

    fn run(&self, spec: &ProtocolSpec, out_dir: &Path) -> Result<ProtocolReport> {
        let train = [require(&spec.train, "train", self.name())?];
        if spec.test.is_empty() {
            return Err(config_err("protocol `cross_domain` needs at least one `test` manifest"));
        }
        let clean = CorruptionSpec { kind: CorruptionKind::None, ..spec.corruption.clone() };
        let tests = spec.test.iter().map(|t| (stem(t).replace('/', "_"), t.as_path(), clean.clone())).collect();
        execute(spec, self.name(), &[Run { row: "run".into(), train: &train, tests }], out_dir)
    }
}

impl Protocol for CorruptionGrid {
    fn name(&self) -> &'static str {
        "corruption_grid"
    }

    fn run(&self, spec: &ProtocolSpec, out_dir: &Path) -> Result<ProtocolReport> {
        let train = [require(&spec.train, "train", self.name())?];
        let [test] = spec.test.as_slice() else {
            return Err(config_err("protocol `corruption_grid` needs exactly one `test` manifest"));
        };
        let tests = CorruptionKind::ALL
            .iter()
            .map(|&kind| (kind.name().to_string(), test.as_path(), CorruptionSpec { kind, ..spec.corruption.clone() }))
            .collect();
        let report = execute(spec, self.name(), &[Run { row: "grid".into(), train: &train, tests }], out_dir)?;
        let clean = report.cells[0].metrics.accuracy;
        for c in &report.cells[1..] {
            let ok = clean >= c.metrics.accuracy - 0.02;
            log::info!(
                "clean accuracy {clean:.4} vs {} {:.4}: {}",
                c.row,
                c.metrics.accuracy,
                if ok { "clean holds up" } else { "corrupted beats clean by more than 0.02" }
            );
        }
        Ok(report)
    }
}

/// `A`, `B`, …, `Z`, `AA`, ….
pub fn case_label(i: usize) -> String {
    let letter = (b'A' + (i % 26) as u8) as char;
    if i < 26 {
        letter.to_string()
    } else {
        format!("{}{letter}", case_label(i / 26 - 1))
    }
}

impl Protocol for Ablation {
    fn name(&self) -> &'static str {
        "ablation"
    }

    fn run(&self, spec: &ProtocolSpec, out_dir: &Path) -> Result<ProtocolReport> {
        let cats = &spec.categories;
        if cats.len() < 2 {
            return Err(config_err("protocol `ablation` needs at least two `categories`"));
        }
        let mut names = HashSet::new();
        if let Some(c) = cats.iter().find(|c| !names.insert(&c.name)) {
            return Err(config_err(format!("duplicate category `{}`", c.name)));
        }
        let clean = CorruptionSpec { kind: CorruptionKind::None, ..spec.corruption.clone() };
        let trains: Vec<Vec<PathBuf>> = (0..cats.len())
            .map(|held| cats.iter().enumerate().filter(|&(i, _)| i != held).map(|(_, c)| c.manifest.clone()).collect())
            .collect();
        let runs: Vec<Run<'_>> = cats
            .iter()
            .enumerate()
            .map(|(held, c)| Run {
                row: format!("case_{}", case_label(held)),
                train: &trains[held],
                tests: vec![(format!("case_{}", case_label(held)), c.manifest.as_path(), clean.clone())],
            })
            .collect();
        let mut report = execute(spec, self.name(), &runs, out_dir)?;
        for (cell, held) in report.cells.iter_mut().zip(cats) {
            cell.test = held.name.clone();
            cell.train = cats.iter().filter(|c| c.name != held.name).map(|c| c.name.clone()).collect();
        }
        Ok(report)
    }
}

/// Runs the selected protocol and writes `grid.json`, `grid.csv`, and per
/// cell `{row}.json` and `{row}_roc.csv` next to the checkpoints.
pub fn run_protocol(spec: &ProtocolSpec, out_dir: &Path) -> Result<ProtocolReport> {
    let report = protocol(&spec.protocol)?.run(spec, out_dir)?;
    let write = |name: String, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    };
    write("grid.json".into(), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write("grid.csv".into(), report.to_csv())?;
    for c in &report.cells {
        write(format!("{}.json", c.row), c.metrics.to_json())?;
        if let Some(roc) = c.metrics.roc_csv() {
            write(format!("{}_roc.csv", c.row), roc)?;
        }
    }
    Ok(report)
}
