//! Scenario files: platform, workload, simulation flags and output, in TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::SimError;
use crate::metrics;
use crate::page_cache::WritePolicy;
use crate::workload::{self, PlatformSpec, RunOptions, RunReport, WorkloadSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "yes")]
    pub page_cache: bool,
    #[serde(default)]
    pub write_policy: WritePolicy,
    /// Fixed memory sampling period in seconds.
    #[serde(default)]
    pub cadence: Option<f64>,
    #[serde(default = "yes")]
    pub event_sampling: bool,
    #[serde(default)]
    pub check_invariants: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            page_cache: true,
            write_policy: WritePolicy::Writeback,
            cadence: None,
            event_sampling: true,
            check_invariants: false,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub directory: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub simulation: SimulationSection,
    pub platform: PlatformSpec,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub output: OutputSection,
}

/// Command-line overrides of scenario settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub page_cache: Option<bool>,
    pub write_policy: Option<WritePolicy>,
    pub cadence: Option<f64>,
    pub instances: Option<usize>,
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    #[serde(flatten)]
    report: &'a RunReport,
}

const BUNDLED: &[(&str, &str)] = &[
    ("exp1_3gb", include_str!("../scenarios/exp1_3gb.toml")),
    ("exp1_20gb", include_str!("../scenarios/exp1_20gb.toml")),
    ("exp1_50gb", include_str!("../scenarios/exp1_50gb.toml")),
    ("exp1_75gb", include_str!("../scenarios/exp1_75gb.toml")),
    ("exp1_100gb", include_str!("../scenarios/exp1_100gb.toml")),
    ("exp2_concurrent", include_str!("../scenarios/exp2_concurrent.toml")),
    ("exp3_nfs", include_str!("../scenarios/exp3_nfs.toml")),
    ("exp4_workflow", include_str!("../scenarios/exp4_workflow.toml")),
];

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

/// TOML source of a bundled scenario. A trailing `.toml` or `.scenario` is
/// ignored.
pub fn bundled_source(name: &str) -> Option<&'static str> {
    let name = name
        .strip_suffix(".toml")
        .or_else(|| name.strip_suffix(".scenario"))
        .unwrap_or(name);
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

impl Scenario {
    /// Parses and validates a scenario.
    pub fn from_toml(src: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(src)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&src)
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        let src = bundled_source(name).ok_or_else(|| ScenarioError::UnknownBundled(name.to_string()))?;
        Self::from_toml(src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks references and value ranges; reports every problem found.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        if self.version != SCHEMA_VERSION {
            errs.push(format!("unsupported version {} (expected {SCHEMA_VERSION})", self.version));
        }
        let p = &self.platform;
        if p.hosts.is_empty() {
            errs.push("platform.hosts is empty".into());
        }
        let mut names = BTreeSet::new();
        for h in &p.hosts {
            if !names.insert(&h.name) {
                errs.push(format!("duplicate host `{}`", h.name));
            }
            if h.total_mem == 0 {
                errs.push(format!("host `{}`: total_mem must be > 0", h.name));
            }
            if !(h.memory_bw > 0.0 && h.memory_bw.is_finite()) {
                errs.push(format!("host `{}`: memory_bw must be > 0", h.name));
            }
            if let Err(e) = h.disk.validate() {
                errs.push(format!("host `{}`: {e}", h.name));
            }
            if let Err(e) = h.cache.validate() {
                errs.push(format!("host `{}`: {e}", h.name));
            }
        }
        let mut links = BTreeSet::new();
        for l in &p.links {
            if !links.insert(&l.name) {
                errs.push(format!("duplicate link `{}`", l.name));
            }
            if let Err(e) = l.validate() {
                errs.push(e);
            }
        }
        for m in &p.mounts {
            for (what, host) in [("client", &m.client), ("server", &m.server)] {
                if p.host(host).is_none() {
                    errs.push(format!("mount `{}`: unknown {what} host `{host}`", m.name));
                }
            }
            if m.client == m.server {
                errs.push(format!("mount `{}`: client and server are the same host", m.name));
            }
            if !links.contains(&m.link) {
                errs.push(format!("mount `{}`: unknown link `{}`", m.name, m.link));
            }
        }

        let w = &self.workload;
        if p.host(&w.host).is_none() {
            errs.push(format!("workload: unknown host `{}`", w.host));
        }
        if let Some(mount) = &w.mount {
            match p.mount(mount) {
                None => errs.push(format!("workload: unknown mount `{mount}`")),
                Some(m) if m.client != w.host => errs.push(format!(
                    "workload: mount `{mount}` is mounted on `{}`, not `{}`",
                    m.client, w.host
                )),
                Some(_) => {}
            }
        }
        if w.instances == 0 {
            errs.push("workload.instances must be >= 1".into());
        }
        if w.chunk_size == 0 {
            errs.push("workload.chunk_size must be > 0".into());
        }
        if w.pipeline.tasks.is_empty() {
            errs.push("workload.pipeline.tasks is empty".into());
        }
        let mut outputs = BTreeSet::new();
        for t in &w.pipeline.tasks {
            if !(t.cpu_time >= 0.0 && t.cpu_time.is_finite()) {
                errs.push(format!("task `{}`: cpu_time must be >= 0", t.name));
            }
            for f in t.inputs.iter().chain(&t.outputs) {
                if f.size == 0 {
                    errs.push(format!("task `{}`: file `{}` has size 0", t.name, f.name));
                } else if w.chunk_size > f.size {
                    errs.push(format!(
                        "task `{}`: chunk_size {} exceeds size {} of file `{}`",
                        t.name, w.chunk_size, f.size, f.name
                    ));
                }
            }
            for f in &t.outputs {
                if !outputs.insert(&f.name) {
                    errs.push(format!("file `{}` is written by more than one task", f.name));
                }
            }
        }
        if let Some(c) = self.simulation.cadence {
            if !(c > 0.0 && c.is_finite()) {
                errs.push(format!("simulation.cadence must be > 0, got {c}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ScenarioError> {
        if let Some(v) = o.page_cache {
            self.simulation.page_cache = v;
        }
        if let Some(v) = o.write_policy {
            self.simulation.write_policy = v;
        }
        if let Some(v) = o.cadence {
            self.simulation.cadence = Some(v);
        }
        if let Some(v) = o.instances {
            self.workload.instances = v;
        }
        if let Some(v) = &o.output {
            self.output.directory = Some(v.clone());
        }
        self.validate()
    }

    pub fn options(&self) -> RunOptions {
        RunOptions {
            page_cache: self.simulation.page_cache,
            write_policy: self.simulation.write_policy,
            cadence: self.simulation.cadence,
            event_sampling: self.simulation.event_sampling,
            snapshots: true,
            check_invariants: self.simulation.check_invariants,
            trace: false,
        }
    }

    pub fn run(&self) -> Result<RunReport, SimError> {
        self.run_with(&self.options())
    }

    pub fn run_with(&self, opts: &RunOptions) -> Result<RunReport, SimError> {
        workload::run(&self.platform, &self.workload, opts)
    }

    pub fn summary_json(&self, report: &RunReport) -> serde_json::Value {
        serde_json::to_value(Summary {
            scenario: &self.name,
            report,
        })
        .expect("summary serializes")
    }

    /// Writes the metric files of `report` into `dir`.
    pub fn export(&self, report: &RunReport, dir: &Path) -> Result<(), SimError> {
        let summary = Summary {
            scenario: &self.name,
            report,
        };
        metrics::export(dir, &report.metrics, &summary, Some(report.wall_clock))
    }
}
