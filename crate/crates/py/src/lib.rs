//! Python bindings for the page cache simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pagesim_core::page_cache::{self, CacheTunables, ListKind};
use pagesim_core::scenario::{self, Overrides};
use pagesim_core::sim::SimTime;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    let json = py.import("json")?;
    json.call_method1("loads", (v.to_string(),))
}

/// In-memory page cache state with two LRU lists.
#[pyclass(unsendable)]
struct PageCache {
    inner: page_cache::PageCache,
}

#[pymethods]
impl PageCache {
    #[new]
    #[pyo3(signature = (total_mem, dirty_ratio=0.2, expire_time=30.0, flush_interval=5.0))]
    fn new(total_mem: u64, dirty_ratio: f64, expire_time: f64, flush_interval: f64) -> PyResult<Self> {
        let tunables = CacheTunables { dirty_ratio, expire_time, flush_interval };
        tunables.validate().map_err(value_err)?;
        Ok(PageCache { inner: page_cache::PageCache::new(total_mem, tunables) })
    }

    #[getter]
    fn total_mem(&self) -> u64 {
        self.inner.total_mem()
    }

    #[getter]
    fn free_mem(&self) -> u64 {
        self.inner.free_mem()
    }

    #[getter]
    fn cached(&self) -> u64 {
        self.inner.cached_total()
    }

    #[getter]
    fn dirty(&self) -> u64 {
        self.inner.dirty()
    }

    #[getter]
    fn dirty_limit(&self) -> u64 {
        self.inner.dirty_limit()
    }

    #[getter]
    fn anonymous(&self) -> u64 {
        self.inner.anonymous()
    }

    #[getter]
    fn inactive(&self) -> u64 {
        self.inner.inactive_bytes()
    }

    #[getter]
    fn active(&self) -> u64 {
        self.inner.active_bytes()
    }

    fn cached_of(&self, file: &str) -> u64 {
        self.inner.cached(file)
    }

    fn add_to_cache(&mut self, file: &str, amount: u64, now: f64) -> PyResult<()> {
        self.inner.add_to_cache(file, amount, SimTime(now)).map_err(runtime_err)
    }

    fn write_to_cache(&mut self, file: &str, amount: u64, now: f64) -> PyResult<()> {
        self.inner.write_to_cache(file, amount, SimTime(now)).map_err(runtime_err)
    }

    fn cache_read(&mut self, file: &str, amount: u64, now: f64) -> PyResult<()> {
        self.inner.cache_read(file, amount, SimTime(now)).map_err(runtime_err)
    }

    #[pyo3(signature = (amount, exclude=None))]
    fn flush(&mut self, amount: i64, exclude: Option<&str>) -> u64 {
        self.inner.flush(amount, exclude)
    }

    #[pyo3(signature = (amount, exclude=None))]
    fn evict(&mut self, amount: i64, exclude: Option<&str>) -> u64 {
        self.inner.evict(amount, exclude)
    }

    fn take_expired(&mut self, now: f64) -> Vec<u64> {
        self.inner.take_expired(SimTime(now))
    }

    /// Blocks of `list` ("inactive" or "active") as (file, size, dirty, last_access, entry_time).
    fn blocks(&self, list: &str) -> PyResult<Vec<(String, u64, bool, f64, f64)>> {
        let kind = match list {
            "inactive" => ListKind::Inactive,
            "active" => ListKind::Active,
            other => return Err(value_err(format!("unknown list `{other}`"))),
        };
        Ok(self
            .inner
            .blocks(kind)
            .into_iter()
            .map(|b| (b.file.to_string(), b.size, b.dirty, b.last_access.secs(), b.entry_time.secs()))
            .collect())
    }

    fn check_invariants(&self, now: f64) -> PyResult<()> {
        self.inner.check_invariants(SimTime(now)).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "PageCache(total={}, free={}, cached={}, dirty={})",
            self.inner.total_mem(),
            self.inner.free_mem(),
            self.inner.cached_total(),
            self.inner.dirty()
        )
    }
}

/// A simulation scenario: platform, workload and simulation settings.
#[pyclass(unsendable)]
struct Scenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_toml(src: &str) -> PyResult<Self> {
        scenario::Scenario::from_toml(src).map(|inner| Scenario { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        scenario::Scenario::load(&path).map(|inner| Scenario { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        scenario::Scenario::bundled(name).map(|inner| Scenario { inner }).map_err(value_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    /// Returns a copy with the given settings replaced.
    #[pyo3(signature = (page_cache=None, write_policy=None, cadence=None, instances=None))]
    fn with_overrides(
        &self,
        page_cache: Option<bool>,
        write_policy: Option<&str>,
        cadence: Option<f64>,
        instances: Option<usize>,
    ) -> PyResult<Self> {
        let o = Overrides {
            page_cache,
            write_policy: write_policy.map(str::parse).transpose().map_err(value_err)?,
            cadence,
            instances,
            output: None,
        };
        let mut inner = self.inner.clone();
        inner.apply(&o).map_err(value_err)?;
        Ok(Scenario { inner })
    }

    /// Runs the simulation and returns the summary as a dict.
    ///
    /// When `output` is given the metric files are also written there.
    #[pyo3(signature = (output=None))]
    fn run<'py>(&self, py: Python<'py>, output: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.run().map_err(runtime_err)?;
        if let Some(dir) = output {
            self.inner.export(&report, &dir).map_err(runtime_err)?;
        }
        let summary = to_py(py, &self.inner.summary_json(&report))?;
        let samples = PyDict::new(py);
        samples.set_item("count", report.metrics.samples.len())?;
        summary.set_item("samples", samples)?;
        summary.set_item("wall_clock", report.wall_clock)?;
        Ok(summary)
    }
}

#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    scenario::bundled_names()
}

#[pymodule]
fn pagesim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PageCache>()?;
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    Ok(())
}
