//! Python bindings. Specs (rules, attacks, methods, configs) are accepted
//! either as short names like `"cclip"` or as dicts in the same shape as the
//! TOML configs; structured results come back as plain dicts and lists.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};
use rand_chacha::rand_core::SeedableRng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use clusterguard_core::attacks::{self, AttackContext};
use clusterguard_core::clustering::{self, ClusterObjective};
use clusterguard_core::experiment::{self, ExperimentConfig};
use clusterguard_core::robustness::{self, InstanceGenerator, InstanceKind};
use clusterguard_core::sim::protocol::{self, Method, SimConfig};
use clusterguard_core::{AggregatorSpec, AttackSpec, Error, VectorSet};

fn to_pyerr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NoBounds(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for clusterguard_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_pyerr)
    }
}

/// Serializes through Python's json module so results are native objects.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn dict_to_json(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_json<T: DeserializeOwned>(value: serde_json::Value) -> PyResult<T> {
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A name goes through `FromStr`, anything else through serde.
fn spec<T>(obj: &Bound<'_, PyAny>) -> PyResult<T>
where
    T: FromStr<Err = Error> + DeserializeOwned,
{
    if let Ok(s) = obj.cast::<PyString>() {
        return s.to_str()?.parse().py();
    }
    from_json(dict_to_json(obj)?)
}

fn objective(name: &str) -> PyResult<ClusterObjective> {
    match name.to_ascii_lowercase().as_str() {
        "center" | "centre" => Ok(ClusterObjective::Center),
        "mean" => Ok(ClusterObjective::Mean),
        _ => Err(PyValueError::new_err(format!("unknown objective '{name}' (center or mean)"))),
    }
}

fn sim_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<SimConfig> {
    let mut base = serde_json::to_value(SimConfig::default()).expect("config serializes");
    if let Some(cfg) = config {
        let serde_json::Value::Object(over) = dict_to_json(cfg)? else {
            return Err(PyValueError::new_err("config must be a dict"));
        };
        let obj = base.as_object_mut().expect("config is an object");
        for (k, v) in over {
            obj.insert(k, v);
        }
    }
    from_json(base)
}

fn experiment_config(config: Option<&Bound<'_, PyAny>>, overrides: &[String]) -> PyResult<ExperimentConfig> {
    match config {
        None => ExperimentConfig::from_toml_with_overrides("", overrides).py(),
        Some(c) => match c.cast::<PyString>() {
            Ok(s) => ExperimentConfig::from_toml_with_overrides(s.to_str()?, overrides).py(),
            Err(_) => {
                // go through TOML so overrides and validation behave the same
                let cfg: ExperimentConfig = from_json(dict_to_json(c)?)?;
                ExperimentConfig::from_toml_with_overrides(&cfg.to_toml().py()?, overrides).py()
            }
        },
    }
}

/// An aggregation rule, e.g. `Aggregator("cwtm")` or
/// `Aggregator({"rule": "cclip", "tau": 1.0, "iterations": 3})`.
#[pyclass(module = "clusterguard", frozen)]
struct Aggregator {
    spec: AggregatorSpec,
}

#[pymethods]
impl Aggregator {
    #[new]
    fn new(spec_: &Bound<'_, PyAny>) -> PyResult<Self> {
        let spec: AggregatorSpec = spec(spec_)?;
        spec.validate().py()?;
        Ok(Aggregator { spec })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.spec.name()
    }

    /// Aggregates `vectors` assuming at most `f` of them are Byzantine.
    fn __call__(&self, vectors: Vec<Vec<f64>>, f: usize) -> PyResult<Vec<f64>> {
        clusterguard_core::aggregate(&self.spec, &VectorSet::new(vectors, f).py()?).py()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.spec)
    }

    fn __repr__(&self) -> String {
        format!("Aggregator({})", serde_json::to_string(&self.spec).unwrap_or_default())
    }
}

/// A Byzantine attack, e.g. `Attack("omn")` or `Attack({"kind": "empire", "factor": -0.5})`.
#[pyclass(module = "clusterguard", frozen)]
struct Attack {
    spec: AttackSpec,
}

#[pymethods]
impl Attack {
    #[new]
    fn new(spec_: &Bound<'_, PyAny>) -> PyResult<Self> {
        let spec: AttackSpec = spec(spec_)?;
        spec.validate().py()?;
        Ok(Attack { spec })
    }

    #[getter]
    fn name(&self) -> String {
        self.spec.to_string()
    }

    /// The `f` Byzantine vectors for one round given the honest updates.
    /// `target` is the rule PGA attacks when its spec names none.
    #[pyo3(signature = (honest, f, *, byzantine_true=None, server_f=None, target=None, round=0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn craft(
        &self,
        honest: Vec<Vec<f64>>,
        f: usize,
        byzantine_true: Option<Vec<Vec<f64>>>,
        server_f: Option<usize>,
        target: Option<&Bound<'_, PyAny>>,
        round: u64,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let target: Option<AggregatorSpec> = target.map(spec).transpose()?;
        let byz = byzantine_true.unwrap_or_default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = AttackContext {
            honest: &honest,
            byzantine_true: &byz,
            f,
            server_f: server_f.unwrap_or(f),
            target: target.as_ref(),
            round,
            rng: &mut rng,
        };
        attacks::craft(&self.spec, &mut ctx).py()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.spec)
    }

    fn __repr__(&self) -> String {
        format!("Attack({})", serde_json::to_string(&self.spec).unwrap_or_default())
    }
}

/// Aggregates with a rule given by name or dict.
#[pyfunction]
fn aggregate(rule: &Bound<'_, PyAny>, vectors: Vec<Vec<f64>>, f: usize) -> PyResult<Vec<f64>> {
    let rule: AggregatorSpec = spec(rule)?;
    clusterguard_core::aggregate(&rule, &VectorSet::new(vectors, f).py()?).py()
}

/// Medoid-based 2-approximation of the tightest `n - f` cluster.
#[pyfunction]
#[pyo3(signature = (vectors, f, objective="center"))]
fn approx_cluster<'py>(py: Python<'py>, vectors: Vec<Vec<f64>>, f: usize, objective: &str) -> PyResult<Bound<'py, PyAny>> {
    let sol = clustering::approx_cluster(self::objective(objective)?, &VectorSet::new(vectors, f).py()?).py()?;
    to_object(py, &sol)
}

/// Optimal `n - f` cluster by enumeration (small `n` only).
#[pyfunction]
#[pyo3(signature = (vectors, f, objective="center"))]
fn exact_cluster<'py>(py: Python<'py>, vectors: Vec<Vec<f64>>, f: usize, objective: &str) -> PyResult<Bound<'py, PyAny>> {
    let sol = clustering::exact_cluster(self::objective(objective)?, &VectorSet::new(vectors, f).py()?).py()?;
    to_object(py, &sol)
}

/// Measures a rule's robustness criteria on random instances and checks
/// them against closed-form bounds. Returns a dict with a `text` report
/// and a `passed` flag besides the raw outcomes.
#[pyfunction]
#[pyo3(signature = (rule, n=10, f=2, d=3, trials=500, seed=0, kind="mixed", against=None, delta_max=None))]
#[allow(clippy::too_many_arguments)]
fn certify<'py>(
    py: Python<'py>,
    rule: &Bound<'py, PyAny>,
    n: usize,
    f: usize,
    d: usize,
    trials: u64,
    seed: u64,
    kind: &str,
    against: Option<&Bound<'py, PyAny>>,
    delta_max: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let rule: AggregatorSpec = spec(rule)?;
    let against: AggregatorSpec = match against {
        Some(a) => spec(a)?,
        None => rule.clone(),
    };
    let kind: InstanceKind = kind.parse().py()?;
    let generator = InstanceGenerator::new(n, f, d, kind).py()?;
    let c = py
        .detach(|| robustness::certify(&rule, &against, &generator, trials, seed, delta_max))
        .py()?;
    let out = to_object(py, &c)?;
    out.set_item("text", c.to_text())?;
    out.set_item("passed", c.all_passed())?;
    Ok(out)
}

/// One training run, without attack unless one is given. `config`
/// overrides individual simulator settings.
#[pyfunction]
#[pyo3(signature = (method, attack=None, config=None))]
fn simulate<'py>(
    py: Python<'py>,
    method: &Bound<'py, PyAny>,
    attack: Option<&Bound<'py, PyAny>>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let method: Method = spec(method)?;
    let attack: AttackSpec = attack.map(spec).transpose()?.unwrap_or(AttackSpec::None);
    let cfg = sim_config(config)?;
    let rec = py.detach(|| protocol::run(&cfg, &method, &attack)).py()?;
    to_object(py, &rec)
}

/// Default simulator settings as a dict.
#[pyfunction]
fn default_sim_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_object(py, &SimConfig::default())
}

/// Resolves an experiment config (TOML text, dict or None for the default
/// matrix) and returns it as a dict.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn experiment_plan<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>, overrides: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = experiment_config(config, &overrides)?;
    let out = to_object(py, &cfg)?;
    out.set_item("cells", cfg.plan().len())?;
    out.set_item("config_hash", cfg.hash())?;
    Ok(out)
}

/// Runs an experiment matrix under `out` and returns the result directory,
/// the worst-case table and any failed cells.
#[pyfunction]
#[pyo3(signature = (config, out, overrides=Vec::new(), force=false))]
fn run_matrix<'py>(
    py: Python<'py>,
    config: Option<&Bound<'py, PyAny>>,
    out: PathBuf,
    overrides: Vec<String>,
    force: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = experiment_config(config, &overrides)?;
    let outcome = py.detach(|| experiment::run_matrix(&cfg, &out, force)).py()?;
    let d = PyDict::new(py);
    d.set_item("dir", &outcome.dir)?;
    d.set_item("cells", outcome.results.len())?;
    d.set_item("worst_tsv", outcome.table.worst_tsv())?;
    d.set_item("table_tsv", outcome.table.rows_tsv())?;
    let failures: Vec<(String, String)> = outcome
        .failures()
        .map(|(c, m)| (c.id(), m.to_string()))
        .collect();
    d.set_item("failures", failures)?;
    Ok(d)
}

/// Re-reads a result directory, writes `summary/` and returns the ranking.
#[pyfunction]
fn summarize(py: Python<'_>, dir: PathBuf) -> PyResult<Bound<'_, PyDict>> {
    let s = py.detach(|| experiment::summarize(&dir)).py()?;
    let d = PyDict::new(py);
    d.set_item("ranking_tsv", s.table.ranking_tsv())?;
    d.set_item("series_tsv", s.series_tsv())?;
    d.set_item("problems", s.problems)?;
    Ok(d)
}

#[pymodule]
fn clusterguard(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Aggregator>()?;
    m.add_class::<Attack>()?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(approx_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(exact_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(default_sim_config, m)?)?;
    m.add_function(wrap_pyfunction!(experiment_plan, m)?)?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    Ok(())
}
