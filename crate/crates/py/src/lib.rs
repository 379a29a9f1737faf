//! Python module `cryptojack`. Structured results come back as plain dicts.

use cryptojack::blacklist::{self, FilterRule};
use cryptojack::config::Config;
use cryptojack::economics::{self, PayoutModel, VisitStats};
use cryptojack::pool;
use cryptojack::profile;
use cryptojack::report;
use cryptojack::similarity::{self, Linkage};
use cryptojack::telemetry::{self, VisitRecord, WasmArtifact};
use cryptojack::testbed;
use cryptojack::wallet::{PrefixTable, WalletAddress};
use cryptojack::wasm;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// One page visit: scripts, Wasm modules, frames and CPU profile.
#[pyclass(name = "Visit", module = "cryptojack", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVisit {
    pub inner: VisitRecord,
}

#[pymethods]
impl PyVisit {
    #[staticmethod]
    fn decode(line: &[u8]) -> PyResult<Self> {
        telemetry::decode_visit(line).map(|inner| PyVisit { inner }).map_err(err)
    }

    fn encode<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = telemetry::encode_visit(&self.inner).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn site(&self) -> &str {
        &self.inner.site
    }

    #[getter]
    fn rank(&self) -> Option<u32> {
        self.inner.rank
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn function_loads(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &profile::function_loads(&self.inner))
    }

    #[pyo3(signature = (load_threshold_pct = profile::PHASE1_LOAD_THRESHOLD_PCT, worker_threshold = profile::PHASE1_WORKER_THRESHOLD))]
    fn phase1(&self, py: Python<'_>, load_threshold_pct: f64, worker_threshold: u32) -> PyResult<Py<PyAny>> {
        let flags = profile::phase1_flags(&self.inner, load_threshold_pct, worker_threshold);
        let mut v = serde_json::to_value(flags).map_err(err)?;
        v["candidate"] = flags.candidate().into();
        to_py(py, &v)
    }

    #[pyo3(signature = (threshold_pct = profile::PHASE2_LOAD_THRESHOLD_PCT))]
    fn phase2(&self, py: Python<'_>, threshold_pct: f64) -> PyResult<Py<PyAny>> {
        to_py(py, &profile::phase2_verdict(&self.inner, threshold_pct).map_err(err)?)
    }

    /// Throttle estimate for an active miner; raises if the visit is not one.
    fn throttle(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let verdict = profile::phase2_default(&self.inner).map_err(err)?;
        to_py(py, &economics::estimate_throttle(&self.inner, &verdict).map_err(err)?)
    }

    fn wasm_codebase_hash(&self) -> PyResult<Option<String>> {
        if self.inner.wasm_modules.is_empty() {
            return Ok(None);
        }
        Ok(Some(wasm::codebase_hash(&self.inner.wasm_modules).map_err(err)?.to_hex()))
    }

    fn __repr__(&self) -> String {
        format!("Visit({:?})", self.inner.site)
    }
}

/// Decoded wallet address.
#[pyclass(name = "WalletAddress", module = "cryptojack", frozen)]
pub struct PyWallet {
    #[pyo3(get)]
    text: String,
    #[pyo3(get)]
    currency: String,
    #[pyo3(get)]
    checksum_ok: bool,
}

#[pymethods]
impl PyWallet {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        let w = WalletAddress::parse(text, &PrefixTable::default()).map_err(err)?;
        Ok(PyWallet {
            text: w.text,
            currency: w.currency.to_string(),
            checksum_ok: w.checksum_ok,
        })
    }

    fn __repr__(&self) -> String {
        format!("WalletAddress({}, checksum_ok={})", self.currency, self.checksum_ok)
    }
}

/// Parsed filter list.
#[pyclass(name = "FilterList", module = "cryptojack", frozen)]
pub struct PyFilterList {
    rules: Vec<FilterRule>,
    #[pyo3(get)]
    malformed: usize,
    #[pyo3(get)]
    skipped: usize,
}

#[pymethods]
impl PyFilterList {
    #[new]
    fn new(text: &str) -> Self {
        let report = blacklist::parse_rules(text);
        PyFilterList {
            malformed: report.malformed.len(),
            skipped: report.skipped_with_warning() + report.comments,
            rules: report.rules,
        }
    }

    fn __len__(&self) -> usize {
        self.rules.len()
    }

    fn matches(&self, url: &str) -> bool {
        blacklist::any_match(&self.rules, url)
    }

    fn detected_sites(&self, visits: Vec<PyRef<'_, PyVisit>>) -> Vec<String> {
        let corpus: Vec<VisitRecord> = visits.iter().map(|v| v.inner.clone()).collect();
        blacklist::detected_sites(&self.rules, &corpus).into_iter().collect()
    }
}

#[pyfunction]
fn decode_visit(line: &[u8]) -> PyResult<PyVisit> {
    PyVisit::decode(line)
}

/// `(miners, benign)` synthetic testbed visits.
#[pyfunction]
#[pyo3(signature = (cores = 4, profile_ms = 30_000.0, benign_per_kind = 2))]
fn testbed_corpus(cores: u32, profile_ms: f64, benign_per_kind: usize) -> (Vec<PyVisit>, Vec<PyVisit>) {
    let (m, b) = testbed::testbed_corpus(cores, profile_ms, benign_per_kind);
    let wrap = |v: Vec<VisitRecord>| v.into_iter().map(|inner| PyVisit { inner }).collect();
    (wrap(m), wrap(b))
}

#[pyfunction]
fn run_pipeline(py: Python<'_>, phase1: Vec<PyRef<'_, PyVisit>>, phase2: Vec<PyRef<'_, PyVisit>>) -> PyResult<Py<PyAny>> {
    let c1: Vec<VisitRecord> = phase1.iter().map(|v| v.inner.clone()).collect();
    let c2: Vec<VisitRecord> = phase2.iter().map(|v| v.inner.clone()).collect();
    let res = py.detach(|| report::run_pipeline(&c1, &c2, &Config::default()));
    to_py(py, &res)
}

/// Function bodies of a Wasm binary.
#[pyfunction]
fn wasm_function_bodies<'py>(py: Python<'py>, module: &[u8]) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let parsed = wasm::parse_module(module).map_err(err)?;
    Ok(parsed.function_bodies.iter().map(|b| PyBytes::new(py, b)).collect())
}

#[pyfunction]
fn codebase_hash(bodies: Vec<Vec<u8>>) -> PyResult<String> {
    let art = WasmArtifact {
        origin_script_id: String::new(),
        function_bodies: bodies,
    };
    Ok(wasm::codebase_hash(&[art]).map_err(err)?.to_hex())
}

fn payout(hash_rate_hps: Option<f64>, payout_xmr_per_mhash: Option<f64>, xmr_usd: Option<f64>) -> PayoutModel {
    let d = PayoutModel::default();
    PayoutModel {
        hash_rate_hps: hash_rate_hps.unwrap_or(d.hash_rate_hps),
        payout_xmr_per_mhash: payout_xmr_per_mhash.unwrap_or(d.payout_xmr_per_mhash),
        xmr_usd: xmr_usd.unwrap_or(d.xmr_usd),
    }
}

#[pyfunction]
#[pyo3(signature = (visits_per_day, avg_duration_s, *, hash_rate_hps = None, payout_xmr_per_mhash = None, xmr_usd = None))]
fn site_revenue(
    py: Python<'_>,
    visits_per_day: f64,
    avg_duration_s: f64,
    hash_rate_hps: Option<f64>,
    payout_xmr_per_mhash: Option<f64>,
    xmr_usd: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let stats = VisitStats {
        site: String::new(),
        visits_per_day,
        avg_duration_s,
    };
    let model = payout(hash_rate_hps, payout_xmr_per_mhash, xmr_usd);
    to_py(py, &economics::estimate_revenue(&stats, &model).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (visitor_hours_per_day, *, hash_rate_hps = None, payout_xmr_per_mhash = None, xmr_usd = None))]
fn revenue_upper_bound(
    py: Python<'_>,
    visitor_hours_per_day: f64,
    hash_rate_hps: Option<f64>,
    payout_xmr_per_mhash: Option<f64>,
    xmr_usd: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let model = payout(hash_rate_hps, payout_xmr_per_mhash, xmr_usd);
    to_py(py, &economics::upper_bound(visitor_hours_per_day, &model).map_err(err)?)
}

#[pyfunction]
fn greediness_bin(pct: f64) -> Option<usize> {
    economics::greediness_bin(pct)
}

/// Hashes credited for one share at an 8-hex-digit target.
#[pyfunction]
fn credited_hashes(target: &str) -> PyResult<u64> {
    Ok(pool::credited_hashes(pool::parse_target(target).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (a, b, n = 3))]
fn cosine(a: &str, b: &str, n: usize) -> PyResult<f64> {
    let u = similarity::vectorize(a, n).map_err(err)?;
    let v = similarity::vectorize(b, n).map_err(err)?;
    similarity::cosine(&u, &v).map_err(err)
}

/// Cluster id per document.
#[pyfunction]
#[pyo3(signature = (docs, n = 3, cut_similarity = 0.5, linkage = "average"))]
fn cluster(docs: Vec<String>, n: usize, cut_similarity: f64, linkage: &str) -> PyResult<Vec<usize>> {
    let linkage: Linkage = linkage.parse().map_err(err)?;
    let vecs = docs
        .iter()
        .map(|d| similarity::vectorize(d, n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    Ok(similarity::cluster_with(&vecs, cut_similarity, linkage).map_err(err)?.assignments)
}

#[pymodule(name = "cryptojack")]
pub fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVisit>()?;
    m.add_class::<PyWallet>()?;
    m.add_class::<PyFilterList>()?;
    m.add_function(wrap_pyfunction!(decode_visit, m)?)?;
    m.add_function(wrap_pyfunction!(testbed_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(wasm_function_bodies, m)?)?;
    m.add_function(wrap_pyfunction!(codebase_hash, m)?)?;
    m.add_function(wrap_pyfunction!(site_revenue, m)?)?;
    m.add_function(wrap_pyfunction!(revenue_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(greediness_bin, m)?)?;
    m.add_function(wrap_pyfunction!(credited_hashes, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    Ok(())
}
