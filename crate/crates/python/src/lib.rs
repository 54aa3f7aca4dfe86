//! Python bindings.
//!
//! Model specs, scenarios and analyses cross the boundary as JSON text or as
//! plain dicts (encoded with the standard `json` module); results come back
//! as dicts and lists.

use gestdtr_core::continuous::optimal_dose as core_optimal_dose;
use gestdtr_core::engine::fit_dtr as core_fit_dtr;
use gestdtr_core::inference::{qic as core_qic, wald_pvalues as core_wald_pvalues};
use gestdtr_core::loglinear::IrlsOptions;
use gestdtr_core::select::{select_dtr, Criterion, Direction, SelectionOptions, StagePlan};
use gestdtr_core::simulation::{
    analysis_spec, calibrate_beta0 as core_calibrate, generate, run_preset, run_replications, Analysis, Preset,
    Scenario, Stage2Policy, BETA0_BRACKET, CALIBRATION_DRAWS,
};
use gestdtr_core::summary::{regime_rows, FitSummary, SelectionSummary};
use gestdtr_core::{csv_io, validate_dataset, DoseRange, GestError, ModelSpec};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(gestdtr, EstimationError, PyException, "Raised when a fit, selection or simulation fails.");

fn core_err(e: GestError) -> PyErr {
    EstimationError::new_err(e.to_string())
}

/// Reads a JSON string, or any JSON-encodable Python object.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid {what}: {e}")))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn irls_options(irls: Option<&Bound<'_, PyAny>>) -> PyResult<IrlsOptions> {
    let opts: IrlsOptions = match irls {
        Some(o) => from_py(o, "IRLS options")?,
        None => IrlsOptions::default(),
    };
    opts.validate().map_err(core_err)?;
    Ok(opts)
}

fn parse_lower<T: DeserializeOwned>(name: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{name}`")))
}

/// Subjects with their per-stage covariates, treatments and final outcome.
#[pyclass(module = "gestdtr", frozen)]
struct Dataset {
    inner: gestdtr_core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Reads a wide CSV file: `id`, then `x{j}_{name}` and `a{j}` per stage, then `y`.
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        csv_io::read_csv_path(path).map(|inner| Dataset { inner }).map_err(core_err)
    }

    #[staticmethod]
    fn from_csv_string(text: &str) -> PyResult<Self> {
        csv_io::read_csv(text.as_bytes()).map(|inner| Dataset { inner }).map_err(core_err)
    }

    /// One draw from a simulation scenario, using replication stream `rep`.
    #[staticmethod]
    #[pyo3(signature = (scenario, rep=0))]
    fn simulate(scenario: &Bound<'_, PyAny>, rep: u64) -> PyResult<Self> {
        let s: Scenario = from_py(scenario, "scenario")?;
        generate(&s, rep).map(|inner| Dataset { inner }).map_err(core_err)
    }

    fn to_csv_string(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        csv_io::write_csv(&self.inner, &mut buf).map_err(core_err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_stages(&self) -> usize {
        self.inner.n_stages()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids.clone()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<Vec<String>> {
        self.inner.covariate_names.clone()
    }

    fn outcomes(&self) -> Vec<f64> {
        self.inner.outcomes().iter().copied().collect()
    }

    /// Observed treatments at `stage` (1-based).
    fn treatments(&self, stage: usize) -> PyResult<Vec<f64>> {
        if stage == 0 || stage > self.inner.n_stages() {
            return Err(PyValueError::new_err(format!("no stage {stage}")));
        }
        Ok(self.inner.treatments(stage).iter().copied().collect())
    }

    /// Rows breaking the spec's requirements, as a list of dicts (empty when clean).
    fn validate<'py>(&self, py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let spec: ModelSpec = from_py(spec, "model spec")?;
        to_py(py, &validate_dataset(&self.inner, &spec).violations)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, stages={})", self.inner.n(), self.inner.n_stages())
    }
}

/// Fits every stage from the last backwards and returns per-stage estimates,
/// standard errors, Wald p-values, Q, K and QIC.
#[pyfunction]
#[pyo3(signature = (data, spec, irls=None))]
fn fit_dtr<'py>(
    py: Python<'py>,
    data: &Dataset,
    spec: &Bound<'py, PyAny>,
    irls: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: ModelSpec = from_py(spec, "model spec")?;
    let opts = irls_options(irls)?;
    let fit = py.detach(|| core_fit_dtr(&data.inner, &spec, &opts)).map_err(core_err)?;
    to_py(py, &FitSummary::new(&fit, &spec))
}

/// Estimated optimal treatment per subject and stage, as `{id: [a1, a2, ...]}`.
#[pyfunction]
#[pyo3(signature = (data, spec, irls=None))]
fn optimal_regime<'py>(
    py: Python<'py>,
    data: &Dataset,
    spec: &Bound<'py, PyAny>,
    irls: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: ModelSpec = from_py(spec, "model spec")?;
    let opts = irls_options(irls)?;
    let fit = py.detach(|| core_fit_dtr(&data.inner, &spec, &opts)).map_err(core_err)?;
    if let Some(stage) = fit.failed_stage {
        return Err(EstimationError::new_err(format!("IRLS did not converge at stage {stage}")));
    }
    let rows: std::collections::BTreeMap<String, Vec<f64>> = regime_rows(&data.inner, &fit).into_iter().collect();
    to_py(py, &rows)
}

/// Blip model selection. `plans` holds one entry per stage (stage 1 first):
/// `{"fixed": termset}`, `{"stepwise": [terms]}` or `{"exhaustive": [termsets]}`.
/// Without plans every stage searches stepwise over its blip terms in `spec`.
#[pyfunction]
#[pyo3(signature = (data, spec, plans=None, direction="backward", criterion="qic", alpha=0.05, irls=None))]
#[allow(clippy::too_many_arguments)]
fn select<'py>(
    py: Python<'py>,
    data: &Dataset,
    spec: &Bound<'py, PyAny>,
    plans: Option<&Bound<'py, PyAny>>,
    direction: &str,
    criterion: &str,
    alpha: f64,
    irls: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: ModelSpec = from_py(spec, "model spec")?;
    let plans: Vec<StagePlan> = match plans {
        Some(p) => from_py(p, "stage plans")?,
        None => spec.stages.iter().map(|s| StagePlan::Stepwise(s.blip.terms.clone())).collect(),
    };
    let opts = SelectionOptions {
        direction: parse_lower::<Direction>(direction, "direction")?,
        criterion: parse_lower::<Criterion>(criterion, "criterion")?,
        alpha,
        irls: irls_options(irls)?,
    };
    let res = py.detach(|| select_dtr(&data.inner, &spec, &plans, &opts)).map_err(core_err)?;
    to_py(py, &SelectionSummary::new(&res, &spec))
}

/// Monte Carlo replications of one scenario. Without an analysis, the
/// scenario's default models are fitted and the estimates summarized.
#[pyfunction]
#[pyo3(signature = (scenario, reps, analysis=None, irls=None))]
fn simulate<'py>(
    py: Python<'py>,
    scenario: &Bound<'py, PyAny>,
    reps: usize,
    analysis: Option<&Bound<'py, PyAny>>,
    irls: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let s: Scenario = from_py(scenario, "scenario")?;
    let analysis = match analysis {
        Some(a) => from_py(a, "analysis")?,
        None => Analysis::Estimate { spec: analysis_spec(&s) },
    };
    let opts = irls_options(irls)?;
    let report = py.detach(|| run_replications(&s, reps, &analysis, &opts)).map_err(core_err)?;
    to_py(py, &report)
}

/// A named study (`table1`, `table2`, `table3`, `supp-s1` ... `supp-s8`).
#[pyfunction]
#[pyo3(signature = (name, reps, seed=20_190_501, stage2_policy=None, irls=None))]
fn run_study<'py>(
    py: Python<'py>,
    name: &str,
    reps: usize,
    seed: u64,
    stage2_policy: Option<&str>,
    irls: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let preset: Preset = name.parse().map_err(|e: GestError| PyValueError::new_err(e.to_string()))?;
    let policy = stage2_policy.map(|p| parse_lower::<Stage2Policy>(p, "stage-2 policy")).transpose()?;
    let opts = irls_options(irls)?;
    let report = py.detach(|| run_preset(preset, reps, seed, &opts, policy)).map_err(core_err)?;
    to_py(py, &report)
}

/// Outcome intercept giving the requested share of zero outcomes.
#[pyfunction]
#[pyo3(signature = (scenario, target, draws=CALIBRATION_DRAWS))]
fn calibrate_beta0(scenario: &Bound<'_, PyAny>, target: f64, draws: usize) -> PyResult<f64> {
    let s: Scenario = from_py(scenario, "scenario")?;
    core_calibrate(&s, target, draws, BETA0_BRACKET).map_err(core_err)
}

/// Dose maximizing `a * lin + a^2 * quad` on `[lo, hi]`.
#[pyfunction]
fn optimal_dose(lin: f64, quad: f64, lo: f64, hi: f64) -> PyResult<f64> {
    if !(lo <= hi) {
        return Err(PyValueError::new_err(format!("empty dose range [{lo}, {hi}]")));
    }
    Ok(core_optimal_dose(lin, quad, DoseRange { lo, hi }))
}

/// `-2 Q + 2 K`.
#[pyfunction]
fn qic(q: f64, k: f64) -> f64 {
    core_qic(q, k)
}

/// Two-sided p-values of each coefficient against a normal reference.
#[pyfunction]
fn wald_pvalues(psi: Vec<f64>, v_hat: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let p = psi.len();
    if v_hat.len() != p || v_hat.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err(format!("v_hat must be {p} x {p}")));
    }
    let v = DMatrix::from_fn(p, p, |i, j| v_hat[i][j]);
    core_wald_pvalues(&DVector::from_vec(psi), &v).map_err(core_err)
}

#[pymodule]
fn gestdtr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(fit_dtr, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_regime, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_beta0, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_dose, m)?)?;
    m.add_function(wrap_pyfunction!(qic, m)?)?;
    m.add_function(wrap_pyfunction!(wald_pvalues, m)?)?;
    m.add("EstimationError", m.py().get_type::<EstimationError>())?;
    Ok(())
}
