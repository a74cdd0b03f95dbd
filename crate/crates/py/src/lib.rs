//! Python bindings: models, tasks, decoding runs, policies and metrics.

#![allow(clippy::too_many_arguments)]

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cospec_core::arbitration::{self as arb, ArbitrationPolicy, DecisionMode, PolicyParams};
use cospec_core::diagnostics as diag;
use cospec_core::lm::{self, ChainFamily, DecodeConfig, Temperature, Token};
use cospec_core::rl;
use cospec_core::rng::run_stream;
use cospec_core::spd::{self, CostWeights, RunStats};
use cospec_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Training(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn temperature(t: f64) -> PyResult<Temperature> {
    Temperature::try_from(t).map_err(|_| PyValueError::new_err("temperature must be 0 or 1"))
}

/// One chain-sum problem.
#[pyclass(name = "Task", module = "cospec", from_py_object)]
#[derive(Clone)]
struct PyTask {
    inner: lm::TaskInstance,
}

#[pymethods]
impl PyTask {
    #[new]
    fn new(seed: u64, chain_length: usize) -> Self {
        Self { inner: lm::make_chain_task(seed, chain_length) }
    }

    #[getter]
    fn prompt(&self) -> Vec<Token> {
        self.inner.prompt.clone()
    }

    #[getter]
    fn answer(&self) -> Vec<Token> {
        self.inner.answer.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len
    }

    fn score(&self, output: Vec<Token>) -> u8 {
        lm::score(&self.inner, &output)
    }

    fn __repr__(&self) -> String {
        format!("Task(seed={}, prompt={:?})", self.inner.seed, self.inner.prompt)
    }
}

#[pyfunction]
fn make_suite(seed: u64, n: usize, chain_length: usize) -> Vec<PyTask> {
    lm::make_suite(seed, n, chain_length).into_iter().map(|inner| PyTask { inner }).collect()
}

#[pyfunction]
fn write_suite(path: PathBuf, suite: Vec<PyTask>) -> PyResult<()> {
    let tasks: Vec<_> = suite.into_iter().map(|t| t.inner).collect();
    lm::write_suite(&path, &tasks).map_err(py_err)
}

#[pyfunction]
fn read_suite(path: PathBuf) -> PyResult<Vec<PyTask>> {
    Ok(lm::read_suite(&path).map_err(py_err)?.into_iter().map(|inner| PyTask { inner }).collect())
}

/// Tabular next-token model.
#[pyclass(name = "Model", module = "cospec", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: lm::TabularModel,
}

#[pymethods]
impl PyModel {
    /// Chain-sum expert that errs on a seeded `1 - p` share of states.
    #[staticmethod]
    fn noisy_expert(chain_length: usize, p: f64, seed: u64) -> PyResult<Self> {
        let inner = lm::make_noisy_expert(&ChainFamily::new(chain_length), p, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: lm::read_model(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        lm::write_model(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().size()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn next_distribution(&self, context: Vec<Token>) -> PyResult<Vec<f64>> {
        Ok(self.inner.next_distribution(&context).map_err(py_err)?.to_vec())
    }

    #[pyo3(signature = (task, temperature=0.0, seed=0))]
    fn generate(&self, task: &PyTask, temperature: f64, seed: u64) -> PyResult<(Vec<Token>, usize)> {
        let config = DecodeConfig { temperature: self::temperature(temperature)?, max_len: usize::MAX, seed };
        let mut rng = run_stream("target-only", task.inner.id(), seed);
        lm::generate_autoregressive(&self.inner, &task.inner, &config, &mut rng).map_err(py_err)
    }
}

/// Arbitration policy: `reject`, `accept`, `oracle`, or a learned logistic head.
#[pyclass(name = "Policy", module = "cospec", from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: ArbitrationPolicy,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn reject() -> Self {
        Self { inner: ArbitrationPolicy::AlwaysReject }
    }

    #[staticmethod]
    fn accept() -> Self {
        Self { inner: ArbitrationPolicy::AlwaysAccept }
    }

    /// Exact counterfactual oracle whose branches continue by rejecting.
    #[staticmethod]
    fn oracle() -> Self {
        Self {
            inner: ArbitrationPolicy::oracle(ArbitrationPolicy::AlwaysReject, DecisionMode::Threshold(0.5)),
        }
    }

    #[staticmethod]
    fn learned(weights: Vec<f64>, bias: f64) -> PyResult<Self> {
        if weights.len() != arb::NUM_FEATURES {
            return Err(PyValueError::new_err(format!("expected {} weights", arb::NUM_FEATURES)));
        }
        Ok(Self { inner: ArbitrationPolicy::Learned(PolicyParams { weights, bias }) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let file = arb::read_policy(&path).map_err(py_err)?;
        Ok(Self { inner: ArbitrationPolicy::Learned(file.params()) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let params = self.params()?;
        arb::write_policy(&path, &arb::PolicyFile::new(&params, None)).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn weights(&self) -> PyResult<Vec<f64>> {
        Ok(self.params()?.weights)
    }

    #[getter]
    fn bias(&self) -> PyResult<f64> {
        Ok(self.params()?.bias)
    }

    /// Acceptance probability at a mismatch with these features.
    fn acceptance_prob(&self, features: Vec<f64>) -> PyResult<f64> {
        let z = arb::policy_logit(&self.params()?, &features).map_err(py_err)?;
        Ok(arb::acceptance_prob(z, 0))
    }

    fn __repr__(&self) -> String {
        format!("Policy({})", self.inner.name())
    }
}

impl PyPolicy {
    fn params(&self) -> PyResult<PolicyParams> {
        match &self.inner {
            ArbitrationPolicy::Learned(p) => Ok(p.clone()),
            _ => Err(PyValueError::new_err("only learned policies have parameters")),
        }
    }
}

/// Outcome of one decoding run.
#[pyclass(name = "RunResult", module = "cospec", get_all)]
struct PyRunResult {
    output: Vec<Token>,
    score: u8,
    rounds: usize,
    round_lengths: Vec<usize>,
    target_calls: usize,
    draft_calls: usize,
    arbitrator_calls: usize,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn tau(&self) -> PyResult<f64> {
        spd::mean_accepted_length(&self.stats()).map_err(py_err)
    }

    #[pyo3(signature = (draft_cost=0.05, arbitrator_cost=0.05))]
    fn speedup(&self, draft_cost: f64, arbitrator_cost: f64) -> PyResult<f64> {
        let w = CostWeights { draft: draft_cost, arbitrator: arbitrator_cost };
        spd::cost_model_speedup(&self.stats(), &w).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("RunResult(score={}, rounds={}, output={:?})", self.score, self.rounds, self.output)
    }
}

impl PyRunResult {
    fn new(task: &lm::TaskInstance, output: Vec<Token>, s: RunStats) -> Self {
        Self {
            score: lm::score(task, &output),
            output,
            rounds: s.rounds,
            round_lengths: s.round_lengths,
            target_calls: s.target_calls,
            draft_calls: s.draft_calls,
            arbitrator_calls: s.arbitrator_calls,
        }
    }

    fn stats(&self) -> RunStats {
        RunStats {
            rounds: self.rounds,
            emitted: self.output.len(),
            target_calls: self.target_calls,
            draft_calls: self.draft_calls,
            arbitrator_calls: self.arbitrator_calls,
            round_lengths: self.round_lengths.clone(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (draft, target, task, k=25))]
fn run_vanilla_spd(draft: &PyModel, target: &PyModel, task: &PyTask, k: usize) -> PyResult<PyRunResult> {
    let mut rng = run_stream("vanilla-spd", task.inner.id(), 0);
    let cfg = DecodeConfig::greedy(usize::MAX);
    let r = spd::run_vanilla_spd(&draft.inner, &target.inner, &task.inner, k, &cfg, &mut rng).map_err(py_err)?;
    Ok(PyRunResult::new(&task.inner, r.output, r.stats))
}

#[pyfunction]
#[pyo3(signature = (draft, target, task, k=25, seed=0))]
fn run_speculative_sampling(
    draft: &PyModel,
    target: &PyModel,
    task: &PyTask,
    k: usize,
    seed: u64,
) -> PyResult<PyRunResult> {
    let mut rng = run_stream("spec-sampling", task.inner.id(), seed);
    let cfg = DecodeConfig::sampled(usize::MAX, seed);
    let r = spd::run_speculative_sampling(&draft.inner, &target.inner, &task.inner, k, &cfg, &mut rng)
        .map_err(py_err)?;
    Ok(PyRunResult::new(&task.inner, r.output, r.stats))
}

#[pyfunction]
#[pyo3(signature = (draft, target, policy, task, k=25, lam=0.6, sample=false, temperature=0.0, seed=0))]
fn run_cospec(
    draft: &PyModel,
    target: &PyModel,
    policy: &PyPolicy,
    task: &PyTask,
    k: usize,
    lam: f64,
    sample: bool,
    temperature: f64,
    seed: u64,
) -> PyResult<PyRunResult> {
    let mode = if sample { DecisionMode::Sample } else { DecisionMode::Threshold(lam) };
    let cfg = DecodeConfig { temperature: self::temperature(temperature)?, max_len: usize::MAX, seed };
    let mut rng = run_stream("cospec", task.inner.id(), seed);
    let r = arb::run_cospec(&draft.inner, &target.inner, &policy.inner, &task.inner, k, mode, &cfg, &mut rng)
        .map_err(py_err)?;
    Ok(PyRunResult::new(&task.inner, r.output, r.stats))
}

/// Rows of the attention mask, `True` where query `i` may attend to key `j`.
#[pyfunction]
fn hybrid_mask(context_len: usize, k: usize) -> PyResult<Vec<Vec<bool>>> {
    let m = arb::build_hybrid_mask(context_len, k).map_err(py_err)?;
    Ok((0..m.len()).map(|i| (0..m.len()).map(|j| m.allowed(i, j)).collect()).collect())
}

#[pyfunction]
fn arbitration_input(context: Vec<Token>, draft: Vec<Token>, verify: Vec<Token>) -> PyResult<Vec<Token>> {
    let sep = lm::Vocabulary::chain().sep();
    Ok(arb::build_arbitration_input(&context, &draft, &verify, sep).map_err(py_err)?.tokens)
}

#[pyfunction]
fn feature_names() -> Vec<&'static str> {
    arb::FEATURE_NAMES.to_vec()
}

#[pyfunction]
fn strict_round_length(delta: Vec<u8>) -> usize {
    spd::strict_round_length(&delta)
}

#[pyfunction]
fn cospec_round_length(delta: Vec<u8>, actions: Vec<u8>) -> PyResult<usize> {
    arb::cospec_round_length(&delta, &actions).map_err(py_err)
}

/// Returns `(value, degenerate)`.
#[pyfunction]
fn recovery_metric(target: usize, union: usize, cospec: usize) -> PyResult<(f64, bool)> {
    let r = diag::recovery_metric(target, union, cospec).map_err(py_err)?;
    Ok((r.value, r.degenerate))
}

#[pyfunction]
fn complementarity_gap(utilities: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    diag::complementarity_gap(&utilities).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (draft, target, suite, k=25, steps=500, lr=0.05))]
fn train_sft(
    py: Python<'_>,
    draft: &PyModel,
    target: &PyModel,
    suite: Vec<PyTask>,
    k: usize,
    steps: usize,
    lr: f64,
) -> PyResult<PyPolicy> {
    let tasks: Vec<_> = suite.into_iter().map(|t| t.inner).collect();
    let cfg = rl::SftConfig { k, steps, lr, ..rl::SftConfig::default() };
    let out = py
        .detach(|| rl::train_sft(&PolicyParams::zeros(), &tasks, &draft.inner, &target.inner, &cfg))
        .map_err(py_err)?;
    Ok(PyPolicy { inner: ArbitrationPolicy::Learned(out.policy) })
}

#[pyfunction]
#[pyo3(signature = (draft, target, suite, reference, updates=200, lr=5e-5, seed=0))]
fn train_rl(
    py: Python<'_>,
    draft: &PyModel,
    target: &PyModel,
    suite: Vec<PyTask>,
    reference: &PyPolicy,
    updates: usize,
    lr: f64,
    seed: u64,
) -> PyResult<PyPolicy> {
    let tasks: Vec<_> = suite.into_iter().map(|t| t.inner).collect();
    let reference = reference.params()?;
    let cfg = rl::TrainConfig { updates, lr, ..rl::TrainConfig::default() };
    let out = py
        .detach(|| {
            rl::train_rl(
                &reference,
                &reference,
                &tasks,
                &draft.inner,
                &target.inner,
                &rl::RewardConfig::default(),
                &cfg,
                seed,
            )
        })
        .map_err(py_err)?;
    Ok(PyPolicy { inner: ArbitrationPolicy::Learned(out.policy) })
}

#[pymodule]
fn cospec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTask>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(make_suite, m)?)?;
    m.add_function(wrap_pyfunction!(write_suite, m)?)?;
    m.add_function(wrap_pyfunction!(read_suite, m)?)?;
    m.add_function(wrap_pyfunction!(run_vanilla_spd, m)?)?;
    m.add_function(wrap_pyfunction!(run_speculative_sampling, m)?)?;
    m.add_function(wrap_pyfunction!(run_cospec, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_mask, m)?)?;
    m.add_function(wrap_pyfunction!(arbitration_input, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(strict_round_length, m)?)?;
    m.add_function(wrap_pyfunction!(cospec_round_length, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_metric, m)?)?;
    m.add_function(wrap_pyfunction!(complementarity_gap, m)?)?;
    m.add_function(wrap_pyfunction!(train_sft, m)?)?;
    m.add_function(wrap_pyfunction!(train_rl, m)?)?;
    Ok(())
}
