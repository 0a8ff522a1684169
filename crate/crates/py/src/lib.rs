//! Python bindings for the masked-generation shortcut stack.
//!
//! Exposes the schedule/plan primitives plus the model, generation, and
//! trajectory types; see python/smoke_test.py for usage.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use migs_core::basemodel::{train_base, BaseConfig, TrainBaseConfig};
use migs_core::checkpoint::file_sha256;
use migs_core::dataset::{GeneratorKind, SyntheticDataset};
use migs_core::inference::{self, Accelerator, GenerateConfig, RunOptions};
use migs_core::migm::{self, MaskSchedule, SamplerConfig, ScheduleKind, Vocabulary};
use migs_core::shortcut::ShortcutConfig;
use migs_core::tensor::Tensor;
use migs_core::trainer::{train_shortcut, TrainShortcutConfig};
use migs_core::trajectory::TrajectoryRecord;

fn err(e: migs_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_schedule(kind: &str) -> PyResult<MaskSchedule> {
    Ok(MaskSchedule { kind: ScheduleKind::parse(kind).map_err(err)? })
}

/// Mask ratio gamma(t) for a named schedule ("cosine" or "linear").
#[pyfunction]
fn gamma(kind: &str, t: f64) -> PyResult<f64> {
    parse_schedule(kind)?.gamma(t).map_err(err)
}

/// Tokens decoded at step i of n for sequence length l.
#[pyfunction]
fn unmask_count(kind: &str, l: usize, i: usize, n: usize) -> PyResult<usize> {
    Ok(migm::unmask_count(parse_schedule(kind)?, l, i, n))
}

/// The 1-based steps run at full model cost under budget b of n.
#[pyfunction]
fn full_step_indices(n: usize, b: usize) -> PyResult<Vec<usize>> {
    inference::full_step_indices(n, b).map_err(err)
}

/// Backward-difference polynomial extrapolation of a feature history;
/// each history entry is a row-major matrix as a list of rows.
#[pyfunction]
fn taylor_extrapolate(history: Vec<Vec<Vec<f64>>>, order: usize) -> PyResult<Vec<Vec<f64>>> {
    let tensors: Vec<Tensor<f64>> = history
        .iter()
        .map(|rows| Tensor::from_rows(rows).map_err(err))
        .collect::<PyResult<_>>()?;
    let out = inference::taylor_extrapolate(&tensors, order).map_err(err)?;
    let (r, _) = out.dims2().map_err(err)?;
    Ok((0..r).map(|i| out.row(i).to_vec()).collect())
}

/// The base unmasking transformer.
#[pyclass]
struct BaseModel {
    inner: migs_core::basemodel::BaseModel<f32>,
    hash: [u8; 32],
}

#[pymethods]
impl BaseModel {
    /// Freshly initialized model at the default desk scale.
    #[staticmethod]
    fn fresh(seed: u64) -> Self {
        Self { inner: migs_core::basemodel::BaseModel::new(BaseConfig::default(), seed), hash: [0; 32] }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = migs_core::basemodel::BaseModel::load(&path).map_err(err)?;
        let hash = file_sha256(&path).map_err(err)?;
        Ok(Self { inner, hash })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)?;
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn l(&self) -> usize {
        self.inner.config().l
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    /// Train on the built-in synthetic distribution; returns the held-out
    /// cross-entropy (initial, final).
    #[pyo3(signature = (steps, seed = 0, kind = "stripes"))]
    fn train(&mut self, steps: usize, seed: u64, kind: &str) -> PyResult<(f64, f64)> {
        let c = self.inner.config().clone();
        let ds = SyntheticDataset::new(
            GeneratorKind::parse(kind).map_err(err)?,
            c.num_classes,
            c.l,
            Vocabulary::new(c.vocab_size),
            0.05,
        )
        .map_err(err)?;
        let cfg = TrainBaseConfig { steps, seed, ..Default::default() };
        let report = train_base(&mut self.inner, &ds, &cfg, None).map_err(err)?;
        Ok((report.init_heldout_ce, report.final_heldout_ce))
    }
}

/// The lightweight feature-delta predictor.
#[pyclass]
struct ShortcutModel {
    inner: migs_core::shortcut::ShortcutModel<f32>,
}

#[pymethods]
impl ShortcutModel {
    /// Freshly initialized (identity-transition) model bound to a base.
    #[staticmethod]
    fn fresh(base: &BaseModel, seed: u64) -> PyResult<Self> {
        let inner =
            migs_core::shortcut::ShortcutModel::new(ShortcutConfig::default(), &base.inner, base.hash, seed)
                .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: migs_core::shortcut::ShortcutModel::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)?;
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Fit on recorded trajectories; returns a dict of held-out MSEs.
    fn train(
        &mut self,
        py: Python<'_>,
        records: Vec<PyRef<Trajectory>>,
        steps: usize,
        seed: u64,
    ) -> PyResult<Py<pyo3::types::PyDict>> {
        let recs: Vec<TrajectoryRecord> = records.iter().map(|r| r.inner.clone()).collect();
        let cfg = TrainShortcutConfig { steps, seed, ..Default::default() };
        let report = train_shortcut(&mut self.inner, &recs, &cfg, None).map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("init", report.init_heldout_mse)?;
        d.set_item("final", report.final_heldout_mse)?;
        d.set_item("cache_reuse", report.cache_reuse_heldout_mse)?;
        d.set_item("taylor1", report.taylor1_heldout_mse)?;
        Ok(d.unbind())
    }

    /// One predicted transition f_prev -> f_next given the newly decoded
    /// (position, token) pairs at time t.
    fn apply_transition(
        &self,
        f_prev: Vec<Vec<f32>>,
        newly_decoded: Vec<(u16, u16)>,
        t: f64,
    ) -> PyResult<Vec<Vec<f32>>> {
        let f = Tensor::from_rows(&f_prev).map_err(err)?;
        let out = self.inner.apply_transition(&f, &newly_decoded, t).map_err(err)?;
        let (r, _) = out.dims2().map_err(err)?;
        Ok((0..r).map(|i| out.row(i).to_vec()).collect())
    }
}

/// One recorded generation run.
#[pyclass]
struct Trajectory {
    inner: TrajectoryRecord,
}

#[pymethods]
impl Trajectory {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = TrajectoryRecord::load(&path).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.steps.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.meta.seed
    }

    /// Token sequence after the given step.
    fn tokens(&self, step: usize) -> PyResult<Vec<u16>> {
        self.inner
            .steps
            .get(step)
            .map(|s| s.x.tokens.clone())
            .ok_or_else(|| PyValueError::new_err(format!("step {step} out of range")))
    }

    /// Number of usable (f_prev, newly_decoded, t, f_next) training pairs.
    fn num_pairs(&self) -> usize {
        self.inner.pair_samples().iter().filter(|p| !p.newly_decoded.is_empty()).count()
    }
}

/// Run generation; returns a dict with tokens, base-model call count, and
/// the per-step mode trace. With budget < n the named accelerator covers
/// the remaining steps ("shortcut" requires the shortcut argument).
#[pyfunction]
#[pyo3(signature = (base, n, seed, class_id = None, budget = None, accelerator = "shortcut",
                    shortcut = None, guidance = 0.0, temperature = 1.0, schedule = "cosine",
                    record_path = None))]
#[allow(clippy::too_many_arguments)]
fn generate(
    py: Python<'_>,
    base: &BaseModel,
    n: usize,
    seed: u64,
    class_id: Option<usize>,
    budget: Option<usize>,
    accelerator: &str,
    shortcut: Option<PyRef<ShortcutModel>>,
    guidance: f64,
    temperature: f64,
    schedule: &str,
    record_path: Option<PathBuf>,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let budget = budget.unwrap_or(n);
    let accel = if budget >= n { Accelerator::None } else { Accelerator::parse(accelerator).map_err(err)? };
    let cfg = GenerateConfig {
        n,
        class: class_id,
        schedule: parse_schedule(schedule)?,
        sampler: SamplerConfig {
            seed,
            temperature,
            guidance_scale: guidance,
            ..Default::default()
        },
    };
    let opts = RunOptions { record: record_path.is_some(), base_hash: base.hash, ..Default::default() };
    let sc = shortcut.as_ref().map(|s| &s.inner);
    let out = inference::generate_accelerated(&base.inner, sc, accel, budget, &cfg, &opts).map_err(err)?;
    if let Some(path) = record_path {
        out.cond_trajectory.as_ref().expect("record requested").save(&path).map_err(err)?;
    }
    let d = pyo3::types::PyDict::new(py);
    d.set_item("tokens", out.tokens.tokens.clone())?;
    d.set_item("num_base_calls", out.num_base_calls)?;
    d.set_item(
        "modes",
        out.trace.iter().map(|t| format!("{:?}", t.mode).to_lowercase()).collect::<Vec<_>>(),
    )?;
    Ok(d.unbind())
}

#[pymodule]
fn migs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<BaseModel>()?;
    m.add_class::<ShortcutModel>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(unmask_count, m)?)?;
    m.add_function(wrap_pyfunction!(full_step_indices, m)?)?;
    m.add_function(wrap_pyfunction!(taylor_extrapolate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
