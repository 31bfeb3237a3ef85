//! Python bindings: synthetic data, the fusion forward pass, CCC, the
//! experiment commands and the gradient suite.

use std::path::PathBuf;

use avfusion_core::benchmark::{run_seed, BenchmarkConfig};
use avfusion_core::config::ExperimentConfig;
use avfusion_core::fusion::{FusionConfig, FusionLayout, FusionMode, ModalityFeatures};
use avfusion_core::metrics::{ccc_masked, EvalReport};
use avfusion_core::numcore::{Matrix, ParamSet};
use avfusion_core::synthdata::{generate as generate_clips, GenConfig, LabeledClip};
use avfusion_core::verify::SuiteOptions;
use avfusion_core::{cli, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Format { .. } | Error::Num(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Csv(_) | Error::Training(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matrix(name: &str, rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{name}: rows have different lengths")));
    }
    Matrix::new(r, c, rows.concat()).map_err(|e| PyValueError::new_err(format!("{name}: {e}")))
}

fn mode(name: &str) -> PyResult<FusionMode> {
    name.parse().map_err(|e: Error| to_py(e))
}

/// One synthetic clip; feature matrices are lists of rows (`d × L`).
#[pyclass(module = "avfusion", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Clip {
    id: String,
    audio: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    valence: Vec<f64>,
    arousal: Vec<f64>,
    valid: Vec<bool>,
    corrupt_audio: Vec<bool>,
    corrupt_visual: Vec<bool>,
}

impl From<&LabeledClip> for Clip {
    fn from(c: &LabeledClip) -> Self {
        Self {
            id: c.id.clone(),
            audio: rows(&c.audio),
            visual: rows(&c.visual),
            valence: c.valence.clone(),
            arousal: c.arousal.clone(),
            valid: c.valid.clone(),
            corrupt_audio: c.corrupt_audio.clone(),
            corrupt_visual: c.corrupt_visual.clone(),
        }
    }
}

#[pymethods]
impl Clip {
    fn __len__(&self) -> usize {
        self.valid.len()
    }

    fn __repr__(&self) -> String {
        format!("Clip(id={:?}, frames={})", self.id, self.valid.len())
    }
}

/// Generates synthetic clips with latent valence/arousal labels.
#[pyfunction]
#[pyo3(signature = (num_videos=24, frames=192, d_audio=16, d_visual=16, corruption_prob=0.0, seed=0))]
fn generate(
    py: Python<'_>,
    num_videos: usize,
    frames: usize,
    d_audio: usize,
    d_visual: usize,
    corruption_prob: f64,
    seed: u64,
) -> PyResult<Vec<Clip>> {
    let cfg = GenConfig { num_videos, frames, d_audio, d_visual, corruption_prob, seed, ..Default::default() };
    let clips = py.detach(|| generate_clips(&cfg)).map_err(to_py)?;
    Ok(clips.iter().map(Clip::from).collect())
}

/// Concordance correlation coefficient over the frames where `mask` is true.
#[pyfunction]
#[pyo3(signature = (pred, truth, mask=None))]
fn ccc(pred: Vec<f64>, truth: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    ccc_masked(&pred, &truth, mask.as_deref()).map(|c| c.value).map_err(|e| to_py(e.into()))
}

/// Randomly initialised fusion block of one variant.
#[pyclass(module = "avfusion")]
struct Fusion {
    layout: FusionLayout,
    params: ParamSet,
}

#[pymethods]
impl Fusion {
    #[new]
    #[pyo3(signature = (mode, d_audio, d_visual, length, iterations=1, temperature=0.1, joint_projection=true, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        d_audio: usize,
        d_visual: usize,
        length: usize,
        iterations: usize,
        temperature: f64,
        joint_projection: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = FusionConfig {
            mode: self::mode(mode)?,
            d_audio,
            d_visual,
            length,
            iterations,
            temperature,
            joint_projection,
            time_weight_gain: None,
        };
        let mut params = ParamSet::new();
        let layout = FusionLayout::init(&config, &mut params, "", &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
        Ok(Self { layout, params })
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.ids().map(|id| self.params.name(id).to_string()).collect()
    }

    fn get_parameter(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let id = self.params.find(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name}")))?;
        Ok(rows(self.params.get(id)))
    }

    fn set_parameter(&mut self, name: &str, value: Vec<Vec<f64>>) -> PyResult<()> {
        let id = self.params.find(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name}")))?;
        let m = matrix(name, value)?;
        if m.shape() != self.params.get(id).shape() {
            return Err(PyValueError::new_err(format!(
                "{name}: expected shape {:?}, got {:?}",
                self.params.get(id).shape(),
                m.shape()
            )));
        }
        *self.params.get_mut(id) = m;
        Ok(())
    }

    /// Returns `fused`, `audio`, `visual` and the per-layer `gates` as
    /// `(audio_scores, visual_scores)` pairs of shape `L × K`.
    fn forward<'py>(&self, py: Python<'py>, audio: Vec<Vec<f64>>, visual: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let feats = ModalityFeatures::new(matrix("audio", audio)?, matrix("visual", visual)?).map_err(to_py)?;
        let s = self.layout.forward_values(&self.params, &feats).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("fused", rows(&s.fused))?;
        d.set_item("audio", rows(&s.output_audio))?;
        d.set_item("visual", rows(&s.output_visual))?;
        let gates: Vec<_> = s.gates.iter().map(|g| (rows(&g.scores_audio), rows(&g.scores_visual))).collect();
        d.set_item("gates", gates)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = &self.layout.config;
        format!(
            "Fusion(mode={}, M={}, d_audio={}, d_visual={}, length={})",
            c.mode, c.iterations, c.d_audio, c.d_visual, c.length
        )
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("fold", r.fold)?;
    d.set_item("mode", r.mode.to_string())?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("temperature", r.temperature)?;
    d.set_item("ccc_valence", r.ccc_valence)?;
    d.set_item("ccc_arousal", r.ccc_arousal)?;
    Ok(d)
}

/// Experiment configuration plus the gen/train/eval/ablate commands.
#[pyclass(module = "avfusion")]
struct Experiment {
    config: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    /// Parses TOML text; `None` gives the defaults.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let config = match toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { config: ExperimentConfig::load(&path).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(to_py)
    }

    /// Writes the dataset to `data` and returns the manifest SHA-256.
    fn gen(&self, py: Python<'_>, data: PathBuf) -> PyResult<String> {
        py.detach(|| cli::cmd_gen(&self.config, &data)).map_err(to_py)
    }

    /// Cross-validates and returns one report per fold and target model.
    fn train<'py>(&self, py: Python<'py>, data: PathBuf, out: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (reports, _) = py.detach(|| cli::cmd_train(&self.config, &data, &out)).map_err(to_py)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }

    /// Re-evaluates the models saved under `params` on `data`.
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf, params: PathBuf, out: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let reports = py.detach(|| cli::cmd_eval(&data, &params, &out)).map_err(to_py)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }

    /// Recursion-depth ablation; rows are `(M, [6 cells], best)`.
    #[pyo3(signature = (data, out, max_m=4))]
    fn ablate(&self, py: Python<'_>, data: PathBuf, out: PathBuf, max_m: usize) -> PyResult<Vec<(usize, Vec<f64>, bool)>> {
        let rows = py.detach(|| cli::cmd_ablate(&self.config, &data, &out, max_m)).map_err(to_py)?;
        Ok(rows.iter().map(|r| (r.iterations, r.cells.to_vec(), r.best)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Experiment(mode={}, M={})", self.config.model.mode, self.config.model.iterations)
    }
}

/// Runs the gradient suite; returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (corrupt_grad=None))]
fn gradcheck(py: Python<'_>, corrupt_grad: Option<String>) -> PyResult<(bool, String)> {
    let opts = SuiteOptions { inject_fault: corrupt_grad, ..Default::default() };
    let mut buf = Vec::new();
    let code = py.detach(|| cli::cmd_gradcheck(&opts, &mut buf)).map_err(to_py)?;
    Ok((code == 0, String::from_utf8_lossy(&buf).into_owned()))
}

/// One seed of the weak-complementarity benchmark; returns mode → best
/// validation valence CCC.
#[pyfunction]
#[pyo3(signature = (seed, corruption_prob=0.5, epochs=20, modes=vec!["RJCA".to_string(), "GRJCA".to_string(), "HGRJCA".to_string()]))]
fn benchmark_seed(
    py: Python<'_>,
    seed: u64,
    corruption_prob: f64,
    epochs: usize,
    modes: Vec<String>,
) -> PyResult<Vec<(String, f64)>> {
    let modes = modes.iter().map(|m| mode(m)).collect::<PyResult<Vec<_>>>()?;
    let cfg = BenchmarkConfig { corruption_prob, epochs, ..Default::default() };
    let r = py.detach(|| run_seed(&cfg, seed, &modes)).map_err(to_py)?;
    Ok(r.scores.into_iter().map(|(m, s)| (m.to_string(), s)).collect())
}

#[pymodule]
fn avfusion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Clip>()?;
    m.add_class::<Fusion>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_seed, m)?)?;
    Ok(())
}
