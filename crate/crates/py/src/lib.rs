//! Python bindings: rotation, the Q-learning rules, feature stores, model
//! checkpoints and the two classifiers. Images cross the boundary as flat
//! row-major lists of floats in `[0, 1]`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rotq::featstore::{FeatureStore, NnResult, NormMode};
use rotq::imgops::{self, AngleDeg};
use rotq::nn::{self, CnnModel};
use rotq::pipeline;
use rotq::qlearn::{self, QConfig, QTable};
use rotq::Tensor;

fn py_err(e: rotq::Error) -> PyErr {
    match e {
        rotq::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_tensor(pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Tensor> {
    Tensor::new(vec![1, height, width], pixels).map_err(py_err)
}

fn parse_norm(norm: &str) -> PyResult<NormMode> {
    norm.parse().map_err(py_err)
}

/// Rotate a `height × width` image counter-clockwise by `angle` degrees.
#[pyfunction]
fn rotate(pixels: Vec<f64>, height: usize, width: usize, angle: f64) -> PyResult<Vec<f64>> {
    let img = image_tensor(pixels, height, width)?;
    Ok(imgops::rotate(&img, AngleDeg(angle))
        .map_err(py_err)?
        .into_data())
}

#[pyfunction]
#[pyo3(signature = (delta_d, delta=0.05))]
fn reward(delta_d: f64, delta: f64) -> i8 {
    qlearn::reward(delta_d, delta)
}

#[pyfunction]
fn observe_state(d: f64, d1: f64) -> usize {
    qlearn::observe_state(d, d1)
}

#[pyfunction]
#[pyo3(signature = (table, state, action, reward, next_state, alpha=0.3, gamma=0.6))]
fn q_update(
    table: [[f64; 4]; 2],
    state: usize,
    action: usize,
    reward: i8,
    next_state: usize,
    alpha: f64,
    gamma: f64,
) -> PyResult<[[f64; 4]; 2]> {
    let t = QTable { values: table };
    qlearn::q_update(&t, state, action, reward, next_state, alpha, gamma)
        .map(|t| t.values)
        .map_err(py_err)
}

/// `(action index, angle)` of the table's best cell.
#[pyfunction]
#[pyo3(signature = (table, actions=None))]
fn select_optimal(table: [[f64; 4]; 2], actions: Option<Vec<f64>>) -> PyResult<(usize, f64)> {
    let actions = match actions {
        Some(a) if a.len() == 4 => a.into_iter().map(AngleDeg).collect(),
        Some(a) => {
            return Err(PyValueError::new_err(format!(
                "need 4 actions, got {}",
                a.len()
            )))
        }
        None => QConfig::default().actions,
    };
    let (i, a) = qlearn::select_optimal(&QTable { values: table }, &actions);
    Ok((i, a.0))
}

/// Result of one rotation episode.
#[pyclass(name = "EpisodeTrace", frozen)]
struct PyEpisodeTrace {
    inner: qlearn::EpisodeTrace,
}

#[pymethods]
impl PyEpisodeTrace {
    #[getter]
    fn chosen_action(&self) -> usize {
        self.inner.chosen_action
    }

    #[getter]
    fn chosen_angle(&self) -> f64 {
        self.inner.chosen_angle.0
    }

    #[getter]
    fn table(&self) -> [[f64; 4]; 2] {
        self.inner.table.values
    }

    #[getter]
    fn base_distance(&self) -> f64 {
        self.inner.base_distance
    }

    /// `(state, action, d1, delta_d, reward, next_state)` per iteration.
    #[getter]
    fn iterations(&self) -> Vec<(usize, usize, f64, f64, i8, usize)> {
        self.inner
            .iterations
            .iter()
            .map(|r| (r.state, r.action, r.d1, r.delta_d, r.reward, r.next_state))
            .collect()
    }

    #[pyo3(signature = (sample=0))]
    fn to_json(&self, sample: usize) -> String {
        self.inner.to_json_line(sample)
    }

    fn __len__(&self) -> usize {
        self.inner.iterations.len()
    }
}

/// Episode driven by a Python callable mapping an action index to a distance.
#[pyfunction]
#[pyo3(signature = (base_distance, probe, seed=1, sample=0, m=30, delta=0.05))]
fn run_episode(
    base_distance: f64,
    probe: Bound<'_, PyAny>,
    seed: u64,
    sample: u64,
    m: usize,
    delta: f64,
) -> PyResult<PyEpisodeTrace> {
    let cfg = QConfig {
        rng_seed: seed,
        m,
        delta,
        ..QConfig::default()
    };
    let mut py_failure: Option<PyErr> = None;
    let mut call = |a: usize| -> rotq::Result<f64> {
        match probe.call1((a,)).and_then(|v| v.extract::<f64>()) {
            Ok(d) => Ok(d),
            Err(e) => {
                py_failure = Some(e);
                Err(rotq::Error::Validation("probe raised".into()))
            }
        }
    };
    let result = qlearn::run_episode(base_distance, &mut call, &cfg, sample);
    if let Some(e) = py_failure {
        return Err(e);
    }
    Ok(PyEpisodeTrace {
        inner: result.map_err(py_err)?,
    })
}

/// Nearest-neighbour search result.
#[pyclass(name = "Neighbour", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyNeighbour {
    label: u8,
    distance: f64,
    index: usize,
}

impl From<NnResult> for PyNeighbour {
    fn from(r: NnResult) -> Self {
        Self {
            label: r.label,
            distance: r.distance,
            index: r.index,
        }
    }
}

#[pymethods]
impl PyNeighbour {
    fn __repr__(&self) -> String {
        format!(
            "Neighbour(label={}, distance={}, index={})",
            self.label, self.distance, self.index
        )
    }
}

#[pyclass(name = "FeatureStore", frozen)]
struct PyFeatureStore {
    inner: FeatureStore,
}

#[pymethods]
impl PyFeatureStore {
    /// Build from flat row-major features; `norm` is `raw` or `l2`.
    #[new]
    #[pyo3(signature = (features, dim, labels, norm="raw"))]
    fn new(mut features: Vec<f64>, dim: usize, labels: Vec<u8>, norm: &str) -> PyResult<Self> {
        let mode = parse_norm(norm)?;
        if dim == 0 {
            return Err(PyValueError::new_err("dim must be positive"));
        }
        rotq::featstore::normalize_rows(&mut features, dim, mode).map_err(py_err)?;
        let inner = FeatureStore::new(features, dim, labels, mode).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FeatureStore::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    /// Query must already be normalized like the store.
    fn query(&self, query: Vec<f64>) -> PyResult<PyNeighbour> {
        Ok(self.inner.nn_query(&query).map_err(py_err)?.into())
    }

    fn query_batch(&self, queries: Vec<f64>) -> PyResult<Vec<PyNeighbour>> {
        Ok(self
            .inner
            .nn_query_batch(&queries)
            .map_err(py_err)?
            .into_iter()
            .map(Into::into)
            .collect())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn norm(&self) -> &'static str {
        self.inner.norm_mode().name()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: CnnModel,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized digit network.
    #[new]
    #[pyo3(signature = (seed=1))]
    fn new(seed: u64) -> Self {
        Self {
            inner: CnnModel::digit(seed),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: nn::load_model(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        nn::save_model(&self.inner, path).map_err(py_err)
    }

    /// `(class scores, emission)` for one image.
    fn forward(&self, pixels: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let [c, h, w] = self.inner.input_shape();
        let batch = Tensor::new(vec![1, c, h, w], pixels).map_err(py_err)?;
        let out = self.inner.forward(&batch).map_err(py_err)?;
        Ok((out.scores.into_data(), out.emission.into_data()))
    }

    fn predict(&self, pixels: Vec<f64>) -> PyResult<usize> {
        let [c, h, w] = self.inner.input_shape();
        let batch = Tensor::new(vec![1, c, h, w], pixels).map_err(py_err)?;
        Ok(self.inner.predict(&batch).map_err(py_err)?[0])
    }

    #[getter]
    fn emission_dim(&self) -> usize {
        self.inner.emission_dim()
    }
}

fn model_image(model: &CnnModel, pixels: Vec<f64>) -> PyResult<Tensor> {
    let [_, h, w] = model.input_shape();
    image_tensor(pixels, h, w)
}

/// Label of the nearest stored emission.
#[pyfunction]
fn classify_nn(model: &PyModel, store: &PyFeatureStore, pixels: Vec<f64>) -> PyResult<PyNeighbour> {
    let img = model_image(&model.inner, pixels)?;
    let (_, nn) = pipeline::classify_nn(&img, &model.inner, &store.inner).map_err(py_err)?;
    Ok(nn.into())
}

/// Rotation-augmented label, plus the episode that chose the angle.
#[pyfunction]
#[pyo3(signature = (model, store, pixels, seed=1, sample=0))]
fn classify_rl(
    model: &PyModel,
    store: &PyFeatureStore,
    pixels: Vec<f64>,
    seed: u64,
    sample: u64,
) -> PyResult<(u8, PyEpisodeTrace)> {
    let img = model_image(&model.inner, pixels)?;
    let (_, base) = pipeline::classify_nn(&img, &model.inner, &store.inner).map_err(py_err)?;
    let cfg = QConfig {
        rng_seed: seed,
        ..QConfig::default()
    };
    let (label, trace) =
        pipeline::classify_rl(&img, &base, &model.inner, &store.inner, &cfg, sample)
            .map_err(py_err)?;
    Ok((label, PyEpisodeTrace { inner: trace }))
}

/// `(count, height, width, flat pixels in [0, 1])` from an IDX image file.
#[pyfunction]
fn read_idx_images(path: &str) -> PyResult<(usize, usize, usize, Vec<f64>)> {
    let t = rotq::dataset::read_idx_images(path).map_err(py_err)?;
    let s = t.shape().to_vec();
    Ok((s[0], s[2], s[3], t.into_data()))
}

#[pyfunction]
fn read_idx_labels(path: &str) -> PyResult<Vec<u8>> {
    rotq::dataset::read_idx_labels(path).map_err(py_err)
}

#[pymodule]
fn pyrotq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(observe_state, m)?)?;
    m.add_function(wrap_pyfunction!(q_update, m)?)?;
    m.add_function(wrap_pyfunction!(select_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(classify_nn, m)?)?;
    m.add_function(wrap_pyfunction!(classify_rl, m)?)?;
    m.add_function(wrap_pyfunction!(read_idx_images, m)?)?;
    m.add_function(wrap_pyfunction!(read_idx_labels, m)?)?;
    m.add_class::<PyEpisodeTrace>()?;
    m.add_class::<PyNeighbour>()?;
    m.add_class::<PyFeatureStore>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
