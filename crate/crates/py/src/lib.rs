//! Python bindings: volumes and phantoms, the segmentation and depth models,
//! depth attention, prompt sampling, losses and overlap metrics.
//!
//! Arrays cross the boundary as NumPy arrays; prompts and configs as JSON
//! strings in the same format the CLI and service accept.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIndexError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segbone::checkpoint::ModelBundle;
use segbone::depth3d::{self, AttentionConfig};
use segbone::evaluation;
use segbone::inference::predict_volume;
use segbone::prompting::{self, Prompt, PromptConfig};
use segbone::sam2d::{ForwardOptions, ModelConfig, SegModel};
use segbone::volume::{self, PhantomConfig};

fn py_err(e: segbone::Error) -> PyErr {
    use segbone::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::OutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn candle_err(e: candle_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// A 3D intensity volume with voxel spacing in millimetres (depth, height, width).
#[pyclass(name = "Volume", module = "segbone")]
#[derive(Clone)]
pub struct PyVolume {
    pub inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, spacing=(1.0, 1.0, 1.0)))]
    fn new(data: PyReadonlyArray3<f32>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let v = volume::Volume::new(data.as_array().to_owned(), [spacing.0, spacing.1, spacing.2]).map_err(py_err)?;
        Ok(PyVolume { inner: v })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVolume { inner: volume::load_volume(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        volume::save_volume(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.shape();
        (d, h, w)
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let s = self.inner.spacing;
        (s[0], s[1], s[2])
    }

    #[getter]
    fn sequence_tag(&self) -> String {
        self.inner.sequence_tag.clone()
    }

    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.data.clone().into_pyarray(py)
    }

    fn slice<'py>(&self, py: Python<'py>, k: usize) -> PyResult<Bound<'py, PyArray2<f32>>> {
        Ok(volume::extract_slice(&self.inner, k).map_err(py_err)?.into_pyarray(py))
    }

    fn __repr__(&self) -> String {
        let [d, h, w] = self.inner.shape();
        format!("Volume(shape=({d}, {h}, {w}), spacing={:?})", self.inner.spacing)
    }
}

/// Generates one phantom; returns `(volume, mask, twin)` where the twin has
/// inverted contrast. `config` is phantom config JSON.
#[pyfunction]
#[pyo3(signature = (seed, shape=None, spacing=None, config=None))]
fn generate_phantom<'py>(
    py: Python<'py>,
    seed: u64,
    shape: Option<(usize, usize, usize)>,
    spacing: Option<(f64, f64, f64)>,
    config: Option<&str>,
) -> PyResult<(PyVolume, Bound<'py, PyArray3<u8>>, PyVolume)> {
    let mut cfg: PhantomConfig = parse_json(config)?;
    if let Some((d, h, w)) = shape {
        cfg.shape = [d, h, w];
    }
    if let Some((a, b, c)) = spacing {
        cfg.spacing_mm = [a, b, c];
    }
    let out = volume::generate_phantom(seed, &cfg).map_err(py_err)?;
    Ok((
        PyVolume { inner: out.volume },
        out.mask.data.into_pyarray(py),
        PyVolume { inner: out.twin },
    ))
}

/// The promptable 2D segmentation model with its fusion gate.
#[pyclass(name = "SegModel", module = "segbone")]
pub struct PySegModel {
    model: SegModel,
    bundle: ModelBundle,
}

#[pymethods]
impl PySegModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bundle = ModelBundle::load(path).map_err(py_err)?;
        let model = SegModel::from_bundle(&bundle, &Device::Cpu).map_err(py_err)?;
        Ok(PySegModel { model, bundle })
    }

    /// A randomly initialised model; `config` is model config JSON.
    #[staticmethod]
    #[pyo3(signature = (seed=0, config=None))]
    fn random(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_json(config)?;
        let model = SegModel::new(&cfg, seed, DType::F32, &Device::Cpu).map_err(py_err)?;
        let bundle = model.to_bundle("init", seed).map_err(py_err)?;
        Ok(PySegModel { model, bundle })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.bundle.save(path).map_err(py_err)
    }

    #[getter]
    fn stage(&self) -> String {
        self.bundle.stage.clone()
    }

    #[getter]
    fn gate(&self) -> PyResult<f64> {
        self.model.gate().map_err(py_err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.model.input_size()
    }

    /// Segments every slice. `prompts` is prompt JSON in slice pixels applied
    /// to each slice; `attention` is a `(D, H', W')` stack of depth-attention
    /// maps, and without it the fusion gate is bypassed.
    #[pyo3(signature = (volume, prompts=None, attention=None, batch_size=8))]
    fn segment<'py>(
        &self,
        py: Python<'py>,
        volume: &PyVolume,
        prompts: Option<&str>,
        attention: Option<PyReadonlyArray3<f32>>,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyArray3<u8>>> {
        let [d, h, w] = volume.inner.shape();
        let prompt: Option<Prompt> = match prompts {
            Some(t) => {
                let p: Prompt = serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?;
                p.validate(h, w).map_err(py_err)?;
                Some(p)
            }
            None => None,
        };
        let maps = attention.map(|a| a.as_array().to_owned());
        let opts = if maps.is_some() {
            ForwardOptions::default()
        } else {
            ForwardOptions { gate_override: Some(1.0), ..Default::default() }
        };
        let all = vec![prompt; d];
        let v = &volume.inner;
        let mask = py
            .allow_threads(|| predict_volume(&self.model, v, &all, maps.as_ref(), opts, batch_size))
            .map_err(py_err)?;
        Ok(mask.into_pyarray(py))
    }
}

/// The low-resolution 3D V-net that produces depth attention.
#[pyclass(name = "DepthModel", module = "segbone")]
pub struct PyDepthModel {
    model: depth3d::DepthModel,
}

#[pymethods]
impl PyDepthModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bundle = ModelBundle::load(path).map_err(py_err)?;
        Ok(PyDepthModel { model: depth3d::DepthModel::from_bundle(&bundle, &Device::Cpu).map_err(py_err)? })
    }

    /// Returns `(probability, attention)`: the low-resolution probability
    /// cube and one attention map per slice of `volume`.
    #[pyo3(signature = (volume, config=None))]
    fn attention<'py>(
        &self,
        py: Python<'py>,
        volume: &PyVolume,
        config: Option<&str>,
    ) -> PyResult<(Bound<'py, PyArray3<f64>>, Bound<'py, PyArray3<f32>>)> {
        let cfg: AttentionConfig = parse_json(config)?;
        let v = &volume.inner;
        let (p, maps) = py
            .allow_threads(|| depth3d::volume_attention(&self.model, v, &cfg))
            .map_err(py_err)?;
        Ok((p.into_pyarray(py), maps.into_pyarray(py)))
    }
}

/// Depth attention for slice `k` of a `depth`-slice volume from a
/// low-resolution probability cube.
#[pyfunction]
#[pyo3(signature = (probability, k, depth, config=None))]
fn depth_attention<'py>(
    py: Python<'py>,
    probability: PyReadonlyArray3<f64>,
    k: usize,
    depth: usize,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let cfg: AttentionConfig = parse_json(config)?;
    let m = depth3d::compute_depth_attention(probability.as_array(), k, depth, &cfg).map_err(py_err)?;
    Ok(m.into_pyarray(py))
}

/// Samples a training prompt set from a binary slice mask. Returns
/// `(prompt_json, selected_mask, k)`.
#[pyfunction]
#[pyo3(signature = (mask, seed=0, config=None))]
fn sample_prompts<'py>(
    py: Python<'py>,
    mask: PyReadonlyArray2<u8>,
    seed: u64,
    config: Option<&str>,
) -> PyResult<(String, Bound<'py, PyArray2<u8>>, usize)> {
    let cfg: PromptConfig = parse_json(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = prompting::sample_prompts(mask.as_array(), &mut rng, &cfg).map_err(py_err)?;
    let json = serde_json::to_string(&ps.prompt).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((json, ps.selected.into_pyarray(py), ps.k))
}

/// Connected components (8-connectivity) as a list of binary masks.
#[pyfunction]
fn find_components<'py>(py: Python<'py>, mask: PyReadonlyArray2<u8>) -> Vec<Bound<'py, PyArray2<u8>>> {
    prompting::find_components(mask.as_array())
        .into_iter()
        .map(|m: Array2<u8>| m.into_pyarray(py))
        .collect()
}

fn to_tensor(a: &ndarray::ArrayViewD<f64>) -> PyResult<Tensor> {
    let v: Vec<f64> = a.iter().copied().collect();
    Tensor::from_vec(v, a.shape(), &Device::Cpu).map_err(candle_err)
}

fn scalar(t: &Tensor) -> PyResult<f64> {
    t.to_scalar::<f64>().map_err(candle_err)
}

/// Tversky loss of probabilities `p` against a binary target.
#[pyfunction]
#[pyo3(signature = (p, g, alpha=depth3d::TVERSKY_ALPHA, beta=depth3d::TVERSKY_BETA))]
fn tversky_loss(p: numpy::PyReadonlyArrayDyn<f64>, g: numpy::PyReadonlyArrayDyn<f64>, alpha: f64, beta: f64) -> PyResult<f64> {
    let t = depth3d::tversky_loss(&to_tensor(&p.as_array())?, &to_tensor(&g.as_array())?, alpha, beta).map_err(py_err)?;
    scalar(&t)
}

/// The 3D objective: binary cross-entropy plus Tversky.
#[pyfunction]
fn loss_3d(p: numpy::PyReadonlyArrayDyn<f64>, g: numpy::PyReadonlyArrayDyn<f64>) -> PyResult<f64> {
    let l = depth3d::loss_3d(&to_tensor(&p.as_array())?, &to_tensor(&g.as_array())?).map_err(py_err)?;
    scalar(&l.total)
}

/// The 2D objective on `(B, 2, H, W)` logits and a `(B, H, W)` target.
#[pyfunction]
fn loss_2d(logits: numpy::PyReadonlyArrayDyn<f64>, target: numpy::PyReadonlyArrayDyn<f64>) -> PyResult<f64> {
    let l = segbone::training::loss_2d(&to_tensor(&logits.as_array())?, &to_tensor(&target.as_array())?).map_err(py_err)?;
    scalar(&l.total)
}

/// Dice similarity of two binary volumes.
#[pyfunction]
fn dsc(pred: PyReadonlyArray3<u8>, gt: PyReadonlyArray3<u8>) -> PyResult<f64> {
    evaluation::dsc(pred.as_array(), gt.as_array()).map_err(py_err)
}

/// Intersection over union of two binary volumes.
#[pyfunction]
fn iou(pred: PyReadonlyArray3<u8>, gt: PyReadonlyArray3<u8>) -> PyResult<f64> {
    evaluation::iou(pred.as_array(), gt.as_array()).map_err(py_err)
}

/// Config JSON of the small model used in tests and smoke runs.
#[pyfunction]
fn tiny_model_config(input_size: usize) -> PyResult<String> {
    serde_json::to_string(&ModelConfig::tiny(input_size)).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Resamples a volume (and optional mask) to the V-net's cubic input.
#[pyfunction]
#[pyo3(signature = (volume, size=volume::LOWRES_SIZE))]
fn lowres<'py>(py: Python<'py>, volume: &PyVolume, size: usize) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let (low, _) = depth3d::prepare_lowres(&volume.inner, None, size).map_err(py_err)?;
    let data: Array3<f32> = low.data;
    Ok(data.into_pyarray(py))
}

#[pymodule(name = "segbone")]
fn segbone_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PySegModel>()?;
    m.add_class::<PyDepthModel>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(depth_attention, m)?)?;
    m.add_function(wrap_pyfunction!(sample_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(find_components, m)?)?;
    m.add_function(wrap_pyfunction!(tversky_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_3d, m)?)?;
    m.add_function(wrap_pyfunction!(loss_2d, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(lowres, m)?)?;
    m.add_function(wrap_pyfunction!(tiny_model_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use numpy::PyArrayMethods;

    #[test]
    fn bindings_round_trip_through_numpy() {
        pyo3::prepare_freethreaded_python();
        Python::with_gil(|py| {
            let (vol, mask, twin) = generate_phantom(py, 3, Some((4, 24, 24)), Some((2.0, 1.0, 1.0)), None).unwrap();
            assert_eq!(vol.shape(), (4, 24, 24));
            assert_eq!(twin.sequence_tag(), "t2-sim");
            let m = mask.readonly();
            assert_eq!(dsc(m.clone(), m.clone()).unwrap(), 1.0);
            let model = PySegModel::random(1, Some(&tiny_model_config(32).unwrap())).unwrap();
            let pred = model.segment(py, &vol, Some(r#"{"box":[2,2,10,10]}"#), None, 2).unwrap();
            assert_eq!(pred.readonly().as_array().dim(), (4, 24, 24));
            assert!(model.segment(py, &vol, Some(r#"{"box":[2,2,99,10]}"#), None, 2).is_err());
            assert!(parse_json::<AttentionConfig>(Some("{")).is_err());
        });
    }
}
