//! Python bindings for `physeg`.
//!
//! Arrays cross the boundary as flat float64 buffers in the library's
//! x-fastest layout. Inputs accept anything exporting the buffer protocol
//! with format `d` (`array.array('d')`, contiguous float64 numpy arrays)
//! or a plain sequence of floats. Outputs are `array.array('d')` objects,
//! so `numpy.asarray(out).reshape(shape)` views them without copying when
//! `shape` is given in C order as `(..., nz, ny, nx)`.

use physeg::augmentation::{
    make_stratified_batch, normalize_physics_vector as norm_physics, sample_params as draw_params, ParamRange,
    PatchChoice,
};
use physeg::gold_standard::{pgs_segment, TissueGmmPrior};
use physeg::metrics;
use physeg::phantom::{phantom_prior, shell_phantom};
use physeg::rng::RngStream;
use physeg::simulator::{self, Normalize, SimOptions};
use physeg::uncertainty::{self, FeatureMapBatch, LogitField, SampleSource, SigmaField, VolumeSampleSet};
use physeg::volume::{save_volume, VolumeFile};
use physeg::{GridField, LabelMap, PatchSpec, TissueClass, VoxelGrid};
use pyo3::buffer::PyBuffer;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(physeg, PhysegError, PyValueError, "Validation or data error raised by physeg.");

fn to_py(e: physeg::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PhysegError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for physeg::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn read_f64(obj: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
    match PyBuffer::<f64>::get(obj) {
        Ok(buf) => buf.to_vec(obj.py()),
        Err(_) => obj.extract::<Vec<f64>>(),
    }
}

fn read_u8(obj: &Bound<'_, PyAny>) -> PyResult<Vec<u8>> {
    match PyBuffer::<u8>::get(obj) {
        Ok(buf) => buf.to_vec(obj.py()),
        Err(_) => obj.extract::<Vec<u8>>(),
    }
}

fn f64_array<'py>(py: Python<'py>, data: &[f64]) -> PyResult<Bound<'py, PyAny>> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_ne_bytes());
    }
    let arr = py.import("array")?.getattr("array")?.call1(("d",))?;
    arr.call_method1("frombytes", (PyBytes::new(py, &bytes),))?;
    Ok(arr)
}

fn c_shape(lead: Option<usize>, dims: [usize; 3]) -> Vec<usize> {
    lead.into_iter().chain([dims[2], dims[1], dims[0]]).collect()
}

fn grid(dims: [usize; 3]) -> VoxelGrid {
    VoxelGrid::isotropic(dims)
}

fn tissue(name: &str) -> PyResult<TissueClass> {
    TissueClass::parse(name).ok_or_else(|| PhysegError::new_err(format!("unknown tissue '{name}'")))
}

/// Acquisition parameters of one sequence.
#[pyclass(name = "SequenceParams", module = "physeg", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySequenceParams(simulator::SequenceParams);

#[pymethods]
impl PySequenceParams {
    #[staticmethod]
    #[pyo3(signature = (tr_ms, te_ms, fa_deg, gain = 1.0))]
    fn spgr(tr_ms: f64, te_ms: f64, fa_deg: f64, gain: f64) -> PyResult<Self> {
        let p = simulator::SequenceParams::spgr(tr_ms, te_ms, fa_deg).with_gain(gain);
        p.validate().py()?;
        Ok(Self(p))
    }

    #[staticmethod]
    #[pyo3(signature = (ti_ms, td_ms, tau_ms, gain = 1.0))]
    fn mprage(ti_ms: f64, td_ms: f64, tau_ms: f64, gain: f64) -> PyResult<Self> {
        let p = simulator::SequenceParams::mprage(ti_ms, td_ms, tau_ms).with_gain(gain);
        p.validate().py()?;
        Ok(Self(p))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let p: simulator::SequenceParams = serde_json::from_str(text).map_err(|e| PhysegError::new_err(e.to_string()))?;
        Ok(Self(p))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind().label()
    }

    #[getter]
    fn gain(&self) -> f64 {
        self.0.gain
    }

    fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn __repr__(&self) -> String {
        format!("SequenceParams({})", self.0.to_json())
    }
}

/// Quantitative maps of one subject.
#[pyclass(name = "MultiParametricMap", module = "physeg", frozen)]
struct PyMpm(physeg::MultiParametricMap);

#[pymethods]
impl PyMpm {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        physeg::MultiParametricMap::load(path).py().map(Self)
    }

    /// The built-in three-tissue shell phantom.
    #[staticmethod]
    #[pyo3(signature = (dims = (32, 32, 32), subject_id = "phantom"))]
    fn phantom(dims: (usize, usize, usize), subject_id: &str) -> PyResult<Self> {
        Ok(Self(shell_phantom([dims.0, dims.1, dims.2], subject_id).py()?.0))
    }

    /// Maps on a 1 mm grid from flat x-fastest buffers.
    #[staticmethod]
    #[pyo3(signature = (dims, t1, pd, t2s = None, mt = None, subject_id = "subject"))]
    fn from_arrays(
        dims: (usize, usize, usize),
        t1: &Bound<'_, PyAny>,
        pd: &Bound<'_, PyAny>,
        t2s: Option<&Bound<'_, PyAny>>,
        mt: Option<&Bound<'_, PyAny>>,
        subject_id: &str,
    ) -> PyResult<Self> {
        physeg::MultiParametricMap::new(
            grid([dims.0, dims.1, dims.2]),
            read_f64(t1)?,
            t2s.map(read_f64).transpose()?,
            read_f64(pd)?,
            mt.map(read_f64).transpose()?,
            subject_id,
        )
        .py()
        .map(Self)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.grid().dims();
        (d[0], d[1], d[2])
    }

    #[getter]
    fn subject_id(&self) -> &str {
        self.0.subject_id()
    }

    #[getter]
    fn invalid_count(&self) -> usize {
        self.0.invalid_count()
    }
}

/// Posterior tissue probabilities with background, CSF, GM, WM channels.
#[pyclass(name = "SoftSegmentation", module = "physeg", frozen)]
struct PySoft(physeg::SoftSegmentation);

#[pymethods]
impl PySoft {
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.grid().dims();
        (d[0], d[1], d[2])
    }

    /// `(probs, shape)` with shape `(4, nz, ny, nx)`.
    fn probs<'py>(&self, py: Python<'py>) -> PyResult<(Bound<'py, PyAny>, Vec<usize>)> {
        Ok((f64_array(py, self.0.probs())?, c_shape(Some(4), self.0.grid().dims())))
    }

    /// Argmax labels (ties to the lowest class) as bytes.
    fn labels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.to_labels().labels())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_volume(&self.0, path, None).py()
    }
}

/// Gold-standard segmentation. Without `prior_path` the phantom prior is used.
#[pyfunction]
#[pyo3(signature = (mpm, prior_path = None))]
fn gold_standard(py: Python<'_>, mpm: &PyMpm, prior_path: Option<&str>) -> PyResult<PySoft> {
    let prior = match prior_path {
        Some(p) => TissueGmmPrior::from_config_file(p).py()?,
        None => phantom_prior(),
    };
    py.detach(|| pgs_segment(&mpm.0, &prior)).py().map(PySoft)
}

#[pyfunction]
#[pyo3(signature = (t1, t2s, pd, tr_ms, te_ms, fa_deg, gain = 1.0))]
fn spgr_signal(t1: f64, t2s: f64, pd: f64, tr_ms: f64, te_ms: f64, fa_deg: f64, gain: f64) -> f64 {
    simulator::spgr_signal(t1, t2s, pd, &simulator::Spgr { tr_ms, te_ms, fa_deg }, gain)
}

#[pyfunction]
#[pyo3(signature = (t1, pd, ti_ms, td_ms, tau_ms, gain = 1.0))]
fn mprage_signal(t1: f64, pd: f64, ti_ms: f64, td_ms: f64, tau_ms: f64, gain: f64) -> f64 {
    simulator::mprage_signal(t1, pd, &simulator::Mprage { ti_ms, td_ms, tau_ms }, gain)
}

#[pyfunction]
fn ernst_angle(t1: f64, tr: f64) -> f64 {
    simulator::ernst_angle(t1, tr)
}

fn sim_options(magnitude: bool, normalize: Option<&str>) -> PyResult<SimOptions> {
    let normalize = match normalize {
        None | Some("none") => Normalize::None,
        Some("max") => Normalize::MaxToOne,
        Some(p) if p.starts_with('p') => Normalize::Percentile(
            p[1..].parse().map_err(|_| PhysegError::new_err(format!("bad normalization '{p}'")))?,
        ),
        Some(other) => return Err(PhysegError::new_err(format!("bad normalization '{other}'"))),
    };
    Ok(SimOptions { magnitude, normalize, ..SimOptions::default() })
}

/// Simulates a full volume. Returns `(intensity, shape)`.
#[pyfunction]
#[pyo3(signature = (mpm, params, magnitude = true, normalize = None, out_path = None))]
fn simulate<'py>(
    py: Python<'py>,
    mpm: &PyMpm,
    params: &PySequenceParams,
    magnitude: bool,
    normalize: Option<&str>,
    out_path: Option<&str>,
) -> PyResult<(Bound<'py, PyAny>, Vec<usize>)> {
    let opts = sim_options(magnitude, normalize)?;
    let vol = py.detach(|| simulator::simulate_volume(&mpm.0, &params.0, &opts)).py()?;
    if let Some(p) = out_path {
        save_volume(&vol, p, None).py()?;
    }
    Ok((f64_array(py, &vol.intensity)?, c_shape(None, vol.grid.dims())))
}

/// Draws `n` parameter sets from a preset range.
#[pyfunction]
#[pyo3(signature = (preset, n, seed = 0, stream = 0))]
fn sample_params(preset: &str, n: usize, seed: u64, stream: u64) -> PyResult<Vec<PySequenceParams>> {
    let range = ParamRange::preset(preset).py()?;
    let mut c = RngStream::new(seed, stream).cursor();
    Ok((0..n).map(|_| PySequenceParams(draw_params(&range, &mut c))).collect())
}

#[pyfunction]
fn normalize_physics_vector(params: &PySequenceParams, preset: &str) -> PyResult<Vec<f64>> {
    norm_physics(&params.0, &ParamRange::preset(preset).py()?).py()
}

/// Loads a subject once and serves stratified batches from it.
#[pyclass(name = "AugmentationSession", module = "physeg", frozen)]
struct Session {
    mpm: physeg::MultiParametricMap,
    pgs: physeg::SoftSegmentation,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (mpm, pgs = None, prior_path = None))]
    fn new(py: Python<'_>, mpm: &PyMpm, pgs: Option<&PySoft>, prior_path: Option<&str>) -> PyResult<Self> {
        let pgs = match pgs {
            Some(p) => p.0.clone(),
            None => gold_standard(py, mpm, prior_path)?.0,
        };
        Ok(Self { mpm: mpm.0.clone(), pgs })
    }

    /// One batch. `origin=None` draws the patch origin uniformly.
    ///
    /// Returns a dict with `intensity` (shape `(n, pz, py, px)`), `physics`
    /// (`(n, k)`), `target` (`(4, pz, py, px)`), `params` (JSON strings)
    /// and `origin`.
    #[pyo3(signature = (preset, n, size, origin = None, seed = 0, stream = 0, normalize = None))]
    #[allow(clippy::too_many_arguments)]
    fn batch<'py>(
        &self,
        py: Python<'py>,
        preset: &str,
        n: usize,
        size: (usize, usize, usize),
        origin: Option<(usize, usize, usize)>,
        seed: u64,
        stream: u64,
        normalize: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let range = ParamRange::preset(preset).py()?;
        let size = [size.0, size.1, size.2];
        let patch = match origin {
            Some(o) => PatchChoice::Fixed(PatchSpec::new([o.0, o.1, o.2], size)),
            None => PatchChoice::Random { size },
        };
        let opts = sim_options(true, normalize)?;
        let b = py
            .detach(|| make_stratified_batch(&self.mpm, &self.pgs, &range, n, patch, RngStream::new(seed, stream), &opts))
            .py()?;
        let intensity: Vec<f64> = b.items.iter().flat_map(|it| it.intensity.iter().copied()).collect();
        let physics: Vec<f64> = b.items.iter().flat_map(|it| it.physics.iter().copied()).collect();
        let k = b.items[0].physics.len();
        let out = PyDict::new(py);
        out.set_item("intensity", f64_array(py, &intensity)?)?;
        out.set_item("intensity_shape", c_shape(Some(n), size))?;
        out.set_item("physics", f64_array(py, &physics)?)?;
        out.set_item("physics_shape", (n, k))?;
        out.set_item("target", f64_array(py, b.target.probs())?)?;
        out.set_item("target_shape", c_shape(Some(4), size))?;
        out.set_item("params", b.items.iter().map(|it| it.params.to_json()).collect::<Vec<_>>())?;
        out.set_item("origin", (b.patch.origin[0], b.patch.origin[1], b.patch.origin[2]))?;
        Ok(out)
    }
}

fn class_fields(
    dims: (usize, usize, usize),
    classes: usize,
    logits: &Bound<'_, PyAny>,
    sigma: &Bound<'_, PyAny>,
) -> PyResult<(LogitField, SigmaField)> {
    let g = grid([dims.0, dims.1, dims.2]);
    Ok((
        LogitField::new(g.clone(), classes, read_f64(logits)?).py()?,
        SigmaField::new(g, classes, read_f64(sigma)?).py()?,
    ))
}

/// Noisy-logit cross-entropy. `logits` and `sigma` are class-major
/// (`[c * n_voxels + i]`). Returns `(total, per_voxel)`.
#[pyfunction]
#[pyo3(signature = (logits, sigma, target, dims, classes, t_passes, seed = 0, stream = 0))]
#[allow(clippy::too_many_arguments)]
fn attenuated_ce_loss<'py>(
    py: Python<'py>,
    logits: &Bound<'py, PyAny>,
    sigma: &Bound<'py, PyAny>,
    target: &Bound<'py, PyAny>,
    dims: (usize, usize, usize),
    classes: usize,
    t_passes: usize,
    seed: u64,
    stream: u64,
) -> PyResult<(f64, Bound<'py, PyAny>)> {
    let (l, s) = class_fields(dims, classes, logits, sigma)?;
    let target = LabelMap::new(l.grid().clone(), read_u8(target)?).py()?;
    let loss = py
        .detach(|| uncertainty::attenuated_ce_loss(&l, &s, &target, t_passes, &RngStream::new(seed, stream)))
        .py()?;
    Ok((loss.total, f64_array(py, &loss.per_voxel)?))
}

/// Gradient of the total loss with respect to every logit, class-major.
#[pyfunction]
#[pyo3(signature = (logits, sigma, target, dims, classes, t_passes, seed = 0, stream = 0))]
#[allow(clippy::too_many_arguments)]
fn attenuated_ce_logit_grad<'py>(
    py: Python<'py>,
    logits: &Bound<'py, PyAny>,
    sigma: &Bound<'py, PyAny>,
    target: &Bound<'py, PyAny>,
    dims: (usize, usize, usize),
    classes: usize,
    t_passes: usize,
    seed: u64,
    stream: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let (l, s) = class_fields(dims, classes, logits, sigma)?;
    let target = LabelMap::new(l.grid().clone(), read_u8(target)?).py()?;
    let g = py
        .detach(|| uncertainty::attenuated_ce_logit_grad(&l, &s, &target, t_passes, &RngStream::new(seed, stream)))
        .py()?;
    f64_array(py, &g)
}

/// Label maps drawn by perturbing logits; each sample is returned as bytes.
#[pyfunction]
#[pyo3(signature = (logits, sigma, dims, classes, samples, seed = 0, stream = 0))]
#[allow(clippy::too_many_arguments)]
fn aleatoric_segmentation_samples<'py>(
    py: Python<'py>,
    logits: &Bound<'py, PyAny>,
    sigma: &Bound<'py, PyAny>,
    dims: (usize, usize, usize),
    classes: usize,
    samples: usize,
    seed: u64,
    stream: u64,
) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let (l, s) = class_fields(dims, classes, logits, sigma)?;
    let maps = py
        .detach(|| uncertainty::aleatoric_segmentation_samples(&l, &s, samples, &RngStream::new(seed, stream)))
        .py()?;
    Ok(maps.iter().map(|m| PyBytes::new(py, m.labels())).collect())
}

/// Mean per-element batch variance over equally sized feature maps.
#[pyfunction]
fn stratification_feature_loss(items: Vec<Bound<'_, PyAny>>) -> PyResult<f64> {
    let items = items.iter().map(read_f64).collect::<PyResult<Vec<_>>>()?;
    let len = items.first().map_or(0, Vec::len);
    uncertainty::stratification_feature_loss(&FeatureMapBatch::new(vec![len], items).py()?).py()
}

/// Hazen-percentile bounds of one set of volumes: `(lo, median, hi, iqr)`.
#[pyfunction]
#[pyo3(signature = (volumes_ml, lo_pct = 25.0, hi_pct = 75.0))]
fn calibrated_volume_bounds(volumes_ml: Vec<f64>, lo_pct: f64, hi_pct: f64) -> PyResult<(f64, f64, f64, f64)> {
    let ids = (0..volumes_ml.len()).map(|i| i.to_string()).collect();
    let set = VolumeSampleSet::new(vec![TissueClass::Gm], vec![volumes_ml], SampleSource::Aleatoric, ids).py()?;
    let b = uncertainty::calibrated_volume_bounds(&set, lo_pct, hi_pct).py()?[0].1;
    Ok((b.lo, b.median, b.hi, b.iqr))
}

/// Dice overlap of one tissue between two label buffers on the same grid.
#[pyfunction]
fn dice(a: &Bound<'_, PyAny>, b: &Bound<'_, PyAny>, dims: (usize, usize, usize), tissue_name: &str) -> PyResult<f64> {
    let g = grid([dims.0, dims.1, dims.2]);
    let a = LabelMap::new(g.clone(), read_u8(a)?).py()?;
    let b = LabelMap::new(g, read_u8(b)?).py()?;
    Ok(metrics::dice(&a, &b, tissue(tissue_name)?).py()?.score)
}

/// Coefficient of variation (sample sd over mean).
#[pyfunction]
fn cov(volumes_ml: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::cov(&volumes_ml).py()?.cov)
}

/// Paired signed-rank test: dict with statistic, w_plus, w_minus, p_value,
/// n_effective and method.
#[pyfunction]
fn wilcoxon_signed_rank<'py>(py: Python<'py>, x: Vec<f64>, y: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::wilcoxon_signed_rank(&x, &y).py()?;
    let d = PyDict::new(py);
    d.set_item("statistic", r.statistic)?;
    d.set_item("w_plus", r.w_plus)?;
    d.set_item("w_minus", r.w_minus)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item("n_effective", r.n_effective)?;
    d.set_item("method", format!("{:?}", r.method))?;
    Ok(d)
}

/// Reads a labelmap or 4D soft segmentation file as label bytes and dims.
#[pyfunction]
fn load_labels<'py>(py: Python<'py>, path: &str) -> PyResult<(Bound<'py, PyBytes>, (usize, usize, usize))> {
    let m = LabelMap::load(path).or_else(|_| physeg::SoftSegmentation::load(path).map(|s| s.to_labels())).py()?;
    let d = m.grid().dims();
    Ok((PyBytes::new(py, m.labels()), (d[0], d[1], d[2])))
}

#[pymodule]
#[pyo3(name = "physeg")]
pub fn physeg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PhysegError", m.py().get_type::<PhysegError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySequenceParams>()?;
    m.add_class::<PyMpm>()?;
    m.add_class::<PySoft>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(gold_standard, m)?)?;
    m.add_function(wrap_pyfunction!(spgr_signal, m)?)?;
    m.add_function(wrap_pyfunction!(mprage_signal, m)?)?;
    m.add_function(wrap_pyfunction!(ernst_angle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_params, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_physics_vector, m)?)?;
    m.add_function(wrap_pyfunction!(attenuated_ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(attenuated_ce_logit_grad, m)?)?;
    m.add_function(wrap_pyfunction!(aleatoric_segmentation_samples, m)?)?;
    m.add_function(wrap_pyfunction!(stratification_feature_loss, m)?)?;
    m.add_function(wrap_pyfunction!(calibrated_volume_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(cov, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed_rank, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    Ok(())
}
