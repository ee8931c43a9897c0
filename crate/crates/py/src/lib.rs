// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings for `proxsae`.
//!
//! Vectors cross the boundary as lists of floats and matrices as lists of
//! rows. Library errors become `ValueError` (bad arguments), `OSError`
//! (filesystem) or `proxsae.ProxsaeError` (everything else).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use proxsae::metrics;
use proxsae::steering::ConceptSource;
use proxsae::synth::{CoeffDist, SignMode};
use proxsae::trainer::TrainConfig;
use proxsae::{
    ActivationStore, Checkpoint, CoderConfig, ConceptVector, Error, GroundTruth, Matrix, ProxSpec,
    SaeVariant, StoreMeta, SynthSpec, Vector,
};

create_exception!(proxsae, ProxsaeError, PyException);

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::DimensionMismatch { .. }
        | Error::Contract(_)
        | Error::Config(_)
        | Error::Capacity { .. } => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Locked(_) => PyOSError::new_err(e.to_string()),
        other => ProxsaeError::new_err(other.to_string()),
    }
}

fn vector(v: Vec<f64>) -> PyResult<Vector> {
    Vector::new(v).map_err(py_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse_variant(
    variant: &str,
    k: Option<usize>,
    lam: Option<f64>,
    theta: Option<f64>,
) -> PyResult<SaeVariant> {
    let need = |o: Option<f64>, what: &str| {
        o.ok_or_else(|| PyValueError::new_err(format!("variant {variant} needs {what}")))
    };
    let spec = match variant {
        "relu" => ProxSpec::ReluSoft {
            lambda: need(lam, "lam")?,
        },
        "jumprelu" => match (theta, lam) {
            (Some(t), _) => ProxSpec::JumpRelu { theta: t },
            (None, Some(l)) => ProxSpec::jump_relu_from_lambda(l).map_err(py_err)?,
            (None, None) => {
                return Err(PyValueError::new_err("variant jumprelu needs theta or lam"))
            }
        },
        "topk" => ProxSpec::TopK {
            k: k.ok_or_else(|| PyValueError::new_err("variant topk needs k"))?,
        },
        "abstopk" => ProxSpec::AbsTopK {
            k: k.ok_or_else(|| PyValueError::new_err("variant abstopk needs k"))?,
        },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown variant {other:?}; expected relu, jumprelu, topk or abstopk"
            )))
        }
    };
    Ok(SaeVariant::new(spec))
}

#[pyfunction]
fn prox_relu(u: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    Ok(proxsae::prox_relu_soft(&vector(u)?, lam)
        .map_err(py_err)?
        .into_vec())
}

#[pyfunction]
fn prox_jumprelu(u: Vec<f64>, theta: f64) -> PyResult<Vec<f64>> {
    Ok(proxsae::prox_jump_relu(&vector(u)?, theta)
        .map_err(py_err)?
        .into_vec())
}

#[pyfunction]
fn prox_topk(u: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    Ok(proxsae::prox_topk(&vector(u)?, k)
        .map_err(py_err)?
        .into_vec())
}

#[pyfunction]
fn prox_abstopk(u: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    Ok(proxsae::prox_abs_topk(&vector(u)?, k)
        .map_err(py_err)?
        .into_vec())
}

/// Activation matrix with provenance metadata, stored as f32.
#[pyclass(name = "ActivationStore", module = "proxsae", frozen)]
struct PyStore {
    inner: ActivationStore,
}

#[pymethods]
impl PyStore {
    #[staticmethod]
    #[pyo3(signature = (rows, model = "unknown".to_string(), layer = None, source = String::new()))]
    fn from_rows(
        rows: Vec<Vec<f64>>,
        model: String,
        layer: Option<i64>,
        source: String,
    ) -> PyResult<Self> {
        let meta = StoreMeta {
            model,
            layer,
            source,
            ..StoreMeta::synthetic("")
        };
        let inner = ActivationStore::from_matrix(&matrix(rows)?, meta).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ActivationStore::read(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Metadata as a JSON string.
    #[getter]
    fn metadata(&self) -> String {
        serde_json::to_string(&self.inner.meta).expect("metadata serializes")
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.row_vec(i).into_vec())
    }

    fn to_rows(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows_of(&self.inner.to_matrix().map_err(py_err)?))
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "ActivationStore(n_rows={}, dim={})",
            self.inner.n_rows(),
            self.inner.dim()
        )
    }
}

/// Planted dictionary and codes of a synthetic dataset.
#[pyclass(name = "GroundTruth", module = "proxsae", frozen)]
struct PyTruth {
    inner: GroundTruth,
}

#[pymethods]
impl PyTruth {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GroundTruth::read(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    #[getter]
    fn p_true(&self) -> usize {
        self.inner.spec.p_true
    }

    fn atom(&self, p: usize) -> PyResult<Vec<f64>> {
        if p >= self.inner.spec.p_true {
            return Err(PyValueError::new_err(format!("atom {p} out of range")));
        }
        Ok(self.inner.atom(p).into_vec())
    }

    /// Returns `(positive_rows, negative_rows)`.
    #[pyo3(signature = (concept, n, magnitude = 1.0, seed = 0))]
    fn contrast_pairs(
        &self,
        concept: usize,
        n: usize,
        magnitude: f64,
        seed: u64,
    ) -> PyResult<(Rows, Rows)> {
        let pairs = proxsae::make_contrast_pairs(&self.inner, concept, n, magnitude, seed)
            .map_err(py_err)?;
        let rows = |s: Vec<Vector>| s.into_iter().map(Vector::into_vec).collect();
        Ok((rows(pairs.positive), rows(pairs.negative)))
    }
}

/// Synthetic activations with a planted sparse dictionary.
#[pyfunction]
#[pyo3(signature = (d = 64, p_true = 32, k_true = 4, n_samples = 65536, seed = 0, noise_sigma = 0.01, nonneg = false, coherence_bound = 0.3, coeff_low = 0.5, coeff_high = 1.5))]
#[allow(clippy::too_many_arguments)]
fn generate(
    py: Python<'_>,
    d: usize,
    p_true: usize,
    k_true: usize,
    n_samples: usize,
    seed: u64,
    noise_sigma: f64,
    nonneg: bool,
    coherence_bound: f64,
    coeff_low: f64,
    coeff_high: f64,
) -> PyResult<(PyStore, PyTruth)> {
    let spec = SynthSpec {
        d,
        p_true,
        k_true,
        n_samples,
        seed,
        noise_sigma,
        sign_mode: if nonneg {
            SignMode::Nonneg
        } else {
            SignMode::Bipolar
        },
        coherence_bound,
        coeff_dist: CoeffDist::Uniform {
            low: coeff_low,
            high: coeff_high,
        },
        ..SynthSpec::default()
    };
    let (store, truth) = py.detach(|| proxsae::generate(&spec)).map_err(py_err)?;
    Ok((PyStore { inner: store }, PyTruth { inner: truth }))
}

/// A trained sparse autoencoder.
#[pyclass(name = "Sae", module = "proxsae", frozen)]
struct PySae {
    inner: Checkpoint,
}

impl PySae {
    fn variant(&self) -> &SaeVariant {
        &self.inner.variant
    }
}

#[pymethods]
impl PySae {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::read(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.params.d()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.params.p()
    }

    #[getter]
    fn variant_name(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// Decoder atoms as rows (`p` lists of length `d`).
    fn atoms(&self) -> Vec<Vec<f64>> {
        let dict = &self.inner.params.dict;
        (0..dict.cols())
            .map(|c| dict.column(c).into_vec())
            .collect()
    }

    fn encode(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(
            proxsae::encode(&vector(x)?, &self.inner.params, self.variant())
                .map_err(py_err)?
                .into_vec(),
        )
    }

    fn decode(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(proxsae::decode(&vector(z)?, &self.inner.params)
            .map_err(py_err)?
            .into_vec())
    }

    fn reconstruct(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(
            proxsae::reconstruct(&vector(x)?, &self.inner.params, self.variant())
                .map_err(py_err)?
                .into_vec(),
        )
    }

    /// Reconstruction with latent `latent` set to `value` (or shifted by it when `additive`).
    #[pyo3(signature = (x, latent, value, additive = false))]
    fn clamp(&self, x: Vec<f64>, latent: usize, value: f64, additive: bool) -> PyResult<Vec<f64>> {
        let out = proxsae::latent_clamp(
            &vector(x)?,
            &self.inner.params,
            self.variant(),
            latent,
            value,
            additive,
        )
        .map_err(py_err)?;
        Ok(out.into_vec())
    }

    /// Iterative proximal-gradient code against this decoder.
    #[pyo3(signature = (x, lam = 0.0, max_iters = 500, tol = 1e-8))]
    fn sparse_code(
        &self,
        x: Vec<f64>,
        lam: f64,
        max_iters: usize,
        tol: f64,
    ) -> PyResult<(Vec<f64>, usize, f64)> {
        let params = &self.inner.params;
        let mut cfg = CoderConfig::for_dictionary(&params.dict, self.variant().spec, lam);
        cfg.max_iters = max_iters;
        cfg.tol = tol;
        let code =
            proxsae::sparse_code(&vector(x)?, &params.dict, &params.b_dec, &cfg).map_err(py_err)?;
        Ok((code.code.into_vec(), code.iterations, code.objective))
    }

    /// nMSE over every row of `store`.
    fn nmse(&self, py: Python<'_>, store: &PyStore) -> PyResult<f64> {
        let x = store.inner.to_matrix().map_err(py_err)?;
        py.detach(|| metrics::model_nmse(&x, &self.inner.params, &self.inner.variant))
            .map_err(py_err)
    }

    /// Concept vector along decoder atom `index`, oriented by `sign`.
    #[pyo3(signature = (index, sign = 1))]
    fn atom_direction(&self, index: usize, sign: i8) -> PyResult<Vec<f64>> {
        let cv = ConceptVector::from_atom(&self.inner.params, index, sign, "").map_err(py_err)?;
        Ok(cv.direction().as_slice().to_vec())
    }

    /// Greedy matching against `truth`; returns `(recovered, fragmentation_pairs)`.
    #[pyo3(signature = (truth, tau = 0.9))]
    fn recovery(&self, truth: &PyTruth, tau: f64) -> PyResult<(usize, usize)> {
        let r = metrics::dictionary_recovery(&self.inner.params.dict, &truth.inner.atoms, tau)
            .map_err(py_err)?;
        Ok((r.recovered, r.fragmentation.len()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Sae(variant={}, d={}, p={}, step={})",
            self.inner.variant.name(),
            self.inner.params.d(),
            self.inner.params.p(),
            self.inner.step
        )
    }
}

/// Trains an SAE and returns it with the training log as JSON lines.
#[pyfunction]
#[pyo3(signature = (store, variant = "abstopk", k = None, lam = None, theta = None, latents = None, steps = 1000, batch_size = 4096, lr = 3e-4, seed = 0, eval_every = 100))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    store: &PyStore,
    variant: &str,
    k: Option<usize>,
    lam: Option<f64>,
    theta: Option<f64>,
    latents: Option<usize>,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    eval_every: usize,
) -> PyResult<(PySae, String)> {
    let variant = parse_variant(variant, k, lam, theta)?;
    let cfg = TrainConfig {
        steps,
        batch_size,
        lr,
        seed,
        eval_every,
        ..TrainConfig::default()
    };
    let latents = latents.unwrap_or(16 * store.inner.dim());
    let out = py
        .detach(|| proxsae::train(&store.inner, &cfg, &variant, latents))
        .map_err(py_err)?;
    let report = out.report.to_jsonl();
    let ck = Checkpoint {
        params: out.params,
        variant,
        step: out.steps as u64,
        config_hash: String::new(),
        rng: out.rng,
    };
    Ok((PySae { inner: ck }, report))
}

/// Unit difference-in-means direction of two row sets.
#[pyfunction]
fn dim_extract(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let conv = |rows: Vec<Vec<f64>>| rows.into_iter().map(vector).collect::<PyResult<Vec<_>>>();
    let r = proxsae::dim_extract(&conv(pos)?, &conv(neg)?).map_err(py_err)?;
    Ok(r.concept.direction().as_slice().to_vec())
}

fn concept(direction: Vec<f64>) -> PyResult<ConceptVector> {
    ConceptVector::new(vector(direction)?, ConceptSource::Dim, "").map_err(py_err)
}

/// `x + alpha * direction`; `direction` must have unit norm.
#[pyfunction]
fn activation_add(x: Vec<f64>, direction: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let out = proxsae::activation_add(&vector(x)?, &concept(direction)?, alpha).map_err(py_err)?;
    Ok(out.into_vec())
}

/// Removes `alpha` times the component of `x` along unit `direction`.
#[pyfunction]
#[pyo3(signature = (x, direction, alpha = 1.0))]
fn directional_ablate(x: Vec<f64>, direction: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let out =
        proxsae::directional_ablate(&vector(x)?, &concept(direction)?, alpha).map_err(py_err)?;
    Ok(out.into_vec())
}

#[pyfunction]
fn nmse(x: Vec<f64>, xhat: Vec<f64>) -> PyResult<f64> {
    metrics::nmse(&vector(x)?, &vector(xhat)?).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "proxsae")]
fn proxsae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProxsaeError", m.py().get_type::<ProxsaeError>())?;
    m.add_class::<PyStore>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PySae>()?;
    for f in [
        wrap_pyfunction!(prox_relu, m)?,
        wrap_pyfunction!(prox_jumprelu, m)?,
        wrap_pyfunction!(prox_topk, m)?,
        wrap_pyfunction!(prox_abstopk, m)?,
        wrap_pyfunction!(generate, m)?,
        wrap_pyfunction!(train, m)?,
        wrap_pyfunction!(dim_extract, m)?,
        wrap_pyfunction!(activation_add, m)?,
        wrap_pyfunction!(directional_ablate, m)?,
        wrap_pyfunction!(nmse, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
