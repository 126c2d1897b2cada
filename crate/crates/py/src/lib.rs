//! Python bindings: networks, datasets, training, scoring and pruning.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use prunelab::data::{self, SyntheticConfig};
use prunelab::nn::{preset, Activation, InitSpec};
use prunelab::prune::{self, PruneScope};
use prunelab::scorers::param::{score_parameters, ParamScorer, ParamScorerKind};
use prunelab::scorers::unit::{score_units, UnitScorerKind};
use prunelab::train::{self as tr, PruneMode, PruneSchedule, TrainConfig, TrainOptions};
use prunelab::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => PyIOError::new_err(msg),
        Error::NonFinite(_) => PyArithmeticError::new_err(msg),
        Error::Shape(_)
        | Error::InvalidArgument(_)
        | Error::IncompatibleLayers { .. }
        | Error::CapExceeded { .. } => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for prunelab::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A convolutional classifier with pruning masks.
#[pyclass(unsendable, module = "prunelab_py")]
pub struct Network {
    inner: prunelab::nn::Network,
}

#[pymethods]
impl Network {
    /// Builds a freshly initialized preset (`mnist-fc64`, `cifar`, `tiny`, ...).
    #[staticmethod]
    #[pyo3(signature = (name, activation = "relu", seed = 0, fc1_width = None))]
    fn preset(name: &str, activation: &str, seed: u64, fc1_width: Option<usize>) -> PyResult<Self> {
        let act: Activation = activation.parse().py()?;
        let spec = preset(name, act, fc1_width).py()?;
        let inner = prunelab::nn::Network::build(spec, InitSpec::seeded(seed)).py()?;
        Ok(Network { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Network {
            inner: prunelab::checkpoint::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        prunelab::checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn pruned_fraction(&self) -> f64 {
        self.inner.pruned_fraction()
    }

    #[getter]
    fn param_layers(&self) -> usize {
        self.inner.param_layer_count()
    }

    fn units(&self, layer: usize) -> PyResult<usize> {
        if layer >= self.inner.param_layer_count() {
            return Err(PyValueError::new_err(format!(
                "no parametered layer {layer}"
            )));
        }
        Ok(self.inner.units(layer))
    }

    /// Flat parameters: per layer, weights then bias.
    fn parameters(&self) -> Vec<f64> {
        self.inner.flat_params().into_data()
    }

    fn mask(&self) -> Vec<f64> {
        self.inner.flat_mask()
    }

    /// Logits of `data`, one list per sample.
    fn logits(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let b = data.inner.all();
        let (t, _) = self.inner.logits(&b.images, &b.labels).py()?;
        let k = self.inner.outputs();
        Ok(t.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// `(loss, accuracy)` on `data`.
    fn evaluate(&self, data: &Dataset) -> PyResult<(f64, f64)> {
        tr::evaluate(&self.inner, &data.inner.all()).py()
    }

    /// Per-parameter saliencies in flat order; masked entries are `inf`.
    #[pyo3(signature = (data, kind = "magnitude", seed = 0))]
    fn score_parameters(&mut self, data: &Dataset, kind: &str, seed: u64) -> PyResult<Vec<f64>> {
        let kind: ParamScorerKind = kind.parse().py()?;
        let scorer = ParamScorer::new(kind).with_seed(seed);
        Ok(
            score_parameters(&mut self.inner, &data.inner.all(), &scorer)
                .py()?
                .flat(),
        )
    }

    /// Masks the lowest-scoring parameters until `fraction` of all
    /// parameters are masked. Returns the achieved fraction.
    #[pyo3(signature = (data, fraction, kind = "magnitude", scope = "global", seed = 0))]
    fn prune_parameters(
        &mut self,
        data: &Dataset,
        fraction: f64,
        kind: &str,
        scope: &str,
        seed: u64,
    ) -> PyResult<f64> {
        let kind: ParamScorerKind = kind.parse().py()?;
        let scope: PruneScope = scope.parse().py()?;
        let scores = score_parameters(
            &mut self.inner,
            &data.inner.all(),
            &ParamScorer::new(kind).with_seed(seed),
        )
        .py()?;
        Ok(
            prune::prune_parameters(&mut self.inner, &scores, fraction, scope)
                .py()?
                .achieved_fraction,
        )
    }

    /// Unit scores of parametered layer `layer` (`mrp`, `mrs`, `normL1`,
    /// `normL2sq`, `random`).
    #[pyo3(signature = (layer, data, kind = "mrs", seed = 0))]
    fn score_units(
        &self,
        layer: usize,
        data: &Dataset,
        kind: &str,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let kind: UnitScorerKind = kind.parse().py()?;
        Ok(
            score_units(&self.inner, layer, kind, Some(&data.inner.all()), seed)
                .py()?
                .scores,
        )
    }

    /// Removes `fraction` of the units of every hidden layer. Returns the
    /// removed `(layer, unit)` pairs.
    #[pyo3(signature = (data, fraction, kind = "mrs", bias_propagation = true, seed = 0))]
    fn prune_units(
        &mut self,
        data: &Dataset,
        fraction: f64,
        kind: &str,
        bias_propagation: bool,
        seed: u64,
    ) -> PyResult<Vec<(usize, usize)>> {
        let kind: UnitScorerKind = kind.parse().py()?;
        let batch = data.inner.all();
        let tables = (0..self.inner.param_layer_count() - 1)
            .map(|p| score_units(&self.inner, p, kind, Some(&batch), seed))
            .collect::<prunelab::Result<Vec<_>>>()
            .py()?;
        let r = prune::prune_units(
            &mut self.inner,
            &tables,
            fraction,
            bias_propagation.then_some(&batch),
        )
        .py()?;
        Ok(r.pruned_units.iter().map(|u| (u.layer, u.unit)).collect())
    }

    /// A physically smaller copy without dead units.
    fn shrink(&self) -> PyResult<Network> {
        Ok(Network {
            inner: prune::shrink(&self.inner).py()?.net,
        })
    }

    /// Trains in place and returns the run log as JSON lines. `schedule` is
    /// `table2_2`, `table4_2` or a path; `mode` is `param` or `unit`.
    #[pyo3(signature = (data, epochs = 1, lr = 0.01, batch_size = 32, seed = 0, log_every = 50,
                        schedule = None, mode = "param", scorer = None, scope = "global", bias_propagation = true))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        data: &Dataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        log_every: usize,
        schedule: Option<&str>,
        mode: &str,
        scorer: Option<&str>,
        scope: &str,
        bias_propagation: bool,
    ) -> PyResult<String> {
        let cfg = TrainConfig {
            learning_rate: lr,
            batch_size,
            epochs,
            log_every,
            seed,
        };
        let schedule = match schedule {
            None => None,
            Some(s) => {
                let mode = match mode {
                    "param" => PruneMode::Parameter {
                        scorer: scorer.unwrap_or("magnitude").parse().py()?,
                        scope: scope.parse().py()?,
                    },
                    "unit" => PruneMode::Unit {
                        scorer: scorer.unwrap_or("mrs").parse().py()?,
                        bias_propagation,
                    },
                    other => return Err(PyValueError::new_err(format!("unknown mode {other}"))),
                };
                Some(PruneSchedule::resolve(s, mode).py()?)
            }
        };
        let opts = TrainOptions {
            schedule,
            ..Default::default()
        };
        tr::train(&mut self.inner, &data.inner, &cfg, opts)
            .py()?
            .to_jsonl()
            .py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(params={}, pruned={:.4})",
            self.inner.param_count(),
            self.inner.pruned_fraction()
        )
    }
}

/// Labelled images in NCHW layout.
#[pyclass(unsendable, module = "prunelab_py")]
pub struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(images: Vec<f64>, shape: [usize; 4], labels: Vec<usize>) -> PyResult<Self> {
        let t = Tensor::new(shape.to_vec(), images).py()?;
        Ok(Dataset {
            inner: data::Dataset::new("python", t, labels).py()?,
        })
    }

    /// Seeded Gaussian-bump classes on noise.
    #[staticmethod]
    #[pyo3(signature = (classes, n, seed = 0, shape = [1, 28, 28], separation = 6.0, jitter = 0.0))]
    fn synthetic(
        classes: usize,
        n: usize,
        seed: u64,
        shape: [usize; 3],
        separation: f64,
        jitter: f64,
    ) -> PyResult<Self> {
        let cfg = SyntheticConfig::new(classes, n, seed)
            .with_shape(shape)
            .with_separation(separation)
            .with_jitter(jitter);
        Ok(Dataset {
            inner: data::synthetic(cfg).py()?,
        })
    }

    /// `(train, test)` from an MNIST IDX directory.
    #[staticmethod]
    fn mnist(dir: PathBuf) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = data::load_mnist(dir).py()?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    fn head(&self, n: usize) -> Dataset {
        Dataset {
            inner: self.inner.head(n),
        }
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.images.shape().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Runs the command-line tool with `argv` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    prunelab::cli::run(std::iter::once("prunelab".to_string()).chain(argv))
}

#[pymodule]
fn prunelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
