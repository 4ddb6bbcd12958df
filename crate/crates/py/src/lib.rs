//! Python bindings: datasets, training, evaluation and metrics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use poirec_core::eval::{self, RankedResult};
use poirec_core::geodata::{encode_geohash5, GeoPoint};
use poirec_core::ingest::{self, FilterConfig};
use poirec_core::model::{self, VariantSpec};
use poirec_core::synth::{self, SynthConfig};
use poirec_core::train::{self, TrainConfig};

fn err(e: poirec_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type CheckInTuple = (usize, usize, u8, u8, usize, i64);

/// Encoded check-in histories with their vocabulary.
#[pyclass(module = "poirec")]
pub struct Dataset {
    inner: ingest::Dataset,
}

#[pymethods]
impl Dataset {
    /// Parses, filters and encodes a check-in TSV.
    #[staticmethod]
    #[pyo3(signature = (path, min_poi_count=None, max_history=None, min_history=None))]
    fn from_tsv(path: &str, min_poi_count: Option<usize>, max_history: Option<usize>, min_history: Option<usize>) -> PyResult<Self> {
        let d = FilterConfig::default();
        let cfg = FilterConfig {
            min_poi_count: min_poi_count.unwrap_or(d.min_poi_count),
            max_history: max_history.unwrap_or(d.max_history),
            min_history: min_history.unwrap_or(d.min_history),
            ..d
        };
        let (inner, _) = ingest::Dataset::from_tsv(path, &cfg).map_err(err)?;
        Ok(Dataset { inner })
    }

    /// Loads a dataset written by `save` or `poirec ingest`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Dataset { inner: ingest::load_dataset(path).map_err(err)? })
    }

    /// Synthetic corpus with planted per-user routines.
    #[staticmethod]
    #[pyo3(signature = (users=200, areas=20, pois_per_area=15, noise=0.1, seed=7))]
    fn synthetic(users: usize, areas: usize, pois_per_area: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig { users, areas, pois_per_area, noise, seed, ..SynthConfig::default() };
        let raw = synth::generate(&cfg).map_err(err)?;
        let (inner, _) = ingest::Dataset::from_raw(raw, &FilterConfig::default()).map_err(err)?;
        Ok(Dataset { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        ingest::save_dataset(&self.inner, path).map_err(err)
    }

    /// The first `n` users, re-indexed.
    fn take_users(&self, n: usize) -> Self {
        Dataset { inner: self.inner.take_users(n) }
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.histories.len()
    }

    #[getter]
    fn num_pois(&self) -> usize {
        self.inner.vocab.sizes().pois
    }

    #[getter]
    fn num_checkins(&self) -> usize {
        self.inner.num_checkins()
    }

    /// `(poi, category, dow, slot, area, timestamp)` tuples of one user.
    fn history(&self, user: usize) -> PyResult<Vec<CheckInTuple>> {
        let h = self
            .inner
            .histories
            .get(user)
            .ok_or_else(|| PyValueError::new_err(format!("user {user} out of range")))?;
        Ok(h.checkins.iter().map(|c| (c.poi, c.category, c.dow, c.slot, c.area, c.timestamp)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(users={}, pois={}, checkins={})", self.num_users(), self.num_pois(), self.num_checkins())
    }
}

/// A trained (or loaded) model with the settings it was trained under.
#[pyclass(module = "poirec")]
pub struct Model {
    inner: model::Model,
    config: TrainConfig,
    config_hash: String,
    losses: Vec<f64>,
}

fn train_config(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let Some(kw) = kwargs else { return Ok(cfg) };
    for (k, v) in kw.iter() {
        let key: String = k.extract()?;
        match key.as_str() {
            "epochs" => cfg.epochs = v.extract()?,
            "batch_size" => cfg.batch_size = v.extract()?,
            "negatives" => cfg.negatives = v.extract()?,
            "lr" => cfg.lr = v.extract()?,
            "dropout_inter" => cfg.dropout_inter = v.extract()?,
            "dropout_mlp" => cfg.dropout_mlp = v.extract()?,
            "s1_window" => cfg.s1_window = v.extract()?,
            "seq_cap" => cfg.seq_cap = v.extract()?,
            "seed" => cfg.seed = v.extract()?,
            "t_min" => cfg.t_min = v.extract()?,
            "early_stopping" => cfg.early_stopping = v.extract()?,
            "patience" => cfg.patience = v.extract()?,
            _ => return Err(PyValueError::new_err(format!("unknown training option {key:?}"))),
        }
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pymethods]
impl Model {
    /// Trains `variant` ("full", "long", "short", "s1+s4", ...) on `dataset`.
    /// Keyword options: epochs, batch_size, negatives, lr, dropout_inter,
    /// dropout_mlp, s1_window, seq_cap, seed, t_min, early_stopping, patience.
    #[staticmethod]
    #[pyo3(signature = (dataset, variant="full", **kwargs))]
    fn train(py: Python<'_>, dataset: &Dataset, variant: &str, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = train_config(kwargs)?;
        let spec = VariantSpec::parse(variant).map_err(err)?;
        let ds = &dataset.inner;
        let (inner, _, report) = py
            .detach(|| train::fit(&ds.histories, ds.vocab.sizes(), &ds.vocab.poi_category, spec, &cfg, |_| {}))
            .map_err(err)?;
        Ok(Model {
            inner,
            config_hash: train::config_hash(&cfg, &spec),
            config: cfg,
            losses: report.epochs.iter().map(|e| e.mean_loss).collect(),
        })
    }

    /// Loads a checkpoint written by `save` or `poirec train`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = model::load_checkpoint(path).map_err(err)?;
        Ok(Model { inner: ck.model, config: TrainConfig::default(), config_hash: ck.config_hash, losses: Vec::new() })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(path, &self.inner, None, &self.config_hash).map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.name()
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Mean training loss per epoch.
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Test-set metrics as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let ds = &dataset.inner;
        self.inner.check_vocab(&ds.vocab.sizes()).map_err(err)?;
        let r = py
            .detach(|| {
                eval::evaluate(&self.inner.variant, &self.inner, &ds.histories, &ds.vocab.poi_category, &self.config.seq(), &self.config_hash)
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("variant", r.variant)?;
        d.set_item("acc1", r.acc1)?;
        d.set_item("acc5", r.acc5)?;
        d.set_item("acc10", r.acc10)?;
        d.set_item("mrr5", r.mrr5)?;
        d.set_item("mrr10", r.mrr10)?;
        d.set_item("users", r.users)?;
        d.set_item("config_hash", r.config_hash)?;
        Ok(d)
    }

    /// Probabilities for every POI when predicting check-in `target` of `user`.
    fn score(&self, dataset: &Dataset, user: usize, target: usize) -> PyResult<Vec<f64>> {
        let ds = &dataset.inner;
        let h = ds
            .histories
            .get(user)
            .ok_or_else(|| PyValueError::new_err(format!("user {user} out of range")))?;
        let step = model::StepInput::new(&h.checkins, target, &self.config.seq()).map_err(err)?;
        let catalog: Vec<usize> = (0..self.inner.vocab.pois).collect();
        self.inner.score(&step, &catalog, &ds.vocab.poi_category, 256).map_err(err)
    }
}

/// Acc@k and MRR@k for k in {1, 5, 10} from 1-based ranks.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, ranks: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let results: Vec<RankedResult> = ranks.iter().enumerate().map(|(u, &rank)| RankedResult { user: u, truth: 0, rank }).collect();
    let m = eval::metrics(&results).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("acc1", m.acc1)?;
    d.set_item("acc5", m.acc5)?;
    d.set_item("acc10", m.acc10)?;
    d.set_item("mrr5", m.mrr5)?;
    d.set_item("mrr10", m.mrr10)?;
    Ok(d)
}

/// 1-based rank of `truth` in `scores`; ties go to the lower index.
#[pyfunction]
fn rank_of(scores: Vec<f64>, truth: usize) -> PyResult<usize> {
    eval::rank_of(&scores, truth).map_err(err)
}

/// Five-character geohash of a point.
#[pyfunction]
fn geohash(lat: f64, lon: f64) -> PyResult<String> {
    Ok(encode_geohash5(GeoPoint::new(lat, lon).map_err(err)?).as_string())
}

#[pymodule]
#[pyo3(name = "poirec")]
fn poirec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(rank_of, m)?)?;
    m.add_function(wrap_pyfunction!(geohash, m)?)?;
    Ok(())
}
