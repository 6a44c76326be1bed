//! Python bindings: sessions, models, decoding, language models, metrics,
//! streaming and training.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use myokey_core::ctc::{ctc_loss, EmissionLattice};
use myokey_core::dataio::{self, GenConfig};
use myokey_core::decode::{self, CorrectionMode, DecodeConfig, LiteralGuard, MockCorrector};
use myokey_core::encoders::{self, ArchConfig, ArchKind, Scale};
use myokey_core::frontend;
use myokey_core::lm::{self, NgramModel};
use myokey_core::metrics::align_text;
use myokey_core::stream::{self, StreamConfig, StreamMode};
use myokey_core::train::{self as training, EvalConfig, Split, TrainConfig};
use myokey_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Input(_) | Error::Format { .. } | Error::NoAlignment { .. } | Error::EmptySession { .. } => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// A recording of 32 EMG channels plus the keystrokes typed during it.
#[pyclass(name = "Session", module = "myokey", from_py_object)]
#[derive(Clone)]
struct PySession {
    inner: dataio::Session,
}

#[pymethods]
impl PySession {
    /// Renders a synthetic session.
    #[staticmethod]
    #[pyo3(signature = (user_seed, session_seed, duration_s=60.0, typing_rate=3.0, noise_std=40.0, leakage=0.3, typo_rate=0.03))]
    fn generate(
        user_seed: u64,
        session_seed: u64,
        duration_s: f64,
        typing_rate: f64,
        noise_std: f64,
        leakage: f64,
        typo_rate: f64,
    ) -> PyResult<Self> {
        let cfg = GenConfig {
            duration_s,
            typing_rate,
            noise_std,
            leakage,
            typo_rate,
            ..GenConfig::default()
        };
        Ok(PySession {
            inner: dataio::generate_session(&cfg, user_seed, session_seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PySession {
            inner: dataio::read_session(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        dataio::write_session(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PySession {
            inner: dataio::decode_session(data).map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &dataio::encode_session(&self.inner).map_err(err)?))
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    #[getter]
    fn user_seed(&self) -> u64 {
        self.inner.user_seed
    }

    #[getter]
    fn session_seed(&self) -> u64 {
        self.inner.session_seed
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s()
    }

    /// Interleaved samples, `samples[t * 32 + c]`.
    #[getter]
    fn samples(&self) -> Vec<i16> {
        self.inner.samples.clone()
    }

    /// `(sample index, key)` pairs; backspace is `"\b"`.
    #[getter]
    fn events(&self) -> Vec<(u64, char)> {
        self.inner.events.iter().map(|e| (e.timestamp, e.key)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Session(user_seed={}, session_seed={}, duration_s={:.2}, keys={})",
            self.inner.user_seed,
            self.inner.session_seed,
            self.inner.duration_s(),
            self.inner.events.len()
        )
    }
}

/// Per-frame log-probabilities over blank plus the 29 keys.
#[pyclass(name = "Lattice", module = "myokey", skip_from_py_object)]
#[derive(Clone)]
struct PyLattice {
    inner: EmissionLattice,
}

#[pymethods]
impl PyLattice {
    /// Builds a lattice from rows of probabilities.
    #[staticmethod]
    fn from_probs(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyLattice {
            inner: EmissionLattice::from_probs(&rows).map_err(err)?,
        })
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Rows of log-probabilities.
    fn to_list(&self) -> Vec<Vec<f64>> {
        (0..self.inner.frames()).map(|t| self.inner.row(t).to_vec()).collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Lattice(frames={}, width={})", self.inner.frames(), self.inner.width())
    }
}

/// A causal encoder with its feature-normalization statistics.
#[pyclass(name = "Model", module = "myokey", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: encoders::Model,
}

#[pymethods]
impl PyModel {
    /// `arch` is one of "tds", "tds_transformer", "conformer"; `scale` is
    /// "toy" or "paper".
    #[new]
    #[pyo3(signature = (arch="conformer", scale="toy", seed=0))]
    fn new(arch: &str, scale: &str, seed: u64) -> PyResult<Self> {
        let cfg = ArchConfig::new(parse::<ArchKind>(arch)?, parse::<Scale>(scale)?);
        Ok(PyModel {
            inner: encoders::Model::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: encoders::load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        encoders::save_checkpoint(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyModel {
            inner: encoders::decode_checkpoint(data).map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encoders::encode_checkpoint(&self.inner))
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.arch.kind.name()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Receptive field in frames.
    #[getter]
    fn receptive_field(&self) -> usize {
        self.inner.receptive_field()
    }

    #[getter]
    fn rotation_offsets(&self) -> Vec<i32> {
        self.inner.rotation_offsets.clone()
    }

    /// Offline emissions for a whole session.
    fn emissions(&self, session: &PySession) -> PyResult<PyLattice> {
        let spec = frontend::log_spectrogram(&session.inner.samples).map_err(err)?;
        Ok(PyLattice {
            inner: self.inner.forward(&spec).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(arch={}, params={}, receptive_field={})",
            self.inner.arch.kind,
            self.inner.param_count(),
            self.inner.receptive_field()
        )
    }
}

/// Character n-gram model with interpolated Kneser-Ney smoothing.
#[pyclass(name = "NgramModel", module = "myokey", skip_from_py_object)]
#[derive(Clone)]
struct PyNgram {
    inner: NgramModel,
}

#[pymethods]
impl PyNgram {
    /// Trains on `corpus`; with no corpus the bundled English text is used.
    #[new]
    #[pyo3(signature = (corpus=None, order=6, discount=0.75))]
    fn new(corpus: Option<&str>, order: usize, discount: f64) -> PyResult<Self> {
        Ok(PyNgram {
            inner: NgramModel::train(corpus.unwrap_or(lm::CORPUS), order, discount).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyNgram {
            inner: NgramModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    /// Natural-log probability of `c` following `prefix`.
    fn log_prob(&self, prefix: &str, c: char) -> PyResult<f64> {
        self.inner.next_log_prob(prefix, Some(c)).map_err(err)
    }

    /// Natural-log probability of `text` including the end of sentence.
    fn score(&self, text: &str) -> PyResult<f64> {
        self.inner.score_sequence(text).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("NgramModel(order={})", self.inner.order())
    }
}

/// Log-spectrogram features, `[frames][32 * 33]`.
#[pyfunction]
fn log_spectrogram(samples: Vec<i16>) -> PyResult<Vec<Vec<f64>>> {
    let spec = frontend::log_spectrogram(&samples).map_err(err)?;
    Ok((0..spec.frames).map(|t| spec.frame(t).to_vec()).collect())
}

#[pyfunction]
fn greedy_decode(lattice: &PyLattice) -> String {
    decode::greedy_decode(&lattice.inner)
}

/// Prefix beam search with optional shallow LM fusion and correction
/// ("none", "space" or "sentence", using the bundled word list).
#[pyfunction]
#[pyo3(signature = (lattice, beam_width=32, lm_weight=0.5, length_bonus=0.0, lm=None, correction="none", literal_spans=Vec::new()))]
fn beam_decode(
    lattice: &PyLattice,
    beam_width: usize,
    lm_weight: f64,
    length_bonus: f64,
    lm: Option<&PyNgram>,
    correction: &str,
    literal_spans: Vec<String>,
) -> PyResult<String> {
    let cfg = DecodeConfig {
        beam_width,
        lm_weight,
        length_bonus,
        ..DecodeConfig::default()
    };
    let lm = lm.map(|m| &m.inner);
    let text = decode::beam_decode(&lattice.inner, &cfg, lm).map_err(err)?.text;
    let mode: CorrectionMode = parse(correction)?;
    if mode == CorrectionMode::None {
        return Ok(text);
    }
    let corrector = MockCorrector::new(dataio::WORDS.lines(), lm.cloned());
    let guard = LiteralGuard {
        enabled: true,
        spans: literal_spans,
    };
    Ok(decode::apply_correction(&text, &corrector, mode, &guard).text)
}

/// CTC negative log-likelihood of a key string under `lattice`.
#[pyfunction]
fn ctc_nll(lattice: &PyLattice, text: &str) -> PyResult<f64> {
    let target = text
        .chars()
        .map(|c| myokey_core::alphabet::emission_index(c).ok_or_else(|| PyValueError::new_err(format!("not a key: {c:?}"))))
        .collect::<PyResult<Vec<usize>>>()?;
    Ok(ctc_loss(&lattice.inner, &target).map_err(err)?.loss)
}

/// Character alignment as `(S, D, I, ref_len, cer)`.
#[pyfunction]
fn align(reference: &str, hypothesis: &str) -> (usize, usize, usize, usize, f64) {
    let r = align_text(reference, hypothesis);
    (r.substitutions, r.deletions, r.insertions, r.ref_len, r.cer)
}

/// Streams a session through the sliding-window engine and returns the
/// concatenated emissions and the greedy transcript.
#[pyfunction]
#[pyo3(signature = (session, model, mode="low_latency", chunk_samples=400))]
fn stream_session(session: &PySession, model: &PyModel, mode: &str, chunk_samples: usize) -> PyResult<(PyLattice, String)> {
    let cfg = StreamConfig::for_mode(parse::<StreamMode>(mode)?);
    let out = stream::stream_session(&session.inner, &model.inner, &cfg, None, None, chunk_samples, false).map_err(err)?;
    let text = out.events.last().map(|e| e.text.clone()).unwrap_or_default();
    Ok((PyLattice { inner: out.emissions }, text))
}

/// Per-window latency statistics in milliseconds.
#[pyfunction]
#[pyo3(signature = (model, windows=100, mode="low_latency"))]
fn latency_bench(model: &PyModel, windows: usize, mode: &str) -> PyResult<(f64, f64, f64, f64)> {
    let cfg = StreamConfig::for_mode(parse::<StreamMode>(mode)?);
    let r = stream::latency_bench(&model.inner, &cfg, windows).map_err(err)?;
    Ok((r.p50_ms, r.p95_ms, r.max_ms, r.real_time_factor))
}

/// Renders `users * sessions_per_user` synthetic sessions.
#[pyfunction]
#[pyo3(signature = (users, sessions_per_user, duration_s=60.0, seed=0))]
fn generate_dataset(users: usize, sessions_per_user: usize, duration_s: f64, seed: u64) -> PyResult<Vec<PySession>> {
    let cfg = GenConfig {
        duration_s,
        ..GenConfig::default()
    };
    Ok(training::generate_dataset(&cfg, users, sessions_per_user, seed)
        .map_err(err)?
        .into_iter()
        .map(|inner| PySession { inner })
        .collect())
}

/// Trains with CTC on a generic split holding out `eval_users` (user seeds)
/// and returns the best model and the per-epoch metrics CSV.
#[pyfunction]
#[pyo3(signature = (sessions, eval_users, arch="conformer", epochs=10, steps_per_epoch=None, batch_size=8, learning_rate=1e-3, window_s=2.0, hop_s=1.0, augment=true, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    sessions: Vec<PySession>,
    eval_users: Vec<u64>,
    arch: &str,
    epochs: usize,
    steps_per_epoch: Option<usize>,
    batch_size: usize,
    learning_rate: f64,
    window_s: f64,
    hop_s: f64,
    augment: bool,
    seed: u64,
) -> PyResult<(PyModel, String)> {
    let mut cfg = TrainConfig::new(ArchConfig::toy(parse(arch)?), Split::Generic { eval_users });
    cfg.epochs = epochs;
    cfg.max_steps_per_epoch = steps_per_epoch;
    cfg.batch_size = batch_size;
    cfg.learning_rate = learning_rate;
    cfg.window_s = window_s;
    cfg.hop_s = hop_s;
    cfg.seed = seed;
    if !augment {
        cfg.augment = myokey_core::augment::AugmentConfig::none();
    }
    let data: Vec<dataio::Session> = sessions.into_iter().map(|s| s.inner).collect();
    let out = py.detach(|| training::train(&cfg, &data)).map_err(err)?;
    Ok((PyModel { inner: out.best }, training::metrics_csv(&out.log)))
}

/// Micro-averaged greedy CER of `model` over `sessions`.
#[pyfunction]
#[pyo3(signature = (model, sessions, online=false))]
fn evaluate(py: Python<'_>, model: &PyModel, sessions: Vec<PySession>, online: bool) -> PyResult<f64> {
    let data: Vec<dataio::Session> = sessions.into_iter().map(|s| s.inner).collect();
    let report = py
        .detach(|| {
            let cfg = EvalConfig {
                online: online.then(StreamConfig::low_latency),
                ..EvalConfig::default()
            };
            training::evaluate(&model.inner, &data, &cfg)
        })
        .map_err(err)?;
    Ok(report.cer())
}

#[pymodule]
fn myokey(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySession>()?;
    m.add_class::<PyLattice>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyNgram>()?;
    m.add_function(wrap_pyfunction!(log_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(beam_decode, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_nll, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(stream_session, m)?)?;
    m.add_function(wrap_pyfunction!(latency_bench, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("KEYS", myokey_core::alphabet::KEYS.iter().collect::<String>())?;
    m.add("SAMPLE_RATE", dataio::SAMPLE_RATE)?;
    m.add("CHANNELS", dataio::CHANNELS)?;
    Ok(())
}
