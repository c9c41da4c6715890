//! Python bindings: load checkpoints, translate, score, and run the
//! gradient check.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mwnmt::checkpoint;
use mwnmt::gradcheck::{model_grad_check, GradCheckSpec};
use mwnmt::strategies::{translate_batch, translate_pivot_batch, PivotSecondStage, StrategyKind};
use mwnmt::{MultiWayModel, RunConfig};

fn py_err(e: mwnmt::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: MultiWayModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load_model(&path).map_err(py_err)?,
        })
    }

    /// Fresh untrained model from a TOML run configuration (defaults if empty).
    #[staticmethod]
    #[pyo3(signature = (config_toml = ""))]
    fn from_config(config_toml: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config_toml).map_err(py_err)?;
        Ok(PyModel {
            inner: MultiWayModel::new(cfg.model_config()).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, None, &path).map_err(py_err)
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.checkpoint_id()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn attention_for(&self, source: &str, target: &str) -> String {
        self.inner.attention_id_for(source, target).to_string()
    }

    fn is_trained(&self, source: &str, target: &str) -> bool {
        self.inner.is_trained(source, target)
    }

    /// Translate whitespace-tokenized lines. `sources` holds one list of
    /// lines per entry of `src_langs`.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (src_langs, sources, tgt_lang, strategy = "one", pivot = None, beam = 1))]
    fn translate(
        &self,
        py: Python<'_>,
        src_langs: Vec<String>,
        sources: Vec<Vec<String>>,
        tgt_lang: &str,
        strategy: &str,
        pivot: Option<String>,
        beam: usize,
    ) -> PyResult<Vec<String>> {
        if src_langs.len() != sources.len() || src_langs.is_empty() {
            return Err(PyValueError::new_err("one list of lines per source language required"));
        }
        let strategy: StrategyKind = strategy.parse().map_err(py_err)?;
        let m = &self.inner;
        let mut encoded = Vec::with_capacity(sources.len());
        for (lang, lines) in src_langs.iter().zip(&sources) {
            let v = m.source_vocab(lang).map_err(py_err)?;
            encoded.push(lines.iter().map(|l| v.encode(&tokens(l))).collect::<Vec<_>>());
        }
        if encoded.iter().flatten().any(Vec::is_empty) {
            return Err(PyValueError::new_err("empty source line"));
        }
        let out = py
            .detach(|| match &pivot {
                Some(p) => {
                    if encoded.len() != 1 {
                        return Err(mwnmt::Error::Config("pivot translation takes one source language".into()));
                    }
                    let second = match strategy {
                        StrategyKind::OneToOne => PivotSecondStage::OneToOne,
                        s => PivotSecondStage::ManyToOne(s),
                    };
                    translate_pivot_batch(m, &src_langs[0], p, tgt_lang, &encoded[0], second, beam)
                }
                None => {
                    let refs: Vec<(&str, &[Vec<usize>])> =
                        src_langs.iter().map(String::as_str).zip(encoded.iter().map(Vec::as_slice)).collect();
                    translate_batch(m, strategy, &refs, tgt_lang, beam)
                }
            })
            .map_err(py_err)?;
        let tv = m.target_vocab(tgt_lang).map_err(py_err)?;
        Ok(out.iter().map(|t| tv.decode(&t.tokens).join(" ")).collect())
    }
}

/// Corpus BLEU-4 (0-100) over whitespace-tokenized lines.
#[pyfunction]
fn bleu(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    let h: Vec<Vec<String>> = hyps.iter().map(|l| tokens(l)).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|l| tokens(l)).collect();
    mwnmt::bleu(&h, &r, 4).map(|b| b.score).map_err(py_err)
}

#[pyfunction]
fn tb_score(ter: f64, bleu: f64) -> f64 {
    mwnmt::tb_score(ter, bleu)
}

/// Max relative error between analytic and central-difference gradients.
#[pyfunction]
#[pyo3(signature = (vocab = 12, hidden_dim = 8, length = 5, seed = 1))]
fn grad_check(py: Python<'_>, vocab: usize, hidden_dim: usize, length: usize, seed: u64) -> PyResult<f64> {
    let spec = GradCheckSpec {
        vocab,
        hidden_dim,
        length,
        seed,
        ..GradCheckSpec::default()
    };
    py.detach(|| model_grad_check(&spec))
        .map(|r| r.max_relative_error)
        .map_err(py_err)
}

#[pyfunction]
fn default_config_toml() -> String {
    RunConfig::default().to_toml_string()
}

#[pymodule]
fn mwnmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(tb_score, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_toml, m)?)?;
    Ok(())
}
