//! Finite-difference check of the full model likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::grad_check;
use crate::data::{Batch, SPECIALS};
use crate::error::{Error, Result};
use crate::model::{LanguageVocab, ModelConfig, MultiWayModel, SHARED_ATTENTION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSpec {
    /// Ids per language, specials included.
    pub vocab: usize,
    pub hidden_dim: usize,
    /// Source and target sentence length.
    pub length: usize,
    pub batch: usize,
    /// 1: one-to-one likelihood; 2: also the early-averaged two-source one.
    pub sources: usize,
    pub init_scale: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            vocab: 12,
            hidden_dim: 8,
            length: 5,
            batch: 2,
            sources: 1,
            init_scale: 1.0,
            epsilon: 1e-5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameters: usize,
}

fn batch(s: &[Vec<usize>], eos: bool) -> Result<Batch> {
    let refs: Vec<&[usize]> = s.iter().map(Vec::as_slice).collect();
    Batch::from_sequences(&refs, eos)
}

/// Teacher-forced log-likelihood of a tiny model over a random batch. With
/// `sources = 2` a second encoder is added and its early-averaged two-source
/// likelihood joins the loss.
pub fn model_grad_check(spec: &GradCheckSpec) -> Result<GradCheckReport> {
    if spec.vocab <= SPECIALS.len() || spec.length == 0 || spec.batch == 0 {
        return Err(Error::Config(format!(
            "grad check needs vocab > {}, length >= 1 and batch >= 1",
            SPECIALS.len()
        )));
    }
    if !(1..=2).contains(&spec.sources) {
        return Err(Error::Config("grad check sources must be 1 or 2".into()));
    }
    let h = spec.hidden_dim;
    let encoders = ["A", "B"][..spec.sources]
        .iter()
        .map(|n| LanguageVocab::with_size(n, spec.vocab))
        .collect();
    let mut cfg = ModelConfig::new(encoders, vec![LanguageVocab::with_size("T", spec.vocab)]);
    cfg.embed_dim = h;
    cfg.hidden_dim = h;
    cfg.attn_hidden_dim = h;
    cfg.readout_dim = h;
    cfg.init_scale = spec.init_scale;
    cfg.seed = spec.seed;
    let model = MultiWayModel::new(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sentences = || -> Vec<Vec<usize>> {
        (0..spec.batch)
            .map(|_| (0..spec.length).map(|_| rng.gen_range(SPECIALS.len()..spec.vocab)).collect())
            .collect()
    };
    let (a, b, t) = (sentences(), sentences(), sentences());
    let src_a = batch(&a, false)?;
    let src_b = batch(&b, false)?;
    let tgt = batch(&t, true)?;

    let err = grad_check(
        model.store(),
        |tape| {
            let mut lp = model.sequence_logprob(tape, &[(0, &src_a)], 0, &[SHARED_ATTENTION], &tgt)?;
            if spec.sources == 2 {
                let both = model.sequence_logprob(
                    tape,
                    &[(0, &src_a), (1, &src_b)],
                    0,
                    &[SHARED_ATTENTION, SHARED_ATTENTION],
                    &tgt,
                )?;
                lp = tape.add(lp, both)?;
            }
            tape.sum(lp)
        },
        spec.epsilon,
    )?;
    Ok(GradCheckReport {
        max_relative_error: err,
        parameters: model.param_count(),
    })
}
