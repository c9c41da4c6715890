//! Minibatch training: teacher-forced likelihood, global-norm clipping,
//! Adam, round-robin pair scheduling and T-B early stopping.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tape};
use crate::data::{make_batches, EncodedPairs, PairBatch};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, EvalReport};
use crate::model::MultiWayModel;
use crate::params::{ParamId, ParamStore};
use crate::strategies::{translate_greedy_batch, StrategyKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Updates between dev evaluations.
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub max_updates: usize,
    pub max_len: usize,
    /// Taken from the run-level seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Parameter path prefixes that may change; empty means all.
    pub trainable: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            batch_size: 80,
            eval_interval: 200,
            patience: 5,
            max_updates: 6000,
            max_len: 20,
            seed: 1,
            trainable: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive"),
            ((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)"),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.clip_norm > 0.0, "clip_norm must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.max_len >= 1, "max_len must be >= 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.is_empty() || self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }
}

pub fn global_norm(grads: &GradientMap) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale all gradients so that their global L2 norm is at most `max_norm`.
pub fn clip_gradients(mut grads: GradientMap, max_norm: f64) -> Result<GradientMap> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::invalid("clip norm must be positive"));
    }
    let norm = global_norm(&grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    Ok(grads)
}

/// First/second moment estimates per parameter and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<ParamId, Tensor>,
    pub second: BTreeMap<ParamId, Tensor>,
}

/// Bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (&id, g) in grads {
        let p = store.get_mut(id);
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let zeros = || Tensor::new(g.shape().to_vec(), vec![0.0; g.numel()]).expect("same shape");
        let m = state.first.entry(id).or_insert_with(zeros);
        let v = state.second.entry(id).or_insert_with(zeros);
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub patience: usize,
    pub best_tb: f64,
    pub best_update: Option<usize>,
    pub evals_since_improvement: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            patience,
            best_tb: f64::INFINITY,
            best_update: None,
            evals_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, tb: f64, update: usize) -> EarlyStopDecision {
        if tb < self.best_tb {
            self.best_tb = tb;
            self.best_update = Some(update);
            self.evals_since_improvement = 0;
            EarlyStopDecision::Improved
        } else {
            self.evals_since_improvement += 1;
            if self.evals_since_improvement >= self.patience {
                EarlyStopDecision::Stop
            } else {
                EarlyStopDecision::Continue
            }
        }
    }
}

/// Training data for one direction.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub source: String,
    pub target: String,
    pub pairs: EncodedPairs,
}

impl TrainPair {
    pub fn label(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }
}

/// Held-out sentences for one direction.
#[derive(Clone, Debug)]
pub struct DevSet {
    pub source: String,
    pub target: String,
    pub sources: Vec<Vec<usize>>,
    pub references: Vec<Vec<usize>>,
}

impl DevSet {
    pub fn label(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }

    /// Greedy one-to-one scores of `model` on this set.
    pub fn evaluate(&self, model: &MultiWayModel) -> Result<EvalReport> {
        let hyps = translate_greedy_batch(
            model,
            StrategyKind::OneToOne,
            &[(self.source.as_str(), self.sources.as_slice())],
            &self.target,
        )?;
        let hyps: Vec<Vec<usize>> = hyps.into_iter().map(|t| t.tokens).collect();
        score_corpus(&hyps, &self.references)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub pair: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub update: usize,
    pub mean_tb: f64,
    pub improved: bool,
    pub pairs: Vec<PairEval>,
}

#[derive(Serialize)]
struct UpdateRecord<'a> {
    update: usize,
    pair: &'a str,
    loss: f64,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    update: usize,
    eval: &'a EvalRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub updates: usize,
    /// Loss of every update, in order.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub best_update: Option<usize>,
    pub best_mean_tb: Option<f64>,
    pub stopped_early: bool,
    /// Optimizer state after the last update.
    pub optimizer: AdamState,
}

impl TrainReport {
    /// Mean loss over the first and last `k` updates.
    pub fn loss_trend(&self, k: usize) -> Option<(f64, f64)> {
        let k = k.min(self.losses.len());
        if k == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..k]), mean(&self.losses[self.losses.len() - k..])))
    }
}

/// Endless shuffled batches of one direction.
struct BatchStream {
    pairs: EncodedPairs,
    batches: Vec<PairBatch>,
    pos: usize,
    epoch: u64,
    seed: u64,
    batch_size: usize,
    max_len: usize,
}

impl BatchStream {
    fn new(pairs: EncodedPairs, seed: u64, batch_size: usize, max_len: usize) -> Result<Self> {
        let batches = make_batches(&pairs, batch_size, max_len, seed)?;
        Ok(BatchStream {
            pairs,
            batches,
            pos: 0,
            epoch: 0,
            seed,
            batch_size,
            max_len,
        })
    }

    fn next(&mut self) -> Result<&PairBatch> {
        if self.pos == self.batches.len() {
            self.epoch += 1;
            let seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            self.batches = make_batches(&self.pairs, self.batch_size, self.max_len, seed)?;
            self.pos = 0;
        }
        self.pos += 1;
        Ok(&self.batches[self.pos - 1])
    }
}

fn write_line<T: Serialize>(log: &mut Option<&mut dyn Write>, record: &T) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        let line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::invalid(format!("training log: {e}")))?;
    }
    Ok(())
}

fn evaluate_all(model: &MultiWayModel, dev: &[DevSet], update: usize) -> Result<EvalRecord> {
    let mut pairs = Vec::with_capacity(dev.len());
    for d in dev {
        pairs.push(PairEval {
            pair: d.label(),
            report: d.evaluate(model)?,
        });
    }
    let mean_tb = pairs.iter().map(|p| p.report.tb).sum::<f64>() / pairs.len() as f64;
    Ok(EvalRecord {
        update,
        mean_tb,
        improved: false,
        pairs,
    })
}

/// Train `model` on the given directions. Each update draws one batch from
/// one direction in round-robin order. With dev sets, training stops after
/// `patience` evaluations without improvement of the mean dev T-B and the
/// best evaluated parameters are restored.
pub fn train(
    model: &mut MultiWayModel,
    pairs: &[TrainPair],
    dev: &[DevSet],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training corpora given"));
    }
    let mut routes = Vec::with_capacity(pairs.len());
    let mut streams = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        if p.pairs.is_empty() {
            return Err(Error::invalid(format!("empty training corpus for {}", p.label())));
        }
        routes.push(model.path(&p.source, &p.target)?);
        let seed = cfg.seed ^ ((i as u64 + 1) << 40);
        streams.push(BatchStream::new(p.pairs.clone(), seed, cfg.batch_size, cfg.max_len)?);
    }
    for d in dev {
        model.path(&d.source, &d.target)?;
    }
    let mask: Vec<bool> = model.store().iter().map(|(_, name, _)| cfg.is_trainable(name)).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Config("trainable filter selects no parameter".into()));
    }
    let trainable_ids: Vec<ParamId> = model.store().ids().filter(|id| mask[id.0]).collect();
    let snapshot = |m: &MultiWayModel| -> Vec<Tensor> { trainable_ids.iter().map(|&id| m.store().get(id).clone()).collect() };
    let labels: Vec<String> = pairs.iter().map(TrainPair::label).collect();

    let mut adam = AdamState::default();
    let mut stop = EarlyStopState::new(cfg.patience);
    let mut best: Option<Vec<Tensor>> = None;
    let mut report = TrainReport {
        updates: 0,
        losses: Vec::new(),
        evals: Vec::new(),
        best_update: None,
        best_mean_tb: None,
        stopped_early: false,
        optimizer: AdamState::default(),
    };
    for update in 1..=cfg.max_updates {
        let k = (update - 1) % pairs.len();
        let batch = streams[k].next()?;
        let (loss, grads) = {
            let mut tape = Tape::with_trainable(model.store(), &mask);
            let loss = model.batch_loss(&mut tape, &routes[k], batch)?;
            let value = tape.value(loss).item();
            (value, tape.backward(loss)?)
        };
        let norm = global_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                loss,
                update,
                pair: labels[k].clone(),
            });
        }
        let grads = clip_gradients(grads, cfg.clip_norm)?;
        adam_step(
            model.store_mut(),
            &grads,
            &mut adam,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
        )?;
        report.updates = update;
        report.losses.push(loss);
        write_line(&mut log, &UpdateRecord {
            update,
            pair: &labels[k],
            loss,
        })?;

        let last = update == cfg.max_updates;
        if !dev.is_empty() && (update % cfg.eval_interval == 0 || last) {
            let mut record = evaluate_all(model, dev, update)?;
            let decision = stop.observe(record.mean_tb, update);
            record.improved = decision == EarlyStopDecision::Improved;
            if record.improved {
                best = Some(snapshot(model));
            }
            write_line(&mut log, &EvalLine {
                update,
                eval: &record,
            })?;
            report.evals.push(record);
            if decision == EarlyStopDecision::Stop {
                report.stopped_early = !last;
                break;
            }
        }
    }
    if let Some(best) = best {
        for (&id, t) in trainable_ids.iter().zip(best) {
            *model.store_mut().get_mut(id) = t;
        }
        report.best_update = stop.best_update;
        report.best_mean_tb = Some(stop.best_tb);
    }
    for p in pairs {
        model.mark_trained(&p.source, &p.target);
    }
    report.optimizer = adam;
    Ok(report)
}
