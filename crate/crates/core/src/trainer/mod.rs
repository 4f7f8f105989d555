//! Alternating adversarial training.
//!
//! Each outer round runs the discriminator phase (only the discriminator
//! learns, to recognize targets in filtered embeddings) and then the filter
//! phase (adapter, hypernetwork and classifier learn the synergic loss, which
//! ascends the frozen discriminator's loss). Exactly one phase's groups are
//! unfrozen at any time.

mod checkpoint;
mod model;
mod predict;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{Batch, LossVars, ModelState, TargetTable, TrainData};
pub use predict::{predict, PredictOutcome};

use crate::data::CorpusSplit;
use crate::embeddings::{build_indicators, WordVectorStore};
use crate::error::{Error, Result};
use crate::metrics::{build_report, ReportMetadata};
use crate::numerics::{AdamConfig, AdamState, Graph, ParamGroup};
use crate::objectives::{synergic, LossBundle, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    /// Rank `K` of the generated factors.
    pub rank: usize,
    /// Filter depth `L`.
    pub layers: usize,
    /// Hidden embedding width `d`.
    pub d: usize,
    /// Discriminator epochs per round (`N`).
    pub disc_epochs: usize,
    /// Filter epochs per round (`N′`).
    pub filter_epochs: usize,
    pub batch_size: usize,
    pub lr_discriminator: f64,
    pub lr_filter: f64,
    /// Hypernetwork step size within the filter phase. Adam moves every
    /// output weight of the generator by about `lr` per step, which shifts the
    /// generated factors far faster than the encoder or classifier.
    pub lr_hyper: f64,
    pub max_outer_rounds: usize,
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
    pub head_hidden: usize,
    pub hyper_hidden: usize,
    pub adapter_depth: usize,
    /// Hash record text into `text_hash_dim` buckets when no embedding is stored.
    pub text_fallback: bool,
    pub text_hash_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            gamma: 3.0,
            mu: 0.9,
            rank: 1,
            layers: 1,
            d: 256,
            disc_epochs: 1,
            filter_epochs: 5,
            batch_size: 128,
            lr_discriminator: 1e-3,
            lr_filter: 1e-3,
            lr_hyper: 3e-5,
            max_outer_rounds: 30,
            patience: 5,
            seed: 0,
            threshold: 0.5,
            head_hidden: 256,
            hyper_hidden: 128,
            adapter_depth: 1,
            text_fallback: false,
            text_hash_dim: 512,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            mu: self.mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let positive = [
            ("rank", self.rank),
            ("layers", self.layers),
            ("d", self.d),
            ("batch_size", self.batch_size),
            ("max_outer_rounds", self.max_outer_rounds),
            ("patience", self.patience),
            ("head_hidden", self.head_hidden),
            ("hyper_hidden", self.hyper_hidden),
            ("adapter_depth", self.adapter_depth),
            ("text_hash_dim", self.text_hash_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, lr) in [("lr_discriminator", self.lr_discriminator), ("lr_filter", self.lr_filter), ("lr_hyper", self.lr_hyper)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr} must be positive")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Discriminator,
    Filter,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Discriminator => "discriminator",
            Phase::Filter => "filter",
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub round: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub losses: LossBundle,
    pub synergic: f64,
}

/// Batch-averaged losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBundle,
    pub synergic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub nfped: f64,
    pub nfned: f64,
    pub hf: f64,
    /// `F1 − HF`, the early-stopping criterion.
    pub composite: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Round 0 is the untrained model.
    pub round: usize,
    pub validation: Option<ValidationScore>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    pub steps: Vec<StepLog>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best-validation snapshot (the final state when there is no validation data).
    pub model: ModelState,
    pub history: History,
    pub best_round: usize,
    pub stopped_early: bool,
}

/// Phase boundaries reported to a [`fit_observed`] observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseEvent {
    Start { round: usize, phase: Phase },
    End { round: usize, phase: Phase },
}

/// Mutable training state: parameters, per-phase optimizers, shuffle stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub config: TrainConfig,
    pub table: TargetTable,
    dis_opt: AdamState,
    enc_opt: AdamState,
    hyper_opt: AdamState,
    hate_opt: AdamState,
    rng: ChaCha8Rng,
    step: u64,
    round: usize,
}

const SHUFFLE_STREAM: u64 = 0x5_4ff1e;

impl TrainState {
    pub fn new(config: TrainConfig, table: TargetTable, input_dim: usize) -> Result<Self> {
        let model = ModelState::init(&config, input_dim, table.names.clone())?;
        Self::from_model(config, table, model)
    }

    pub fn from_model(config: TrainConfig, table: TargetTable, model: ModelState) -> Result<Self> {
        config.validate()?;
        if model.seen_targets() != table.names.as_slice() {
            return Err(Error::Contract("discriminator targets differ from the target table".into()));
        }
        let dis_cfg = config.adam(config.lr_discriminator);
        let filter_cfg = config.adam(config.lr_filter);
        Ok(Self {
            dis_opt: AdamState::new(&model.dis.group, dis_cfg),
            enc_opt: AdamState::new(&model.adapter.group, filter_cfg),
            hyper_opt: AdamState::new(&model.hyper.group, config.adam(config.lr_hyper)),
            hate_opt: AdamState::new(&model.hate.group, filter_cfg),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM),
            model,
            config,
            table,
            step: 0,
            round: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Freezes every group except those the phase trains.
    pub fn enter_phase(&mut self, phase: Phase) {
        let dis_trains = phase == Phase::Discriminator;
        self.model.dis.group.set_frozen(!dis_trains);
        self.model.adapter.group.set_frozen(dis_trains);
        self.model.hyper.group.set_frozen(dis_trains);
        self.model.hate.group.set_frozen(dis_trains);
    }

    fn check_phase(&self, phase: Phase) -> Result<()> {
        let dis_trains = phase == Phase::Discriminator;
        let m = &self.model;
        for (group, should_train) in [
            (&m.dis.group, dis_trains),
            (&m.adapter.group, !dis_trains),
            (&m.hyper.group, !dis_trains),
            (&m.hate.group, !dis_trains),
        ] {
            if group.is_frozen() == should_train {
                let state = if should_train { "frozen" } else { "unfrozen" };
                return Err(Error::Contract(format!(
                    "group `{}` is {state} during the {} phase",
                    group.name(),
                    phase.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Losses on a batch without updating anything.
    pub fn evaluate_batch(&self, batch: &Batch) -> Result<LossBundle> {
        let mut g = Graph::new();
        let vars = self.model.loss_graph(&mut g, batch, &self.table, &self.config.weights())?;
        Ok(vars.bundle(&g))
    }

    /// `epochs` passes over `data` updating only the discriminator.
    pub fn phase_discriminator(&mut self, data: &TrainData, epochs: usize) -> Result<Vec<StepLog>> {
        self.run_phase(Phase::Discriminator, data, epochs)
    }

    /// `epochs` passes over `data` updating adapter, hypernetwork and classifier.
    pub fn phase_filter(&mut self, data: &TrainData, epochs: usize) -> Result<Vec<StepLog>> {
        self.run_phase(Phase::Filter, data, epochs)
    }

    fn run_phase(&mut self, phase: Phase, data: &TrainData, epochs: usize) -> Result<Vec<StepLog>> {
        self.check_phase(phase)?;
        let mut logs = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch = data.batch(chunk)?;
                logs.push(self.train_step(phase, epoch, &batch)?);
            }
        }
        Ok(logs)
    }

    fn train_step(&mut self, phase: Phase, epoch: usize, batch: &Batch) -> Result<StepLog> {
        let weights = self.config.weights();
        let mut g = Graph::new();
        let vars = self.model.loss_graph(&mut g, batch, &self.table, &weights)?;
        let losses = vars.bundle(&g);
        let total = synergic(&losses, &weights)?;
        if !losses.is_finite() || !total.is_finite() {
            return Err(Error::Divergence(self.diagnose(phase, &g, &vars, &losses)));
        }
        let objective = match phase {
            Phase::Discriminator => vars.l_dis,
            Phase::Filter => vars.synergic,
        };
        let grads = g.backward(objective)?;
        let m = &mut self.model;
        match phase {
            Phase::Discriminator => step_group(&mut m.dis.group, &mut self.dis_opt, &grads)?,
            Phase::Filter => {
                step_group(&mut m.adapter.group, &mut self.enc_opt, &grads)?;
                step_group(&mut m.hyper.group, &mut self.hyper_opt, &grads)?;
                step_group(&mut m.hate.group, &mut self.hate_opt, &grads)?;
            }
        }
        if let Some(bad) = self.model.groups().iter().find(|g| g.tensors().iter().any(|t| !t.is_finite())) {
            return Err(Error::Divergence(format!(
                "non-finite parameters in `{}` after step {} ({} phase)",
                bad.name(),
                self.step,
                phase.as_str()
            )));
        }
        let log = StepLog {
            step: self.step,
            round: self.round,
            phase,
            epoch,
            losses,
            synergic: total,
        };
        self.step += 1;
        Ok(log)
    }

    fn diagnose(&self, phase: Phase, g: &Graph, vars: &LossVars, losses: &LossBundle) -> String {
        let stats = |name: &str, data: &[f64]| {
            let finite = data.iter().filter(|v| v.is_finite()).count();
            let max = data.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
            format!("{name}: {finite}/{} finite, max |x| {max:.4e}", data.len())
        };
        let mut out = format!(
            "non-finite loss at step {} (round {}, {} phase): {losses:?}",
            self.step,
            self.round,
            phase.as_str()
        );
        let _ = write!(out, "; {}", stats("s", g.value(vars.s).data()));
        let _ = write!(out, "; {}", stats("filtered s", g.value(vars.s_filtered).data()));
        out
    }
}

fn step_group(group: &mut ParamGroup, opt: &mut AdamState, grads: &crate::numerics::Gradients) -> Result<()> {
    group.accumulate(grads)?;
    opt.step(group)
}

fn epoch_records(round: usize, phase: Phase, logs: &[StepLog], epochs: usize) -> Vec<EpochRecord> {
    (0..epochs)
        .map(|epoch| {
            let steps: Vec<&StepLog> = logs.iter().filter(|l| l.epoch == epoch).collect();
            let n = steps.len().max(1) as f64;
            let sum = |f: fn(&LossBundle) -> f64| steps.iter().map(|l| f(&l.losses)).sum::<f64>() / n;
            EpochRecord {
                round,
                phase,
                epoch,
                steps: steps.len(),
                mean: LossBundle {
                    l_hate: sum(|b| b.l_hate),
                    l_dis: sum(|b| b.l_dis),
                    l_reg: sum(|b| b.l_reg),
                    l_imi: sum(|b| b.l_imi),
                },
                synergic: steps.iter().map(|l| l.synergic).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Accuracy, F1 and fairness of `model` on labelled records.
pub fn validation_score(
    model: &ModelState,
    records: &[crate::data::PostRecord],
    store: &WordVectorStore,
    threshold: f64,
) -> Result<ValidationScore> {
    let out = predict(model, records, store)?;
    let meta = ReportMetadata {
        split: "validation".into(),
        threshold,
        seed: 0,
        checkpoint_id: String::new(),
    };
    let r = build_report(&out.predictions, records, out.excluded, meta)?;
    Ok(ValidationScore {
        accuracy: r.accuracy,
        f1: r.f1,
        auc: r.auc,
        nfped: r.nfped,
        nfned: r.nfned,
        hf: r.hf,
        composite: r.f1 - r.hf,
    })
}

/// Input width of the records: the stored embedding length, else the text hash width.
pub fn infer_input_dim(config: &TrainConfig, split: &CorpusSplit) -> Result<usize> {
    let first = split.train.iter().chain(&split.validation).find_map(|r| r.embedding.as_ref());
    match first {
        Some(e) => Ok(e.len()),
        None if config.text_fallback => Ok(config.text_hash_dim),
        None => Err(Error::Data("no record carries an embedding and the text fallback is off".into())),
    }
}

pub fn fit(config: &TrainConfig, split: &CorpusSplit, seen_targets: &[String], store: &WordVectorStore) -> Result<FitOutcome> {
    fit_observed(config, split, seen_targets, store, &mut |_, _| {})
}

/// [`fit`] that reports every phase boundary with the model at that instant.
pub fn fit_observed(
    config: &TrainConfig,
    split: &CorpusSplit,
    seen_targets: &[String],
    store: &WordVectorStore,
    observer: &mut dyn FnMut(PhaseEvent, &ModelState),
) -> Result<FitOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let table = TargetTable::new(&build_indicators(seen_targets, store)?)?;
    let input_dim = infer_input_dim(config, split)?;
    let data = TrainData::new(&split.train, &table, input_dim, config.text_fallback)?;
    let mut state = TrainState::new(config.clone(), table, input_dim)?;

    let validate = |model: &ModelState| -> Result<Option<ValidationScore>> {
        if split.validation.is_empty() {
            return Ok(None);
        }
        validation_score(model, &split.validation, store, config.threshold).map(Some)
    };

    let mut history = History::default();
    history.rounds.push(RoundRecord {
        round: 0,
        validation: validate(&state.model)?,
    });
    let mut best: Option<(f64, ModelState, usize)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for round in 1..=config.max_outer_rounds {
        state.round = round;
        for (phase, epochs) in [
            (Phase::Discriminator, config.disc_epochs),
            (Phase::Filter, config.filter_epochs),
        ] {
            state.enter_phase(phase);
            observer(PhaseEvent::Start { round, phase }, &state.model);
            let logs = match phase {
                Phase::Discriminator => state.phase_discriminator(&data, epochs)?,
                Phase::Filter => state.phase_filter(&data, epochs)?,
            };
            observer(PhaseEvent::End { round, phase }, &state.model);
            history.epochs.extend(epoch_records(round, phase, &logs, epochs));
            history.steps.extend(logs);
        }

        let score = validate(&state.model)?;
        history.rounds.push(RoundRecord { round, validation: score });
        let Some(score) = score else { continue };
        log::info!(
            "round {round}: val acc {:.4} F1 {:.4} HF {:.4}",
            score.accuracy,
            score.f1,
            score.hf
        );
        if best.as_ref().is_none_or(|(c, _, _)| score.composite > *c) {
            best = Some((score.composite, state.model.clone(), round));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (mut model, best_round) = match best {
        Some((_, m, r)) => (m, r),
        None => (state.model, state.round),
    };
    model.unfreeze_all();
    Ok(FitOutcome {
        model,
        history,
        best_round,
        stopped_early,
    })
}
