//! The self-training loop: train, rank, adjudicate, retrain, validate.
//!
//! Round 0 trains on the labeled pools alone. Each later round takes the
//! `k` most confident unlabeled samples, asks the agents about them, moves
//! them into the agreed or disagreed pools and retrains with the PNU loss.
//! If dev Macro-F1 drops the round is reverted: parameters go back to the
//! pre-round values and the round's samples are discarded for good.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjudicator::{AdjudicationError, Adjudicator, Candidate, Outcome, Transcript};
use crate::classifier::{self, ClassifierError, ClassifierParams, DevSet, TrainSettings};
use crate::config::{Retrain, RunConfig};
use crate::data::{Dataset, Label, Split};
use crate::eval::{self, Metrics};
use crate::features::{FeatureError, FeatureMatrix};
use crate::loss::{LossBreakdown, LossConfig, TrainingPools};
use crate::persist::{Checkpoint, PersistError, RunDir, RunState};
use crate::pool::{init_pools, LabelState, PoolCounts, PoolError, PoolState};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("pools: {0}")]
    Pool(#[from] PoolError),
    #[error("training: {0}")]
    Classifier(#[from] ClassifierError),
    #[error("adjudication: {0}")]
    Adjudication(#[from] AdjudicationError),
    #[error("persistence: {0}")]
    Persist(#[from] PersistError),
    #[error("the {0} split has no gold-labeled samples")]
    EmptySplit(Split),
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("run directory belongs to a different configuration")]
    ConfigMismatch,
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovedCounts {
    pub agreed_positive: usize,
    pub agreed_negative: usize,
    pub disagreed: usize,
}

impl MovedCounts {
    pub fn total(&self) -> usize {
        self.agreed_positive + self.agreed_negative + self.disagreed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_number: u32,
    pub k_selected: usize,
    pub moved: MovedCounts,
    /// Samples sent to Discarded because the round was reverted.
    pub discarded: usize,
    pub pools: PoolCounts,
    pub dev_before: Option<Metrics>,
    pub dev_after: Metrics,
    pub accepted: bool,
    pub best_epoch: usize,
    pub loss: Option<LossBreakdown<f64>>,
    pub params_version: u64,
    /// Wall-clock seconds; kept out of the report file so reruns compare
    /// byte for byte. Written to `timings.tsv` instead.
    #[serde(skip)]
    pub duration_secs: f64,
}

/// An unlabeled sample ranked for adjudication.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate<T> {
    pub id: String,
    pub row: usize,
    pub probability: T,
    pub confidence: T,
    pub label: Label,
}

/// The `k` most confident unlabeled samples, confidence descending with ties
/// broken by id ascending.
pub fn select_top_k<T: Scalar>(
    params: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    dataset: &Dataset,
    pool: &PoolState,
    k: usize,
) -> Result<Vec<RankedCandidate<T>>, PipelineError> {
    let unlabeled = pool.ids(LabelState::Unlabeled);
    if unlabeled.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let mut ranked: Vec<RankedCandidate<T>> = unlabeled
        .iter()
        .map(|id| {
            let row = dataset
                .index_of(id)
                .ok_or_else(|| PoolError::UnknownSample(id.clone()))?;
            let p = params.proba_row(features.row(row));
            Ok(RankedCandidate {
                id: id.clone(),
                row,
                probability: p,
                confidence: classifier::confidence(p),
                label: classifier::hard_label(p),
            })
        })
        .collect::<Result<_, PoolError>>()?;
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Mutable state of a run between rounds.
#[derive(Debug, Clone)]
pub struct PipelineState<T> {
    pub pool: PoolState,
    pub params: ClassifierParams<T>,
    pub dev: Metrics,
    pub best: ClassifierParams<T>,
    pub best_dev: Metrics,
    pub best_round: u32,
    pub unlabeled_at_start: usize,
}

impl<T: Scalar> PipelineState<T> {
    pub fn rounds_expected(&self, k: usize) -> u32 {
        self.unlabeled_at_start.div_ceil(k) as u32
    }

    pub fn finished(&self) -> bool {
        self.pool.count(LabelState::Unlabeled) == 0
    }
}

/// Everything a round produces besides the state update.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub report: RoundReport,
    pub transcripts: Vec<Transcript>,
}

/// Dataset-bound context shared by every round of a run.
pub struct Pipeline<'a, T> {
    dataset: &'a Dataset,
    config: &'a RunConfig,
    features: FeatureMatrix<T>,
    dev: DevSet,
    test: DevSet,
    train_ids: Vec<String>,
    loss: LossConfig<T>,
}

fn labeled_split(dataset: &Dataset, split: Split) -> DevSet {
    let mut set = DevSet::default();
    for i in dataset.split_indices(split) {
        if let Some(g) = dataset.samples()[i].gold_label {
            set.rows.push(i);
            set.golds.push(g);
        }
    }
    set
}

fn to_f64_breakdown<T: Scalar>(b: &LossBreakdown<T>) -> LossBreakdown<f64> {
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    LossBreakdown {
        total: f(b.total),
        pn: f(b.pn),
        soft_pn: f(b.soft_pn),
        pu: f(b.pu),
        nu: f(b.nu),
        pu_negative_risk: f(b.pu_negative_risk),
        nu_positive_risk: f(b.nu_positive_risk),
        pu_clamped: b.pu_clamped,
        nu_clamped: b.nu_clamped,
    }
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    pub fn new(dataset: &'a Dataset, config: &'a RunConfig) -> Result<Self, PipelineError> {
        let features = FeatureMatrix::build(dataset, &config.features)?;
        let dev = labeled_split(dataset, Split::Dev);
        if dev.rows.is_empty() {
            return Err(PipelineError::EmptySplit(Split::Dev));
        }
        let l = &config.loss;
        let loss = LossConfig {
            gamma: T::lit(l.gamma),
            pi_p: T::lit(l.pi_p),
            y_hat_p: T::lit(l.y_hat_p),
            y_hat_n: T::lit(l.y_hat_n),
        };
        Ok(Pipeline {
            dataset,
            config,
            features,
            dev,
            test: labeled_split(dataset, Split::Test),
            train_ids: dataset.split_ids(Split::Train).into_iter().map(str::to_string).collect(),
            loss,
        })
    }

    pub fn features(&self) -> &FeatureMatrix<T> {
        &self.features
    }

    pub fn dev_set(&self) -> &DevSet {
        &self.dev
    }

    fn settings(&self) -> TrainSettings<T> {
        TrainSettings {
            epochs: self.config.epochs,
            learning_rate: T::lit(self.config.learning_rate),
        }
    }

    fn check_partition(&self, pool: &PoolState) -> Result<(), PipelineError> {
        pool.check_partition(self.train_ids.iter().map(String::as_str))?;
        Ok(())
    }

    pub fn evaluate_dev(&self, params: &ClassifierParams<T>) -> Metrics {
        self.dev.evaluate(params, &self.features).expect("dev split is non-empty")
    }

    /// Test-split metrics, when the test split has gold labels.
    pub fn evaluate_test(&self, params: &ClassifierParams<T>) -> Option<Metrics> {
        self.test.evaluate(params, &self.features)
    }

    /// Round 0: supervised training on the labeled pools with γ = 0.
    pub fn initial(&self) -> Result<(PipelineState<T>, RoundReport), PipelineError> {
        let started = Instant::now();
        let pool = init_pools(self.dataset, self.config.n_labeled, self.config.seed())?;
        self.check_partition(&pool)?;
        let pools = TrainingPools::gather(&pool, self.dataset).labeled_only();
        let init = ClassifierParams::zeros(self.features.dim());
        let loss = self.loss.with_gamma(T::zero());
        let outcome = classifier::train(&init, &self.features, &pools, &loss, self.settings(), &self.dev)?;
        let dev = self.evaluate_dev(&outcome.params);
        let report = RoundReport {
            round_number: 0,
            k_selected: 0,
            moved: MovedCounts::default(),
            discarded: 0,
            pools: pool.counts(),
            dev_before: None,
            dev_after: dev,
            accepted: true,
            best_epoch: outcome.best_epoch,
            loss: outcome.history.last().map(|r| to_f64_breakdown(&r.loss)),
            params_version: outcome.params.version,
            duration_secs: started.elapsed().as_secs_f64(),
        };
        let state = PipelineState {
            unlabeled_at_start: pool.count(LabelState::Unlabeled),
            pool,
            params: outcome.params.clone(),
            dev,
            best: outcome.params,
            best_dev: dev,
            best_round: 0,
        };
        Ok((state, report))
    }

    /// One adjudicate-and-retrain round. On error the state is unchanged.
    pub fn run_round(&self, state: &mut PipelineState<T>, adjudicator: &Adjudicator) -> Result<RoundOutput, PipelineError> {
        let started = Instant::now();
        let round = state.pool.round_number() + 1;
        let unlabeled_before = state.pool.count(LabelState::Unlabeled);

        let ranked = select_top_k(&state.params, &self.features, self.dataset, &state.pool, self.config.k)?;
        let samples = self.dataset.samples();
        let candidates: Vec<Candidate<'_>> = ranked
            .iter()
            .map(|r| Candidate {
                sample: &samples[r.row],
                label: r.label,
            })
            .collect();
        let transcripts = adjudicator.adjudicate_batch(&candidates, self.config.adjudicator.parallelism)?;

        let mut pool = state.pool.clone();
        pool.set_round_number(round);
        let mut moved = MovedCounts::default();
        for t in &transcripts {
            let to = match t.outcome {
                Outcome::AgreedPositive => {
                    moved.agreed_positive += 1;
                    LabelState::AgreedUnknownPositive
                }
                Outcome::AgreedNegative => {
                    moved.agreed_negative += 1;
                    LabelState::AgreedUnknownNegative
                }
                Outcome::Disagreed => {
                    moved.disagreed += 1;
                    LabelState::DisagreedUnknown
                }
            };
            pool.transition(&t.sample_id, to)?;
        }
        self.check_partition(&pool)?;

        let pools = TrainingPools::gather(&pool, self.dataset);
        let init = match self.config.retrain {
            Retrain::WarmStart => state.params.clone(),
            Retrain::Scratch => ClassifierParams {
                version: state.params.version,
                ..ClassifierParams::zeros(self.features.dim())
            },
        };
        let outcome = classifier::train(&init, &self.features, &pools, &self.loss, self.settings(), &self.dev)?;
        let dev_after = self.evaluate_dev(&outcome.params);
        let accepted = self.config.acceptance.accepts(dev_after.macro_f1, state.dev.macro_f1);

        let mut discarded = 0;
        if !accepted {
            for t in &transcripts {
                pool.transition(&t.sample_id, LabelState::Discarded)?;
                discarded += 1;
            }
            self.check_partition(&pool)?;
        }

        let unlabeled_after = pool.count(LabelState::Unlabeled);
        if unlabeled_before - unlabeled_after != self.config.k.min(unlabeled_before) {
            return Err(PipelineError::Invariant(format!(
                "round {round}: unlabeled pool went from {unlabeled_before} to {unlabeled_after} with k = {}",
                self.config.k
            )));
        }
        if moved.total() != ranked.len() {
            return Err(PipelineError::Invariant(format!(
                "round {round}: moved {} of {} selected samples",
                moved.total(),
                ranked.len()
            )));
        }

        let report = RoundReport {
            round_number: round,
            k_selected: ranked.len(),
            moved,
            discarded,
            pools: pool.counts(),
            dev_before: Some(state.dev),
            dev_after,
            accepted,
            best_epoch: outcome.best_epoch,
            loss: outcome.history.last().map(|r| to_f64_breakdown(&r.loss)),
            params_version: if accepted { outcome.params.version } else { state.params.version },
            duration_secs: started.elapsed().as_secs_f64(),
        };

        state.pool = pool;
        if accepted {
            state.params = outcome.params;
            state.dev = dev_after;
            if dev_after.macro_f1 >= state.best_dev.macro_f1 {
                state.best = state.params.clone();
                state.best_dev = dev_after;
                state.best_round = round;
            }
        }
        Ok(RoundOutput { report, transcripts })
    }

    fn checkpoint(&self, params: &ClassifierParams<T>) -> Checkpoint<T> {
        Checkpoint::new(params, self.config.hash(), self.config.features.clone())
    }

    fn run_state(&self, state: &PipelineState<T>) -> RunState {
        RunState {
            config_hash: self.config.hash(),
            completed_round: state.pool.round_number(),
            unlabeled_at_start: state.unlabeled_at_start,
            best_dev_macro_f1: state.best_dev.macro_f1,
            best_round: state.best_round,
            finished: state.finished(),
        }
    }

    fn persist(&self, run_dir: &RunDir, state: &PipelineState<T>, report: &RoundReport) -> Result<(), PersistError> {
        crate::persist::persist_run_state(run_dir, &state.pool, &self.checkpoint(&state.params), report)?;
        if state.best_round == state.pool.round_number() {
            run_dir.save_best(&self.checkpoint(&state.best))?;
        }
        run_dir.append_timing(report.round_number, report.duration_secs)?;
        run_dir.save_state(&self.run_state(state))
    }

    /// Rebuilds the state after the last completed round of `run_dir`.
    pub fn resume_state(&self, run_dir: &RunDir) -> Result<PipelineState<T>, PipelineError> {
        let saved = run_dir.load_state()?;
        if saved.config_hash != self.config.hash() {
            return Err(PipelineError::ConfigMismatch);
        }
        let pool = run_dir.load_pool(saved.completed_round)?;
        self.check_partition(&pool)?;
        let params = run_dir.load_checkpoint::<T>(saved.completed_round)?.params();
        let best = run_dir.load_best::<T>()?.params();
        Ok(PipelineState {
            pool,
            dev: self.evaluate_dev(&params),
            params,
            best_dev: self.evaluate_dev(&best),
            best,
            best_round: saved.best_round,
            unlabeled_at_start: saved.unlabeled_at_start,
        })
    }
}

/// Result of a full self-training run.
#[derive(Debug, Clone)]
pub struct SelfTrainingResult<T> {
    /// Best-dev parameters over all accepted rounds.
    pub params: ClassifierParams<T>,
    pub dev: Metrics,
    pub test: Option<Metrics>,
    pub best_round: u32,
    pub reports: Vec<RoundReport>,
    pub transcripts: Vec<(u32, Vec<Transcript>)>,
}

/// Called after every completed round (round 0 included).
pub type RoundHook<'h> = dyn FnMut(&RoundReport) + 'h;

/// Runs (or, with `resume`, continues) self-training until the unlabeled
/// pool is empty. With a run directory every round is persisted.
pub fn run_self_training<T: Scalar>(
    dataset: &Dataset,
    config: &RunConfig,
    adjudicator: &Adjudicator,
    run_dir: Option<&RunDir>,
    resume: bool,
    on_round: &mut RoundHook<'_>,
) -> Result<SelfTrainingResult<T>, PipelineError> {
    let pipeline = Pipeline::<T>::new(dataset, config)?;
    let mut reports = Vec::new();
    let mut transcripts = Vec::new();

    let mut state = match (run_dir, resume) {
        (Some(dir), true) => {
            let state = pipeline.resume_state(dir)?;
            for r in dir.report_rounds()? {
                if r <= state.pool.round_number() {
                    reports.push(dir.read_report(r)?);
                    if r > 0 {
                        transcripts.push((r, dir.read_transcripts(r)?));
                    }
                }
            }
            tracing::info!(round = state.pool.round_number(), "resuming run");
            state
        }
        _ => {
            let (state, report) = pipeline.initial()?;
            if let Some(dir) = run_dir {
                dir.write_config(config)?;
                pipeline.persist(dir, &state, &report)?;
            }
            on_round(&report);
            reports.push(report);
            state
        }
    };

    let expected = state.rounds_expected(config.k);
    while !state.finished() {
        let out = pipeline.run_round(&mut state, adjudicator)?;
        if let Some(dir) = run_dir {
            dir.write_transcripts(out.report.round_number, &out.transcripts)?;
            pipeline.persist(dir, &state, &out.report)?;
        }
        on_round(&out.report);
        reports.push(out.report);
        transcripts.push((state.pool.round_number(), out.transcripts));
    }
    if state.pool.round_number() != expected {
        return Err(PipelineError::Invariant(format!(
            "finished after {} rounds, expected {expected}",
            state.pool.round_number()
        )));
    }
    check_monotone(&reports)?;

    if let Some(dir) = run_dir {
        let golds = train_golds(dataset);
        let series = eval::pseudo_label_quality(transcripts.iter().map(|(r, t)| (*r, t.as_slice())), &golds);
        eval::write_quality_tsv(&dir.quality_path(), &series).map_err(|source| PersistError::Io {
            path: dir.quality_path(),
            source,
        })?;
    }

    Ok(SelfTrainingResult {
        test: pipeline.evaluate_test(&state.best),
        dev: state.best_dev,
        params: state.best,
        best_round: state.best_round,
        reports,
        transcripts,
    })
}

/// Accepted rounds never lower dev Macro-F1 under either acceptance rule.
fn check_monotone(reports: &[RoundReport]) -> Result<(), PipelineError> {
    let mut last = f64::NEG_INFINITY;
    for r in reports.iter().filter(|r| r.accepted) {
        if r.dev_after.macro_f1 < last {
            return Err(PipelineError::Invariant(format!(
                "accepted dev Macro-F1 fell to {} in round {}",
                r.dev_after.macro_f1, r.round_number
            )));
        }
        last = r.dev_after.macro_f1;
    }
    Ok(())
}

/// Gold labels of the training split, keyed by id.
pub fn train_golds(dataset: &Dataset) -> HashMap<String, Label> {
    dataset
        .samples()
        .iter()
        .filter(|s| s.split == Split::Train)
        .filter_map(|s| s.gold_label.map(|g| (s.id.clone(), g)))
        .collect()
}

/// Result of the supervised-only baseline.
#[derive(Debug, Clone)]
pub struct SupervisedResult<T> {
    pub params: ClassifierParams<T>,
    pub dev: Metrics,
    pub test: Option<Metrics>,
    pub report: RoundReport,
}

/// The SupOnly baseline: round 0 of self-training and nothing else.
pub fn run_supervised_only<T: Scalar>(dataset: &Dataset, config: &RunConfig) -> Result<SupervisedResult<T>, PipelineError> {
    let pipeline = Pipeline::<T>::new(dataset, config)?;
    let (state, report) = pipeline.initial()?;
    Ok(SupervisedResult {
        test: pipeline.evaluate_test(&state.params),
        dev: state.dev,
        params: state.params,
        report,
    })
}
