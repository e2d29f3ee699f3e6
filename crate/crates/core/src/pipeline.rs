//! End-to-end orchestration: split, neighbor index, training, evaluation
//! and the neighbor-count sweep.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{candidate_pools, evaluate, CandidatePool, EvalReport};
use crate::interaction::{chrono_split, ChronoSplit, InteractionLog, ItemId, UserId};
use crate::model::{ModelConfig, ModelParams};
use crate::network::{build_neighbor_index, NeighborIndex};
use crate::rng::{stream_rng, Stream};
use crate::scoring::{build_contexts, check_no_leakage, recommend, DmrScorer, UserContext};
use crate::synth::PopularityScorer;
use crate::training::{train, AdamState, EpochStats, TrainingSet};

/// Everything derived from a log before any parameter is touched.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub full: InteractionLog,
    pub split: ChronoSplit,
    pub index: NeighborIndex,
    pub set: TrainingSet,
    pub pools: Vec<CandidatePool>,
    pub model: ModelConfig,
}

/// Splits the log, builds the neighbor index over the training part only,
/// extracts every user's context and checks that nothing past a user's
/// test boundary was read.
pub fn prepare(full: InteractionLog, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let split = chrono_split(&full, cfg.split_fraction)?;
    if split.train.is_empty() {
        return Err(Error::Data(
            "no user has enough interactions to split".into(),
        ));
    }
    let index = build_neighbor_index(&split.train, &cfg.network)?;
    prepare_with_index(full, split, index, cfg)
}

pub fn prepare_with_index(
    full: InteractionLog,
    split: ChronoSplit,
    index: NeighborIndex,
    cfg: &RunConfig,
) -> Result<Prepared> {
    let contexts = build_contexts(&split.train, &index, cfg.future_cap)?;
    check_no_leakage(&split, &contexts)?;
    let pools = candidate_pools(&full, &split, &cfg.eval);
    let mut model = cfg.model;
    model.time_scale = cfg
        .time_scale
        .unwrap_or_else(|| split.train.time_span().max(1) as f64);
    model.validate()?;
    let set = TrainingSet::new(contexts, split.train.items().collect());
    Ok(Prepared {
        full,
        split,
        index,
        set,
        pools,
        model,
    })
}

impl Prepared {
    pub fn context(&self, user: UserId) -> Option<&UserContext> {
        self.set.contexts.iter().find(|c| c.user == user)
    }

    /// Fresh parameters from the seed's init stream, sized for every item
    /// id in the full log.
    pub fn init_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let params = ModelParams::init(
            self.model,
            self.full.item_table_size(),
            &mut stream_rng(seed, Stream::Init, 0),
        )?;
        let adam = AdamState::new(&params);
        Ok(Checkpoint {
            params,
            adam,
            epochs_done: 0,
        })
    }

    pub fn evaluate(&self, params: &ModelParams, cfg: &RunConfig) -> Result<EvalReport> {
        let scorer = DmrScorer::new(params, &self.set.contexts)?;
        evaluate(&scorer, &self.pools, self.full.categories(), &cfg.eval)
    }

    pub fn evaluate_popularity(&self, cfg: &RunConfig) -> Result<EvalReport> {
        let scorer = PopularityScorer::new(&self.split.train);
        evaluate(&scorer, &self.pools, self.full.categories(), &cfg.eval)
    }

    /// Top `n` items the user has not interacted with in training.
    pub fn recommend(
        &self,
        params: &ModelParams,
        user: UserId,
        n: usize,
    ) -> Result<Vec<(ItemId, f64)>> {
        let ctx = self
            .context(user)
            .ok_or_else(|| Error::Data(format!("user {user} has no training history")))?;
        recommend(params, ctx, self.full.items(), n)
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stats: EpochStats,
    pub validation: Option<EvalReport>,
}

/// Trains `checkpoint` until `cfg.train.epochs` epochs are done in total,
/// resuming from `checkpoint.epochs_done`.
pub fn train_to(
    prepared: &Prepared,
    checkpoint: &mut Checkpoint,
    cfg: &RunConfig,
) -> Result<Vec<TraceRow>> {
    if checkpoint.params.config != prepared.model {
        return Err(Error::InvalidArgument(
            "checkpoint model settings differ from the run config".into(),
        ));
    }
    if checkpoint.params.num_items() != prepared.full.item_table_size() {
        return Err(Error::DimensionMismatch {
            expected: prepared.full.item_table_size(),
            actual: checkpoint.params.num_items(),
        });
    }
    let mut rows = Vec::new();
    let start = checkpoint.epochs_done;
    let end = cfg.train.epochs.max(start);
    if cfg.validate_each_epoch {
        for epoch in start..end {
            let stats = train(
                &prepared.set,
                &mut checkpoint.params,
                &mut checkpoint.adam,
                &cfg.train,
                epoch..epoch + 1,
            )?;
            checkpoint.epochs_done = epoch + 1;
            let validation = Some(prepared.evaluate(&checkpoint.params, cfg)?);
            rows.extend(stats.into_iter().map(|stats| TraceRow {
                stats,
                validation: validation.clone(),
            }));
        }
    } else {
        let stats = train(
            &prepared.set,
            &mut checkpoint.params,
            &mut checkpoint.adam,
            &cfg.train,
            start..end,
        )?;
        checkpoint.epochs_done = end;
        rows.extend(stats.into_iter().map(|stats| TraceRow {
            stats,
            validation: None,
        }));
    }
    Ok(rows)
}

pub fn trace_table(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,loss,samples,steps,val_auc,val_precision,val_recall\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{:.9},{},{}",
            r.stats.epoch, r.stats.loss, r.stats.samples, r.stats.steps
        );
        match &r.validation {
            Some(v) => {
                let _ = writeln!(out, ",{:.6},{:.6},{:.6}", v.auc, v.precision, v.recall);
            }
            None => out.push_str(",,,\n"),
        }
    }
    out
}

pub const SWEEP_NEIGHBOR_COUNTS: [usize; 3] = [5, 20, 50];

/// Trains and evaluates one model per neighbor count, everything else fixed.
pub fn sweep(
    full: &InteractionLog,
    cfg: &RunConfig,
    neighbor_counts: &[usize],
) -> Result<Vec<(String, EvalReport)>> {
    let mut rows = Vec::with_capacity(neighbor_counts.len());
    for &n in neighbor_counts {
        let mut run = cfg.clone();
        run.network.max_neighbors = n;
        run.network.candidate_cap = run.network.candidate_cap.max(n);
        let prepared = prepare(full.clone(), &run)?;
        let mut ck = prepared.init_checkpoint(run.seed)?;
        train_to(&prepared, &mut ck, &run)?;
        rows.push((
            format!("neighbors={n}"),
            prepared.evaluate(&ck.params, &run)?,
        ));
    }
    Ok(rows)
}
