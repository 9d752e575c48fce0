//! Competitive co-training of tracker and opponent.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arena::Role;
use crate::bench::EpisodeSpec;
use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{Error, Result};
use crate::grpo::{
    apply_update, collect_iteration, member_seeds, require_phase, rollout_group, GroupBatch, GrpoConfig,
    IterationDiagnostics, OpponentSource,
};
use crate::io::FileHeader;
use crate::optim::AdamState;
use crate::policy::PolicyParams;
use crate::rewards::RewardConfig;
use crate::rollout::{require_opponent, Actor, EpisodeContext};
use crate::seeds::derive_seed;

/// Opponent used during one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStage {
    Static,
    Random,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarlConfig {
    pub tracker: GrpoConfig,
    pub opponent: GrpoConfig,
    pub rounds: usize,
    pub iterations_per_round: usize,
    /// Co-train the opponent; when false it stays at the BC checkpoint and acts with its mean.
    pub opponent_update: bool,
    /// Stage of round `r` is `curriculum[r]`; later rounds use the learned opponent.
    pub curriculum: Vec<CurriculumStage>,
    pub random_speed_m: f64,
    pub random_resample_every: u32,
}

impl Default for MarlConfig {
    fn default() -> Self {
        Self {
            tracker: GrpoConfig::default(),
            opponent: GrpoConfig::default(),
            rounds: 4,
            iterations_per_round: 25,
            opponent_update: true,
            curriculum: Vec::new(),
            random_speed_m: 0.2,
            random_resample_every: 10,
        }
    }
}

impl MarlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("marl.rounds must be >= 1".into()));
        }
        if self.random_resample_every == 0 {
            return Err(Error::Config("marl.random_resample_every must be >= 1".into()));
        }
        self.tracker.validate()?;
        self.opponent.validate()?;
        if self.tracker.group_size != self.opponent.group_size
            || self.tracker.t_group != self.opponent.t_group
            || self.tracker.segments_per_iteration != self.opponent.segments_per_iteration
        {
            return Err(Error::Config(
                "marl: tracker and opponent must share group_size, t_group and segments_per_iteration".into(),
            ));
        }
        Ok(())
    }

    pub fn stage(&self, round: usize) -> CurriculumStage {
        self.curriculum.get(round).copied().unwrap_or(CurriculumStage::Learned)
    }
}

/// Both agents sample from their policies on the same `G` joint trajectories.
pub fn joint_rollout(
    start: &EpisodeContext,
    tracker: &PolicyParams,
    opponent: &PolicyParams,
    rewards: &RewardConfig,
    cfg: &GrpoConfig,
    seed: u64,
    context_id: u64,
) -> Result<(GroupBatch, GroupBatch)> {
    require_opponent(&start.state)?;
    let g = rollout_group(
        start,
        &Actor::Sampled(tracker),
        &Actor::Sampled(opponent),
        rewards,
        cfg,
        &member_seeds(seed, cfg.group_size),
        context_id,
    )?;
    Ok((
        g.tracker.expect("sampled tracker yields a batch"),
        g.opponent.expect("sampled opponent yields a batch"),
    ))
}

pub struct MarlOutcome {
    pub tracker: Checkpoint,
    pub opponent: Checkpoint,
    /// Tracker and opponent records interleaved per iteration.
    pub diagnostics: Vec<IterationDiagnostics>,
}

/// Rounds of simultaneous updates; each iteration collects joint rollouts
/// with both current policies frozen, then updates each agent on its own batch
/// against its own BC reference.
pub fn train_multi_agent(
    bc: &Checkpoint,
    suite: &[EpisodeSpec],
    rewards: &RewardConfig,
    cfg: &MarlConfig,
    seed: u64,
    header: FileHeader,
) -> Result<MarlOutcome> {
    cfg.validate()?;
    rewards.validate()?;
    let reference = require_phase(bc, Phase::Bc)?;
    if suite.iter().any(|e| e.arena.opponent_spawn.is_none()) {
        return Err(Error::Usage("multi-agent training needs every suite episode to have an opponent".into()));
    }
    let mut trk = reference.clone();
    let mut opp = reference.clone();
    let mut opt_t = AdamState::new(trk.data.len());
    let mut opt_o = AdamState::new(opp.data.len());
    let mut diagnostics = Vec::new();
    let mut it = 0usize;
    for round in 0..cfg.rounds {
        let stage = cfg.stage(round);
        for _ in 0..cfg.iterations_per_round {
            let started = Instant::now();
            let wrap = |e: Error| match e {
                Error::Training(m) => Error::Training(format!("round {round} iteration {it}: {m}")),
                other => other,
            };
            let learning = stage == CurriculumStage::Learned && cfg.opponent_update;
            let source = match stage {
                CurriculumStage::Static => OpponentSource::Static,
                CurriculumStage::Random => OpponentSource::Random {
                    speed_m: cfg.random_speed_m,
                    resample_every: cfg.random_resample_every,
                },
                CurriculumStage::Learned => OpponentSource::Policy { params: &opp, learning },
            };
            let (tb, ob) = collect_iteration(suite, &trk, source, rewards, &cfg.tracker, derive_seed(seed, &[it as u64]))
                .map_err(wrap)?;
            let (next_t, dt) =
                apply_update(&trk, &reference, &tb, &mut opt_t, &cfg.tracker, Role::Tracker, round, it, started)
                    .map_err(wrap)?;
            diagnostics.push(dt);
            if learning {
                let (next_o, d_o) =
                    apply_update(&opp, &reference, &ob, &mut opt_o, &cfg.opponent, Role::Opponent, round, it, started)
                        .map_err(wrap)?;
                opp = next_o;
                diagnostics.push(d_o);
            }
            trk = next_t;
            it += 1;
        }
    }
    Ok(MarlOutcome {
        tracker: Checkpoint::new(&trk, Phase::MultiRl, header.clone()),
        opponent: Checkpoint::new(&opp, Phase::MultiRlOpponent, header),
        diagnostics,
    })
}
