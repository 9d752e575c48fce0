//! End-to-end stages driven by a [`RunConfig`], plus the on-disk formats that
//! connect them: demo datasets, suite manifests and diagnostics logs.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bc::{collect_demos, train_bc, BcReport, Demo};
use crate::bench::{
    evaluate, generate_arena, generate_arenas, generate_suite, BehaviorKind, EpisodeSpec, MetricsReport, OpponentPolicies,
};
use crate::checkpoint::{Checkpoint, Phase};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grpo::{train_single_agent, DiagnosticsHeader, IterationDiagnostics, TrainOutcome};
use crate::io::{json_hash, jsonl_bytes, write_atomic, write_json, FileHeader};
use crate::marl::{train_multi_agent, MarlOutcome};
use crate::policy::{PolicyParams, OBS_LAYOUT_VERSION};
use crate::seeds::{derive_seed, rng_from};

pub const DEMOS_FORMAT: &str = "trackarena.demos";
pub const DEMOS_SCHEMA_VERSION: u32 = 1;
pub const SUITE_FORMAT: &str = "trackarena.suite";
pub const RECORDS_FORMAT: &str = "trackarena.records";
pub const REPORT_FORMAT: &str = "trackarena.report";

/// Key under which training suites reference the BC checkpoint as opponent.
pub const BC_OPPONENT_KEY: &str = "bc";

/// Independent seed streams for each pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    DemoArenas = 1,
    DemoArenasWithOpponent = 2,
    DemoNoise = 3,
    PolicyInit = 4,
    BcShuffle = 5,
    TrainSuite = 6,
    SingleRl = 7,
    MultiRl = 8,
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    derive_seed(seed, &[stage as u64])
}

pub fn file_header(cfg: &RunConfig) -> Result<FileHeader> {
    Ok(FileHeader::new(cfg.hash()?, cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoFileHeader {
    pub format: String,
    pub schema_version: u32,
    pub obs_layout_version: u32,
    pub header: FileHeader,
    pub episodes: usize,
    pub demos: usize,
}

pub struct DemoSet {
    pub episodes: usize,
    pub demos: Vec<Demo>,
}

/// Expert rollouts on open arenas and on arenas with a still opponent.
pub fn collect(cfg: &RunConfig) -> Result<DemoSet> {
    let b = &cfg.bc;
    let mut arenas = generate_arenas(&cfg.arena, stage_seed(cfg.seed, Stage::DemoArenas), b.demo_arenas)?;
    let opp_seed = stage_seed(cfg.seed, Stage::DemoArenasWithOpponent);
    for i in 0..b.demo_arenas_with_opponent {
        arenas.push(generate_arena(&cfg.arena, opp_seed, i, true)?);
    }
    let demos = collect_demos(&arenas, b.episodes_per_arena, &cfg.expert, stage_seed(cfg.seed, Stage::DemoNoise))?;
    Ok(DemoSet {
        episodes: arenas.len() * b.episodes_per_arena,
        demos,
    })
}

pub fn demo_bytes(set: &DemoSet, header: FileHeader) -> Result<Vec<u8>> {
    let h = DemoFileHeader {
        format: DEMOS_FORMAT.into(),
        schema_version: DEMOS_SCHEMA_VERSION,
        obs_layout_version: OBS_LAYOUT_VERSION,
        header,
        episodes: set.episodes,
        demos: set.demos.len(),
    };
    jsonl_bytes(&h, &set.demos)
}

pub fn save_demos(path: &Path, set: &DemoSet, header: FileHeader) -> Result<()> {
    write_atomic(path, &demo_bytes(set, header)?)
}

pub fn load_demos(path: &Path) -> Result<(DemoFileHeader, Vec<Demo>)> {
    let (header, demos): (DemoFileHeader, Vec<Demo>) = read_jsonl(path)?;
    if header.format != DEMOS_FORMAT || header.schema_version != DEMOS_SCHEMA_VERSION {
        return Err(Error::Load(format!("{}: not a version {DEMOS_SCHEMA_VERSION} demo dataset", path.display())));
    }
    if header.obs_layout_version != OBS_LAYOUT_VERSION {
        return Err(Error::Load(format!(
            "{}: observation layout {} does not match {OBS_LAYOUT_VERSION}",
            path.display(),
            header.obs_layout_version
        )));
    }
    if header.demos != demos.len() {
        return Err(Error::Load(format!(
            "{}: header announces {} demos, found {}",
            path.display(),
            header.demos,
            demos.len()
        )));
    }
    Ok((header, demos))
}

/// Reads a header line and records, reporting the 1-based line of any bad line.
pub fn read_jsonl<H, R>(path: &Path) -> Result<(H, Vec<R>)>
where
    H: serde::de::DeserializeOwned,
    R: serde::de::DeserializeOwned,
{
    let file = std::fs::File::open(path).map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let bad = |n: usize, e: &dyn std::fmt::Display| Error::Input(format!("{} line {n}: {e}", path.display()));
    let first = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))?
        .map_err(|e| bad(1, &e))?;
    let header: H = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| bad(n, &e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| bad(n, &e))?);
    }
    Ok((header, records))
}

pub fn init_params(cfg: &RunConfig) -> PolicyParams {
    PolicyParams::init(
        &cfg.policy.hidden,
        cfg.policy.init_log_std,
        &mut rng_from(stage_seed(cfg.seed, Stage::PolicyInit), &[]),
    )
}

/// Behavior cloning from `init` (a fresh policy when absent).
pub fn run_bc(cfg: &RunConfig, demos: &[Demo], init: Option<&PolicyParams>) -> Result<(Checkpoint, BcReport)> {
    let start = match init {
        Some(p) => p.clone(),
        None => init_params(cfg),
    };
    let (params, report) = train_bc(&start, demos, &cfg.bc.training(), stage_seed(cfg.seed, Stage::BcShuffle))?;
    Ok((Checkpoint::new(&params, Phase::Bc, file_header(cfg)?), report))
}

/// Episodes the RL phases start from. Competitive episodes reference the BC
/// checkpoint under [`BC_OPPONENT_KEY`].
pub fn training_suite(cfg: &RunConfig, kind: BehaviorKind) -> Result<Vec<EpisodeSpec>> {
    generate_suite(
        stage_seed(cfg.seed, Stage::TrainSuite),
        cfg.train_suite.count,
        kind,
        &cfg.arena,
        (kind == BehaviorKind::Competitive).then_some(BC_OPPONENT_KEY),
    )
}

pub fn bc_opponent(bc: &Checkpoint) -> Result<OpponentPolicies> {
    let mut p = BTreeMap::new();
    p.insert(BC_OPPONENT_KEY.to_string(), Arc::new(bc.params()?));
    Ok(p)
}

/// Single-agent GRPO against `kind` opponents.
pub fn run_single(cfg: &RunConfig, bc: &Checkpoint, kind: BehaviorKind) -> Result<TrainOutcome> {
    let suite = training_suite(cfg, kind)?;
    train_single_agent(
        bc,
        &suite,
        &bc_opponent(bc)?,
        &cfg.rewards,
        &cfg.grpo,
        stage_seed(cfg.seed, Stage::SingleRl),
        file_header(cfg)?,
    )
}

pub fn run_multi(cfg: &RunConfig, bc: &Checkpoint) -> Result<MarlOutcome> {
    let suite = training_suite(cfg, BehaviorKind::Static)?;
    train_multi_agent(
        bc,
        &suite,
        &cfg.rewards,
        &cfg.marl,
        stage_seed(cfg.seed, Stage::MultiRl),
        file_header(cfg)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    pub format: String,
    pub schema_version: u32,
    pub header: FileHeader,
    pub suite_seed: u64,
    pub behavior: BehaviorKind,
    pub count: u32,
    pub episodes: Vec<EpisodeSpec>,
}

impl SuiteManifest {
    pub fn new(header: FileHeader, suite_seed: u64, behavior: BehaviorKind, episodes: Vec<EpisodeSpec>) -> Self {
        Self {
            format: SUITE_FORMAT.into(),
            schema_version: crate::bench::SUITE_SCHEMA_VERSION,
            header,
            suite_seed,
            behavior,
            count: episodes.len() as u32,
            episodes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
        let m: SuiteManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("{} is not a suite manifest: {e}", path.display())))?;
        if m.format != SUITE_FORMAT || m.schema_version != crate::bench::SUITE_SCHEMA_VERSION {
            return Err(Error::Load(format!("{}: unsupported suite format", path.display())));
        }
        if m.count as usize != m.episodes.len() {
            return Err(Error::Load(format!("{}: count does not match episodes", path.display())));
        }
        Ok(m)
    }

    /// Distinct competitive checkpoint references.
    pub fn checkpoint_refs(&self) -> Vec<String> {
        let mut refs: Vec<String> = self
            .episodes
            .iter()
            .filter_map(|e| e.opponent.as_ref().and_then(|o| o.checkpoint.clone()))
            .collect();
        refs.sort();
        refs.dedup();
        refs
    }
}

/// Metrics report file: the report plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub format: String,
    pub header: FileHeader,
    pub suite_hash: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordsHeader {
    pub format: String,
    pub header: FileHeader,
    pub suite_hash: String,
}

pub struct Evaluation {
    pub report: ReportFile,
    pub records_bytes: Vec<u8>,
}

/// Evaluates a tracker checkpoint on a suite whose competitive references are
/// checkpoint paths, relative to `base_dir` when not absolute.
pub fn evaluate_manifest(
    cfg: &RunConfig,
    tracker: &Checkpoint,
    suite: &SuiteManifest,
    base_dir: &Path,
) -> Result<Evaluation> {
    let mut policies = OpponentPolicies::new();
    for r in suite.checkpoint_refs() {
        let path = base_dir.join(&r);
        let ck = Checkpoint::load(&path)?;
        policies.insert(r, Arc::new(ck.params()?));
    }
    let (mut metrics, records) = evaluate(&tracker.params()?, &suite.episodes, &policies, &cfg.rewards, &cfg.bench.eval)?;
    metrics.checkpoint_hash = Some(tracker.hash()?);
    let header = file_header(cfg)?;
    let suite_hash = json_hash(suite)?;
    let records_bytes = jsonl_bytes(
        &RecordsHeader {
            format: RECORDS_FORMAT.into(),
            header: header.clone(),
            suite_hash: suite_hash.clone(),
        },
        &records,
    )?;
    Ok(Evaluation {
        report: ReportFile {
            format: REPORT_FORMAT.into(),
            header,
            suite_hash,
            metrics,
        },
        records_bytes,
    })
}

pub fn diagnostics_bytes(header: FileHeader, records: &[IterationDiagnostics]) -> Result<Vec<u8>> {
    jsonl_bytes(&DiagnosticsHeader::new(header), records)
}

pub fn load_diagnostics(path: &Path) -> Result<(DiagnosticsHeader, Vec<IterationDiagnostics>)> {
    let (h, records): (DiagnosticsHeader, Vec<IterationDiagnostics>) = read_jsonl(path)?;
    if h.format != "trackarena.diagnostics" {
        return Err(Error::Input(format!("{} line 1: not a diagnostics log", path.display())));
    }
    Ok((h, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_distinct() {
        let all = [
            Stage::DemoArenas,
            Stage::DemoArenasWithOpponent,
            Stage::DemoNoise,
            Stage::PolicyInit,
            Stage::BcShuffle,
            Stage::TrainSuite,
            Stage::SingleRl,
            Stage::MultiRl,
        ];
        let mut s: Vec<u64> = all.iter().map(|&st| stage_seed(9, st)).collect();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), all.len());
    }

    #[test]
    fn corrupt_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut bytes = diagnostics_bytes(FileHeader::new("h", 1), &[]).unwrap();
        bytes.extend_from_slice(b"{not json\n");
        std::fs::write(&p, bytes).unwrap();
        let msg = load_diagnostics(&p).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }
}
