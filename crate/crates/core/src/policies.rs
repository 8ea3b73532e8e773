//! Per-user OFUL with exploration sessions, and the baselines it is
//! compared against.
//!
//! Each mini-session the learner flips a coin with bias `γ_n`. Exploration
//! sessions play uniformly at random and feed the moment estimates (or the
//! ALS table); the other sessions run OFUL for the arriving user on the
//! current feature estimate, using only that user's own OFUL observations.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::als::{AlsConfig, AlsState};
use crate::env::{Environment, LatentModel, Policy, RegretLedger, SessionPlan};
use crate::error::{Error, Result};
use crate::features::{estimate_features, FeatureEstimate};
use crate::moments::{InteractionRecord, MomentEstimates, SessionKind};
use crate::oful::{OfulMode, OfulParams, OfulState};
use crate::rng::{self, Purpose, StreamRng};
use crate::rtp::RtpConfig;

/// Exploration probability `γ_n` as a function of the session counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    /// `min{1, √(log(n+1)/n)}`
    Sqrt,
    /// `min{1, (log(n+1)/n)^{1/3}}`
    CubeRoot,
    /// `min{1, √(⬡/n)}`; the threshold may be supplied at evaluation time.
    HexagonAware(Option<f64>),
    Constant(f64),
}

impl fmt::Display for GammaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaSchedule::Sqrt => f.write_str("sqrt"),
            GammaSchedule::CubeRoot => f.write_str("cube_root"),
            GammaSchedule::HexagonAware(_) => f.write_str("hexagon"),
            GammaSchedule::Constant(g) => write!(f, "constant_{g}"),
        }
    }
}

pub fn gamma_value(schedule: GammaSchedule, n: u64, hexagon: Option<f64>) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("sessions are counted from 1".into()));
    }
    let n = n as f64;
    let g = match schedule {
        GammaSchedule::Sqrt => ((n + 1.0).ln() / n).sqrt(),
        GammaSchedule::CubeRoot => ((n + 1.0).ln() / n).cbrt(),
        GammaSchedule::HexagonAware(h) => {
            let h = h.or(hexagon).ok_or(Error::MissingHexagon)?;
            if !(h >= 0.0) {
                return Err(Error::InvalidArgument(format!("hexagon threshold {h} is negative")));
            }
            (h / n).sqrt()
        }
        GammaSchedule::Constant(g) => {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidArgument(format!("constant gamma {g} outside [0, 1]")));
            }
            g
        }
    };
    Ok(g.min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RtpOful,
    UcbPerUser,
    OracleOful,
    AlsOful,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::RtpOful => "rtp_oful",
            PolicyKind::UcbPerUser => "ucb_per_user",
            PolicyKind::OracleOful => "oracle_oful",
            PolicyKind::AlsOful => "als_oful",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    /// Label used in output file names; derived from kind and schedule
    /// when absent.
    pub name: Option<String>,
    pub kind: PolicyKind,
    pub gamma_schedule: GammaSchedule,
    pub oful: OfulParams,
    pub rtp: RtpConfig,
    pub als: AlsConfig,
    /// Exploration sessions collected before the first feature estimate.
    pub warmup: u64,
    /// Explore when the Bernoulli(γ_n) draw is 0 instead of 1.
    pub literal_gate: bool,
    /// Recompute every user's OFUL statistics under each new feature estimate.
    pub rebuild_on_refresh: bool,
    /// Multiplier on the UCB1 bonus `√(2 log t / n)`.
    pub ucb_scale: f64,
    /// Keep every k-th feature estimate (0: only the last).
    pub snapshot_every: u64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            name: None,
            kind: PolicyKind::RtpOful,
            gamma_schedule: GammaSchedule::Sqrt,
            oful: OfulParams::default(),
            rtp: RtpConfig::default(),
            als: AlsConfig::default(),
            warmup: 25,
            literal_gate: false,
            rebuild_on_refresh: false,
            ucb_scale: 1.0,
            snapshot_every: 0,
        }
    }
}

impl PolicySpec {
    pub fn of_kind(kind: PolicyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match self.kind {
            PolicyKind::RtpOful | PolicyKind::AlsOful => format!("{}_{}", self.kind, self.gamma_schedule),
            _ => self.kind.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub ledger: RegretLedger,
    pub records: Vec<InteractionRecord>,
    pub feature_snapshots: Vec<(u64, FeatureEstimate)>,
    pub seed: u64,
}

/// Runs `sessions` mini-sessions of `spec` on `model`.
pub fn run(model: &LatentModel, sessions: u64, spec: &PolicySpec, seed: u64) -> Result<RunResult> {
    let mut env = Environment::new(model.clone(), seed)?;
    let mut ledger = RegretLedger::default();
    let mut records = Vec::with_capacity((sessions as usize).saturating_mul(model.ell));
    let mut policy: Box<dyn Learner> = match spec.kind {
        PolicyKind::UcbPerUser => Box::new(UcbPerUser::new(model.arms(), model.users(), spec.ucb_scale)),
        _ => Box::new(GatedOful::new(model, spec, seed)?),
    };
    for _ in 0..sessions {
        let out = env.run_session(policy.as_policy())?;
        for r in &out.regret {
            ledger.push(out.user, *r);
        }
        records.extend(out.records);
    }
    let feature_snapshots = policy.finish();
    Ok(RunResult { ledger, records, feature_snapshots, seed })
}

pub fn run_rtp_oful(model: &LatentModel, sessions: u64, spec: &PolicySpec, seed: u64) -> Result<RunResult> {
    run(model, sessions, &PolicySpec { kind: PolicyKind::RtpOful, ..spec.clone() }, seed)
}

pub fn run_ucb_per_user(model: &LatentModel, sessions: u64, seed: u64) -> Result<RunResult> {
    run(model, sessions, &PolicySpec::of_kind(PolicyKind::UcbPerUser), seed)
}

pub fn run_oracle_oful(model: &LatentModel, sessions: u64, spec: &PolicySpec, seed: u64) -> Result<RunResult> {
    run(model, sessions, &PolicySpec { kind: PolicyKind::OracleOful, ..spec.clone() }, seed)
}

pub fn run_als_oful(model: &LatentModel, sessions: u64, spec: &PolicySpec, seed: u64) -> Result<RunResult> {
    run(model, sessions, &PolicySpec { kind: PolicyKind::AlsOful, ..spec.clone() }, seed)
}

trait Learner: Policy {
    fn as_policy(&mut self) -> &mut dyn Policy;
    fn finish(&mut self) -> Vec<(u64, FeatureEstimate)>;
}

/// UCB1 run independently for every user.
struct UcbPerUser {
    arms: usize,
    counts: Vec<Vec<u64>>,
    sums: Vec<Vec<f64>>,
    pulls: Vec<u64>,
    scale: f64,
}

impl UcbPerUser {
    fn new(arms: usize, users: usize, scale: f64) -> Self {
        Self {
            arms,
            counts: vec![vec![0; arms]; users],
            sums: vec![vec![0.0; arms]; users],
            pulls: vec![0; users],
            scale,
        }
    }
}

impl Policy for UcbPerUser {
    fn begin_session(&mut self, _: u64, _: usize) -> Result<SessionPlan> {
        Ok(SessionPlan { kind: SessionKind::Exploit, gamma: 0.0 })
    }

    fn act(&mut self, _: u64, _: u32, user: usize) -> Result<usize> {
        let counts = &self.counts[user];
        if let Some(a) = counts.iter().position(|&n| n == 0) {
            return Ok(a);
        }
        let log_t = (self.pulls[user] as f64).ln();
        let scores: Vec<f64> = (0..self.arms)
            .map(|a| {
                let n = counts[a] as f64;
                self.sums[user][a] / n + self.scale * (2.0 * log_t / n).sqrt()
            })
            .collect();
        Ok(crate::oful::argmax(&scores))
    }

    fn observe(&mut self, r: &InteractionRecord) -> Result<()> {
        self.counts[r.user][r.action] += 1;
        self.sums[r.user][r.action] += r.reward;
        self.pulls[r.user] += 1;
        Ok(())
    }

    fn end_session(&mut self, _: &[InteractionRecord]) -> Result<()> {
        Ok(())
    }
}

impl Learner for UcbPerUser {
    fn as_policy(&mut self) -> &mut dyn Policy {
        self
    }

    fn finish(&mut self) -> Vec<(u64, FeatureEstimate)> {
        Vec::new()
    }
}

enum Source {
    Moments(MomentEstimates),
    Als(AlsState),
    Known,
}

#[derive(Clone)]
struct UserOful {
    state: OfulState,
    /// Every OFUL-session play of this user, for rebuilds.
    log: Vec<(usize, f64)>,
}

/// Per-user OFUL on learned (or known) features with gated exploration.
struct GatedOful {
    spec: PolicySpec,
    arms: usize,
    classes: usize,
    source: Source,
    features: Option<DMatrix<f64>>,
    users: Vec<UserOful>,
    gate: StreamRng,
    uniform: StreamRng,
    rtp: RtpConfig,
    explorations: u64,
    refreshes: u64,
    latest: Option<FeatureEstimate>,
    snapshots: Vec<(u64, FeatureEstimate)>,
    plan: SessionPlan,
}

impl GatedOful {
    fn new(model: &LatentModel, spec: &PolicySpec, seed: u64) -> Result<Self> {
        spec.oful.validate()?;
        let (arms, users, classes) = (model.arms(), model.users(), model.classes());
        let (source, features) = match spec.kind {
            PolicyKind::RtpOful => (Source::Moments(MomentEstimates::new(arms)), None),
            PolicyKind::AlsOful => {
                let rank = spec.als.rank.unwrap_or(classes);
                let als = AlsState::new(arms, users, rank, &spec.als, seed)?;
                (Source::Als(als), None)
            }
            PolicyKind::OracleOful => (Source::Known, Some(model.u.clone())),
            PolicyKind::UcbPerUser => unreachable!("UCB has its own learner"),
        };
        let dim = features.as_ref().map_or(classes, |f| f.ncols());
        let dim = match &source {
            Source::Als(als) => als.u_hat.ncols(),
            _ => dim,
        };
        let fresh = UserOful { state: OfulState::new(dim, &spec.oful), log: Vec::new() };
        let rtp = RtpConfig { factors: classes, seed: spec.rtp.seed ^ seed, ..spec.rtp.clone() };
        Ok(Self {
            spec: spec.clone(),
            arms,
            classes,
            source,
            features,
            users: vec![fresh; users],
            gate: rng::stream(seed, Purpose::Policy, 0),
            uniform: rng::stream(seed, Purpose::Policy, 1),
            rtp,
            explorations: 0,
            refreshes: 0,
            latest: None,
            snapshots: Vec::new(),
            plan: SessionPlan { kind: SessionKind::Exploit, gamma: 0.0 },
        })
    }

    fn explores(&self) -> bool {
        !matches!(self.source, Source::Known)
    }

    fn refresh(&mut self, n: u64) -> Result<()> {
        let updated = match &mut self.source {
            Source::Moments(moments) => match estimate_features(moments, self.classes, &self.rtp) {
                Ok(est) => {
                    let u = est.u_bar.clone();
                    self.refreshes += 1;
                    if self.spec.snapshot_every > 0 && self.refreshes % self.spec.snapshot_every == 0 {
                        self.snapshots.push((n, est.clone()));
                    }
                    self.latest = Some(est);
                    Some(u)
                }
                Err(e @ (Error::RankDeficient { .. } | Error::TensorNumericallyZero)) => {
                    log::debug!("session {n}: keeping previous features ({e})");
                    None
                }
                Err(e) => return Err(e),
            },
            Source::Als(als) => {
                als.fit(&self.spec.als);
                Some(als.u_hat.clone())
            }
            Source::Known => None,
        };
        if let Some(u) = updated {
            self.features = Some(u);
            if self.spec.rebuild_on_refresh {
                self.rebuild()?;
            }
        }
        Ok(())
    }

    fn rebuild(&mut self) -> Result<()> {
        let Some(features) = &self.features else { return Ok(()) };
        for user in &mut self.users {
            let mut state = OfulState::new(features.ncols(), &self.spec.oful);
            for &(a, y) in &user.log {
                let row: Vec<f64> = features.row(a).iter().copied().collect();
                state.update(&row, y)?;
            }
            user.state = state;
        }
        Ok(())
    }
}

impl Policy for GatedOful {
    fn begin_session(&mut self, n: u64, _: usize) -> Result<SessionPlan> {
        self.plan = if self.explores() {
            let g = gamma_value(self.spec.gamma_schedule, n, None)?;
            let p = self.gate.random::<f64>() < g;
            let (explore, prob) = if self.spec.literal_gate { (!p, 1.0 - g) } else { (p, g) };
            let kind = if explore { SessionKind::Explore } else { SessionKind::Exploit };
            SessionPlan { kind, gamma: prob }
        } else {
            SessionPlan { kind: SessionKind::Exploit, gamma: 0.0 }
        };
        Ok(self.plan)
    }

    fn act(&mut self, _: u64, _: u32, user: usize) -> Result<usize> {
        if self.plan.kind == SessionKind::Explore {
            return Ok(self.uniform.random_range(0..self.arms));
        }
        let Some(features) = &self.features else {
            return Ok(self.uniform.random_range(0..self.arms));
        };
        let state = &self.users[user].state;
        if self.spec.oful.mode != OfulMode::Regularized && (state.t as usize) < self.arms {
            return Ok(state.t as usize);
        }
        state.select(features, &self.spec.oful)
    }

    fn observe(&mut self, r: &InteractionRecord) -> Result<()> {
        match r.kind {
            SessionKind::Explore => {
                if let Source::Als(als) = &mut self.source {
                    als.observe(r.user, r.action, r.reward);
                }
            }
            SessionKind::Exploit => {
                let user = &mut self.users[r.user];
                user.log.push((r.action, r.reward));
                if let Some(features) = &self.features {
                    let row: Vec<f64> = features.row(r.action).iter().copied().collect();
                    user.state.update(&row, r.reward)?;
                }
            }
        }
        Ok(())
    }

    fn end_session(&mut self, records: &[InteractionRecord]) -> Result<()> {
        if self.plan.kind != SessionKind::Explore {
            if let Source::Moments(m) = &mut self.source {
                m.ingest(records)?;
            }
            return Ok(());
        }
        if let Source::Moments(m) = &mut self.source {
            m.ingest(records)?;
        }
        self.explorations += 1;
        if self.explorations >= self.spec.warmup {
            self.refresh(records[0].session)?;
        }
        Ok(())
    }
}

impl Learner for GatedOful {
    fn as_policy(&mut self) -> &mut dyn Policy {
        self
    }

    fn finish(&mut self) -> Vec<(u64, FeatureEstimate)> {
        let mut snaps = std::mem::take(&mut self.snapshots);
        if let Some(last) = self.latest.take() {
            if snaps.last().map(|(_, e)| e) != Some(&last) {
                snaps.push((last.n, last));
            }
        }
        snaps
    }
}
