//! The latent-mixture environment: user arrivals, a class drawn per
//! mini-session, noisy rewards and regret against each user's
//! mixture-expected best action.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{InteractionRecord, SessionKind};
use crate::rng::{self, Purpose, StreamRng};

const SIMPLEX_TOL: f64 = 1e-12;

/// How [`generate_instance`] draws a random model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub u_low: f64,
    pub u_high: f64,
    pub dirichlet_alpha: f64,
    /// Floor on every mixture weight, enforced by mixing each Dirichlet row
    /// with the uniform point of the simplex.
    pub v_min: f64,
    /// User arrival law; uniform when absent.
    pub beta: Option<Vec<f64>>,
    pub r_noise: f64,
    pub ell: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            u_low: 0.0,
            u_high: 1.0,
            dirichlet_alpha: 1.0,
            v_min: 0.0,
            beta: None,
            r_noise: 0.1,
            ell: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    /// A×C class means.
    #[serde(with = "crate::serde_rows")]
    pub u: DMatrix<f64>,
    /// B×C mixture weights, one simplex row per user.
    #[serde(with = "crate::serde_rows")]
    pub v: DMatrix<f64>,
    pub beta: Vec<f64>,
    pub r_noise: f64,
    pub ell: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

impl LatentModel {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, beta: Vec<f64>, r_noise: f64, ell: usize) -> Result<Self> {
        let model = Self { u, v, beta, r_noise, ell, seed: None, generator: None };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.ncols() != self.v.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "U has {} classes but V has {}",
                self.u.ncols(),
                self.v.ncols()
            )));
        }
        if self.v.nrows() != self.beta.len() {
            return Err(Error::DimensionMismatch(format!(
                "V has {} users but beta has {}",
                self.v.nrows(),
                self.beta.len()
            )));
        }
        if self.arms() == 0 || self.users() == 0 || self.classes() == 0 {
            return Err(Error::InvalidArgument("A, B and C must be positive".into()));
        }
        for b in 0..self.users() {
            let row = self.v.row(b);
            if row.iter().any(|&x| !(x >= 0.0)) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!("row {b} of V is not on the simplex")));
            }
        }
        if self.beta.iter().any(|&x| !(x >= 0.0))
            || (self.beta.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::InvalidArgument("beta is not a probability vector".into()));
        }
        if !(self.r_noise >= 0.0) {
            return Err(Error::InvalidArgument("r_noise must be nonnegative".into()));
        }
        if self.ell < 3 {
            return Err(Error::InvalidArgument(format!("mini-sessions need ell >= 3, got {}", self.ell)));
        }
        if self.u.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("U has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn arms(&self) -> usize {
        self.u.nrows()
    }

    pub fn users(&self) -> usize {
        self.v.nrows()
    }

    pub fn classes(&self) -> usize {
        self.u.ncols()
    }

    pub fn u_max(&self) -> f64 {
        self.u.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Population class weights `v_{β,c} = Σ_b β(b) v_{b,c}`.
    pub fn v_beta(&self) -> Vec<f64> {
        (0..self.classes())
            .map(|c| (0..self.users()).map(|b| self.beta[b] * self.v[(b, c)]).sum())
            .collect()
    }

    /// Expected rewards `m_b = U v_b` of user `b`.
    pub fn user_means(&self, b: usize) -> Vec<f64> {
        (&self.u * self.v.row(b).transpose()).iter().copied().collect()
    }

    /// The user's best action (lowest index on ties) and its gap `g_b` to
    /// the runner-up (0 if tied, +∞ for a single arm).
    pub fn user_optimum(&self, b: usize) -> (usize, f64) {
        let m = self.user_means(b);
        let best = crate::oful::argmax(&m);
        let gap = m
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != best)
            .map(|(_, &x)| m[best] - x)
            .fold(f64::INFINITY, f64::min);
        (best, gap)
    }
}

/// Draws a random model. Class means are i.i.d. uniform on
/// `[u_low, u_high]` and mixture rows Dirichlet(`dirichlet_alpha`), floored
/// at `v_min`. Deterministic in `seed`.
pub fn generate_instance(
    arms: usize,
    users: usize,
    classes: usize,
    gen: &GeneratorSpec,
    seed: u64,
) -> Result<LatentModel> {
    if classes == 0 || arms < classes || users == 0 {
        return Err(Error::InvalidArgument(format!(
            "need A >= C >= 1 and B >= 1 (A = {arms}, B = {users}, C = {classes})"
        )));
    }
    let bound = 1.0 / classes as f64;
    if gen.v_min >= bound && classes > 1 || gen.v_min < 0.0 {
        return Err(Error::InfeasibleFloor { v_min: gen.v_min, bound });
    }
    if !(gen.u_high >= gen.u_low) || !(gen.dirichlet_alpha > 0.0) {
        return Err(Error::InvalidArgument("bad generator ranges".into()));
    }
    let mut rng = rng::stream(seed, Purpose::Model, 0);
    let width = gen.u_high - gen.u_low;
    let u = DMatrix::from_fn(arms, classes, |_, _| gen.u_low + width * rng.random::<f64>());
    let v = if classes == 1 {
        DMatrix::from_element(users, 1, 1.0)
    } else {
        let gamma = Gamma::new(gen.dirichlet_alpha, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("dirichlet_alpha: {e}")))?;
        let mix = classes as f64 * gen.v_min;
        let mut v = DMatrix::zeros(users, classes);
        for b in 0..users {
            let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            for c in 0..classes {
                let d = if total > 0.0 { draws[c] / total } else { bound };
                v[(b, c)] = (1.0 - mix) * d + mix * bound;
            }
            // Renormalize away rounding so rows sum to 1 within the tolerance.
            let s: f64 = v.row(b).sum();
            for c in 0..classes {
                v[(b, c)] /= s;
            }
        }
        v
    };
    let beta = match &gen.beta {
        Some(beta) => beta.clone(),
        None => vec![1.0 / users as f64; users],
    };
    let model = LatentModel {
        u,
        v,
        beta,
        r_noise: gen.r_noise,
        ell: gen.ell,
        seed: Some(seed),
        generator: Some(gen.clone()),
    };
    model.validate()?;
    Ok(model)
}

/// How a policy intends to play a mini-session.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionPlan {
    pub kind: SessionKind,
    /// Probability with which this session was chosen for exploration.
    pub gamma: f64,
}

/// A bandit policy driven one mini-session at a time. It sees the user but
/// never the latent class.
pub trait Policy {
    fn begin_session(&mut self, session: u64, user: usize) -> Result<SessionPlan>;
    fn act(&mut self, session: u64, step: u32, user: usize) -> Result<usize>;
    fn observe(&mut self, record: &InteractionRecord) -> Result<()>;
    fn end_session(&mut self, records: &[InteractionRecord]) -> Result<()>;
}

/// Cumulative regret after every step, and the per-user totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegretLedger {
    pub cumulative: Vec<f64>,
    pub per_user: BTreeMap<usize, f64>,
}

impl RegretLedger {
    pub fn push(&mut self, user: usize, increment: f64) {
        let last = self.cumulative.last().copied().unwrap_or(0.0);
        self.cumulative.push(last + increment);
        *self.per_user.entry(user).or_insert(0.0) += increment;
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// A model together with its arrival and noise streams.
pub struct Environment {
    model: LatentModel,
    users: WeightedIndex<f64>,
    classes: Vec<WeightedIndex<f64>>,
    means: DMatrix<f64>,
    best: Vec<f64>,
    arrivals: StreamRng,
    noise: StreamRng,
    session: u64,
}

/// One finished mini-session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutcome {
    pub user: usize,
    pub class: usize,
    pub records: Vec<InteractionRecord>,
    pub regret: Vec<f64>,
}

impl Environment {
    pub fn new(model: LatentModel, seed: u64) -> Result<Self> {
        model.validate()?;
        let users = WeightedIndex::new(&model.beta)
            .map_err(|e| Error::InvalidArgument(format!("beta: {e}")))?;
        let classes = (0..model.users())
            .map(|b| {
                WeightedIndex::new(model.v.row(b).iter().copied())
                    .map_err(|e| Error::InvalidArgument(format!("row {b} of V: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let means = &model.u * model.v.transpose();
        let best = (0..model.users())
            .map(|b| means.column(b).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self {
            users,
            classes,
            means,
            best,
            arrivals: rng::stream(seed, Purpose::Arrivals, 0),
            noise: rng::stream(seed, Purpose::Noise, 0),
            session: 0,
            model,
        })
    }

    pub fn model(&self) -> &LatentModel {
        &self.model
    }

    /// Expected reward of `action` for `user`.
    pub fn mean(&self, user: usize, action: usize) -> f64 {
        self.means[(action, user)]
    }

    /// Plays the next mini-session with `policy`.
    pub fn run_session(&mut self, policy: &mut dyn Policy) -> Result<SessionOutcome> {
        self.session += 1;
        let n = self.session;
        let user = self.users.sample(&mut self.arrivals);
        let class = self.classes[user].sample(&mut self.arrivals);
        let plan = policy.begin_session(n, user)?;
        let mut records = Vec::with_capacity(self.model.ell);
        let mut regret = Vec::with_capacity(self.model.ell);
        for l in 1..=self.model.ell as u32 {
            let action = policy.act(n, l, user)?;
            if action >= self.model.arms() {
                return Err(Error::ActionOutOfRange {
                    action,
                    arms: self.model.arms(),
                    session: n,
                    step: l,
                });
            }
            let noise = if self.model.r_noise > 0.0 {
                self.model.r_noise * rng::gaussian(&mut self.noise)
            } else {
                0.0
            };
            let record = InteractionRecord {
                session: n,
                step: l,
                user,
                action,
                reward: self.model.u[(action, class)] + noise,
                kind: plan.kind,
                gamma: plan.gamma,
            };
            policy.observe(&record)?;
            regret.push(self.best[user] - self.means[(action, user)]);
            records.push(record);
        }
        policy.end_session(&records)?;
        Ok(SessionOutcome { user, class, records, regret })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(usize);

    impl Policy for Fixed {
        fn begin_session(&mut self, _: u64, _: usize) -> Result<SessionPlan> {
            Ok(SessionPlan { kind: SessionKind::Exploit, gamma: 0.0 })
        }
        fn act(&mut self, _: u64, _: u32, _: usize) -> Result<usize> {
            Ok(self.0)
        }
        fn observe(&mut self, _: &InteractionRecord) -> Result<()> {
            Ok(())
        }
        fn end_session(&mut self, _: &[InteractionRecord]) -> Result<()> {
            Ok(())
        }
    }

    fn two_arm_model() -> LatentModel {
        let u = DMatrix::from_row_slice(2, 1, &[1.0, 0.3]);
        let v = DMatrix::from_element(1, 1, 1.0);
        LatentModel::new(u, v, vec![1.0], 0.0, 3).unwrap()
    }

    #[test]
    fn noiseless_two_arm_rewards_and_regret() {
        let mut env = Environment::new(two_arm_model(), 1).unwrap();
        let out = env.run_session(&mut Fixed(0)).unwrap();
        assert!(out.records.iter().all(|r| r.reward == 1.0));
        assert_eq!(out.regret, vec![0.0; 3]);
        let out = env.run_session(&mut Fixed(1)).unwrap();
        assert!(out.records.iter().all(|r| r.reward == 0.3));
        assert!(out.regret.iter().all(|&r| (r - 0.7).abs() < 1e-15));
        assert_eq!(out.records[0].session, 2);
        assert_eq!(out.records[2].step, 3);
    }

    #[test]
    fn out_of_range_action_is_reported() {
        let mut env = Environment::new(two_arm_model(), 1).unwrap();
        let err = env.run_session(&mut Fixed(5)).unwrap_err();
        assert!(matches!(err, Error::ActionOutOfRange { action: 5, arms: 2, session: 1, step: 1 }));
    }

    #[test]
    fn generator_basics() {
        let gen = GeneratorSpec::default();
        let one = generate_instance(4, 3, 1, &gen, 9).unwrap();
        assert!(one.v.iter().all(|&x| x == 1.0));
        let a = generate_instance(6, 5, 3, &gen, 9).unwrap();
        let b = generate_instance(6, 5, 3, &gen, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_instance(6, 5, 3, &gen, 10).unwrap());
        let floor = GeneratorSpec { v_min: 1.0 / 3.0, ..gen.clone() };
        assert!(matches!(generate_instance(6, 5, 3, &floor, 1), Err(Error::InfeasibleFloor { .. })));
        assert!(generate_instance(2, 1, 3, &gen, 1).is_err());
    }

    #[test]
    fn floor_holds_on_many_rows() {
        let gen = GeneratorSpec { v_min: 0.1, ..GeneratorSpec::default() };
        let m = generate_instance(3, 1000, 3, &gen, 4).unwrap();
        assert!(m.v.iter().all(|&x| x >= 0.1 - 1e-15));
    }

    #[test]
    fn model_json_round_trip() {
        let m = generate_instance(4, 2, 2, &GeneratorSpec::default(), 3).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: LatentModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
