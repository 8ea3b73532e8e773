#![allow(dead_code)]

use lbl_core::env::{Environment, LatentModel, Policy, SessionPlan};
use lbl_core::moments::{InteractionRecord, MomentEstimates, SessionKind};
use lbl_core::policies::{gamma_value, GammaSchedule};
use lbl_core::rng::{self, Purpose, StreamRng};
use lbl_core::Result;
use rand::Rng;

/// Explores every session uniformly at random, reporting the schedule's
/// `γ_n` as the probability it would have explored with.
pub struct Explorer {
    pub schedule: GammaSchedule,
    arms: usize,
    rng: StreamRng,
}

impl Explorer {
    pub fn new(arms: usize, schedule: GammaSchedule, seed: u64) -> Self {
        Self { schedule, arms, rng: rng::stream(seed, Purpose::Other(0xe1), 0) }
    }
}

impl Policy for Explorer {
    fn begin_session(&mut self, n: u64, _: usize) -> Result<SessionPlan> {
        Ok(SessionPlan { kind: SessionKind::Explore, gamma: gamma_value(self.schedule, n, None)? })
    }

    fn act(&mut self, _: u64, _: u32, _: usize) -> Result<usize> {
        Ok(self.rng.random_range(0..self.arms))
    }

    fn observe(&mut self, _: &InteractionRecord) -> Result<()> {
        Ok(())
    }

    fn end_session(&mut self, _: &[InteractionRecord]) -> Result<()> {
        Ok(())
    }
}

/// Always plays the same arm.
pub struct Fixed(pub usize);

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

/// Moment estimates after `sessions` uniform exploration sessions.
pub fn explore(model: &LatentModel, sessions: u64, schedule: GammaSchedule, seed: u64) -> MomentEstimates {
    let mut env = Environment::new(model.clone(), seed).unwrap();
    let mut policy = Explorer::new(model.arms(), schedule, seed);
    let mut moments = MomentEstimates::new(model.arms());
    for _ in 0..sessions {
        let out = env.run_session(&mut policy).unwrap();
        moments.ingest(&out.records).unwrap();
    }
    moments
}

/// Largest absolute eigenvalue of a symmetric matrix, through nalgebra.
pub fn spectral_norm(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.amax()
}
