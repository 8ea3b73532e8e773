//! Importance-weighted second and third moment estimates.
//!
//! During an exploration session the first three actions are drawn i.i.d.
//! uniformly from `[A]`, and the session itself was chosen for exploration
//! with probability `γ_n`. Dividing the reward products by the sampling
//! probability `γ_n/A²` (pairs) or `γ_n/A³` (triples) makes the running
//! averages unbiased for
//!
//! ```text
//! M₂ = Σ_c v_{β,c} u_c u_cᵀ        M₃ = Σ_c v_{β,c} u_c ⊗ u_c ⊗ u_c
//! ```
//!
//! Every mini-session counts in the `1/n` normalization. Exploitation
//! sessions add zero, which keeps the Bernoulli gate inside the expectation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SymMatrix, SymTensor3};
use crate::numfmt::g17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Explore,
    Exploit,
}

impl fmt::Display for SessionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionKind::Explore => "explore",
            SessionKind::Exploit => "exploit",
        })
    }
}

impl FromStr for SessionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explore" => Ok(SessionKind::Explore),
            "exploit" => Ok(SessionKind::Exploit),
            other => Err(Error::InvalidArgument(format!("unknown session kind {other:?}"))),
        }
    }
}

/// One step of interaction.
///
/// `session` and `step` count from 1; `user` and `action` are 0-based
/// indices. `gamma` is the probability with which the session was chosen for
/// exploration (0 for policies that never explore).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub session: u64,
    pub step: u32,
    pub user: usize,
    pub action: usize,
    pub reward: f64,
    pub kind: SessionKind,
    pub gamma: f64,
}

impl InteractionRecord {
    pub const CSV_HEADER: &'static str = "n,l,b,a,x,kind,gamma";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.session,
            self.step,
            self.user,
            self.action,
            g17(self.reward),
            self.kind,
            g17(self.gamma)
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let fields: Vec<&str> = row.trim_end().split(',').collect();
        if fields.len() != 7 {
            return Err(Error::InvalidArgument(format!(
                "expected 7 fields, found {} in {row:?}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::InvalidArgument(format!("bad {what} in {row:?}"));
        Ok(Self {
            session: fields[0].parse().map_err(|_| bad("session"))?,
            step: fields[1].parse().map_err(|_| bad("step"))?,
            user: fields[2].parse().map_err(|_| bad("user"))?,
            action: fields[3].parse().map_err(|_| bad("action"))?,
            reward: fields[4].parse().map_err(|_| bad("reward"))?,
            kind: fields[5].parse()?,
            gamma: fields[6].parse().map_err(|_| bad("gamma"))?,
        })
    }
}

/// Running importance-weighted moment sums.
///
/// The raw sums are kept unnormalized and unsymmetrized; `m2()`/`m3()`
/// materialize the averaged, symmetrized estimates. Third-order sums are
/// sparse (one entry per exploration triple) and stored as an ordered map so
/// accumulation order, and therefore every derived float, is deterministic.
#[derive(Clone, Debug)]
pub struct MomentEstimates {
    arms: usize,
    sum2: Vec<f64>,
    sum3: BTreeMap<(usize, usize, usize), f64>,
    sessions: u64,
    gamma_history: Vec<f64>,
}

impl MomentEstimates {
    pub fn new(arms: usize) -> Self {
        Self {
            arms,
            sum2: vec![0.0; arms * arms],
            sum3: BTreeMap::new(),
            sessions: 0,
            gamma_history: Vec::new(),
        }
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    /// Number of mini-sessions ingested, explore or not.
    pub fn sessions(&self) -> u64 {
        self.sessions
    }

    pub fn gamma_history(&self) -> &[f64] {
        &self.gamma_history
    }

    /// Adds one mini-session.
    ///
    /// Exploration sessions contribute `⌊ℓ/3⌋` disjoint triples, each
    /// weighted `1/⌊ℓ/3⌋` so the per-session contribution stays unbiased.
    /// Steps past the last full triple are ignored.
    pub fn ingest(&mut self, session: &[InteractionRecord]) -> Result<()> {
        let first = session
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty mini-session".into()))?;
        for r in session {
            if r.session != first.session || r.user != first.user {
                return Err(Error::InvalidArgument(
                    "records of one mini-session must share (n, b)".into(),
                ));
            }
            if r.kind != first.kind || r.gamma != first.gamma {
                return Err(Error::InvalidArgument(
                    "records of one mini-session must share kind and gamma".into(),
                ));
            }
            if r.action >= self.arms {
                return Err(Error::ActionOutOfRange {
                    action: r.action,
                    arms: self.arms,
                    session: r.session,
                    step: r.step,
                });
            }
        }
        let gamma = first.gamma;
        let gamma_ok = match first.kind {
            SessionKind::Explore => gamma > 0.0 && gamma <= 1.0,
            SessionKind::Exploit => (0.0..=1.0).contains(&gamma),
        };
        if !gamma_ok {
            return Err(Error::InvalidArgument(format!(
                "gamma {gamma} outside the allowed range for a {} session",
                first.kind
            )));
        }

        if first.kind == SessionKind::Explore {
            let mut steps: Vec<&InteractionRecord> = session.iter().collect();
            steps.sort_by_key(|r| r.step);
            let triples = steps.len() / 3;
            if triples == 0 {
                return Err(Error::InvalidArgument(format!(
                    "exploration session needs at least 3 steps, got {}",
                    steps.len()
                )));
            }
            let a = self.arms as f64;
            let share = 1.0 / (gamma * triples as f64);
            let w2 = a * a * share;
            let w3 = a * a * a * share;
            for tri in steps.chunks_exact(3) {
                let (r1, r2, r3) = (tri[0], tri[1], tri[2]);
                let x12 = r1.reward * r2.reward;
                self.sum2[r1.action * self.arms + r2.action] += w2 * x12;
                *self.sum3.entry((r1.action, r2.action, r3.action)).or_insert(0.0) +=
                    w3 * x12 * r3.reward;
            }
        }
        self.sessions += 1;
        self.gamma_history.push(gamma);
        Ok(())
    }

    /// Symmetrized `M̂₂` (zero before any session).
    pub fn m2(&self) -> SymMatrix {
        let a = self.arms;
        let n = self.sessions.max(1) as f64;
        SymMatrix::from_upper_fn(a, |i, j| 0.5 * (self.sum2[i * a + j] + self.sum2[j * a + i]) / n)
    }

    /// Symmetrized dense `M̂₃` (zero before any session).
    pub fn m3(&self) -> SymTensor3 {
        let a = self.arms;
        let n = self.sessions.max(1) as f64;
        let mut raw = vec![0.0; a * a * a];
        for (&(i, j, k), &v) in &self.sum3 {
            raw[(i * a + j) * a + k] += v / n;
        }
        SymTensor3::symmetrize(a, &raw).expect("sized to arms³")
    }

    /// `M̂₃(W, W, W)` computed from the sparse sums without materializing
    /// the `A³` tensor.
    pub fn m3_whitened(&self, w: &DMatrix<f64>) -> Result<SymTensor3> {
        if w.nrows() != self.arms {
            return Err(Error::DimensionMismatch(format!(
                "whitener has {} rows for {} arms",
                w.nrows(),
                self.arms
            )));
        }
        let c = w.ncols();
        let n = self.sessions.max(1) as f64;
        let mut raw = vec![0.0; c * c * c];
        for (&(i, j, k), &v) in &self.sum3 {
            let s = v / n;
            for p in 0..c {
                let sp = s * w[(i, p)];
                for q in 0..c {
                    let spq = sp * w[(j, q)];
                    for r in 0..c {
                        raw[(p * c + q) * c + r] += spq * w[(k, r)];
                    }
                }
            }
        }
        SymTensor3::symmetrize(c, &raw)
    }
}

/// Population moments `(M₂, M₃)` for class matrix `u` (A×C) and class
/// weights `v_beta` (length C).
pub fn population_moments(u: &DMatrix<f64>, v_beta: &[f64]) -> Result<(SymMatrix, SymTensor3)> {
    if u.ncols() != v_beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} classes in U but {} weights",
            u.ncols(),
            v_beta.len()
        )));
    }
    let a = u.nrows();
    let mut m2 = SymMatrix::zeros(a);
    let mut m3 = SymTensor3::zeros(a);
    for (c, &w) in v_beta.iter().enumerate() {
        let col: Vec<f64> = u.column(c).iter().copied().collect();
        m2.add_outer(w, &col);
        m3.add_rank_one(w, &col);
    }
    Ok((m2, m3))
}

/// Per-entry deviation bounds `(pairs, triples)` for uniform exploration with
/// sampling floors `γ_i/A²` and `γ_i/A³`, holding jointly with probability
/// at least `1 - δ` when rewards lie in `[0, 1]`.
pub fn entry_bounds(n: usize, gammas: &[f64], delta: f64, arms: usize) -> Result<(f64, f64)> {
    let (root2, root3) = bound_roots(n, gammas, delta, arms)?;
    let a = arms as f64;
    Ok((a * a * root2, a.powi(3) * root3))
}

/// Operator-norm bounds `(e2, e3)` on `‖M̂₂ − M₂‖` and `‖M̂₃ − M₃‖`.
pub fn concentration_bounds(
    n: usize,
    gammas: &[f64],
    delta: f64,
    arms: usize,
) -> Result<(f64, f64)> {
    let (root2, root3) = bound_roots(n, gammas, delta, arms)?;
    let a = arms as f64;
    Ok((a.powi(3) * root2, a.powf(4.5) * root3))
}

fn bound_roots(n: usize, gammas: &[f64], delta: f64, arms: usize) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta = {delta} outside (0, 1)")));
    }
    if n == 0 || gammas.len() < n {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and at least n gammas (n = {n}, got {})",
            gammas.len()
        )));
    }
    if gammas[..n].iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::InvalidArgument("gammas must lie in (0, 1]".into()));
    }
    let inv_sq: f64 = gammas[..n].iter().map(|g| g.powi(-2)).sum();
    let a = arms as f64;
    let nn = (n as f64).powi(2);
    let root2 = (inv_sq * (4.0 * a * a / delta).ln() / (2.0 * nn)).sqrt();
    let root3 = (inv_sq * (4.0 * a.powi(3) / delta).ln() / (2.0 * nn)).sqrt();
    Ok((root2, root3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: u64, l: u32, a: usize, x: f64, kind: SessionKind, gamma: f64) -> InteractionRecord {
        InteractionRecord { session: n, step: l, user: 0, action: a, reward: x, kind, gamma }
    }

    #[test]
    fn single_exploration_session_by_hand() {
        let mut est = MomentEstimates::new(2);
        let s = [
            rec(1, 1, 0, 0.5, SessionKind::Explore, 1.0),
            rec(1, 2, 1, 0.4, SessionKind::Explore, 1.0),
            rec(1, 3, 0, 0.6, SessionKind::Explore, 1.0),
        ];
        est.ingest(&s).unwrap();
        assert_eq!(est.sessions(), 1);
        // Raw pair gain 0.5*0.4*4 = 0.8, split over (0,1) and (1,0).
        let m2 = est.m2();
        assert!((m2.get(0, 1) - 0.4).abs() < 1e-15);
        assert!((m2.get(1, 0) - 0.4).abs() < 1e-15);
        assert_eq!(m2.get(0, 0), 0.0);
        // Raw triple gain 0.5*0.4*0.6*8 = 0.96 over the 3-element orbit of (0,1,0).
        let m3 = est.m3();
        for (i, j, k) in [(0, 1, 0), (0, 0, 1), (1, 0, 0)] {
            assert!((m3.get(i, j, k) - 0.32).abs() < 1e-15);
        }
        let orbit_mass = m3.get(0, 1, 0) + m3.get(0, 0, 1) + m3.get(1, 0, 0);
        assert!((orbit_mass - 0.96).abs() < 1e-14);
    }

    #[test]
    fn exploit_sessions_only_grow_the_denominator() {
        let mut est = MomentEstimates::new(3);
        for n in 1..=5 {
            let s: Vec<_> =
                (1..=3).map(|l| rec(n, l, 2, 0.9, SessionKind::Exploit, 0.3)).collect();
            est.ingest(&s).unwrap();
        }
        assert_eq!(est.sessions(), 5);
        assert!(est.m2().as_matrix().iter().all(|&x| x == 0.0));
        assert!(est.m3().as_slice().iter().all(|&x| x == 0.0));

        let explore = [
            rec(6, 1, 0, 1.0, SessionKind::Explore, 1.0),
            rec(6, 2, 1, 1.0, SessionKind::Explore, 1.0),
            rec(6, 3, 2, 1.0, SessionKind::Explore, 1.0),
        ];
        est.ingest(&explore).unwrap();
        // 9/6 split over two symmetric positions.
        assert!((est.m2().get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn longer_sessions_average_their_triples() {
        let mut est = MomentEstimates::new(2);
        let s: Vec<_> = (1..=7)
            .map(|l| rec(1, l, 0, 1.0, SessionKind::Explore, 1.0))
            .collect();
        est.ingest(&s).unwrap();
        // Two full triples, each weighted 1/2; the 7th step is dropped.
        assert!((est.m2().get(0, 0) - 4.0).abs() < 1e-15);
        assert!((est.m3().get(0, 0, 0) - 8.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let mut est = MomentEstimates::new(2);
        let bad_gamma: Vec<_> =
            (1..=3).map(|l| rec(1, l, 0, 1.0, SessionKind::Explore, 0.0)).collect();
        assert!(est.ingest(&bad_gamma).is_err());
        let big_gamma: Vec<_> =
            (1..=3).map(|l| rec(1, l, 0, 1.0, SessionKind::Explore, 1.5)).collect();
        assert!(est.ingest(&big_gamma).is_err());
        let bad_action: Vec<_> =
            (1..=3).map(|l| rec(1, l, 2, 1.0, SessionKind::Explore, 1.0)).collect();
        assert!(matches!(est.ingest(&bad_action), Err(Error::ActionOutOfRange { .. })));
        let short: Vec<_> =
            (1..=2).map(|l| rec(1, l, 0, 1.0, SessionKind::Explore, 1.0)).collect();
        assert!(est.ingest(&short).is_err());
        assert!(est.ingest(&[]).is_err());
        assert_eq!(est.sessions(), 0);
    }

    #[test]
    fn whitened_third_matches_dense_route() {
        let mut est = MomentEstimates::new(4);
        let acts = [(0, 1, 2), (3, 3, 1), (2, 0, 0), (1, 1, 1)];
        for (n, &(a, b, c)) in acts.iter().enumerate() {
            let n = n as u64 + 1;
            est.ingest(&[
                rec(n, 1, a, 0.3 + 0.1 * n as f64, SessionKind::Explore, 0.7),
                rec(n, 2, b, 0.8, SessionKind::Explore, 0.7),
                rec(n, 3, c, -0.2, SessionKind::Explore, 0.7),
            ])
            .unwrap();
        }
        let w = DMatrix::from_fn(4, 2, |i, j| (i as f64 + 1.0) * 0.1 - j as f64 * 0.3);
        let dense = crate::linalg::multilinear_map(&est.m3(), &w).unwrap();
        let sparse = est.m3_whitened(&w).unwrap();
        assert!(dense.max_abs_diff(&sparse) < 1e-13);
    }

    #[test]
    fn csv_row_round_trip() {
        let r = InteractionRecord {
            session: 12,
            step: 3,
            user: 4,
            action: 199,
            reward: 0.1 + 0.2,
            kind: SessionKind::Explore,
            gamma: 0.8325546111576977,
        };
        let row = r.to_csv_row();
        assert_eq!(row, "12,3,4,199,0.30000000000000004,explore,0.83255461115769769");
        assert_eq!(InteractionRecord::from_csv_row(&row).unwrap(), r);
    }

    #[test]
    fn concentration_formula_values() {
        let (e2, _) = concentration_bounds(1, &[1.0], 0.5, 2).unwrap();
        let expect = 8.0 * (32f64.ln() / 2.0).sqrt();
        assert!((e2 - expect).abs() < 1e-12);
        assert!((e2 - 10.5311).abs() < 1e-4);

        let g1 = vec![1.0; 100];
        let g4 = vec![1.0; 400];
        let (a2, a3) = concentration_bounds(100, &g1, 0.1, 5).unwrap();
        let (b2, b3) = concentration_bounds(400, &g4, 0.1, 5).unwrap();
        assert!((a2 / b2 - 2.0).abs() < 1e-12);
        assert!((a3 / b3 - 2.0).abs() < 1e-12);

        let gammas = [0.3, 0.9, 0.5];
        let (e2, e3) = concentration_bounds(3, &gammas, 0.2, 4).unwrap();
        let a = 4f64;
        let ratio = a.powf(1.5) * ((4.0 * a.powi(3) / 0.2).ln() / (4.0 * a * a / 0.2).ln()).sqrt();
        assert!((e3 / e2 - ratio).abs() < 1e-12);

        assert!(concentration_bounds(1, &[1.0], 1.0, 2).is_err());
        assert!(concentration_bounds(1, &[1.0], 0.0, 2).is_err());
        assert!(concentration_bounds(2, &[1.0], 0.5, 2).is_err());
    }

    #[test]
    fn population_moments_by_direct_summation() {
        let u = DMatrix::from_row_slice(3, 2, &[0.2, 0.9, 0.5, 0.1, 0.7, 0.4]);
        let v = [0.25, 0.75];
        let (m2, m3) = population_moments(&u, &v).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let direct: f64 = (0..2).map(|c| v[c] * u[(a, c)] * u[(b, c)]).sum();
                assert!((m2.get(a, b) - direct).abs() < 1e-15);
                for d in 0..3 {
                    let direct: f64 =
                        (0..2).map(|c| v[c] * u[(a, c)] * u[(b, c)] * u[(d, c)]).sum();
                    assert!((m3.get(a, b, d) - direct).abs() < 1e-15);
                }
            }
        }
    }
}
