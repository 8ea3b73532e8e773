//! The `decompose`, `diagnose` and `generate` subcommands. Each writes its
//! report as `key = value` lines to the given writer.

use std::io::Write;
use std::path::{Path, PathBuf};

use lbl_core::env::{generate_instance, GeneratorSpec, LatentModel};
use lbl_core::features::{
    align_columns, align_columns_assignment, estimate_features, features_from_moments,
    hexagon_threshold, recovery_bound, FeatureEstimate, ModelConstants, MAX_ENUMERATED_CLASSES,
};
use lbl_core::linalg::{SymMatrix, SymTensor3};
use lbl_core::moments::{population_moments, InteractionRecord, MomentEstimates};
use lbl_core::numfmt::g17;
use lbl_core::oful::{alpha_of, alpha_sampled, critical_radius, ALPHA_EXACT_CAP};
use lbl_core::rtp::RtpConfig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::read_model;
use crate::CliError;

/// Random subsets tried when `C` is past the exhaustive `α` cap.
const ALPHA_SAMPLES: usize = 20_000;

/// Second and third moments as stored on disk: `m2` as rows, `m3` as the
/// dense row-major `A³` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsFile {
    pub m2: Vec<Vec<f64>>,
    pub m3: Vec<f64>,
}

impl MomentsFile {
    pub fn from_moments(m2: &SymMatrix, m3: &SymTensor3) -> Self {
        let a = m2.dim();
        let rows = (0..a).map(|i| (0..a).map(|j| m2.get(i, j)).collect()).collect();
        let mut dense = Vec::with_capacity(a * a * a);
        for i in 0..a {
            for j in 0..a {
                for k in 0..a {
                    dense.push(m3.get(i, j, k));
                }
            }
        }
        Self { m2: rows, m3: dense }
    }

    pub fn into_moments(self) -> Result<(SymMatrix, SymTensor3), CliError> {
        let a = self.m2.len();
        if self.m2.iter().any(|r| r.len() != a) || self.m3.len() != a * a * a {
            return Err(CliError::Config(format!(
                "moments file: m2 must be {a}x{a} and m3 must hold {} entries",
                a * a * a
            )));
        }
        let dense = DMatrix::from_fn(a, a, |i, j| self.m2[i][j]);
        let m2 = SymMatrix::symmetrize(&dense)?;
        let m3 = SymTensor3::symmetrize(a, &self.m3)?;
        Ok((m2, m3))
    }
}

#[derive(Clone, Debug, Default)]
pub struct DecomposeArgs {
    /// Ground truth; also the input when neither moments nor records are given.
    pub model: Option<PathBuf>,
    pub moments: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub classes: Option<usize>,
    pub rtp: RtpConfig,
    pub out: Option<PathBuf>,
    pub report_bounds: bool,
    pub constants: Option<PathBuf>,
    pub delta: f64,
    pub c1: f64,
    /// Exploration sessions assumed for the bound when the input carries none.
    pub sessions: Option<usize>,
}

pub fn cmd_decompose(args: &DecomposeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let truth = args.model.as_deref().map(read_model).transpose()?;
    let classes = args
        .classes
        .or(truth.as_ref().map(LatentModel::classes))
        .ok_or_else(|| CliError::Config("--classes is required without --model".into()))?;
    let mut gammas: Option<Vec<f64>> = None;

    let estimate = if let Some(path) = &args.records {
        let moments = read_records(path, truth.as_ref().map(LatentModel::arms))?;
        gammas = Some(moments.gamma_history().to_vec());
        estimate_features(&moments, classes, &args.rtp)?
    } else if let Some(path) = &args.moments {
        let text = std::fs::read_to_string(path)?;
        let file: MomentsFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let (m2, m3) = file.into_moments()?;
        features_from_moments(&m2, &m3, classes, &args.rtp)?
    } else if let Some(model) = &truth {
        let (m2, m3) = population_moments(&model.u, &model.v_beta())?;
        features_from_moments(&m2, &m3, classes, &args.rtp)?
    } else {
        return Err(CliError::Config("give --model, --moments or --records".into()));
    };

    let json = serde_json::to_string_pretty(&estimate).map_err(|e| CliError::Other(e.to_string()))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, format!("{json}\n"))?;
            writeln!(out, "features = {}", path.display())?;
        }
        None => writeln!(out, "{json}")?,
    }
    writeln!(out, "classes = {}", estimate.classes())?;
    writeln!(out, "lambda = {}", join(&estimate.lambda))?;
    writeln!(out, "all_valid = {}", estimate.all_valid())?;

    if let Some(model) = &truth {
        if model.arms() == estimate.u_bar.nrows() && model.classes() == classes {
            let al = align(&model.u, &estimate.u_bar)?;
            writeln!(out, "alignment_perm = {:?}", al.perm)?;
            writeln!(out, "alignment_signs = {}", join(&al.signs))?;
            writeln!(out, "max_column_error = {}", g17(al.max_err))?;
        } else {
            writeln!(out, "max_column_error = unavailable (shape differs from the model)")?;
        }
    }

    if args.report_bounds {
        report_bounds(args, truth.as_ref(), &estimate, gammas, out)?;
    }
    Ok(())
}

fn align(u: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<lbl_core::features::Alignment, CliError> {
    Ok(if u.ncols() <= MAX_ENUMERATED_CLASSES {
        align_columns(u, est)?
    } else {
        align_columns_assignment(u, est)?
    })
}

fn report_bounds(
    args: &DecomposeArgs,
    truth: Option<&LatentModel>,
    estimate: &FeatureEstimate,
    gammas: Option<Vec<f64>>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mc = match (&args.constants, truth) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<ModelConstants>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(model)) => ModelConstants::from_model(&model.u, &model.v, &model.beta, args.c1)?,
        (None, None) => {
            return Err(CliError::Config("--report-bounds needs --model or --constants".into()))
        }
    };
    let (arms, classes) = (estimate.u_bar.nrows(), estimate.classes());
    let gammas = match gammas {
        Some(g) if !g.is_empty() => g,
        _ => vec![1.0; args.sessions.unwrap_or(1000)],
    };
    let n = args.sessions.unwrap_or(gammas.len()).min(gammas.len());
    writeln!(out, "bound_sessions = {n}")?;
    writeln!(out, "delta = {}", g17(args.delta))?;
    writeln!(out, "recovery_bound = {}", g17(recovery_bound(&mc, arms, classes, n, &gammas, args.delta)?))?;
    let Some(model) = truth else {
        writeln!(out, "hexagon = unavailable (needs --model for v_b and g_b)")?;
        return Ok(());
    };
    let alpha = alpha_star(&model.u)?;
    writeln!(out, "alpha_star = {}", g17(alpha))?;
    for b in 0..model.users() {
        let (_, gap) = model.user_optimum(b);
        let v_b: Vec<f64> = model.v.row(b).iter().copied().collect();
        match hexagon_threshold(&mc, arms, classes, args.delta, &v_b, gap, alpha) {
            Ok(h) => {
                writeln!(out, "user {b} hexagon_moment_branch = {}", g17(h.moment_branch))?;
                writeln!(out, "user {b} hexagon_robustness_branch = {}", g17(h.robustness_branch))?;
                writeln!(out, "user {b} hexagon = {}", g17(h.value))?;
            }
            Err(e) => writeln!(out, "user {b} hexagon = unavailable ({e})")?,
        }
    }
    Ok(())
}

/// `α` of the true class matrix: exact up to the enumeration cap, a
/// sampled lower bound beyond it.
pub fn alpha_star(u: &DMatrix<f64>) -> Result<f64, CliError> {
    if u.ncols() <= ALPHA_EXACT_CAP {
        Ok(alpha_of(u, ALPHA_EXACT_CAP)?)
    } else {
        Ok(alpha_sampled(u, ALPHA_SAMPLES, 0))
    }
}

/// Replays a records CSV into moment estimates, one session at a time.
pub fn read_records(path: &Path, arms: Option<usize>) -> Result<MomentEstimates, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(InteractionRecord::CSV_HEADER) {
        return Err(CliError::Config(format!(
            "{}: expected header `{}`",
            path.display(),
            InteractionRecord::CSV_HEADER
        )));
    }
    let records: Vec<InteractionRecord> = lines
        .enumerate()
        .map(|(i, line)| {
            InteractionRecord::from_csv_row(line)
                .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 2)))
        })
        .collect::<Result<_, _>>()?;
    let arms = arms
        .or_else(|| records.iter().map(|r| r.action + 1).max())
        .ok_or_else(|| CliError::Config(format!("{}: no records", path.display())))?;
    let mut moments = MomentEstimates::new(arms);
    for session in records.chunk_by(|a, b| a.session == b.session) {
        moments.ingest(session)?;
    }
    Ok(moments)
}

#[derive(Clone, Debug)]
pub struct DiagnoseArgs {
    pub model: PathBuf,
    pub user: Option<usize>,
    pub delta: f64,
    pub c1: f64,
}

/// Relative size (against `σ_max`) below which a constant counts as zero.
/// `σ = √λ`, so an eigenvalue at rounding level shows up near 1e-8.
const DEGENERATE_TOL: f64 = 1e-6;

pub fn cmd_diagnose(args: &DiagnoseArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = read_model(&args.model)?;
    let (arms, classes) = (model.arms(), model.classes());
    let mc = ModelConstants::from_model(&model.u, &model.v, &model.beta, args.c1)?;
    let (m2, _) = population_moments(&model.u, &model.v_beta())?;
    let eig = lbl_core::linalg::sym_eig_topk(&m2, classes)?;
    let sigmas: Vec<f64> = eig.values.iter().map(|x| x.max(0.0).sqrt()).collect();

    writeln!(out, "arms = {arms}")?;
    writeln!(out, "users = {}", model.users())?;
    writeln!(out, "classes = {classes}")?;
    writeln!(out, "sigma = {}", join(&sigmas))?;
    writeln!(out, "sigma_min = {}", g17(mc.sigma_min))?;
    writeln!(out, "sigma_max = {}", g17(mc.sigma_max))?;
    writeln!(out, "Gamma = {}", g17(mc.gamma))?;
    writeln!(out, "v_min = {}", g17(mc.v_min))?;
    writeln!(out, "u_max = {}", g17(mc.u_max))?;

    let scale = mc.sigma_max.max(f64::MIN_POSITIVE);
    let mut degenerate = Vec::new();
    if !(mc.gamma > DEGENERATE_TOL * scale) {
        degenerate.push(("Gamma", mc.gamma));
    }
    if !(mc.sigma_min > DEGENERATE_TOL * scale) {
        degenerate.push(("sigma_min", mc.sigma_min));
    }
    if !(mc.v_min > 0.0) {
        degenerate.push(("v_min", mc.v_min));
    }
    for c in 0..classes {
        for d in c + 1..classes {
            if (model.u.column(c) - model.u.column(d)).norm() <= 1e-12 * model.u.norm() {
                writeln!(out, "identical_classes = {c},{d}")?;
            }
        }
    }
    if !degenerate.is_empty() {
        for (name, value) in &degenerate {
            writeln!(out, "degenerate {name} = {}", g17(*value))?;
        }
        return Err(CliError::Degenerate(
            degenerate.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
        ));
    }

    let alpha = alpha_star(&model.u)?;
    writeln!(out, "aleph = {}", g17(mc.aleph()))?;
    writeln!(out, "diamond = {}", g17(mc.diamond(arms, classes)))?;
    writeln!(out, "Delta = {}", g17(mc.delta_asymptotic(arms, classes)))?;
    writeln!(out, "alpha_star = {}", g17(alpha))?;
    writeln!(out, "delta = {}", g17(args.delta))?;

    let users: Vec<usize> = match args.user {
        Some(b) if b < model.users() => vec![b],
        Some(b) => {
            return Err(CliError::Config(format!("--user {b} out of range for {} users", model.users())))
        }
        None => (0..model.users()).collect(),
    };
    for b in users {
        let (best, gap) = model.user_optimum(b);
        let v_b = DVector::from_iterator(classes, model.v.row(b).iter().copied());
        writeln!(out, "user {b} best_action = {best}")?;
        writeln!(out, "user {b} g_b = {}", g17(gap))?;
        match critical_radius(&model.u, &v_b, alpha) {
            Ok(r) => writeln!(out, "user {b} critical_radius = {}", g17(r))?,
            Err(e) => writeln!(out, "user {b} critical_radius = unavailable ({e})")?,
        }
        let v: Vec<f64> = v_b.iter().copied().collect();
        match hexagon_threshold(&mc, arms, classes, args.delta, &v, gap, alpha) {
            Ok(h) => {
                writeln!(out, "user {b} hexagon_moment_branch = {}", g17(h.moment_branch))?;
                writeln!(out, "user {b} hexagon_robustness_branch = {}", g17(h.robustness_branch))?;
                writeln!(out, "user {b} hexagon = {}", g17(h.value))?;
            }
            Err(e) => writeln!(out, "user {b} hexagon = unavailable ({e})")?,
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub arms: usize,
    pub users: usize,
    pub classes: usize,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub out: PathBuf,
    /// Also write the exact population moments here.
    pub moments_out: Option<PathBuf>,
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = generate_instance(args.arms, args.users, args.classes, &args.generator, args.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let json = serde_json::to_string_pretty(&model).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(&args.out, format!("{json}\n"))?;
    writeln!(out, "model = {}", args.out.display())?;
    if let Some(path) = &args.moments_out {
        let (m2, m3) = population_moments(&model.u, &model.v_beta())?;
        let file = MomentsFile::from_moments(&m2, &m3);
        std::fs::write(path, serde_json::to_string(&file).map_err(|e| CliError::Other(e.to_string()))?)?;
        writeln!(out, "moments = {}", path.display())?;
    }
    Ok(())
}

fn join<T: Copy + Into<f64>>(xs: &[T]) -> String {
    xs.iter().map(|&x| g17(x.into())).collect::<Vec<_>>().join(",")
}

/// Parses the `key = value` report lines back into pairs.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
