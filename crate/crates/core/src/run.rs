//! From a run configuration to the solved problem.

use std::sync::Arc;

use thiserror::Error;

use crate::calculus::CalculusError;
use crate::config::{RunConfig, TruncConfig};
use crate::model::{build_problem, DiffusionProblem, ModelError};
use crate::ode::{build_grid, fundamental_pair, FundamentalPair, OdeError, TruncPolicy};
use crate::solver::{solve, usc_envelope, Reward, SolveError, ValueSolution};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
}

/// Problem, grid, fundamental pair and reward envelope.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub prob: DiffusionProblem,
    pub fp: FundamentalPair,
    pub reward: Reward,
}

pub fn trunc_policy(cfg: &RunConfig) -> TruncPolicy {
    match cfg.grid.trunc {
        TruncConfig::Auto => TruncPolicy::Auto {
            tail_tol: cfg.grid.tail_tol,
        },
        TruncConfig::Explicit(s) => TruncPolicy::Explicit { lo: s.lo, hi: s.hi },
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, RunError> {
    prepare_with_nodes(cfg, cfg.grid.n_nodes)
}

/// As [`prepare`] with a different node count.
pub fn prepare_with_nodes(cfg: &RunConfig, n_nodes: usize) -> Result<Prepared, RunError> {
    let prob = build_problem(&cfg.problem)?;
    let grid = build_grid(&prob, n_nodes, trunc_policy(cfg), cfg.grid.spacing)?;
    let fp = fundamental_pair(&prob, Arc::new(grid), cfg.grid.ref_point)?;
    let reward = usc_envelope(&prob, fp.grid.clone())?;
    Ok(Prepared { prob, fp, reward })
}

impl Prepared {
    pub fn solve(&self, tol_contact: f64) -> Result<ValueSolution, SolveError> {
        solve(&self.prob, &self.fp, &self.reward, tol_contact)
    }
}
