use crate::error::Result;
use crate::numcore::{NetParams, RngState};
use crate::oracle::analytic_drift;
use crate::solvers::SolverMethod;
use crate::training::{init_params, train, InitKind, LrSchedule, Stage, Teacher, TrainConfig};

use super::gradients::CmProblem;

/// Optimizer budget shared by every trained initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct InitBudget {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub dm_batch: usize,
    pub lr: f64,
    /// Mid-training trajectory steps.
    pub teacher_steps: usize,
    pub seed: u64,
}

impl Default for InitBudget {
    fn default() -> Self {
        Self {
            hidden: vec![64; 3],
            steps: 4000,
            batch: 32,
            dm_batch: 128,
            lr: 1e-3,
            teacher_steps: 64,
            seed: 1,
        }
    }
}

impl CmProblem {
    fn budget_config(&self, stage: Stage, budget: &InitBudget) -> TrainConfig {
        let mut c = TrainConfig::new(stage, crate::training::Dataset::Gmm(self.gmm().clone()));
        c.schedule = self.schedule();
        c.sigma_data = self.sigma_data;
        c.hidden = budget.hidden.clone();
        c.steps = budget.steps;
        c.batch = budget.batch;
        c.lr = budget.lr;
        c.lr_schedule = LrSchedule::Cosine;
        c.seed = budget.seed;
        c.log_every = 0;
        c
    }

    /// Consistency-head parameters for `scheme`, trained with the exact mixture drift as teacher.
    pub fn prepare_init(&self, scheme: InitKind, budget: &InitBudget) -> Result<NetParams> {
        let drift = analytic_drift(self.gmm(), &self.schedule());
        match scheme {
            InitKind::Random => {
                let c = self.budget_config(Stage::PosttrainCt, budget);
                Ok(NetParams::random(
                    c.arch(),
                    &mut RngState::new(budget.seed).derive("random-init"),
                ))
            }
            InitKind::Dm => {
                let mut c = self.budget_config(Stage::PretrainDm, budget);
                c.batch = budget.dm_batch;
                Ok(train(&c, init_params(&c), Teacher::None)?.params)
            }
            InitKind::Cmt => {
                let mut c = self.budget_config(Stage::MidtrainCm, budget);
                c.teacher_steps = budget.teacher_steps;
                Ok(train(&c, init_params(&c), Teacher::Drift(&drift))?.params)
            }
            InitKind::Gcd => {
                let mut c = self.budget_config(Stage::PosttrainGcd, budget);
                c.teacher_solver = SolverMethod::Heun;
                Ok(train(&c, init_params(&c), Teacher::Drift(&drift))?.params)
            }
        }
    }
}
