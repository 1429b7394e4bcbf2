//! What the algorithm drivers hand to a metrics sink after every actor
//! iteration, and what they return at the end of a run.

use crate::error::Result;
use crate::policy::JointSoftmaxPolicy;

/// State after actor iteration `iteration` (1-based).
#[derive(Debug, Clone, Copy)]
pub struct IterationReport<'a> {
    pub iteration: usize,
    /// Cumulative samples drawn so far.
    pub samples: u64,
    /// Cumulative communication rounds so far.
    pub rounds: u64,
    /// Policy before this iteration's actor step; the critic was trained for it.
    pub previous_policy: &'a JointSoftmaxPolicy,
    /// Policy after this iteration's actor step.
    pub policy: &'a JointSoftmaxPolicy,
    /// Per-agent critic parameters used by this iteration's actor step.
    pub critic: &'a [Vec<f64>],
    /// Relative error of the shared batch-average reward estimates, when the
    /// algorithm shares rewards.
    pub reward_rel_err: Option<f64>,
    /// Algorithm-specific extra metric.
    pub extra: Option<f64>,
}

pub type MetricsSink<'s> = dyn FnMut(&IterationReport<'_>) -> Result<()> + 's;

/// End-of-run summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_policy: JointSoftmaxPolicy,
    /// Uniformly drawn output iteration in `1..=T`.
    pub output_iteration: usize,
    /// Policy after `output_iteration` actor steps, if the run got that far.
    pub output_policy: Option<JointSoftmaxPolicy>,
    pub iterations_completed: usize,
    /// `(iteration, reason)` if the run stopped on non-finite parameters.
    pub diverged: Option<(usize, String)>,
}
