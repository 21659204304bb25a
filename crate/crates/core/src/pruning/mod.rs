//! Token influence scoring, selection criteria and pruning schedules.

mod schedule;
mod scores;
mod select;

pub use schedule::{linear_schedule, PruneSchedule};
pub(crate) use scores::influence_unchecked;
pub use scores::{
    chunked_scores, influence_deltas, influence_from_params, influence_scores, Aggregator,
    InfluenceScores,
};
pub(crate) use select::select_random_active;
pub use select::{
    select_influence, select_random, select_uniform, select_uniform_active, Criterion,
};
