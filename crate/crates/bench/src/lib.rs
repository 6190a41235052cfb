//! Workload fixtures shared by the benchmarks.

use distflow::config::DatasetConfig;
use distflow::planner::StageLayouts;
use distflow::worker::{CostModel, GenerationParams, TokenDist};
use distflow::{Mode, ParallelLayout, RunConfig};

/// Payload-heavy GRPO run with no simulated compute, so timings reflect
/// data movement only. Training uses `(world/2, 2)` to force a reshard.
pub fn transfer_workload(nodes: u32, workers_per_node: u32, mode: Mode, response_tokens: u32) -> RunConfig {
    let world = nodes * workers_per_node;
    let mut c = RunConfig::from_json(&format!(
        r#"{{"nodes": {nodes}, "workers_per_node": {workers_per_node}, "global_batch": {g}, "iterations": 1, "warmup": 0,
            "dataset": {{"synthetic": {{"size": {g}, "prompt_tokens": 8}}}}}}"#,
        g = 4 * world
    ))
    .expect("fixture parses");
    c.mode = mode;
    c.cost = CostModel::zero();
    c.generation = GenerationParams { rollouts: 4, response_tokens: TokenDist::Constant(response_tokens), bytes_per_token: 4 };
    c.layouts = StageLayouts::uniform(ParallelLayout::new(world, 1)).with("actor_train", ParallelLayout::new(world / 2, 2));
    c.dataset = DatasetConfig::Synthetic { size: 4 * world as u64, prompt_tokens: 8 };
    c
}
