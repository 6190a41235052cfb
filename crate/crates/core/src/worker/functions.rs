//! Function registry and the built-in synthetic stage functions.
//!
//! Every value is derived from `(seed, sample_id, rollout index)` by keyed
//! hashing, so outputs do not depend on batch boundaries, backend or timing.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dag::{default_key, funcs, NodeSpec, NodeType, Role};
use crate::data::{Rollout, SampleBatch};
use crate::hash;

pub mod channels {
    pub const REF_LOGPROB: &str = "ref_logprob";
    pub const VALUE: &str = "value";
    pub const REWARD: &str = "reward";
    pub const ADVANTAGE: &str = "advantage";
}

// Domain separators for keyed hashing.
const K_TOKENS: u64 = 0x746f_6b65_6e73;
const K_PAYLOAD: u64 = 0x7061_796c_6f61;
const K_REF: u64 = 0x7265_666c_6f67;
const K_VALUE: u64 = 0x0076_616c_7565;
const K_REWARD: u64 = 0x7265_7761_7264;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FunctionError {
    #[error("record {0} has no rollouts")]
    MissingRollouts(u64),
    #[error("record {sample_id} lacks channel {channel}")]
    MissingChannel { sample_id: u64, channel: &'static str },
    #[error("role {0} is frozen and cannot be trained")]
    FrozenRole(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Response length distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TokenDist {
    Constant(u32),
    /// Inclusive bounds.
    Uniform { min: u32, max: u32 },
}

impl TokenDist {
    pub fn sample(&self, key: u64) -> u32 {
        match *self {
            TokenDist::Constant(n) => n,
            TokenDist::Uniform { min, max } => min + (key % (max as u64 - min as u64 + 1)) as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub rollouts: u32,
    pub response_tokens: TokenDist,
    pub bytes_per_token: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { rollouts: 4, response_tokens: TokenDist::Constant(128), bytes_per_token: 4 }
    }
}

/// Simulated busy time `fixed_ms + per_token_us * tokens`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCost {
    #[serde(default)]
    pub fixed_ms: f64,
    #[serde(default)]
    pub per_token_us: f64,
}

impl StageCost {
    pub fn new(fixed_ms: f64, per_token_us: f64) -> Self {
        Self { fixed_ms, per_token_us }
    }

    pub fn duration(&self, tokens: u64) -> Duration {
        let us = self.fixed_ms * 1e3 + self.per_token_us * tokens as f64;
        Duration::from_nanos((us.max(0.0) * 1e3) as u64)
    }
}

/// Cost per node kind. Generation is split out so it can dominate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(default)]
    pub generate: StageCost,
    #[serde(default)]
    pub inference: StageCost,
    #[serde(default)]
    pub train: StageCost,
    #[serde(default)]
    pub compute: StageCost,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            generate: StageCost::new(1.0, 2.0),
            inference: StageCost::new(0.5, 0.5),
            train: StageCost::new(0.5, 1.0),
            compute: StageCost::new(0.0, 0.0),
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            generate: StageCost::default(),
            inference: StageCost::default(),
            train: StageCost::default(),
            compute: StageCost::default(),
        }
    }

    pub fn for_type(&self, node_type: NodeType) -> StageCost {
        match node_type {
            NodeType::ModelInference => self.inference,
            NodeType::ModelTrain => self.train,
            NodeType::Compute => self.compute,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionParams {
    pub seed: u64,
    pub generation: GenerationParams,
    pub cost: CostModel,
    pub advantage_eps: f64,
    /// Skip simulated busy time.
    pub no_cost: bool,
}

impl Default for FunctionParams {
    fn default() -> Self {
        Self {
            seed: 0,
            generation: GenerationParams::default(),
            cost: CostModel::default(),
            advantage_eps: 1e-6,
            no_cost: false,
        }
    }
}

/// Per-invocation view handed to a stage function.
pub struct FnContext<'a> {
    pub node: &'a NodeSpec,
    pub iteration: u32,
    pub params: &'a FunctionParams,
    pub model_versions: &'a mut BTreeMap<Role, u64>,
}

impl FnContext<'_> {
    pub fn spend(&self, cost: StageCost, tokens: u64) {
        if !self.params.no_cost {
            let d = cost.duration(tokens);
            if !d.is_zero() {
                thread::sleep(d);
            }
        }
    }
}

pub type StageFn = Arc<dyn Fn(&mut FnContext<'_>, SampleBatch) -> Result<SampleBatch, FunctionError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("function key {0} is already registered")]
pub struct DuplicateKey(pub String);

#[derive(Clone, Default)]
pub struct Registry {
    map: HashMap<String, StageFn>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut keys: Vec<&String> = self.map.keys().collect();
        keys.sort();
        f.debug_struct("Registry").field("keys", &keys).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects a second registration under the same key.
    pub fn register(&mut self, key: impl Into<String>, f: StageFn) -> Result<(), DuplicateKey> {
        let key = key.into();
        if self.map.contains_key(&key) {
            return Err(DuplicateKey(key));
        }
        self.map.insert(key, f);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&StageFn> {
        self.map.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    /// Built-ins under their function tags and under the unambiguous
    /// `ROLE:TYPE` defaults.
    pub fn builtin() -> Self {
        use NodeType::*;
        use Role::*;
        let mut r = Self::new();
        let entries: [(&str, StageFn); 8] = [
            (funcs::GENERATE, Arc::new(fn_generate)),
            (funcs::REF_LOGPROB, Arc::new(fn_ref_logprob)),
            (funcs::VALUE, Arc::new(fn_value)),
            (funcs::REWARD, Arc::new(fn_reward)),
            (funcs::GROUP_ADVANTAGE, Arc::new(fn_group_advantage)),
            (funcs::PPO_ADVANTAGE, Arc::new(fn_ppo_advantage)),
            (funcs::ACTOR_TRAIN, Arc::new(fn_train)),
            (funcs::CRITIC_TRAIN, Arc::new(fn_train)),
        ];
        let defaults = [
            (Actor, ModelInference, funcs::GENERATE),
            (Reference, ModelInference, funcs::REF_LOGPROB),
            (Critic, ModelInference, funcs::VALUE),
            (Reward, ModelInference, funcs::REWARD),
            (Reward, Compute, funcs::REWARD),
            (Actor, ModelTrain, funcs::ACTOR_TRAIN),
            (Critic, ModelTrain, funcs::CRITIC_TRAIN),
        ];
        let by_tag: HashMap<&str, StageFn> = entries.iter().map(|(k, f)| (*k, Arc::clone(f))).collect();
        for (k, f) in entries {
            r.register(k, f).expect("built-in keys are distinct");
        }
        for (role, ty, tag) in defaults {
            r.register(default_key(role, ty), Arc::clone(&by_tag[tag])).expect("built-in keys are distinct");
        }
        r
    }
}

fn unit(seed: u64, domain: u64, sample_id: u64, j: usize) -> f64 {
    hash::unit_f64(hash::keyed(seed, &[domain, sample_id, j as u64]))
}

/// Adds `rollouts` responses to each record.
pub fn fn_generate(ctx: &mut FnContext<'_>, mut batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    let g = ctx.params.generation;
    if g.rollouts == 0 {
        return Err(FunctionError::Invalid("rollouts must be at least 1".into()));
    }
    if g.bytes_per_token == 0 {
        return Err(FunctionError::Invalid("bytes_per_token must be at least 1".into()));
    }
    let seed = ctx.params.seed;
    for rec in &mut batch.records {
        rec.group = (0..g.rollouts as u64)
            .map(|j| {
                let tokens = g.response_tokens.sample(hash::keyed(seed, &[K_TOKENS, rec.sample_id, j]));
                let len = tokens as usize * g.bytes_per_token as usize;
                Rollout {
                    payload: hash::byte_stream(seed, &[K_PAYLOAD, rec.sample_id, j], len),
                    token_count: tokens,
                    channels: BTreeMap::new(),
                }
            })
            .collect();
    }
    ctx.spend(ctx.params.cost.generate, batch.tokens());
    Ok(batch)
}

fn fill_channel(
    ctx: &FnContext<'_>,
    mut batch: SampleBatch,
    channel: &str,
    value: impl Fn(u64, usize) -> f64,
) -> Result<SampleBatch, FunctionError> {
    for rec in &mut batch.records {
        if rec.group.is_empty() {
            return Err(FunctionError::MissingRollouts(rec.sample_id));
        }
        for (j, r) in rec.group.iter_mut().enumerate() {
            r.channels.insert(channel.to_string(), value(rec.sample_id, j));
        }
    }
    ctx.spend(ctx.params.cost.for_type(ctx.node.node_type), batch.tokens());
    Ok(batch)
}

/// Reference log-probability in [-1, 1].
pub fn fn_ref_logprob(ctx: &mut FnContext<'_>, batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    let seed = ctx.params.seed;
    fill_channel(ctx, batch, channels::REF_LOGPROB, |id, j| 2.0 * unit(seed, K_REF, id, j) - 1.0)
}

/// Critic value in [-1, 1].
pub fn fn_value(ctx: &mut FnContext<'_>, batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    let seed = ctx.params.seed;
    fill_channel(ctx, batch, channels::VALUE, |id, j| 2.0 * unit(seed, K_VALUE, id, j) - 1.0)
}

/// Reward in [0, 1].
pub fn fn_reward(ctx: &mut FnContext<'_>, batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    let seed = ctx.params.seed;
    fill_channel(ctx, batch, channels::REWARD, |id, j| unit(seed, K_REWARD, id, j))
}

fn channel(r: &Rollout, sample_id: u64, name: &'static str) -> Result<f64, FunctionError> {
    r.channel(name).ok_or(FunctionError::MissingChannel { sample_id, channel: name })
}

/// Group-normalized advantage `(r - mean) / (std + eps)` with population std.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    rewards
        .iter()
        .map(|r| {
            let centered = r - mean;
            if centered == 0.0 {
                0.0
            } else {
                centered / denom
            }
        })
        .collect()
}

pub fn fn_group_advantage(ctx: &mut FnContext<'_>, mut batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    for rec in &mut batch.records {
        if rec.group.is_empty() {
            return Err(FunctionError::MissingRollouts(rec.sample_id));
        }
        let rewards = rec
            .group
            .iter()
            .map(|r| channel(r, rec.sample_id, channels::REWARD))
            .collect::<Result<Vec<_>, _>>()?;
        for (r, a) in rec.group.iter_mut().zip(group_advantages(&rewards, ctx.params.advantage_eps)) {
            r.channels.insert(channels::ADVANTAGE.to_string(), a);
        }
    }
    ctx.spend(ctx.params.cost.for_type(ctx.node.node_type), batch.tokens());
    Ok(batch)
}

/// One-step baseline `reward - value`.
pub fn fn_ppo_advantage(ctx: &mut FnContext<'_>, mut batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    for rec in &mut batch.records {
        if rec.group.is_empty() {
            return Err(FunctionError::MissingRollouts(rec.sample_id));
        }
        for r in &mut rec.group {
            let a = channel(r, rec.sample_id, channels::REWARD)? - channel(r, rec.sample_id, channels::VALUE)?;
            r.channels.insert(channels::ADVANTAGE.to_string(), a);
        }
    }
    ctx.spend(ctx.params.cost.for_type(ctx.node.node_type), batch.tokens());
    Ok(batch)
}

/// Bumps the node role's model version. The batch passes through unchanged.
pub fn fn_train(ctx: &mut FnContext<'_>, batch: SampleBatch) -> Result<SampleBatch, FunctionError> {
    let role = ctx.node.role;
    if matches!(role, Role::Reward | Role::Reference) {
        return Err(FunctionError::FrozenRole(role.as_str()));
    }
    for rec in &batch.records {
        for r in &rec.group {
            channel(r, rec.sample_id, channels::ADVANTAGE)?;
        }
    }
    *ctx.model_versions.entry(role).or_insert(0) += 1;
    ctx.spend(ctx.params.cost.train, batch.tokens());
    Ok(batch)
}
