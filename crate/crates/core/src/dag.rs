//! Workflow graph description, parsing, validation and built-in presets.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DagError {
    #[error("malformed document: {0}")]
    Syntax(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Actor,
    Critic,
    Reward,
    Reference,
    None,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Actor => "ACTOR",
            Role::Critic => "CRITIC",
            Role::Reward => "REWARD",
            Role::Reference => "REFERENCE",
            Role::None => "NONE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeType {
    ModelInference,
    ModelTrain,
    Compute,
}

impl NodeType {
    pub fn as_str(&self) -> &'static str {
        match self {
            NodeType::ModelInference => "MODEL_INFERENCE",
            NodeType::ModelTrain => "MODEL_TRAIN",
            NodeType::Compute => "COMPUTE",
        }
    }
}

/// One stage of the workflow. Serialized form is the config document's node object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub role: Role,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    #[serde(rename = "func", default, skip_serializing_if = "Option::is_none")]
    pub func_tag: Option<String>,
    pub deps: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: &str, role: Role, node_type: NodeType, func: Option<&str>, deps: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            role,
            node_type,
            func_tag: func.map(str::to_string),
            deps: deps.iter().map(|d| d.to_string()).collect(),
        }
    }

    /// Dispatch key: `func_tag` when present, else `ROLE:TYPE`.
    pub fn dispatch_key(&self) -> String {
        match &self.func_tag {
            Some(tag) => tag.clone(),
            None => default_key(self.role, self.node_type),
        }
    }
}

pub fn default_key(role: Role, node_type: NodeType) -> String {
    format!("{}:{}", role.as_str(), node_type.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagGraph {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
}

impl DagGraph {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn roots(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.deps.is_empty())
    }

    /// Nodes nothing else depends on.
    pub fn sinks(&self) -> Vec<&NodeSpec> {
        let used: HashSet<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.deps.iter().map(String::as_str))
            .collect();
        self.nodes.iter().filter(|n| !used.contains(n.id.as_str())).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

/// Parses the JSON workflow document.
pub fn parse_dag_config(document: &str) -> Result<DagGraph, DagError> {
    let graph: DagGraph = serde_json::from_str(document).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => DagError::Schema(e.to_string()),
        _ => DagError::Syntax(e.to_string()),
    })?;
    if graph.nodes.is_empty() {
        return Err(DagError::Schema("graph has no nodes".into()));
    }
    let ids: HashSet<&str> = graph.nodes.iter().map(|n| n.id.as_str()).collect();
    for node in &graph.nodes {
        for dep in &node.deps {
            if !ids.contains(dep.as_str()) {
                return Err(DagError::Schema(format!(
                    "node \"{}\" depends on undeclared node \"{}\"",
                    node.id, dep
                )));
            }
        }
    }
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    Empty,
    DupId,
    DanglingDep,
    Cycle,
    NoRoot,
    NoneRole,
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IssueCode::Empty => "EMPTY",
            IssueCode::DupId => "DUP_ID",
            IssueCode::DanglingDep => "DANGLING_DEP",
            IssueCode::Cycle => "CYCLE",
            IssueCode::NoRoot => "NO_ROOT",
            IssueCode::NoneRole => "NONE_ROLE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub node_id: Option<String>,
    pub code: IssueCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

/// Reports every structural problem in `g`.
pub fn validate_dag(g: &DagGraph) -> ValidationReport {
    let mut issues = Vec::new();
    if g.nodes.is_empty() {
        issues.push(Issue {
            node_id: None,
            code: IssueCode::Empty,
            message: "graph has no nodes".into(),
        });
        return ValidationReport { issues };
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        if index.insert(node.id.as_str(), i).is_some() {
            issues.push(Issue {
                node_id: Some(node.id.clone()),
                code: IssueCode::DupId,
                message: format!("node id \"{}\" declared more than once", node.id),
            });
        }
    }
    // Edges resolve to the first declaration of a duplicated id.
    let mut first: HashMap<&str, usize> = HashMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        first.entry(node.id.as_str()).or_insert(i);
    }

    for node in &g.nodes {
        for dep in &node.deps {
            if !first.contains_key(dep.as_str()) {
                issues.push(Issue {
                    node_id: Some(node.id.clone()),
                    code: IssueCode::DanglingDep,
                    message: format!("dependency \"{dep}\" is not declared"),
                });
            }
        }
        if node.role == Role::None && node.node_type != NodeType::Compute {
            issues.push(Issue {
                node_id: Some(node.id.clone()),
                code: IssueCode::NoneRole,
                message: format!("role NONE requires type COMPUTE, found {}", node.node_type.as_str()),
            });
        }
    }

    if g.roots().next().is_none() {
        issues.push(Issue {
            node_id: None,
            code: IssueCode::NoRoot,
            message: "no node without dependencies".into(),
        });
    }

    let cyclic = cyclic_nodes(g, &first);
    if !cyclic.is_empty() {
        let names: Vec<&str> = cyclic.iter().map(|&i| g.nodes[i].id.as_str()).collect();
        issues.push(Issue {
            node_id: None,
            code: IssueCode::Cycle,
            message: format!("cycle through [{}]", names.join(", ")),
        });
    }

    ValidationReport { issues }
}

/// Indices of nodes that lie on a cycle, or between cycles, in declaration order.
///
/// Peels sources (Kahn) and then sinks from the residual graph; anything left
/// has both an incoming and an outgoing edge inside a strongly connected region.
fn cyclic_nodes(g: &DagGraph, first: &HashMap<&str, usize>) -> Vec<usize> {
    let n = g.nodes.len();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, node) in g.nodes.iter().enumerate() {
        if first.get(node.id.as_str()) != Some(&i) {
            continue;
        }
        for dep in &node.deps {
            if let Some(&d) = first.get(dep.as_str()) {
                edges.push((d, i));
            }
        }
    }
    let mut alive: Vec<bool> = (0..n).map(|i| first.get(g.nodes[i].id.as_str()) == Some(&i)).collect();

    loop {
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        for &(a, b) in &edges {
            if alive[a] && alive[b] {
                outdeg[a] += 1;
                indeg[b] += 1;
            }
        }
        let mut changed = false;
        for i in 0..n {
            if alive[i] && (indeg[i] == 0 || outdeg[i] == 0) {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (0..n).filter(|&i| alive[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ppo,
    Grpo,
}

/// Function tags understood by the built-in registry.
pub mod funcs {
    pub const GENERATE: &str = "generate";
    pub const REF_LOGPROB: &str = "ref_logprob";
    pub const VALUE: &str = "value";
    pub const REWARD: &str = "reward";
    pub const GROUP_ADVANTAGE: &str = "group_advantage";
    pub const PPO_ADVANTAGE: &str = "ppo_advantage";
    pub const ACTOR_TRAIN: &str = "actor_train";
    pub const CRITIC_TRAIN: &str = "critic_train";
}

pub fn preset_dag(algorithm: Algorithm) -> DagGraph {
    use NodeType::*;
    use Role::*;
    match algorithm {
        Algorithm::Ppo => DagGraph {
            name: "ppo".into(),
            nodes: vec![
                NodeSpec::new("actor_generate", Actor, ModelInference, Some(funcs::GENERATE), &[]),
                NodeSpec::new("ref_inference", Reference, ModelInference, Some(funcs::REF_LOGPROB), &["actor_generate"]),
                NodeSpec::new("critic_inference", Critic, ModelInference, Some(funcs::VALUE), &["actor_generate"]),
                NodeSpec::new("reward_compute", Reward, Compute, Some(funcs::REWARD), &["actor_generate"]),
                NodeSpec::new(
                    "advantage_compute",
                    None,
                    Compute,
                    Some(funcs::PPO_ADVANTAGE),
                    &["ref_inference", "critic_inference", "reward_compute"],
                ),
                NodeSpec::new("actor_train", Actor, ModelTrain, Some(funcs::ACTOR_TRAIN), &["advantage_compute"]),
                NodeSpec::new("critic_train", Critic, ModelTrain, Some(funcs::CRITIC_TRAIN), &["advantage_compute"]),
            ],
        },
        Algorithm::Grpo => DagGraph {
            name: "grpo".into(),
            nodes: vec![
                NodeSpec::new("actor_generate", Actor, ModelInference, Some(funcs::GENERATE), &[]),
                NodeSpec::new("ref_inference", Reference, ModelInference, Some(funcs::REF_LOGPROB), &["actor_generate"]),
                NodeSpec::new("reward_compute", Reward, Compute, Some(funcs::REWARD), &["actor_generate"]),
                NodeSpec::new(
                    "group_advantage_compute",
                    None,
                    Compute,
                    Some(funcs::GROUP_ADVANTAGE),
                    &["ref_inference", "reward_compute"],
                ),
                NodeSpec::new("actor_train", Actor, ModelTrain, Some(funcs::ACTOR_TRAIN), &["group_advantage_compute"]),
            ],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRPO_DOC: &str = r#"{
        "name": "grpo",
        "nodes": [
            {"id": "actor_generate", "role": "ACTOR", "type": "MODEL_INFERENCE", "func": "generate", "deps": []},
            {"id": "ref_inference", "role": "REFERENCE", "type": "MODEL_INFERENCE", "func": "ref_logprob", "deps": ["actor_generate"]},
            {"id": "reward_compute", "role": "REWARD", "type": "COMPUTE", "func": "reward", "deps": ["actor_generate"]},
            {"id": "group_advantage_compute", "role": "NONE", "type": "COMPUTE", "func": "group_advantage", "deps": ["ref_inference", "reward_compute"]},
            {"id": "actor_train", "role": "ACTOR", "type": "MODEL_TRAIN", "func": "actor_train", "deps": ["group_advantage_compute"]}
        ]
    }"#;

    #[test]
    fn parses_grpo_document() {
        let g = parse_dag_config(GRPO_DOC).unwrap();
        assert_eq!(g.nodes.len(), 5);
        assert_eq!(g, preset_dag(Algorithm::Grpo));
    }

    #[test]
    fn empty_nodes_is_schema_error() {
        let err = parse_dag_config(r#"{"name": "x", "nodes": []}"#).unwrap_err();
        assert!(matches!(err, DagError::Schema(_)));
    }

    #[test]
    fn dangling_dep_names_missing_node() {
        let doc = r#"{"name": "x", "nodes": [{"id": "a", "role": "ACTOR", "type": "COMPUTE", "deps": ["X"]}]}"#;
        match parse_dag_config(doc).unwrap_err() {
            DagError::Schema(msg) => assert!(msg.contains("\"X\""), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_and_bad_enum_rejected() {
        let extra = r#"{"name": "x", "nodes": [{"id": "a", "role": "ACTOR", "type": "COMPUTE", "deps": [], "gpu": 1}]}"#;
        assert!(matches!(parse_dag_config(extra), Err(DagError::Schema(_))));
        let top = r#"{"name": "x", "nodes": [], "extra": true}"#;
        assert!(matches!(parse_dag_config(top), Err(DagError::Schema(_))));
        let bad_role = r#"{"name": "x", "nodes": [{"id": "a", "role": "JUDGE", "type": "COMPUTE", "deps": []}]}"#;
        assert!(matches!(parse_dag_config(bad_role), Err(DagError::Schema(_))));
        let missing = r#"{"name": "x", "nodes": [{"id": "a", "role": "ACTOR", "deps": []}]}"#;
        assert!(matches!(parse_dag_config(missing), Err(DagError::Schema(_))));
    }

    #[test]
    fn malformed_is_syntax_error() {
        assert!(matches!(parse_dag_config("{\"name\": "), Err(DagError::Syntax(_))));
        assert!(matches!(parse_dag_config("not json"), Err(DagError::Syntax(_))));
    }

    #[test]
    fn presets_validate() {
        for alg in [Algorithm::Ppo, Algorithm::Grpo] {
            let report = validate_dag(&preset_dag(alg));
            assert!(report.ok(), "{:?}", report.issues);
        }
    }

    #[test]
    fn preset_shapes() {
        let ppo = preset_dag(Algorithm::Ppo);
        assert_eq!(ppo.nodes.len(), 7);
        let sinks: Vec<_> = ppo.sinks().iter().map(|n| n.id.clone()).collect();
        assert_eq!(sinks, vec!["actor_train", "critic_train"]);
        let grpo = preset_dag(Algorithm::Grpo);
        assert_eq!(grpo.nodes.len(), 5);
        assert_eq!(grpo.sinks().len(), 1);
        assert!(ppo.nodes.iter().all(|n| n.func_tag.is_some()));
    }

    #[test]
    fn presets_are_stable() {
        assert_eq!(preset_dag(Algorithm::Ppo).to_json(), preset_dag(Algorithm::Ppo).to_json());
    }

    #[test]
    fn two_node_cycle_lists_both() {
        let g = DagGraph {
            name: "c".into(),
            nodes: vec![
                NodeSpec::new("root", Role::Actor, NodeType::ModelInference, None, &[]),
                NodeSpec::new("A", Role::Actor, NodeType::Compute, None, &["B", "root"]),
                NodeSpec::new("B", Role::Actor, NodeType::Compute, None, &["A"]),
            ],
        };
        let report = validate_dag(&g);
        let cycle = report.issues.iter().find(|i| i.code == IssueCode::Cycle).unwrap();
        assert!(cycle.message.contains('A') && cycle.message.contains('B'));
        assert!(!cycle.message.contains("root"));
    }

    #[test]
    fn duplicate_id_reported() {
        let g = DagGraph {
            name: "d".into(),
            nodes: vec![
                NodeSpec::new("gen", Role::Actor, NodeType::ModelInference, None, &[]),
                NodeSpec::new("gen", Role::Actor, NodeType::ModelInference, None, &[]),
            ],
        };
        let report = validate_dag(&g);
        assert!(report.has(IssueCode::DupId));
        assert_eq!(report.issues[0].node_id.as_deref(), Some("gen"));
    }

    #[test]
    fn none_role_misuse_and_no_root() {
        let g = DagGraph {
            name: "n".into(),
            nodes: vec![
                NodeSpec::new("x", Role::None, NodeType::ModelTrain, None, &["y"]),
                NodeSpec::new("y", Role::Actor, NodeType::Compute, None, &["x"]),
            ],
        };
        let report = validate_dag(&g);
        assert!(report.has(IssueCode::NoneRole));
        assert!(report.has(IssueCode::NoRoot));
        assert!(report.has(IssueCode::Cycle));
    }

    #[test]
    fn disconnected_components_are_legal() {
        let g = DagGraph {
            name: "two".into(),
            nodes: vec![
                NodeSpec::new("a", Role::Actor, NodeType::ModelInference, None, &[]),
                NodeSpec::new("b", Role::Critic, NodeType::ModelInference, None, &[]),
            ],
        };
        assert!(validate_dag(&g).ok());
    }

    #[test]
    fn dispatch_key_defaults_to_role_type() {
        let n = NodeSpec::new("x", Role::Reward, NodeType::Compute, None, &[]);
        assert_eq!(n.dispatch_key(), "REWARD:COMPUTE");
        let n = NodeSpec::new("x", Role::Reward, NodeType::Compute, Some("my_reward"), &[]);
        assert_eq!(n.dispatch_key(), "my_reward");
    }
}
