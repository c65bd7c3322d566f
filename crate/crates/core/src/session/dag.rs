//! Session-local plan graph with dependency checking and auto-promotion.
//!
//! An edge `(from, to)` means `to` depends on `from`. A node becomes ready as
//! soon as all of its dependencies are done; completions only happen through
//! [`PlanDag::apply`], so a single promotion pass after each completion
//! reaches the fixpoint.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::SessionId;
use crate::error::{KernelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Blocked,
    Ready,
    Running,
    Done,
    Failed,
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeStatus::Blocked => "blocked",
            NodeStatus::Ready => "ready",
            NodeStatus::Running => "running",
            NodeStatus::Done => "done",
            NodeStatus::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: String,
    pub label: String,
    pub status: NodeStatus,
    pub deps: BTreeSet<String>,
    /// Child session whose completion completes this node.
    pub auto_complete_child: Option<SessionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DagMutation {
    AddNode {
        id: String,
        label: String,
        #[serde(default)]
        deps: Vec<String>,
    },
    /// `to` gains a dependency on `from`.
    AddEdge {
        from: String,
        to: String,
    },
    StartNode {
        id: String,
    },
    CompleteNode {
        id: String,
    },
    FailNode {
        id: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotionReport {
    /// Nodes that became ready because of the mutation.
    pub promoted: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanDag {
    nodes: BTreeMap<String, DagNode>,
}

impl PlanDag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: &str) -> Option<&DagNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &DagNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn status(&self, id: &str) -> Option<NodeStatus> {
        self.nodes.get(id).map(|n| n.status)
    }

    fn require(&self, id: &str) -> Result<&DagNode> {
        self.nodes.get(id).ok_or_else(|| KernelError::not_found("dag node", id))
    }

    fn all_done(&self, deps: &BTreeSet<String>) -> bool {
        deps.iter()
            .all(|d| self.nodes.get(d).is_some_and(|n| n.status == NodeStatus::Done))
    }

    /// True when `node` depends, directly or transitively, on `target`.
    fn depends_on(&self, node: &str, target: &str) -> bool {
        let mut stack = vec![node];
        let mut seen = BTreeSet::new();
        while let Some(current) = stack.pop() {
            if current == target {
                return true;
            }
            if !seen.insert(current) {
                continue;
            }
            if let Some(n) = self.nodes.get(current) {
                stack.extend(n.deps.iter().map(String::as_str));
            }
        }
        false
    }

    /// Validates and applies a mutation. Nothing changes on error.
    pub fn apply(&mut self, mutation: DagMutation) -> Result<PromotionReport> {
        match mutation {
            DagMutation::AddNode { id, label, deps } => {
                if id.trim().is_empty() {
                    return Err(KernelError::InvalidInput("node id is empty".into()));
                }
                if self.nodes.contains_key(&id) {
                    return Err(KernelError::Rejected(format!("node {id} already exists")));
                }
                for dep in &deps {
                    if dep == &id {
                        return Err(KernelError::Cycle {
                            from: id.clone(),
                            to: id.clone(),
                        });
                    }
                    self.require(dep)?;
                }
                let deps: BTreeSet<String> = deps.into_iter().collect();
                let status = if self.all_done(&deps) {
                    NodeStatus::Ready
                } else {
                    NodeStatus::Blocked
                };
                self.nodes.insert(
                    id.clone(),
                    DagNode {
                        id: id.clone(),
                        label,
                        status,
                        deps,
                        auto_complete_child: None,
                    },
                );
                let promoted = if status == NodeStatus::Ready {
                    vec![id]
                } else {
                    Vec::new()
                };
                Ok(PromotionReport { promoted })
            }
            DagMutation::AddEdge { from, to } => {
                let from_status = self.require(&from)?.status;
                let target = self.require(&to)?;
                if !matches!(target.status, NodeStatus::Blocked | NodeStatus::Ready) {
                    return Err(KernelError::Rejected(format!(
                        "node {to} is {} and cannot gain dependencies",
                        target.status
                    )));
                }
                if target.deps.contains(&from) {
                    return Ok(PromotionReport::default());
                }
                if from == to || self.depends_on(&from, &to) {
                    return Err(KernelError::Cycle { from, to });
                }
                let node = self.nodes.get_mut(&to).expect("checked above");
                node.deps.insert(from);
                if from_status != NodeStatus::Done {
                    node.status = NodeStatus::Blocked;
                }
                Ok(PromotionReport::default())
            }
            DagMutation::StartNode { id } => {
                let node = self.require(&id)?;
                if node.status != NodeStatus::Ready {
                    return Err(KernelError::Rejected(format!(
                        "node {id} is {}, not ready",
                        node.status
                    )));
                }
                self.nodes.get_mut(&id).expect("checked above").status = NodeStatus::Running;
                Ok(PromotionReport::default())
            }
            DagMutation::CompleteNode { id } => {
                let node = self.require(&id)?;
                if !matches!(node.status, NodeStatus::Ready | NodeStatus::Running) {
                    return Err(KernelError::Rejected(format!(
                        "cannot complete node {id}: it is {}",
                        node.status
                    )));
                }
                self.nodes.get_mut(&id).expect("checked above").status = NodeStatus::Done;
                Ok(PromotionReport {
                    promoted: self.promote(),
                })
            }
            DagMutation::FailNode { id } => {
                let node = self.require(&id)?;
                if matches!(node.status, NodeStatus::Done | NodeStatus::Failed) {
                    return Err(KernelError::Rejected(format!(
                        "cannot fail node {id}: it is {}",
                        node.status
                    )));
                }
                self.nodes.get_mut(&id).expect("checked above").status = NodeStatus::Failed;
                Ok(PromotionReport::default())
            }
        }
    }

    fn promote(&mut self) -> Vec<String> {
        let ready: Vec<String> = self
            .nodes
            .values()
            .filter(|n| n.status == NodeStatus::Blocked && self.all_done(&n.deps))
            .map(|n| n.id.clone())
            .collect();
        for id in &ready {
            self.nodes.get_mut(id).expect("collected above").status = NodeStatus::Ready;
        }
        ready
    }

    pub(crate) fn attach_child(&mut self, id: &str, child: SessionId) -> Result<()> {
        let node = self.require(id)?;
        match node.status {
            NodeStatus::Ready | NodeStatus::Running => {}
            other => {
                return Err(KernelError::Rejected(format!(
                    "node {id} is {other}; only ready or running nodes can take a child task"
                )))
            }
        }
        if let Some(existing) = node.auto_complete_child {
            return Err(KernelError::Rejected(format!(
                "node {id} is already tied to session {existing}"
            )));
        }
        let node = self.nodes.get_mut(id).expect("checked above");
        node.status = NodeStatus::Running;
        node.auto_complete_child = Some(child);
        Ok(())
    }

    /// Kahn's algorithm over the dependency edges; `None` if a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for node in self.nodes.values() {
            for dep in &node.deps {
                *indegree.get_mut(node.id.as_str())? += 1;
                dependents.entry(dep.as_str()).or_default().push(node.id.as_str());
            }
        }
        let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = queue.pop_front() {
            order.push(n.to_string());
            for &m in dependents.get(n).into_iter().flatten() {
                let d = indegree.get_mut(m)?;
                *d -= 1;
                if *d == 0 {
                    queue.push_back(m);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }
}
