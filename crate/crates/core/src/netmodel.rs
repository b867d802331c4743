//! Node roster, baseline routing tree and the mutable destination table
//! that redirection attacks rewrite.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of hops followed by [`Topology::route_path`].
pub const HOP_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid redirection {target}>{new_dest}: {reason}")]
    InvalidRedirection { target: NodeId, new_dest: NodeId, reason: &'static str },
    #[error("topology config: {0}")]
    Config(String),
}

/// Role of a device in the tree. The derived order is the roster order
/// used everywhere nodes are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Coordinator,
    Router,
    Edge,
    Attacker,
}

/// A device identifier such as `C`, `R2`, `E4` or `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    role: Role,
    index: u8,
}

impl NodeId {
    pub const COORDINATOR: NodeId = NodeId { role: Role::Coordinator, index: 0 };
    pub const ATTACKER: NodeId = NodeId { role: Role::Attacker, index: 0 };

    pub const fn router(index: u8) -> NodeId {
        NodeId { role: Role::Router, index }
    }

    pub const fn edge(index: u8) -> NodeId {
        NodeId { role: Role::Edge, index }
    }

    pub fn role(self) -> Role {
        self.role
    }

    /// 1-based index for routers and edges, 0 for `C` and `A`.
    pub fn index(self) -> u8 {
        self.index
    }

    pub fn is_router(self) -> bool {
        self.role == Role::Router
    }

    pub fn is_edge(self) -> bool {
        self.role == Role::Edge
    }

    /// Every node of the testbed roster, in roster order.
    pub fn roster() -> [NodeId; 9] {
        [
            NodeId::COORDINATOR,
            NodeId::router(1),
            NodeId::router(2),
            NodeId::router(3),
            NodeId::edge(1),
            NodeId::edge(2),
            NodeId::edge(3),
            NodeId::edge(4),
            NodeId::ATTACKER,
        ]
    }

    pub fn routers() -> [NodeId; 3] {
        [NodeId::router(1), NodeId::router(2), NodeId::router(3)]
    }

    pub fn edges() -> [NodeId; 4] {
        [NodeId::edge(1), NodeId::edge(2), NodeId::edge(3), NodeId::edge(4)]
    }

    /// Parses a token against the fixed roster (`C`, `R1`..`R3`, `E1`..`E4`, `A`).
    pub fn parse_token(token: &str) -> Option<NodeId> {
        match token.as_bytes() {
            b"C" => Some(NodeId::COORDINATOR),
            b"A" => Some(NodeId::ATTACKER),
            [b'R', d @ b'1'..=b'3'] => Some(NodeId::router(d - b'0')),
            [b'E', d @ b'1'..=b'4'] => Some(NodeId::edge(d - b'0')),
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Coordinator => f.write_str("C"),
            Role::Attacker => f.write_str("A"),
            Role::Router => write!(f, "R{}", self.index),
            Role::Edge => write!(f, "E{}", self.index),
        }
    }
}

impl FromStr for NodeId {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::parse_token(s.trim()).ok_or_else(|| NetError::UnknownNode(s.to_string()))
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attack scenario family. Families I and II share a baseline in which
/// `R3` forwards to `R2`; family III uses `R3 > C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
    III,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::I, Scenario::II, Scenario::III];

    /// Baseline destination of `R3`, the only route that differs between families.
    pub fn r3_baseline(self) -> NodeId {
        match self {
            Scenario::I | Scenario::II => NodeId::router(2),
            Scenario::III => NodeId::COORDINATOR,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        })
    }
}

impl FromStr for Scenario {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            other => Err(NetError::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// A path followed through the live destination table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutePath {
    pub nodes: Vec<NodeId>,
    /// Set when the walk hit [`HOP_LIMIT`] without reaching `C` or `A`.
    pub looped: bool,
}

impl RoutePath {
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn terminal(&self) -> NodeId {
        *self.nodes.last().expect("route paths are nonempty")
    }

    pub fn routers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied().filter(|n| n.is_router())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    nodes: Vec<NodeId>,
    normal_dest: BTreeMap<NodeId, NodeId>,
    current_dest: BTreeMap<NodeId, NodeId>,
    pan_id: u16,
}

pub const DEFAULT_PAN_ID: u16 = 0x2024;

impl Topology {
    /// Testbed topology with the baseline routes of the given family.
    pub fn build(scenario: Scenario) -> Topology {
        let e = NodeId::edge;
        let r = NodeId::router;
        let c = NodeId::COORDINATOR;
        let routes = [
            (e(1), r(1)),
            (e(2), r(1)),
            (e(3), r(3)),
            (e(4), r(2)),
            (r(1), c),
            (r(2), c),
            (r(3), scenario.r3_baseline()),
        ];
        let normal_dest: BTreeMap<_, _> = routes.into_iter().collect();
        Topology {
            nodes: NodeId::roster().to_vec(),
            current_dest: normal_dest.clone(),
            normal_dest,
            pan_id: DEFAULT_PAN_ID,
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    pub fn pan_id(&self) -> u16 {
        self.pan_id
    }

    pub fn edges(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied().filter(|n| n.is_edge())
    }

    pub fn routers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied().filter(|n| n.is_router())
    }

    pub fn normal_dest(&self, node: NodeId) -> Option<NodeId> {
        self.normal_dest.get(&node).copied()
    }

    pub fn current_dest(&self, node: NodeId) -> Option<NodeId> {
        self.current_dest.get(&node).copied()
    }

    pub fn is_baseline(&self) -> bool {
        self.current_dest == self.normal_dest
    }

    /// Follows the live destination table from `src` until `C`, `A`, a
    /// node without a destination, or [`HOP_LIMIT`] hops.
    pub fn route_path(&self, src: NodeId) -> Result<RoutePath, NetError> {
        if !self.contains(src) {
            return Err(NetError::UnknownNode(src.to_string()));
        }
        let mut nodes = vec![src];
        let mut at = src;
        loop {
            if matches!(at.role(), Role::Coordinator | Role::Attacker) {
                return Ok(RoutePath { nodes, looped: false });
            }
            let Some(next) = self.current_dest(at) else {
                return Ok(RoutePath { nodes, looped: false });
            };
            if nodes.len() > HOP_LIMIT {
                return Ok(RoutePath { nodes, looped: true });
            }
            nodes.push(next);
            at = next;
        }
    }

    /// Rewrites the live destination of `target`.
    pub fn set_destination(&mut self, target: NodeId, new_dest: NodeId) -> Result<(), NetError> {
        let invalid = |reason| NetError::InvalidRedirection { target, new_dest, reason };
        if !self.contains(target) {
            return Err(NetError::UnknownNode(target.to_string()));
        }
        if !self.contains(new_dest) {
            return Err(NetError::UnknownNode(new_dest.to_string()));
        }
        match target.role() {
            Role::Coordinator => return Err(invalid("the coordinator has no destination")),
            Role::Attacker => return Err(invalid("the attacker never forwards")),
            Role::Router | Role::Edge => {}
        }
        if target == new_dest {
            return Err(invalid("a node cannot forward to itself"));
        }
        if new_dest.is_edge() {
            return Err(invalid("edge devices do not route"));
        }
        self.current_dest.insert(target, new_dest);
        Ok(())
    }

    /// Copy of `self` with one destination rewritten.
    pub fn with_destination(&self, target: NodeId, new_dest: NodeId) -> Result<Topology, NetError> {
        let mut t = self.clone();
        t.set_destination(target, new_dest)?;
        Ok(t)
    }

    /// Resets one node to its baseline destination.
    pub fn restore(&mut self, target: NodeId) {
        if let Some(d) = self.normal_dest.get(&target) {
            self.current_dest.insert(target, *d);
        }
    }

    pub fn restore_all(&mut self) {
        self.current_dest = self.normal_dest.clone();
    }

    /// Routers whose parent in the baseline tree is `node`.
    pub fn child_routers(&self, node: NodeId) -> Vec<NodeId> {
        self.routers().filter(|r| self.normal_dest(*r) == Some(node)).collect()
    }

    pub fn to_config(&self) -> TopologyConfig {
        TopologyConfig {
            pan_id: self.pan_id,
            nodes: self.nodes.clone(),
            routes: self.normal_dest.iter().map(|(s, d)| format!("{s}>{d}")).collect(),
        }
    }

    pub fn from_config(cfg: &TopologyConfig) -> Result<Topology, NetError> {
        let mut nodes = cfg.nodes.clone();
        nodes.sort();
        nodes.dedup();
        if nodes.len() != cfg.nodes.len() {
            return Err(NetError::Config("duplicate node".into()));
        }
        for (role, what) in [(Role::Coordinator, "coordinator"), (Role::Attacker, "attacker")] {
            if nodes.iter().filter(|n| n.role() == role).count() != 1 {
                return Err(NetError::Config(format!("expected exactly one {what}")));
            }
        }
        let mut normal_dest = BTreeMap::new();
        for token in &cfg.routes {
            let (s, d) = token.split_once('>').ok_or_else(|| NetError::Config(format!("bad route token `{token}`")))?;
            let (s, d): (NodeId, NodeId) = (s.parse()?, d.parse()?);
            if !nodes.contains(&s) || !nodes.contains(&d) {
                return Err(NetError::Config(format!("route `{token}` names a node outside the roster")));
            }
            if normal_dest.insert(s, d).is_some() {
                return Err(NetError::Config(format!("{s} has two destinations")));
            }
        }
        let t = Topology { nodes, current_dest: normal_dest.clone(), normal_dest, pan_id: cfg.pan_id };
        for n in t.edges().chain(t.routers()) {
            let path = t.route_path(n)?;
            if path.looped || path.terminal() != NodeId::COORDINATOR {
                return Err(NetError::Config(format!("{n} does not reach the coordinator")));
            }
        }
        Ok(t)
    }

    pub fn to_config_text(&self) -> String {
        toml::to_string(&self.to_config()).expect("topology config is always representable")
    }

    pub fn from_config_text(text: &str) -> Result<Topology, NetError> {
        let cfg: TopologyConfig = toml::from_str(text).map_err(|e| NetError::Config(e.to_string()))?;
        Topology::from_config(&cfg)
    }
}

/// On-disk topology description: node list plus baseline routes as `S>D` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub pan_id: u16,
    pub nodes: Vec<NodeId>,
    pub routes: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    #[test]
    fn baseline_r3_depends_on_family() {
        assert_eq!(Topology::build(Scenario::I).normal_dest(n("R3")), Some(n("R2")));
        assert_eq!(Topology::build(Scenario::II).normal_dest(n("R3")), Some(n("R2")));
        assert_eq!(Topology::build(Scenario::III).normal_dest(n("R3")), Some(n("C")));
        for s in Scenario::ALL {
            assert!(Topology::build(s).is_baseline());
        }
    }

    #[test]
    fn display_tokens() {
        let names: Vec<String> = NodeId::roster().iter().map(|n| n.to_string()).collect();
        assert_eq!(names, ["C", "R1", "R2", "R3", "E1", "E2", "E3", "E4", "A"]);
        assert!("E9".parse::<NodeId>().is_err());
        assert!("R0".parse::<NodeId>().is_err());
    }

    #[test]
    fn e3_path_through_r2() {
        let t = Topology::build(Scenario::I);
        let p = t.route_path(n("E3")).unwrap();
        assert_eq!(p.nodes, vec![n("E3"), n("R3"), n("R2"), n("C")]);
        assert!(!p.looped);
    }

    #[test]
    fn redirect_to_attacker_is_direct() {
        let mut t = Topology::build(Scenario::III);
        t.set_destination(n("E1"), NodeId::ATTACKER).unwrap();
        assert_eq!(t.route_path(n("E1")).unwrap().nodes, vec![n("E1"), n("A")]);
    }

    #[test]
    fn router_loop_is_truncated() {
        let mut t = Topology::build(Scenario::II);
        t.set_destination(n("R1"), n("R2")).unwrap();
        t.set_destination(n("R2"), n("R1")).unwrap();
        let p = t.route_path(n("R1")).unwrap();
        assert!(p.looped);
        assert_eq!(p.hops(), HOP_LIMIT);
        // oracle: alternate R1, R2 until the limit
        let expected: Vec<NodeId> = (0..=HOP_LIMIT).map(|i| if i % 2 == 0 { n("R1") } else { n("R2") }).collect();
        assert_eq!(p.nodes, expected);
    }

    #[test]
    fn set_destination_touches_one_entry() {
        let base = Topology::build(Scenario::I);
        let t = base.with_destination(n("E4"), n("R1")).unwrap();
        assert_eq!(t.current_dest(n("E4")), Some(n("R1")));
        for node in base.nodes() {
            if *node != n("E4") {
                assert_eq!(t.current_dest(*node), base.current_dest(*node));
            }
        }
        let mut restored = t.clone();
        restored.restore(n("E4"));
        assert_eq!(restored, base);
    }

    #[test]
    fn invalid_redirections() {
        let mut t = Topology::build(Scenario::I);
        assert!(matches!(t.set_destination(NodeId::COORDINATOR, n("R1")), Err(NetError::InvalidRedirection { .. })));
        assert!(matches!(t.set_destination(n("R1"), n("R1")), Err(NetError::InvalidRedirection { .. })));
        assert!(matches!(t.set_destination(n("E1"), n("E2")), Err(NetError::InvalidRedirection { .. })));
        assert!(t.is_baseline());
    }

    #[test]
    fn normal_paths_reach_coordinator_within_three_hops() {
        for s in Scenario::ALL {
            let t = Topology::build(s);
            for e in t.edges() {
                let p = t.route_path(e).unwrap();
                assert_eq!(p.terminal(), NodeId::COORDINATOR);
                assert!(p.hops() <= 3, "{s} {e}: {:?}", p.nodes);
            }
        }
    }

    #[test]
    fn child_routers_follow_baseline() {
        let t = Topology::build(Scenario::I);
        assert_eq!(t.child_routers(n("R2")), vec![n("R3")]);
        assert_eq!(t.child_routers(NodeId::COORDINATOR), vec![n("R1"), n("R2")]);
        let t = Topology::build(Scenario::III);
        assert!(t.child_routers(n("R2")).is_empty());
    }

    #[test]
    fn config_text_round_trip() {
        for s in Scenario::ALL {
            let t = Topology::build(s);
            let text = t.to_config_text();
            assert!(text.contains("\"E1>R1\""));
            assert_eq!(Topology::from_config_text(&text).unwrap(), t);
        }
    }

    #[test]
    fn config_rejects_cycles_and_duplicates() {
        let mut cfg = Topology::build(Scenario::I).to_config();
        cfg.routes.retain(|r| r != "R1>C");
        cfg.routes.push("R1>R3".into());
        cfg.routes.push("R3>R1".into());
        assert!(Topology::from_config(&cfg).is_err());

        let mut cfg = Topology::build(Scenario::I).to_config();
        cfg.nodes.push(NodeId::ATTACKER);
        assert!(Topology::from_config(&cfg).is_err());
    }
}
