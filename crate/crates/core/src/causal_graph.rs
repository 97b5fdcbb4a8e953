// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-tier causal graphs built from patching sweeps.
//!
//! Timestep nodes `T<t>` feed head nodes `L<ℓ>H<h>`, which feed the class
//! node `C<y>` of the pair's true class. A timestep edge carries the
//! position-level ΔP of that `(ℓ, h, t)` patch and a class edge carries the
//! head-level ΔP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::TapPoint;
use crate::patching::{find_critical, Granularity, SweepReport};
use crate::report::Provenance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Timestep(usize),
    Head { layer: usize, head: usize },
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Timestep,
    Head,
    Class,
}

impl Tier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Timestep => "timestep",
            Tier::Head => "head",
            Tier::Class => "class",
        }
    }
}

impl Node {
    pub fn tier(&self) -> Tier {
        match self {
            Node::Timestep(_) => Tier::Timestep,
            Node::Head { .. } => Tier::Head,
            Node::Class(_) => Tier::Class,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Timestep(t) => write!(f, "T{t}"),
            Node::Head { layer, head } => write!(f, "L{layer}H{head}"),
            Node::Class(c) => write!(f, "C{c}"),
        }
    }
}

impl FromStr for Node {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad node id `{s}`"));
        let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
        if let Some(rest) = s.strip_prefix('T') {
            Ok(Node::Timestep(num(rest)?))
        } else if let Some(rest) = s.strip_prefix('C') {
            Ok(Node::Class(num(rest)?))
        } else if let Some(rest) = s.strip_prefix('L') {
            let (l, h) = rest.split_once('H').ok_or_else(bad)?;
            Ok(Node::Head {
                layer: num(l)?,
                head: num(h)?,
            })
        } else {
            Err(bad())
        }
    }
}

impl Serialize for Node {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: Node,
    pub tier: Tier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GraphKind {
    TopK { k: usize },
    Threshold { theta_head: f32, theta_pos: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub kind: GraphKind,
    pub true_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<Edge>,
}

impl CausalGraph {
    fn assemble(kind: GraphKind, true_class: usize, edges: BTreeMap<(Node, Node), f32>) -> Self {
        let mut nodes = BTreeSet::new();
        for (from, to) in edges.keys() {
            nodes.insert(*from);
            nodes.insert(*to);
        }
        Self {
            kind,
            true_class,
            provenance: None,
            nodes: nodes.into_iter().map(|id| NodeEntry { id, tier: id.tier() }).collect(),
            edges: edges
                .into_iter()
                .map(|((from, to), weight)| Edge { from, to, weight })
                .collect(),
        }
    }

    pub fn with_provenance(mut self, prov: Provenance) -> Self {
        self.provenance = Some(prov);
        self
    }

    pub fn nodes_in(&self, tier: Tier) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.tier == tier).map(|n| &n.id)
    }

    /// Checks tier discipline, node/edge consistency and finite weights.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<Node> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("duplicate graph node".into()));
        }
        if let Some(n) = self.nodes.iter().find(|n| n.tier != n.id.tier()) {
            return Err(Error::InvalidArgument(format!("node {} has tier {:?}", n.id, n.tier)));
        }
        let mut incident = BTreeSet::new();
        for e in &self.edges {
            let ok = matches!(
                (e.from.tier(), e.to.tier()),
                (Tier::Timestep, Tier::Head) | (Tier::Head, Tier::Class)
            );
            if !ok {
                return Err(Error::InvalidArgument(format!("edge {} -> {} skips or stays in a tier", e.from, e.to)));
            }
            if !ids.contains(&e.from) || !ids.contains(&e.to) {
                return Err(Error::InvalidArgument(format!("edge {} -> {} has an unknown endpoint", e.from, e.to)));
            }
            if !e.weight.is_finite() {
                return Err(Error::NonFinite(format!("weight of edge {} -> {}", e.from, e.to)));
            }
            incident.insert(e.from);
            incident.insert(e.to);
        }
        if let Some(n) = self.nodes.iter().find(|n| !incident.contains(&n.id)) {
            return Err(Error::InvalidArgument(format!("node {} has no edges", n.id)));
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: CausalGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_dot(&self, style: &DotStyle) -> String {
        let mut out = String::new();
        if let Some(p) = &self.provenance {
            writeln!(out, "// provenance: {}", serde_json::to_string(p).expect("provenance serializes")).unwrap();
        }
        out.push_str("digraph causal_graph {\n  rankdir=LR;\n  node [style=filled];\n");
        for n in &self.nodes {
            let (color, shape) = match n.tier {
                Tier::Timestep => (&style.timestep, "ellipse"),
                Tier::Head => (&style.head, "box"),
                Tier::Class => (&style.class, "doublecircle"),
            };
            writeln!(
                out,
                "  \"{}\" [class=\"{}\", shape={shape}, fillcolor=\"{color}\"];",
                n.id,
                n.tier.as_str()
            )
            .unwrap();
        }
        for e in &self.edges {
            writeln!(out, "  \"{}\" -> \"{}\" [label=\"{:.4}\"];", e.from, e.to, e.weight).unwrap();
        }
        out.push_str("}\n");
        out
    }
}

/// Fill colours of the three tiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotStyle {
    pub timestep: String,
    pub head: String,
    pub class: String,
}

impl Default for DotStyle {
    fn default() -> Self {
        Self {
            timestep: "#b8e186".into(),
            head: "#92c5de".into(),
            class: "#fdb863".into(),
        }
    }
}

fn head_deltas(head_sweep: &SweepReport) -> Result<BTreeMap<(usize, usize), f32>> {
    if head_sweep.granularity != Granularity::Head {
        return Err(Error::InvalidArgument("expected a head-granularity sweep".into()));
    }
    Ok(head_sweep
        .results
        .iter()
        .filter_map(|r| match r.targets.as_slice() {
            [TapPoint::Head { layer, head }] => Some(((*layer, *head), r.delta_p)),
            _ => None,
        })
        .collect())
}

fn position_sweeps(sweeps: &[SweepReport]) -> Result<Vec<&SweepReport>> {
    if let Some(s) = sweeps.iter().find(|s| s.granularity != Granularity::Position) {
        return Err(Error::InvalidArgument(format!(
            "expected position sweeps, got a {} sweep",
            s.granularity.as_str()
        )));
    }
    Ok(sweeps.iter().collect())
}

/// Graph of the `k` position patches with the largest positive ΔP.
pub fn build_topk_graph(positions: &[SweepReport], heads: &SweepReport, true_class: usize, k: usize) -> Result<CausalGraph> {
    let head_dp = head_deltas(heads)?;
    let ranked = find_critical(position_sweeps(positions)?, 0.0)?;
    if k > ranked.len() {
        warn!("requested top-{k} patches but only {} have positive ΔP; truncating", ranked.len());
    }
    let mut edges = BTreeMap::new();
    for c in ranked.iter().take(k) {
        let TapPoint::HeadPos { layer, head, t } = c.target else {
            return Err(Error::InvalidArgument(format!("{} is not a position patch", c.target.label())));
        };
        let hd = *head_dp.get(&(layer, head)).ok_or_else(|| {
            Error::InvalidArgument(format!("head sweep has no entry for L{layer}H{head}"))
        })?;
        let hn = Node::Head { layer, head };
        edges.insert((Node::Timestep(t), hn), c.delta_p);
        edges.insert((hn, Node::Class(true_class)), hd);
    }
    Ok(CausalGraph::assemble(GraphKind::TopK { k }, true_class, edges))
}

/// Heads with ΔP ≥ `theta_head` link to the class; for each kept head,
/// timesteps whose patch has ΔP ≥ `theta_pos` link to it.
pub fn build_threshold_graph(
    positions: &[SweepReport],
    heads: &SweepReport,
    true_class: usize,
    theta_head: f32,
    theta_pos: f32,
) -> Result<CausalGraph> {
    if theta_head.is_nan() || theta_pos.is_nan() {
        return Err(Error::InvalidArgument("thresholds must not be NaN".into()));
    }
    let head_dp = head_deltas(heads)?;
    let positions = position_sweeps(positions)?;
    let mut edges = BTreeMap::new();
    for (&(layer, head), &hd) in &head_dp {
        if hd < theta_head {
            continue;
        }
        let hn = Node::Head { layer, head };
        edges.insert((hn, Node::Class(true_class)), hd);
        let sweep = positions
            .iter()
            .find(|s| s.layer == Some(layer) && s.head == Some(head))
            .ok_or_else(|| Error::InvalidArgument(format!("no position sweep for L{layer}H{head}")))?;
        for r in &sweep.results {
            if let [TapPoint::HeadPos { t, .. }] = r.targets.as_slice() {
                if r.delta_p >= theta_pos {
                    edges.insert((Node::Timestep(*t), hn), r.delta_p);
                }
            }
        }
    }
    Ok(CausalGraph::assemble(
        GraphKind::Threshold { theta_head, theta_pos },
        true_class,
        edges,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degrees {
    /// Out-degree of every timestep node, highest first.
    pub timestep_out: Vec<(Node, usize)>,
    /// In-degree of every head node from timesteps, highest first.
    pub head_in: Vec<(Node, usize)>,
}

impl Degrees {
    pub fn timestep_total(&self) -> usize {
        self.timestep_out.iter().map(|(_, d)| d).sum()
    }

    pub fn head_total(&self) -> usize {
        self.head_in.iter().map(|(_, d)| d).sum()
    }
}

/// Degree centrality over timestep→head edges only.
pub fn degree_centrality(g: &CausalGraph) -> Degrees {
    let mut out: BTreeMap<Node, usize> = g.nodes_in(Tier::Timestep).map(|&n| (n, 0)).collect();
    let mut inn: BTreeMap<Node, usize> = g.nodes_in(Tier::Head).map(|&n| (n, 0)).collect();
    for e in g.edges.iter().filter(|e| e.from.tier() == Tier::Timestep) {
        *out.entry(e.from).or_default() += 1;
        *inn.entry(e.to).or_default() += 1;
    }
    let sorted = |m: BTreeMap<Node, usize>| {
        let mut v: Vec<(Node, usize)> = m.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    };
    Degrees {
        timestep_out: sorted(out),
        head_in: sorted(inn),
    }
}

pub fn degrees_csv(prov: &Provenance, d: &Degrees) -> String {
    let mut out = prov.csv_comment();
    out.push_str("node,tier,degree\n");
    for (n, k) in d.timestep_out.iter().chain(&d.head_in) {
        writeln!(out, "{n},{},{k}", n.tier().as_str()).unwrap();
    }
    out
}
