//! Infrastructure graph: controllers, switches and APs joined by links.

use std::collections::BTreeMap;

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};

use crate::scenario::Scenario;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Link {
    /// seconds
    pub latency: f64,
    /// Mbps
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathInfo {
    pub nodes: Vec<String>,
    pub latency: f64,
    /// Smallest link rate on the path; infinite for an empty path.
    pub bottleneck: f64,
}

#[derive(Clone, Debug)]
pub struct Topology {
    graph: UnGraph<String, Link>,
    index: BTreeMap<String, NodeIndex>,
    cache: BTreeMap<(String, String), Option<PathInfo>>,
}

impl Topology {
    pub fn from_scenario(s: &Scenario) -> Self {
        let mut graph = UnGraph::new_undirected();
        let mut index = BTreeMap::new();
        let names = s
            .controllers
            .iter()
            .map(|c| &c.name)
            .chain(s.switches.iter().map(|w| &w.name))
            .chain(s.aps.iter().map(|a| &a.name));
        for n in names {
            index.insert(n.clone(), graph.add_node(n.clone()));
        }
        for l in &s.links {
            let (Some(&a), Some(&b)) = (index.get(&l.a), index.get(&l.b)) else {
                continue;
            };
            graph.add_edge(
                a,
                b,
                Link {
                    latency: l.latency.unwrap_or(s.params.infra_latency),
                    rate: l.rate.unwrap_or(s.params.link_rate),
                },
            );
        }
        Topology {
            graph,
            index,
            cache: BTreeMap::new(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Lowest-latency path; ties go to the fewest hops.
    pub fn path(&mut self, from: &str, to: &str) -> Option<PathInfo> {
        let key = (from.to_string(), to.to_string());
        if let Some(p) = self.cache.get(&key) {
            return p.clone();
        }
        let p = self.compute(from, to);
        self.cache.insert(key, p.clone());
        p
    }

    fn compute(&self, from: &str, to: &str) -> Option<PathInfo> {
        let (&a, &b) = (self.index.get(from)?, self.index.get(to)?);
        // hop count breaks latency ties deterministically
        let (_, nodes) = astar(
            &self.graph,
            a,
            |n| n == b,
            |e| (e.weight().latency * 1e9).round() as u64 * 1024 + 1,
            |_| 0,
        )?;
        let mut latency = 0.0;
        let mut bottleneck = f64::INFINITY;
        for w in nodes.windows(2) {
            let e = self.graph.find_edge(w[0], w[1]).expect("edge on path");
            let l = self.graph[e];
            latency += l.latency;
            bottleneck = bottleneck.min(l.rate);
        }
        Some(PathInfo {
            nodes: nodes.iter().map(|n| self.graph[*n].clone()).collect(),
            latency,
            bottleneck,
        })
    }
}
