//! Plain Dijkstra over the directed link graph.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::network::{LinkId, NodeId, RoadNetwork};

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: NodeId,
}

impl Eq for HeapEntry {}

// BinaryHeap is a max-heap; reverse the order to pop the cheapest node first.
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Where a search may start: at `node` having already paid `cost`, after
/// traversing the optional partial link `via`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub node: NodeId,
    pub cost: f64,
    pub via: Option<LinkId>,
}

/// Where a search may end: at `node`, then paying `extra` for the optional
/// partial link `via`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub node: NodeId,
    pub extra: f64,
    pub via: Option<LinkId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchPath {
    pub cost: f64,
    pub links: Vec<LinkId>,
    /// Indices of the seed and target the path uses.
    pub seed: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy)]
enum Pred {
    Seed(usize),
    Link(LinkId),
}

struct State {
    dist: Vec<f64>,
    pred: Vec<Option<Pred>>,
    settled: Vec<bool>,
}

impl State {
    fn path(&self, net: &RoadNetwork, seeds: &[Seed], node: NodeId) -> Vec<LinkId> {
        self.path_and_seed(net, seeds, node).0
    }

    fn path_and_seed(&self, net: &RoadNetwork, seeds: &[Seed], mut node: NodeId) -> (Vec<LinkId>, usize) {
        let mut rev = Vec::new();
        let mut seed = 0;
        loop {
            match self.pred[node.index()] {
                Some(Pred::Link(l)) => {
                    rev.push(l);
                    node = net.link(l).from;
                }
                Some(Pred::Seed(i)) => {
                    rev.extend(seeds[i].via);
                    seed = i;
                    break;
                }
                None => break,
            }
        }
        rev.reverse();
        (rev, seed)
    }
}

/// Minimum-cost path from any seed to any target. `junction_delay` is paid
/// each time the path passes through a node between two links. Equal-cost
/// paths are resolved by the lexicographically smallest link sequence.
pub fn search(
    net: &RoadNetwork,
    seeds: &[Seed],
    targets: &[Target],
    link_cost: impl Fn(LinkId) -> f64,
    junction_delay: f64,
) -> Option<SearchPath> {
    let n = net.node_count();
    let mut st = State {
        dist: vec![f64::INFINITY; n],
        pred: vec![None; n],
        settled: vec![false; n],
    };
    let mut heap = BinaryHeap::new();
    for (i, s) in seeds.iter().enumerate() {
        let d = &mut st.dist[s.node.index()];
        let better = s.cost < *d
            || (s.cost == *d
                && match st.pred[s.node.index()] {
                    Some(Pred::Seed(j)) => s.via.into_iter().lt(seeds[j].via),
                    _ => false,
                });
        if better {
            *d = s.cost;
            st.pred[s.node.index()] = Some(Pred::Seed(i));
            heap.push(HeapEntry { cost: s.cost, node: s.node });
        }
    }

    let mut targets_at: HashMap<NodeId, Vec<(usize, &Target)>> = HashMap::new();
    for (i, t) in targets.iter().enumerate() {
        targets_at.entry(t.node).or_default().push((i, t));
    }
    let mut best: Option<SearchPath> = None;

    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if st.settled[node.index()] || cost > st.dist[node.index()] {
            continue;
        }
        if best.as_ref().is_some_and(|b| cost > b.cost) {
            break;
        }
        st.settled[node.index()] = true;
        let (path, seed) = st.path_and_seed(net, seeds, node);

        if let Some(ts) = targets_at.get(&node) {
            for &(ti, t) in ts {
                let mut total = cost;
                if t.via.is_some() && !path.is_empty() {
                    total += junction_delay;
                }
                total += t.extra;
                let mut links = path.clone();
                links.extend(t.via);
                if links.is_empty() {
                    // Origin and destination coincide; not a route.
                    continue;
                }
                let take = match &best {
                    None => true,
                    Some(b) => total < b.cost || (total == b.cost && links < b.links),
                };
                if take {
                    best = Some(SearchPath {
                        cost: total,
                        links,
                        seed,
                        target: ti,
                    });
                }
            }
        }

        let delay = if path.is_empty() { 0.0 } else { junction_delay };
        for &l in net.outgoing(node) {
            let link = net.link(l);
            let next = link.to;
            if st.settled[next.index()] {
                continue;
            }
            let nd = cost + link_cost(l) + delay;
            let cur = st.dist[next.index()];
            let better = nd < cur
                || (nd == cur && {
                    let mut candidate = path.clone();
                    candidate.push(l);
                    candidate < st.path(net, seeds, next)
                });
            if better {
                st.dist[next.index()] = nd;
                st.pred[next.index()] = Some(Pred::Link(l));
                heap.push(HeapEntry { cost: nd, node: next });
            }
        }
    }
    best
}

/// Shortest-path tree from one node, pruned beyond `cutoff`.
#[derive(Debug, Clone)]
pub struct BoundedTree {
    source: NodeId,
    dist: HashMap<NodeId, f64>,
    pred: HashMap<NodeId, LinkId>,
}

impl BoundedTree {
    pub fn new(net: &RoadNetwork, source: NodeId, cutoff: f64, link_cost: impl Fn(LinkId) -> f64) -> Self {
        let mut dist = HashMap::from([(source, 0.0)]);
        let mut pred: HashMap<NodeId, LinkId> = HashMap::new();
        let mut settled = std::collections::HashSet::new();
        let mut heap = BinaryHeap::from([HeapEntry { cost: 0.0, node: source }]);
        while let Some(HeapEntry { cost, node }) = heap.pop() {
            if !settled.insert(node) {
                continue;
            }
            for &l in net.outgoing(node) {
                let next = net.link(l).to;
                let nd = cost + link_cost(l);
                if nd > cutoff || settled.contains(&next) {
                    continue;
                }
                let better = match dist.get(&next) {
                    None => true,
                    Some(&d) => nd < d || (nd == d && l < pred[&next]),
                };
                if better {
                    dist.insert(next, nd);
                    pred.insert(next, l);
                    heap.push(HeapEntry { cost: nd, node: next });
                }
            }
        }
        Self { source, dist, pred }
    }

    pub fn distance(&self, node: NodeId) -> Option<f64> {
        self.dist.get(&node).copied()
    }

    /// Links from the source to `node`, if reached.
    pub fn path_to(&self, net: &RoadNetwork, mut node: NodeId) -> Option<Vec<LinkId>> {
        self.dist.get(&node)?;
        let mut rev = Vec::new();
        while node != self.source {
            let l = self.pred[&node];
            rev.push(l);
            node = net.link(l).from;
        }
        rev.reverse();
        Some(rev)
    }
}
