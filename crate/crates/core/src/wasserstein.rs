//! Exact 1-Wasserstein distance between finitely supported measures.
//!
//! The transport linear program is solved by a primal network simplex on
//! the bipartite graph `sources → sinks` with an artificial root. The
//! spanning tree is rebuilt from its arc list after every pivot, which keeps
//! the bookkeeping short; the strongly feasible leaving-arc rule (first
//! blocking arc on the source side, last on the sink side) rules out cycling
//! on degenerate pivots.

use ndarray::Array2;

use crate::measure::{Coupling, DiscreteMeasure, GroundMetric, Point};
use crate::{Error, Result};

/// Largest combined number of atoms accepted by [`wasserstein1`].
pub const EXACT_CAP: usize = 2048;

/// Relative threshold on reduced costs below which an arc may enter.
const PRICING_TOL: f64 = 1e-11;

/// Something with weighted atoms. Each atom is a tuple of factor points: one
/// factor for a measure, two (row, column) for a coupling.
pub trait Transportable {
    fn atom_count(&self) -> usize;
    fn factored_atoms(&self) -> Vec<(Vec<&Point>, f64)>;
}

impl Transportable for DiscreteMeasure {
    fn atom_count(&self) -> usize {
        self.len()
    }

    fn factored_atoms(&self) -> Vec<(Vec<&Point>, f64)> {
        self.atoms()
            .iter()
            .zip(self.weights())
            .map(|(a, &w)| (vec![a], w))
            .collect()
    }
}

impl Transportable for Coupling {
    fn atom_count(&self) -> usize {
        self.mass().iter().filter(|&&m| m > 0.0).count()
    }

    fn factored_atoms(&self) -> Vec<(Vec<&Point>, f64)> {
        let mut out = Vec::new();
        for ((i, j), &m) in self.mass().indexed_iter() {
            if m > 0.0 {
                out.push((vec![&self.row_support()[i], &self.col_support()[j]], m));
            }
        }
        out
    }
}

/// Weighted atoms on a product of two spaces, not tied to a grid. Produced by
/// [`coarse_grain`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProductCloud {
    atoms: Vec<(Point, Point, f64)>,
}

impl ProductCloud {
    pub fn atoms(&self) -> &[(Point, Point, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.2).sum()
    }
}

impl Transportable for ProductCloud {
    fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    fn factored_atoms(&self) -> Vec<(Vec<&Point>, f64)> {
        self.atoms.iter().map(|(x, y, m)| (vec![x, y], *m)).collect()
    }
}

/// Aggregates a coupling on scalar supports onto a `grid × grid` array of
/// equal bins over `[x_lo, x_hi] × [y_lo, y_hi]`. Each nonempty bin becomes one
/// atom at the mass-weighted barycenter of the cells it collects; cells
/// outside the box fall into the nearest edge bin.
///
/// Moving mass to its bin barycenter costs at most one bin diagonal in the
/// product max metric, so `W₁` between two coarse-grained couplings is within
/// two bin widths of the exact value.
pub fn coarse_grain(pi: &Coupling, x_range: (f64, f64), y_range: (f64, f64), grid: usize) -> Result<ProductCloud> {
    if grid == 0 {
        return Err(Error::InvalidConfig("coarse grid needs at least one bin".into()));
    }
    let scalar = |pts: &[Point]| pts.iter().all(|p| p.dim() == 1);
    if !scalar(pi.row_support()) || !scalar(pi.col_support()) {
        return Err(Error::Dimension("coarse graining needs scalar supports".into()));
    }
    for (lo, hi) in [x_range, y_range] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!("bad coarse-graining range [{lo}, {hi}]")));
        }
    }
    let bin = |v: f64, (lo, hi): (f64, f64)| -> usize {
        if hi <= lo {
            return 0;
        }
        let t = ((v - lo) / (hi - lo) * grid as f64).floor();
        t.clamp(0.0, (grid - 1) as f64) as usize
    };
    let mut acc = vec![(0.0, 0.0, 0.0); grid * grid];
    for ((i, j), &m) in pi.mass().indexed_iter() {
        if m > 0.0 {
            let (x, y) = (pi.row_support()[i].x(), pi.col_support()[j].x());
            let slot = &mut acc[bin(x, x_range) * grid + bin(y, y_range)];
            slot.0 += m * x;
            slot.1 += m * y;
            slot.2 += m;
        }
    }
    let atoms = acc
        .into_iter()
        .filter(|a| a.2 > 0.0)
        .map(|(sx, sy, m)| (Point::scalar(sx / m), Point::scalar(sy / m), m))
        .collect();
    Ok(ProductCloud { atoms })
}

fn factored_distance(a: &[&Point], b: &[&Point], metric: GroundMetric) -> f64 {
    let per_factor = a.iter().zip(b).map(|(p, q)| p.euclidean(q));
    match metric {
        GroundMetric::ProductMax => per_factor.fold(0.0, f64::max),
        GroundMetric::EuclideanOnPoints => per_factor.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

/// Exact `W₁(a, b)` for the given ground metric. Couplings are compared as
/// measures on the product space; with [`GroundMetric::ProductMax`] the
/// distance between cells is `max(d(x, x′), d(y, y′))`.
pub fn wasserstein1<T: Transportable>(a: &T, b: &T, metric: GroundMetric) -> Result<f64> {
    let size = a.atom_count() + b.atom_count();
    if size > EXACT_CAP {
        return Err(Error::Capacity {
            size,
            cap: EXACT_CAP,
        });
    }
    let atoms_a = a.factored_atoms();
    let atoms_b = b.factored_atoms();
    if atoms_a.first().map(|x| x.0.len()) != atoms_b.first().map(|x| x.0.len()) {
        return Err(Error::Dimension("cannot compare a measure with a coupling".into()));
    }
    let wa: Vec<f64> = atoms_a.iter().map(|x| x.1).collect();
    let wb: Vec<f64> = atoms_b.iter().map(|x| x.1).collect();
    let cost = Array2::from_shape_fn((atoms_a.len(), atoms_b.len()), |(i, j)| {
        factored_distance(&atoms_a[i].0, &atoms_b[j].0, metric)
    });
    Ok(optimal_transport(&wa, &wb, &cost)?.cost)
}

/// An optimal plan of the transport linear program.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub flow: Array2<f64>,
    pub cost: f64,
    pub pivots: usize,
}

/// Solves `min ⟨C, Γ⟩` over nonnegative `Γ` with row sums `supply` and column
/// sums `demand`. Both vectors must be nonnegative with equal totals (within
/// rounding).
pub fn optimal_transport(supply: &[f64], demand: &[f64], cost: &Array2<f64>) -> Result<TransportPlan> {
    let (m, n) = (supply.len(), demand.len());
    if cost.dim() != (m, n) {
        return Err(Error::ShapeMismatch {
            expected: (m, n),
            found: cost.dim(),
        });
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidMeasure("empty marginal".into()));
    }
    if supply.iter().chain(demand).any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidMeasure("negative or non-finite weight".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidCost("non-finite transport cost".into()));
    }
    let (ts, td) = (supply.iter().sum::<f64>(), demand.iter().sum::<f64>());
    if (ts - td).abs() > 1e-9 * ts.max(td).max(1.0) {
        return Err(Error::InvalidMeasure(format!("unbalanced totals {ts} vs {td}")));
    }
    let mut ns = NetworkSimplex::new(supply, demand, cost);
    ns.run()?;
    Ok(ns.into_plan())
}

struct NetworkSimplex<'a> {
    m: usize,
    n: usize,
    cost: &'a Array2<f64>,
    art_cost: f64,
    scale: f64,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    tree_arcs: Vec<usize>,
    tree_slot: Vec<usize>,
    // Rebuilt after every pivot.
    parent: Vec<usize>,
    pred: Vec<usize>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    adj_start: Vec<usize>,
    adj: Vec<usize>,
    stack: Vec<usize>,
    next_arc: usize,
    block: usize,
    pivots: usize,
}

const NONE: usize = usize::MAX;

impl<'a> NetworkSimplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a Array2<f64>) -> Self {
        let (m, n) = cost.dim();
        let real = m * n;
        let nodes = m + n + 1;
        let max_cost = cost.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
        let art_cost = (max_cost + 1.0) * nodes as f64;

        let mut flow = vec![0.0; real + m + n];
        let mut in_tree = vec![false; real + m + n];
        let mut tree_arcs = Vec::with_capacity(m + n);
        let mut tree_slot = vec![NONE; real + m + n];
        for u in 0..m + n {
            let e = real + u;
            flow[e] = if u < m { supply[u] } else { demand[u - m] };
            in_tree[e] = true;
            tree_slot[e] = tree_arcs.len();
            tree_arcs.push(e);
        }
        let block = ((real as f64).sqrt().ceil() as usize).max(10);
        NetworkSimplex {
            m,
            n,
            cost,
            art_cost,
            scale: max_cost.max(f64::MIN_POSITIVE),
            flow,
            in_tree,
            tree_arcs,
            tree_slot,
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            depth: vec![0; nodes],
            pi: vec![0.0; nodes],
            adj_start: vec![0; nodes + 1],
            adj: vec![0; 2 * (m + n)],
            stack: Vec::with_capacity(nodes),
            next_arc: 0,
            block,
            pivots: 0,
        }
    }

    fn root(&self) -> usize {
        self.m + self.n
    }

    /// Tail and head of arc `e`. Real arcs run source → sink; artificial arcs
    /// run source → root and root → sink.
    fn ends(&self, e: usize) -> (usize, usize) {
        let real = self.m * self.n;
        if e < real {
            (e / self.n, self.m + e % self.n)
        } else {
            let u = e - real;
            if u < self.m {
                (u, self.root())
            } else {
                (self.root(), u)
            }
        }
    }

    fn arc_cost(&self, e: usize) -> f64 {
        let real = self.m * self.n;
        if e < real {
            self.cost[[e / self.n, e % self.n]]
        } else if e - real < self.m {
            0.0
        } else {
            self.art_cost
        }
    }

    fn rebuild_tree(&mut self) {
        let nodes = self.m + self.n + 1;
        self.adj_start.iter_mut().for_each(|s| *s = 0);
        for &e in &self.tree_arcs {
            let (s, t) = self.ends(e);
            self.adj_start[s + 1] += 1;
            self.adj_start[t + 1] += 1;
        }
        for u in 0..nodes {
            self.adj_start[u + 1] += self.adj_start[u];
        }
        let mut fill = self.adj_start.clone();
        for k in 0..self.tree_arcs.len() {
            let e = self.tree_arcs[k];
            let (s, t) = self.ends(e);
            self.adj[fill[s]] = e;
            fill[s] += 1;
            self.adj[fill[t]] = e;
            fill[t] += 1;
        }

        let root = self.root();
        self.parent[root] = NONE;
        self.pred[root] = NONE;
        self.depth[root] = 0;
        self.pi[root] = 0.0;
        self.stack.clear();
        self.stack.push(root);
        while let Some(u) = self.stack.pop() {
            for k in self.adj_start[u]..self.adj_start[u + 1] {
                let e = self.adj[k];
                if e == self.pred[u] {
                    continue;
                }
                let (s, t) = self.ends(e);
                let v = if s == u { t } else { s };
                self.parent[v] = u;
                self.pred[v] = e;
                self.depth[v] = self.depth[u] + 1;
                // Tree arcs have zero reduced cost: c + π(s) − π(t) = 0.
                self.pi[v] = if v == t {
                    self.pi[u] + self.arc_cost(e)
                } else {
                    self.pi[u] - self.arc_cost(e)
                };
                self.stack.push(v);
            }
        }
    }

    /// Block search over real arcs for a negative reduced cost.
    fn entering_arc(&mut self) -> Option<usize> {
        let real = self.m * self.n;
        let threshold = -PRICING_TOL * self.scale;
        let mut best = threshold;
        let mut found = None;
        let mut count = self.block;
        for step in 0..real {
            let e = (self.next_arc + step) % real;
            if !self.in_tree[e] {
                let (i, j) = (e / self.n, e % self.n);
                let reduced = self.cost[[i, j]] + self.pi[i] - self.pi[self.m + j];
                if reduced < best {
                    best = reduced;
                    found = Some(e);
                }
            }
            count -= 1;
            if count == 0 {
                if found.is_some() {
                    self.next_arc = (e + 1) % real;
                    return found;
                }
                count = self.block;
            }
        }
        found
    }

    fn pivot(&mut self, entering: usize) {
        let (s, t) = self.ends(entering);
        // Join node of the cycle closed by the entering arc.
        let (mut u, mut v) = (s, t);
        while u != v {
            if self.depth[u] >= self.depth[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        let join = u;

        let mut delta = f64::INFINITY;
        let mut leaving_node = NONE;
        let mut u = s;
        while u != join {
            let e = self.pred[u];
            if self.ends(e).0 == u && self.flow[e] < delta {
                delta = self.flow[e];
                leaving_node = u;
            }
            u = self.parent[u];
        }
        let mut u = t;
        while u != join {
            let e = self.pred[u];
            if self.ends(e).1 == u && self.flow[e] <= delta {
                delta = self.flow[e];
                leaving_node = u;
            }
            u = self.parent[u];
        }
        debug_assert!(leaving_node != NONE, "uncapacitated cycle without a blocking arc");
        let delta = delta.max(0.0);

        if delta > 0.0 {
            self.flow[entering] += delta;
            let mut u = s;
            while u != join {
                let e = self.pred[u];
                if self.ends(e).0 == u {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = t;
            while u != join {
                let e = self.pred[u];
                if self.ends(e).0 == u {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }

        let leaving = self.pred[leaving_node];
        self.flow[leaving] = 0.0;
        let slot = self.tree_slot[leaving];
        self.tree_arcs[slot] = entering;
        self.tree_slot[entering] = slot;
        self.tree_slot[leaving] = NONE;
        self.in_tree[leaving] = false;
        self.in_tree[entering] = true;
        self.pivots += 1;
    }

    fn run(&mut self) -> Result<()> {
        let real = self.m * self.n;
        let max_pivots = 50 * (real + self.m + self.n) + 10_000;
        loop {
            self.rebuild_tree();
            let Some(e) = self.entering_arc() else { break };
            if self.pivots >= max_pivots {
                return Err(Error::InvalidConfig(format!(
                    "network simplex exceeded {max_pivots} pivots"
                )));
            }
            self.pivot(e);
        }
        let total: f64 = self.flow[..real].iter().sum();
        let stranded: f64 = self.flow[real..].iter().sum();
        if stranded > 1e-9 * total.max(1.0) {
            return Err(Error::InvalidMeasure(format!(
                "transport problem infeasible: {stranded:e} mass left on artificial arcs"
            )));
        }
        Ok(())
    }

    fn into_plan(self) -> TransportPlan {
        let real = self.m * self.n;
        let flow = Array2::from_shape_vec((self.m, self.n), self.flow[..real].to_vec())
            .expect("flow length matches");
        let cost = flow.iter().zip(self.cost.iter()).map(|(f, c)| f * c).sum();
        TransportPlan {
            flow,
            cost,
            pivots: self.pivots,
        }
    }
}
