//! Binary grid CRFs: topology, potentials, and exact inference by enumeration.
//!
//! Pairwise tables are stored once per canonical edge `(i, j)` with `i < j`,
//! indexed `z_i * 2 + z_j`. Anything that walks an edge from `j` to `i` must
//! transpose that index; [`PotentialTable::oriented`] does it in one place.

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};

/// Largest node count the enumeration oracle accepts.
pub const MAX_ENUMERATION_NODES: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridGraph {
    height: usize,
    width: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    /// Per node, `(neighbor, canonical edge index)`.
    incident: Vec<Vec<(usize, usize)>>,
}

impl GridGraph {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("grid {height}x{width} has a zero dimension")));
        }
        let m = height * width;
        let mut edges = Vec::with_capacity(height * (width - 1) + (height - 1) * width);
        for i in 0..m {
            let (r, c) = (i / width, i % width);
            if c + 1 < width {
                edges.push((i, i + 1));
            }
            if r + 1 < height {
                edges.push((i, i + width));
            }
        }
        let mut neighbors = vec![Vec::new(); m];
        let mut incident = vec![Vec::new(); m];
        for (e, &(i, j)) in edges.iter().enumerate() {
            neighbors[i].push(j);
            neighbors[j].push(i);
            incident[i].push((j, e));
            incident[j].push((i, e));
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        for n in &mut incident {
            n.sort_unstable();
        }
        Ok(GridGraph {
            height,
            width,
            edges,
            neighbors,
            incident,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical edges `(i, j)`, `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `(neighbor, canonical edge index)` pairs for node `i`.
    pub fn incident(&self, i: usize) -> &[(usize, usize)] {
        &self.incident[i]
    }

    pub fn node(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn is_acyclic(&self) -> bool {
        self.height == 1 || self.width == 1
    }

    /// Directed edges: index `2e` is `i → j` along canonical edge `e = (i, j)`, `2e + 1` is `j → i`.
    pub fn directed_edge(&self, d: usize) -> (usize, usize) {
        let (i, j) = self.edges[d / 2];
        if d % 2 == 0 {
            (i, j)
        } else {
            (j, i)
        }
    }

    pub fn num_directed(&self) -> usize {
        2 * self.edges.len()
    }

    /// Index of the directed edge `from → to`; panics if they are not adjacent.
    pub fn directed_index(&self, from: usize, to: usize) -> usize {
        let (_, e) = *self.incident[from]
            .iter()
            .find(|(n, _)| *n == to)
            .expect("nodes are not adjacent");
        if from < to {
            2 * e
        } else {
            2 * e + 1
        }
    }
}

/// Unary and pairwise potentials for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialTable {
    pub unary: Vec<[f64; 2]>,
    pub pairwise: Vec<[f64; 4]>,
    /// `ln` of `pairwise`, kept exact when the table was built in log space.
    pub log_pairwise: Vec<[f64; 4]>,
}

impl PotentialTable {
    pub fn new(unary: Vec<[f64; 2]>, pairwise: Vec<[f64; 4]>) -> Self {
        let log_pairwise = pairwise.iter().map(|r| r.map(f64::ln)).collect();
        PotentialTable {
            unary,
            pairwise,
            log_pairwise,
        }
    }

    pub fn from_log_pairwise(unary: Vec<[f64; 2]>, log_pairwise: Vec<[f64; 4]>) -> Self {
        let pairwise = log_pairwise.iter().map(|r| r.map(f64::exp)).collect();
        PotentialTable {
            unary,
            pairwise,
            log_pairwise,
        }
    }

    /// Unary rows `(1 - p_i, p_i)` and constant pairwise `c`.
    pub fn uniform_pairwise(g: &GridGraph, p_one: &[f64], c: f64) -> Self {
        let unary = p_one.iter().map(|&p| [1.0 - p, p]).collect();
        Self::new(unary, vec![[c; 4]; g.num_edges()])
    }

    pub fn check(&self, g: &GridGraph) -> Result<()> {
        if self.unary.len() != g.num_nodes() || self.pairwise.len() != g.num_edges() {
            return Err(Error::shape(
                "potential table",
                &[self.unary.len(), self.pairwise.len()],
                &[g.num_nodes(), g.num_edges()],
            ));
        }
        if self.log_pairwise.len() != self.pairwise.len() {
            return Err(Error::shape("log pairwise", &[self.log_pairwise.len()], &[self.pairwise.len()]));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.unary.iter().flatten().all(positive) || !self.pairwise.iter().flatten().all(positive) {
            return Err(Error::Config("potentials must be finite and strictly positive".into()));
        }
        Ok(())
    }

    /// `ψ(z_from, z_to)` for the edge `from → to`, transposing when `from > to`.
    #[inline]
    pub fn oriented(table: &[f64; 4], from: usize, to: usize, z_from: usize, z_to: usize) -> f64 {
        if from < to {
            table[z_from * 2 + z_to]
        } else {
            table[z_to * 2 + z_from]
        }
    }
}

/// Per-node marginal estimates `b_i(z_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Beliefs(pub Vec<[f64; 2]>);

impl Beliefs {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The attention map `p(z_i = 1)`.
    pub fn attention(&self) -> Vec<f64> {
        self.0.iter().map(|b| b[1]).collect()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.0.iter().all(|b| {
            (0.0..=1.0).contains(&b[0]) && (0.0..=1.0).contains(&b[1]) && (b[0] + b[1] - 1.0).abs() <= tol
        })
    }

    pub fn max_abs_diff(&self, other: &Beliefs) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max)
    }
}

pub fn build_grid(height: usize, width: usize) -> Result<GridGraph> {
    GridGraph::new(height, width)
}

/// Unnormalized `Σ ln ψ_ij(z_i, z_j) + Σ ln ψ_i(z_i)`.
pub fn joint_log_score(g: &GridGraph, p: &PotentialTable, z: &[u8]) -> Result<f64> {
    if z.len() != g.num_nodes() {
        return Err(Error::shape("assignment", &[z.len()], &[g.num_nodes()]));
    }
    if z.iter().any(|&v| v > 1) {
        return Err(Error::Config("assignment entries must be 0 or 1".into()));
    }
    Ok(score_bits(g, p, |i| z[i] as usize))
}

#[inline]
fn score_bits(g: &GridGraph, p: &PotentialTable, bit: impl Fn(usize) -> usize) -> f64 {
    let mut s = 0.0;
    for (i, u) in p.unary.iter().enumerate() {
        s += u[bit(i)].ln();
    }
    for (e, &(i, j)) in g.edges().iter().enumerate() {
        s += p.log_pairwise[e][bit(i) * 2 + bit(j)];
    }
    s
}

/// Exact node and edge marginals plus `log Z`, by enumerating all `2^M` states.
#[derive(Clone, Debug)]
pub struct ExactResult {
    pub beliefs: Beliefs,
    /// `p(z_i, z_j)` per canonical edge, indexed `z_i * 2 + z_j`.
    pub edge_marginals: Vec<[f64; 4]>,
    pub log_z: f64,
}

pub fn exact_inference(g: &GridGraph, p: &PotentialTable) -> Result<ExactResult> {
    let m = g.num_nodes();
    if m > MAX_ENUMERATION_NODES {
        return Err(Error::Capacity(format!(
            "exact enumeration supports at most {MAX_ENUMERATION_NODES} nodes, got {m}"
        )));
    }
    p.check(g)?;
    let log_unary: Vec<[f64; 2]> = p.unary.iter().map(|u| u.map(f64::ln)).collect();
    // Streaming log-sum-exp: every accumulator is scaled by exp(-running_max).
    let mut running_max = f64::NEG_INFINITY;
    let mut total = 0.0;
    let mut node_one = vec![0.0; m];
    let mut edge_acc = vec![[0.0; 4]; g.num_edges()];
    for state in 0u64..(1u64 << m) {
        let bit = |i: usize| ((state >> i) & 1) as usize;
        let mut s = 0.0;
        for (i, lu) in log_unary.iter().enumerate() {
            s += lu[bit(i)];
        }
        for (e, &(i, j)) in g.edges().iter().enumerate() {
            s += p.log_pairwise[e][bit(i) * 2 + bit(j)];
        }
        if s > running_max {
            let r = (running_max - s).exp();
            total *= r;
            node_one.iter_mut().for_each(|v| *v *= r);
            edge_acc.iter_mut().flatten().for_each(|v| *v *= r);
            running_max = s;
        }
        let w = (s - running_max).exp();
        total += w;
        for (i, acc) in node_one.iter_mut().enumerate() {
            if bit(i) == 1 {
                *acc += w;
            }
        }
        for (e, &(i, j)) in g.edges().iter().enumerate() {
            edge_acc[e][bit(i) * 2 + bit(j)] += w;
        }
    }
    let beliefs = Beliefs(
        node_one
            .iter()
            .map(|&one| {
                let p1 = one / total;
                [1.0 - p1, p1]
            })
            .collect(),
    );
    let edge_marginals = edge_acc.iter().map(|r| r.map(|v| v / total)).collect();
    Ok(ExactResult {
        beliefs,
        edge_marginals,
        log_z: running_max + total.ln(),
    })
}

/// Exact marginals and `log Z`.
pub fn exact_marginals(g: &GridGraph, p: &PotentialTable) -> Result<(Beliefs, f64)> {
    let r = exact_inference(g, p)?;
    Ok((r.beliefs, r.log_z))
}

/// `log Z` of a fully factorized table, for reference checks.
pub fn factorized_log_z(p: &PotentialTable) -> f64 {
    p.unary.iter().map(|u| log_sum_exp(&u.map(f64::ln))).sum::<f64>()
}

#[inline]
fn xlogx_minus(b: f64, log_psi: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        b * (b.ln() - log_psi)
    }
}

/// Mean-field free energy `F(b) = -Σ_edges E_b[ln ψ_ij] + Σ_i Σ_z b_i (ln b_i - ln ψ_i)`.
pub fn mean_field_free_energy(g: &GridGraph, p: &PotentialTable, b: &Beliefs) -> Result<f64> {
    if b.len() != g.num_nodes() {
        return Err(Error::shape("beliefs", &[b.len()], &[g.num_nodes()]));
    }
    let mut energy = 0.0;
    for (e, &(i, j)) in g.edges().iter().enumerate() {
        for zi in 0..2 {
            for zj in 0..2 {
                energy -= b.0[i][zi] * b.0[j][zj] * p.log_pairwise[e][zi * 2 + zj];
            }
        }
    }
    for (bi, u) in b.0.iter().zip(&p.unary) {
        for z in 0..2 {
            energy += xlogx_minus(bi[z], u[z].ln());
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_and_adjacency() {
        let g = build_grid(1, 1).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges()), (1, 0));
        let g = build_grid(3, 3).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges()), (9, 12));
        let g = build_grid(2, 3).unwrap();
        assert_eq!(g.neighbors(1), &[0, 2, 4]);
        assert!(build_grid(0, 3).is_err());
    }

    #[test]
    fn grid_invariants() {
        for (h, w) in [(1, 5), (2, 2), (3, 4), (5, 1), (4, 4)] {
            let g = build_grid(h, w).unwrap();
            assert_eq!(g.num_edges(), h * (w - 1) + (h - 1) * w);
            for i in 0..g.num_nodes() {
                for &j in g.neighbors(i) {
                    assert!(g.neighbors(j).contains(&i));
                }
                if g.num_nodes() > 2 && h > 1 && w > 1 {
                    assert!((2..=4).contains(&g.neighbors(i).len()));
                }
            }
            for &(i, j) in g.edges() {
                assert!(i < j);
            }
            for d in 0..g.num_directed() {
                let (a, b) = g.directed_edge(d);
                assert_eq!(g.directed_index(a, b), d);
            }
        }
    }

    #[test]
    fn single_node_exact() {
        let g = build_grid(1, 1).unwrap();
        let p = PotentialTable::new(vec![[0.2, 0.8]], vec![]);
        let (b, log_z) = exact_marginals(&g, &p).unwrap();
        assert!((b.0[0][1] - 0.8).abs() < 1e-15);
        assert!(log_z.abs() < 1e-15);
    }

    #[test]
    fn constant_pairwise_factorizes() {
        let g = build_grid(2, 3).unwrap();
        let unary = vec![[0.3, 0.9], [1.2, 0.4], [0.5, 0.5], [2.0, 0.1], [0.7, 0.7], [0.25, 1.5]];
        let c: f64 = 1.7;
        let p = PotentialTable::new(unary.clone(), vec![[c; 4]; g.num_edges()]);
        let (b, log_z) = exact_marginals(&g, &p).unwrap();
        for (bi, u) in b.0.iter().zip(&unary) {
            assert!((bi[1] - u[1] / (u[0] + u[1])).abs() < 1e-12);
        }
        let expect = g.num_edges() as f64 * c.ln() + unary.iter().map(|u| (u[0] + u[1]).ln()).sum::<f64>();
        assert!((log_z - expect).abs() < 1e-12);
    }

    #[test]
    fn capacity_error() {
        let g = build_grid(5, 5).unwrap();
        let p = PotentialTable::uniform_pairwise(&g, &[0.5; 25], 1.0);
        assert!(matches!(exact_marginals(&g, &p), Err(Error::Capacity(_))));
    }

    #[test]
    fn joint_score_cases() {
        let g = build_grid(1, 2).unwrap();
        let p = PotentialTable::new(vec![[1.0, 1.0]; 2], vec![[1.0, 1.0, 1.0, 2.0]]);
        assert!((joint_log_score(&g, &p, &[1, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(joint_log_score(&g, &p, &[0, 1]).unwrap(), 0.0);
        assert!(joint_log_score(&g, &p, &[0]).is_err());
    }

    #[test]
    fn free_energy_single_node_at_truth() {
        let g = build_grid(1, 1).unwrap();
        let p = PotentialTable::new(vec![[0.35, 0.65]], vec![]);
        let f = mean_field_free_energy(&g, &p, &Beliefs(vec![[0.35, 0.65]])).unwrap();
        assert!(f.abs() < 1e-15);
    }

    #[test]
    fn oriented_transposes() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(PotentialTable::oriented(&t, 0, 1, 0, 1), 2.0);
        assert_eq!(PotentialTable::oriented(&t, 1, 0, 0, 1), 3.0);
    }
}
