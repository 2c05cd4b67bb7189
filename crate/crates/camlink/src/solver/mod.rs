//! Exact solving of the constrained minimum-spanning-forest objective.
//!
//! An instance is a set of 2D points; a solution is an edge set in which
//! every edge spans at most distance `d`, every node has degree at most `k`,
//! and the number of connected components is minimal, with the edge count as
//! tie breaker. Any edge set achieving component count c can be thinned to a
//! forest with the same c by deleting cycle edges (deletion on a cycle never
//! disconnects anything and strictly reduces the edge count), so optimal
//! solutions are spanning forests of their components and satisfy
//! |E| = n - c. The solver therefore searches degree-constrained forests
//! only, minimizing c.
//!
//! Finding such a forest is NP-hard in general (with k = 2 a connected
//! solution is a Hamiltonian path of the feasibility graph), hence the hard
//! cap on n: below it, branch and bound with an optimistic connectivity
//! bound is exhaustive and fast.

pub mod dataset;

use crate::error::{Error, Result};
use crate::graph::{connected_components, AdjMatrix, UnionFind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest n for which `solve_exact` accepts an instance.
pub const EXACTNESS_LIMIT: usize = 24;

/// Largest feasibility-edge count accepted by `brute_force_oracle`.
pub const BRUTE_FORCE_EDGE_LIMIT: usize = 20;

/// A labeled problem instance: node positions, the constraint pair (k, d),
/// and the exact solver's adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub coords: Vec<[f64; 2]>,
    pub k: usize,
    pub d: f64,
    pub label: AdjMatrix,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Checks every label invariant: symmetry, zero diagonal, edge lengths
    /// within d, degrees within k, and the forest edge-count identity.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.n();
        if self.label.n() != n {
            return Err(Error::Validation(format!(
                "label is {}x{} but instance has {n} nodes",
                self.label.n(),
                self.label.n()
            )));
        }
        if !self.label.is_symmetric_zero_diag() {
            return Err(Error::Validation(
                "label must be symmetric with zero diagonal".into(),
            ));
        }
        for (i, j, bit) in self.label.iter_upper() {
            if bit && euclid(self.coords[i], self.coords[j]) > self.d {
                return Err(Error::Validation(format!(
                    "labeled edge ({i}, {j}) exceeds the range constraint d = {}",
                    self.d
                )));
            }
        }
        for i in 0..n {
            if self.label.degree(i) > self.k {
                return Err(Error::Validation(format!(
                    "node {i} has degree {} > k = {}",
                    self.label.degree(i),
                    self.k
                )));
            }
        }
        let (components, _) = connected_components(&self.label)?;
        if self.label.edge_count() != n - components {
            return Err(Error::Validation(format!(
                "label is not a forest: {} edges with {components} components on {n} nodes",
                self.label.edge_count()
            )));
        }
        Ok(())
    }
}

/// Output of the exact solver.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub adjacency: AdjMatrix,
    /// Optimal component count c*, counting isolated nodes.
    pub components: usize,
    pub edge_count: usize,
    pub node_degrees: Vec<usize>,
}

/// A feasible node pair with its Euclidean length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeasibilityEdge {
    pub i: usize,
    pub j: usize,
    pub len: f64,
}

pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// n i.i.d. uniform points in the unit square, deterministic per seed.
pub fn sample_coords(n: usize, rng_seed: u64) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Err(Error::Validation("cannot sample zero nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect())
}

/// All unordered pairs within range d (closed comparison), sorted ascending
/// by length, then by (i, j).
pub fn feasibility_graph(coords: &[[f64; 2]], d: f64) -> Vec<FeasibilityEdge> {
    let n = coords.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let len = euclid(coords[i], coords[j]);
            if len <= d {
                edges.push(FeasibilityEdge { i, j, len });
            }
        }
    }
    edges.sort_by(|a, b| {
        a.len
            .partial_cmp(&b.len)
            .expect("finite lengths")
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    edges
}

struct Search<'a> {
    edges: &'a [FeasibilityEdge],
    k: usize,
    best_c: usize,
    best_edges: Vec<usize>,
}

impl Search<'_> {
    /// Components of (chosen edges ∪ all undecided edges), ignoring degree
    /// limits: no completion of this prefix can do better.
    fn optimistic_bound(&self, uf: &UnionFind, from: usize) -> usize {
        let mut relaxed = uf.clone();
        for e in &self.edges[from..] {
            relaxed.union(e.i, e.j);
        }
        relaxed.components()
    }

    fn descend(&mut self, idx: usize, uf: &mut UnionFind, degrees: &mut [usize], chosen: &mut Vec<usize>) {
        if self.optimistic_bound(uf, idx) >= self.best_c {
            return;
        }
        if idx == self.edges.len() {
            // Bound passed, so this leaf strictly improves on the incumbent.
            self.best_c = uf.components();
            self.best_edges = chosen.clone();
            return;
        }
        let e = self.edges[idx];
        // Include first: the returned optimum is the first one in the
        // deterministic edge order, which keeps labels reproducible.
        if degrees[e.i] < self.k && degrees[e.j] < self.k && !uf.connected(e.i, e.j) {
            let mut uf_inc = uf.clone();
            uf_inc.union(e.i, e.j);
            degrees[e.i] += 1;
            degrees[e.j] += 1;
            chosen.push(idx);
            self.descend(idx + 1, &mut uf_inc, degrees, chosen);
            chosen.pop();
            degrees[e.i] -= 1;
            degrees[e.j] -= 1;
        }
        self.descend(idx + 1, uf, degrees, chosen);
    }
}

/// Minimizes (component count, edge count) lexicographically over all
/// subgraphs of the feasibility graph with maximum degree k, by branch and
/// bound over degree-constrained forests.
pub fn solve_exact(coords: &[[f64; 2]], k: usize, d: f64) -> Result<SolveResult> {
    let n = coords.len();
    if n > EXACTNESS_LIMIT {
        return Err(Error::Capacity(format!(
            "solve_exact is exhaustive only up to n = {EXACTNESS_LIMIT}; \
             got n = {n}, lower the instance size"
        )));
    }
    if n == 0 {
        return Err(Error::Validation("empty instance".into()));
    }
    if k == 0 {
        return Err(Error::Validation("degree cap k must be at least 1".into()));
    }
    let edges = feasibility_graph(coords, d);
    let mut search = Search {
        edges: &edges,
        k,
        best_c: n + 1,
        best_edges: Vec::new(),
    };
    let mut uf = UnionFind::new(n);
    let mut degrees = vec![0; n];
    let mut chosen = Vec::new();
    search.descend(0, &mut uf, &mut degrees, &mut chosen);

    let mut adjacency = AdjMatrix::new(n);
    for &idx in &search.best_edges {
        adjacency.set_sym(edges[idx].i, edges[idx].j, true);
    }
    Ok(result_from(adjacency, search.best_c, n))
}

/// Exhaustive enumeration over every subset of the feasibility graph.
///
/// Subsets are visited in the same include-first order the solver uses, so
/// the returned optimum matches `solve_exact` on the full (c, |E|) objective.
pub fn brute_force_oracle(coords: &[[f64; 2]], k: usize, d: f64) -> Result<SolveResult> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::Validation("empty instance".into()));
    }
    if k == 0 {
        return Err(Error::Validation("degree cap k must be at least 1".into()));
    }
    let edges = feasibility_graph(coords, d);
    let e = edges.len();
    if e > BRUTE_FORCE_EDGE_LIMIT {
        return Err(Error::Capacity(format!(
            "brute_force_oracle enumerates 2^|E| subsets and caps |E| at \
             {BRUTE_FORCE_EDGE_LIMIT}; this instance has {e} feasible edges"
        )));
    }
    let mut best: Option<(usize, usize, u64)> = None; // (c, edge_count, mask)
    for raw in (0..(1u64 << e)).rev() {
        let mut degrees = vec![0usize; n];
        let mut valid = true;
        let mut count = 0;
        for (j, edge) in edges.iter().enumerate() {
            if raw >> (e - 1 - j) & 1 == 1 {
                degrees[edge.i] += 1;
                degrees[edge.j] += 1;
                count += 1;
                if degrees[edge.i] > k || degrees[edge.j] > k {
                    valid = false;
                    break;
                }
            }
        }
        if !valid {
            continue;
        }
        let mut uf = UnionFind::new(n);
        for (j, edge) in edges.iter().enumerate() {
            if raw >> (e - 1 - j) & 1 == 1 {
                uf.union(edge.i, edge.j);
            }
        }
        let c = uf.components();
        if best.is_none_or(|(bc, bcount, _)| (c, count) < (bc, bcount)) {
            best = Some((c, count, raw));
        }
    }
    let (c, _, mask) = best.expect("the empty subset is always valid");
    let mut adjacency = AdjMatrix::new(n);
    for (j, edge) in edges.iter().enumerate() {
        if mask >> (e - 1 - j) & 1 == 1 {
            adjacency.set_sym(edge.i, edge.j, true);
        }
    }
    Ok(result_from(adjacency, c, n))
}

fn result_from(adjacency: AdjMatrix, components: usize, n: usize) -> SolveResult {
    let node_degrees: Vec<usize> = (0..n).map(|i| adjacency.degree(i)).collect();
    let edge_count = adjacency.edge_count();
    SolveResult {
        adjacency,
        components,
        edge_count,
        node_degrees,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_are_deterministic_per_seed() {
        let a = sample_coords(10, 42).unwrap();
        let b = sample_coords(10, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_coords(10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_nodes_rejected() {
        assert!(sample_coords(0, 1).is_err());
    }

    #[test]
    fn coords_mean_near_half() {
        // Law of large numbers: per-axis mean of 1e5 uniform draws.
        let coords = sample_coords(100_000, 7).unwrap();
        let mean_x: f64 = coords.iter().map(|c| c[0]).sum::<f64>() / coords.len() as f64;
        let mean_y: f64 = coords.iter().map(|c| c[1]).sum::<f64>() / coords.len() as f64;
        assert!((mean_x - 0.5).abs() < 0.01, "mean x = {mean_x}");
        assert!((mean_y - 0.5).abs() < 0.01, "mean y = {mean_y}");
    }

    #[test]
    fn feasibility_single_pair() {
        let coords = [[0.0, 0.0], [0.3, 0.0]];
        let edges = feasibility_graph(&coords, 0.5);
        assert_eq!(edges.len(), 1);
        assert_eq!((edges[0].i, edges[0].j), (0, 1));
        assert!((edges[0].len - 0.3).abs() < 1e-12);
    }

    #[test]
    fn feasibility_empty_when_all_pairs_far() {
        let coords = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(feasibility_graph(&coords, 0.5).is_empty());
    }

    #[test]
    fn feasibility_matches_brute_force_pair_filter() {
        let coords = sample_coords(4, 11).unwrap();
        let d = 0.6;
        let edges = feasibility_graph(&coords, d);
        let mut expected = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                if euclid(coords[i], coords[j]) <= d {
                    expected.push((i, j));
                }
            }
        }
        let mut got: Vec<(usize, usize)> = edges.iter().map(|e| (e.i, e.j)).collect();
        got.sort_unstable();
        expected.sort_unstable();
        assert_eq!(got, expected);
        // Sorted ascending by length.
        for w in edges.windows(2) {
            assert!(w[0].len <= w[1].len);
        }
    }

    #[test]
    fn two_nodes_in_range_link_up() {
        let coords = [[0.0, 0.0], [0.3, 0.0]];
        let res = solve_exact(&coords, 3, 0.5).unwrap();
        assert_eq!(res.components, 1);
        assert_eq!(res.edge_count, 1);
        assert!(res.adjacency.get(0, 1));
    }

    #[test]
    fn collinear_chain_blocked_by_degree_cap() {
        // Middle node would need degree 2, but k = 1: best is one edge.
        let coords = [[0.0, 0.0], [0.3, 0.0], [0.6, 0.0]];
        let res = solve_exact(&coords, 1, 0.35).unwrap();
        assert_eq!(res.components, 2);
        assert_eq!(res.edge_count, 1);
        let oracle = brute_force_oracle(&coords, 1, 0.35).unwrap();
        assert_eq!(oracle.components, 2);
        assert_eq!(oracle.edge_count, 1);
    }

    #[test]
    fn isolated_nodes_when_nothing_feasible() {
        let coords = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let res = solve_exact(&coords, 3, 0.2).unwrap();
        assert_eq!(res.components, 4);
        assert_eq!(res.edge_count, 0);
    }

    #[test]
    fn triangle_with_degree_two_gives_a_path() {
        let coords = [[0.0, 0.0], [0.2, 0.0], [0.1, 0.15]];
        let res = brute_force_oracle(&coords, 2, 0.5).unwrap();
        assert_eq!((res.components, res.edge_count), (1, 2));
    }

    #[test]
    fn brute_force_empty_feasibility() {
        let coords = [[0.0, 0.0], [1.0, 0.0]];
        let res = brute_force_oracle(&coords, 3, 0.3).unwrap();
        assert_eq!((res.components, res.edge_count), (2, 0));
    }

    #[test]
    fn exactness_limit_enforced() {
        let coords = sample_coords(EXACTNESS_LIMIT + 1, 3).unwrap();
        assert!(matches!(
            solve_exact(&coords, 3, 0.4),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn brute_force_edge_cap_enforced() {
        // 7 mutually close nodes: 21 feasible edges > 20.
        let coords: Vec<[f64; 2]> = (0..7).map(|i| [0.01 * i as f64, 0.0]).collect();
        assert!(matches!(
            brute_force_oracle(&coords, 3, 1.0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn solver_matches_oracle_on_random_small_instances() {
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 60 {
            seed += 1;
            let n = 4 + (seed as usize % 4);
            let coords = sample_coords(n, 1000 + seed).unwrap();
            let d = [0.3, 0.4, 0.5][seed as usize % 3];
            let k = 1 + (seed as usize % 3);
            if feasibility_graph(&coords, d).len() > BRUTE_FORCE_EDGE_LIMIT {
                continue;
            }
            let fast = solve_exact(&coords, k, d).unwrap();
            let slow = brute_force_oracle(&coords, k, d).unwrap();
            assert_eq!(
                (fast.components, fast.edge_count),
                (slow.components, slow.edge_count),
                "objective mismatch: n={n} k={k} d={d} seed={seed}"
            );
            assert_eq!(
                fast.adjacency, slow.adjacency,
                "tie-breaking mismatch: n={n} k={k} d={d} seed={seed}"
            );
            checked += 1;
        }
    }

    #[test]
    fn solution_satisfies_instance_invariants() {
        for seed in 0..20 {
            let coords = sample_coords(10, 500 + seed).unwrap();
            let res = solve_exact(&coords, 3, 0.4).unwrap();
            let inst = Instance {
                coords: coords.clone(),
                k: 3,
                d: 0.4,
                label: res.adjacency.clone(),
            };
            inst.check_invariants().unwrap();
            assert_eq!(res.edge_count, 10 - res.components);
            assert_eq!(res.node_degrees, (0..10).map(|i| res.adjacency.degree(i)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn unconstrained_degree_matches_feasibility_components() {
        for seed in 0..10 {
            let n = 8;
            let coords = sample_coords(n, 900 + seed).unwrap();
            let d = 0.35;
            let res = solve_exact(&coords, n - 1, d).unwrap();
            let mut feas = AdjMatrix::new(n);
            for e in feasibility_graph(&coords, d) {
                feas.set_sym(e.i, e.j, true);
            }
            let (feas_components, _) = connected_components(&feas).unwrap();
            assert_eq!(res.components, feas_components);
            // And never better than feasibility connectivity, cap or not.
            let capped = solve_exact(&coords, 2, d).unwrap();
            assert!(capped.components >= feas_components);
        }
    }

    #[test]
    fn objective_invariant_under_relabeling() {
        let coords = sample_coords(7, 77).unwrap();
        let res = solve_exact(&coords, 2, 0.45).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted: Vec<[f64; 2]> = {
            let mut v = vec![[0.0; 2]; 7];
            for (i, &p) in perm.iter().enumerate() {
                v[p] = coords[i];
            }
            v
        };
        let res_p = solve_exact(&permuted, 2, 0.45).unwrap();
        assert_eq!(res.components, res_p.components);
        assert_eq!(res.edge_count, res_p.edge_count);
    }
}
