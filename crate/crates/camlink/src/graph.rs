//! Undirected graph primitives: dense adjacency matrices, union-find,
//! and connected-component labeling.

use crate::error::{Error, Result};

/// Disjoint-set forest with path compression and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    components: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
            components: n,
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the sets containing `a` and `b`; returns true if they were disjoint.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let mut ra = self.find(a);
        let mut rb = self.find(b);
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        self.components -= 1;
        true
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Number of disjoint sets (isolated elements count as singletons).
    pub fn components(&self) -> usize {
        self.components
    }
}

/// Dense symmetric binary adjacency matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl AdjMatrix {
    pub fn new(n: usize) -> Self {
        AdjMatrix {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Sets both (i, j) and (j, i). Setting the diagonal is a no-op.
    pub fn set_sym(&mut self, i: usize, j: usize, value: bool) {
        if i == j {
            return;
        }
        self.bits[i * self.n + j] = value;
        self.bits[j * self.n + i] = value;
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j)).count()
    }

    pub fn edge_count(&self) -> usize {
        self.iter_upper().filter(|&(_, _, b)| b).count()
    }

    /// Iterates the strict upper triangle in row-major order: (i, j, bit) with i < j.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        (0..self.n).flat_map(move |i| ((i + 1)..self.n).map(move |j| (i, j, self.get(i, j))))
    }

    /// Edges (i, j) with i < j.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.iter_upper()
            .filter(|&(_, _, b)| b)
            .map(|(i, j, _)| (i, j))
            .collect()
    }

    pub fn is_symmetric_zero_diag(&self) -> bool {
        for i in 0..self.n {
            if self.bits[i * self.n + i] {
                return false;
            }
            for j in (i + 1)..self.n {
                if self.bits[i * self.n + j] != self.bits[j * self.n + i] {
                    return false;
                }
            }
        }
        true
    }

    /// Upper-triangle bit string of length n(n-1)/2, row-major.
    pub fn to_bitstring(&self) -> String {
        self.iter_upper()
            .map(|(_, _, b)| if b { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(n: usize, bits: &str) -> Result<Self> {
        let expected = n * (n - 1) / 2;
        if bits.len() != expected {
            return Err(Error::Parse(format!(
                "adjacency bit string has length {}, expected {} for n={}",
                bits.len(),
                expected,
                n
            )));
        }
        let mut adj = AdjMatrix::new(n);
        let mut chars = bits.chars();
        for i in 0..n {
            for j in (i + 1)..n {
                match chars.next() {
                    Some('1') => adj.set_sym(i, j, true),
                    Some('0') => {}
                    Some(c) => {
                        return Err(Error::Parse(format!(
                            "invalid character '{c}' in adjacency bit string"
                        )))
                    }
                    None => unreachable!(),
                }
            }
        }
        Ok(adj)
    }

    /// Applies a node relabeling: result[p(i)][p(j)] = self[i][j].
    pub fn permuted(&self, perm: &[usize]) -> AdjMatrix {
        let mut out = AdjMatrix::new(self.n);
        for (i, j, b) in self.iter_upper() {
            if b {
                out.set_sym(perm[i], perm[j], true);
            }
        }
        out
    }
}

/// Counts connected components and labels each node with a component id.
///
/// Isolated nodes are their own components. Rejects asymmetric input.
pub fn connected_components(adj: &AdjMatrix) -> Result<(usize, Vec<usize>)> {
    if !adj.is_symmetric_zero_diag() {
        return Err(Error::Validation(
            "connected_components requires a symmetric adjacency with zero diagonal".into(),
        ));
    }
    let n = adj.n();
    let mut uf = UnionFind::new(n);
    for (i, j, b) in adj.iter_upper() {
        if b {
            uf.union(i, j);
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        let root = uf.find(i);
        if labels[root] == usize::MAX {
            labels[root] = next;
            next += 1;
        }
        labels[i] = labels[root];
    }
    Ok((uf.components(), labels))
}
