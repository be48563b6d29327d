//! Reference computations written independently of the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

/// `H(Y|X) = Σ_xy m ln(p_x / m)` from the definition.
pub fn conditional_entropy(mass: &[f64], ny: usize) -> f64 {
    let mut h = 0.0;
    for row in mass.chunks(ny) {
        let px: f64 = row.iter().sum();
        for &m in row {
            if m > 0.0 {
                h += m * (px / m).ln();
            }
        }
    }
    h
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

pub fn label_entropy(mass: &[f64], ny: usize) -> f64 {
    let mut py = vec![0.0; ny];
    for row in mass.chunks(ny) {
        for (a, b) in py.iter_mut().zip(row) {
            *a += b;
        }
    }
    entropy(&py)
}

/// `-Σ m ln q`, infinite when mass meets a zero.
pub fn cross_entropy(mass: &[f64], rule: &[f64]) -> f64 {
    mass.iter()
        .zip(rule)
        .filter(|(m, _)| **m > 0.0)
        .map(|(m, q)| if *q > 0.0 { -m * q.ln() } else { f64::INFINITY })
        .sum()
}

pub fn binary_entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Random point of the simplex with every entry at least `floor / len`.
pub fn interior_point(rng: &mut Pcg64, len: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| (1.0 - floor) * r / total + floor / len as f64).collect()
}

/// Random mass vector where each entry is zero with probability `sparsity`.
pub fn sparse_point(rng: &mut Pcg64, len: usize, sparsity: f64) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < sparsity { 0.0 } else { rng.gen::<f64>() + 0.05 })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            return raw.iter().map(|r| r / total).collect();
        }
    }
}

/// Exhaustive linear programming over the basic solutions of a transport
/// problem: every maximal forest of the finite-cost graph between the
/// positive-mass nodes is a basis; flows on it are forced by leaf peeling.
///
/// Returns the minimum cost over feasible bases and the number of bases
/// visited, or `None` when the node budget runs out.
pub fn brute_force_transport(
    supply: &[f64],
    demand: &[f64],
    cost: &[f64],
    node_budget: u64,
) -> Option<(f64, u64)> {
    let n = demand.len();
    let sources: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let targets: Vec<usize> = (0..n).filter(|&j| demand[j] > 0.0).collect();
    let (m, k) = (sources.len(), targets.len());
    // Nodes 0..m are sources, m..m+k targets.
    let mut edges = Vec::new();
    for (a, &i) in sources.iter().enumerate() {
        for (b, &j) in targets.iter().enumerate() {
            let c = cost[i * n + j];
            if c.is_finite() {
                edges.push((a, m + b, c));
            }
        }
    }
    let nodes = m + k;
    let rank = nodes - components(nodes, &edges);
    let balance: Vec<f64> = sources
        .iter()
        .map(|&i| supply[i])
        .chain(targets.iter().map(|&j| -demand[j]))
        .collect();

    struct Search<'a> {
        edges: &'a [(usize, usize, f64)],
        balance: &'a [f64],
        nodes: usize,
        rank: usize,
        chosen: Vec<usize>,
        best: f64,
        visited: u64,
        budget: u64,
        bases: u64,
    }

    fn find(parent: &[usize], mut i: usize) -> usize {
        while parent[i] != i {
            i = parent[i];
        }
        i
    }

    impl Search<'_> {
        fn evaluate(&mut self) {
            self.bases += 1;
            // Peel leaves: a leaf's single edge carries its whole balance.
            let mut residual = self.balance.to_vec();
            let mut degree = vec![0usize; self.nodes];
            for &e in &self.chosen {
                let (a, b, _) = self.edges[e];
                degree[a] += 1;
                degree[b] += 1;
            }
            let mut live = self.chosen.clone();
            let mut total = 0.0;
            while !live.is_empty() {
                let pos = live.iter().position(|&e| {
                    let (a, b, _) = self.edges[e];
                    degree[a] == 1 || degree[b] == 1
                });
                let Some(pos) = pos else { return };
                let e = live.swap_remove(pos);
                let (a, b, c) = self.edges[e];
                // Flow from source a to target b.
                let flow = if degree[a] == 1 { residual[a] } else { -residual[b] };
                if flow < -1e-12 {
                    return;
                }
                residual[a] -= flow;
                residual[b] += flow;
                degree[a] -= 1;
                degree[b] -= 1;
                total += flow * c;
            }
            if residual.iter().any(|r| r.abs() > 1e-9) {
                return;
            }
            self.best = self.best.min(total);
        }

        fn recurse(&mut self, next: usize, parent: &mut Vec<usize>) -> bool {
            self.visited += 1;
            if self.visited > self.budget {
                return false;
            }
            if self.chosen.len() == self.rank {
                self.evaluate();
                return true;
            }
            if self.edges.len() - next < self.rank - self.chosen.len() {
                return true;
            }
            let (a, b, _) = self.edges[next];
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra != rb {
                parent[ra] = rb;
                self.chosen.push(next);
                let ok = self.recurse(next + 1, parent);
                self.chosen.pop();
                parent[ra] = ra;
                if !ok {
                    return false;
                }
            }
            self.recurse(next + 1, parent)
        }
    }

    let mut search = Search {
        edges: &edges,
        balance: &balance,
        nodes,
        rank,
        chosen: Vec::new(),
        best: f64::INFINITY,
        visited: 0,
        budget: node_budget,
        bases: 0,
    };
    let mut parent: Vec<usize> = (0..nodes).collect();
    if !search.recurse(0, &mut parent) {
        return None;
    }
    Some((search.best, search.bases))
}

fn components(nodes: usize, edges: &[(usize, usize, f64)]) -> usize {
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut count = nodes;
    for &(a, b, _) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            count -= 1;
        }
    }
    count
}

/// Directional derivative of `f` at `x` along `d` by Richardson-extrapolated
/// central differences.
pub fn directional_derivative(f: impl Fn(&[f64]) -> f64, x: &[f64], d: &[f64], h: f64) -> f64 {
    let at = |t: f64| {
        let p: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        f(&p)
    };
    let central = |h: f64| (at(h) - at(-h)) / (2.0 * h);
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}
