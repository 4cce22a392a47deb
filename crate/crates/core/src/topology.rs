//! Communication graphs and their mixing matrices.
//!
//! Graphs are undirected, simple, and connected. The mixing matrix is the
//! lazy Metropolis construction, which is symmetric and doubly stochastic for
//! any such graph; its second singular value sets the consensus contraction
//! rate used everywhere downstream.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Connectivity retries before [`generate_geometric_graph`] gives up.
pub const MAX_GRAPH_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    coords: Vec<[f64; 2]>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicate edges are merged;
    /// self loops and out-of-range endpoints are rejected. Nodes are placed on
    /// a circle inside the unit square so that exported coordinates stay
    /// meaningful.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("n", "graph needs at least one node"));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Malformed(format!("edge ({i}, {j}) outside 0..{n}")));
            }
            if i == j {
                return Err(Error::Malformed(format!("self loop at node {i}")));
            }
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let coords = (0..n)
            .map(|i| {
                let theta = std::f64::consts::TAU * i as f64 / n as f64;
                [0.5 + 0.4 * theta.cos(), 0.5 + 0.4 * theta.sin()]
            })
            .collect();
        Ok(Self { coords, adjacency })
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges)
    }

    fn from_coords(coords: Vec<[f64; 2]>, radius: f64) -> Self {
        let n = coords.len();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                if (dx * dx + dy * dy).sqrt() < radius {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        // Pushed in increasing order for both endpoints, so lists are sorted.
        Self { coords, adjacency }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.directed_edge_count() / 2
    }

    /// Number of (sender, receiver) pairs, i.e. messages per round.
    pub fn directed_edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    reached += 1;
                    queue.push_back(j);
                }
            }
        }
        reached == n
    }

    /// One `i j` line per undirected edge with `i < j`.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}")?;
        }
        Ok(())
    }

    /// One `i x y` line per node, six decimals.
    pub fn write_coords<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, [x, y]) in self.coords.iter().enumerate() {
            writeln!(out, "{i} {x:.6} {y:.6}")?;
        }
        Ok(())
    }
}

/// Random geometric graph on the unit square: nodes uniform on `[0,1]^2`,
/// an edge whenever two nodes are strictly closer than `radius`. Disconnected
/// draws are discarded and the whole layout is redrawn from the same RNG.
pub fn generate_geometric_graph(n: usize, radius: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::validation("n", "graph needs at least one node"));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::validation("radius", format!("must be positive, got {radius}")));
    }
    let mut rng = stream_rng(seed, Stream::Graph);
    for _ in 0..MAX_GRAPH_ATTEMPTS {
        let coords = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let graph = Graph::from_coords(coords, radius);
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(Error::RetryExhausted {
        n,
        radius,
        attempts: MAX_GRAPH_ATTEMPTS,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    sigma2: f64,
}

impl MixingMatrix {
    /// Wraps an arbitrary square weight matrix, computing its second singular
    /// value. No stochasticity check is performed here.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let sigma2 = second_singular_value(&weights)?;
        Ok(Self { weights, sigma2 })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    /// Largest deviation of any row or column sum from one.
    pub fn stochasticity_error(&self) -> f64 {
        let n = self.size();
        let rows = (0..n).map(|i| (self.weights.row(i).sum() - 1.0).abs());
        let cols = (0..n).map(|j| (self.weights.column(j).sum() - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// `a_ij = 1 / (2 max(|N_i|, |N_j|))` on edges, zero off the graph, and the
/// remaining mass on the diagonal.
pub fn lazy_metropolis(graph: &Graph) -> Result<MixingMatrix> {
    let n = graph.node_count();
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off_diagonal = 0.0;
        for &j in graph.neighbors(i) {
            let w = 1.0 / (2.0 * graph.degree(i).max(graph.degree(j)) as f64);
            weights[(i, j)] = w;
            off_diagonal += w;
        }
        weights[(i, i)] = 1.0 - off_diagonal;
    }
    MixingMatrix::from_weights(weights)
}

/// Second largest singular value from a dense SVD. A 1x1 matrix has no
/// second singular value and reports 0.
pub fn second_singular_value(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Malformed(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() < 2 {
        return Ok(0.0);
    }
    let svd = nalgebra::linalg::SVD::try_new(m.clone(), false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let mut values: Vec<f64> = svd.singular_values.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values[1].clamp(0.0, 1.0))
}
