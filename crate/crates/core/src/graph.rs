//! Graph carriers and the message-passing layers shared by every encoder.
//!
//! Node embeddings are rows of an `n×d` matrix and weights are stored
//! `[in, out]`, so a transform applied to node `j` is `v_j · W`.

use std::ops::Range;

use crate::tensor::{ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Number of spatial edge categories.
pub const EDGE_TYPES: usize = 11;

/// Dense adjacency mask over `n` nodes, optionally carrying edge types.
///
/// Entry `(i, j)` is true when `j` is a neighbor of `i`. The diagonal is always
/// false: layers add the node's own embedding through a residual term.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGraph {
    n: usize,
    adjacency: Vec<bool>,
    edge_types: Option<Vec<Option<u8>>>,
}

impl DenseGraph {
    pub fn empty(n: usize) -> Self {
        DenseGraph {
            n,
            adjacency: vec![false; n * n],
            edge_types: None,
        }
    }

    /// Validates the mask and, when given, that types sit exactly on edges.
    pub fn new(n: usize, adjacency: Vec<bool>, edge_types: Option<Vec<Option<u8>>>) -> Result<Self> {
        let g = DenseGraph {
            n,
            adjacency,
            edge_types,
        };
        g.validate()?;
        Ok(g)
    }

    /// Graph whose edges are exactly the typed entries.
    pub fn from_edge_types(n: usize, types: Vec<Option<u8>>) -> Result<Self> {
        let adjacency = types.iter().map(Option::is_some).collect();
        DenseGraph::new(n, adjacency, Some(types))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Integrity("graph needs at least one node".into()));
        }
        if self.adjacency.len() != n * n {
            return Err(Error::Integrity(format!(
                "adjacency has {} entries, expected {}",
                self.adjacency.len(),
                n * n
            )));
        }
        if let Some(i) = (0..n).find(|&i| self.adjacency[i * n + i]) {
            return Err(Error::Integrity(format!("self-loop on node {i}")));
        }
        if let Some(types) = &self.edge_types {
            if types.len() != n * n {
                return Err(Error::Integrity("edge type table has wrong extent".into()));
            }
            for (k, (&edge, ty)) in self.adjacency.iter().zip(types).enumerate() {
                let (i, j) = (k / n, k % n);
                match (edge, ty) {
                    (true, None) => return Err(Error::Integrity(format!("edge ({i},{j}) has no type label"))),
                    (false, Some(_)) => return Err(Error::Integrity(format!("type label on non-edge ({i},{j})"))),
                    (true, Some(t)) if !(1..=EDGE_TYPES as u8).contains(t) => {
                        return Err(Error::Integrity(format!("edge ({i},{j}) has type {t}")))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn edge_types(&self) -> Option<&[Option<u8>]> {
        self.edge_types.as_deref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn edge_type(&self, i: usize, j: usize) -> Option<u8> {
        self.edge_types.as_ref().and_then(|t| t[i * self.n + j])
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.has_edge(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count()
    }

    /// Adds `i → j` (untyped graphs only).
    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        if i == j {
            return Err(Error::Integrity(format!("self-loop on node {i}")));
        }
        if self.edge_types.is_some() {
            return Err(Error::Integrity("untyped edge added to typed graph".into()));
        }
        if i >= self.n || j >= self.n {
            return Err(Error::Integrity(format!("edge ({i},{j}) outside {} nodes", self.n)));
        }
        self.adjacency[i * self.n + j] = true;
        Ok(())
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> DenseGraph {
        let n = self.n;
        let mut adjacency = vec![false; n * n];
        let mut types = self.edge_types.as_ref().map(|_| vec![None; n * n]);
        for a in 0..n {
            for b in 0..n {
                let (i, j) = (perm[a], perm[b]);
                adjacency[a * n + b] = self.adjacency[i * n + j];
                if let Some(t) = types.as_mut() {
                    t[a * n + b] = self.edge_type(i, j);
                }
            }
        }
        DenseGraph {
            n,
            adjacency,
            edge_types: types,
        }
    }

    /// Disjoint union; node indices are offset block by block.
    pub fn block_diagonal(graphs: &[DenseGraph]) -> Result<DenseGraph> {
        let n: usize = graphs.iter().map(|g| g.n).sum();
        let typed = graphs.iter().all(|g| g.edge_types.is_some());
        if !typed && graphs.iter().any(|g| g.edge_types.is_some()) {
            return Err(Error::Integrity("cannot mix typed and untyped blocks".into()));
        }
        let mut adjacency = vec![false; n * n];
        let mut types = typed.then(|| vec![None; n * n]);
        let mut off = 0;
        for g in graphs {
            for i in 0..g.n {
                for j in 0..g.n {
                    let k = (off + i) * n + off + j;
                    adjacency[k] = g.has_edge(i, j);
                    if let Some(t) = types.as_mut() {
                        t[k] = g.edge_type(i, j);
                    }
                }
            }
            off += g.n;
        }
        DenseGraph::new(n, adjacency, types)
    }
}

/// Parameter names of an attention-based GCN layer under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGcnParams {
    pub prefix: String,
}

impl AttnGcnParams {
    pub fn new(prefix: impl Into<String>) -> Self {
        AttnGcnParams { prefix: prefix.into() }
    }

    pub fn specs(&self, d: usize) -> Vec<ParamSpec> {
        let p = &self.prefix;
        vec![
            ParamSpec::weight(format!("{p}.w"), d, d),
            ParamSpec::weight(format!("{p}.wk"), d, d),
            ParamSpec::weight(format!("{p}.wq"), d, d),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<AttnGcnLayer> {
        let p = &self.prefix;
        Ok(AttnGcnLayer {
            w: tape.param(store, &format!("{p}.w"))?,
            wq: tape.param(store, &format!("{p}.wq"))?,
            wk: tape.param(store, &format!("{p}.wk"))?,
        })
    }
}

/// Attention-based GCN layer bound to a tape:
/// `v_i' = ReLU(v_i + Σ_{j∈N(i)} α_ij · v_j W)`.
#[derive(Debug, Clone, Copy)]
pub struct AttnGcnLayer {
    pub w: Var,
    pub wq: Var,
    pub wk: Var,
}

/// `softmax_{j∈N(i)} (v_i W_q)·(v_j W_k)`; rows with no neighbor are zero.
pub fn attention_coefficients(tape: &mut Tape, wq: Var, wk: Var, nodes: Var, graph: &DenseGraph) -> Result<Var> {
    check_nodes(tape, nodes, graph)?;
    let q = tape.matmul(nodes, wq)?;
    let k = tape.matmul(nodes, wk)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    Ok(tape.row_softmax_or_zero(scores, graph.adjacency())?)
}

fn check_nodes(tape: &Tape, nodes: Var, graph: &DenseGraph) -> Result<()> {
    let rows = tape.value(nodes).rows();
    if rows != graph.n_nodes() {
        return Err(Error::Integrity(format!(
            "{rows} node rows for a graph of {} nodes",
            graph.n_nodes()
        )));
    }
    Ok(())
}

impl AttnGcnLayer {
    pub fn attention_coefficients(&self, tape: &mut Tape, nodes: Var, graph: &DenseGraph) -> Result<Var> {
        attention_coefficients(tape, self.wq, self.wk, nodes, graph)
    }

    pub fn forward(&self, tape: &mut Tape, nodes: Var, graph: &DenseGraph) -> Result<Var> {
        let alpha = self.attention_coefficients(tape, nodes, graph)?;
        let transformed = tape.matmul(nodes, self.w)?;
        let messages = tape.matmul(alpha, transformed)?;
        let sum = tape.add(nodes, messages)?;
        Ok(tape.relu(sum))
    }
}

/// Parameter names of a typed-edge GCN layer under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedEdgeGcnParams {
    pub prefix: String,
}

impl TypedEdgeGcnParams {
    pub fn new(prefix: impl Into<String>) -> Self {
        TypedEdgeGcnParams { prefix: prefix.into() }
    }

    pub fn specs(&self, d: usize) -> Vec<ParamSpec> {
        let p = &self.prefix;
        let mut specs = AttnGcnParams::new(p.clone()).specs(d);
        specs.push(ParamSpec::bias(format!("{p}.edge_bias"), EDGE_TYPES));
        specs
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<TypedEdgeGcnLayer> {
        let inner = AttnGcnParams::new(self.prefix.clone()).bind(tape, store)?;
        Ok(TypedEdgeGcnLayer {
            w: inner.w,
            wq: inner.wq,
            wk: inner.wk,
            edge_bias: tape.param(store, &format!("{}.edge_bias", self.prefix))?,
        })
    }
}

/// GCN layer whose message from `j` to `i` is `v_j W ⊕ b[r_ij]`, the edge
/// type's learnable scalar added to every component.
#[derive(Debug, Clone, Copy)]
pub struct TypedEdgeGcnLayer {
    pub w: Var,
    pub wq: Var,
    pub wk: Var,
    pub edge_bias: Var,
}

impl TypedEdgeGcnLayer {
    pub fn forward(&self, tape: &mut Tape, nodes: Var, graph: &DenseGraph) -> Result<Var> {
        let types = graph
            .edge_types()
            .ok_or_else(|| Error::Integrity("typed-edge layer needs edge types".into()))?;
        let n = graph.n_nodes();
        let d = tape.value(nodes).cols();
        let alpha = attention_coefficients(tape, self.wq, self.wk, nodes, graph)?;
        let transformed = tape.matmul(nodes, self.w)?;
        let messages = tape.matmul(alpha, transformed)?;
        // Σ_j α_ij b[r_ij], spread over all d components.
        let idx: Vec<Option<usize>> = types.iter().map(|t| t.map(|t| t as usize - 1)).collect();
        let bias = tape.gather_table(self.edge_bias, &idx, &[n, n])?;
        let weighted = tape.mul(alpha, bias)?;
        let ones = tape.constant(Tensor::ones(&[n, d]));
        let spread = tape.matmul(weighted, ones)?;
        let messages = tape.add(messages, spread)?;
        let sum = tape.add(nodes, messages)?;
        Ok(tape.relu(sum))
    }
}

/// Bilinear graph learner: `scores = (V W1)(V W2)ᵀ`, keeping per row the
/// `min(n_n, n−1)` largest off-diagonal scores (ties: lower column first).
pub fn learn_adjacency(tape: &mut Tape, w1: Var, w2: Var, nodes: Var, n_n: usize) -> Result<(Var, DenseGraph)> {
    let n = tape.value(nodes).rows();
    learn_block_adjacency(tape, w1, w2, nodes, n_n, std::slice::from_ref(&(0..n)))
}

/// [`learn_adjacency`] restricted so that edges never leave their block.
pub fn learn_block_adjacency(
    tape: &mut Tape,
    w1: Var,
    w2: Var,
    nodes: Var,
    n_n: usize,
    blocks: &[Range<usize>],
) -> Result<(Var, DenseGraph)> {
    if n_n == 0 {
        return Err(Error::Config("N_n must be at least 1".into()));
    }
    let a = tape.matmul(nodes, w1)?;
    let b = tape.matmul(nodes, w2)?;
    let bt = tape.transpose(b)?;
    let scores = tape.matmul(a, bt)?;
    let s = tape.value(scores);
    let n = s.rows();
    let mut graph = DenseGraph::empty(n);
    for block in blocks {
        for i in block.clone() {
            for j in top_neighbors(s.row(i), i, block.clone(), n_n) {
                graph.add_edge(i, j)?;
            }
        }
    }
    Ok((scores, graph))
}

/// Columns of the `k` largest entries of `row` within `block`, skipping `i`.
pub fn top_neighbors(row: &[f64], i: usize, block: Range<usize>, k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = block.filter(|&j| j != i).collect();
    cand.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
    cand.truncate(k);
    cand.sort_unstable();
    cand
}

/// Mean over the selected node rows (all rows when `subset` is `None`),
/// returned as a `[d]` vector.
pub fn mean_pool(tape: &mut Tape, nodes: Var, subset: Option<&[usize]>) -> Result<Var> {
    let d = tape.value(nodes).cols();
    let pooled = match subset {
        Some([]) => return Err(Error::Integrity("mean_pool over an empty subset".into())),
        Some(idx) => {
            let rows = tape.gather_rows(nodes, idx)?;
            tape.mean_rows(rows)
        }
        None => tape.mean_rows(nodes),
    };
    Ok(tape.reshape(pooled, &[d])?)
}

/// Row `s` of the result is the mean of the rows in `segments[s]`; an empty
/// segment yields a zero row.
pub fn segment_mean(tape: &mut Tape, nodes: Var, segments: &[Range<usize>]) -> Result<Var> {
    let n = tape.value(nodes).rows();
    let mut pool = vec![0.0; segments.len() * n];
    for (s, seg) in segments.iter().enumerate() {
        if seg.end > n {
            return Err(Error::Integrity(format!("segment {seg:?} beyond {n} rows")));
        }
        let w = 1.0 / seg.len().max(1) as f64;
        for j in seg.clone() {
            pool[s * n + j] = w;
        }
    }
    let pool = tape.constant(Tensor::matrix(segments.len(), n, pool)?);
    Ok(tape.matmul(pool, nodes)?)
}
