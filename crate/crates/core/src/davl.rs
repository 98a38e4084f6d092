//! Question-aware integration of the four representation sources into one
//! joint vector, with the alternative integration back-ends.

use crate::config::{ModelConfig, RiVariant};
use crate::graph::{learn_adjacency, AttnGcnParams, DenseGraph};
use crate::nn::Linear;
use crate::tensor::{Init, ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Source names in stacking order: holistic visual, fine-grained visual,
/// holistic linguistic, fine-grained linguistic.
pub const SOURCES: [&str; 4] = ["vg", "vl", "lg", "ll"];

/// The four representation matrices, each `[rows×d]`.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationBundle {
    pub vg: Var,
    pub vl: Var,
    pub lg: Var,
    pub ll: Var,
}

impl RepresentationBundle {
    pub fn parts(&self) -> [Var; 4] {
        [self.vg, self.vl, self.lg, self.ll]
    }

    /// Source id in `1..=4` of every stacked row.
    pub fn source_ids(&self, tape: &Tape) -> Vec<usize> {
        self.parts()
            .iter()
            .enumerate()
            .flat_map(|(g, &v)| std::iter::repeat_n(g + 1, tape.value(v).rows()))
            .collect()
    }
}

/// Multi-head attention from node rows (queries) to question tokens
/// (keys and values). Head `h` owns columns `h·d/N_h ..` of each projection
/// and has its own square output map.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionAttention {
    pub prefix: String,
    pub d: usize,
    pub heads: usize,
}

impl QuestionAttention {
    pub fn new(prefix: impl Into<String>, d: usize, heads: usize) -> Self {
        QuestionAttention {
            prefix: prefix.into(),
            d,
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn out_name(&self, h: usize) -> String {
        format!("{}.out.h{h:02}", self.prefix)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let (p, d, dh) = (&self.prefix, self.d, self.head_dim());
        let mut s = vec![
            ParamSpec::weight(format!("{p}.wq"), d, d),
            ParamSpec::weight(format!("{p}.wk"), d, d),
            ParamSpec::weight(format!("{p}.wv"), d, d),
        ];
        s.extend((0..self.heads).map(|h| ParamSpec::weight(self.out_name(h), dh, dh)));
        s
    }

    /// `[m×d]` attended rows for node matrix `x` `[m×d]` and question `q` `[N_t×d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, q: Var) -> Result<Var> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d = {}",
                self.heads, self.d
            )));
        }
        let p = &self.prefix;
        let dh = self.head_dim();
        let wq = tape.param(store, &format!("{p}.wq"))?;
        let wk = tape.param(store, &format!("{p}.wk"))?;
        let wv = tape.param(store, &format!("{p}.wv"))?;
        let queries = tape.matmul(x, wq)?;
        let keys = tape.matmul(q, wk)?;
        let values = tape.matmul(q, wv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(queries, h * dh, dh)?;
            let kh = tape.slice_cols(keys, h * dh, dh)?;
            let vh = tape.slice_cols(values, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.row_softmax(scores, None)?;
            let mixed = tape.matmul(attn, vh)?;
            let out = tape.param(store, &self.out_name(h))?;
            heads.push(tape.matmul(mixed, out)?);
        }
        Ok(tape.concat_cols(&heads)?)
    }
}

/// Row `i` of `nodes` scaled elementwise by row `sources[i] − 1` of `table`.
pub fn apply_index_embedding(tape: &mut Tape, table: Var, nodes: Var, sources: &[usize]) -> Result<Var> {
    let rows = tape.value(table).rows();
    if let Some(bad) = sources.iter().find(|&&g| g == 0 || g > rows) {
        return Err(Error::Integrity(format!("source id {bad} outside 1..={rows}")));
    }
    let idx: Vec<usize> = sources.iter().map(|g| g - 1).collect();
    let scale = tape.gather_rows(table, &idx)?;
    Ok(tape.mul(nodes, scale)?)
}

/// `ReLU(V + Â V W)` with `Â` the 0/1 adjacency, rows divided by their
/// neighbor count when `degree_norm` is set.
pub fn vanilla_gcn(tape: &mut Tape, nodes: Var, w: Var, graph: &DenseGraph, degree_norm: bool) -> Result<Var> {
    let n = graph.n_nodes();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let deg = graph.degree(i);
        let weight = if degree_norm && deg > 0 { 1.0 / deg as f64 } else { 1.0 };
        for j in graph.neighbors(i) {
            a[i * n + j] = weight;
        }
    }
    let a = tape.constant(Tensor::matrix(n, n, a)?);
    let msg = tape.matmul(nodes, w)?;
    let msg = tape.matmul(a, msg)?;
    let sum = tape.add(nodes, msg)?;
    Ok(tape.relu(sum))
}

/// Parameter layout and forward pass of the integration module.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrator {
    pub d: usize,
    pub heads: usize,
    pub n_n: usize,
    pub layers: usize,
    pub variant: RiVariant,
    pub degree_norm: bool,
    pub attention_gcn: bool,
}

pub const INDEX_EMBEDDING: &str = "davl.index";

impl Integrator {
    pub fn new(cfg: &ModelConfig) -> Self {
        Integrator {
            d: cfg.d,
            heads: cfg.n_h,
            n_n: cfg.n_n,
            layers: cfg.gcn_layers,
            variant: cfg.ri_variant,
            degree_norm: cfg.davl_degree_norm,
            attention_gcn: cfg.davl_attention_gcn,
        }
    }

    pub fn attention(&self, source: usize) -> QuestionAttention {
        QuestionAttention::new(format!("davl.qatt.{}", SOURCES[source]), self.d, self.heads)
    }

    fn gcn_prefix(l: usize) -> String {
        format!("davl.gcn.{l}")
    }

    fn concat(&self) -> Linear {
        Linear::new("davl.concat", 4 * self.d, self.d)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let d = self.d;
        let mut s: Vec<ParamSpec> = (0..4).flat_map(|g| self.attention(g).specs()).collect();
        match self.variant {
            RiVariant::Davl | RiVariant::RiGcn => {
                if self.variant == RiVariant::Davl {
                    s.push(ParamSpec::new(INDEX_EMBEDDING, &[4, d], Init::Ones));
                }
                s.push(ParamSpec::weight("davl.learner.w1", d, d));
                s.push(ParamSpec::weight("davl.learner.w2", d, d));
                for l in 0..self.layers {
                    if self.attention_gcn {
                        s.extend(AttnGcnParams::new(Self::gcn_prefix(l)).specs(d));
                    } else {
                        s.push(ParamSpec::weight(format!("{}.w", Self::gcn_prefix(l)), d, d));
                    }
                }
            }
            RiVariant::RiAt => s.push(ParamSpec::weight("davl.coattn.w", d, d)),
            RiVariant::RiConcat => s.extend(self.concat().specs()),
        }
        s
    }

    /// Question-attended node matrices, one per source.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bundle: &RepresentationBundle,
        q: Var,
    ) -> Result<[Var; 4]> {
        let parts = bundle.parts();
        let mut out = parts;
        for (g, &x) in parts.iter().enumerate() {
            out[g] = self.attention(g).forward(tape, store, x, q)?;
        }
        Ok(out)
    }

    /// Joint representation `x̂` as a `[1×d]` row.
    pub fn integrate(&self, tape: &mut Tape, store: &ParamStore, bundle: &RepresentationBundle, q: Var) -> Result<Var> {
        Ok(self.integrate_graph(tape, store, bundle, q)?.0)
    }

    /// [`Integrator::integrate`] plus the learned adjacency for the graph variants.
    pub fn integrate_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bundle: &RepresentationBundle,
        q: Var,
    ) -> Result<(Var, Option<DenseGraph>)> {
        let attended = self.attend(tape, store, bundle, q)?;
        match self.variant {
            RiVariant::Davl | RiVariant::RiGcn => {
                let mut nodes = tape.concat_rows(&attended)?;
                if self.variant == RiVariant::Davl {
                    let table = tape.param(store, INDEX_EMBEDDING)?;
                    nodes = apply_index_embedding(tape, table, nodes, &bundle.source_ids(tape))?;
                }
                let w1 = tape.param(store, "davl.learner.w1")?;
                let w2 = tape.param(store, "davl.learner.w2")?;
                let (_, graph) = learn_adjacency(tape, w1, w2, nodes, self.n_n)?;
                for l in 0..self.layers {
                    let prefix = Self::gcn_prefix(l);
                    nodes = if self.attention_gcn {
                        AttnGcnParams::new(prefix)
                            .bind(tape, store)?
                            .forward(tape, nodes, &graph)?
                    } else {
                        let w = tape.param(store, &format!("{prefix}.w"))?;
                        vanilla_gcn(tape, nodes, w, &graph, self.degree_norm)?
                    };
                }
                Ok((tape.mean_rows(nodes), Some(graph)))
            }
            RiVariant::RiAt => {
                let nodes = tape.concat_rows(&attended)?;
                let m = tape.value(nodes).rows();
                let mask: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
                let t = tape.transpose(nodes)?;
                let scores = tape.matmul(nodes, t)?;
                let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt());
                let attn = tape.row_softmax_or_zero(scores, &mask)?;
                let w = tape.param(store, "davl.coattn.w")?;
                let msg = tape.matmul(nodes, w)?;
                let msg = tape.matmul(attn, msg)?;
                let out = tape.add(nodes, msg)?;
                Ok((tape.mean_rows(out), None))
            }
            RiVariant::RiConcat => {
                let pooled: Vec<Var> = attended.iter().map(|&x| tape.mean_rows(x)).collect();
                let joint = tape.concat_cols(&pooled)?;
                Ok((self.concat().forward(tape, store, joint)?, None))
            }
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Precision;
    use crate::testutil::oracle::{self, Mat};
    use crate::testutil::{assert_close, rand_matrix, rng, store_from};
    use rand::Rng;

    fn integrator(variant: RiVariant, d: usize, heads: usize) -> Integrator {
        Integrator {
            d,
            heads,
            n_n: 2,
            layers: 1,
            variant,
            degree_norm: true,
            attention_gcn: false,
        }
    }

    struct Case {
        parts: [Tensor; 4],
        q: Tensor,
    }

    fn random_case<R: Rng>(r: &mut R, d: usize, n_f: usize, n_s: usize, n_t: usize) -> Case {
        Case {
            parts: [
                rand_matrix(r, n_f, d, 1.0),
                rand_matrix(r, n_f, d, 1.0),
                rand_matrix(r, n_s, d, 1.0),
                rand_matrix(r, n_s, d, 1.0),
            ],
            q: rand_matrix(r, n_t, d, 1.0),
        }
    }

    fn bind(t: &mut Tape, c: &Case) -> (RepresentationBundle, Var) {
        let [vg, vl, lg, ll] = c.parts.clone().map(|p| t.constant(p));
        (RepresentationBundle { vg, vl, lg, ll }, t.constant(c.q.clone()))
    }

    fn random_store<R: Rng>(ig: &Integrator, r: &mut R) -> ParamStore {
        let mut store = store_from(&ig.specs(), r);
        if store.contains(INDEX_EMBEDDING) {
            store
                .set_data(INDEX_EMBEDDING, rand_matrix(r, 4, ig.d, 1.5).data())
                .unwrap();
        }
        if store.contains("davl.concat.b") {
            store
                .set_data("davl.concat.b", rand_matrix(r, 1, ig.d, 0.5).data())
                .unwrap();
        }
        store
    }

    #[test]
    fn single_token_attention_ignores_nodes() {
        let mut r = rng(1);
        let qa = QuestionAttention::new("a", 8, 4);
        let store = store_from(&qa.specs(), &mut r);
        let mut t = Tape::new(Precision::Double);
        let q = rand_matrix(&mut r, 1, 8, 1.0);
        let x = t.constant(rand_matrix(&mut r, 3, 8, 1.0));
        let qv = t.constant(q.clone());
        let out = qa.forward(&mut t, &store, x, qv).unwrap();
        let expected: Vec<f64> = oracle::qatt(&store, "a", 4, &vec![vec![0.0; 8]], &oracle::to_mat(&q))[0].clone();
        for i in 0..3 {
            assert_close(t.value(out).row(i), &expected, 1e-12);
        }
        let zero_q = t.constant(Tensor::zeros(&[2, 8]));
        let out = qa.forward(&mut t, &store, x, zero_q).unwrap();
        assert_eq!(t.value(out).data(), &[0.0; 24]);
    }

    #[test]
    fn attention_matches_per_head_oracle() {
        for seed in 0..20 {
            let mut r = rng(500 + seed);
            let qa = QuestionAttention::new("a", 8, 4);
            let store = store_from(&qa.specs(), &mut r);
            let x = rand_matrix(&mut r, 5, 8, 1.0);
            let q = rand_matrix(&mut r, 3, 8, 1.0);
            let mut t = Tape::new(Precision::Double);
            let (xv, qv) = (t.constant(x.clone()), t.constant(q.clone()));
            let out = qa.forward(&mut t, &store, xv, qv).unwrap();
            let expected = oracle::qatt(&store, "a", 4, &oracle::to_mat(&x), &oracle::to_mat(&q)).concat();
            assert_close(t.value(out).data(), &expected, 1e-10);
        }
    }

    #[test]
    fn index_embedding_cases() {
        let mut r = rng(2);
        let nodes = rand_matrix(&mut r, 6, 3, 1.0);
        let sources = [1, 1, 2, 3, 4, 4];
        let mut t = Tape::new(Precision::Double);
        let n = t.constant(nodes.clone());
        let ones = t.constant(Tensor::ones(&[4, 3]));
        let out = apply_index_embedding(&mut t, ones, n, &sources).unwrap();
        assert_eq!(t.value(out).data(), nodes.data());

        let mut table = Tensor::ones(&[4, 3]);
        table.data_mut()[..3].fill(0.0);
        let tv = t.constant(table);
        let out = apply_index_embedding(&mut t, tv, n, &sources).unwrap();
        assert_eq!(&t.value(out).data()[..6], &[0.0; 6]);
        assert_eq!(&t.value(out).data()[6..], &nodes.data()[6..]);

        let table = rand_matrix(&mut r, 4, 3, 1.0);
        let tv = t.constant(table.clone());
        let out = apply_index_embedding(&mut t, tv, n, &sources).unwrap();
        for (i, &g) in sources.iter().enumerate() {
            let expected = oracle::hadamard_row(nodes.row(i), table.row(g - 1));
            assert_close(t.value(out).row(i), &expected, 1e-15);
        }
        assert!(apply_index_embedding(&mut t, tv, n, &[0, 1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn davl_matches_composition_oracle() {
        for seed in 0..20 {
            let mut r = rng(600 + seed);
            let ig = integrator(RiVariant::Davl, 8, 2);
            let store = random_store(&ig, &mut r);
            let case = random_case(&mut r, 8, 2, 1, 4);
            let mut t = Tape::new(Precision::Double);
            let (b, q) = bind(&mut t, &case);
            let x = ig.integrate(&mut t, &store, &b, q).unwrap();
            let parts = case.parts.clone().map(|p| oracle::to_mat(&p));
            let expected = oracle::davl(&store, 2, 2, &parts, &oracle::to_mat(&case.q));
            assert_close(t.value(x).data(), &expected, 1e-10);
        }
    }

    #[test]
    fn all_ones_index_reduces_to_plain_gcn() {
        for precision in [Precision::Double, Precision::Single] {
            let mut r = rng(3);
            let ig = integrator(RiVariant::Davl, 8, 2);
            let mut store = ParamStore::from_specs(&ig.specs(), &mut r, precision).unwrap();
            store.set_data(INDEX_EMBEDDING, &[1.0; 32]).unwrap();
            let case = random_case(&mut r, 8, 3, 2, 4);
            let mut t = Tape::new(precision);
            let (b, q) = bind(&mut t, &case);
            let davl = ig.integrate(&mut t, &store, &b, q).unwrap();
            let plain = integrator(RiVariant::RiGcn, 8, 2);
            let gcn = plain.integrate(&mut t, &store, &b, q).unwrap();
            assert_eq!(t.value(davl).data(), t.value(gcn).data());
        }
    }

    #[test]
    fn messageless_gcn_is_mean_relu() {
        let mut r = rng(4);
        let ig = integrator(RiVariant::Davl, 8, 2);
        let mut store = random_store(&ig, &mut r);
        store.set_data("davl.gcn.0.w", &[0.0; 64]).unwrap();
        let case = random_case(&mut r, 8, 2, 2, 3);
        let mut t = Tape::new(Precision::Double);
        let (b, q) = bind(&mut t, &case);
        let x = ig.integrate(&mut t, &store, &b, q).unwrap();
        let attended = ig.attend(&mut t, &store, &b, q).unwrap();
        let stacked = t.concat_rows(&attended).unwrap();
        let table = t.param(&store, INDEX_EMBEDDING).unwrap();
        let ids = b.source_ids(&t);
        let modulated = apply_index_embedding(&mut t, table, stacked, &ids).unwrap();
        let expected = oracle::mean_rows(&oracle::relu(&oracle::to_mat(t.value(modulated))));
        assert_close(t.value(x).data(), &expected, 1e-12);
    }

    #[test]
    fn zeroed_source_rows_vanish() {
        let mut r = rng(5);
        let ig = integrator(RiVariant::Davl, 8, 2);
        let mut store = random_store(&ig, &mut r);
        let mut table = store.get(INDEX_EMBEDDING).unwrap().data().to_vec();
        table[8..16].fill(0.0);
        store.set_data(INDEX_EMBEDDING, &table).unwrap();
        let case = random_case(&mut r, 8, 2, 2, 3);
        let mut t = Tape::new(Precision::Double);
        let (b, q) = bind(&mut t, &case);
        let x = ig.integrate(&mut t, &store, &b, q).unwrap();
        // replacing the zeroed source's input changes nothing
        let mut other = random_case(&mut r, 8, 2, 2, 3);
        other.parts = [
            case.parts[0].clone(),
            other.parts[1].clone(),
            case.parts[2].clone(),
            case.parts[3].clone(),
        ];
        other.q = case.q.clone();
        let mut t2 = Tape::new(Precision::Double);
        let (b2, q2) = bind(&mut t2, &other);
        let x2 = ig.integrate(&mut t2, &store, &b2, q2).unwrap();
        assert_eq!(t.value(x).data(), t2.value(x2).data());
    }

    #[test]
    fn adjacency_is_top_k_sparse() {
        let mut r = rng(6);
        for _ in 0..100 {
            let ig = integrator(RiVariant::Davl, 8, 2);
            let store = random_store(&ig, &mut r);
            let case = random_case(&mut r, 8, 2, 2, 2);
            let mut t = Tape::new(Precision::Double);
            let (b, q) = bind(&mut t, &case);
            let (_, g) = ig.integrate_graph(&mut t, &store, &b, q).unwrap();
            let g = g.unwrap();
            assert!((0..g.n_nodes()).all(|i| g.degree(i) == 2));
        }
    }

    #[test]
    fn every_variant_yields_d_vector() {
        let mut r = rng(7);
        for v in RiVariant::ALL {
            let ig = integrator(v, 8, 4);
            let store = random_store(&ig, &mut r);
            let case = random_case(&mut r, 8, 3, 2, 4);
            let mut t = Tape::new(Precision::Double);
            let (b, q) = bind(&mut t, &case);
            let x = ig.integrate(&mut t, &store, &b, q).unwrap();
            assert_eq!(t.value(x).shape(), &[1, 8], "{v:?}");
        }
    }

    #[test]
    fn concat_variant_by_hand() {
        let mut r = rng(8);
        let ig = integrator(RiVariant::RiConcat, 4, 2);
        let store = random_store(&ig, &mut r);
        let case = random_case(&mut r, 4, 2, 2, 3);
        let mut t = Tape::new(Precision::Double);
        let (b, q) = bind(&mut t, &case);
        let x = ig.integrate(&mut t, &store, &b, q).unwrap();
        let qm = oracle::to_mat(&case.q);
        let mut joint = Vec::new();
        for g in 0..4 {
            let att = oracle::qatt(
                &store,
                &format!("davl.qatt.{}", SOURCES[g]),
                2,
                &oracle::to_mat(&case.parts[g]),
                &qm,
            );
            joint.extend(oracle::mean_rows(&att));
        }
        let expected = oracle::affine(&store, "davl.concat", &vec![joint], true);
        assert_close(t.value(x).data(), &expected[0], 1e-12);
    }

    #[test]
    fn coattention_variant_by_hand() {
        let mut r = rng(9);
        let ig = integrator(RiVariant::RiAt, 4, 2);
        let store = random_store(&ig, &mut r);
        let case = random_case(&mut r, 4, 2, 1, 3);
        let mut t = Tape::new(Precision::Double);
        let (b, q) = bind(&mut t, &case);
        let x = ig.integrate(&mut t, &store, &b, q).unwrap();
        let qm = oracle::to_mat(&case.q);
        let mut v: Mat = Vec::new();
        for g in 0..4 {
            v.extend(oracle::qatt(
                &store,
                &format!("davl.qatt.{}", SOURCES[g]),
                2,
                &oracle::to_mat(&case.parts[g]),
                &qm,
            ));
        }
        let msg = oracle::mm(&v, &oracle::param(&store, "davl.coattn.w"));
        let out: Mat = (0..v.len())
            .map(|i| {
                let others: Vec<usize> = (0..v.len()).filter(|&j| j != i).collect();
                let e: Vec<f64> = others
                    .iter()
                    .map(|&j| (oracle::dot(&v[i], &v[j]) / 2.0).exp())
                    .collect();
                let z: f64 = e.iter().sum();
                (0..4)
                    .map(|c| v[i][c] + others.iter().zip(&e).map(|(&j, a)| a / z * msg[j][c]).sum::<f64>())
                    .collect()
            })
            .collect();
        assert_close(t.value(x).data(), &oracle::mean_rows(&out), 1e-10);
    }

    #[test]
    fn gradients_through_every_variant() {
        for (k, v) in RiVariant::ALL.into_iter().enumerate() {
            for attention_gcn in [false, true] {
                if attention_gcn && !matches!(v, RiVariant::Davl) {
                    continue;
                }
                let mut r = rng(700 + k as u64);
                let ig = Integrator {
                    attention_gcn,
                    ..integrator(v, 4, 2)
                };
                let mut store = random_store(&ig, &mut r);
                let case = random_case(&mut r, 4, 2, 2, 3);
                let report = check_gradients(&mut store, |t, s| {
                    let (b, q) = bind(t, &case);
                    let x = ig.integrate(t, s, &b, q)?;
                    let y = t.tanh(x);
                    let y = t.mul(y, x)?;
                    Ok(t.sum(y))
                })
                .unwrap();
                assert!(report.passed(), "{v:?}:\n{report}");
            }
        }
    }
}
