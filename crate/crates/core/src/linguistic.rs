//! Sentence-level linguistic encoder over semantic-role graphs.
//!
//! Each sentence becomes an event node (a BiLSTM summary of its tokens)
//! linked to one action node per predicate, each action linked to an entity
//! node per argument. Local nodes start from the mean of their span's token
//! features and are scaled by a learnable embedding of their role.

use std::io::BufRead;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::graph::{segment_mean, AttnGcnParams, DenseGraph};
use crate::nn::{BiLstm, Linear};
use crate::tensor::{Init, ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Role id carried by every action (predicate) node.
pub const PREDICATE_ROLE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceFeatures {
    /// `[N_t×d_t]` token features.
    pub tokens: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrlArgument {
    /// Half-open token range `[lo, hi)`.
    pub span: [usize; 2],
    pub role: u8,
    /// Index into the parse's predicate list.
    pub pred: usize,
}

/// One sentence's semantic-role parse; one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrlParse {
    /// Sentence length in tokens.
    pub tokens: usize,
    /// Half-open token ranges `[lo, hi)`.
    pub predicates: Vec<[usize; 2]>,
    pub arguments: Vec<SrlArgument>,
}

impl SrlParse {
    /// Structural checks; `n_r` bounds the argument roles when given.
    pub fn validate(&self, n_r: Option<usize>) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::Integrity("parse of an empty sentence".into()));
        }
        let check_span = |what: String, [lo, hi]: [usize; 2]| {
            if lo < hi && hi <= self.tokens {
                Ok(())
            } else {
                Err(Error::Integrity(format!(
                    "{what} span [{lo}, {hi}) outside 0..{}",
                    self.tokens
                )))
            }
        };
        for (p, &span) in self.predicates.iter().enumerate() {
            check_span(format!("predicate {p}"), span)?;
        }
        for (a, arg) in self.arguments.iter().enumerate() {
            check_span(format!("argument {a}"), arg.span)?;
            if arg.pred >= self.predicates.len() {
                return Err(Error::Integrity(format!(
                    "argument {a} is an orphan: predicate {} of {}",
                    arg.pred,
                    self.predicates.len()
                )));
            }
            let max = n_r.unwrap_or(u8::MAX as usize);
            if arg.role <= PREDICATE_ROLE || arg.role as usize > max {
                return Err(Error::Integrity(format!(
                    "argument {a} has role {}; argument roles are 2..={max}",
                    arg.role
                )));
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<SrlParse>> {
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse: SrlParse =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("parse line {}: {e}", i + 1)))?;
            out.push(parse);
        }
        Ok(out)
    }

    pub fn to_jsonl(parses: &[SrlParse]) -> String {
        parses
            .iter()
            .map(|p| serde_json::to_string(p).expect("parse serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleNode {
    Event,
    Action { predicate: usize },
    Entity { argument: usize },
}

/// Event node first, then one action per predicate, then one entity per
/// argument entry; edges are symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleGraph {
    pub graph: DenseGraph,
    pub nodes: Vec<RoleNode>,
    /// Role id of each node (`None` for the event node).
    pub roles: Vec<Option<u8>>,
    pub spans: Vec<Option<[usize; 2]>>,
}

impl RoleGraph {
    pub fn n_local(&self) -> usize {
        self.nodes.len() - 1
    }
}

pub fn build_role_graph(parse: &SrlParse) -> Result<RoleGraph> {
    parse.validate(None)?;
    let p = parse.predicates.len();
    let n = 1 + p + parse.arguments.len();
    let mut graph = DenseGraph::empty(n);
    let mut nodes = vec![RoleNode::Event];
    let mut roles = vec![None];
    let mut spans = vec![None];
    for (k, &span) in parse.predicates.iter().enumerate() {
        nodes.push(RoleNode::Action { predicate: k });
        roles.push(Some(PREDICATE_ROLE));
        spans.push(Some(span));
        graph.add_edge(0, 1 + k)?;
        graph.add_edge(1 + k, 0)?;
    }
    for (a, arg) in parse.arguments.iter().enumerate() {
        let node = 1 + p + a;
        nodes.push(RoleNode::Entity { argument: a });
        roles.push(Some(arg.role));
        spans.push(Some(arg.span));
        graph.add_edge(node, 1 + arg.pred)?;
        graph.add_edge(1 + arg.pred, node)?;
    }
    Ok(RoleGraph {
        graph,
        nodes,
        roles,
        spans,
    })
}

fn span_mean(tokens: &Tensor, [lo, hi]: [usize; 2]) -> Vec<f64> {
    let mut m = vec![0.0; tokens.cols()];
    for t in lo..hi {
        for (acc, x) in m.iter_mut().zip(tokens.row(t)) {
            *acc += x;
        }
    }
    let k = (hi - lo) as f64;
    m.iter_mut().for_each(|x| *x /= k);
    m
}

/// Parameter layout and forward passes of the linguistic encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticEncoder {
    pub d: usize,
    pub d_t: usize,
    pub n_r: usize,
    pub layers: usize,
}

impl LinguisticEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        LinguisticEncoder {
            d: cfg.d,
            d_t: cfg.d_t,
            n_r: cfg.n_r,
            layers: cfg.gcn_layers,
        }
    }

    fn token_proj(&self) -> Linear {
        Linear::new("linguistic.tok", self.d_t, self.d)
    }

    fn lstm(&self) -> BiLstm {
        BiLstm::new("linguistic.lstm", self.d, self.d / 2)
    }

    fn local_init(&self) -> Linear {
        Linear::without_bias("linguistic.sr_init", self.d_t, self.d)
    }

    pub fn role_name(l: usize) -> String {
        format!("linguistic.role.{l}")
    }

    fn gcn(&self, l: usize) -> AttnGcnParams {
        AttnGcnParams::new(format!("linguistic.gcn.{l}"))
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.token_proj().specs();
        s.extend(self.lstm().specs());
        s.extend(self.local_init().specs());
        for l in 0..self.layers {
            s.push(ParamSpec::new(Self::role_name(l), &[self.n_r, self.d], Init::Ones));
            s.extend(self.gcn(l).specs(self.d));
        }
        s
    }

    fn check_sentence(&self, sent: &SentenceFeatures) -> Result<()> {
        let t = &sent.tokens;
        if t.rank() != 2 || t.cols() != self.d_t || t.rows() == 0 {
            return Err(Error::Data(format!(
                "token matrix of shape {:?}, expected [N_t, {}]",
                t.shape(),
                self.d_t
            )));
        }
        Ok(())
    }

    fn event_row(&self, tape: &mut Tape, store: &ParamStore, sent: &SentenceFeatures) -> Result<Var> {
        self.check_sentence(sent)?;
        let tokens = tape.constant(sent.tokens.clone());
        let projected = self.token_proj().forward(tape, store, tokens)?;
        self.lstm().summarize(tape, store, projected)
    }

    /// BiLSTM summary of the projected tokens, `[d]`.
    pub fn sentence_embedding(&self, tape: &mut Tape, store: &ParamStore, sent: &SentenceFeatures) -> Result<Var> {
        let row = self.event_row(tape, store, sent)?;
        Ok(tape.reshape(row, &[self.d])?)
    }

    /// `(event, local)` summaries of one sentence, each `[d]`.
    pub fn encode_sentence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sent: &SentenceFeatures,
        parse: &SrlParse,
    ) -> Result<(Var, Var)> {
        let (g, l) = self.encode_all(tape, store, &[(sent.clone(), parse.clone())])?;
        Ok((tape.reshape(g, &[self.d])?, tape.reshape(l, &[self.d])?))
    }

    /// `(X_Lg, X_Ll)`, both `[N_s×d]`. All role graphs share one tape pass
    /// as disjoint blocks: event rows first, then every local node.
    pub fn encode_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentences: &[(SentenceFeatures, SrlParse)],
    ) -> Result<(Var, Var)> {
        let n_s = sentences.len();
        if n_s == 0 {
            return Err(Error::Data("no sentences to encode".into()));
        }
        let mut event_rows = Vec::with_capacity(n_s);
        let mut local_feats: Vec<Vec<f64>> = Vec::new();
        let mut role_idx: Vec<usize> = Vec::new();
        let mut segments: Vec<Range<usize>> = Vec::with_capacity(n_s);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (s, (sent, parse)) in sentences.iter().enumerate() {
            parse
                .validate(Some(self.n_r))
                .map_err(|e| Error::Integrity(format!("sentence {s}: {e}")))?;
            self.check_sentence(sent)?;
            if parse.tokens != sent.tokens.rows() {
                return Err(Error::Data(format!(
                    "sentence {s}: parse covers {} tokens, features have {}",
                    parse.tokens,
                    sent.tokens.rows()
                )));
            }
            event_rows.push(self.event_row(tape, store, sent)?);
            let rg = build_role_graph(parse)?;
            let base = local_feats.len();
            // role-graph node k > 0 sits at row n_s + base + k − 1
            let place = |k: usize| if k == 0 { s } else { n_s + base + k - 1 };
            for i in 0..rg.graph.n_nodes() {
                for j in rg.graph.neighbors(i) {
                    edges.push((place(i), place(j)));
                }
            }
            for k in 1..rg.nodes.len() {
                local_feats.push(span_mean(&sent.tokens, rg.spans[k].expect("local node")));
                role_idx.push(rg.roles[k].expect("local node") as usize - 1);
            }
            segments.push(base..local_feats.len());
        }
        let n_local = local_feats.len();
        let mut graph = DenseGraph::empty(n_s + n_local);
        for (i, j) in edges {
            graph.add_edge(i, j)?;
        }

        let mut events = tape.concat_rows(&event_rows)?;
        let mut local = if n_local > 0 {
            let feats = tape.constant(Tensor::from_rows(&local_feats)?);
            Some(self.local_init().forward(tape, store, feats)?)
        } else {
            None
        };
        for l in 0..self.layers {
            let layer = self.gcn(l).bind(tape, store)?;
            let nodes = match local {
                Some(loc) => {
                    let table = tape.param(store, &Self::role_name(l))?;
                    let scale = tape.gather_rows(table, &role_idx)?;
                    let modulated = tape.mul(loc, scale)?;
                    tape.concat_rows(&[events, modulated])?
                }
                None => events,
            };
            let out = layer.forward(tape, nodes, &graph)?;
            events = tape.slice_rows(out, 0, n_s)?;
            if local.is_some() {
                local = Some(tape.slice_rows(out, n_s, n_local)?);
            }
        }
        let pooled = match local {
            Some(loc) => segment_mean(tape, loc, &segments)?,
            None => tape.constant(Tensor::zeros(&[n_s, self.d])),
        };
        Ok((events, pooled))
    }
}
