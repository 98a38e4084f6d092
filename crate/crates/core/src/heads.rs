//! Question encoder and the open-ended and multiple-choice answer heads.

use crate::config::ModelConfig;
use crate::nn::{BiLstm, Linear};
use crate::tensor::{ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Token projection with ReLU followed by a BiLSTM summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoder {
    pub proj: Linear,
    pub lstm: BiLstm,
}

impl SequenceEncoder {
    pub fn new(prefix: &str, d_t: usize, d: usize) -> Self {
        SequenceEncoder {
            proj: Linear::new(format!("{prefix}.proj"), d_t, d),
            lstm: BiLstm::new(&format!("{prefix}.lstm"), d, d / 2),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.proj.specs();
        s.extend(self.lstm.specs());
        s
    }

    /// `(tokens [N_t×d], summary [1×d])`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &Tensor) -> Result<(Var, Var)> {
        if tokens.rank() != 2 || tokens.rows() == 0 || tokens.cols() != self.proj.fan_in {
            return Err(Error::Data(format!(
                "token matrix of shape {:?}, expected [N_t, {}]",
                tokens.shape(),
                self.proj.fan_in
            )));
        }
        let x = tape.constant(tokens.clone());
        let x = self.proj.forward(tape, store, x)?;
        let x = tape.relu(x);
        let summary = self.lstm.summarize(tape, store, x)?;
        Ok((x, summary))
    }
}

pub fn question_encoder(cfg: &ModelConfig) -> SequenceEncoder {
    SequenceEncoder::new("question", cfg.d_t, cfg.d)
}

/// Two-layer classifier over `[x̂ ; q̂]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenEndedHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl OpenEndedHead {
    pub fn new(d: usize, hidden: usize, answers: usize) -> Self {
        OpenEndedHead {
            fc1: Linear::new("head.oe.fc1", 2 * d, hidden),
            fc2: Linear::new("head.oe.fc2", hidden, answers),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.fc1.specs();
        s.extend(self.fc2.specs());
        s
    }

    /// Logits `[1×|A|]`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, x: Var, q: Var) -> Result<Var> {
        let joint = tape.concat_cols(&[x, q])?;
        let h = self.fc1.forward(tape, store, joint)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Linear scorer over `[x̂ ; q̂ ; ê_k]` for each candidate answer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChoiceHead {
    pub candidate: SequenceEncoder,
    pub score: Linear,
}

impl MultiChoiceHead {
    pub fn new(d_t: usize, d: usize) -> Self {
        MultiChoiceHead {
            candidate: SequenceEncoder::new("head.mc.cand", d_t, d),
            score: Linear::new("head.mc.score", 3 * d, 1),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.candidate.specs();
        s.extend(self.score.specs());
        s
    }

    /// Scores `[N_k]`, one per candidate token matrix.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, x: Var, q: Var, candidates: &[Tensor]) -> Result<Var> {
        if candidates.len() < 2 {
            return Err(Error::Data(format!("{} candidates; need at least 2", candidates.len())));
        }
        let mut rows = Vec::with_capacity(candidates.len());
        for c in candidates {
            let (_, e) = self.candidate.encode(tape, store, c)?;
            rows.push(tape.concat_cols(&[x, q, e])?);
        }
        let joint = tape.concat_rows(&rows)?;
        let s = self.score.forward(tape, store, joint)?;
        Ok(tape.reshape(s, &[candidates.len()])?)
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
