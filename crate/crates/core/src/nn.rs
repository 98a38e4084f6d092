//! Affine maps and the bidirectional LSTM used for sentence summaries.

use crate::tensor::{ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::Result;

/// `x · W + b` with `W` stored `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            fan_in,
            fan_out,
            bias: true,
        }
    }

    pub fn without_bias(prefix: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            bias: false,
            ..Linear::new(prefix, fan_in, fan_out)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = vec![ParamSpec::weight(self.weight_name(), self.fan_in, self.fan_out)];
        if self.bias {
            specs.push(ParamSpec::bias(self.bias_name(), self.fan_out));
        }
        specs
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let y = tape.matmul(x, w)?;
        if !self.bias {
            return Ok(y);
        }
        let b = tape.param(store, &self.bias_name())?;
        Ok(tape.add(y, b)?)
    }
}

/// One LSTM direction: gates ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn specs(&self) -> Vec<ParamSpec> {
        let (p, h) = (&self.prefix, self.hidden);
        vec![
            ParamSpec::weight(format!("{p}.w_ih"), self.input, 4 * h),
            ParamSpec::weight(format!("{p}.w_hh"), h, 4 * h),
            ParamSpec::bias(format!("{p}.b"), 4 * h),
        ]
    }

    /// Runs over the rows of `x` (forward order unless `reverse`) and returns
    /// the last hidden state as a `[1×hidden]` row.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let p = &self.prefix;
        let h_dim = self.hidden;
        let w_ih = tape.param(store, &format!("{p}.w_ih"))?;
        let w_hh = tape.param(store, &format!("{p}.w_hh"))?;
        let b = tape.param(store, &format!("{p}.b"))?;
        let steps = tape.value(x).rows();
        let projected = tape.matmul(x, w_ih)?;
        let projected = tape.add(projected, b)?;
        let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[1, h_dim]));
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.slice_rows(projected, t, 1)?;
            let rec = tape.matmul(h, w_hh)?;
            let gates = tape.add(xt, rec)?;
            let i = tape.slice_cols(gates, 0, h_dim)?;
            let f = tape.slice_cols(gates, h_dim, h_dim)?;
            let g = tape.slice_cols(gates, 2 * h_dim, h_dim)?;
            let o = tape.slice_cols(gates, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed)?;
        }
        Ok(h)
    }
}

/// One-layer bidirectional LSTM summarizing a sequence as
/// `[h_forward_last ; h_reverse_last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    /// `hidden` is the per-direction width; the summary is `2·hidden` wide.
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        let cell = |dir: &str| LstmCell {
            prefix: format!("{prefix}.{dir}"),
            input,
            hidden,
        };
        BiLstm {
            forward: cell("fwd"),
            backward: cell("bwd"),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.forward.specs();
        s.extend(self.backward.specs());
        s
    }

    pub fn summarize(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.forward.run(tape, store, x, false)?;
        let b = self.backward.run(tape, store, x, true)?;
        Ok(tape.concat_cols(&[f, b])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Precision;
    use crate::testutil::{assert_close, oracle, rand_matrix, rng, store_from};

    #[test]
    fn zero_network_gives_zero_summary() {
        let lstm = BiLstm::new("l", 3, 2);
        let mut store = ParamStore::new(Precision::Double);
        for s in lstm.specs() {
            store.insert(&s.name, Tensor::zeros(&s.shape)).unwrap();
        }
        let mut r = rng(1);
        let mut t = Tape::new(Precision::Double);
        let x = t.constant(rand_matrix(&mut r, 4, 3, 1.0));
        let y = lstm.summarize(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn bilstm_matches_recurrence_oracle() {
        let mut r = rng(2);
        let lstm = BiLstm::new("l", 3, 4);
        let store = store_from(&lstm.specs(), &mut r);
        let x = rand_matrix(&mut r, 4, 3, 1.0);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
        let mut t = Tape::new(Precision::Double);
        let xv = t.constant(x);
        let y = lstm.summarize(&mut t, &store, xv).unwrap();
        assert_close(t.value(y).data(), &oracle::bilstm(&store, "l", &rows), 1e-12);
    }

    #[test]
    fn bilstm_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let lstm = BiLstm::new("l", 3, 2);
            let lin = Linear::new("p", 2, 3);
            let mut specs = lstm.specs();
            specs.extend(lin.specs());
            let mut store = store_from(&specs, &mut r);
            store
                .set_data("l.fwd.b", rand_matrix(&mut r, 1, 8, 0.5).data())
                .unwrap();
            store.set_data("p.b", rand_matrix(&mut r, 1, 3, 0.5).data()).unwrap();
            let x = rand_matrix(&mut r, 3, 2, 1.0);
            let report = check_gradients(&mut store, |t, s| {
                let xv = t.constant(x.clone());
                let h = lin.forward(t, s, xv)?;
                let y = lstm.summarize(t, s, h)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
    }
}
