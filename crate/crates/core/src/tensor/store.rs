use std::collections::BTreeMap;

use rand::Rng;

use super::{Precision, Result, Tensor, TensorError};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(−1/√fan_in, 1/√fan_in)`
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Declared parameter: name, shape, initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Weight matrix stored `[fan_in, fan_out]`.
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        ParamSpec::new(name, &[fan_in, fan_out], Init::Uniform { fan_in })
    }

    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        ParamSpec::new(name, &[n], Init::Zeros)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named parameters with their AdamW state, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            precision,
        }
    }

    /// Initializes every spec in declaration order from `rng`.
    pub fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R, precision: Precision) -> Result<Self> {
        let mut store = ParamStore::new(precision);
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            store.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Adds a trainable parameter with a zeroed gradient buffer.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.precision.round_slice(tensor.data_mut());
        tensor.set_requires_grad(true);
        let n = tensor.numel();
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor,
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    /// Stops gradient tracking for `name`; it enters tapes as a constant.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        self.entry_mut(name)?.tensor.set_requires_grad(false);
        Ok(())
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut Entry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.tensor.requires_grad())
    }

    /// Overwrites the value of `name`, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let precision = self.precision;
        let e = self.entry_mut(name)?;
        if data.len() != e.tensor.numel() {
            return Err(TensorError::Shape {
                op: "set_data",
                lhs: e.tensor.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        e.tensor.data_mut().copy_from_slice(data);
        precision.round_slice(e.tensor.data_mut());
        Ok(())
    }

    pub fn set_scalar(&mut self, name: &str, index: usize, value: f64) -> Result<()> {
        let precision = self.precision;
        let e = self.entry_mut(name)?;
        let slot = e
            .tensor
            .data_mut()
            .get_mut(index)
            .ok_or_else(|| TensorError::Contract(format!("index {index} out of `{name}`")))?;
        *slot = precision.round(value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let precision = self.precision;
        let e = self.entry_mut(name)?;
        let buf = e
            .tensor
            .grad_mut()
            .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
        if buf.len() != g.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: vec![buf.len()],
                rhs: vec![g.len()],
            });
        }
        for (b, x) in buf.iter_mut().zip(g) {
            *b = precision.round(*b + x);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
    }

    /// First and second moments plus step count of `name`.
    pub fn moments(&self, name: &str) -> Result<(&[f64], &[f64], u64)> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok((&e.m, &e.v, e.step))
    }

    /// One decoupled-weight-decay Adam update of every parameter.
    ///
    /// The decay shrinks the weights directly (`θ ← θ − lr·λ·θ`) and is not
    /// folded into the gradient moments.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if let Some((name, _)) = self.entries.iter().find(|(_, e)| e.tensor.grad().is_none()) {
            return Err(TensorError::MissingGrad(name.clone()));
        }
        let precision = self.precision;
        let (b1, b2) = opt.betas;
        for e in self.entries.values_mut() {
            e.step += 1;
            let t = e.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let g = e.tensor.grad().expect("checked above").to_vec();
            let Entry { tensor, m, v, .. } = e;
            for (i, theta) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = precision.round(b1 * m[i] + (1.0 - b1) * g[i]);
                v[i] = precision.round(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let decayed = *theta - opt.lr * opt.weight_decay * *theta;
                *theta = precision.round(decayed - opt.lr * m_hat / (v_hat.sqrt() + opt.eps));
            }
        }
        Ok(())
    }
}
