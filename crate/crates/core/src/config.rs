//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::tensor::{AdamW, Precision};
use crate::{Error, Result};

/// Representation-integration back-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RiVariant {
    #[serde(rename = "DAVL")]
    Davl,
    #[serde(rename = "RI_GCN")]
    RiGcn,
    #[serde(rename = "RI_AT")]
    RiAt,
    #[serde(rename = "RI_CONCAT")]
    RiConcat,
}

impl RiVariant {
    pub const ALL: [RiVariant; 4] = [RiVariant::Davl, RiVariant::RiGcn, RiVariant::RiAt, RiVariant::RiConcat];

    pub fn name(self) -> &'static str {
        match self {
            RiVariant::Davl => "DAVL",
            RiVariant::RiGcn => "RI_GCN",
            RiVariant::RiAt => "RI_AT",
            RiVariant::RiConcat => "RI_CONCAT",
        }
    }
}

/// Open-ended classification or multiple-choice scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionSetting {
    #[serde(rename = "OE")]
    OpenEnded,
    #[serde(rename = "MC")]
    MultiChoice,
}

impl QuestionSetting {
    pub fn name(self) -> &'static str {
        match self {
            QuestionSetting::OpenEnded => "OE",
            QuestionSetting::MultiChoice => "MC",
        }
    }
}

/// Every architectural extent and training hyperparameter.
///
/// Missing keys in a JSON file take the desk-scale defaults; the trainer
/// always writes the fully resolved config back out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared embedding width.
    pub d: usize,
    /// Frame appearance feature width.
    pub d_a: usize,
    /// Object region feature width.
    pub d_o: usize,
    /// Object class-attribute feature width.
    pub d_c: usize,
    /// Token feature width.
    pub d_t: usize,
    pub n_f: usize,
    pub n_o: usize,
    pub n_s: usize,
    pub n_t: usize,
    /// Semantic-role vocabulary size (role 1 is the predicate).
    pub n_r: usize,
    /// Neighbors kept per row by the graph learners.
    pub n_n: usize,
    /// Attention heads in the question attention blocks.
    pub n_h: usize,
    /// Candidates per question in the multiple-choice setting.
    pub n_k: usize,
    pub answer_set_size: usize,
    pub gcn_layers: usize,
    /// Hidden width of the open-ended classifier.
    pub hidden: usize,
    pub ri_variant: RiVariant,
    pub question_setting: QuestionSetting,
    pub precision: Precision,
    pub seed: u64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Divide integration-GCN messages by neighbor count.
    pub davl_degree_norm: bool,
    /// Experimental: attention-weighted messages in the integration GCN.
    pub davl_attention_gcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale extents.
    pub fn desk() -> Self {
        ModelConfig {
            d: 32,
            d_a: 64,
            d_o: 64,
            d_c: 32,
            d_t: 32,
            n_f: 4,
            n_o: 4,
            n_s: 2,
            n_t: 4,
            n_r: 16,
            n_n: 5,
            n_h: 4,
            n_k: 4,
            answer_set_size: 4,
            gcn_layers: 1,
            hidden: 32,
            ri_variant: RiVariant::Davl,
            question_setting: QuestionSetting::OpenEnded,
            precision: Precision::Single,
            seed: 0,
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 100,
            davl_degree_norm: true,
            davl_attention_gcn: false,
        }
    }

    /// The smallest configuration used by the gradient and overfit checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 8,
            n_f: 2,
            n_o: 3,
            n_s: 2,
            n_t: 4,
            n_h: 2,
            n_n: 2,
            answer_set_size: 4,
            hidden: 8,
            lr: 1e-4,
            batch_size: 8,
            epochs: 300,
            ..ModelConfig::desk()
        }
    }

    /// Published extents (MSRVTT-QA setting, open-ended).
    pub fn paper() -> Self {
        ModelConfig {
            d: 512,
            d_a: 2048,
            d_o: 2048,
            d_c: 768,
            d_t: 768,
            n_f: 64,
            n_o: 10,
            n_s: 12,
            n_t: 20,
            n_r: 16,
            n_n: 5,
            n_h: 16,
            n_k: 5,
            answer_set_size: 1000,
            hidden: 512,
            lr: 8e-5,
            batch_size: 256,
            epochs: 80,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(ModelConfig::tiny()),
            "desk" => Some(ModelConfig::desk()),
            "paper" => Some(ModelConfig::paper()),
            _ => None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compact canonical JSON (field order fixed, every field present).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d", self.d),
            ("d_a", self.d_a),
            ("d_o", self.d_o),
            ("d_c", self.d_c),
            ("d_t", self.d_t),
            ("n_f", self.n_f),
            ("n_o", self.n_o),
            ("n_s", self.n_s),
            ("n_t", self.n_t),
            ("n_r", self.n_r),
            ("n_n", self.n_n),
            ("n_h", self.n_h),
            ("n_k", self.n_k),
            ("gcn_layers", self.gcn_layers),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("d = {} must be even", self.d)));
        }
        if !self.d.is_multiple_of(self.n_h) {
            return Err(Error::Config(format!(
                "n_h = {} does not divide d = {}",
                self.n_h, self.d
            )));
        }
        if self.answer_set_size < 2 {
            return Err(Error::Config("answer_set_size must be at least 2".into()));
        }
        if self.question_setting == QuestionSetting::MultiChoice && self.n_k < 2 {
            return Err(Error::Config("multiple choice needs n_k ≥ 2".into()));
        }
        if self.n_r > u8::MAX as usize {
            return Err(Error::Config("n_r must fit a role label".into()));
        }
        let [b1, b2] = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr, weight_decay must be ≥ 0 and eps > 0".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            betas: (self.betas[0], self.betas[1]),
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Row count of the integration graph: two visual and two linguistic sources.
    pub fn integration_nodes(&self) -> usize {
        2 * self.n_f + 2 * self.n_s
    }
}
