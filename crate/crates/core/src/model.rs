//! The full question-answering model: encoders, integration and head.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, QuestionSetting};
use crate::data::Sample;
use crate::davl::{Integrator, RepresentationBundle};
use crate::heads::{argmax, question_encoder, MultiChoiceHead, OpenEndedHead, SequenceEncoder};
use crate::linguistic::LinguisticEncoder;
use crate::tensor::{ParamSpec, ParamStore, Tape, Var};
use crate::visual::VisualEncoder;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    OpenEnded(OpenEndedHead),
    MultiChoice(MultiChoiceHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiVLR {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub linguistic: LinguisticEncoder,
    pub question: SequenceEncoder,
    pub integrator: Integrator,
    pub head: Head,
}

impl LiVLR {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let head = match config.question_setting {
            QuestionSetting::OpenEnded => {
                Head::OpenEnded(OpenEndedHead::new(config.d, config.hidden, config.answer_set_size))
            }
            QuestionSetting::MultiChoice => Head::MultiChoice(MultiChoiceHead::new(config.d_t, config.d)),
        };
        Ok(LiVLR {
            config: config.clone(),
            visual: VisualEncoder::new(config),
            linguistic: LinguisticEncoder::new(config),
            question: question_encoder(config),
            integrator: Integrator::new(config),
            head,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.visual.specs();
        s.extend(self.linguistic.specs());
        s.extend(self.question.specs());
        s.extend(self.integrator.specs());
        s.extend(match &self.head {
            Head::OpenEnded(h) => h.specs(),
            Head::MultiChoice(h) => h.specs(),
        });
        s
    }

    /// Fresh parameters drawn from `seed` at the configured precision.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ParamStore::from_specs(&self.specs(), &mut rng, self.config.precision)?)
    }

    /// Logits `[1×|A|]` (open-ended) or candidate scores `[N_k]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, sample: &Sample) -> Result<Var> {
        let (vg, vl) = self.visual.encode_clip(tape, store, &sample.clip)?;
        let (lg, ll) = self.linguistic.encode_all(tape, store, &sample.sentence_pairs())?;
        let (q_tokens, q) = self.question.encode(tape, store, &sample.question)?;
        let bundle = RepresentationBundle { vg, vl, lg, ll };
        let x = self.integrator.integrate(tape, store, &bundle, q_tokens)?;
        match &self.head {
            Head::OpenEnded(h) => h.predict(tape, store, x, q),
            Head::MultiChoice(h) => h.predict(tape, store, x, q, &sample.candidates),
        }
    }

    /// Cross-entropy (open-ended) or summed pairwise hinge loss.
    pub fn loss(&self, tape: &mut Tape, output: Var, label: usize) -> Result<Var> {
        Ok(match self.head {
            Head::OpenEnded(_) => tape.cross_entropy(output, label)?,
            Head::MultiChoice(_) => tape.hinge_loss(output, label)?,
        })
    }

    pub fn predict(&self, tape: &Tape, output: Var) -> usize {
        argmax(tape.value(output).data())
    }
}

/// Trainable scalar counts grouped by the first segment of the parameter name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub groups: BTreeMap<String, usize>,
    pub total: usize,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, n) in &self.groups {
            writeln!(f, "{g:<12} {n:>12}")?;
        }
        write!(f, "{:<12} {:>12}", "total", self.total)
    }
}

pub fn count_specs(specs: &[ParamSpec]) -> ParamCount {
    let mut groups = BTreeMap::new();
    for s in specs {
        let group = s.name.split('.').next().unwrap_or(&s.name).to_string();
        *groups.entry(group).or_insert(0) += s.numel();
    }
    let total = groups.values().sum();
    ParamCount { groups, total }
}

/// Counts from shapes alone; nothing is allocated.
pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    Ok(count_specs(&LiVLR::new(config)?.specs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RiVariant;
    use crate::data::{gen_synthetic, SignalSource, SyntheticTaskSpec};
    use crate::tensor::Precision;

    #[test]
    fn single_weight_count() {
        let c = count_specs(&[ParamSpec::weight("w", 4, 4)]);
        assert_eq!(c.total, 16);
    }

    #[test]
    fn count_ignores_node_extents() {
        let base = param_count(&ModelConfig::desk()).unwrap();
        let other = ModelConfig {
            n_f: 9,
            n_o: 2,
            n_s: 5,
            n_t: 11,
            batch_size: 3,
            ..ModelConfig::desk()
        };
        assert_eq!(param_count(&other).unwrap(), base);
    }

    #[test]
    fn count_matches_allocated_store() {
        for v in RiVariant::ALL {
            let cfg = ModelConfig {
                ri_variant: v,
                ..ModelConfig::tiny()
            };
            let m = LiVLR::new(&cfg).unwrap();
            let store = m.init_params(0).unwrap();
            assert_eq!(param_count(&cfg).unwrap().total, store.num_scalars());
        }
    }

    #[test]
    fn forward_shapes() {
        for setting in [QuestionSetting::OpenEnded, QuestionSetting::MultiChoice] {
            let cfg = ModelConfig {
                question_setting: setting,
                precision: Precision::Double,
                ..ModelConfig::tiny()
            };
            let spec = SyntheticTaskSpec {
                n_samples: 2,
                signal_source: SignalSource::HolisticVisual,
                noise_scale: 0.1,
                n_classes: 4,
            };
            let ds = gen_synthetic(&spec, &cfg, 0).unwrap();
            let m = LiVLR::new(&cfg).unwrap();
            let store = m.init_params(1).unwrap();
            let mut t = Tape::new(cfg.precision);
            let out = m.forward(&mut t, &store, &ds.samples[0]).unwrap();
            let n = match setting {
                QuestionSetting::OpenEnded => cfg.answer_set_size,
                QuestionSetting::MultiChoice => cfg.n_k,
            };
            assert_eq!(t.value(out).numel(), n);
            let loss = m.loss(&mut t, out, ds.samples[0].label).unwrap();
            assert!(t.value(loss).item().is_finite());
        }
    }
}
