//! Synthetic question-answering tasks with a planted, source-specific signal.
//!
//! Every class owns a random prototype vector per channel. A sample's label
//! is written into exactly one channel as `prototype + noise`; every other
//! channel is standard normal noise. In question-dependent mode each of the
//! four channels carries its own class and the question's first token names
//! which one answers the question.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, QuestionSetting};
use crate::linguistic::{SentenceFeatures, SrlArgument, SrlParse};
use crate::tensor::Tensor;
use crate::visual::{ClipFeatures, FrameFeatures};
use crate::{Error, Result};

/// Channel carrying the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    /// Frame appearance vectors.
    HolisticVisual,
    /// Object class-attribute rows.
    FinegrainedVisual,
    /// First token of the first sentence.
    HolisticLinguistic,
    /// Tokens inside argument spans.
    FinegrainedLinguistic,
    /// One of the four above, chosen per sample by the question.
    QuestionDependent,
}

impl SignalSource {
    pub const CHANNELS: [SignalSource; 4] = [
        SignalSource::HolisticVisual,
        SignalSource::FinegrainedVisual,
        SignalSource::HolisticLinguistic,
        SignalSource::FinegrainedLinguistic,
    ];

    fn channel(self) -> Option<usize> {
        Self::CHANNELS.iter().position(|&c| c == self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_samples: usize,
    pub signal_source: SignalSource,
    pub noise_scale: f64,
    pub n_classes: usize,
}

impl SyntheticTaskSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_samples == 0 || self.n_classes < 2 {
            return Err(Error::Config("a task needs samples and at least two classes".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale {} must be ≥ 0", self.noise_scale)));
        }
        match cfg.question_setting {
            QuestionSetting::OpenEnded if self.n_classes > cfg.answer_set_size => Err(Error::Config(format!(
                "{} classes exceed the answer set of {}",
                self.n_classes, cfg.answer_set_size
            ))),
            QuestionSetting::MultiChoice if self.n_classes < cfg.n_k => Err(Error::Config(format!(
                "{} classes cannot fill {} distinct candidates",
                self.n_classes, cfg.n_k
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub clip: ClipFeatures,
    pub sentences: Vec<SentenceFeatures>,
    /// Parses travel separately as JSON lines; see [`Dataset::save`].
    #[serde(skip)]
    pub parses: Vec<SrlParse>,
    pub question: Tensor,
    /// Candidate answer token matrices (multiple-choice only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Tensor>,
    /// Answer class (open-ended) or index of the correct candidate.
    pub label: usize,
    /// Class planted in each of the four channels (debugging aid).
    pub planted: [usize; 4],
    /// Channel the question asks about.
    pub asked: usize,
}

impl Sample {
    pub fn sentence_pairs(&self) -> Vec<(SentenceFeatures, SrlParse)> {
        self.sentences
            .iter()
            .cloned()
            .zip(self.parses.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub samples: Vec<Sample>,
}

pub const DATASET_FILE: &str = "dataset.json";
pub const PARSES_FILE: &str = "parses.jsonl";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `dataset.json` and `parses.jsonl` (one parse per sentence,
    /// sample-major) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DATASET_FILE), serde_json::to_vec(self)?)?;
        let parses: Vec<SrlParse> = self.samples.iter().flat_map(|s| s.parses.iter().cloned()).collect();
        fs::write(dir.join(PARSES_FILE), SrlParse::to_jsonl(&parses))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| {
            fs::read(dir.join(name)).map_err(|e| Error::Data(format!("{}: {e}", dir.join(name).display())))
        };
        let mut ds: Dataset =
            serde_json::from_slice(&read(DATASET_FILE)?).map_err(|e| Error::Data(format!("{DATASET_FILE}: {e}")))?;
        let parses = SrlParse::read_jsonl(&read(PARSES_FILE)?[..])?;
        let needed: usize = ds.samples.iter().map(|s| s.sentences.len()).sum();
        if parses.len() != needed {
            return Err(Error::Data(format!("{} parses for {needed} sentences", parses.len())));
        }
        let mut it = parses.into_iter();
        for s in &mut ds.samples {
            s.parses = it.by_ref().take(s.sentences.len()).collect();
        }
        Ok(ds)
    }

    /// Extents of every sample agree with `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let bad = |what: &str| Error::Data(format!("sample {i}: {what} does not match the configuration"));
            s.clip.validate().map_err(|e| Error::Data(format!("sample {i}: {e}")))?;
            let f = &s.clip.frames[0];
            if s.clip.n_frames() != cfg.n_f || f.n_objects() != cfg.n_o {
                return Err(bad("frame or object count"));
            }
            if f.appearance.len() != cfg.d_a || f.objects.cols() != cfg.d_o || f.class_attr.cols() != cfg.d_c {
                return Err(bad("visual feature width"));
            }
            if s.sentences.len() != cfg.n_s || s.parses.len() != cfg.n_s {
                return Err(bad("sentence count"));
            }
            if s.sentences.iter().any(|x| x.tokens.cols() != cfg.d_t) || s.question.cols() != cfg.d_t {
                return Err(bad("token width"));
            }
            match cfg.question_setting {
                QuestionSetting::OpenEnded if s.label >= cfg.answer_set_size => return Err(bad("label")),
                QuestionSetting::MultiChoice if s.candidates.len() != cfg.n_k || s.label >= cfg.n_k => {
                    return Err(bad("candidate set"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn normal_vec<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn noise_matrix<R: Rng>(r: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(r, rows * cols)).expect("positive extents")
}

fn planted<R: Rng>(r: &mut R, proto: &[f64], noise: f64) -> Vec<f64> {
    proto
        .iter()
        .map(|p| p + noise * r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Class prototypes per channel plus question templates and answer prototypes.
struct Prototypes {
    channels: [Vec<Vec<f64>>; 4],
    templates: Vec<Vec<f64>>,
    answers: Vec<Vec<f64>>,
}

impl Prototypes {
    fn new(cfg: &ModelConfig, n_classes: usize, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_fc1a_55e5);
        let mut table = |width: usize, n: usize| (0..n).map(|_| normal_vec(&mut r, width)).collect::<Vec<_>>();
        let channels = [
            table(cfg.d_a, n_classes),
            table(cfg.d_c, n_classes),
            table(cfg.d_t, n_classes),
            table(cfg.d_t, n_classes),
        ];
        let templates = table(cfg.d_t, 4);
        let answers = table(cfg.d_t, n_classes);
        Prototypes {
            channels,
            templates,
            answers,
        }
    }
}

const FRAME_SIZE: [f64; 2] = [320.0, 240.0];

fn random_box<R: Rng>(r: &mut R) -> [f64; 4] {
    let [fw, fh] = FRAME_SIZE;
    let w = r.random_range(16.0..fw / 2.0);
    let h = r.random_range(16.0..fh / 2.0);
    [r.random_range(0.0..fw - w), r.random_range(0.0..fh - h), w, h]
}

/// Parse with one or two predicates and one or two arguments each; spans
/// avoid token 0 whenever the sentence is long enough.
fn random_parse<R: Rng>(r: &mut R, n_t: usize, n_r: usize) -> SrlParse {
    let lo_min = if n_t > 1 { 1 } else { 0 };
    let span = |r: &mut R| {
        let lo = r.random_range(lo_min..n_t);
        let hi = r.random_range(lo + 1..=n_t.min(lo + 2));
        [lo, hi]
    };
    let n_pred = r.random_range(1..=2);
    let predicates: Vec<[usize; 2]> = (0..n_pred).map(|_| span(r)).collect();
    let mut arguments = Vec::new();
    if n_r >= 2 {
        for p in 0..n_pred {
            for _ in 0..r.random_range(1..=2) {
                arguments.push(SrlArgument {
                    span: span(r),
                    role: r.random_range(2..=n_r.min(u8::MAX as usize)) as u8,
                    pred: p,
                });
            }
        }
    }
    SrlParse {
        tokens: n_t,
        predicates,
        arguments,
    }
}

/// Deterministic dataset for `spec` at the extents of `cfg`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, cfg: &ModelConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let protos = Prototypes::new(cfg, spec.n_classes, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let noise = spec.noise_scale;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let asked = match spec.signal_source.channel() {
            Some(c) => c,
            None => r.random_range(0..4),
        };
        let mut classes = [0usize; 4];
        for c in &mut classes {
            *c = r.random_range(0..spec.n_classes);
        }
        let carries = |ch: usize| spec.signal_source == SignalSource::QuestionDependent || ch == asked;
        let class = classes[asked];

        let frames = (0..cfg.n_f)
            .map(|_| {
                let appearance = if carries(0) {
                    planted(&mut r, &protos.channels[0][classes[0]], noise)
                } else {
                    normal_vec(&mut r, cfg.d_a)
                };
                let class_rows: Vec<Vec<f64>> = (0..cfg.n_o)
                    .map(|_| {
                        if carries(1) {
                            planted(&mut r, &protos.channels[1][classes[1]], noise)
                        } else {
                            normal_vec(&mut r, cfg.d_c)
                        }
                    })
                    .collect();
                FrameFeatures {
                    appearance,
                    objects: noise_matrix(&mut r, cfg.n_o, cfg.d_o),
                    class_attr: Tensor::from_rows(&class_rows).expect("rows"),
                    boxes: (0..cfg.n_o).map(|_| random_box(&mut r)).collect(),
                    frame_size: FRAME_SIZE,
                }
            })
            .collect();

        let mut sentences = Vec::with_capacity(cfg.n_s);
        let mut parses = Vec::with_capacity(cfg.n_s);
        for s in 0..cfg.n_s {
            let parse = random_parse(&mut r, cfg.n_t, cfg.n_r);
            let mut rows: Vec<Vec<f64>> = (0..cfg.n_t).map(|_| normal_vec(&mut r, cfg.d_t)).collect();
            if carries(3) {
                for a in &parse.arguments {
                    for row in &mut rows[a.span[0]..a.span[1]] {
                        *row = planted(&mut r, &protos.channels[3][classes[3]], noise);
                    }
                }
            }
            if s == 0 && carries(2) {
                rows[0] = planted(&mut r, &protos.channels[2][classes[2]], noise);
            }
            sentences.push(SentenceFeatures {
                tokens: Tensor::from_rows(&rows).expect("rows"),
            });
            parses.push(parse);
        }

        let mut q_rows: Vec<Vec<f64>> = (0..cfg.n_t).map(|_| normal_vec(&mut r, cfg.d_t)).collect();
        q_rows[0] = planted(&mut r, &protos.templates[asked], noise);
        let question = Tensor::from_rows(&q_rows).expect("rows");

        let (label, candidates) = match cfg.question_setting {
            QuestionSetting::OpenEnded => (class, Vec::new()),
            QuestionSetting::MultiChoice => {
                let mut others: Vec<usize> = (0..spec.n_classes).filter(|&c| c != class).collect();
                others.shuffle(&mut r);
                let correct = r.random_range(0..cfg.n_k);
                let mut picks = others[..cfg.n_k - 1].to_vec();
                picks.insert(correct, class);
                let cands = picks
                    .iter()
                    .map(|&c| {
                        let rows: Vec<Vec<f64>> = (0..2).map(|_| planted(&mut r, &protos.answers[c], noise)).collect();
                        Tensor::from_rows(&rows).expect("rows")
                    })
                    .collect();
                (correct, cands)
            }
        };
        samples.push(Sample {
            clip: ClipFeatures { frames },
            sentences,
            parses,
            question,
            candidates,
            label,
            planted: classes,
            asked,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Raw features of the channel a sample's question asks about.
pub fn channel_features(sample: &Sample, channel: usize) -> Vec<f64> {
    let mean = |rows: Vec<&[f64]>| -> Vec<f64> {
        let n = rows.len() as f64;
        let mut m = vec![0.0; rows[0].len()];
        for row in &rows {
            for (a, x) in m.iter_mut().zip(*row) {
                *a += x / n;
            }
        }
        m
    };
    match channel {
        0 => mean(sample.clip.frames.iter().map(|f| f.appearance.as_slice()).collect()),
        1 => mean(
            sample
                .clip
                .frames
                .iter()
                .flat_map(|f| (0..f.class_attr.rows()).map(move |i| f.class_attr.row(i)))
                .collect(),
        ),
        2 => sample.sentences[0].tokens.row(0).to_vec(),
        _ => {
            let rows: Vec<&[f64]> = sample
                .sentences
                .iter()
                .zip(&sample.parses)
                .flat_map(|(s, p)| {
                    p.arguments
                        .iter()
                        .flat_map(move |a| (a.span[0]..a.span[1]).map(move |t| s.tokens.row(t)))
                })
                .collect();
            if rows.is_empty() {
                vec![0.0]
            } else {
                mean(rows)
            }
        }
    }
}

/// Nearest-centroid probe on the asked channel's raw features, fit and
/// scored on the same samples; returns training accuracy in `[0, 1]`.
/// Multiple-choice samples are scored on the class planted in the asked
/// channel.
pub fn probe_accuracy(ds: &Dataset) -> f64 {
    let n_classes = ds.spec.n_classes;
    let mut correct = 0;
    for ch in 0..4 {
        let members: Vec<&Sample> = ds.samples.iter().filter(|s| s.asked == ch).collect();
        if members.is_empty() {
            continue;
        }
        let feats: Vec<Vec<f64>> = members.iter().map(|s| channel_features(s, ch)).collect();
        let width = feats[0].len();
        let mut centroids = vec![vec![0.0; width]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (s, f) in members.iter().zip(&feats) {
            let c = s.planted[ch];
            counts[c] += 1;
            for (a, x) in centroids[c].iter_mut().zip(f) {
                *a += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            if *n > 0 {
                c.iter_mut().for_each(|x| *x /= *n as f64);
            }
        }
        for (s, f) in members.iter().zip(&feats) {
            let dist = |c: &Vec<f64>| c.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..n_classes)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("class present");
            correct += usize::from(best == s.planted[ch]);
        }
    }
    correct as f64 / ds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(source: SignalSource, noise: f64, n: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_samples: n,
            signal_source: source,
            noise_scale: noise,
            n_classes: 4,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = ModelConfig::tiny();
        let s = spec(SignalSource::FinegrainedVisual, 0.0, 2);
        let a = gen_synthetic(&s, &cfg, 5).unwrap();
        let b = gen_synthetic(&s, &cfg, 5).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        a.save(dir_a.path()).unwrap();
        b.save(dir_b.path()).unwrap();
        for f in [DATASET_FILE, PARSES_FILE] {
            assert_eq!(
                fs::read(dir_a.path().join(f)).unwrap(),
                fs::read(dir_b.path().join(f)).unwrap()
            );
        }
        assert_ne!(a, gen_synthetic(&s, &cfg, 6).unwrap());
        let back = Dataset::load(dir_a.path()).unwrap();
        assert_eq!(back, a);
        back.check_against(&cfg).unwrap();
    }

    #[test]
    fn probe_is_perfect_on_every_clean_channel() {
        let cfg = ModelConfig::tiny();
        for src in SignalSource::CHANNELS
            .into_iter()
            .chain([SignalSource::QuestionDependent])
        {
            let ds = gen_synthetic(&spec(src, 0.0, 40), &cfg, 1).unwrap();
            assert_eq!(probe_accuracy(&ds), 1.0, "{src:?}");
        }
    }

    #[test]
    fn labels_ignore_other_channels() {
        let cfg = ModelConfig::tiny();
        let mut ds = gen_synthetic(&spec(SignalSource::FinegrainedVisual, 0.0, 12), &cfg, 2).unwrap();
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
        // rotate sentences, parses and appearance across samples
        let n = ds.len();
        let moved: Vec<(Vec<SentenceFeatures>, Vec<SrlParse>)> = (0..n)
            .map(|i| {
                let s = &ds.samples[(i + 1) % n];
                (s.sentences.clone(), s.parses.clone())
            })
            .collect();
        for (s, (sent, parses)) in ds.samples.iter_mut().zip(moved) {
            s.sentences = sent;
            s.parses = parses;
        }
        assert_eq!(ds.samples.iter().map(|s| s.label).collect::<Vec<_>>(), labels);
        assert_eq!(probe_accuracy(&ds), 1.0);
    }

    #[test]
    fn question_dependent_labels_follow_the_question() {
        let cfg = ModelConfig::tiny();
        let ds = gen_synthetic(&spec(SignalSource::QuestionDependent, 0.0, 64), &cfg, 3).unwrap();
        let mut seen = [false; 4];
        for s in &ds.samples {
            assert_eq!(s.label, s.planted[s.asked]);
            seen[s.asked] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn multichoice_candidates() {
        let cfg = ModelConfig {
            question_setting: QuestionSetting::MultiChoice,
            ..ModelConfig::tiny()
        };
        let ds = gen_synthetic(&spec(SignalSource::HolisticVisual, 0.0, 10), &cfg, 4).unwrap();
        for s in &ds.samples {
            assert_eq!(s.candidates.len(), cfg.n_k);
            assert!(s.label < cfg.n_k);
        }
        ds.check_against(&cfg).unwrap();
        let too_few = SyntheticTaskSpec {
            n_classes: 2,
            ..spec(SignalSource::HolisticVisual, 0.0, 1)
        };
        assert!(gen_synthetic(&too_few, &cfg, 0).is_err());
    }

    #[test]
    fn mismatched_config_is_a_data_error() {
        let ds = gen_synthetic(&spec(SignalSource::HolisticVisual, 0.1, 2), &ModelConfig::tiny(), 0).unwrap();
        let other = ModelConfig {
            n_f: 3,
            ..ModelConfig::tiny()
        };
        assert!(matches!(ds.check_against(&other), Err(Error::Data(_))));
    }
}
