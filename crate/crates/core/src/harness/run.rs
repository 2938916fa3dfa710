//! In-memory training and evaluation of one configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Arm, RunConfig};
use super::dataset::{generate_dataset, Dataset, LabeledImage};
use super::metrics::{Confusion, EvalReport};
use super::HarnessError;
use crate::format::{format_reward, parse_output};
use crate::grpo::{StepMetrics, TrainQuery, Trainer};
use crate::numerics::Tensor;
use crate::policy::{checkpoint_bytes, Conditioning, Policy, INSTRUCTION};
use crate::retrieval::{build_index, static_summary, summarize, EmbeddingIndex, RetrievalResult, RetrievalSummary};
use crate::saliency::saliency_map;
use crate::Label;

/// One line of `runlog.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogRecord {
    Step(StepMetrics),
    Eval(EvalPoint),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
    pub format_compliance: f64,
}

pub fn runlog_jsonl(records: &[LogRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Unit [CLS] embeddings of `items` under `policy`'s encoder.
pub fn embed_all(policy: &Policy, features: &[Tensor]) -> Result<Vec<Vec<f64>>, HarnessError> {
    features
        .par_iter()
        .map(|f| Ok(policy.encode_features(f)?.cls_unit))
        .collect()
}

pub fn features_all(policy: &Policy, items: &[LabeledImage]) -> Result<Vec<Tensor>, HarnessError> {
    items.par_iter().map(|it| Ok(policy.features(&it.image)?)).collect()
}

/// The training-set index used by the full-rag arm: initial-encoder
/// embeddings of every training image with its label.
pub fn index_for(initial: &Policy, dataset: &Dataset) -> Result<EmbeddingIndex, HarnessError> {
    let features = features_all(initial, &dataset.train)?;
    let labels: Vec<Label> = dataset.train.iter().map(|it| it.label).collect();
    Ok(build_index(&embed_all(initial, &features)?, &labels)?)
}

/// Label counts of the whole training set scaled to `k` neighbors.
pub fn global_static_summary(labels: &[Label], k: usize) -> Result<RetrievalSummary, HarnessError> {
    let real = labels.iter().filter(|&&l| l == Label::Real).count();
    let real_k = ((k * real) as f64 / labels.len() as f64).round() as usize;
    Ok(static_summary(k, real_k, k - real_k)?)
}

/// Prompt tokens for `arm`. `retrieved` is used only by the full-rag arm.
pub fn arm_prompt(
    policy: &Policy,
    arm: Arm,
    static_text: &RetrievalSummary,
    retrieved: Option<&RetrievalResult>,
) -> Result<Vec<usize>, HarnessError> {
    let summary = match arm {
        Arm::NoRag => None,
        Arm::Static => Some(static_text.clone()),
        Arm::FullRag => Some(summarize(
            retrieved.ok_or_else(|| HarnessError::Data("full-rag prompt needs a retrieval result".into()))?,
        )),
    };
    Ok(policy.build_prompt(INSTRUCTION, summary.as_ref())?)
}

/// Greedy verdict for one image, with saliency when a box is given.
#[derive(Clone, Debug, PartialEq)]
pub struct Judgement {
    pub text: String,
    pub verdict: Option<Label>,
    pub format_ok: bool,
    pub in_box: Option<f64>,
}

pub fn judge(
    policy: &Policy,
    features: &Tensor,
    prompt: &[usize],
    bbox: Option<&crate::BoundingBox>,
) -> Result<Judgement, HarnessError> {
    let enc = policy.encode_features(features)?;
    let cond = Conditioning {
        image: enc.cls,
        prompt: policy.prompt_feature(prompt)?,
    };
    let sample = policy.greedy(&cond)?;
    let text = policy.vocabulary().render(&sample.tokens)?;
    let verdict = parse_output(&text);
    let in_box = match bbox {
        Some(b) => {
            let c = policy.config();
            let map = saliency_map(&enc.attention, c.grid(), c.image_size, c.image_size, false)?;
            Some(map.top_decile_mass_in(b))
        }
        None => None,
    };
    Ok(Judgement {
        format_ok: format_reward(&text) == 1.0,
        verdict: verdict.answer(),
        text,
        in_box,
    })
}

/// A dataset prepared for one seed: stem features, retrieval results and
/// the initial policy every arm starts from.
#[derive(Clone, Debug)]
pub struct Experiment {
    config: RunConfig,
    dataset: Dataset,
    initial: Policy,
    train_features: Vec<Tensor>,
    test_features: Vec<Tensor>,
    static_text: RetrievalSummary,
    retrieval: Option<(Vec<RetrievalResult>, Vec<RetrievalResult>)>,
}

impl Experiment {
    /// Generates the dataset and index in memory.
    pub fn new(config: &RunConfig) -> Result<Self, HarnessError> {
        let config = config.resolved();
        config.validate()?;
        let dataset = generate_dataset(&config.data)?;
        let initial = Policy::new(config.policy.clone(), config.seed)?;
        let index = index_for(&initial, &dataset)?;
        Self::from_parts(&config, dataset, Some(index))
    }

    /// Uses a stored dataset and, when given, a stored index.
    pub fn from_parts(config: &RunConfig, dataset: Dataset, index: Option<EmbeddingIndex>) -> Result<Self, HarnessError> {
        let config = config.resolved();
        config.validate()?;
        if dataset.spec != config.data {
            return Err(HarnessError::Data("dataset was generated with a different spec or seed".into()));
        }
        let initial = Policy::new(config.policy.clone(), config.seed)?;
        let train_features = features_all(&initial, &dataset.train)?;
        let test_features = features_all(&initial, &dataset.test)?;
        let train_labels: Vec<Label> = dataset.train.iter().map(|it| it.label).collect();
        let static_text = global_static_summary(&train_labels, config.k)?;
        let retrieval = match index {
            Some(index) => {
                if index.labels() != train_labels.as_slice() {
                    return Err(HarnessError::Data("index labels do not match the training set".into()));
                }
                let train_emb = embed_all(&initial, &train_features)?;
                let test_emb = embed_all(&initial, &test_features)?;
                let mut by_scene = vec![Vec::new(); dataset.scenes.len()];
                let mut hide_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x51b1_1495);
                for (i, it) in dataset.train.iter().enumerate() {
                    by_scene[it.scene].push(i);
                }
                let hidden: Vec<Vec<usize>> = dataset
                    .train
                    .iter()
                    .enumerate()
                    .map(|(i, it)| {
                        by_scene[it.scene]
                            .iter()
                            .copied()
                            .filter(|&j| j != i && !hide_rng.gen_bool(config.sibling_keep))
                            .collect()
                    })
                    .collect();
                let train = train_emb
                    .par_iter()
                    .enumerate()
                    .map(|(i, e)| index.top_k_excluding_related(e, config.k, i, &hidden[i]))
                    .collect::<Result<Vec<_>, _>>()?;
                let test = test_emb
                    .par_iter()
                    .map(|e| index.top_k(e, config.k))
                    .collect::<Result<Vec<_>, _>>()?;
                Some((train, test))
            }
            None => None,
        };
        Ok(Self {
            config,
            dataset,
            initial,
            train_features,
            test_features,
            static_text,
            retrieval,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn initial_policy(&self) -> &Policy {
        &self.initial
    }

    /// Fraction of test images whose k neighbors hold a FAKE majority
    /// exactly when the image is FAKE.
    pub fn knn_accuracy(&self) -> Option<f64> {
        let (_, test) = self.retrieval.as_ref()?;
        let hits = test
            .iter()
            .zip(&self.dataset.test)
            .filter(|(r, it)| (r.n_f * 2 > r.k()) == (it.label == Label::Fake))
            .count();
        Some(hits as f64 / test.len() as f64)
    }

    fn prompts(&self, arm: Arm, test: bool) -> Result<Vec<Vec<usize>>, HarnessError> {
        let n = if test { self.dataset.test.len() } else { self.dataset.train.len() };
        (0..n)
            .map(|i| {
                let retrieved = self.retrieval.as_ref().map(|(tr, te)| if test { &te[i] } else { &tr[i] });
                arm_prompt(&self.initial, arm, &self.static_text, retrieved)
            })
            .collect()
    }

    pub fn train_queries(&self, arm: Arm) -> Result<Vec<TrainQuery>, HarnessError> {
        self.prompts(arm, false)?
            .into_iter()
            .zip(&self.train_features)
            .zip(&self.dataset.train)
            .map(|((prompt, f), it)| Ok(TrainQuery::new(&self.initial, it.id, f.clone(), prompt, it.label)?))
            .collect()
    }

    /// Runs the configured number of GRPO steps from the initial policy.
    pub fn train(&self, arm: Arm) -> Result<(Policy, Vec<LogRecord>), HarnessError> {
        let queries = self.train_queries(arm)?;
        let test_prompts = self.prompts(arm, true)?;
        let mut trainer = Trainer::new(self.initial.clone(), self.config.grpo.clone())?;
        let mut batch_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_ba7c);
        let mut log = Vec::new();
        let every = self.config.eval_every;
        for step in 0..self.config.steps {
            if every > 0 && step % every == 0 {
                log.push(LogRecord::Eval(self.quick_eval(trainer.policy(), &test_prompts, step)?));
            }
            let batch: Vec<&TrainQuery> = (0..self.config.grpo.batch_size)
                .map(|_| &queries[batch_rng.gen_range(0..queries.len())])
                .collect();
            log.push(LogRecord::Step(trainer.step(&batch)?));
        }
        if every > 0 {
            log.push(LogRecord::Eval(self.quick_eval(trainer.policy(), &test_prompts, self.config.steps)?));
        }
        Ok((trainer.into_policy(), log))
    }

    fn quick_eval(&self, policy: &Policy, prompts: &[Vec<usize>], step: usize) -> Result<EvalPoint, HarnessError> {
        let js = self.judge_all(policy, prompts, false)?;
        let n = js.len() as f64;
        let correct = js
            .iter()
            .zip(&self.dataset.test)
            .filter(|(j, it)| j.verdict == Some(it.label))
            .count();
        Ok(EvalPoint {
            step,
            accuracy: 100.0 * correct as f64 / n,
            format_compliance: js.iter().filter(|j| j.format_ok).count() as f64 / n,
        })
    }

    fn judge_all(&self, policy: &Policy, prompts: &[Vec<usize>], saliency: bool) -> Result<Vec<Judgement>, HarnessError> {
        self.test_features
            .par_iter()
            .zip(prompts)
            .zip(&self.dataset.test)
            .map(|((f, p), it)| judge(policy, f, p, if saliency { it.bbox.as_ref() } else { None }))
            .collect()
    }

    /// Greedy evaluation of `policy` on the test split.
    pub fn evaluate(&self, policy: &Policy, arm: Arm) -> Result<EvalReport, HarnessError> {
        let prompts = self.prompts(arm, true)?;
        let js = self.judge_all(policy, &prompts, true)?;
        let mut confusion = Confusion::default();
        let mut in_box = Vec::new();
        for (j, it) in js.iter().zip(&self.dataset.test) {
            confusion.record(it.label, j.verdict);
            in_box.extend(j.in_box);
        }
        let format_hits = js.iter().filter(|j| j.format_ok).count();
        Ok(EvalReport::from_parts(
            arm,
            confusion,
            format_hits,
            &in_box,
            sha256_hex(&checkpoint_bytes(policy)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::SyntheticSpec;

    fn tiny() -> RunConfig {
        RunConfig {
            seed: 2,
            steps: 3,
            eval_every: 2,
            k: 3,
            data: SyntheticSpec {
                n_train: 16,
                n_test: 8,
                scenes: 8,
                ..SyntheticSpec::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn static_counts_are_global() {
        let labels = [Label::Real, Label::Fake, Label::Fake, Label::Real];
        let s = global_static_summary(&labels, 10).unwrap();
        assert_eq!((s.n_r, s.n_f), (5, 5));
        let skewed = [Label::Real, Label::Real, Label::Real, Label::Fake];
        let s = global_static_summary(&skewed, 4).unwrap();
        assert_eq!((s.n_r, s.n_f), (3, 1));
    }

    #[test]
    fn arms_differ_only_in_prompt() {
        let e = Experiment::new(&tiny()).unwrap();
        let none = e.train_queries(Arm::NoRag).unwrap();
        let stat = e.train_queries(Arm::Static).unwrap();
        let full = e.train_queries(Arm::FullRag).unwrap();
        let instr = e.initial_policy().build_prompt(INSTRUCTION, None).unwrap();
        for ((a, b), c) in none.iter().zip(&stat).zip(&full) {
            assert_eq!(a.prompt, instr);
            assert_eq!(a.features, b.features);
            assert_eq!(b.gold, c.gold);
            assert!(b.prompt.starts_with(&instr) && c.prompt.starts_with(&instr));
        }
        assert!(stat.windows(2).all(|w| w[0].prompt == w[1].prompt));
    }

    #[test]
    fn training_query_never_retrieves_itself() {
        let e = Experiment::new(&tiny()).unwrap();
        let (train, _) = e.retrieval.as_ref().unwrap();
        for (i, r) in train.iter().enumerate() {
            assert_eq!(r.k(), 3);
            assert!(!r.ids().contains(&i));
        }
    }

    #[test]
    fn run_is_deterministic_and_logged() {
        let e = Experiment::new(&tiny()).unwrap();
        let (pa, la) = e.train(Arm::FullRag).unwrap();
        let (pb, lb) = Experiment::new(&tiny()).unwrap().train(Arm::FullRag).unwrap();
        assert_eq!(runlog_jsonl(&la), runlog_jsonl(&lb));
        assert_eq!(checkpoint_bytes(&pa), checkpoint_bytes(&pb));
        let steps = la.iter().filter(|r| matches!(r, LogRecord::Step(_))).count();
        let evals = la.iter().filter(|r| matches!(r, LogRecord::Eval(_))).count();
        assert_eq!((steps, evals), (3, 3));
        let line = runlog_jsonl(&la[1..2]);
        for key in ["step", "mean_reward", "mean_abs_adv", "clip_fraction", "mean_kl", "loss", "grad_norm"] {
            assert!(line.contains(&format!("\"{key}\":")), "{line}");
        }
    }

    #[test]
    fn evaluation_counts_everything_and_keeps_policy() {
        let e = Experiment::new(&tiny()).unwrap();
        let p = e.initial_policy().clone();
        let r = e.evaluate(&p, Arm::Static).unwrap();
        assert_eq!(r.confusion.total(), 8);
        assert_eq!(r.real.support + r.fake.support, 8);
        assert_eq!(&p, e.initial_policy());
        assert_eq!(r.checkpoint_sha256, sha256_hex(&checkpoint_bytes(&p)));
        assert_eq!(e.evaluate(&p, Arm::Static).unwrap(), r);
    }
}
