use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ByteTokenizer;
use crate::model::{ModelContext, ModelParams};
use crate::trainer::{log_prob, next_token_logprobs, EvalSettings, TrainError};

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McItem {
    pub context: String,
    pub choices: Vec<String>,
    /// Index of the correct choice.
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct McTask {
    pub items: Vec<McItem>,
}

impl McTask {
    /// Parses one JSON object per non-blank line.
    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: McItem =
                serde_json::from_str(line).map_err(|e| TrainError::Config(format!("task line {}: {e}", n + 1)))?;
            if item.choices.len() < 2 || item.answer >= item.choices.len() {
                return Err(TrainError::Config(format!(
                    "task line {}: need >= 2 choices and answer < {}",
                    n + 1,
                    item.choices.len()
                )));
            }
            items.push(item);
        }
        Ok(Self { items })
    }
}

pub fn load_task(path: &Path) -> Result<McTask, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    McTask::from_jsonl(&text)
}

/// Produces `log p(choice[i] | context, choice[..i])` for each choice token.
pub trait ChoiceScorer {
    fn choice_logprobs(&mut self, context: &[u32], choice: &[u32]) -> Result<Vec<f64>, TrainError>;
}

/// Scores with a language model at a fixed iteration count.
///
/// An empty context is replaced by a single newline. Contexts too long for
/// the model keep their most recent tokens.
pub struct ModelScorer<'a> {
    pub ctx: &'a ModelContext<f32>,
    pub params: &'a ModelParams<f32>,
    pub settings: EvalSettings,
}

impl ChoiceScorer for ModelScorer<'_> {
    fn choice_logprobs(&mut self, context: &[u32], choice: &[u32]) -> Result<Vec<f64>, TrainError> {
        let max = self.ctx.config.max_seq_len + 1;
        if choice.len() + 1 > max {
            return Err(TrainError::Config(format!(
                "choice of {} tokens does not fit max_seq_len {}",
                choice.len(),
                max - 1
            )));
        }
        let context: &[u32] = if context.is_empty() { &[b'\n' as u32] } else { context };
        let keep = context.len().min(max - choice.len());
        let mut seq = context[context.len() - keep..].to_vec();
        seq.extend_from_slice(choice);
        let lp = next_token_logprobs(self.ctx, self.params, &seq, &self.settings)?;
        Ok(lp[lp.len() - choice.len()..].to_vec())
    }
}

/// Chance-level scorer: each token gets the log-probability it would have
/// under freshly drawn standard-normal logits over `vocab` entries.
pub struct RandomLogits {
    rng: ChaCha8Rng,
    vocab: usize,
}

impl RandomLogits {
    pub fn new(seed: u64, vocab: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            vocab,
        }
    }
}

impl ChoiceScorer for RandomLogits {
    fn choice_logprobs(&mut self, _context: &[u32], choice: &[u32]) -> Result<Vec<f64>, TrainError> {
        Ok(choice
            .iter()
            .map(|&t| {
                let row: Vec<f32> = (0..self.vocab).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                log_prob(&row, t % self.vocab as u32)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceScore {
    /// Summed log-likelihood of the choice tokens.
    pub total: f64,
    /// `total` divided by the number of choice tokens.
    pub per_token: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub item_id: usize,
    pub scores: Vec<ChoiceScore>,
    pub picked: usize,
    pub answer: usize,
}

impl ItemResult {
    pub fn correct(&self) -> bool {
        self.picked == self.answer
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct McReport {
    pub items: Vec<ItemResult>,
    /// Items skipped because a choice was empty.
    pub skipped: Vec<usize>,
}

impl McReport {
    pub fn scored(&self) -> usize {
        self.items.len()
    }

    pub fn accuracy(&self) -> f64 {
        if self.items.is_empty() {
            return f64::NAN;
        }
        self.items.iter().filter(|r| r.correct()).count() as f64 / self.items.len() as f64
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn pick(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores every choice by total log-likelihood given the context and picks
/// the highest. Items with an empty choice are skipped with a warning.
pub fn mc_eval<S: ChoiceScorer + ?Sized>(scorer: &mut S, task: &McTask) -> Result<McReport, TrainError> {
    let tok = ByteTokenizer;
    let mut report = McReport::default();
    for (item_id, item) in task.items.iter().enumerate() {
        if item.choices.iter().any(|c| c.is_empty()) {
            log::warn!("skipping item {item_id}: empty choice");
            report.skipped.push(item_id);
            continue;
        }
        let context = tok.encode(&item.context);
        let mut scores = Vec::with_capacity(item.choices.len());
        for choice in &item.choices {
            let ids = tok.encode(choice);
            let lp = scorer.choice_logprobs(&context, &ids)?;
            let total: f64 = lp.iter().sum();
            scores.push(ChoiceScore {
                total,
                per_token: total / ids.len() as f64,
            });
        }
        let totals: Vec<f64> = scores.iter().map(|s| s.total).collect();
        report.items.push(ItemResult {
            item_id,
            picked: pick(&totals),
            scores,
            answer: item.answer,
        });
    }
    Ok(report)
}

pub fn write_mc_csv<W: Write>(mut w: W, report: &McReport) -> io::Result<()> {
    writeln!(w, "item_id,choice_id,logp_total,logp_per_token,picked,correct")?;
    for item in &report.items {
        for (c, s) in item.scores.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                item.item_id,
                c,
                s.total,
                s.per_token,
                u8::from(c == item.picked),
                u8::from(c == item.answer)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(Vec<f64>);

    impl ChoiceScorer for Fixed {
        fn choice_logprobs(&mut self, _: &[u32], choice: &[u32]) -> Result<Vec<f64>, TrainError> {
            Ok(vec![self.0[choice[0] as usize - b'a' as usize]; choice.len()])
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(pick(&[-1.0, -1.0]), 0);
        assert_eq!(pick(&[-3.0, -1.0, -1.0]), 1);
        let task = McTask {
            items: vec![McItem {
                context: "x".into(),
                choices: vec!["same".into(), "same".into()],
                answer: 1,
            }],
        };
        let r = mc_eval(&mut Fixed(vec![0.0; 26]), &task).unwrap();
        assert_eq!(r.items[0].picked, 0);
        assert_eq!(r.accuracy(), 0.0);
    }

    #[test]
    fn empty_choice_skips_item() {
        let task = McTask {
            items: vec![
                McItem {
                    context: "q".into(),
                    choices: vec!["a".into(), "".into()],
                    answer: 0,
                },
                McItem {
                    context: "q".into(),
                    choices: vec!["a".into(), "b".into()],
                    answer: 1,
                },
            ],
        };
        let r = mc_eval(&mut Fixed(vec![-2.0, -1.0]), &task).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(r.scored(), 1);
        assert_eq!(r.accuracy(), 1.0);
        let mut csv = Vec::new();
        write_mc_csv(&mut csv, &r).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,1,-1,-1,1,1");
    }

    #[test]
    fn jsonl_validation() {
        let ok = r#"{"context": "2 + 2 =", "choices": [" 4", " 5"], "answer": 0}"#;
        assert_eq!(McTask::from_jsonl(ok).unwrap().items.len(), 1);
        let bad = r#"{"context": "c", "choices": [" 4"], "answer": 0}"#;
        assert!(McTask::from_jsonl(bad).is_err());
        let bad = r#"{"context": "c", "choices": [" 4", "5"], "answer": 2}"#;
        assert!(McTask::from_jsonl(bad).is_err());
    }

    proptest! {
        #[test]
        fn argmax_survives_monotone_maps(scores in prop::collection::vec(-50.0f64..0.0, 2..8), c in 0.01f64..100.0, b in -10.0f64..10.0) {
            let p = pick(&scores);
            let scaled: Vec<f64> = scores.iter().map(|s| c * s + b).collect();
            prop_assert_eq!(pick(&scaled), p);
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert_eq!(pick(&exp), p);
        }
    }
}
