//! Synthetic key/value retrieval prompts and greedy-decoding accuracy.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode, prose_sentence};
use crate::error::{Error, Result};
use crate::model::{greedy_generate, Model, Token};
use crate::rope::RopeParams;
use crate::tensor::Scalar;

pub const INSTRUCTION: &str = "Extract the value corresponding to the specified key in the JSON object below.\n";

/// Tokens the answer needs: the 36-character value plus a closing quote.
pub const ANSWER_BUDGET: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCase {
    pub pairs: Vec<(String, String)>,
    pub question_key: String,
    pub answer: String,
    pub prompt: String,
    /// Byte (= token) interval of the answer value inside `prompt`.
    pub value_span: Range<usize>,
}

impl KvCase {
    pub fn tokens(&self) -> Vec<Token> {
        encode(self.prompt.as_bytes())
    }
}

fn random_uuid<R: Rng + ?Sized>(rng: &mut R) -> String {
    uuid::Builder::from_random_bytes(rng.random())
        .into_uuid()
        .hyphenated()
        .to_string()
}

fn pair_text(k: &str, v: &str) -> String {
    format!("{{\"{k}\": \"{v}\"}}\n")
}

fn question_text(k: &str) -> String {
    format!("\nWhat is the value of key \"{k}\"? \"")
}

/// Builds a prompt of at most `target_len` bytes: the instruction, filler
/// prose with `n_pairs` single-pair JSON objects inserted at random sentence
/// boundaries, then the question. The prompt ends with an opening quote so
/// the expected continuation is the value itself.
pub fn kv_generate<R: Rng + ?Sized>(n_pairs: usize, target_len: usize, rng: &mut R) -> Result<KvCase> {
    if n_pairs == 0 {
        return Err(Error::Generation("need at least one key/value pair".into()));
    }
    let fixed = INSTRUCTION.len()
        + n_pairs * pair_text(&"x".repeat(36), &"x".repeat(36)).len()
        + question_text(&"x".repeat(36)).len();
    if fixed > target_len {
        return Err(Error::Generation(format!(
            "target length {target_len} cannot hold {n_pairs} pairs and the question ({fixed} bytes)"
        )));
    }
    let budget = target_len - fixed;
    loop {
        let mut pairs: Vec<(String, String)> = Vec::with_capacity(n_pairs);
        while pairs.len() < n_pairs {
            let (k, v) = (random_uuid(rng), random_uuid(rng));
            if k != v
                && pairs
                    .iter()
                    .all(|(a, b)| ![a, b].contains(&&k) && ![a, b].contains(&&v))
            {
                pairs.push((k, v));
            }
        }
        let mut sentences = Vec::new();
        let mut used = 0;
        loop {
            let s = prose_sentence(rng);
            if used + s.len() > budget {
                break;
            }
            used += s.len();
            sentences.push(s);
        }
        let mut slots: Vec<usize> = (0..n_pairs).map(|_| rng.random_range(0..=sentences.len())).collect();
        slots.sort_unstable();
        let q = rng.random_range(0..n_pairs);

        let mut prompt = String::from(INSTRUCTION);
        let mut value_start = 0;
        let mut next_pair = 0;
        for i in 0..=sentences.len() {
            while next_pair < n_pairs && slots[next_pair] == i {
                let (k, v) = &pairs[next_pair];
                if next_pair == q {
                    value_start = prompt.len() + k.len() + 6;
                }
                prompt.push_str(&pair_text(k, v));
                next_pair += 1;
            }
            if let Some(s) = sentences.get(i) {
                prompt.push_str(s);
            }
        }
        let (key, answer) = pairs[q].clone();
        prompt.push_str(&question_text(&key));

        if prompt.matches(answer.as_str()).count() != 1 || prompt.matches(key.as_str()).count() != 2 {
            continue;
        }
        let value_span = value_start..value_start + answer.len();
        debug_assert_eq!(&prompt[value_span.clone()], answer);
        return Ok(KvCase {
            pairs,
            question_key: key,
            answer,
            prompt,
            value_span,
        });
    }
}

/// Anything that continues a prompt.
pub trait Continuation {
    fn continue_prompt(&self, prompt: &[Token], max_new: usize) -> Result<Vec<Token>>;
}

/// Greedy decoding from a model at fixed RoPE parameters.
pub struct GreedyModel<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub rope: &'a RopeParams,
}

impl<T: Scalar> Continuation for GreedyModel<'_, T> {
    fn continue_prompt(&self, prompt: &[Token], max_new: usize) -> Result<Vec<Token>> {
        Ok(greedy_generate(self.model, prompt, self.rope, max_new, Some(Token::from(b'"')), false)?.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvOutcome {
    pub case_id: usize,
    pub correct: bool,
    /// Offset of the answer inside the continuation.
    pub answer_found_at: Option<usize>,
    pub continuation: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEvalResult {
    pub accuracy: f64,
    pub outcomes: Vec<KvOutcome>,
}

/// Fraction of cases whose continuation contains the exact answer. A case
/// that fails to decode (for instance a prompt longer than the model
/// buffer) counts as incorrect and keeps its error message.
pub fn kv_eval_with(generator: &dyn Continuation, cases: &[KvCase], max_new: usize) -> KvEvalResult {
    let outcomes: Vec<KvOutcome> = cases
        .iter()
        .enumerate()
        .map(
            |(case_id, case)| match generator.continue_prompt(&case.tokens(), max_new) {
                Ok(toks) => {
                    let text = String::from_utf8_lossy(&crate::corpus::decode(&toks)).into_owned();
                    let found = text.find(case.answer.as_str());
                    KvOutcome {
                        case_id,
                        correct: found.is_some(),
                        answer_found_at: found,
                        continuation: text,
                        error: None,
                    }
                }
                Err(e) => KvOutcome {
                    case_id,
                    correct: false,
                    answer_found_at: None,
                    continuation: String::new(),
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();
    let correct = outcomes.iter().filter(|o| o.correct).count();
    KvEvalResult {
        accuracy: if cases.is_empty() {
            0.0
        } else {
            correct as f64 / cases.len() as f64
        },
        outcomes,
    }
}

pub fn kv_eval<T: Scalar>(model: &Model<T>, cases: &[KvCase], rope: &RopeParams, max_new: usize) -> KvEvalResult {
    kv_eval_with(&GreedyModel { model, rope }, cases, max_new)
}
