//! Toy language models with exact conditional probabilities.

mod expert;
mod format;
mod task;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub use expert::{make_noisy_expert, make_noisy_expert_with, ExpertShape, ERROR_SLOTS};
pub use format::{read_model, write_model};
pub use task::{
    make_chain_task, make_suite, read_suite, score, write_suite, ChainFamily, TaskInstance,
};

pub type Token = u32;

/// Log-probability returned for zero-mass tokens: `ln(1e-12)`.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547;

/// Tolerance on stored row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    sep: Token,
    eos: Token,
    answer: Token,
}

impl Vocabulary {
    pub fn new(size: usize, sep: Token, eos: Token, answer: Token) -> Result<Self> {
        if size < 4 {
            return Err(Error::input(format!("vocabulary size {size} < 4")));
        }
        if sep == eos || sep == answer || eos == answer {
            return Err(Error::input("special token ids must be distinct"));
        }
        for t in [sep, eos, answer] {
            if t as usize >= size {
                return Err(Error::input(format!("special id {t} outside vocabulary of {size}")));
            }
        }
        Ok(Self { size, sep, eos, answer })
    }

    /// Digits `0..=9`, then `SEP`, `EOS` and the answer delimiter `=`.
    pub fn chain() -> Self {
        Self { size: 13, sep: 10, eos: 11, answer: 12 }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sep(&self) -> Token {
        self.sep
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn answer(&self) -> Token {
        self.answer
    }

    pub fn is_special(&self, t: Token) -> bool {
        t == self.sep || t == self.eos || t == self.answer
    }

    fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size) {
            Some(t) => Err(Error::input(format!(
                "token {t} out of vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

/// An order-k conditional next-token table.
///
/// Lookups use the last `min(k, len)` context tokens as the key; a missing key
/// resolves to the default row (uniform unless declared otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    id: String,
    vocab: Vocabulary,
    order: usize,
    rows: HashMap<Vec<Token>, Vec<f64>>,
    default_row: Vec<f64>,
}

impl TabularModel {
    pub fn new(id: impl Into<String>, vocab: Vocabulary, order: usize) -> Self {
        let n = vocab.size();
        Self {
            id: id.into(),
            vocab,
            order,
            rows: HashMap::new(),
            default_row: vec![1.0 / n as f64; n],
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn default_row(&self) -> &[f64] {
        &self.default_row
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[Token], &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    /// Inserts a row after validating it. Rows within `tol` of unit mass are
    /// renormalized so the stored invariant is exact to `ROW_SUM_TOL`.
    pub fn insert_row(&mut self, window: Vec<Token>, probs: Vec<f64>, tol: f64) -> Result<()> {
        if window.len() > self.order {
            return Err(Error::input(format!(
                "window of length {} exceeds order {}",
                window.len(),
                self.order
            )));
        }
        self.vocab.check(&window)?;
        let row = self.validated_row(probs, tol)?;
        self.rows.insert(window, row);
        Ok(())
    }

    pub fn set_default_row(&mut self, probs: Vec<f64>, tol: f64) -> Result<()> {
        self.default_row = self.validated_row(probs, tol)?;
        Ok(())
    }

    fn validated_row(&self, mut probs: Vec<f64>, tol: f64) -> Result<Vec<f64>> {
        if probs.len() != self.vocab.size() {
            return Err(Error::input(format!(
                "row has {} entries, vocabulary has {}",
                probs.len(),
                self.vocab.size()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::input("row has a negative or non-finite probability"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::input(format!("row sums to {sum}, expected 1")));
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(probs)
    }

    fn window<'a>(&self, context: &'a [Token]) -> &'a [Token] {
        &context[context.len().saturating_sub(self.order)..]
    }

    /// Row lookup without validation; callers have checked the context.
    pub(crate) fn row(&self, context: &[Token]) -> &[f64] {
        self.rows
            .get(self.window(context))
            .map(Vec::as_slice)
            .unwrap_or(&self.default_row)
    }

    /// `p(· | context)`.
    pub fn next_distribution(&self, context: &[Token]) -> Result<&[f64]> {
        self.vocab.check(context)?;
        Ok(self.row(context))
    }

    pub fn step_token(
        &self,
        context: &[Token],
        temperature: Temperature,
        rng: &mut StreamRng,
    ) -> Result<Token> {
        let row = self.next_distribution(context)?;
        Ok(pick(row, temperature, rng))
    }

    /// `ln p(token | context)`, floored at `ln(1e-12)`.
    pub fn log_prob(&self, context: &[Token], token: Token) -> Result<f64> {
        self.vocab.check(std::slice::from_ref(&token))?;
        let row = self.next_distribution(context)?;
        Ok(floored_ln(row[token as usize]))
    }
}

pub fn floored_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_PROB_FLOOR)
    } else {
        LOG_PROB_FLOOR
    }
}

/// Lowest id among the maximal entries.
pub fn argmax(row: &[f64]) -> Token {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Inverse-CDF draw.
pub fn sample(row: &[f64], rng: &mut StreamRng) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if u < acc {
            return i as Token;
        }
    }
    last_positive as Token
}

pub(crate) fn pick(row: &[f64], temperature: Temperature, rng: &mut StreamRng) -> Token {
    match temperature {
        Temperature::Greedy => argmax(row),
        Temperature::Sample => sample(row, rng),
    }
}

pub fn target_log_prob(model: &TabularModel, context: &[Token], token: Token) -> Result<f64> {
    model.log_prob(context, token)
}

/// Sampling temperature; only `T = 0` and `T = 1` are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "f64", into = "f64")]
pub enum Temperature {
    #[default]
    Greedy,
    Sample,
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        if t == 0.0 {
            Ok(Temperature::Greedy)
        } else if t == 1.0 {
            Ok(Temperature::Sample)
        } else {
            Err(Error::input(format!("temperature {t} not in {{0, 1}}")))
        }
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        match t {
            Temperature::Greedy => 0.0,
            Temperature::Sample => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: Temperature,
    pub max_len: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { temperature: Temperature::Greedy, max_len, seed: 0 }
    }

    pub fn sampled(max_len: usize, seed: u64) -> Self {
        Self { temperature: Temperature::Sample, max_len, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::input("max length must be at least 1"));
        }
        Ok(())
    }

    /// Generation cap for a task: the tighter of the config and task limits.
    pub fn cap(&self, task: &TaskInstance) -> usize {
        self.max_len.min(task.max_len)
    }
}

/// Target-only reference decoding. Returns the emitted tokens and the number of
/// model calls (one per emitted token).
pub fn generate_autoregressive(
    model: &TabularModel,
    task: &TaskInstance,
    config: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<(Vec<Token>, usize)> {
    config.validate()?;
    let cap = config.cap(task);
    let eos = model.vocab().eos();
    let mut context = task.prompt.clone();
    let mut out = Vec::new();
    while out.len() < cap {
        let t = model.step_token(&context, config.temperature, rng)?;
        context.push(t);
        out.push(t);
        if t == eos {
            break;
        }
    }
    let calls = out.len();
    Ok((out, calls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn vocab4() -> Vocabulary {
        Vocabulary::new(4, 1, 2, 3).unwrap()
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(3, 0, 1, 2).is_err());
        assert!(Vocabulary::new(8, 1, 1, 2).is_err());
        assert!(Vocabulary::new(8, 1, 2, 8).is_err());
        assert!(Vocabulary::new(4, 1, 2, 3).is_ok());
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = TabularModel::new("u", vocab4(), 2);
        let row = m.next_distribution(&[0, 0]).unwrap();
        assert_eq!(row, &[0.25; 4]);
    }

    #[test]
    fn stored_row_is_returned_verbatim() {
        let mut m = TabularModel::new("t", vocab4(), 1);
        m.insert_row(vec![0], vec![0.9, 0.1, 0.0, 0.0], 1e-9).unwrap();
        assert_eq!(m.next_distribution(&[3, 0]).unwrap(), &[0.9, 0.1, 0.0, 0.0]);
    }

    #[test]
    fn out_of_vocab_context_rejected() {
        let m = TabularModel::new("u", vocab4(), 2);
        assert!(matches!(m.next_distribution(&[0, 4]), Err(Error::Input(_))));
    }

    #[test]
    fn greedy_ties_break_low() {
        let mut m = TabularModel::new("t", vocab4(), 1);
        m.insert_row(vec![0], vec![0.4, 0.4, 0.2, 0.0], 1e-9).unwrap();
        let mut rng = stream(1);
        assert_eq!(m.step_token(&[0], Temperature::Greedy, &mut rng).unwrap(), 0);
    }

    #[test]
    fn degenerate_row_always_sampled() {
        let mut m = TabularModel::new("t", vocab4(), 1);
        m.insert_row(vec![0], vec![0.0, 1.0, 0.0, 0.0], 1e-9).unwrap();
        let mut rng = stream(9);
        for _ in 0..1000 {
            assert_eq!(m.step_token(&[0], Temperature::Sample, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut m = TabularModel::new("t", vocab4(), 1);
        m.insert_row(vec![0], vec![0.5, 0.5, 0.0, 0.0], 1e-9).unwrap();
        let draw = |seed| {
            let mut rng = stream(seed);
            (0..32)
                .map(|_| m.step_token(&[0], Temperature::Sample, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn log_prob_values() {
        let mut m = TabularModel::new("t", vocab4(), 1);
        m.insert_row(vec![0], vec![1.0, 0.0, 0.0, 0.0], 1e-9).unwrap();
        m.insert_row(vec![1], vec![0.5, 0.5, 0.0, 0.0], 1e-9).unwrap();
        assert_eq!(m.log_prob(&[0], 0).unwrap(), 0.0);
        assert!((m.log_prob(&[1], 1).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(m.log_prob(&[0], 1).unwrap(), (1e-12f64).ln());
        assert_eq!(LOG_PROB_FLOOR, (1e-12f64).ln());
    }

    #[test]
    fn rows_off_unit_mass_are_rejected() {
        let mut m = TabularModel::new("t", vocab4(), 1);
        assert!(m.insert_row(vec![0], vec![0.5, 0.4, 0.0, 0.0], 1e-6).is_err());
        assert!(m.insert_row(vec![0], vec![0.5, -0.1, 0.6, 0.0], 1e-6).is_err());
        assert!(m.insert_row(vec![0, 1], vec![1.0, 0.0, 0.0, 0.0], 1e-6).is_err());
    }

    #[test]
    fn temperature_parsing() {
        assert_eq!(Temperature::try_from(0.0).unwrap(), Temperature::Greedy);
        assert_eq!(Temperature::try_from(1.0).unwrap(), Temperature::Sample);
        assert!(Temperature::try_from(0.7).is_err());
    }

    fn eos_first_model() -> TabularModel {
        let v = Vocabulary::chain();
        let mut m = TabularModel::new("eos", v, 1);
        let mut row = vec![0.0; v.size()];
        row[v.eos() as usize] = 1.0;
        m.set_default_row(row, 1e-9).unwrap();
        m
    }

    #[test]
    fn eos_first_stops_after_one_call() {
        let task = make_chain_task(1, 3);
        let (out, calls) =
            generate_autoregressive(&eos_first_model(), &task, &DecodeConfig::greedy(50), &mut stream(0))
                .unwrap();
        assert_eq!(out, vec![Vocabulary::chain().eos()]);
        assert_eq!(calls, 1);
    }

    #[test]
    fn length_cap_without_eos() {
        let task = make_chain_task(1, 3);
        let m = TabularModel::new("u", Vocabulary::chain(), 2);
        let (out, calls) =
            generate_autoregressive(&m, &task, &DecodeConfig::greedy(3), &mut stream(0)).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(calls, 3);
    }

    #[test]
    fn noise_free_expert_solves_task() {
        let family = ChainFamily::new(3);
        let m = make_noisy_expert(&family, 1.0, 0).unwrap();
        let task = make_chain_task(11, 3);
        let (out, _) =
            generate_autoregressive(&m, &task, &DecodeConfig::greedy(64), &mut stream(0)).unwrap();
        assert_eq!(out, task.answer);
        assert_eq!(score(&task, &out), 1);
    }
}
