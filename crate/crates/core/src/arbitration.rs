//! Mismatch arbitration: the arbitrator's input layout and attention mask,
//! acceptance probabilities with forced matches, reference policies, and the
//! collaborative decoding loop.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{branch_utilities, MismatchState, UtilityMode};
use crate::error::{Error, Result};
use crate::lm::{floored_ln, DecodeConfig, TabularModel, TaskInstance, Temperature, Token};
use crate::rl::Rollout;
use crate::rng::StreamRng;
use crate::spd::{
    reconstruct_round, run_rounds, Arbiter, DraftBlock, MismatchDecision, RoundView, RunStats,
    Verification,
};

/// `[c, SEP, draft_1..K, SEP, verify_1..K, SEP]`; the bonus token is left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArbitrationInput {
    pub tokens: Vec<Token>,
    pub context_len: usize,
    pub k: usize,
}

impl ArbitrationInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn context(&self) -> &[Token] {
        &self.tokens[..self.context_len]
    }

    pub fn draft(&self) -> &[Token] {
        &self.tokens[self.context_len + 1..self.context_len + 1 + self.k]
    }

    pub fn verify(&self) -> &[Token] {
        let start = self.context_len + 2 + self.k;
        &self.tokens[start..start + self.k]
    }

    /// 1-based index of draft position `i` (1-based): `l_c + 1 + i`.
    pub fn draft_index(&self, i: usize) -> usize {
        self.context_len + 1 + i
    }

    pub fn separator_indices(&self) -> [usize; 3] {
        let lc = self.context_len;
        [lc + 1, lc + self.k + 2, lc + 2 * self.k + 3]
    }
}

pub fn build_arbitration_input(
    context: &[Token],
    draft: &[Token],
    verify: &[Token],
    sep: Token,
) -> Result<ArbitrationInput> {
    let k = draft.len();
    if k == 0 || verify.len() != k + 1 {
        return Err(Error::input(format!(
            "expected K >= 1 draft tokens and K + 1 verification tokens, got {} and {}",
            k,
            verify.len()
        )));
    }
    let mut tokens = Vec::with_capacity(context.len() + 2 * k + 3);
    tokens.extend_from_slice(context);
    tokens.push(sep);
    tokens.extend_from_slice(draft);
    tokens.push(sep);
    tokens.extend_from_slice(&verify[..k]);
    tokens.push(sep);
    Ok(ArbitrationInput { tokens, context_len: context.len(), k })
}

/// Attention pattern over an arbitration input of length `l = l_c + 2K + 3`.
///
/// Context queries attend causally within the context only; every query in
/// the draft/target region (separators included) attends to all keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridMask {
    len: usize,
    context_len: usize,
    bits: Vec<bool>,
}

impl HybridMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    /// Whether query `i` may attend to key `j` (both 0-based).
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.len + j]
    }

    /// One line per query row, `1` where attention is allowed.
    pub fn dump(&self) -> String {
        let mut s = String::with_capacity(self.len * (self.len + 1));
        for i in 0..self.len {
            for j in 0..self.len {
                s.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

pub fn build_hybrid_mask(context_len: usize, k: usize) -> Result<HybridMask> {
    if context_len == 0 || k == 0 {
        return Err(Error::input("mask needs l_c >= 1 and K >= 1"));
    }
    let len = context_len + 2 * k + 3;
    let mut bits = vec![false; len * len];
    for i in 0..len {
        let row = &mut bits[i * len..(i + 1) * len];
        if i < context_len {
            row[..=i].iter_mut().for_each(|b| *b = true);
        } else {
            row.iter_mut().for_each(|b| *b = true);
        }
    }
    Ok(HybridMask { len, context_len, bits })
}

pub const FEATURE_NAMES: [&str; 9] = [
    "target_logp_draft",
    "target_logp_verify",
    "draft_logp_draft",
    "draft_logp_verify",
    "position",
    "block_match_fraction",
    "prior_mismatches",
    "draft_token_later_in_verify",
    "constant",
];

pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

/// Features of mismatch `pos` (0-based) from the block's exact rows.
pub(crate) fn features_from_rows(
    block: &DraftBlock,
    verification: &Verification,
    delta: &[u8],
    pos: usize,
) -> Vec<f64> {
    let k = delta.len();
    let y_draft = block.tokens[pos] as usize;
    let y_verify = verification.tokens[pos] as usize;
    let matches = delta.iter().filter(|&&d| d == 1).count();
    let prior = delta[..pos].iter().filter(|&&d| d == 0).count();
    let later = verification.tokens[pos + 1..k].contains(&block.tokens[pos]);
    vec![
        verification.draft_log_probs[pos],
        floored_ln(verification.probs[pos][y_verify]),
        floored_ln(block.probs[pos][y_draft]),
        floored_ln(block.probs[pos][y_verify]),
        (pos + 1) as f64 / k as f64,
        matches as f64 / k as f64,
        prior as f64,
        later as u8 as f64,
        1.0,
    ]
}

/// Declared feature vector for draft position `pos` (0-based), recomputed
/// from the models. Only defined at mismatches.
pub fn extract_features(
    input: &ArbitrationInput,
    draft: &TabularModel,
    target: &TabularModel,
    verify_bonus: Token,
    pos: usize,
) -> Result<Vec<f64>> {
    if pos >= input.k {
        return Err(Error::input(format!("position {pos} outside block of {}", input.k)));
    }
    let ytilde: Vec<Token> = input.verify().iter().copied().chain([verify_bonus]).collect();
    let delta = crate::spd::match_vector(input.draft(), &ytilde)?;
    if delta[pos] == 1 {
        return Err(Error::contract(format!("position {pos} is a match, not a decision")));
    }
    draft.next_distribution(input.context())?;
    let (block, verification) =
        reconstruct_round(draft, target, input.context(), input.draft(), &ytilde);
    Ok(features_from_rows(&block, &verification, &delta, pos))
}

/// Trainable logistic head: `z = w . x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self { weights: vec![0.0; NUM_FEATURES], bias: 0.0 }
    }

    /// A policy that rejects practically every mismatch.
    pub fn reject_all() -> Self {
        Self { weights: vec![0.0; NUM_FEATURES], bias: -12.0 }
    }

    pub fn dim(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let (w, b) = v.split_at(v.len() - 1);
        Self { weights: w.to_vec(), bias: b[0] }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

pub fn policy_logit(params: &PolicyParams, features: &[f64]) -> Result<f64> {
    if params.weights.len() != features.len() {
        return Err(Error::input(format!(
            "policy has {} weights, got {} features",
            params.weights.len(),
            features.len()
        )));
    }
    Ok(params.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + params.bias)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `pi(a = 1)`: exactly 1 at matches, `sigmoid(z)` at mismatches.
pub fn acceptance_prob(z: f64, delta: u8) -> f64 {
    if delta == 1 {
        1.0
    } else {
        sigmoid(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecisionMode {
    /// Accept iff `prob > lambda`.
    Threshold(f64),
    /// Bernoulli draw from the run's stream.
    Sample,
}

impl DecisionMode {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, DecisionMode::Threshold(_))
    }
}

pub fn decide(prob: f64, mode: DecisionMode, rng: &mut StreamRng) -> u8 {
    match mode {
        DecisionMode::Threshold(lambda) => (prob > lambda) as u8,
        DecisionMode::Sample => {
            if prob >= 1.0 {
                1
            } else if prob <= 0.0 {
                0
            } else {
                (rng.random::<f64>() < prob) as u8
            }
        }
    }
}

/// Round length with arbitration: the first rejected mismatch, else `K + 1`.
pub fn cospec_round_length(delta: &[u8], actions: &[u8]) -> Result<usize> {
    if delta.len() != actions.len() {
        return Err(Error::input("match and action vectors differ in length"));
    }
    if let Some(i) = (0..delta.len()).find(|&i| delta[i] == 1 && actions[i] == 0) {
        return Err(Error::contract(format!("matched position {} was rejected", i + 1)));
    }
    Ok((0..delta.len())
        .find(|&i| delta[i] == 0 && actions[i] == 0)
        .map_or(delta.len() + 1, |i| i + 1))
}

/// How the oracle evaluates branches.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    /// Policy that continues both counterfactual branches.
    pub continuation: ArbitrationPolicy,
    pub continuation_mode: DecisionMode,
    /// Monte Carlo samples when branches are stochastic.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArbitrationPolicy {
    AlwaysReject,
    AlwaysAccept,
    Oracle(Box<OracleSpec>),
    Learned(PolicyParams),
}

impl ArbitrationPolicy {
    pub fn oracle(continuation: ArbitrationPolicy, continuation_mode: DecisionMode) -> Self {
        ArbitrationPolicy::Oracle(Box::new(OracleSpec {
            continuation,
            continuation_mode,
            samples: 32,
        }))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArbitrationPolicy::AlwaysReject => "reject",
            ArbitrationPolicy::AlwaysAccept => "accept",
            ArbitrationPolicy::Oracle(_) => "oracle",
            ArbitrationPolicy::Learned(_) => "learned",
        }
    }

    /// The policy counterfactual continuations should run under when this
    /// policy is the one being diagnosed.
    pub fn continuation(&self, mode: DecisionMode) -> (ArbitrationPolicy, DecisionMode) {
        match self {
            ArbitrationPolicy::Oracle(spec) => (spec.continuation.clone(), spec.continuation_mode),
            other => (other.clone(), mode),
        }
    }
}

/// Everything a decision needs besides the round itself.
pub(crate) struct PolicyArbiter<'a> {
    pub policy: &'a ArbitrationPolicy,
    pub mode: DecisionMode,
    pub draft: &'a TabularModel,
    pub target: &'a TabularModel,
    pub task: &'a TaskInstance,
    pub k: usize,
    pub config: &'a DecodeConfig,
}

impl Arbiter for PolicyArbiter<'_> {
    fn decide(
        &mut self,
        view: &RoundView<'_>,
        i: usize,
        rng: &mut StreamRng,
    ) -> Result<MismatchDecision> {
        match self.policy {
            ArbitrationPolicy::AlwaysReject => Ok(MismatchDecision { prob: 0.0, action: 0, features: None }),
            ArbitrationPolicy::AlwaysAccept => Ok(MismatchDecision { prob: 1.0, action: 1, features: None }),
            ArbitrationPolicy::Learned(params) => {
                let x = features_from_rows(view.block, view.verification, view.delta, i);
                let prob = acceptance_prob(policy_logit(params, &x)?, 0);
                let action = decide(prob, self.mode, rng);
                Ok(MismatchDecision { prob, action, features: Some(x) })
            }
            ArbitrationPolicy::Oracle(spec) => {
                let state = MismatchState {
                    task: self.task.clone(),
                    verified: view.prefix[self.task.prompt.len()..].to_vec(),
                    r: view.r,
                    pos: i,
                    draft: view.block.tokens.clone(),
                    verify: view.verification.tokens.clone(),
                    delta: view.delta.to_vec(),
                };
                let mode = if self.config.temperature == Temperature::Greedy
                    && spec.continuation_mode.is_deterministic()
                {
                    UtilityMode::Exact
                } else {
                    UtilityMode::MonteCarlo(spec.samples)
                };
                let u = branch_utilities(
                    &state,
                    self.draft,
                    self.target,
                    &spec.continuation,
                    spec.continuation_mode,
                    self.k,
                    self.config,
                    mode,
                )?;
                let action = oracle_decision(u.draft, u.target);
                Ok(MismatchDecision { prob: action as f64, action, features: None })
            }
        }
    }
}

/// Ties go to the draft branch.
pub fn oracle_decision(u_draft: f64, u_target: f64) -> u8 {
    (u_draft >= u_target) as u8
}

/// Oracle arbitration at a single mismatch state.
pub fn oracle_policy(
    state: &MismatchState,
    draft: &TabularModel,
    target: &TabularModel,
    continuation: &ArbitrationPolicy,
    continuation_mode: DecisionMode,
    k: usize,
    config: &DecodeConfig,
    mode: UtilityMode,
) -> Result<u8> {
    let u = branch_utilities(state, draft, target, continuation, continuation_mode, k, config, mode)?;
    Ok(oracle_decision(u.draft, u.target))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CospecRun {
    pub output: Vec<Token>,
    pub stats: RunStats,
    pub rollout: Rollout,
}

/// Collaborative speculative decoding with a mismatch arbitrator.
pub fn run_cospec(
    draft: &TabularModel,
    target: &TabularModel,
    policy: &ArbitrationPolicy,
    task: &TaskInstance,
    k: usize,
    mode: DecisionMode,
    config: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<CospecRun> {
    run_cospec_from(draft, target, policy, task, k, mode, config, rng, Vec::new())
}

pub(crate) fn run_cospec_from(
    draft: &TabularModel,
    target: &TabularModel,
    policy: &ArbitrationPolicy,
    task: &TaskInstance,
    k: usize,
    mode: DecisionMode,
    config: &DecodeConfig,
    rng: &mut StreamRng,
    start: Vec<Token>,
) -> Result<CospecRun> {
    let mut arb = PolicyArbiter { policy, mode, draft, target, task, k, config };
    let run = run_rounds(draft, target, task, k, config, rng, Some(&mut arb), start)?;
    for rec in &run.records {
        let actions = rec.actions.as_deref().unwrap_or(&[]);
        if rec.delta.iter().zip(actions).any(|(&d, &a)| d == 1 && a == 0) {
            return Err(Error::contract("a matched position was rejected"));
        }
    }
    let corr = crate::lm::score(task, &run.output);
    Ok(CospecRun {
        rollout: Rollout::new(task.id(), run.records, corr, run.output.clone()),
        output: run.output,
        stats: run.stats,
    })
}

/// On-disk policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl PolicyFile {
    pub fn new(params: &PolicyParams, metadata: Option<serde_json::Value>) -> Self {
        Self {
            version: 1,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: params.weights.clone(),
            bias: params.bias,
            metadata,
        }
    }

    pub fn params(&self) -> PolicyParams {
        PolicyParams { weights: self.weights.clone(), bias: self.bias }
    }
}

pub fn write_policy(path: &Path, file: &PolicyFile) -> Result<()> {
    let mut s = serde_json::to_string_pretty(file)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_policy(path: &Path) -> Result<PolicyFile> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PolicyFile = serde_json::from_str(&s)?;
    if file.version != 1 {
        return Err(Error::input(format!("unsupported policy version {}", file.version)));
    }
    if file.feature_names.len() != file.weights.len()
        || file.feature_names.iter().zip(FEATURE_NAMES).any(|(a, b)| a != b)
    {
        return Err(Error::input(format!(
            "{}: feature names do not match this build",
            path.display()
        )));
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{make_chain_task, make_noisy_expert, ChainFamily, Vocabulary};
    use crate::rng::stream;
    use crate::spd::{run_vanilla_spd, strict_round_length};

    #[test]
    fn input_layout() {
        let sep = Vocabulary::chain().sep();
        let q = build_arbitration_input(&[1, 2], &[3], &[4, 5], sep).unwrap();
        assert_eq!(q.tokens, vec![1, 2, sep, 3, sep, 4, sep]);
        assert_eq!(q.len(), 2 + 2 + 3);
        assert_eq!(q.draft_index(1), 4);
        assert_eq!(q.tokens[q.draft_index(1) - 1], 3);
        let ctx: Vec<Token> = vec![0; 100];
        let q = build_arbitration_input(&ctx, &[1; 25], &[1; 26], sep).unwrap();
        assert_eq!(q.len(), 153);
        assert!(build_arbitration_input(&ctx, &[1; 3], &[1; 3], sep).is_err());
    }

    #[test]
    fn small_mask_rows() {
        let m = build_hybrid_mask(2, 1).unwrap();
        assert_eq!(m.len(), 7);
        let dump = m.dump();
        let rows: Vec<&str> = dump.lines().collect();
        assert_eq!(rows[0], "1000000");
        assert_eq!(rows[1], "1100000");
        for r in &rows[2..] {
            assert_eq!(*r, "1111111");
        }
        assert!(build_hybrid_mask(0, 1).is_err());
    }

    #[test]
    fn logits_and_probs() {
        let p = PolicyParams::zeros();
        assert_eq!(policy_logit(&p, &[0.3; NUM_FEATURES]).unwrap(), 0.0);
        let mut e1 = PolicyParams::zeros();
        e1.weights[0] = 1.0;
        let mut x = vec![0.0; NUM_FEATURES];
        x[0] = 2.5;
        assert_eq!(policy_logit(&e1, &x).unwrap(), 2.5);
        assert!(policy_logit(&e1, &[1.0, 2.0]).is_err());
        assert_eq!(acceptance_prob(-50.0, 1), 1.0);
        assert_eq!(acceptance_prob(0.0, 0), 0.5);
        assert!((acceptance_prob(2.0, 0) - 0.880797).abs() < 1e-5);
    }

    #[test]
    fn threshold_is_strict() {
        let mut rng = stream(0);
        assert_eq!(decide(0.6, DecisionMode::Threshold(0.6), &mut rng), 0);
        assert_eq!(decide(0.7, DecisionMode::Threshold(0.6), &mut rng), 1);
        assert_eq!(decide(1.0, DecisionMode::Threshold(0.6), &mut rng), 1);
        assert_eq!(decide(1.0, DecisionMode::Sample, &mut rng), 1);
    }

    #[test]
    fn cospec_lengths() {
        assert_eq!(cospec_round_length(&[1, 0, 0, 1], &[1, 1, 0, 1]).unwrap(), 3);
        assert_eq!(cospec_round_length(&[0, 0], &[1, 1]).unwrap(), 3);
        assert!(matches!(
            cospec_round_length(&[1, 0], &[0, 1]),
            Err(Error::Contract(_))
        ));
        assert_eq!(cospec_round_length(&[0, 1, 0], &[0, 1, 0]).unwrap(), strict_round_length(&[0, 1, 0]));
    }

    #[test]
    fn oracle_ties_accept() {
        assert_eq!(oracle_decision(1.0, 0.0), 1);
        assert_eq!(oracle_decision(0.0, 1.0), 0);
        assert_eq!(oracle_decision(0.4, 0.4), 1);
    }

    fn pair() -> (TabularModel, TabularModel) {
        let fam = ChainFamily::new(3);
        (
            make_noisy_expert(&fam, 0.85, 1).unwrap(),
            make_noisy_expert(&fam, 0.95, 0).unwrap(),
        )
    }

    #[test]
    fn reject_all_reduces_to_vanilla() {
        let (d, t) = pair();
        let cfg = DecodeConfig::greedy(64);
        for seed in 0..40 {
            let task = make_chain_task(seed, 3);
            let v = run_vanilla_spd(&d, &t, &task, 4, &cfg, &mut stream(seed)).unwrap();
            let c = run_cospec(
                &d,
                &t,
                &ArbitrationPolicy::AlwaysReject,
                &task,
                4,
                DecisionMode::Threshold(0.6),
                &cfg,
                &mut stream(seed),
            )
            .unwrap();
            assert_eq!(v.output, c.output);
            assert_eq!(v.stats.round_lengths, c.stats.round_lengths);
        }
    }

    #[test]
    fn extracted_features_match_round_rows() {
        let (d, t) = pair();
        let cfg = DecodeConfig::greedy(64);
        let sep = Vocabulary::chain().sep();
        let mut seen = 0;
        for seed in 0..60 {
            let task = make_chain_task(seed, 3);
            let run = run_cospec(
                &d,
                &t,
                &ArbitrationPolicy::Learned(PolicyParams::zeros()),
                &task,
                5,
                DecisionMode::Threshold(0.6),
                &cfg,
                &mut stream(seed),
            )
            .unwrap();
            for rec in &run.rollout.rounds {
                let mut ctx = task.prompt.clone();
                ctx.extend_from_slice(&run.output[..rec.prefix_len - task.prompt.len()]);
                let q = build_arbitration_input(&ctx, &rec.block.tokens, &rec.verification.tokens, sep)
                    .unwrap();
                for (i, f) in rec.features.iter().enumerate() {
                    if let Some(f) = f {
                        let bonus = rec.verification.tokens[rec.k()];
                        let g = extract_features(&q, &d, &t, bonus, i).unwrap();
                        assert_eq!(f, &g);
                        assert_eq!(g.len(), NUM_FEATURES);
                        assert_ne!(g[0], g[1]);
                        seen += 1;
                    } else if rec.delta[i] == 1 {
                        let bonus = rec.verification.tokens[rec.k()];
                        assert!(matches!(
                            extract_features(&q, &d, &t, bonus, i),
                            Err(Error::Contract(_))
                        ));
                    }
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn policy_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pol.json");
        let mut params = PolicyParams::zeros();
        params.weights[3] = -0.25;
        params.bias = 0.5;
        write_policy(&p, &PolicyFile::new(&params, None)).unwrap();
        assert_eq!(read_policy(&p).unwrap().params(), params);
    }
}
