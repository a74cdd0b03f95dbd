//! Draft-and-verify rounds: block proposal, teacher-forced verification,
//! exact-match acceptance, and lossless speculative sampling.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lm::{floored_ln, pick, sample, DecodeConfig, TabularModel, TaskInstance, Temperature, Token};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct DraftBlock {
    pub tokens: Vec<Token>,
    /// Draft distribution at each position.
    pub probs: Vec<Vec<f64>>,
}

impl DraftBlock {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    /// `K + 1` target tokens, the last one being the bonus token.
    pub tokens: Vec<Token>,
    /// Target distribution at each of the `K + 1` positions.
    pub probs: Vec<Vec<f64>>,
    /// Target log-probability of each draft token (floored).
    pub draft_log_probs: Vec<f64>,
}

/// One closed speculative round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub r: usize,
    pub prefix_len: usize,
    pub block: DraftBlock,
    pub verification: Verification,
    pub delta: Vec<u8>,
    /// Arbitration actions; `None` for methods without an arbitrator.
    pub actions: Option<Vec<u8>>,
    /// Tokens emitted this round, after EOS / length truncation.
    pub s: usize,
    /// Rollout-time `pi(a = 1)`: 1 at matches, `None` where nothing was decided.
    pub probs: Vec<Option<f64>>,
    /// Arbitration features of each decided mismatch.
    pub features: Vec<Option<Vec<f64>>>,
}

impl RoundRecord {
    pub fn k(&self) -> usize {
        self.delta.len()
    }

    /// First rejected mismatch (1-based), `K + 1` when none was rejected.
    pub fn rejection_index(&self) -> usize {
        let k = self.k();
        match &self.actions {
            Some(a) => (0..k)
                .find(|&i| self.delta[i] == 0 && a[i] == 0)
                .map_or(k + 1, |i| i + 1),
            None => strict_round_length(&self.delta),
        }
    }

    pub fn trace_line(&self) -> TraceLine {
        TraceLine {
            r: self.r,
            prefix_len: self.prefix_len,
            draft: self.block.tokens.clone(),
            verify: self.verification.tokens.clone(),
            delta: self.delta.clone(),
            actions: self.actions.clone(),
            s: self.s,
            probs: self.probs.clone(),
            ell: self.verification.draft_log_probs.clone(),
        }
    }
}

/// Serialized form of a round; field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub r: usize,
    pub prefix_len: usize,
    pub draft: Vec<Token>,
    pub verify: Vec<Token>,
    pub delta: Vec<u8>,
    pub actions: Option<Vec<u8>>,
    pub s: usize,
    #[serde(serialize_with = "ser_opt_sig9")]
    pub probs: Vec<Option<f64>>,
    #[serde(serialize_with = "ser_sig9")]
    pub ell: Vec<f64>,
}

/// Rounds `x` to nine significant digits.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub(crate) fn ser_sig9<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&x| sig9(x)))
}

pub(crate) fn ser_opt_sig9<S: Serializer>(
    v: &[Option<f64>],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.map(sig9)))
}

pub fn write_trace(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec.trace_line())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub rounds: usize,
    pub emitted: usize,
    pub target_calls: usize,
    pub draft_calls: usize,
    pub arbitrator_calls: usize,
    pub round_lengths: Vec<usize>,
}

impl RunStats {
    /// Stats of a target-only run of `n` tokens.
    pub fn autoregressive(n: usize) -> Self {
        Self {
            rounds: n,
            emitted: n,
            target_calls: n,
            draft_calls: 0,
            arbitrator_calls: 0,
            round_lengths: vec![1; n],
        }
    }

    pub fn absorb(&mut self, other: &RunStats) {
        self.rounds += other.rounds;
        self.emitted += other.emitted;
        self.target_calls += other.target_calls;
        self.draft_calls += other.draft_calls;
        self.arbitrator_calls += other.arbitrator_calls;
        self.round_lengths.extend_from_slice(&other.round_lengths);
    }
}

/// Relative per-call costs; one target call costs 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub draft: f64,
    pub arbitrator: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { draft: 0.05, arbitrator: 0.05 }
    }
}

pub fn propose_block(
    draft: &TabularModel,
    context: &[Token],
    k: usize,
    temperature: Temperature,
    rng: &mut StreamRng,
) -> Result<DraftBlock> {
    if k == 0 {
        return Err(Error::input("draft length K must be at least 1"));
    }
    draft.next_distribution(context)?;
    let mut ctx = context.to_vec();
    let mut tokens = Vec::with_capacity(k);
    let mut probs = Vec::with_capacity(k);
    for _ in 0..k {
        let row = draft.row(&ctx);
        let t = pick(row, temperature, rng);
        probs.push(row.to_vec());
        tokens.push(t);
        ctx.push(t);
    }
    Ok(DraftBlock { tokens, probs })
}

/// One teacher-forced pass: position `i` conditions on `context + draft[..i]`.
pub fn verify_block(
    target: &TabularModel,
    context: &[Token],
    block: &DraftBlock,
    temperature: Temperature,
    rng: &mut StreamRng,
) -> Result<Verification> {
    target.next_distribution(context)?;
    let k = block.len();
    let mut ctx = context.to_vec();
    let mut tokens = Vec::with_capacity(k + 1);
    let mut probs = Vec::with_capacity(k + 1);
    let mut draft_log_probs = Vec::with_capacity(k);
    for i in 0..=k {
        let row = target.row(&ctx);
        tokens.push(pick(row, temperature, rng));
        if i < k {
            let y = block.tokens[i];
            draft_log_probs.push(floored_ln(row[y as usize]));
            ctx.push(y);
        }
        probs.push(row.to_vec());
    }
    Ok(Verification { tokens, probs, draft_log_probs })
}

pub fn match_vector(draft: &[Token], verify: &[Token]) -> Result<Vec<u8>> {
    if verify.len() != draft.len() + 1 {
        return Err(Error::input(format!(
            "verification has {} tokens for a block of {}",
            verify.len(),
            draft.len()
        )));
    }
    Ok(draft.iter().zip(verify).map(|(a, b)| (a == b) as u8).collect())
}

/// Exact-match round length: the first mismatch index (1-based), else `K + 1`.
pub fn strict_round_length(delta: &[u8]) -> usize {
    delta
        .iter()
        .position(|&d| d == 0)
        .map_or(delta.len() + 1, |i| i + 1)
}

/// Decision made by an arbitrator at one mismatch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MismatchDecision {
    pub prob: f64,
    pub action: u8,
    pub features: Option<Vec<f64>>,
}

/// What an arbitrator sees when asked about mismatch `i` (0-based).
pub(crate) struct RoundView<'a> {
    pub r: usize,
    pub prefix: &'a [Token],
    pub block: &'a DraftBlock,
    pub verification: &'a Verification,
    pub delta: &'a [u8],
}

pub(crate) trait Arbiter {
    fn decide(&mut self, view: &RoundView<'_>, i: usize, rng: &mut StreamRng)
        -> Result<MismatchDecision>;
}

/// Tokens and decisions produced by scanning one block.
pub(crate) struct Scan {
    pub emitted: Vec<Token>,
    pub actions: Vec<u8>,
    pub probs: Vec<Option<f64>>,
    pub features: Vec<Option<Vec<f64>>>,
}

/// Scans positions `start..K` of a verified block, appending to `emitted`.
///
/// Stops at the first rejected mismatch (emitting the target token there), at
/// EOS, or once `room` tokens have been emitted; emits the bonus token when
/// the whole block passes. Undecided positions keep action 1 and no prob.
pub(crate) fn scan_block(
    view: &RoundView<'_>,
    start: usize,
    mut emitted: Vec<Token>,
    room: usize,
    eos: Token,
    mut arbiter: Option<&mut (dyn Arbiter + '_)>,
    rng: &mut StreamRng,
) -> Result<Scan> {
    let k = view.delta.len();
    let mut actions = vec![1u8; k];
    let mut probs: Vec<Option<f64>> = vec![None; k];
    let mut features: Vec<Option<Vec<f64>>> = vec![None; k];
    let mut i = start;
    loop {
        if emitted.len() >= room || emitted.last() == Some(&eos) {
            break;
        }
        if i == k {
            emitted.push(view.verification.tokens[k]);
            break;
        }
        if view.delta[i] == 1 {
            probs[i] = Some(1.0);
            emitted.push(view.block.tokens[i]);
        } else {
            let accept = match arbiter.as_deref_mut() {
                Some(arb) => {
                    let d = arb.decide(view, i, rng)?;
                    probs[i] = Some(d.prob);
                    features[i] = d.features;
                    d.action
                }
                None => 0,
            };
            actions[i] = accept;
            if accept == 1 {
                emitted.push(view.block.tokens[i]);
            } else {
                emitted.push(view.verification.tokens[i]);
                break;
            }
        }
        i += 1;
    }
    Ok(Scan { emitted, actions, probs, features })
}

/// Recomputes the draft and target rows of a block from the models.
pub(crate) fn reconstruct_round(
    draft: &TabularModel,
    target: &TabularModel,
    context: &[Token],
    block_tokens: &[Token],
    verify_tokens: &[Token],
) -> (DraftBlock, Verification) {
    let k = block_tokens.len();
    let mut ctx = context.to_vec();
    let mut dprobs = Vec::with_capacity(k);
    let mut tprobs = Vec::with_capacity(k + 1);
    let mut ell = Vec::with_capacity(k);
    for &y in block_tokens {
        let trow = target.row(&ctx);
        dprobs.push(draft.row(&ctx).to_vec());
        ell.push(floored_ln(trow[y as usize]));
        tprobs.push(trow.to_vec());
        ctx.push(y);
    }
    tprobs.push(target.row(&ctx).to_vec());
    (
        DraftBlock { tokens: block_tokens.to_vec(), probs: dprobs },
        Verification { tokens: verify_tokens.to_vec(), probs: tprobs, draft_log_probs: ell },
    )
}

/// Outcome of a decoding run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdRun {
    pub output: Vec<Token>,
    pub stats: RunStats,
    pub records: Vec<RoundRecord>,
}

/// The shared round loop. With no arbiter every mismatch is rejected.
/// `out` pre-seeds the output (counterfactual branches resume from it).
pub(crate) fn run_rounds(
    draft: &TabularModel,
    target: &TabularModel,
    task: &TaskInstance,
    k: usize,
    config: &DecodeConfig,
    rng: &mut StreamRng,
    mut arbiter: Option<&mut (dyn Arbiter + '_)>,
    mut out: Vec<Token>,
) -> Result<SpdRun> {
    config.validate()?;
    if k == 0 {
        return Err(Error::input("draft length K must be at least 1"));
    }
    let cap = config.cap(task);
    let eos = target.vocab().eos();
    let mut stats = RunStats::default();
    let mut records = Vec::new();
    let mut context = task.prompt.clone();
    context.extend_from_slice(&out);

    while out.len() < cap && out.last() != Some(&eos) {
        let r = records.len() + 1;
        let block = propose_block(draft, &context, k, config.temperature, rng)?;
        let verification = verify_block(target, &context, &block, config.temperature, rng)?;
        let delta = match_vector(&block.tokens, &verification.tokens)?;
        stats.draft_calls += k;
        stats.target_calls += 1;
        let charged = arbiter.is_some() && delta.contains(&0);
        if charged {
            stats.arbitrator_calls += 1;
        }

        let view = RoundView {
            r,
            prefix: &context,
            block: &block,
            verification: &verification,
            delta: &delta,
        };
        let scan = scan_block(
            &view,
            0,
            Vec::with_capacity(k + 1),
            cap - out.len(),
            eos,
            arbiter.as_deref_mut(),
            rng,
        )?;
        let Scan { emitted, actions, probs, features } = scan;

        let s = emitted.len();
        records.push(RoundRecord {
            r,
            prefix_len: context.len(),
            block,
            verification,
            delta,
            actions: arbiter.is_some().then_some(actions),
            s,
            probs,
            features,
        });
        stats.rounds += 1;
        stats.emitted += s;
        stats.round_lengths.push(s);
        context.extend_from_slice(&emitted);
        out.extend_from_slice(&emitted);
    }
    Ok(SpdRun { output: out, stats, records })
}

/// Greedy exact-match speculative decoding; lossless with respect to the
/// target's greedy output.
pub fn run_vanilla_spd(
    draft: &TabularModel,
    target: &TabularModel,
    task: &TaskInstance,
    k: usize,
    config: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<SpdRun> {
    if config.temperature != Temperature::Greedy {
        return Err(Error::contract("exact-match speculative decoding requires T = 0"));
    }
    run_rounds(draft, target, task, k, config, rng, None, Vec::new())
}

/// Outcome of one speculative-sampling position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStep {
    Accepted,
    Resampled(Token),
}

/// Accepts the draft token with probability `min(1, p_t / p_d)`, otherwise
/// draws from the normalized residual `max(0, p_t - p_d)`.
pub fn speculative_step(
    proposed: Token,
    p_draft: &[f64],
    p_target: &[f64],
    rng: &mut StreamRng,
) -> Result<SampleStep> {
    let pd = p_draft[proposed as usize];
    if pd <= 0.0 {
        return Err(Error::contract(format!(
            "proposed token {proposed} has zero draft probability"
        )));
    }
    let ratio = (p_target[proposed as usize] / pd).min(1.0);
    let u: f64 = rng.random();
    if u < ratio {
        return Ok(SampleStep::Accepted);
    }
    Ok(SampleStep::Resampled(sample(&residual(p_draft, p_target), rng)))
}

/// Normalized `max(0, p_t - p_d)`; falls back to `p_t` when it vanishes.
pub fn residual(p_draft: &[f64], p_target: &[f64]) -> Vec<f64> {
    let mut res: Vec<f64> = p_target
        .iter()
        .zip(p_draft)
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    let z: f64 = res.iter().sum();
    if z > 0.0 {
        res.iter_mut().for_each(|p| *p /= z);
        res
    } else {
        p_target.to_vec()
    }
}

/// Closed-form marginal of the first emitted token of a speculative-sampling
/// step whose proposal is drawn from `p_draft`.
pub fn speculative_marginal(p_draft: &[f64], p_target: &[f64]) -> Vec<f64> {
    let res = residual(p_draft, p_target);
    let reject_mass: f64 = p_draft
        .iter()
        .zip(p_target)
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, t)| d * (1.0 - (t / d).min(1.0)))
        .sum();
    p_draft
        .iter()
        .zip(p_target)
        .zip(&res)
        .map(|((&d, &t), &r)| {
            let accept = if d > 0.0 { d * (t / d).min(1.0) } else { 0.0 };
            accept + reject_mass * r
        })
        .collect()
}

/// Stochastic speculative sampling with the acceptance-ratio correction.
pub fn run_speculative_sampling(
    draft: &TabularModel,
    target: &TabularModel,
    task: &TaskInstance,
    k: usize,
    config: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<SpdRun> {
    config.validate()?;
    if config.temperature != Temperature::Sample {
        return Err(Error::contract("speculative sampling requires T = 1"));
    }
    if k == 0 {
        return Err(Error::input("draft length K must be at least 1"));
    }
    let cap = config.cap(task);
    let eos = target.vocab().eos();
    let mut out = Vec::new();
    let mut context = task.prompt.clone();
    let mut stats = RunStats::default();
    let mut records = Vec::new();
    while out.len() < cap && out.last() != Some(&eos) {
        let block = propose_block(draft, &context, k, Temperature::Sample, rng)?;
        let verification = verify_block(target, &context, &block, Temperature::Sample, rng)?;
        let delta = match_vector(&block.tokens, &verification.tokens)?;
        stats.draft_calls += k;
        stats.target_calls += 1;
        let room = cap - out.len();
        let mut emitted = Vec::new();
        let mut accepted = vec![0u8; k];
        let mut i = 0;
        loop {
            if emitted.len() == room || emitted.last() == Some(&eos) {
                break;
            }
            if i == k {
                emitted.push(sample(&verification.probs[k], rng));
                break;
            }
            let y = block.tokens[i];
            match speculative_step(y, &block.probs[i], &verification.probs[i], rng)? {
                SampleStep::Accepted => {
                    accepted[i] = 1;
                    emitted.push(y);
                }
                SampleStep::Resampled(t) => {
                    emitted.push(t);
                    break;
                }
            }
            i += 1;
        }
        let s = emitted.len();
        records.push(RoundRecord {
            r: records.len() + 1,
            prefix_len: context.len(),
            block,
            verification,
            delta,
            actions: Some(accepted),
            s,
            probs: vec![None; k],
            features: vec![None; k],
        });
        stats.rounds += 1;
        stats.emitted += s;
        stats.round_lengths.push(s);
        context.extend_from_slice(&emitted);
        out.extend(emitted);
    }
    Ok(SpdRun { output: out, stats, records })
}

/// Mean tokens emitted per verification round.
pub fn mean_accepted_length(stats: &RunStats) -> Result<f64> {
    if stats.rounds == 0 {
        return Err(Error::Undefined("mean accepted length of a run with no rounds".into()));
    }
    Ok(stats.round_lengths.iter().sum::<usize>() as f64 / stats.rounds as f64)
}

/// Emitted tokens per unit of target-call-equivalent cost.
pub fn cost_model_speedup(stats: &RunStats, w: &CostWeights) -> Result<f64> {
    if w.draft < 0.0 || w.arbitrator < 0.0 {
        return Err(Error::input("cost weights must be nonnegative"));
    }
    let cost = stats.target_calls as f64
        + stats.draft_calls as f64 * w.draft
        + stats.arbitrator_calls as f64 * w.arbitrator;
    if cost <= 0.0 {
        return Err(Error::input("cost model denominator is zero"));
    }
    Ok(stats.emitted as f64 / cost)
}
