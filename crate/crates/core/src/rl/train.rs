use std::path::Path;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{ppo_loss, sft_loss, PpoSample, SftSample};
use super::optim::{clip_grad_norm, AdamW};
use super::{
    allocate_advantages, group_advantages, rebalance_group, rollout_return, GroupKind,
    RewardConfig, Rollout, TrainConfig,
};
use crate::arbitration::{
    features_from_rows, run_cospec, sigmoid, ArbitrationPolicy, DecisionMode, PolicyParams,
};
use crate::diagnostics::{branch_utilities, MismatchState, UtilityMode};
use crate::error::{Error, Result};
use crate::lm::{DecodeConfig, TabularModel, TaskInstance, Temperature};
use crate::rng::{mix, run_stream};
use crate::spd::run_vanilla_spd;

/// Generation cap used by training runs; task limits always bind first.
const NO_CAP: usize = 1 << 20;

/// Soft labels `sigmoid(sharpness * (u_D - u_T))` from exact or sampled
/// branch utilities under the given continuation policy.
pub fn judge_labels_oracle(
    states: &[MismatchState],
    draft: &TabularModel,
    target: &TabularModel,
    continuation: &ArbitrationPolicy,
    mode: DecisionMode,
    k: usize,
    config: &DecodeConfig,
    utility_mode: UtilityMode,
    sharpness: f64,
) -> Result<Vec<f64>> {
    states
        .iter()
        .map(|s| {
            let u = branch_utilities(s, draft, target, continuation, mode, k, config, utility_mode)?;
            Ok(sigmoid(sharpness * (u.draft - u.target)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sharpness: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { k: 25, steps: 500, lr: 0.05, weight_decay: 0.0, sharpness: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub policy: PolicyParams,
    pub log: Vec<SftLogRow>,
    pub samples: Vec<SftSample>,
}

/// Every mismatch position of every vanilla greedy round, with its features.
fn vanilla_mismatches(
    suite: &[TaskInstance],
    draft: &TabularModel,
    target: &TabularModel,
    k: usize,
) -> Result<Vec<(MismatchState, Vec<f64>)>> {
    let config = DecodeConfig::greedy(NO_CAP);
    let mut out = Vec::new();
    for task in suite {
        let mut rng = run_stream("sft-trace", task.id(), 0);
        let run = run_vanilla_spd(draft, target, task, k, &config, &mut rng)?;
        for rec in &run.records {
            let verified = run.output[..rec.prefix_len - task.prompt.len()].to_vec();
            for pos in (0..k).filter(|&i| rec.delta[i] == 0) {
                let x = features_from_rows(&rec.block, &rec.verification, &rec.delta, pos);
                let state = MismatchState {
                    task: task.clone(),
                    verified: verified.clone(),
                    r: rec.r,
                    pos,
                    draft: rec.block.tokens.clone(),
                    verify: rec.verification.tokens.clone(),
                    delta: rec.delta.clone(),
                };
                out.push((state, x));
            }
        }
    }
    Ok(out)
}

/// Supervised warm-up: oracle-judged vanilla-SPD mismatches, full-batch AdamW
/// on the mean cross-entropy.
pub fn train_sft(
    init: &PolicyParams,
    suite: &[TaskInstance],
    draft: &TabularModel,
    target: &TabularModel,
    config: &SftConfig,
) -> Result<SftOutcome> {
    if suite.is_empty() {
        return Err(Error::input("warm-up needs a nonempty task suite"));
    }
    if config.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let found = vanilla_mismatches(suite, draft, target, config.k)?;
    if found.is_empty() {
        return Err(Error::Training(
            "no mismatches in the vanilla traces; nothing to supervise".into(),
        ));
    }
    let (states, features): (Vec<_>, Vec<_>) = found.into_iter().unzip();
    let labels = judge_labels_oracle(
        &states,
        draft,
        target,
        &ArbitrationPolicy::AlwaysReject,
        DecisionMode::Threshold(0.5),
        config.k,
        &DecodeConfig::greedy(NO_CAP),
        UtilityMode::Exact,
        config.sharpness,
    )?;
    let samples: Vec<SftSample> = features
        .into_iter()
        .zip(labels)
        .map(|(features, label)| SftSample { features, label })
        .collect();
    info!("warm-up on {} labelled mismatches", samples.len());

    let n = samples.len() as f64;
    let mut flat = init.to_flat();
    let mut opt = AdamW::new(flat.len(), config.lr, config.weight_decay);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let out = sft_loss(&PolicyParams::from_flat(&flat), &samples)?;
        let grad: Vec<f64> = out.grad.iter().map(|g| g / n).collect();
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        log.push(SftLogRow { step, loss: out.loss / n, grad_norm });
        opt.step(&mut flat, &grad);
    }
    let policy = PolicyParams::from_flat(&flat);
    if !policy.is_finite() {
        return Err(Error::Training("warm-up diverged to non-finite parameters".into()));
    }
    Ok(SftOutcome { policy, log, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlLogRow {
    pub update: usize,
    #[serde(rename = "mean_J")]
    pub mean_j: f64,
    pub mean_score: f64,
    pub mean_tau: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub entropy: f64,
    pub kl: f64,
}

pub fn write_rl_log(path: &Path, rows: &[RlLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlOutcome {
    pub policy: PolicyParams,
    pub log: Vec<RlLogRow>,
    /// Rollouts of the final update.
    pub rollouts: Vec<Rollout>,
}

/// Turns one prompt's group of rollouts into policy-gradient samples.
fn group_samples(group: &[Rollout], reward: &RewardConfig) -> Result<Vec<PpoSample>> {
    let correct: Vec<u8> = group.iter().map(|r| r.corr).collect();
    let kind = GroupKind::of(&correct);
    let raw: Vec<f64> = group.iter().map(|r| rollout_return(r, reward)).collect();
    let returns = if kind == GroupKind::Mixed {
        rebalance_group(&raw, &correct, reward.epsilon)?
    } else {
        raw
    };
    let adv = group_advantages(&returns, kind, reward.eta_fail, reward.epsilon);
    if kind == GroupKind::AllCorrect && adv.iter().all(|a| *a == 0.0) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (ro, &a) in group.iter().zip(&adv) {
        for c in allocate_advantages(ro, a, reward).entries {
            let rec = &ro.rounds[c.round];
            let features = rec.features[c.pos].clone().ok_or_else(|| {
                Error::Training("rollout decision is missing its features".into())
            })?;
            let action = rec.actions.as_ref().map_or(0, |a| a[c.pos]);
            let old_prob = ro.old_prob(c.round, c.pos).ok_or_else(|| {
                Error::Training("rollout decision is missing its probability".into())
            })?;
            out.push(PpoSample { features, action, old_prob, advantage: c.advantage });
        }
    }
    Ok(out)
}

/// Group-relative policy optimization of the arbitrator, with a frozen
/// reference for the KL penalty.
pub fn train_rl(
    init: &PolicyParams,
    reference: &PolicyParams,
    suite: &[TaskInstance],
    draft: &TabularModel,
    target: &TabularModel,
    reward: &RewardConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<RlOutcome> {
    reward.validate()?;
    config.validate()?;
    if suite.is_empty() {
        return Err(Error::input("RL needs a nonempty task suite"));
    }
    let temperature = Temperature::try_from(config.temperature)
        .map_err(|_| Error::Config("training temperature must be 0 or 1".into()))?;
    let decode = DecodeConfig { temperature, max_len: NO_CAP, seed };
    let mut flat = init.to_flat();
    let mut opt = AdamW::new(flat.len(), config.lr, config.weight_decay);
    let mut log = Vec::with_capacity(config.updates);
    let mut last = Vec::new();

    for update in 0..config.updates {
        let snapshot = ArbitrationPolicy::Learned(PolicyParams::from_flat(&flat));
        let mut picker = run_stream("rl-prompts", update as u64, seed);
        let mut rollouts = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..config.prompts_per_update {
            let task = &suite[picker.random_range(0..suite.len())];
            let mut group = Vec::with_capacity(config.group_size);
            for m in 0..config.group_size {
                let mut rng = run_stream("rl", task.id(), mix(mix(seed, update as u64), m as u64));
                let run = run_cospec(
                    draft,
                    target,
                    &snapshot,
                    task,
                    config.k,
                    DecisionMode::Sample,
                    &decode,
                    &mut rng,
                )?;
                group.push(run.rollout);
            }
            samples.extend(group_samples(&group, reward)?);
            rollouts.extend(group);
        }

        let n = rollouts.len() as f64;
        let mean_j = rollouts.iter().map(|r| rollout_return(r, reward)).sum::<f64>() / n;
        let mean_score = rollouts.iter().map(|r| r.corr as f64).sum::<f64>() / n;
        let mean_tau = rollouts.iter().map(Rollout::mean_tau).sum::<f64>() / n;
        let mut row = RlLogRow {
            update,
            mean_j,
            mean_score,
            mean_tau,
            loss: 0.0,
            grad_norm: 0.0,
            entropy: 0.0,
            kl: 0.0,
        };
        if !samples.is_empty() {
            for _ in 0..config.epochs {
                let out = ppo_loss(
                    &PolicyParams::from_flat(&flat),
                    reference,
                    &samples,
                    config.clip,
                    config.entropy_coef,
                    config.kl_coef,
                )?;
                let mut grad = out.grad;
                row.grad_norm = clip_grad_norm(&mut grad, config.grad_clip);
                row.loss = out.loss;
                row.entropy = out.entropy;
                row.kl = out.kl;
                opt.step(&mut flat, &grad);
            }
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("parameters diverged at update {update}")));
            }
        }
        debug!(
            "update {update}: J {mean_j:.4} score {mean_score:.3} tau {mean_tau:.2} decisions {}",
            samples.len()
        );
        log.push(row);
        last = rollouts;
    }
    Ok(RlOutcome { policy: PolicyParams::from_flat(&flat), log, rollouts: last })
}
