//! Two-stage arbitrator training: supervised warm-up on oracle-judged
//! mismatches, then group-relative policy optimization over full rollouts.

mod loss;
mod optim;
mod train;

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Token;
use crate::spd::{RoundRecord, TraceLine};

pub use loss::{ppo_loss, sft_loss, LossOutput, PpoSample, SftSample};
pub use optim::{clip_grad_norm, AdamW};
pub use train::{
    judge_labels_oracle, train_rl, train_sft, write_rl_log, RlLogRow, RlOutcome, SftConfig,
    SftLogRow, SftOutcome,
};

/// One complete collaborative trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task_id: u64,
    pub rounds: Vec<RoundRecord>,
    pub corr: u8,
    pub output: Vec<Token>,
}

impl Rollout {
    pub fn new(task_id: u64, rounds: Vec<RoundRecord>, corr: u8, output: Vec<Token>) -> Self {
        Self { task_id, rounds, corr, output }
    }

    /// Rollout-time probability of the action taken at a decided mismatch.
    pub fn old_prob(&self, round: usize, pos: usize) -> Option<f64> {
        let rec = &self.rounds[round];
        let p = rec.probs[pos]?;
        let a = rec.actions.as_ref().map_or(0, |a| a[pos]);
        Some(if a == 1 { p } else { 1.0 - p })
    }

    /// Target surprisal `|l|` of the draft token at a position.
    pub fn surprisal(&self, round: usize, pos: usize) -> f64 {
        -self.rounds[round].verification.draft_log_probs[pos]
    }

    pub fn mean_tau(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.rounds.iter().map(|r| r.s).sum::<usize>() as f64 / self.rounds.len() as f64
    }
}

#[derive(Serialize)]
struct RolloutLine {
    task_id: u64,
    corr: u8,
    rounds: Vec<TraceLine>,
    #[serde(serialize_with = "crate::spd::ser_sig9")]
    probs: Vec<f64>,
    #[serde(serialize_with = "crate::spd::ser_sig9")]
    surprisal: Vec<f64>,
}

/// JSON Lines archive; `probs` and `surprisal` list the effective decisions
/// in round order.
pub fn write_rollouts(path: &Path, rollouts: &[Rollout]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ro in rollouts {
        let mut probs = Vec::new();
        let mut surprisal = Vec::new();
        for (r, rec) in ro.rounds.iter().enumerate() {
            for i in effective_actions(rec) {
                probs.push(ro.old_prob(r, i).unwrap_or(f64::NAN));
                surprisal.push(ro.surprisal(r, i));
            }
        }
        let line = RolloutLine {
            task_id: ro.task_id,
            corr: ro.corr,
            rounds: ro.rounds.iter().map(RoundRecord::trace_line).collect(),
            probs,
            surprisal,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eta_fail: f64,
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.25, eta_fail: 0.5, epsilon: 1e-8 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("reward alpha and beta must be nonnegative".into()));
        }
        if !(self.eta_fail > 0.0 && self.eta_fail <= 1.0) {
            return Err(Error::Config("eta_fail must lie in (0, 1]".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub prompts_per_update: usize,
    pub updates: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Draft length used for training rollouts.
    #[serde(rename = "K")]
    pub k: usize,
    /// Decoding temperature of training rollouts (0 or 1).
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 12,
            prompts_per_update: 16,
            updates: 200,
            lr: 5e-5,
            weight_decay: 0.0,
            clip: 0.2,
            entropy_coef: 0.01,
            kl_coef: 0.02,
            epochs: 4,
            grad_clip: 1.0,
            k: 25,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group size M must be at least 2".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("clip range must lie in (0, 1)".into()));
        }
        if self.k == 0 || self.prompts_per_update == 0 {
            return Err(Error::Config("K and prompts per update must be positive".into()));
        }
        if self.lr < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("learning rate must be >= 0 and grad clip > 0".into()));
        }
        Ok(())
    }
}

/// Mismatch positions (0-based) up to the round's stopping point.
pub fn effective_actions(round: &RoundRecord) -> Vec<usize> {
    let k = round.k();
    let limit = round.s.min(k);
    (0..limit).filter(|&i| round.delta[i] == 0).collect()
}

/// Share of the span after the first mismatch that the round emitted:
/// `(s - i*) / ((K + 1) - i*)`, with 1-based `i*`.
pub fn round_progress(delta: &[u8], s: usize, k: usize) -> Result<f64> {
    let first = delta
        .iter()
        .position(|&d| d == 0)
        .ok_or_else(|| Error::Undefined("round progress of a round without mismatches".into()))?
        + 1;
    Ok((s as f64 - first as f64) / ((k + 1) as f64 - first as f64))
}

/// Shaped reward of each effective decision of a failed rollout's round:
/// accepted mismatches before the first rejection pay `alpha * |l|`, the first
/// rejected mismatch pays `beta`.
pub fn failure_rewards(round: &RoundRecord, config: &RewardConfig) -> Vec<(usize, f64)> {
    let k = round.k();
    let rej = round.rejection_index();
    let actions = round.actions.as_deref();
    effective_actions(round)
        .into_iter()
        .map(|i| {
            let a = actions.map_or(0, |a| a[i]);
            let mut g = 0.0;
            if a == 1 && i + 1 < rej {
                g -= config.alpha * round.verification.draft_log_probs[i].abs();
            }
            if rej <= k && i + 1 == rej {
                g -= config.beta;
            }
            (i, g)
        })
        .collect()
}

/// Shaped reward per effective decision: `(round, pos, g)`.
pub fn shaped_rewards(rollout: &Rollout, config: &RewardConfig) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (r, rec) in rollout.rounds.iter().enumerate() {
        if rollout.corr == 1 {
            let eff = effective_actions(rec);
            if eff.is_empty() {
                continue;
            }
            let rho = round_progress(&rec.delta, rec.s, rec.k()).expect("round has a mismatch");
            out.extend(eff.into_iter().map(|i| (r, i, rho)));
        } else {
            out.extend(failure_rewards(rec, config).into_iter().map(|(i, g)| (r, i, g)));
        }
    }
    out
}

pub fn rollout_return(rollout: &Rollout, config: &RewardConfig) -> f64 {
    shaped_rewards(rollout, config).iter().map(|x| x.2).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    AllCorrect,
    AllIncorrect,
    Mixed,
}

impl GroupKind {
    pub fn of(correct: &[u8]) -> Self {
        let c = correct.iter().filter(|&&x| x == 1).count();
        if c == correct.len() {
            GroupKind::AllCorrect
        } else if c == 0 {
            GroupKind::AllIncorrect
        } else {
            GroupKind::Mixed
        }
    }
}

/// Scales correct returns by `gamma = sum|J-| / (sum J+ + eps)` so a mixed
/// group centers at zero.
pub fn rebalance_group(returns: &[f64], correct: &[u8], epsilon: f64) -> Result<Vec<f64>> {
    if returns.len() != correct.len() {
        return Err(Error::input("returns and correctness flags differ in length"));
    }
    if GroupKind::of(correct) != GroupKind::Mixed {
        return Err(Error::contract("rebalancing needs a mixed group"));
    }
    let pos: f64 = returns.iter().zip(correct).filter(|(_, &c)| c == 1).map(|(j, _)| j).sum();
    let neg: f64 = returns.iter().zip(correct).filter(|(_, &c)| c == 0).map(|(j, _)| j.abs()).sum();
    let gamma = neg / (pos + epsilon);
    Ok(returns
        .iter()
        .zip(correct)
        .map(|(&j, &c)| if c == 1 { gamma * j } else { j })
        .collect())
}

/// Group-standardized returns, scaled by `eta_fail` for all-incorrect groups.
pub fn group_advantages(returns: &[f64], kind: GroupKind, eta_fail: f64, epsilon: f64) -> Vec<f64> {
    let n = returns.len() as f64;
    if returns.is_empty() {
        return Vec::new();
    }
    let mu = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|j| (j - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let eta = if kind == GroupKind::AllIncorrect { eta_fail } else { 1.0 };
    returns
        .iter()
        .map(|j| {
            if sigma == 0.0 {
                0.0
            } else {
                eta * (j - mu) / (sigma + epsilon)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Credit {
    pub round: usize,
    pub pos: usize,
    pub reward: f64,
    pub advantage: f64,
}

/// Per-decision credit of one rollout; only effective decisions appear.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecisionCredit {
    pub entries: Vec<Credit>,
}

impl DecisionCredit {
    pub fn total_abs(&self) -> f64 {
        self.entries.iter().map(|c| c.advantage.abs()).sum()
    }
}

/// Spreads a rollout advantage over its effective decisions: by `rho_r` for
/// correct rollouts, by `|g| / sum|g|` for incorrect ones.
pub fn allocate_advantages(rollout: &Rollout, advantage: f64, config: &RewardConfig) -> DecisionCredit {
    let rewards = shaped_rewards(rollout, config);
    let entries = if rollout.corr == 1 {
        rewards
            .into_iter()
            .map(|(round, pos, rho)| Credit { round, pos, reward: rho, advantage: rho * advantage })
            .collect()
    } else {
        let total: f64 = rewards.iter().map(|x| x.2.abs()).sum();
        rewards
            .into_iter()
            .map(|(round, pos, g)| Credit {
                round,
                pos,
                reward: g,
                advantage: if total > 0.0 { g.abs() / total * advantage } else { 0.0 },
            })
            .collect()
    };
    DecisionCredit { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::{DraftBlock, Verification};

    pub(crate) fn record(delta: &[u8], actions: &[u8], s: usize, ell: &[f64]) -> RoundRecord {
        let k = delta.len();
        let mut probs = vec![None; k];
        for i in 0..k.min(s) {
            probs[i] = Some(if delta[i] == 1 { 1.0 } else { 0.5 });
        }
        RoundRecord {
            r: 1,
            prefix_len: 0,
            block: DraftBlock { tokens: vec![0; k], probs: vec![vec![]; k] },
            verification: Verification {
                tokens: vec![0; k + 1],
                probs: vec![vec![]; k + 1],
                draft_log_probs: ell.to_vec(),
            },
            delta: delta.to_vec(),
            actions: Some(actions.to_vec()),
            s,
            probs,
            features: vec![None; k],
        }
    }

    #[test]
    fn effective_sets() {
        let r = record(&[1, 1], &[1, 1], 3, &[0.0; 2]);
        assert!(effective_actions(&r).is_empty());
        let r = record(&[1, 0, 0, 1], &[1, 1, 0, 1], 3, &[0.0; 4]);
        assert_eq!(effective_actions(&r), vec![1, 2]);
        let r = record(&[0, 0], &[1, 1], 3, &[0.0; 2]);
        assert_eq!(effective_actions(&r), vec![0, 1]);
    }

    #[test]
    fn progress_values() {
        let mut delta = vec![1u8; 25];
        delta[4] = 0;
        assert_eq!(round_progress(&delta, 26, 25).unwrap(), 1.0);
        assert_eq!(round_progress(&delta, 5, 25).unwrap(), 0.0);
        assert!((round_progress(&[1, 0, 1, 1], 4, 4).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(round_progress(&[1, 1], 3, 2).is_err());
    }

    #[test]
    fn failure_reward_values() {
        let cfg = RewardConfig::default();
        // Accepted mismatch at 1 (l = -2), rejection at 2.
        let r = record(&[0, 0, 1], &[1, 0, 1], 2, &[-2.0, -0.1, 0.0]);
        assert_eq!(failure_rewards(&r, &cfg), vec![(0, -2.0), (1, -0.25)]);
        // No rejection: sentinel K + 1, no beta term.
        let r = record(&[0, 1], &[1, 1], 3, &[-0.5, 0.0]);
        assert_eq!(failure_rewards(&r, &cfg), vec![(0, -0.5)]);
    }

    #[test]
    fn returns() {
        let cfg = RewardConfig::default();
        let r1 = record(&[0, 0, 1], &[1, 1, 1], 4, &[-1.0; 3]);
        let r2 = record(&[1, 0, 1], &[1, 1, 1], 3, &[-1.0; 3]);
        let mut r2b = r2.clone();
        r2b.s = 3;
        // rho_2 = (3 - 2) / (4 - 2) = 0.5
        let ro = Rollout::new(0, vec![r1, r2b], 1, vec![]);
        assert!((rollout_return(&ro, &cfg) - 2.5).abs() < 1e-15);
        let bad = Rollout::new(0, vec![record(&[0, 0, 1], &[1, 0, 1], 2, &[-2.0, -0.1, 0.0])], 0, vec![]);
        assert!((rollout_return(&bad, &cfg) + 2.25).abs() < 1e-15);
        let clean = Rollout::new(0, vec![record(&[1, 1], &[1, 1], 3, &[0.0; 2])], 1, vec![]);
        assert_eq!(rollout_return(&clean, &cfg), 0.0);
    }

    #[test]
    fn rebalancing() {
        let b = rebalance_group(&[2.0, -1.0], &[1, 0], 1e-12).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-9 && b[1] == -1.0);
        let b = rebalance_group(&[1.0, 3.0, -2.0], &[1, 1, 0], 1e-12).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-9 && (b[1] - 1.5).abs() < 1e-9);
        assert!(b.iter().sum::<f64>().abs() < 1e-9);
        let b = rebalance_group(&[0.0, 0.0, -1.0], &[1, 1, 0], 1e-8).unwrap();
        assert!(b.iter().all(|x| x.is_finite()));
        assert!(rebalance_group(&[1.0, 2.0], &[1, 1], 1e-8).is_err());
    }

    #[test]
    fn advantages() {
        let a = group_advantages(&[-1.0, -3.0], GroupKind::AllIncorrect, 0.5, 0.0);
        assert_eq!(a, vec![0.5, -0.5]);
        assert_eq!(group_advantages(&[2.0; 4], GroupKind::AllCorrect, 0.5, 1e-8), vec![0.0; 4]);
        let m = group_advantages(&[1.0, -1.0], GroupKind::Mixed, 0.5, 0.0);
        assert_eq!(m, vec![1.0, -1.0]);
    }

    #[test]
    fn allocation() {
        let cfg = RewardConfig::default();
        let good = Rollout::new(0, vec![record(&[0, 1], &[1, 1], 3, &[-1.0, 0.0])], 1, vec![]);
        let c = allocate_advantages(&good, 2.0, &cfg);
        assert_eq!(c.entries.len(), 1);
        assert_eq!(c.entries[0].advantage, 2.0);

        let bad = Rollout::new(0, vec![record(&[0, 0, 1], &[1, 0, 1], 2, &[-2.0, -0.1, 0.0])], 0, vec![]);
        let c = allocate_advantages(&bad, -1.0, &cfg);
        let adv: Vec<f64> = c.entries.iter().map(|e| e.advantage).collect();
        assert!((adv[0] + 2.0 / 2.25).abs() < 1e-12);
        assert!((adv[1] + 0.25 / 2.25).abs() < 1e-12);
        assert!((c.total_abs() - 1.0).abs() < 1e-12);

        let zero = Rollout::new(0, vec![record(&[0, 1], &[1, 1], 3, &[0.0, 0.0])], 0, vec![]);
        assert!(allocate_advantages(&zero, -1.0, &cfg).entries.iter().all(|e| e.advantage == 0.0));
    }
}
