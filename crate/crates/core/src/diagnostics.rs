//! Counterfactual branch utilities and complementarity metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arbitration::{run_cospec_from, ArbitrationPolicy, DecisionMode, PolicyArbiter};
use crate::error::{Error, Result};
use crate::lm::{score, DecodeConfig, TabularModel, TaskInstance, Temperature, Token};
use crate::rl::Rollout;
use crate::rng::{hash_tokens, mix, stream};
use crate::spd::{reconstruct_round, scan_block, RoundView};

/// A reached disagreement inside a round, sufficient to replay both branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MismatchState {
    pub task: TaskInstance,
    /// Output tokens emitted before the round.
    pub verified: Vec<Token>,
    pub r: usize,
    /// 0-based draft position of the mismatch.
    pub pos: usize,
    pub draft: Vec<Token>,
    /// `K + 1` verification tokens.
    pub verify: Vec<Token>,
    pub delta: Vec<u8>,
}

impl MismatchState {
    fn stream_seed(&self) -> u64 {
        let mut toks = self.verified.clone();
        toks.extend_from_slice(&self.draft);
        toks.extend_from_slice(&self.verify);
        mix(hash_tokens(self.task.seed, &toks), ((self.r as u64) << 32) | self.pos as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityMode {
    /// Single deterministic replay; requires `T = 0` and threshold decisions.
    Exact,
    /// Mean over this many scored completions per branch.
    MonteCarlo(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchUtilities {
    pub draft: f64,
    pub target: f64,
    pub samples: usize,
    pub exact: bool,
}

/// Expected final utility of forcing the draft token versus the target token
/// at `state`, with both branches continued by the same policy.
///
/// The draft branch keeps scanning the current block; the target branch ends
/// the round. Both then resume collaborative decoding until EOS.
pub fn branch_utilities(
    state: &MismatchState,
    draft: &TabularModel,
    target: &TabularModel,
    continuation: &ArbitrationPolicy,
    mode: DecisionMode,
    k: usize,
    config: &DecodeConfig,
    utility_mode: UtilityMode,
) -> Result<BranchUtilities> {
    if state.delta.get(state.pos) != Some(&0) {
        return Err(Error::contract(format!(
            "position {} of the state is not a mismatch",
            state.pos
        )));
    }
    if state.draft.len() != k || state.verify.len() != k + 1 || state.delta.len() != k {
        return Err(Error::input("mismatch state does not match the block length"));
    }
    let n = match utility_mode {
        UtilityMode::Exact => {
            if config.temperature != Temperature::Greedy || !mode.is_deterministic() {
                return Err(Error::contract(
                    "exact branch utilities need T = 0 and threshold decisions",
                ));
            }
            1
        }
        UtilityMode::MonteCarlo(0) => {
            return Err(Error::input("Monte Carlo branch utilities need n >= 1"))
        }
        UtilityMode::MonteCarlo(n) => n,
    };

    let task = &state.task;
    let mut context = task.prompt.clone();
    context.extend_from_slice(&state.verified);
    let (block, verification) =
        reconstruct_round(draft, target, &context, &state.draft, &state.verify);
    let view = RoundView {
        r: state.r,
        prefix: &context,
        block: &block,
        verification: &verification,
        delta: &state.delta,
    };
    let room = config.cap(task).saturating_sub(state.verified.len());
    let eos = target.vocab().eos();
    let base = state.stream_seed();

    let (mut u_draft, mut u_target) = (0.0, 0.0);
    for sample in 0..n as u64 {
        let mut rng = stream(mix(base, sample));
        let mut arb = PolicyArbiter { policy: continuation, mode, draft, target, task, k, config };
        let seeded = state.draft[..=state.pos].to_vec();
        let scan = scan_block(&view, state.pos + 1, seeded, room, eos, Some(&mut arb), &mut rng)?;
        let mut start = state.verified.clone();
        start.extend(scan.emitted);
        let run = run_cospec_from(draft, target, continuation, task, k, mode, config, &mut rng, start)?;
        u_draft += score(task, &run.output) as f64;

        let mut start = state.verified.clone();
        start.extend_from_slice(&state.draft[..state.pos]);
        start.push(state.verify[state.pos]);
        let run = run_cospec_from(draft, target, continuation, task, k, mode, config, &mut rng, start)?;
        u_target += score(task, &run.output) as f64;
    }
    Ok(BranchUtilities {
        draft: u_draft / n as f64,
        target: u_target / n as f64,
        samples: n,
        exact: utility_mode == UtilityMode::Exact,
    })
}

/// Decided mismatch states of a rollout, with the action taken at each.
pub fn reached_states(task: &TaskInstance, rollout: &Rollout) -> Vec<(MismatchState, u8)> {
    let mut out = Vec::new();
    for rec in &rollout.rounds {
        let verified = rollout.output[..rec.prefix_len - task.prompt.len()].to_vec();
        let actions = match &rec.actions {
            Some(a) => a,
            None => continue,
        };
        for (pos, &action) in actions.iter().enumerate() {
            if rec.delta[pos] == 0 && rec.probs[pos].is_some() {
                out.push((
                    MismatchState {
                        task: task.clone(),
                        verified: verified.clone(),
                        r: rec.r,
                        pos,
                        draft: rec.block.tokens.clone(),
                        verify: rec.verification.tokens.clone(),
                        delta: rec.delta.clone(),
                    },
                    action,
                ));
            }
        }
    }
    out
}

/// Both sides of the complementarity identity over a set of states:
/// `mean(max(u_D, u_T)) - mean(u_T)` and `mean((u_D - u_T)_+)`.
pub fn complementarity_gap(utilities: &[(f64, f64)]) -> Result<(f64, f64)> {
    if utilities.is_empty() {
        return Err(Error::input("complementarity gap of an empty state set"));
    }
    let n = utilities.len() as f64;
    let mean_max = utilities.iter().map(|(d, t)| d.max(*t)).sum::<f64>() / n;
    let mean_t = utilities.iter().map(|(_, t)| t).sum::<f64>() / n;
    let mean_pos = utilities.iter().map(|(d, t)| (d - t).max(0.0)).sum::<f64>() / n;
    Ok((mean_max - mean_t, mean_pos))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    DraftBetter,
    TargetBetter,
    BothCorrect,
    BothWrong,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::DraftBetter,
        Category::TargetBetter,
        Category::BothCorrect,
        Category::BothWrong,
    ];

    /// Strictly better branch wins; ties split on whether the shared utility
    /// reaches 0.5. On exact 0/1 utilities this is the plain correctness table.
    pub fn of(u: &BranchUtilities) -> Result<Self> {
        if !(0.0..=1.0).contains(&u.draft) || !(0.0..=1.0).contains(&u.target) {
            return Err(Error::input(format!(
                "utilities must lie in [0, 1], got ({}, {})",
                u.draft, u.target
            )));
        }
        Ok(if u.draft > u.target {
            Category::DraftBetter
        } else if u.target > u.draft {
            Category::TargetBetter
        } else if u.draft >= 0.5 {
            Category::BothCorrect
        } else {
            Category::BothWrong
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Category::DraftBetter => "draft_better",
            Category::TargetBetter => "target_better",
            Category::BothCorrect => "both_correct",
            Category::BothWrong => "both_wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub share: f64,
    pub draft_not_worse: Option<f64>,
    pub draft_accept: Option<f64>,
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchBreakdown {
    pub total: usize,
    /// `all` first, then the four categories.
    pub rows: Vec<CategoryRow>,
}

impl MismatchBreakdown {
    pub fn row(&self, category: Category) -> &CategoryRow {
        self.rows
            .iter()
            .find(|r| r.category == category.label())
            .expect("every category has a row")
    }

    pub fn share_sum(&self) -> f64 {
        self.rows[1..].iter().map(|r| r.share).sum()
    }
}

/// Splits reached mismatches into the four outcome categories and reports,
/// per category, how often the policy took the draft branch and how often its
/// choice was at least as good as the alternative.
pub fn mismatch_breakdown(items: &[(BranchUtilities, u8)]) -> Result<MismatchBreakdown> {
    let total = items.len();
    let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let summarize = |label: &str, subset: Vec<&(BranchUtilities, u8)>| {
        let n = subset.len();
        let not_worse = subset.iter().filter(|(u, _)| u.draft >= u.target).count();
        let accepted = subset.iter().filter(|(_, a)| *a == 1).count();
        let agree = subset
            .iter()
            .filter(|(u, a)| {
                let (chosen, other) = if *a == 1 { (u.draft, u.target) } else { (u.target, u.draft) };
                chosen >= other
            })
            .count();
        CategoryRow {
            category: label.to_string(),
            count: n,
            share: if total > 0 { n as f64 / total as f64 } else { 0.0 },
            draft_not_worse: frac(not_worse, n),
            draft_accept: frac(accepted, n),
            agreement: frac(agree, n),
        }
    };
    let cats = items
        .iter()
        .map(|(u, _)| Category::of(u))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![summarize("all", items.iter().collect())];
    for c in Category::ALL {
        let subset = items.iter().zip(&cats).filter(|(_, k)| **k == c).map(|(x, _)| x).collect();
        rows.push(summarize(c.label(), subset));
    }
    Ok(MismatchBreakdown { total, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub value: f64,
    /// Union equals target: no headroom to recover.
    pub degenerate: bool,
}

/// `(cospec - target) / (union - target)` in correct counts.
pub fn recovery_metric(target: usize, union: usize, cospec: usize) -> Result<Recovery> {
    if union < target {
        return Err(Error::input(format!("union {union} below target {target}")));
    }
    if union == target {
        return Ok(Recovery { value: 0.0, degenerate: true });
    }
    Ok(Recovery {
        value: (cospec as f64 - target as f64) / (union - target) as f64,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityReport {
    pub benchmark: String,
    pub total: usize,
    pub target_correct: usize,
    pub draft_correct: usize,
    pub union_correct: usize,
    pub cospec_correct: usize,
    pub recovery: f64,
    pub degenerate: bool,
}

/// Per-instance scores of the three systems, keyed by task id.
pub fn complementarity_report(
    benchmark: &str,
    target: &[(u64, u8)],
    draft: &[(u64, u8)],
    cospec: &[(u64, u8)],
) -> Result<ComplementarityReport> {
    let ids = |v: &[(u64, u8)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
    if ids(target) != ids(draft) || ids(target) != ids(cospec) {
        return Err(Error::input("systems were not evaluated on the same suite"));
    }
    let count = |v: &[(u64, u8)]| v.iter().filter(|x| x.1 == 1).count();
    let union = target.iter().zip(draft).filter(|(t, d)| t.1 == 1 || d.1 == 1).count();
    let (tc, cc) = (count(target), count(cospec));
    let rec = recovery_metric(tc, union, cc)?;
    Ok(ComplementarityReport {
        benchmark: benchmark.to_string(),
        total: target.len(),
        target_correct: tc,
        draft_correct: count(draft),
        union_correct: union,
        cospec_correct: cc,
        recovery: rec.value,
        degenerate: rec.degenerate,
    })
}

pub fn write_breakdown_csv(path: &Path, b: &MismatchBreakdown) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &b.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_csv(path: &Path, reports: &[ComplementarityReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
