use super::{ChainFamily, TabularModel, Token};
use crate::error::{Error, Result};
use crate::rng::{hash_tokens, mix, unit};

/// Number of disjoint error strata. Experts whose seeds differ modulo this
/// value have disjoint error-state sets as long as `1 - p <= 1 / ERROR_SLOTS`.
pub const ERROR_SLOTS: u64 = 4;

const STATE_SALT: u64 = 0x5ee_d0f5_7a7e;
const WRONG_SALT: u64 = 0x0bad_70c3;
const CONF_SALT: u64 = 0xc0f1_de9c;

/// Confidence profile of a noisy expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertShape {
    /// Mass on the correct token at non-error states, drawn per state.
    pub ok_conf: (f64, f64),
    /// Mass on the seeded wrong token at error states, drawn per state.
    pub err_conf: (f64, f64),
    /// Share of the leftover mass given to the correct token at error states.
    pub err_correct_share: f64,
}

impl Default for ExpertShape {
    fn default() -> Self {
        Self {
            ok_conf: (0.80, 0.98),
            err_conf: (0.45, 0.75),
            err_correct_share: 0.6,
        }
    }
}

/// A tabular model that follows the chain-sum rule except on a seeded
/// fraction `1 - p` of states, where its argmax is a seeded wrong digit.
pub fn make_noisy_expert(family: &ChainFamily, p: f64, seed: u64) -> Result<TabularModel> {
    make_noisy_expert_with(family, p, seed, ExpertShape::default())
}

pub fn make_noisy_expert_with(
    family: &ChainFamily,
    p: f64,
    seed: u64,
    shape: ExpertShape,
) -> Result<TabularModel> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::input(format!("per-step accuracy {p} not in (0, 1]")));
    }
    let vocab = family.vocab();
    let n = vocab.size();
    let mut model = TabularModel::new(
        format!("chain{}-p{p}-s{seed}", family.chain_length),
        vocab,
        family.order(),
    );
    let offset = (seed % ERROR_SLOTS) as f64 / ERROR_SLOTS as f64;
    let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
    for (window, correct) in family.states() {
        let u = unit(hash_tokens(STATE_SALT, &window));
        let in_error_set = (u - offset).rem_euclid(1.0) < 1.0 - p;
        let wrong = seeded_wrong(&window, correct, seed);
        let conf_u = unit(hash_tokens(mix(seed, CONF_SALT), &window));
        let (top, top_mass, second, second_mass) = if in_error_set {
            let c = lerp(shape.err_conf, conf_u);
            (wrong, c, correct, (1.0 - c) * shape.err_correct_share)
        } else {
            let c = lerp(shape.ok_conf, conf_u);
            (correct, c, wrong, (1.0 - c) * 0.5)
        };
        let rest = (1.0 - top_mass - second_mass) / (n - 2) as f64;
        let mut row = vec![rest; n];
        row[top as usize] = top_mass;
        row[second as usize] = second_mass;
        model.insert_row(window, row, 1e-9)?;
    }
    Ok(model)
}

fn seeded_wrong(window: &[Token], correct: Token, seed: u64) -> Token {
    let h = hash_tokens(mix(seed, WRONG_SALT), window);
    if correct < 10 {
        // Any other digit.
        ((correct as u64 + 1 + h % 9) % 10) as Token
    } else {
        (h % 10) as Token
    }
}
