use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Token, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{mix, stream};

/// One chain-sum problem.
///
/// The prompt is `d_1 .. d_n SEP`; the canonical completion is the running
/// sums mod 10, the answer delimiter, the final sum, and `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub seed: u64,
    #[serde(default)]
    pub max_len: usize,
}

impl TaskInstance {
    pub fn id(&self) -> u64 {
        self.seed
    }

    pub fn chain_length(&self) -> usize {
        self.prompt.len().saturating_sub(1)
    }
}

/// The chain-sum family for a fixed chain length `n`.
///
/// A window of the last `n + 1` tokens is enough to apply the task rule at
/// every step: the next running sum needs the digit `n + 1` positions back and
/// the previous sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFamily {
    pub chain_length: usize,
}

impl ChainFamily {
    pub fn new(chain_length: usize) -> Self {
        assert!(chain_length >= 1, "chain length must be at least 1");
        Self { chain_length }
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::chain()
    }

    pub fn order(&self) -> usize {
        self.chain_length + 1
    }

    /// The task-correct next token for a full-order window, relative to the
    /// window itself (an earlier mistake is carried forward, not repaired).
    pub fn correct_next(&self, w: &[Token]) -> Option<Token> {
        let n = self.chain_length;
        let v = self.vocab();
        if w.len() != n + 1 {
            return None;
        }
        let digit = |t: Token| t < 10;
        if let Some(t) = w.iter().position(|&x| x == v.sep()) {
            if !w[..t].iter().copied().all(digit) || !w[t + 1..].iter().copied().all(digit) {
                return None;
            }
            return Some(if t == 0 {
                v.answer()
            } else if t == n {
                w[0]
            } else {
                (w[0] + w[n]) % 10
            });
        }
        if w[n] == v.answer() && w[..n].iter().copied().all(digit) {
            return Some(w[n - 1]);
        }
        if n >= 1
            && w[n - 1] == v.answer()
            && w[..n - 1].iter().copied().all(digit)
            && digit(w[n])
        {
            return Some(v.eos());
        }
        None
    }

    /// Every window the task rule is defined on, with its correct token.
    /// There are `(n + 3) * 10^n` of them.
    pub fn states(&self) -> Vec<(Vec<Token>, Token)> {
        let n = self.chain_length;
        let v = self.vocab();
        let total = 10usize.pow(n as u32);
        let digits_of = |mut code: usize, len: usize| -> Vec<Token> {
            let mut d = vec![0; len];
            for slot in d.iter_mut().rev() {
                *slot = (code % 10) as Token;
                code /= 10;
            }
            d
        };
        let mut out = Vec::with_capacity((n + 3) * total);
        for sep_at in (0..=n).rev() {
            for code in 0..total {
                let d = digits_of(code, n);
                let mut w = Vec::with_capacity(n + 1);
                w.extend_from_slice(&d[..sep_at]);
                w.push(v.sep());
                w.extend_from_slice(&d[sep_at..]);
                let c = self.correct_next(&w).expect("enumerated window is valid");
                out.push((w, c));
            }
        }
        for code in 0..total {
            let d = digits_of(code, n);
            let mut w = d.clone();
            w.push(v.answer());
            let c = self.correct_next(&w).expect("answer window is valid");
            out.push((w, c));
            let mut w = Vec::with_capacity(n + 1);
            w.extend_from_slice(&d[..n - 1]);
            w.push(v.answer());
            w.push(d[n - 1]);
            let c = self.correct_next(&w).expect("eos window is valid");
            out.push((w, c));
        }
        out
    }
}

pub fn make_chain_task(seed: u64, chain_length: usize) -> TaskInstance {
    assert!(chain_length >= 1, "chain length must be at least 1");
    let v = Vocabulary::chain();
    let mut rng = stream(mix(seed, chain_length as u64));
    let digits: Vec<Token> = (0..chain_length).map(|_| rng.random_range(0..10)).collect();
    let mut prompt = digits.clone();
    prompt.push(v.sep());
    let mut answer = Vec::with_capacity(chain_length + 3);
    let mut acc = 0;
    for d in digits {
        acc = (acc + d) % 10;
        answer.push(acc);
    }
    answer.extend([v.answer(), acc, v.eos()]);
    let max_len = 2 * answer.len();
    TaskInstance { prompt, answer, seed, max_len }
}

/// `n` tasks whose seeds are derived from `seed` and the instance index.
pub fn make_suite(seed: u64, n: usize, chain_length: usize) -> Vec<TaskInstance> {
    (0..n as u64)
        .map(|i| make_chain_task(mix(seed, i), chain_length))
        .collect()
}

fn answer_region<'a>(seq: &'a [Token], v: &Vocabulary) -> Option<&'a [Token]> {
    let a = seq.iter().position(|&t| t == v.answer())?;
    let e = a + 1 + seq[a + 1..].iter().position(|&t| t == v.eos())?;
    Some(&seq[a + 1..e])
}

/// Exact final-answer correctness. Outputs without a delimited, terminated
/// answer region (including truncated ones) score 0.
pub fn score(task: &TaskInstance, output: &[Token]) -> u8 {
    let v = Vocabulary::chain();
    match (answer_region(output, &v), answer_region(&task.answer, &v)) {
        (Some(got), Some(want)) if got == want => 1,
        _ => 0,
    }
}

pub fn write_suite(path: &Path, suite: &[TaskInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in suite {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_suite(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut t: TaskInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if t.prompt.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty prompt".into(),
            });
        }
        if t.max_len == 0 {
            t.max_len = 2 * t.answer.len();
        }
        out.push(t);
    }
    Ok(out)
}
