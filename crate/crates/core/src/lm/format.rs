//! Line-oriented model files.
//!
//! ```text
//! vocab=13 order=5 sep=10 eos=11 answer=12 id=target
//! default p=0.0769,...
//! ctx=1,2,3,4,10 p=0.01,...
//! ```
//!
//! `sep`, `eos`, `answer`, `id` and the `default` line are optional.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{TabularModel, Token, Vocabulary};
use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-6;

pub fn write_model(path: &Path, model: &TabularModel) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let v = model.vocab();
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "vocab={} order={} sep={} eos={} answer={} id={}",
        v.size(),
        model.order(),
        v.sep(),
        v.eos(),
        v.answer(),
        model.id()
    )
    .map_err(io)?;
    writeln!(w, "default p={}", join(model.default_row())).map_err(io)?;
    let mut rows: Vec<_> = model.rows().collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    for (ctx, p) in rows {
        let ctx: Vec<String> = ctx.iter().map(Token::to_string).collect();
        writeln!(w, "ctx={} p={}", ctx.join(","), join(p)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn join(p: &[f64]) -> String {
    p.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn read_model(path: &Path) -> Result<TabularModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty model file".into()))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let mut size = None;
    let mut order = None;
    let (mut sep, mut eos, mut answer) = (None, None, None);
    let mut id = String::from("model");
    for kv in header.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| perr(1, format!("malformed header field `{kv}`")))?;
        let num = || {
            v.parse::<usize>()
                .map_err(|_| perr(1, format!("bad value for `{k}`: `{v}`")))
        };
        match k {
            "vocab" => size = Some(num()?),
            "order" => order = Some(num()?),
            "sep" => sep = Some(num()? as Token),
            "eos" => eos = Some(num()? as Token),
            "answer" => answer = Some(num()? as Token),
            "id" => id = v.to_string(),
            _ => return Err(perr(1, format!("unknown header field `{k}`"))),
        }
    }
    let size = size.ok_or_else(|| perr(1, "header lacks vocab=".into()))?;
    let order = order.ok_or_else(|| perr(1, "header lacks order=".into()))?;
    let (dsep, deos, dans) = if size == Vocabulary::chain().size() {
        let c = Vocabulary::chain();
        (c.sep(), c.eos(), c.answer())
    } else {
        (size as Token - 3, size as Token - 2, size as Token - 1)
    };
    let vocab = Vocabulary::new(
        size,
        sep.unwrap_or(dsep),
        eos.unwrap_or(deos),
        answer.unwrap_or(dans),
    )
    .map_err(|e| perr(1, e.to_string()))?;
    let mut model = TabularModel::new(id, vocab, order);

    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (head, probs) = line
            .split_once(" p=")
            .ok_or_else(|| perr(lineno, "row lacks ` p=`".into()))?;
        let probs: Vec<f64> = probs
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(lineno, format!("bad probability: {e}")))?;
        if head == "default" {
            model
                .set_default_row(probs, SUM_TOL)
                .map_err(|e| perr(lineno, e.to_string()))?;
            continue;
        }
        let ctx = head
            .strip_prefix("ctx=")
            .ok_or_else(|| perr(lineno, "row lacks `ctx=`".into()))?;
        let ctx: Vec<Token> = if ctx.is_empty() {
            Vec::new()
        } else {
            ctx.split(',')
                .map(|s| s.trim().parse::<Token>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(lineno, format!("bad context token: {e}")))?
        };
        model
            .insert_row(ctx, probs, SUM_TOL)
            .map_err(|e| perr(lineno, e.to_string()))?;
    }
    Ok(model)
}
