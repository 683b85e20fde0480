//! Plain-text formats.
//!
//! All formats are comma-separated records; blank lines and lines starting
//! with `#` are ignored. Floats are written in shortest round-trip form, so a
//! write followed by a read reproduces every value bit for bit.
//!
//! MDP files:
//!
//! ```text
//! mdp,<num_states>,<num_actions>,<gamma>
//! initial,<state>,<prob>
//! terminal,<state>
//! transition,<state>,<action>,<next>,<prob>,<reward>
//! ```
//!
//! Rows of terminal states are left out and filled in as absorbing loops.
//!
//! Table files start with `table,policy,<S>,<A>`, `table,q,<S>,<A>` or
//! `table,v,<S>`, followed by one `<state>,<action>,<value>` record per pair
//! (or `<state>,<value>` for state values). Every entry must appear once.

use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, Trim};

use crate::error::{Error, Result};
use crate::learners::MetricsRow;
use crate::mdp::{FiniteMdp, Outcome};
use crate::prefix_tree::Token;
use crate::tables::{PolicyTable, QTable, VTable};

fn records<R: Read>(input: R) -> impl Iterator<Item = Result<(usize, StringRecord)>> {
    let reader = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(Trim::All)
        .from_reader(input);
    reader.into_records().map(|r| {
        r.map(|rec| {
            let line = rec.position().map_or(0, |p| p.line() as usize);
            (line, rec)
        })
        .map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })
    })
}

fn field<T: std::str::FromStr>(rec: &StringRecord, i: usize, line: usize, what: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing {what}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what}: {raw:?}"),
    })
}

fn expect_len(rec: &StringRecord, n: usize, line: usize) -> Result<()> {
    if rec.len() != n {
        return Err(Error::Parse {
            line,
            msg: format!("expected {n} fields, got {}", rec.len()),
        });
    }
    Ok(())
}

fn in_range(v: usize, bound: usize, line: usize, what: &str) -> Result<usize> {
    if v >= bound {
        return Err(Error::Parse {
            line,
            msg: format!("{what} {v} out of range (< {bound})"),
        });
    }
    Ok(v)
}

/// Upper bound on declared sizes, to keep malformed headers from allocating
/// unbounded memory.
pub const MAX_DECLARED_ENTRIES: usize = 10_000_000;

fn check_declared(ns: usize, na: usize, line: usize) -> Result<()> {
    if ns == 0 || na == 0 || ns.saturating_mul(na) > MAX_DECLARED_ENTRIES {
        return Err(Error::Parse {
            line,
            msg: format!("unsupported table size {ns} x {na}"),
        });
    }
    Ok(())
}

pub fn parse_mdp<R: Read>(input: R) -> Result<FiniteMdp> {
    let mut header: Option<(usize, usize, f64)> = None;
    let mut initial = Vec::new();
    let mut terminal = Vec::new();
    let mut outcomes: Vec<Vec<Outcome>> = Vec::new();
    for item in records(input) {
        let (line, rec) = item?;
        let kind = rec.get(0).unwrap_or("");
        if kind.is_empty() && rec.len() <= 1 {
            continue;
        }
        if kind == "mdp" {
            if header.is_some() {
                return Err(Error::Parse {
                    line,
                    msg: "duplicate mdp header".into(),
                });
            }
            expect_len(&rec, 4, line)?;
            let ns: usize = field(&rec, 1, line, "state count")?;
            let na: usize = field(&rec, 2, line, "action count")?;
            let gamma: f64 = field(&rec, 3, line, "gamma")?;
            check_declared(ns, na, line)?;
            header = Some((ns, na, gamma));
            initial = vec![0.0; ns];
            terminal = vec![false; ns];
            outcomes = vec![Vec::new(); ns * na];
            continue;
        }
        let Some((ns, na, _)) = header else {
            return Err(Error::Parse {
                line,
                msg: "records before the mdp header".into(),
            });
        };
        match kind {
            "initial" => {
                expect_len(&rec, 3, line)?;
                let s = in_range(field(&rec, 1, line, "state")?, ns, line, "state")?;
                initial[s] += field::<f64>(&rec, 2, line, "probability")?;
            }
            "terminal" => {
                expect_len(&rec, 2, line)?;
                let s = in_range(field(&rec, 1, line, "state")?, ns, line, "state")?;
                terminal[s] = true;
            }
            "transition" => {
                expect_len(&rec, 6, line)?;
                let s = in_range(field(&rec, 1, line, "state")?, ns, line, "state")?;
                let a = in_range(field(&rec, 2, line, "action")?, na, line, "action")?;
                let next = in_range(field(&rec, 3, line, "next state")?, ns, line, "next state")?;
                let prob: f64 = field(&rec, 4, line, "probability")?;
                let reward: f64 = field(&rec, 5, line, "reward")?;
                outcomes[s * na + a].push(Outcome { next, prob, reward });
            }
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown record kind {other:?}"),
                })
            }
        }
    }
    let (ns, na, gamma) = header.ok_or(Error::Parse {
        line: 0,
        msg: "missing mdp header".into(),
    })?;
    FiniteMdp::new(ns, na, outcomes, terminal, gamma, initial)
}

pub fn write_mdp<W: Write>(mdp: &FiniteMdp, mut out: W) -> Result<()> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    writeln!(out, "mdp,{ns},{na},{}", mdp.gamma())?;
    for (s, p) in mdp.initial_distribution().iter().enumerate() {
        if *p != 0.0 {
            writeln!(out, "initial,{s},{p}")?;
        }
    }
    for s in 0..ns {
        if mdp.is_terminal(s) {
            writeln!(out, "terminal,{s}")?;
        }
    }
    for s in mdp.non_terminal_states() {
        for a in 0..na {
            for o in mdp.outcomes(s, a) {
                writeln!(out, "transition,{s},{a},{},{},{}", o.next, o.prob, o.reward)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Any of the three table kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Policy(PolicyTable),
    Q(QTable),
    V(VTable),
}

pub fn write_policy<W: Write>(p: &PolicyTable, mut out: W) -> Result<()> {
    writeln!(out, "table,policy,{},{}", p.num_states(), p.num_actions())?;
    for s in 0..p.num_states() {
        for a in 0..p.num_actions() {
            writeln!(out, "{s},{a},{}", p.prob(s, a))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_q<W: Write>(q: &QTable, mut out: W) -> Result<()> {
    writeln!(out, "table,q,{},{}", q.num_states(), q.num_actions())?;
    for s in 0..q.num_states() {
        for a in 0..q.num_actions() {
            writeln!(out, "{s},{a},{}", q.get(s, a))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_v<W: Write>(v: &VTable, mut out: W) -> Result<()> {
    writeln!(out, "table,v,{}", v.len())?;
    for (s, x) in v.values().iter().enumerate() {
        writeln!(out, "{s},{x}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_table<R: Read>(input: R) -> Result<Table> {
    let mut iter = records(input);
    let (line, head) = loop {
        match iter.next() {
            Some(item) => {
                let (line, rec) = item?;
                if rec.len() == 1 && rec.get(0) == Some("") {
                    continue;
                }
                break (line, rec);
            }
            None => {
                return Err(Error::Parse {
                    line: 0,
                    msg: "empty table file".into(),
                })
            }
        }
    };
    if head.get(0) != Some("table") {
        return Err(Error::Parse {
            line,
            msg: "expected a table header".into(),
        });
    }
    let kind = head.get(1).unwrap_or("").to_string();
    let (ns, na) = match kind.as_str() {
        "policy" | "q" => {
            expect_len(&head, 4, line)?;
            (
                field::<usize>(&head, 2, line, "state count")?,
                field::<usize>(&head, 3, line, "action count")?,
            )
        }
        "v" => {
            expect_len(&head, 3, line)?;
            (field::<usize>(&head, 2, line, "state count")?, 1)
        }
        other => {
            return Err(Error::Parse {
                line,
                msg: format!("unknown table kind {other:?}"),
            })
        }
    };
    check_declared(ns, na, line)?;
    let per_state = kind != "v";
    let mut values = vec![f64::NAN; ns * na];
    let mut seen = vec![false; ns * na];
    for item in iter {
        let (line, rec) = item?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        let (idx, value) = if per_state {
            expect_len(&rec, 3, line)?;
            let s = in_range(field(&rec, 0, line, "state")?, ns, line, "state")?;
            let a = in_range(field(&rec, 1, line, "action")?, na, line, "action")?;
            (s * na + a, field::<f64>(&rec, 2, line, "value")?)
        } else {
            expect_len(&rec, 2, line)?;
            let s = in_range(field(&rec, 0, line, "state")?, ns, line, "state")?;
            (s, field::<f64>(&rec, 1, line, "value")?)
        };
        if seen[idx] {
            return Err(Error::Parse {
                line,
                msg: "duplicate entry".into(),
            });
        }
        seen[idx] = true;
        values[idx] = value;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("missing entry {i}"),
        });
    }
    match kind.as_str() {
        "policy" => Ok(Table::Policy(PolicyTable::from_probs(ns, na, values)?)),
        "q" => Ok(Table::Q(QTable::from_values(ns, na, values)?)),
        _ => Ok(Table::V(VTable::from_values(values)?)),
    }
}

pub fn parse_policy<R: Read>(input: R) -> Result<PolicyTable> {
    match parse_table(input)? {
        Table::Policy(p) => Ok(p),
        _ => Err(Error::Parse {
            line: 1,
            msg: "expected a policy table".into(),
        }),
    }
}

/// Parses one line of tokens: whitespace-separated integer ids, or single
/// characters where `A`, `B`, … are tokens 0, 1, … and `$` is EOS.
pub fn parse_token_line(line: &str, alphabet_size: usize) -> Result<Vec<Token>> {
    if alphabet_size < 2 {
        return Err(Error::InvalidArgument("alphabet needs at least two tokens".into()));
    }
    let eos = (alphabet_size - 1) as Token;
    let words: Vec<&str> = line.split_whitespace().collect();
    let numeric = !words.is_empty() && words.iter().all(|w| w.bytes().all(|b| b.is_ascii_digit()));
    let tokens: Vec<Token> = if numeric {
        words
            .iter()
            .map(|w| {
                w.parse::<Token>().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad token id {w:?}"),
                })
            })
            .collect::<Result<_>>()?
    } else {
        line.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '$' => Ok(eos),
                'A'..='Z' => Ok(c as Token - 'A' as Token),
                _ => Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected token character {c:?}"),
                }),
            })
            .collect::<Result<_>>()?
    };
    if let Some(t) = tokens.iter().find(|&&t| t > eos) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("token {t} outside an alphabet of {alphabet_size}"),
        });
    }
    Ok(tokens)
}

/// One sequence per non-blank line; `#` starts a comment line.
pub fn parse_corpus(text: &str, alphabet_size: usize) -> Result<Vec<Vec<Token>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_token_line(trimmed, alphabet_size).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { line: i + 1, msg },
            other => other,
        })?);
    }
    Ok(out)
}

/// Renders tokens as letters with `$` for EOS, or as space-separated ids
/// when the alphabet has no letter form.
pub fn format_tokens(tokens: &[Token], alphabet_size: usize) -> String {
    let eos = alphabet_size.saturating_sub(1) as Token;
    if !(2..=27).contains(&alphabet_size) || tokens.iter().any(|&t| t > eos) {
        return tokens.iter().map(Token::to_string).collect::<Vec<_>>().join(" ");
    }
    tokens
        .iter()
        .map(|&t| if t == eos { '$' } else { (b'A' + t as u8) as char })
        .collect()
}

pub const METRICS_HEADER: [&str; 7] = [
    "batch",
    "episodes",
    "mean_score",
    "mean_kl",
    "rlhf_reward",
    "loss",
    "lr",
];

/// Append-only `metrics.csv` writer, flushed after every row.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRICS_HEADER).map_err(|e| Error::Io(e.into()))?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner
            .write_record([
                row.batch.to_string(),
                row.episodes.to_string(),
                row.mean_score.to_string(),
                row.mean_kl.to_string(),
                row.rlhf_reward.to_string(),
                row.loss.to_string(),
                row.lr.to_string(),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        self.inner.flush()?;
        Ok(())
    }
}
