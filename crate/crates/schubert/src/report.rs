//! Emission of per-layer dimension tables and round records: CSV and JSON
//! renderings of the same structure, convertible losslessly in both
//! directions.

use serde::{Deserialize, Serialize};

use crate::cost::{count_flops, count_params, CountFlags, DEFAULT_FLOPS_SEQ_LEN};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::prune::PruneRoundRecord;

/// One round's architecture snapshot plus cost totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRound {
    pub round: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: Vec<usize>,
    pub key_size: Vec<usize>,
    pub value_size: Vec<usize>,
    pub ff_size: Vec<usize>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rounds: Vec<ReportRound>,
}

fn round_from_config(round: usize, config: &ArchConfig, flops_seq_len: usize) -> ReportRound {
    ReportRound {
        round,
        layers: config.layers,
        hidden: config.hidden_size,
        heads: config.heads.clone(),
        key_size: config.key_size.clone(),
        value_size: config.value_size.clone(),
        ff_size: config.ff_size.clone(),
        params: count_params(config, CountFlags::all()).total_params,
        flops: count_flops(config, flops_seq_len),
    }
}

impl ReportTable {
    /// A single-round table (round 0) for a stored configuration.
    pub fn from_config(config: &ArchConfig) -> ReportTable {
        ReportTable {
            rounds: vec![round_from_config(0, config, DEFAULT_FLOPS_SEQ_LEN)],
        }
    }

    /// One row set per pruning round, from the surviving configs.
    pub fn from_records(records: &[PruneRoundRecord]) -> ReportTable {
        ReportTable {
            rounds: records
                .iter()
                .map(|r| round_from_config(r.round, &r.config_after, DEFAULT_FLOPS_SEQ_LEN))
                .collect(),
        }
    }

    /// Table-style CSV: per round, one row per dimension (f, a, k, v) with
    /// one column per layer, then single-value rows for h, layer count and
    /// the cost totals.
    pub fn to_csv(&self) -> String {
        let width = self.rounds.iter().map(|r| r.layers).max().unwrap_or(0);
        let mut out = String::from("round,dimension");
        for i in 1..=width {
            out.push_str(&format!(",layer{i}"));
        }
        out.push('\n');
        let pad = |out: &mut String, used: usize| {
            for _ in used..width {
                out.push(',');
            }
        };
        for r in &self.rounds {
            for (dim, values) in [
                ("f", &r.ff_size),
                ("a", &r.heads),
                ("k", &r.key_size),
                ("v", &r.value_size),
            ] {
                out.push_str(&format!("{},{}", r.round, dim));
                for v in values {
                    out.push_str(&format!(",{v}"));
                }
                pad(&mut out, values.len());
                out.push('\n');
            }
            for (dim, value) in [
                ("h", r.hidden as u64),
                ("ell", r.layers as u64),
                ("params", r.params),
                ("flops", r.flops),
            ] {
                out.push_str(&format!("{},{dim},{value}", r.round));
                pad(&mut out, 1);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ReportTable> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Record {
                line: 1,
                message: "empty report".into(),
            })?;
        if !header.starts_with("round,dimension") {
            return Err(Error::Record {
                line: 1,
                message: format!("unexpected header {header:?}"),
            });
        }

        struct Partial {
            round: usize,
            ff: Option<Vec<usize>>,
            heads: Option<Vec<usize>>,
            keys: Option<Vec<usize>>,
            values: Option<Vec<usize>>,
            hidden: Option<usize>,
            layers: Option<usize>,
            params: Option<u64>,
            flops: Option<u64>,
        }
        let mut partials: Vec<Partial> = Vec::new();

        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() < 3 {
                return Err(Error::Record {
                    line: lineno,
                    message: "row needs round, dimension and a value".into(),
                });
            }
            let round: usize = cells[0].parse().map_err(|_| Error::Record {
                line: lineno,
                message: format!("bad round {:?}", cells[0]),
            })?;
            let nums: Vec<u64> = cells[2..]
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| {
                    c.parse().map_err(|_| Error::Record {
                        line: lineno,
                        message: format!("bad number {c:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if partials.last().map(|p| p.round) != Some(round) {
                partials.push(Partial {
                    round,
                    ff: None,
                    heads: None,
                    keys: None,
                    values: None,
                    hidden: None,
                    layers: None,
                    params: None,
                    flops: None,
                });
            }
            let p = partials.last_mut().unwrap();
            let as_usizes = |nums: &[u64]| nums.iter().map(|&n| n as usize).collect::<Vec<_>>();
            let single = |nums: &[u64]| -> Result<u64> {
                nums.first().copied().ok_or(Error::Record {
                    line: lineno,
                    message: "missing value".into(),
                })
            };
            match cells[1] {
                "f" => p.ff = Some(as_usizes(&nums)),
                "a" => p.heads = Some(as_usizes(&nums)),
                "k" => p.keys = Some(as_usizes(&nums)),
                "v" => p.values = Some(as_usizes(&nums)),
                "h" => p.hidden = Some(single(&nums)? as usize),
                "ell" => p.layers = Some(single(&nums)? as usize),
                "params" => p.params = Some(single(&nums)?),
                "flops" => p.flops = Some(single(&nums)?),
                other => {
                    return Err(Error::Record {
                        line: lineno,
                        message: format!("unknown dimension {other:?}"),
                    })
                }
            }
        }

        let rounds = partials
            .into_iter()
            .map(|p| {
                let missing = |what: &str| Error::Record {
                    line: 0,
                    message: format!("round {} is missing its {what} row", p.round),
                };
                Ok(ReportRound {
                    round: p.round,
                    layers: p.layers.ok_or_else(|| missing("ell"))?,
                    hidden: p.hidden.ok_or_else(|| missing("h"))?,
                    heads: p.heads.ok_or_else(|| missing("a"))?,
                    key_size: p.keys.ok_or_else(|| missing("k"))?,
                    value_size: p.values.ok_or_else(|| missing("v"))?,
                    ff_size: p.ff.ok_or_else(|| missing("f"))?,
                    params: p.params.ok_or_else(|| missing("params"))?,
                    flops: p.flops.ok_or_else(|| missing("flops"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReportTable { rounds })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ReportTable> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Round records as JSON lines, one record per round.
pub fn records_to_jsonl(records: &[PruneRoundRecord]) -> Result<String> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<PruneRoundRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
