//! Plain-text hyperedge dump: one line per edge, in edge-id order,
//! `kind window param member...`. Cluster edges may legitimately have no
//! members, so a line can end right after the param column.

use super::{EdgeKind, MultiScaleHypergraph};
use crate::{Error, Result, Scalar};
use std::fmt::Write as _;

/// Serialize every edge of a graph, one line each, trailing newline.
pub fn dump_hypergraph<T: Scalar>(graph: &MultiScaleHypergraph<T>) -> String {
    let mut out = String::new();
    for edge in &graph.edges {
        write!(out, "{} {} {}", edge.kind.as_str(), edge.window, edge.param).unwrap();
        for &v in &edge.members {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One parsed dump line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeRecord {
    pub kind: EdgeKind,
    pub window: usize,
    pub param: usize,
    pub members: Vec<usize>,
}

/// Parse a dump back into edge records. Blank lines are skipped; anything
/// else malformed is an error naming the offending line.
pub fn parse_dump(text: &str) -> Result<Vec<EdgeRecord>> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split_ascii_whitespace();
        let kind = match fields.next() {
            Some("cluster") => EdgeKind::Cluster,
            Some("dilated") => EdgeKind::Dilated,
            Some(other) => {
                return Err(Error::Parse {
                    what: "hyperedge dump",
                    line,
                    msg: format!("unknown edge kind {other:?}"),
                })
            }
            None => unreachable!("non-empty line has a first field"),
        };
        let need = |name: &str, f: Option<&str>| -> Result<usize> {
            f.ok_or_else(|| Error::Parse {
                what: "hyperedge dump",
                line,
                msg: format!("missing {name} column"),
            })?
            .parse()
            .map_err(|e| Error::Parse {
                what: "hyperedge dump",
                line,
                msg: format!("bad {name}: {e}"),
            })
        };
        let window = need("window", fields.next())?;
        let param = need("param", fields.next())?;
        let members = fields
            .map(|f| {
                f.parse().map_err(|e| Error::Parse {
                    what: "hyperedge dump",
                    line,
                    msg: format!("bad member id: {e}"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        records.push(EdgeRecord { kind, window, param, members });
    }
    Ok(records)
}
