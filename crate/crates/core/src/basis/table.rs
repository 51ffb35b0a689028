//! Plain-text tables for externally tabulated rules.
//!
//! ```text
//! TRIQUAD <order> <count> <exactness>
//! u v w          (count lines)
//!
//! TRINODE <order> <count>
//! u v            (count lines)
//! ```

use super::koornwinder::basis_count;
use super::nodes::InterpNodeSet;
use super::rules::{verified_exactness, QuadratureRule};
use super::UVPoint;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Contents of a table file.
#[derive(Debug, Clone)]
pub enum LoadedTable {
    Quadrature(QuadratureRule),
    Nodes(InterpNodeSet),
}

pub fn format_quadrature(rule: &QuadratureRule) -> String {
    let mut s = format!("TRIQUAD {} {} {}\n", rule.order, rule.len(), rule.exactness);
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let _ = writeln!(s, "{:.17e} {:.17e} {:.17e}", x.u, x.v, w);
    }
    s
}

pub fn format_nodes(set: &InterpNodeSet) -> String {
    let mut s = format!("TRINODE {} {}\n", set.order, set.len());
    for x in &set.nodes {
        let _ = writeln!(s, "{:.17e} {:.17e}", x.u, x.v);
    }
    s
}

pub fn save_quadrature(rule: &QuadratureRule, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_quadrature(rule))?;
    Ok(())
}

pub fn save_nodes(set: &InterpNodeSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_nodes(set))?;
    Ok(())
}

pub fn load_quadrature_table(path: impl AsRef<Path>) -> Result<LoadedTable> {
    parse_table(&std::fs::read_to_string(path)?)
}

fn parse_usize(tok: Option<&str>, line: usize, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing {what}"),
    })?
    .parse()
    .map_err(|e| Error::Parse {
        line,
        msg: format!("bad {what}: {e}"),
    })
}

fn parse_row(line: &str, lineno: usize, width: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad number {t:?}: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() != width {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {width} numbers, found {}", vals.len()),
        });
    }
    Ok(vals)
}

pub fn parse_table(text: &str) -> Result<LoadedTable> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty table".into(),
    })?;
    let mut toks = header.split_whitespace();
    let kind = toks.next().unwrap_or_default();
    let order = parse_usize(toks.next(), hline, "order")?;
    let count = parse_usize(toks.next(), hline, "count")?;
    if order == 0 {
        return Err(Error::Validation("order must be positive".into()));
    }
    let rows: Vec<(usize, &str)> = lines.collect();
    if rows.len() != count {
        return Err(Error::Validation(format!(
            "header announces {count} rows but the file has {}",
            rows.len()
        )));
    }
    match kind {
        "TRIQUAD" => {
            let exactness = parse_usize(toks.next(), hline, "exactness")?;
            let mut nodes = Vec::with_capacity(count);
            let mut weights = Vec::with_capacity(count);
            for (ln, l) in rows {
                let r = parse_row(l, ln, 3)?;
                let pt = UVPoint::new(r[0], r[1]);
                super::koornwinder::check_domain(pt).map_err(|e| Error::Parse {
                    line: ln,
                    msg: e.to_string(),
                })?;
                nodes.push(pt);
                weights.push(r[2]);
            }
            let verified = verified_exactness(&nodes, &weights, exactness.max(1));
            if verified < exactness {
                return Err(Error::Validation(format!(
                    "rule claims exactness {exactness} but only integrates degree < {verified}"
                )));
            }
            let positive = weights.iter().all(|&w| w > 0.0);
            if !positive {
                log::warn!("loaded order-{order} rule has non-positive weights");
            }
            Ok(LoadedTable::Quadrature(QuadratureRule {
                order,
                nodes,
                weights,
                exactness: verified,
                positive,
            }))
        }
        "TRINODE" => {
            if count != basis_count(order) {
                return Err(Error::Validation(format!(
                    "order {order} interpolation needs {} nodes, header says {count}",
                    basis_count(order)
                )));
            }
            let nodes = rows
                .into_iter()
                .map(|(ln, l)| parse_row(l, ln, 2).map(|r| UVPoint::new(r[0], r[1])))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedTable::Nodes(InterpNodeSet::from_nodes(order, nodes)?))
        }
        other => Err(Error::Parse {
            line: hline,
            msg: format!("unknown table kind {other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_interp_nodes, build_quadrature, P_MAX};

    #[test]
    fn quadrature_round_trip() {
        let rule = build_quadrature(4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q4.txt");
        save_quadrature(&rule, &path).unwrap();
        match load_quadrature_table(&path).unwrap() {
            LoadedTable::Quadrature(r) => {
                assert_eq!(r.nodes, rule.nodes);
                assert_eq!(r.weights, rule.weights);
                assert!(r.exactness >= 4);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn node_table_round_trip() {
        let set = build_interp_nodes(5, P_MAX).unwrap();
        match parse_table(&format_nodes(&set)).unwrap() {
            LoadedTable::Nodes(s) => {
                assert_eq!(s.nodes, set.nodes);
                assert!((&s.matrix_v - &set.matrix_v).amax() < 1e-12);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn node_count_mismatch_is_validation_error() {
        let text = "TRINODE 3 5\n0.1 0.1\n0.2 0.1\n0.1 0.2\n0.3 0.3\n0.2 0.5\n";
        assert!(matches!(parse_table(text), Err(Error::Validation(_))));
        let text = "TRIQUAD 1 2 1\n0.3 0.3 0.5\n";
        assert!(matches!(parse_table(text), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "TRIQUAD 1 1 1\n\n0.3 abc 0.5\n";
        match parse_table(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overclaimed_exactness_rejected() {
        let text = "TRIQUAD 2 1 3\n0.3333333333333333 0.3333333333333333 0.5\n";
        assert!(matches!(parse_table(text), Err(Error::Validation(_))));
    }

    #[test]
    fn negative_weight_accepted_with_flag() {
        // exact for constants: weights sum to 1/2 with one negative entry
        let text = "TRIQUAD 1 3 1\n0.2 0.2 0.6\n0.5 0.2 -0.2\n0.2 0.5 0.1\n";
        match parse_table(text).unwrap() {
            LoadedTable::Quadrature(r) => {
                assert!(!r.positive);
                assert!(r.exactness >= 1);
            }
            _ => panic!("wrong kind"),
        }
    }
}
