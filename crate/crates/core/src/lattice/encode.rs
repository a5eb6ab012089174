//! Run-length-encoded JSON documents and plotting CSV for grid sets.
//!
//! `runs` alternates absent/present run lengths over the flat bit array,
//! always starting with an absent run (which may be zero).

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::sets::{QSet, SSet};
use crate::error::{Error, Result};

pub const SET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Qset,
    Sset,
}

/// Optional metadata header carried by exported sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetDocument {
    pub schema_version: u32,
    pub kind: SetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SetMeta>,
    pub grid: GridSpec,
    pub len: usize,
    pub count: usize,
    pub runs: Vec<usize>,
}

fn encode_runs(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut length = 0;
    for &b in bits {
        if b == current {
            length += 1;
        } else {
            runs.push(length);
            current = b;
            length = 1;
        }
    }
    if length > 0 || runs.is_empty() {
        runs.push(length);
    }
    runs
}

fn decode_runs(runs: &[usize], len: usize) -> Result<Vec<bool>> {
    let total: usize = runs.iter().sum();
    if total != len {
        return Err(Error::Config(format!("run lengths sum to {total}, expected {len}")));
    }
    let mut bits = Vec::with_capacity(len);
    for (k, &r) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(k % 2 == 1, r));
    }
    Ok(bits)
}

fn document(kind: SetKind, grid: &GridSpec, bits: &[bool], meta: Option<SetMeta>) -> SetDocument {
    SetDocument {
        schema_version: SET_SCHEMA_VERSION,
        kind,
        meta,
        grid: grid.clone(),
        len: bits.len(),
        count: bits.iter().filter(|&&b| b).count(),
        runs: encode_runs(bits),
    }
}

fn parse(text: &str, kind: SetKind) -> Result<(SetDocument, Vec<bool>)> {
    let doc: SetDocument = serde_json::from_str(text).map_err(|e| Error::Config(format!("set document: {e}")))?;
    if doc.schema_version != SET_SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported set schema_version {}", doc.schema_version)));
    }
    if doc.kind != kind {
        return Err(Error::Config(format!("expected a {kind:?} document, found {:?}", doc.kind)));
    }
    doc.grid.validate()?;
    let bits = decode_runs(&doc.runs, doc.len)?;
    if bits.iter().filter(|&&b| b).count() != doc.count {
        return Err(Error::Config("set count does not match its runs".into()));
    }
    Ok((doc, bits))
}

pub fn qset_to_json(q: &QSet, meta: Option<SetMeta>) -> String {
    serde_json::to_string_pretty(&document(SetKind::Qset, q.grid(), q.bits(), meta)).expect("set documents serialize")
}

pub fn sset_to_json(s: &SSet, meta: Option<SetMeta>) -> String {
    serde_json::to_string_pretty(&document(SetKind::Sset, s.grid(), s.bits(), meta)).expect("set documents serialize")
}

pub fn qset_from_json(text: &str) -> Result<(QSet, Option<SetMeta>)> {
    let (doc, bits) = parse(text, SetKind::Qset)?;
    Ok((QSet::from_bits(Arc::new(doc.grid), bits)?, doc.meta))
}

pub fn sset_from_json(text: &str) -> Result<(SSet, Option<SetMeta>)> {
    let (doc, bits) = parse(text, SetKind::Sset)?;
    Ok((SSet::from_bits(Arc::new(doc.grid), bits)?, doc.meta))
}

fn header(prefix: &str, dims: usize, out: &mut Vec<String>) {
    out.extend((0..dims).map(|d| format!("{prefix}_{d}")));
}

/// One row per member: state coordinates followed by action coordinates.
pub fn qset_csv(q: &QSet) -> String {
    let g = q.grid();
    let mut cols = Vec::new();
    header("state", g.state_dim(), &mut cols);
    header("action", g.action_dim(), &mut cols);
    let mut out = cols.join(",");
    out.push('\n');
    for (i, j) in q.members() {
        let row: Vec<String> = g.state_point(i).iter().chain(&g.action_point(j)).map(f64::to_string).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn sset_csv(s: &SSet) -> String {
    let g = s.grid();
    let mut cols = Vec::new();
    header("state", g.state_dim(), &mut cols);
    let mut out = cols.join(",");
    out.push('\n');
    for i in s.members() {
        let row: Vec<String> = g.state_point(i).iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
