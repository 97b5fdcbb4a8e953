// SPDX-License-Identifier: MIT OR Apache-2.0

//! Provenance records and CSV/JSON rendering of analysis results.
//!
//! Every artifact carries the checkpoint hash, seed and configuration it was
//! produced from. Nothing time-dependent is written, so re-running a command
//! reproduces its files byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::patching::{SweepReport, TopKTable};
use crate::trainer::{EpochMetrics, Evaluation, InstancePair};

pub const TOOL_VERSION: &str = concat!("tsmi ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIds {
    pub clean: usize,
    pub corrupt: usize,
    pub true_class: usize,
}

impl From<&InstancePair> for PairIds {
    fn from(p: &InstancePair) -> Self {
        Self {
            clean: p.clean.id,
            corrupt: p.corrupt.id,
            true_class: p.true_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub checkpoint_sha256: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairIds>,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(checkpoint_sha256: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: TOOL_VERSION.to_string(),
            checkpoint_sha256: checkpoint_sha256.into(),
            seed,
            pair: None,
            config,
            params: BTreeMap::new(),
        }
    }

    pub fn with_pair(mut self, pair: PairIds) -> Self {
        self.pair = Some(pair);
        self
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    /// One `# provenance: {json}` comment line for CSV headers.
    pub fn csv_comment(&self) -> String {
        format!(
            "# provenance: {}\n",
            serde_json::to_string(self).expect("provenance serializes")
        )
    }
}

/// `{"provenance": …, "data": …}` as pretty JSON with a trailing newline.
pub fn json_document<T: Serialize>(prov: &Provenance, data: &T) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        provenance: &'a Provenance,
        data: &'a T,
    }
    let mut s = serde_json::to_string_pretty(&Doc { provenance: prov, data })?;
    s.push('\n');
    Ok(s)
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(prov: &Provenance, sweep: &SweepReport) -> String {
    let mut out = prov.csv_comment();
    if let Some(full) = &sweep.full_head {
        writeln!(out, "# full_head_delta_p: {}", full.delta_p).unwrap();
        writeln!(out, "# sum_position_delta_p: {}", sweep.delta_sum()).unwrap();
    }
    out.push_str("granularity,layer,head,t,target,p_orig,p_patched,delta_p,predicted_after\n");
    for r in &sweep.results {
        let tp = r.targets.first();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            sweep.granularity.as_str(),
            tp.map_or(String::new(), |t| t.layer().to_string()),
            opt(tp.and_then(|t| t.head())),
            opt(tp.and_then(|t| t.position())),
            tp.map_or(String::new(), |t| t.label()),
            r.p_orig,
            r.p_patched,
            r.delta_p,
            r.predicted_after
        )
        .unwrap();
    }
    out
}

pub fn topk_csv(prov: &Provenance, table: &TopKTable) -> String {
    let mut out = prov.csv_comment();
    writeln!(out, "# p_orig: {}", table.p_orig).unwrap();
    if table.truncated() {
        writeln!(
            out,
            "# truncated: requested {} patches, {} available",
            table.requested_k,
            table.rows.len()
        )
        .unwrap();
    }
    out.push_str("k,delta_p_cumulative,p_final,added,individual_delta_p\n");
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.k,
            r.delta_p,
            r.p_final,
            r.added.label(),
            r.individual_delta_p
        )
        .unwrap();
    }
    out
}

pub fn metrics_csv(prov: &Provenance, log: &[EpochMetrics]) -> String {
    let mut out = prov.csv_comment();
    out.push_str("epoch,train_loss,test_acc\n");
    for m in log {
        writeln!(out, "{},{},{}", m.epoch, m.train_loss, m.test_acc).unwrap();
    }
    out
}

/// Confusion matrix with rows = true class, columns = predicted class.
pub fn confusion_csv(prov: &Provenance, eval: &Evaluation, class_names: &[String]) -> String {
    let mut out = prov.csv_comment();
    writeln!(out, "# accuracy: {}", eval.accuracy).unwrap();
    out.push_str("true\\pred");
    for n in class_names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (name, row) in class_names.iter().zip(&eval.confusion) {
        out.push_str(name);
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
