//! Published result tables bundled as read-only data, for side-by-side display.

use serde::{Deserialize, Serialize};

use super::{EvalTable, ModelScores};
use crate::error::{Error, Result};

const MANIFEST: &str = include_str!("../../reference/manifest.json");

const FILES: &[(&str, &str)] = &[
    ("table2.tsv", include_str!("../../reference/table2.tsv")),
    ("table4.tsv", include_str!("../../reference/table4.tsv")),
    ("table5.tsv", include_str!("../../reference/table5.tsv")),
    ("table6.tsv", include_str!("../../reference/table6.tsv")),
    ("table7.tsv", include_str!("../../reference/table7.tsv")),
    ("table11.tsv", include_str!("../../reference/table11.tsv")),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub id: String,
    /// Number of the published table.
    pub table: u32,
    pub file: String,
    /// `perplexity`, `human_eval`, `observed_pairs` or `inference_speed`.
    pub kind: String,
    pub description: String,
}

/// Cells are kept exactly as printed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTable {
    #[serde(flatten)]
    pub entry: ReferenceEntry,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn reference_manifest() -> Vec<ReferenceEntry> {
    serde_json::from_str(MANIFEST).expect("bundled manifest parses")
}

/// Looks a table up by id (`table4`) or number (`4`).
pub fn reference_table(key: &str) -> Option<ReferenceTable> {
    let entry = reference_manifest()
        .into_iter()
        .find(|e| e.id == key || e.table.to_string() == key)?;
    let (_, text) = FILES.iter().find(|(f, _)| *f == entry.file)?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let columns = lines.next()?.split('\t').map(str::to_string).collect();
    let rows = lines.map(|l| l.split('\t').map(str::to_string).collect()).collect();
    Some(ReferenceTable { entry, columns, rows })
}

impl ReferenceTable {
    pub fn row(&self, label: &str) -> Option<&[String]> {
        self.rows.iter().find(|r| r[0] == label).map(Vec::as_slice)
    }

    pub fn cell(&self, label: &str, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|h| h == column)?;
        self.row(label)?.get(c).map(String::as_str)
    }

    pub fn value(&self, label: &str, column: &str) -> Option<f64> {
        self.cell(label, column)?.parse().ok()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.columns.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }

    /// Human-evaluation tables as an [`EvalTable`] (no provenance).
    pub fn to_eval_table(&self) -> Result<EvalTable> {
        if self.entry.kind != "human_eval" {
            return Err(Error::InvalidInput(format!("{} is not a human-evaluation table", self.entry.id)));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let v = |k: usize| {
                    r[k].parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("{}: bad cell {:?}", self.entry.id, r[k])))
                };
                Ok(ModelScores {
                    model: r[0].clone(),
                    grammar: v(1)?,
                    coherence: v(2)?,
                    creativity: v(3)?,
                    factuality: v(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvalTable {
            rows,
            provenance: Default::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_manifest_entry_loads() {
        for e in reference_manifest() {
            let t = reference_table(&e.id).unwrap();
            assert!(!t.rows.is_empty());
            assert!(t.rows.iter().all(|r| r.len() == t.columns.len()), "{}", e.id);
            assert_eq!(reference_table(&e.table.to_string()).unwrap(), t);
        }
        assert!(reference_table("table3").is_none());
    }

    #[test]
    fn known_rows() {
        assert_eq!(reference_table("2").unwrap().value("Paramanu-Sanskrit 139.33M", "perplexity"), Some(1.74891));
        assert_eq!(reference_table("11").unwrap().cell("Paramanu-Assamese", "tokens_per_second_fp32"), Some("80.4732"));
        let t4 = reference_table("table4").unwrap();
        assert_eq!(t4.value("Paramanu-Bangla 108.5M", "grammar"), Some(4.66666));
        assert_eq!(reference_table("5").unwrap().rows[2][1], "4");
    }
}
