//! Coverage comparison across campaign configurations.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ucode::UcodeAddress;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMatrices {
    /// Configuration names, sorted.
    pub names: Vec<String>,
    /// `overlap[i][j]` = addresses found by both i and j.
    pub overlap: Vec<Vec<usize>>,
    /// `uniqueness[i][j]` = addresses found by i but not by j.
    pub uniqueness: Vec<Vec<usize>>,
    /// Addresses found by i and by no other configuration.
    pub exclusive: Vec<usize>,
    /// Size of the union over all configurations.
    pub total_unique: usize,
}

/// Builds the matrices; coverage sets of configurations sharing a name are
/// merged first.
pub fn build_matrices<'a>(configs: impl IntoIterator<Item = (&'a str, &'a BTreeSet<UcodeAddress>)>) -> ReportMatrices {
    let mut merged: BTreeMap<String, BTreeSet<UcodeAddress>> = BTreeMap::new();
    for (name, set) in configs {
        merged.entry(String::from(name)).or_default().extend(set.iter().copied());
    }
    let names: Vec<String> = merged.keys().cloned().collect();
    let sets: Vec<&BTreeSet<UcodeAddress>> = merged.values().collect();
    let n = sets.len();
    let overlap = (0..n).map(|i| (0..n).map(|j| sets[i].intersection(sets[j]).count()).collect()).collect();
    let uniqueness = (0..n).map(|i| (0..n).map(|j| sets[i].difference(sets[j]).count()).collect()).collect();
    let exclusive = (0..n)
        .map(|i| sets[i].iter().filter(|a| !(0..n).any(|j| j != i && sets[j].contains(a))).count())
        .collect();
    let total_unique = sets.iter().flat_map(|s| s.iter()).collect::<BTreeSet<_>>().len();
    ReportMatrices { names, overlap, uniqueness, exclusive, total_unique }
}

impl ReportMatrices {
    fn table(&self, title: &str, rows: &[Vec<usize>]) -> String {
        let w = self.names.iter().map(|s| s.len()).chain(rows.iter().flatten().map(|v| format!("{v}").len())).max().unwrap_or(1);
        let mut out = format!("{title}\n{:w$}", "");
        for n in &self.names {
            out.push_str(&format!("  {n:>w$}"));
        }
        out.push('\n');
        for (n, row) in self.names.iter().zip(rows) {
            out.push_str(&format!("{n:>w$}"));
            for v in row {
                out.push_str(&format!("  {v:>w$}"));
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text rendering of all three matrices.
    pub fn to_text(&self) -> String {
        let excl: Vec<Vec<usize>> = self.exclusive.iter().map(|v| alloc::vec![*v]).collect();
        let mut out = self.table("overlap", &self.overlap);
        out.push('\n');
        out.push_str(&self.table("uniqueness (row not in column)", &self.uniqueness));
        out.push_str("\nexclusive\n");
        let w = self.names.iter().map(|s| s.len()).max().unwrap_or(1);
        for (n, v) in self.names.iter().zip(&excl) {
            out.push_str(&format!("{n:>w$}  {}\n", v[0]));
        }
        out.push_str(&format!("\ntotal unique addresses: {}\n", self.total_unique));
        out
    }

    /// CSV with one block per matrix; columns in name order.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (kind, rows) in [("overlap", &self.overlap), ("uniqueness", &self.uniqueness)] {
            out.push_str(&format!("matrix,config,{}\n", self.names.join(",")));
            for (n, row) in self.names.iter().zip(rows.iter()) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&format!("{kind},{n},{}\n", cells.join(",")));
            }
        }
        out.push_str("matrix,config,count\n");
        for (n, v) in self.names.iter().zip(&self.exclusive) {
            out.push_str(&format!("exclusive,{n},{v}\n"));
        }
        out
    }
}
