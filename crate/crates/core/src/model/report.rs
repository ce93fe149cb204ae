use std::fmt;

use serde::Serialize;

use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportLine {
    pub component: String,
    pub scalars: usize,
}

/// Trainable scalar counts itemized by component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub lines: Vec<ReportLine>,
    pub total: usize,
}

impl ParamReport {
    /// One line per prefix, counting parameters named `prefix` or
    /// `prefix.*`. Parameters matching no prefix go to an `other` line.
    pub fn from_prefixes(store: &ParamStore, prefixes: &[&str]) -> Self {
        let mut counts = vec![0usize; prefixes.len()];
        let mut other = 0;
        for (name, t) in store.iter() {
            let hit = prefixes
                .iter()
                .position(|p| name == *p || name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')));
            match hit {
                Some(i) => counts[i] += t.len(),
                None => other += t.len(),
            }
        }
        let mut lines: Vec<ReportLine> = prefixes
            .iter()
            .zip(counts)
            .map(|(p, scalars)| ReportLine {
                component: p.to_string(),
                scalars,
            })
            .collect();
        if other > 0 {
            lines.push(ReportLine {
                component: "other".into(),
                scalars: other,
            });
        }
        ParamReport {
            lines,
            total: store.num_scalars(),
        }
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.lines.iter().map(|l| l.component.len()).max().unwrap_or(5).max(5);
        for l in &self.lines {
            writeln!(f, "{:<width$}  {:>10}", l.component, l.scalars)?;
        }
        write!(f, "{:<width$}  {:>10}", "total", self.total)
    }
}
