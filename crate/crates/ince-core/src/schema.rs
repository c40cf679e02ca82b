//! Column typing for tabular datasets and the flat-text schema file format.
//!
//! A schema file looks like:
//!
//! ```text
//! # lines starting with # are comments
//! task: binary
//! column: age numerical
//! column: sex categorical
//! column: survived target
//! ```
//!
//! `parse` and `to_file_string` round-trip.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numerical,
    Categorical,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "classes")]
pub enum TaskKind {
    Binary,
    Multiclass(u32),
    Regression,
}

impl TaskKind {
    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::Regression)
    }

    pub fn n_classes(&self) -> Option<u32> {
        match self {
            TaskKind::Binary => Some(2),
            TaskKind::Multiclass(c) => Some(*c),
            TaskKind::Regression => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Ordered column declarations plus the supervised task kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub columns: Vec<ColumnSpec>,
    pub task: TaskKind,
}

impl TabularSchema {
    pub fn new(columns: Vec<ColumnSpec>, task: TaskKind) -> Result<Self> {
        let schema = TabularSchema { columns, task };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self.columns.iter().filter(|c| c.kind == ColumnKind::Target).count();
        if targets != 1 {
            return Err(Error::schema(format!("exactly one target column required, found {}", targets)));
        }
        if self.feature_count() == 0 {
            return Err(Error::schema("at least one feature column required"));
        }
        let mut names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::schema("duplicate column names"));
        }
        if let TaskKind::Multiclass(c) = self.task {
            if c < 2 {
                return Err(Error::schema("multiclass task needs >= 2 classes"));
            }
        }
        Ok(())
    }

    pub fn target_name(&self) -> &str {
        &self
            .columns
            .iter()
            .find(|c| c.kind == ColumnKind::Target)
            .expect("validated schema has a target")
            .name
    }

    /// Feature names in schema order: numericals first, then categoricals.
    pub fn feature_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.numerical_names();
        out.extend(self.categorical_names());
        out
    }

    pub fn numerical_names(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Numerical)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn categorical_names(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Categorical)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn n_numerical(&self) -> usize {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Numerical).count()
    }

    pub fn n_categorical(&self) -> usize {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Categorical).count()
    }

    pub fn feature_count(&self) -> usize {
        self.n_numerical() + self.n_categorical()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut task: Option<TaskKind> = None;
        let mut columns = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(format!("schema line {}: missing `:`", lineno + 1)))?;
            let rest = rest.trim();
            match key.trim() {
                "task" => {
                    task = Some(match rest {
                        "binary" => TaskKind::Binary,
                        "regression" => TaskKind::Regression,
                        other => {
                            if let Some(c) = other
                                .strip_prefix("multiclass(")
                                .and_then(|s| s.strip_suffix(')'))
                            {
                                TaskKind::Multiclass(c.trim().parse().map_err(|_| {
                                    Error::parse(format!(
                                        "schema line {}: bad class count `{}`",
                                        lineno + 1,
                                        c
                                    ))
                                })?)
                            } else {
                                return Err(Error::parse(format!(
                                    "schema line {}: unknown task `{}`",
                                    lineno + 1,
                                    other
                                )));
                            }
                        }
                    });
                }
                "column" => {
                    let mut it = rest.split_whitespace();
                    let name = it
                        .next()
                        .ok_or_else(|| Error::parse(format!("schema line {}: missing column name", lineno + 1)))?;
                    let kind = match it.next() {
                        Some("numerical") => ColumnKind::Numerical,
                        Some("categorical") => ColumnKind::Categorical,
                        Some("target") => ColumnKind::Target,
                        other => {
                            return Err(Error::parse(format!(
                                "schema line {}: unknown column kind `{:?}`",
                                lineno + 1,
                                other
                            )))
                        }
                    };
                    columns.push(ColumnSpec { name: name.to_string(), kind });
                }
                other => {
                    return Err(Error::parse(format!(
                        "schema line {}: unknown key `{}`",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        let task = task.ok_or_else(|| Error::parse("schema file missing `task:` line"))?;
        TabularSchema::new(columns, task)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let task = match self.task {
            TaskKind::Binary => "binary".to_string(),
            TaskKind::Regression => "regression".to_string(),
            TaskKind::Multiclass(c) => format!("multiclass({})", c),
        };
        out.push_str(&format!("task: {}\n", task));
        for c in &self.columns {
            let kind = match c.kind {
                ColumnKind::Numerical => "numerical",
                ColumnKind::Categorical => "categorical",
                ColumnKind::Target => "target",
            };
            out.push_str(&format!("column: {} {}\n", c.name, kind));
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::schema(format!("cannot read schema file {}: {}", path.display(), e))
        })?;
        Self::parse(&text)
    }
}
