use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, ProteinId};
use crate::error::{Error, Result};
use crate::fsio::{read_text, write_text};
use crate::metrics::PredictionSet;

pub const DUMP_HEADER: &str = "example_id\tprotein_a\tprotein_b\tlabel\tmap_p1\tbayes_p1\tensemble_p1";

/// Probability columns of a prediction dump, left to right.
pub const PROB_COLUMNS: [&str; 3] = ["map_p1", "bayes_p1", "ensemble_p1"];

/// One test example with every positive-class probability the run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub example_id: usize,
    pub protein_a: ProteinId,
    pub protein_b: ProteinId,
    pub label: u8,
    pub map_p1: Option<f64>,
    pub bayes_p1: Option<f64>,
    pub ensemble_p1: Option<f64>,
}

impl PredictionRow {
    fn column(&self, name: &str) -> Option<f64> {
        match name {
            "map_p1" => self.map_p1,
            "bayes_p1" => self.bayes_p1,
            "ensemble_p1" => self.ensemble_p1,
            _ => None,
        }
    }
}

/// Per-example predictions in the order of the test split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionDump {
    pub rows: Vec<PredictionRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl PredictionDump {
    /// Rows for `test` with only the MAP column filled.
    pub fn from_map(test: &Dataset, map_p1: &[f64]) -> Result<Self> {
        if test.len() != map_p1.len() {
            return Err(Error::invalid("one probability per test example is required"));
        }
        Ok(Self {
            rows: test
                .examples()
                .iter()
                .zip(map_p1)
                .enumerate()
                .map(|(i, (ex, &p))| PredictionRow {
                    example_id: i,
                    protein_a: ex.protein_a.clone(),
                    protein_b: ex.protein_b.clone(),
                    label: ex.label,
                    map_p1: Some(p),
                    bayes_p1: None,
                    ensemble_p1: None,
                })
                .collect(),
        })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Values of a probability column; `None` when any row lacks it.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        if self.rows.is_empty() || !PROB_COLUMNS.contains(&name) {
            return None;
        }
        self.rows.iter().map(|r| r.column(name)).collect()
    }

    /// Rightmost probability column present in every row.
    pub fn default_column(&self) -> Option<&'static str> {
        PROB_COLUMNS.iter().rev().copied().find(|c| self.column(c).is_some())
    }

    /// Labels and `[1 − p, p]` for one column, exactly as metrics see them.
    pub fn prediction_set(&self, column: &str) -> Result<PredictionSet> {
        let p1 = self
            .column(column)
            .ok_or_else(|| Error::invalid(format!("column {column} is not available in this dump")))?;
        PredictionSet::from_positive(self.labels(), &p1)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(DUMP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.example_id,
                r.protein_a,
                r.protein_b,
                r.label,
                fmt_opt(r.map_p1),
                fmt_opt(r.bayes_p1),
                fmt_opt(r.ensemble_p1)
            );
        }
        out
    }

    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.map(Path::to_path_buf),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == DUMP_HEADER => {}
            _ => return Err(err(1, "missing prediction dump header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(err(i + 1, format!("expected 7 fields, found {}", f.len())));
            }
            let prob = |s: &str| -> Result<Option<f64>> {
                if s == "NA" {
                    return Ok(None);
                }
                let v: f64 = s.parse().map_err(|_| err(i + 1, format!("bad probability {s:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(i + 1, format!("probability {v} outside [0, 1]")));
                }
                Ok(Some(v))
            };
            let label: u8 = f[3].parse().map_err(|_| err(i + 1, format!("bad label {:?}", f[3])))?;
            if label > 1 {
                return Err(err(i + 1, format!("label {label} is not binary")));
            }
            rows.push(PredictionRow {
                example_id: f[0]
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad example id {:?}", f[0])))?,
                protein_a: ProteinId::new(f[1]).map_err(|e| err(i + 1, e.to_string()))?,
                protein_b: ProteinId::new(f[2]).map_err(|e| err(i + 1, e.to_string()))?,
                label,
                map_p1: prob(f[4])?,
                bayes_p1: prob(f[5])?,
                ensemble_p1: prob(f[6])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_tsv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, Some(path))
    }
}
