//! Long-format CSV input: one row per observation.
//!
//! Required columns are `gene_id, subject_id, gender, day, value` plus
//! `age_group` or a numeric `age`. An optional integer `replicate` column
//! distinguishes repeated observations of a subject on the same day.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use fmem::{AgeGroup, FmemError, Gender, GeneDataset, IndividualSeries, TimeGrid};

use crate::error::{CliError, Result};

const REQUIRED: [&str; 5] = ["gene_id", "subject_id", "gender", "day", "value"];
const OPTIONAL: [&str; 3] = ["age_group", "age", "replicate"];

/// A gene dropped before fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub gene_id: String,
    pub error: FmemError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    /// Sorted by gene id.
    pub genes: Vec<GeneDataset>,
    pub rejected: Vec<Rejected>,
}

struct Subject {
    gender: Gender,
    age_group: AgeGroup,
    line: u64,
    obs: Vec<(f64, u32, f64)>,
}

fn parse_gender(s: &str) -> Option<Gender> {
    match s.to_ascii_lowercase().as_str() {
        "m" | "male" => Some(Gender::Male),
        "f" | "female" => Some(Gender::Female),
        _ => None,
    }
}

fn parse_age_group(s: &str) -> Option<AgeGroup> {
    match s.to_ascii_lowercase().as_str() {
        "young" => Some(AgeGroup::Young),
        "old" => Some(AgeGroup::Old),
        _ => None,
    }
}

fn number(field: &str, name: &str, line: u64) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CliError::Ingest {
            line,
            message: format!("{name} {field:?} is not a finite number"),
        }),
    }
}

pub fn ingest_path(path: &Path, age_cutoff: f64) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    ingest_reader(file, age_cutoff)
}

pub fn ingest_reader<R: Read>(reader: R, age_cutoff: f64) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(CliError::EmptyInput);
    }
    let mut col: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        let known = REQUIRED.iter().chain(&OPTIONAL).find(|&&k| k == h);
        match known {
            Some(k) if col.insert(k, i).is_none() => {}
            Some(_) => {
                return Err(CliError::Ingest {
                    line: 1,
                    message: format!("column {h:?} appears twice"),
                })
            }
            None => {
                return Err(CliError::Ingest {
                    line: 1,
                    message: format!("unexpected column {h:?}"),
                })
            }
        }
    }
    if let Some(missing) = REQUIRED.iter().find(|k| !col.contains_key(*k)) {
        return Err(CliError::Ingest {
            line: 1,
            message: format!("missing column {missing:?}"),
        });
    }
    if !col.contains_key("age_group") && !col.contains_key("age") {
        return Err(CliError::Ingest {
            line: 1,
            message: "need an age_group or age column".into(),
        });
    }

    let mut genes: BTreeMap<String, BTreeMap<String, Subject>> = BTreeMap::new();
    let mut seen: HashMap<(String, String, u64, u32), u64> = HashMap::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |name: &str| col.get(name).and_then(|&i| record.get(i)).unwrap_or("");
        let gene = get("gene_id");
        let subject = get("subject_id");
        if gene.is_empty() || subject.is_empty() {
            return Err(CliError::Ingest {
                line,
                message: "empty gene_id or subject_id".into(),
            });
        }
        let gender = parse_gender(get("gender")).ok_or_else(|| CliError::Ingest {
            line,
            message: format!("gender {:?} is not M or F", get("gender")),
        })?;
        let age_group = match get("age_group") {
            "" => {
                let age = get("age");
                if age.is_empty() {
                    return Err(CliError::Ingest {
                        line,
                        message: "neither age_group nor age given".into(),
                    });
                }
                if number(age, "age", line)? <= age_cutoff {
                    AgeGroup::Young
                } else {
                    AgeGroup::Old
                }
            }
            s => parse_age_group(s).ok_or_else(|| CliError::Ingest {
                line,
                message: format!("age_group {s:?} is not young or old"),
            })?,
        };
        let day = number(get("day"), "day", line)?;
        let value = number(get("value"), "value", line)?;
        let replicate = match get("replicate") {
            "" => 0,
            s => s.parse::<u32>().map_err(|_| CliError::Ingest {
                line,
                message: format!("replicate {s:?} is not a non-negative integer"),
            })?,
        };
        let key = (gene.to_string(), subject.to_string(), day.to_bits(), replicate);
        if let Some(first) = seen.insert(key, line) {
            return Err(CliError::Ingest {
                line,
                message: format!("duplicate of line {first} (gene {gene}, subject {subject}, day {day}, replicate {replicate})"),
            });
        }
        let entry = genes
            .entry(gene.to_string())
            .or_default()
            .entry(subject.to_string())
            .or_insert(Subject {
                gender,
                age_group,
                line,
                obs: Vec::new(),
            });
        if entry.gender != gender || entry.age_group != age_group {
            return Err(CliError::Ingest {
                line,
                message: format!("labels of subject {subject} disagree with line {}", entry.line),
            });
        }
        entry.obs.push((day, replicate, value));
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::EmptyInput);
    }

    let mut out = Ingested {
        genes: Vec::new(),
        rejected: Vec::new(),
    };
    for (gene_id, subjects) in genes {
        match build_gene(&gene_id, subjects) {
            Ok(data) => out.genes.push(data),
            Err(error) => out.rejected.push(Rejected { gene_id, error }),
        }
    }
    Ok(out)
}

fn build_gene(gene_id: &str, subjects: BTreeMap<String, Subject>) -> fmem::Result<GeneDataset> {
    let mut days: Vec<f64> = subjects.values().flat_map(|s| s.obs.iter().map(|o| o.0)).collect();
    days.sort_by(f64::total_cmp);
    days.dedup();
    let grid = TimeGrid::new(days)?;
    let individuals = subjects
        .into_iter()
        .map(|(id, mut s)| {
            s.obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (times, values) = s.obs.iter().map(|o| (o.0, o.2)).unzip();
            IndividualSeries::new(id, s.gender, s.age_group, times, values)
        })
        .collect::<fmem::Result<Vec<_>>>()?;
    let data = GeneDataset::new(gene_id, grid, individuals)?;
    data.check_identifiable()?;
    Ok(data)
}
