//! Study-level correlation data: loading, validation and clustering of
//! study-specific measures onto canonical variables.
//!
//! Two CSV inputs describe a dataset. The study table has the header
//! `study_id,n,region,year` (an optional trailing `notes` column is accepted)
//! and the correlation table has the header `study_id,measure_a,measure_b,r`
//! with an optional trailing `precomposed` flag. Missing correlations are
//! represented by absent rows, never by zero.
//!
//! A cluster map assigns every `(study_id, measure)` to one canonical
//! variable. Lines are `study_id,measure_name,canonical_variable`; `#` starts
//! a comment and an optional `@variables A,B,...` line declares the closed set
//! of canonical variables and their display order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unordered pair of canonical variables, stored in lexicographic order so it
/// can key maps regardless of the order the caller names the variables in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarPair {
    first: String,
    second: String,
}

impl VarPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            VarPair { first: a, second: b }
        } else {
            VarPair { first: b, second: a }
        }
    }

    pub fn first(&self) -> &str {
        &self.first
    }

    pub fn second(&self) -> &str {
        &self.second
    }

    pub fn contains(&self, var: &str) -> bool {
        self.first == var || self.second == var
    }
}

impl fmt::Display for VarPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}", self.first, self.second)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    /// Number of respondents; at least 4 so that the Fisher variance 1/(N−3) exists.
    pub sample_n: u32,
    pub region: String,
    pub year: i32,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationObservation {
    pub study_id: String,
    pub measure_a: String,
    pub measure_b: String,
    pub r: f64,
    /// The value was already composed from several measures upstream and is
    /// taken as-is by the composite stage.
    pub precomposed: bool,
}

/// Validated collection of studies and their correlations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    studies: Vec<StudyRecord>,
    observations: Vec<CorrelationObservation>,
}

impl Dataset {
    pub fn new(studies: Vec<StudyRecord>, observations: Vec<CorrelationObservation>) -> Result<Self> {
        let mut ids = HashSet::new();
        for study in &studies {
            if !ids.insert(study.study_id.as_str()) {
                return Err(Error::Domain(format!("duplicate study id `{}`", study.study_id)));
            }
            check_sample_size(study.sample_n, &study.study_id)?;
        }

        let mut seen = HashSet::new();
        for obs in &observations {
            if !ids.contains(obs.study_id.as_str()) {
                return Err(Error::Domain(format!("observation references unknown study `{}`", obs.study_id)));
            }
            check_observation(obs)?;
            let key = unordered_key(obs);
            if !seen.insert(key) {
                return Err(Error::DuplicateObservation {
                    study_id: obs.study_id.clone(),
                    measure_a: obs.measure_a.clone(),
                    measure_b: obs.measure_b.clone(),
                });
            }
        }

        Ok(Dataset { studies, observations })
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn observations(&self) -> &[CorrelationObservation] {
        &self.observations
    }

    pub fn study(&self, study_id: &str) -> Option<&StudyRecord> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    pub fn sample_sizes(&self) -> HashMap<String, u32> {
        self.studies.iter().map(|s| (s.study_id.clone(), s.sample_n)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty() && self.observations.is_empty()
    }

    pub fn write_studies<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["study_id", "n", "region", "year", "notes"])
            .map_err(csv_write_error)?;
        for s in &self.studies {
            w.write_record([
                s.study_id.as_str(),
                &s.sample_n.to_string(),
                &s.region,
                &s.year.to_string(),
                &s.notes,
            ])
            .map_err(csv_write_error)?;
        }
        w.flush().map_err(|e| Error::io("<writer>", e))
    }

    pub fn write_correlations<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["study_id", "measure_a", "measure_b", "r", "precomposed"])
            .map_err(csv_write_error)?;
        for o in &self.observations {
            w.write_record([
                o.study_id.as_str(),
                &o.measure_a,
                &o.measure_b,
                &o.r.to_string(),
                if o.precomposed { "true" } else { "" },
            ])
            .map_err(csv_write_error)?;
        }
        w.flush().map_err(|e| Error::io("<writer>", e))
    }
}

fn csv_write_error(e: csv::Error) -> Error {
    Error::Domain(format!("csv write failed: {e}"))
}

fn check_sample_size(n: u32, study_id: &str) -> Result<()> {
    if n < 4 {
        return Err(Error::Domain(format!(
            "study `{study_id}` has N = {n}; at least 4 respondents are required"
        )));
    }
    Ok(())
}

fn check_observation(obs: &CorrelationObservation) -> Result<()> {
    if obs.measure_a == obs.measure_b {
        return Err(Error::Domain(format!(
            "study `{}`: measure `{}` correlated with itself",
            obs.study_id, obs.measure_a
        )));
    }
    if !obs.r.is_finite() || obs.r.abs() >= 1.0 {
        return Err(Error::Domain(format!(
            "study `{}`: r = {} for {} / {} is outside (-1, 1)",
            obs.study_id, obs.r, obs.measure_a, obs.measure_b
        )));
    }
    Ok(())
}

fn unordered_key(obs: &CorrelationObservation) -> (String, String, String) {
    let (a, b) = if obs.measure_a <= obs.measure_b {
        (&obs.measure_a, &obs.measure_b)
    } else {
        (&obs.measure_b, &obs.measure_a)
    };
    (obs.study_id.clone(), a.clone(), b.clone())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Loads and validates a study table and a correlation table.
pub fn load_dataset(studies: &Path, correlations: &Path) -> Result<Dataset> {
    let study_rows = read_studies(open(studies)?, &studies.display().to_string())?;
    let obs_rows = read_correlations(open(correlations)?, &correlations.display().to_string())?;
    Dataset::new(study_rows, obs_rows)
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn from_headers(headers: &csv::StringRecord, required: &[&str], source: &str) -> Result<Self> {
        let index: HashMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        for col in required {
            if !index.contains_key(*col) {
                return Err(Error::parse(source, 1, format!("missing column `{col}`")));
            }
        }
        Ok(Columns { index })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| record.get(i)).map(str::trim)
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

pub fn read_studies<R: Read>(reader: R, source: &str) -> Result<Vec<StudyRecord>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse(source, 1, e.to_string()))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let cols = Columns::from_headers(&headers, &["study_id", "n", "region", "year"], source)?;

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::parse(source, 0, e.to_string()))?;
        let line = record_line(&record);
        let field = |name: &str| {
            cols.get(&record, name)
                .ok_or_else(|| Error::parse(source, line, format!("missing field `{name}`")))
        };
        let study_id = field("study_id")?.to_string();
        if study_id.is_empty() {
            return Err(Error::parse(source, line, "empty study_id"));
        }
        let n_text = field("n")?;
        let sample_n: u32 = n_text
            .parse()
            .map_err(|_| Error::parse(source, line, format!("invalid sample size `{n_text}`")))?;
        check_sample_size(sample_n, &study_id).map_err(|e| Error::Domain(format!("{source}:{line}: {e}")))?;
        let year_text = field("year")?;
        let year: i32 = year_text
            .parse()
            .map_err(|_| Error::parse(source, line, format!("invalid year `{year_text}`")))?;
        out.push(StudyRecord {
            study_id,
            sample_n,
            region: field("region")?.to_string(),
            year,
            notes: cols.get(&record, "notes").unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

fn parse_flag(text: &str) -> Option<bool> {
    match text.to_ascii_lowercase().as_str() {
        "" | "false" | "0" | "no" => Some(false),
        "true" | "1" | "yes" | "precomposed" => Some(true),
        _ => None,
    }
}

pub fn read_correlations<R: Read>(reader: R, source: &str) -> Result<Vec<CorrelationObservation>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse(source, 1, e.to_string()))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let cols = Columns::from_headers(&headers, &["study_id", "measure_a", "measure_b", "r"], source)?;

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::parse(source, 0, e.to_string()))?;
        let line = record_line(&record);
        let field = |name: &str| {
            cols.get(&record, name)
                .ok_or_else(|| Error::parse(source, line, format!("missing field `{name}`")))
        };
        let r_text = field("r")?;
        let r: f64 = r_text
            .parse()
            .map_err(|_| Error::parse(source, line, format!("invalid correlation `{r_text}`")))?;
        let flag_text = cols.get(&record, "precomposed").unwrap_or("");
        let precomposed =
            parse_flag(flag_text).ok_or_else(|| Error::parse(source, line, format!("invalid precomposed flag `{flag_text}`")))?;
        let obs = CorrelationObservation {
            study_id: field("study_id")?.to_string(),
            measure_a: field("measure_a")?.to_string(),
            measure_b: field("measure_b")?.to_string(),
            r,
            precomposed,
        };
        check_observation(&obs).map_err(|e| Error::Domain(format!("{source}:{line}: {e}")))?;
        out.push(obs);
    }
    Ok(out)
}

/// Assignment of study-specific measures to canonical variables under one
/// clustering scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    scheme_name: String,
    variables: Vec<String>,
    entries: BTreeMap<(String, String), String>,
}

impl ClusterMap {
    /// Builds a map. When `variables` is empty the canonical set is taken
    /// from the entries in first-appearance order.
    pub fn new<I>(scheme_name: impl Into<String>, variables: Vec<String>, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, String)>,
    {
        let declared = !variables.is_empty();
        let mut variables = variables;
        let mut map = BTreeMap::new();
        for (study, measure, canonical) in entries {
            if declared {
                if !variables.contains(&canonical) {
                    return Err(Error::UnknownVariable(canonical));
                }
            } else if !variables.contains(&canonical) {
                variables.push(canonical.clone());
            }
            match map.get(&(study.clone(), measure.clone())) {
                Some(existing) if existing != &canonical => {
                    return Err(Error::Domain(format!(
                        "measure `{measure}` of study `{study}` mapped to both {existing} and {canonical}"
                    )));
                }
                _ => {
                    map.insert((study, measure), canonical);
                }
            }
        }
        Ok(ClusterMap {
            scheme_name: scheme_name.into(),
            variables,
            entries: map,
        })
    }

    /// Loads a cluster file; the scheme name is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let scheme = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_reader(open(path)?, &scheme, &path.display().to_string())
    }

    pub fn from_reader<R: Read>(reader: R, scheme_name: &str, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);

        let mut variables = Vec::new();
        let mut entries = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::parse(source, 0, e.to_string()))?;
            let line = record_line(&record);
            let first = record.get(0).unwrap_or("");
            if let Some(rest) = first.strip_prefix("@variables") {
                variables = std::iter::once(rest.trim())
                    .chain(record.iter().skip(1))
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(String::from)
                    .collect();
                continue;
            }
            if record.len() == 1 && first.is_empty() {
                continue;
            }
            if record.len() != 3 {
                return Err(Error::parse(
                    source,
                    line,
                    format!("expected `study_id,measure_name,canonical_variable`, got {} fields", record.len()),
                ));
            }
            if (first, &record[1], &record[2]) == ("study_id", "measure_name", "canonical_variable") {
                continue;
            }
            entries.push((first.to_string(), record[1].to_string(), record[2].to_string()));
        }
        Self::new(scheme_name, variables, entries)
    }

    pub fn scheme_name(&self) -> &str {
        &self.scheme_name
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn has_variable(&self, var: &str) -> bool {
        self.variables.iter().any(|v| v == var)
    }

    pub fn canonical(&self, study_id: &str, measure: &str) -> Option<&str> {
        self.entries.get(&(study_id.to_string(), measure.to_string())).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.entries.iter().map(|((s, m), c)| (s.as_str(), m.as_str(), c.as_str()))
    }
}

/// One cross-correlation between a measure of the group's first variable
/// (`measure_x`) and a measure of its second variable (`measure_y`).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    pub measure_x: String,
    pub measure_y: String,
    pub r: f64,
    pub precomposed: bool,
}

/// Correlation between two measures of the same canonical variable.
#[derive(Debug, Clone, PartialEq)]
pub struct InterCorrelation {
    pub measure_a: String,
    pub measure_b: String,
    pub r: f64,
}

/// All observations one study contributes to one canonical pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGroup {
    pub study_id: String,
    pub pair: VarPair,
    pub cross: Vec<CrossCorrelation>,
    /// Inter-correlations among the measures of `pair.first()`.
    pub within_x: Vec<InterCorrelation>,
    /// Inter-correlations among the measures of `pair.second()`.
    pub within_y: Vec<InterCorrelation>,
}

impl ObservationGroup {
    pub fn measures_x(&self) -> Vec<&str> {
        distinct(self.cross.iter().map(|c| c.measure_x.as_str()))
    }

    pub fn measures_y(&self) -> Vec<&str> {
        distinct(self.cross.iter().map(|c| c.measure_y.as_str()))
    }
}

fn distinct<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

/// Groups observations by study and canonical pair.
///
/// Cross-variable observations land in exactly one group. Correlations
/// between two measures of the same variable are attached to every group of
/// that study whose measure set contains both measures.
pub fn apply_cluster(observations: &[CorrelationObservation], cluster: &ClusterMap) -> Result<Vec<ObservationGroup>> {
    let mut orphans = BTreeSet::new();
    let mut mapped = Vec::with_capacity(observations.len());
    for obs in observations {
        let a = cluster.canonical(&obs.study_id, &obs.measure_a);
        let b = cluster.canonical(&obs.study_id, &obs.measure_b);
        if a.is_none() {
            orphans.insert(format!("{}: {}", obs.study_id, obs.measure_a));
        }
        if b.is_none() {
            orphans.insert(format!("{}: {}", obs.study_id, obs.measure_b));
        }
        if let (Some(a), Some(b)) = (a, b) {
            for var in [a, b] {
                if !cluster.has_variable(var) {
                    return Err(Error::UnknownVariable(var.to_string()));
                }
            }
            mapped.push((obs, a, b));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::UnmappedMeasures(orphans.into_iter().collect()));
    }

    let mut within: HashMap<(&str, &str), Vec<InterCorrelation>> = HashMap::new();
    let mut groups: BTreeMap<(String, VarPair), Vec<CrossCorrelation>> = BTreeMap::new();
    for (obs, a, b) in mapped {
        if a == b {
            within.entry((obs.study_id.as_str(), a)).or_default().push(InterCorrelation {
                measure_a: obs.measure_a.clone(),
                measure_b: obs.measure_b.clone(),
                r: obs.r,
            });
            continue;
        }
        let pair = VarPair::new(a, b);
        let (measure_x, measure_y) = if pair.first() == a {
            (obs.measure_a.clone(), obs.measure_b.clone())
        } else {
            (obs.measure_b.clone(), obs.measure_a.clone())
        };
        groups.entry((obs.study_id.clone(), pair)).or_default().push(CrossCorrelation {
            measure_x,
            measure_y,
            r: obs.r,
            precomposed: obs.precomposed,
        });
    }

    let attach = |study: &str, var: &str, measures: &[&str]| -> Vec<InterCorrelation> {
        within
            .get(&(study, var))
            .map(|list| {
                list.iter()
                    .filter(|ic| measures.contains(&ic.measure_a.as_str()) && measures.contains(&ic.measure_b.as_str()))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    };

    Ok(groups
        .into_iter()
        .map(|((study_id, pair), cross)| {
            let mut group = ObservationGroup {
                study_id,
                pair,
                cross,
                within_x: Vec::new(),
                within_y: Vec::new(),
            };
            group.within_x = attach(&group.study_id, group.pair.first(), &group.measures_x());
            group.within_y = attach(&group.study_id, group.pair.second(), &group.measures_y());
            group
        })
        .collect())
}

/// The eight-study dataset shipped with the crate, under both clustering schemes.
pub mod fixtures {
    use super::*;

    pub const STUDIES_CSV: &str = include_str!("../fixtures/studies.csv");
    pub const PARSIMONIOUS_CSV: &str = include_str!("../fixtures/parsimonious_correlations.csv");
    pub const REFINED_CSV: &str = include_str!("../fixtures/refined_correlations.csv");
    pub const PARSIMONIOUS_CLUSTER: &str = include_str!("../fixtures/parsimonious.cluster");
    pub const REFINED_CLUSTER: &str = include_str!("../fixtures/refined.cluster");

    pub const MODEL_SPECS: [(&str, &str); 4] = [
        ("model1", include_str!("../fixtures/models/model1.spec")),
        ("model2", include_str!("../fixtures/models/model2.spec")),
        ("model3", include_str!("../fixtures/models/model3.spec")),
        ("model4", include_str!("../fixtures/models/model4.spec")),
    ];

    fn dataset(correlations: &str, source: &str) -> Dataset {
        let studies = read_studies(STUDIES_CSV.as_bytes(), "studies.csv").expect("shipped study table");
        let obs = read_correlations(correlations.as_bytes(), source).expect("shipped correlation table");
        Dataset::new(studies, obs).expect("shipped dataset is valid")
    }

    pub fn parsimonious() -> (Dataset, ClusterMap) {
        let cluster =
            ClusterMap::from_reader(PARSIMONIOUS_CLUSTER.as_bytes(), "parsimonious", "parsimonious.cluster").expect("shipped cluster map");
        (dataset(PARSIMONIOUS_CSV, "parsimonious_correlations.csv"), cluster)
    }

    pub fn refined() -> (Dataset, ClusterMap) {
        let cluster = ClusterMap::from_reader(REFINED_CLUSTER.as_bytes(), "refined", "refined.cluster").expect("shipped cluster map");
        (dataset(REFINED_CSV, "refined_correlations.csv"), cluster)
    }
}
