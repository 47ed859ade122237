//! Survey responses, respondent covariates and pairwise group proximity.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ordinal trait (a node of every group's graph).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSpec {
    pub trait_id: String,
    pub n_categories: usize,
    #[serde(default)]
    pub description: String,
}

/// What the survey loader expects to find.
#[derive(Debug, Clone, Default)]
pub struct SurveySchema {
    pub traits: Vec<TraitSpec>,
    /// Covariate columns in file order. `None` takes every non-trait column.
    pub covariates: Option<Vec<String>>,
    /// Accepted group ids. `None` accepts any id, in order of first appearance.
    pub groups: Option<Vec<String>>,
}

impl SurveySchema {
    pub fn from_traits(traits: Vec<TraitSpec>) -> Self {
        SurveySchema {
            traits,
            ..Default::default()
        }
    }
}

/// Reads a trait schema file: a JSON list of `{trait_id, n_categories, description}`.
pub fn load_trait_schema(path: impl AsRef<Path>) -> Result<Vec<TraitSpec>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let traits: Vec<TraitSpec> =
        serde_json::from_reader(file).map_err(|e| Error::parse(path, e))?;
    validate_traits(&traits)?;
    Ok(traits)
}

pub fn write_trait_schema(traits: &[TraitSpec], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(file, traits).map_err(|e| Error::parse(path, e))
}

fn validate_traits(traits: &[TraitSpec]) -> Result<()> {
    if traits.is_empty() {
        return Err(Error::Invalid("trait schema is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in traits {
        if t.n_categories < 2 {
            return Err(Error::Invalid(format!(
                "trait `{}` needs at least 2 categories",
                t.trait_id
            )));
        }
        if !seen.insert(t.trait_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate trait id `{}`", t.trait_id)));
        }
    }
    Ok(())
}

/// Responses and covariates of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupData {
    pub id: String,
    pub respondent_ids: Vec<String>,
    /// n × p, row-major; `None` is a missing response.
    pub responses: Vec<Option<u16>>,
    /// n × m, row-major.
    pub covariates: Vec<f64>,
    pub n_traits: usize,
    pub n_covariates: usize,
}

impl GroupData {
    pub fn n(&self) -> usize {
        self.respondent_ids.len()
    }

    pub fn response(&self, i: usize, j: usize) -> Option<u16> {
        self.responses[i * self.n_traits + j]
    }

    pub fn response_row(&self, i: usize) -> &[Option<u16>] {
        &self.responses[i * self.n_traits..(i + 1) * self.n_traits]
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    pub fn trait_column(&self, j: usize) -> Vec<Option<u16>> {
        (0..self.n()).map(|i| self.response(i, j)).collect()
    }

    /// Sample standard deviation of each covariate column.
    pub fn covariate_sds(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.n_covariates)
            .map(|c| {
                let col: Vec<f64> = (0..self.n()).map(|i| self.covariate_row(i)[c]).collect();
                let m = col.iter().sum::<f64>() / n;
                (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

/// Ordinal responses of K groups on a common set of p traits.
///
/// Covariates are stored without a constant column: the ordinal thresholds
/// act as the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDataset {
    pub traits: Vec<TraitSpec>,
    pub covariate_names: Vec<String>,
    pub groups: Vec<GroupData>,
}

impl SurveyDataset {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_traits(&self) -> usize {
        self.traits.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn group_ids(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.id.clone()).collect()
    }

    pub fn total_respondents(&self) -> usize {
        self.groups.iter().map(GroupData::n).sum()
    }
}

/// A loaded survey plus the per-group count of rows dropped for missing covariates.
#[derive(Debug, Clone)]
pub struct LoadedSurvey {
    pub dataset: SurveyDataset,
    pub dropped_rows: BTreeMap<String, usize>,
}

/// Reads the wide survey CSV: `group,respondent_id,<covariates>,<traits>`.
pub fn load_survey(path: impl AsRef<Path>, schema: &SurveySchema) -> Result<LoadedSurvey> {
    let path = path.as_ref();
    validate_traits(&schema.traits)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 || header[0] != "group" || header[1] != "respondent_id" {
        return Err(Error::parse(
            path,
            "header must start with `group,respondent_id`",
        ));
    }
    let column_of = |name: &str| header.iter().position(|h| h == name);

    let mut trait_cols = Vec::with_capacity(schema.traits.len());
    for t in &schema.traits {
        let col = column_of(&t.trait_id).ok_or_else(|| {
            Error::parse(path, format!("trait column `{}` not found", t.trait_id))
        })?;
        trait_cols.push(col);
    }
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => header[2..]
            .iter()
            .filter(|h| !schema.traits.iter().any(|t| &t.trait_id == *h))
            .cloned()
            .collect(),
    };
    let mut cov_cols = Vec::with_capacity(covariate_names.len());
    for name in &covariate_names {
        let col = column_of(name)
            .ok_or_else(|| Error::parse(path, format!("covariate column `{name}` not found")))?;
        cov_cols.push(col);
    }

    let p = schema.traits.len();
    let m = covariate_names.len();
    let mut groups: Vec<GroupData> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    if let Some(ids) = &schema.groups {
        for id in ids {
            index.insert(id.clone(), groups.len());
            groups.push(empty_group(id, p, m));
        }
    }
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();

    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::parse(path, e))?;
        let gid = record.get(0).unwrap_or("").trim().to_string();
        let g = match index.get(&gid) {
            Some(&g) => g,
            None if schema.groups.is_some() => return Err(Error::UnknownGroup(gid)),
            None => {
                index.insert(gid.clone(), groups.len());
                groups.push(empty_group(&gid, p, m));
                groups.len() - 1
            }
        };

        let mut covs = Vec::with_capacity(m);
        let mut incomplete = false;
        for (name, &col) in covariate_names.iter().zip(&cov_cols) {
            let cell = record.get(col).unwrap_or("").trim();
            if cell.is_empty() {
                incomplete = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(path, format!("row {row}: covariate `{name}` is not a number: `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("row {row}: covariate `{name}` is not finite")));
            }
            covs.push(v);
        }

        let mut resp = Vec::with_capacity(p);
        for (t, &col) in schema.traits.iter().zip(&trait_cols) {
            let cell = record.get(col).unwrap_or("").trim();
            if cell.is_empty() {
                resp.push(None);
                continue;
            }
            let v: i64 = cell.parse().map_err(|_| {
                Error::parse(
                    path,
                    format!("row {row}: trait `{}` is not an integer: `{cell}`", t.trait_id),
                )
            })?;
            if v < 1 || v as usize > t.n_categories {
                return Err(Error::CategoryOutOfRange {
                    row,
                    trait_id: t.trait_id.clone(),
                    value: v,
                    max: t.n_categories,
                });
            }
            resp.push(Some(v as u16));
        }

        if incomplete {
            *dropped.entry(gid).or_default() += 1;
            continue;
        }
        let group = &mut groups[g];
        group
            .respondent_ids
            .push(record.get(1).unwrap_or("").trim().to_string());
        group.responses.extend(resp);
        group.covariates.extend(covs);
    }

    for (gid, count) in &dropped {
        log::warn!("group {gid}: dropped {count} rows with missing covariates");
    }
    if groups.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    if let Some(g) = groups.iter().find(|g| g.n() == 0) {
        return Err(Error::Invalid(format!("group `{}` has no complete rows", g.id)));
    }

    Ok(LoadedSurvey {
        dataset: SurveyDataset {
            traits: schema.traits.clone(),
            covariate_names,
            groups,
        },
        dropped_rows: dropped,
    })
}

fn empty_group(id: &str, p: usize, m: usize) -> GroupData {
    GroupData {
        id: id.to_string(),
        respondent_ids: Vec::new(),
        responses: Vec::new(),
        covariates: Vec::new(),
        n_traits: p,
        n_covariates: m,
    }
}

/// Writes a dataset in the same CSV layout `load_survey` reads.
pub fn write_survey(dataset: &SurveyDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut header = vec!["group".to_string(), "respondent_id".to_string()];
    header.extend(dataset.covariate_names.iter().cloned());
    header.extend(dataset.traits.iter().map(|t| t.trait_id.clone()));
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    for g in &dataset.groups {
        for i in 0..g.n() {
            let mut rec = vec![g.id.clone(), g.respondent_ids[i].clone()];
            rec.extend(g.covariate_row(i).iter().map(|v| v.to_string()));
            rec.extend(
                g.response_row(i)
                    .iter()
                    .map(|v| v.map(|c| c.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pairwise proximity measures between groups, symmetric by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityData {
    pub names: Vec<String>,
    pub groups: Vec<String>,
    /// K × K × d, with `values[(a*K + b)*d + l] == values[(b*K + a)*d + l]`.
    values: Vec<f64>,
}

impl ProximityData {
    /// Builds proximity data from a function of unordered pairs `(a, b)`, `a < b`.
    pub fn from_fn(
        groups: Vec<String>,
        names: Vec<String>,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let k = groups.len();
        let d = names.len();
        let mut values = vec![0.0; k * k * d];
        for a in 0..k {
            for b in a + 1..k {
                let v = f(a, b);
                if v.len() != d {
                    return Err(Error::Invalid(format!(
                        "proximity vector has length {}, expected {d}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Invalid(format!(
                        "non-finite proximity for ({}, {})",
                        groups[a], groups[b]
                    )));
                }
                for l in 0..d {
                    values[(a * k + b) * d + l] = v[l];
                    values[(b * k + a) * d + l] = v[l];
                }
            }
        }
        Ok(ProximityData { names, groups, values })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn sim(&self, a: usize, b: usize) -> &[f64] {
        let k = self.groups.len();
        let d = self.names.len();
        &self.values[(a * k + b) * d..(a * k + b + 1) * d]
    }

    /// Reorders rows to match `groups`; every id must be present.
    pub fn reindexed(&self, groups: &[String]) -> Result<Self> {
        let pos: Vec<usize> = groups
            .iter()
            .map(|g| {
                self.groups
                    .iter()
                    .position(|h| h == g)
                    .ok_or_else(|| Error::UnknownGroup(g.clone()))
            })
            .collect::<Result<_>>()?;
        ProximityData::from_fn(groups.to_vec(), self.names.clone(), |a, b| {
            self.sim(pos[a], pos[b]).to_vec()
        })
    }
}

/// Reads the proximity CSV `k1,k2,<name_1..name_d>` for the given groups.
pub fn load_proximity(path: impl AsRef<Path>, groups: &[String]) -> Result<ProximityData> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 3 || header[0] != "k1" || header[1] != "k2" {
        return Err(Error::parse(path, "header must be `k1,k2,<measures...>`"));
    }
    let names = header[2..].to_vec();
    let d = names.len();
    let k = groups.len();
    let lookup = |id: &str| {
        groups
            .iter()
            .position(|g| g == id)
            .ok_or_else(|| Error::UnknownGroup(id.to_string()))
    };

    let mut seen: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let a = lookup(record.get(0).unwrap_or("").trim())?;
        let b = lookup(record.get(1).unwrap_or("").trim())?;
        if a == b {
            return Err(Error::Invalid(format!(
                "row {}: self-pair ({}, {})",
                r + 1,
                groups[a],
                groups[b]
            )));
        }
        let mut v = Vec::with_capacity(d);
        for l in 0..d {
            let cell = record.get(l + 2).unwrap_or("").trim();
            let x: f64 = cell.parse().map_err(|_| {
                Error::parse(path, format!("row {}: `{}` is not a number: `{cell}`", r + 1, names[l]))
            })?;
            if !x.is_finite() {
                return Err(Error::Invalid(format!(
                    "row {}: non-finite `{}` for ({}, {})",
                    r + 1,
                    names[l],
                    groups[a],
                    groups[b]
                )));
            }
            v.push(x);
        }
        let key = (a.min(b), a.max(b));
        if let Some(prev) = seen.get(&key) {
            if prev.iter().zip(&v).any(|(x, y)| (x - y).abs() > 1e-9) {
                return Err(Error::AsymmetricPair(groups[key.0].clone(), groups[key.1].clone()));
            }
        } else {
            seen.insert(key, v);
        }
    }
    for a in 0..k {
        for b in a + 1..k {
            if !seen.contains_key(&(a, b)) {
                return Err(Error::MissingPair(groups[a].clone(), groups[b].clone()));
            }
        }
    }
    ProximityData::from_fn(groups.to_vec(), names, |a, b| seen[&(a, b)].clone())
}

pub fn write_proximity(prox: &ProximityData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut header = vec!["k1".to_string(), "k2".to_string()];
    header.extend(prox.names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    let k = prox.n_groups();
    for a in 0..k {
        for b in a + 1..k {
            let mut rec = vec![prox.groups[a].clone(), prox.groups[b].clone()];
            rec.extend(prox.sim(a, b).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupTraitStats {
    /// `None` when every response is missing.
    pub mean: Option<f64>,
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraitSummary {
    pub trait_id: String,
    pub per_group: Vec<GroupTraitStats>,
    pub overall_mean: Option<f64>,
    pub overall_missing_fraction: f64,
    pub min_group_mean: Option<f64>,
    pub max_group_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariateSummary {
    pub name: String,
    pub per_group_mean: Vec<f64>,
    pub overall_mean: f64,
    pub min_group_mean: f64,
    pub max_group_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DescriptiveStats {
    pub groups: Vec<String>,
    pub traits: Vec<TraitSummary>,
    pub covariates: Vec<CovariateSummary>,
}

/// Means and missing fractions per group and trait, plus overall values and
/// the range of group means.
pub fn describe(dataset: &SurveyDataset) -> DescriptiveStats {
    let traits = dataset
        .traits
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let mut total_sum = 0.0;
            let mut total_obs = 0usize;
            let mut total_n = 0usize;
            let per_group: Vec<GroupTraitStats> = dataset
                .groups
                .iter()
                .map(|g| {
                    let mut sum = 0.0;
                    let mut obs = 0usize;
                    for i in 0..g.n() {
                        if let Some(c) = g.response(i, j) {
                            sum += c as f64;
                            obs += 1;
                        }
                    }
                    total_sum += sum;
                    total_obs += obs;
                    total_n += g.n();
                    GroupTraitStats {
                        mean: (obs > 0).then(|| sum / obs as f64),
                        missing_fraction: (g.n() - obs) as f64 / g.n() as f64,
                    }
                })
                .collect();
            let means: Vec<f64> = per_group.iter().filter_map(|s| s.mean).collect();
            TraitSummary {
                trait_id: t.trait_id.clone(),
                overall_mean: (total_obs > 0).then(|| total_sum / total_obs as f64),
                overall_missing_fraction: (total_n - total_obs) as f64 / total_n as f64,
                min_group_mean: means.iter().copied().reduce(f64::min),
                max_group_mean: means.iter().copied().reduce(f64::max),
                per_group,
            }
        })
        .collect();

    let covariates = dataset
        .covariate_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut total = 0.0;
            let mut count = 0usize;
            let per_group_mean: Vec<f64> = dataset
                .groups
                .iter()
                .map(|g| {
                    let s: f64 = (0..g.n()).map(|i| g.covariate_row(i)[c]).sum();
                    total += s;
                    count += g.n();
                    s / g.n() as f64
                })
                .collect();
            CovariateSummary {
                name: name.clone(),
                overall_mean: total / count as f64,
                min_group_mean: per_group_mean.iter().copied().fold(f64::INFINITY, f64::min),
                max_group_mean: per_group_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                per_group_mean,
            }
        })
        .collect();

    DescriptiveStats {
        groups: dataset.group_ids(),
        traits,
        covariates,
    }
}
