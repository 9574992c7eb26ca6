//! Labeled flaky-test datasets: CSV loading, support filtering and
//! label-stratified splitting.
//!
//! CSV layout (UTF-8, header required): `id,project,label,source`. Extra
//! columns are ignored, which lets augmented files (with a trailing
//! `parent_id` column) load as plain datasets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

/// Which label family a dataset uses. A dataset never mixes families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Taxonomy {
    /// Binary flaky / non-flaky.
    Detection,
    /// IDoFT root-cause categories.
    Idoft,
    /// FlakyCat root-cause categories.
    FlakyCat,
}

impl Taxonomy {
    pub fn as_str(self) -> &'static str {
        match self {
            Taxonomy::Detection => "detection",
            Taxonomy::Idoft => "idoft",
            Taxonomy::FlakyCat => "flakycat",
        }
    }

    /// Every label of this taxonomy, in token order.
    pub fn labels(self) -> Vec<Label> {
        let mut labels: Vec<Label> = match self {
            Taxonomy::Detection => [Detection::Flaky, Detection::NonFlaky]
                .into_iter()
                .map(Label::Detection)
                .collect(),
            Taxonomy::Idoft => IdoftCategory::ALL.into_iter().map(Label::Idoft).collect(),
            Taxonomy::FlakyCat => FlakyCatCategory::ALL
                .into_iter()
                .map(Label::FlakyCat)
                .collect(),
        };
        labels.sort();
        labels
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Taxonomy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl FromStr for Taxonomy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detection" => Ok(Taxonomy::Detection),
            "idoft" => Ok(Taxonomy::Idoft),
            "flakycat" => Ok(Taxonomy::FlakyCat),
            other => Err(format!(
                "unknown taxonomy `{other}` (expected detection, idoft or flakycat)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Detection {
    Flaky,
    NonFlaky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IdoftCategory {
    /// Non-deterministic order-dependent.
    Ndod,
    /// Non-order-dependent.
    Nod,
    /// Order-dependent.
    Od,
    /// Non-idempotent outcome.
    Nio,
    /// Implementation-dependent.
    Id,
    /// Unknown dependency.
    Ud,
}

impl IdoftCategory {
    pub const ALL: [IdoftCategory; 6] = [
        IdoftCategory::Ndod,
        IdoftCategory::Nod,
        IdoftCategory::Od,
        IdoftCategory::Nio,
        IdoftCategory::Id,
        IdoftCategory::Ud,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlakyCatCategory {
    AsyncWait,
    Concurrency,
    Time,
    TestOrderDependency,
    UnorderedCollections,
}

impl FlakyCatCategory {
    pub const ALL: [FlakyCatCategory; 5] = [
        FlakyCatCategory::AsyncWait,
        FlakyCatCategory::Concurrency,
        FlakyCatCategory::Time,
        FlakyCatCategory::TestOrderDependency,
        FlakyCatCategory::UnorderedCollections,
    ];
}

/// A test label from one of the three taxonomies.
///
/// Labels order by their CSV token, so any sorted collection of labels is in
/// lexicographic token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Detection(Detection),
    Idoft(IdoftCategory),
    FlakyCat(FlakyCatCategory),
}

impl Label {
    pub fn taxonomy(self) -> Taxonomy {
        match self {
            Label::Detection(_) => Taxonomy::Detection,
            Label::Idoft(_) => Taxonomy::Idoft,
            Label::FlakyCat(_) => Taxonomy::FlakyCat,
        }
    }

    /// The case-sensitive CSV token for this label.
    pub fn token(self) -> &'static str {
        match self {
            Label::Detection(Detection::Flaky) => "flaky",
            Label::Detection(Detection::NonFlaky) => "non_flaky",
            Label::Idoft(c) => match c {
                IdoftCategory::Ndod => "NDOD",
                IdoftCategory::Nod => "NOD",
                IdoftCategory::Od => "OD",
                IdoftCategory::Nio => "NIO",
                IdoftCategory::Id => "ID",
                IdoftCategory::Ud => "UD",
            },
            Label::FlakyCat(c) => match c {
                FlakyCatCategory::AsyncWait => "async_wait",
                FlakyCatCategory::Concurrency => "concurrency",
                FlakyCatCategory::Time => "time",
                FlakyCatCategory::TestOrderDependency => "order_dependency",
                FlakyCatCategory::UnorderedCollections => "unordered_collections",
            },
        }
    }

    /// Parses `token` within `taxonomy`; tokens of other taxonomies are rejected.
    pub fn parse(token: &str, taxonomy: Taxonomy) -> Option<Label> {
        let label = match (taxonomy, token) {
            (Taxonomy::Detection, "flaky") => Label::Detection(Detection::Flaky),
            (Taxonomy::Detection, "non_flaky") => Label::Detection(Detection::NonFlaky),
            (Taxonomy::Idoft, "NDOD") => Label::Idoft(IdoftCategory::Ndod),
            (Taxonomy::Idoft, "NOD") => Label::Idoft(IdoftCategory::Nod),
            (Taxonomy::Idoft, "OD") => Label::Idoft(IdoftCategory::Od),
            (Taxonomy::Idoft, "NIO") => Label::Idoft(IdoftCategory::Nio),
            (Taxonomy::Idoft, "ID") => Label::Idoft(IdoftCategory::Id),
            (Taxonomy::Idoft, "UD") => Label::Idoft(IdoftCategory::Ud),
            (Taxonomy::FlakyCat, "async_wait") => Label::FlakyCat(FlakyCatCategory::AsyncWait),
            (Taxonomy::FlakyCat, "concurrency") => Label::FlakyCat(FlakyCatCategory::Concurrency),
            (Taxonomy::FlakyCat, "time") => Label::FlakyCat(FlakyCatCategory::Time),
            (Taxonomy::FlakyCat, "order_dependency") => {
                Label::FlakyCat(FlakyCatCategory::TestOrderDependency)
            }
            (Taxonomy::FlakyCat, "unordered_collections") => {
                Label::FlakyCat(FlakyCatCategory::UnorderedCollections)
            }
            _ => return None,
        };
        Some(label)
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.token()
            .cmp(other.token())
            .then_with(|| self.taxonomy().cmp(&other.taxonomy()))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.token())
    }
}

/// One test case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlakyTest {
    pub id: String,
    pub project: String,
    /// Full test-method text.
    pub source: String,
    pub label: Label,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: malformed CSV: {source}")]
    Csv {
        row: usize,
        #[source]
        source: csv::Error,
    },
    #[error("missing required column `{0}` (header must contain id,project,label,source)")]
    MissingColumn(&'static str),
    #[error("empty dataset")]
    Empty,
    #[error("row {row}: unknown label token `{token}` for taxonomy {taxonomy}")]
    UnknownLabel {
        row: usize,
        token: String,
        taxonomy: Taxonomy,
    },
    #[error("row {row}: duplicate id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}: empty {field}")]
    EmptyField { row: usize, field: &'static str },
}

/// Errors from building a [`Dataset`] out of in-memory tests.
#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("test `{id}` has label `{label}` outside taxonomy {taxonomy}")]
    ForeignLabel {
        id: String,
        label: Label,
        taxonomy: Taxonomy,
    },
    #[error("test `{0}` has an empty id or source")]
    EmptyField(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("class `{0}` has a single member and cannot appear in both partitions")]
    SingletonClass(String),
    #[error("train ratio {0} is outside (0, 1]")]
    InvalidRatio(f64),
}

/// An ordered, immutable collection of tests sharing one taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    taxonomy: Taxonomy,
    tests: Vec<FlakyTest>,
}

impl Dataset {
    pub fn new(taxonomy: Taxonomy, tests: Vec<FlakyTest>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(tests.len());
        for t in &tests {
            if t.id.is_empty() || t.source.is_empty() {
                return Err(DatasetError::EmptyField(t.id.clone()));
            }
            if t.label.taxonomy() != taxonomy {
                return Err(DatasetError::ForeignLabel {
                    id: t.id.clone(),
                    label: t.label,
                    taxonomy,
                });
            }
            if !seen.insert(t.id.as_str()) {
                return Err(DatasetError::DuplicateId(t.id.clone()));
            }
        }
        Ok(Self { taxonomy, tests })
    }

    pub fn empty(taxonomy: Taxonomy) -> Self {
        Self {
            taxonomy,
            tests: Vec::new(),
        }
    }

    pub fn taxonomy(&self) -> Taxonomy {
        self.taxonomy
    }

    pub fn tests(&self) -> &[FlakyTest] {
        &self.tests
    }

    pub fn into_tests(self) -> Vec<FlakyTest> {
        self.tests
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FlakyTest> {
        self.tests.iter().find(|t| t.id == id)
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.tests {
            *counts.entry(t.label).or_insert(0) += 1;
        }
        counts
    }

    /// Project names in sorted order.
    pub fn projects(&self) -> Vec<String> {
        let mut projects: Vec<String> = self.tests.iter().map(|t| t.project.clone()).collect();
        projects.sort();
        projects.dedup();
        projects
    }

    /// The sub-dataset of one project, keeping load order.
    pub fn project(&self, name: &str) -> Dataset {
        Dataset {
            taxonomy: self.taxonomy,
            tests: self
                .tests
                .iter()
                .filter(|t| t.project == name)
                .cloned()
                .collect(),
        }
    }

    /// `(id, label)` pairs in dataset order.
    pub fn labeled_ids(&self) -> Vec<(String, Label)> {
        self.tests.iter().map(|t| (t.id.clone(), t.label)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "project", "label", "source"])?;
        for t in &self.tests {
            w.write_record([&t.id, &t.project, t.label.token(), &t.source])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> csv::Result<()> {
        let file = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Train/test partition parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    /// Fraction of each class assigned to train, in (0, 1].
    pub train_ratio: f64,
    pub seed: u64,
    /// Stratify within each project instead of globally.
    pub group_by_project: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            seed: 0,
            group_by_project: false,
        }
    }
}

/// A parsed CSV row: the test plus the optional `parent_id` column.
pub(crate) struct Row {
    pub test: FlakyTest,
    pub parent_id: Option<String>,
}

pub(crate) fn read_rows<R: Read>(reader: R, taxonomy: Taxonomy) -> Result<Vec<Row>, LoadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|source| LoadError::Csv { row: 0, source })?
        .clone();
    let column = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(LoadError::MissingColumn(name))
    };
    let (id_col, project_col, label_col, source_col) = (
        column("id")?,
        column("project")?,
        column("label")?,
        column("source")?,
    );
    let parent_col = headers.iter().position(|h| h.trim() == "parent_id");

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|source| LoadError::Csv { row, source })?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(LoadError::EmptyField { row, field: "id" });
        }
        let source = field(source_col).to_string();
        if source.is_empty() {
            return Err(LoadError::EmptyField {
                row,
                field: "source",
            });
        }
        let token = field(label_col);
        let label = Label::parse(token, taxonomy).ok_or_else(|| LoadError::UnknownLabel {
            row,
            token: token.to_string(),
            taxonomy,
        })?;
        if !seen.insert(id.clone()) {
            return Err(LoadError::DuplicateId { row, id });
        }
        let parent_id = parent_col
            .map(|c| field(c).to_string())
            .filter(|p| !p.is_empty());
        rows.push(Row {
            test: FlakyTest {
                id,
                project: field(project_col).to_string(),
                source,
                label,
            },
            parent_id,
        });
    }
    if rows.is_empty() {
        return Err(LoadError::Empty);
    }
    Ok(rows)
}

pub(crate) fn open(path: &Path) -> Result<File, LoadError> {
    File::open(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a dataset CSV, parsing every label into `taxonomy`.
pub fn load_dataset(path: &Path, taxonomy: Taxonomy) -> Result<Dataset, LoadError> {
    read_dataset(open(path)?, taxonomy)
}

pub fn read_dataset<R: Read>(reader: R, taxonomy: Taxonomy) -> Result<Dataset, LoadError> {
    let tests = read_rows(reader, taxonomy)?
        .into_iter()
        .map(|r| r.test)
        .collect();
    Ok(Dataset { taxonomy, tests })
}

/// Drops tests whose class (or `(project, class)` group) has fewer than
/// `min_count` members.
pub fn filter_min_category_support(
    d: &Dataset,
    min_count: usize,
    group_by_project: bool,
) -> Dataset {
    let key = |t: &FlakyTest| {
        (
            if group_by_project {
                Some(t.project.clone())
            } else {
                None
            },
            t.label,
        )
    };
    let mut counts: BTreeMap<(Option<String>, Label), usize> = BTreeMap::new();
    for t in d.tests() {
        *counts.entry(key(t)).or_insert(0) += 1;
    }
    Dataset {
        taxonomy: d.taxonomy,
        tests: d
            .tests()
            .iter()
            .filter(|t| counts[&key(t)] >= min_count)
            .cloned()
            .collect(),
    }
}

/// Number of a stratum's `n` members that go to train: `round(ratio·n)`
/// clamped to `[1, n-1]` so both partitions see the class.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let raw = (ratio * n as f64).round() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Splits `d` so every class (per project when `group_by_project`) is
/// represented proportionally in both partitions. Both outputs are sorted by id.
pub fn stratified_split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), SplitError> {
    if !(spec.train_ratio > 0.0 && spec.train_ratio <= 1.0) {
        return Err(SplitError::InvalidRatio(spec.train_ratio));
    }
    let mut strata: BTreeMap<(Option<&str>, Label), Vec<usize>> = BTreeMap::new();
    for (i, t) in d.tests().iter().enumerate() {
        let project = spec.group_by_project.then_some(t.project.as_str());
        strata.entry((project, t.label)).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((project, label), mut members) in strata {
        if members.len() < 2 {
            let name = match project {
                Some(p) => format!("{p}/{label}"),
                None => label.to_string(),
            };
            return Err(SplitError::SingletonClass(name));
        }
        members.shuffle(&mut rng);
        let n_train = train_count(members.len(), spec.train_ratio);
        train.extend(members[..n_train].iter().map(|&i| d.tests[i].clone()));
        test.extend(members[n_train..].iter().map(|&i| d.tests[i].clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((
        Dataset {
            taxonomy: d.taxonomy,
            tests: train,
        },
        Dataset {
            taxonomy: d.taxonomy,
            tests: test,
        },
    ))
}
