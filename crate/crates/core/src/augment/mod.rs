//! Dataset augmentation by duplicating tests and mutating non-critical
//! lexical elements, in the spirit of minority oversampling.
//!
//! Variants are allocated to classes in proportion to class size (largest
//! remainder), generated with 1–3 random mutation operators each, and kept
//! only when their source is new to the whole dataset.

mod lexer;
mod mutation;

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use lexer::{is_keyword, lex, CodeToken, LexError, TokenKind, KEYWORDS};
pub use mutation::{
    apply, mutate, mutate_source, perturb_integer_literal, rename_all, rename_candidates,
    scale_float_literal, MutateError, MutationOp,
};

use crate::dataset::{self, Dataset, FlakyTest, Label, LoadError, Taxonomy};

/// A generated test derived from an original.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub parent_id: String,
    pub id: String,
    pub project: String,
    pub source: String,
    /// Always the parent's label.
    pub label: Label,
}

impl Variant {
    pub fn to_test(&self) -> FlakyTest {
        FlakyTest {
            id: self.id.clone(),
            project: self.project.clone(),
            source: self.source.clone(),
            label: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub originals: Dataset,
    /// Sorted by parent id, then generation attempt.
    pub variants: Vec<Variant>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("target total {target} is smaller than the dataset ({have} tests)")]
    TargetTooSmall { target: usize, have: usize },
    #[error("retry budget exhausted: generated {achieved} of {requested} unique variants")]
    Exhausted { achieved: usize, requested: usize },
    #[error("augmented file is inconsistent: {0}")]
    Inconsistent(String),
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.originals.len() + self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Originals followed by variants, as one dataset.
    pub fn to_dataset(&self) -> Dataset {
        let tests = self
            .originals
            .tests()
            .iter()
            .cloned()
            .chain(self.variants.iter().map(Variant::to_test))
            .collect();
        Dataset::new(self.originals.taxonomy(), tests).expect("variant ids are unique")
    }

    /// Variants whose parent is one of `parents`.
    pub fn variants_of<'a>(
        &'a self,
        parents: &'a HashSet<&str>,
    ) -> impl Iterator<Item = &'a Variant> {
        self.variants
            .iter()
            .filter(move |v| parents.contains(v.parent_id.as_str()))
    }

    /// Writes the dataset CSV schema plus a trailing `parent_id` column,
    /// empty for originals.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "project", "label", "source", "parent_id"])?;
        for t in self.originals.tests() {
            w.write_record([&t.id, &t.project, t.label.token(), &t.source, ""])?;
        }
        for v in &self.variants {
            w.write_record([&v.id, &v.project, v.label.token(), &v.source, &v.parent_id])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> csv::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Error)]
pub enum AugmentLoadError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Reads a CSV that may carry a `parent_id` column. Rows with a parent are
/// variants; all others are originals.
pub fn read_augmented<R: Read>(
    reader: R,
    taxonomy: Taxonomy,
) -> Result<AugmentedDataset, AugmentLoadError> {
    let rows = dataset::read_rows(reader, taxonomy)?;
    let mut originals = Vec::new();
    let mut variants = Vec::new();
    for row in rows {
        match row.parent_id {
            None => originals.push(row.test),
            Some(parent_id) => variants.push(Variant {
                parent_id,
                id: row.test.id,
                project: row.test.project,
                source: row.test.source,
                label: row.test.label,
            }),
        }
    }
    let originals =
        Dataset::new(taxonomy, originals).map_err(|e| AugmentError::Inconsistent(e.to_string()))?;
    for v in &variants {
        let parent = originals.get(&v.parent_id).ok_or_else(|| {
            AugmentError::Inconsistent(format!(
                "variant `{}` has unknown parent `{}`",
                v.id, v.parent_id
            ))
        })?;
        if parent.label != v.label {
            return Err(AugmentError::Inconsistent(format!(
                "variant `{}` label differs from parent `{}`",
                v.id, v.parent_id
            ))
            .into());
        }
    }
    Ok(AugmentedDataset {
        originals,
        variants,
    })
}

pub fn load_augmented(
    path: &Path,
    taxonomy: Taxonomy,
) -> Result<AugmentedDataset, AugmentLoadError> {
    read_augmented(dataset::open(path)?, taxonomy)
}

/// Splits `total` across classes proportionally to `sizes` using the
/// largest-remainder method; ties go to the earlier class.
pub fn proportional_allocation(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|s| s * total / n).collect();
    let mut remainders: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, s)| ((s * total) % n, i))
        .collect();
    // larger remainder first, then lower index
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - alloc.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Retry budget per missing variant.
pub const ATTEMPTS_PER_VARIANT: usize = 100;

/// Grows `d` to `target_total` tests with unique mutated variants.
/// Deterministic for a given seed.
pub fn augment_dataset(
    d: &Dataset,
    target_total: usize,
    seed: u64,
) -> Result<AugmentedDataset, AugmentError> {
    if target_total < d.len() {
        return Err(AugmentError::TargetTooSmall {
            target: target_total,
            have: d.len(),
        });
    }
    let deficit = target_total - d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: BTreeMap<Label, Vec<&FlakyTest>> = BTreeMap::new();
    for t in d.tests() {
        by_class.entry(t.label).or_default().push(t);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let quotas = proportional_allocation(&sizes, deficit);

    let mut seen_sources: HashSet<String> = d.tests().iter().map(|t| t.source.clone()).collect();
    let mut used_ids: HashSet<String> = d.tests().iter().map(|t| t.id.clone()).collect();
    let mut per_parent: BTreeMap<&str, usize> = BTreeMap::new();
    // (parent id, attempt index, variant)
    let mut generated: Vec<(String, usize, Variant)> = Vec::with_capacity(deficit);

    let budget = ATTEMPTS_PER_VARIANT * deficit;
    let mut attempts = 0usize;
    for ((_, members), quota) in by_class.iter().zip(quotas) {
        let mut made = 0;
        while made < quota {
            if attempts >= budget {
                return Err(AugmentError::Exhausted {
                    achieved: generated.len(),
                    requested: deficit,
                });
            }
            attempts += 1;
            let parent = *members.choose(&mut rng).expect("classes are non-empty");
            let n_ops = rng.random_range(1..=3);
            let mut ops = MutationOp::ALL.to_vec();
            ops.shuffle(&mut rng);
            ops.truncate(n_ops);
            let Ok(source) = mutate(parent, &ops, &mut rng) else {
                continue;
            };
            if !seen_sources.insert(source.clone()) {
                continue;
            }
            let counter = per_parent.entry(parent.id.as_str()).or_insert(0);
            let id = loop {
                *counter += 1;
                let candidate = format!("{}~aug{}", parent.id, counter);
                if used_ids.insert(candidate.clone()) {
                    break candidate;
                }
            };
            generated.push((
                parent.id.clone(),
                attempts,
                Variant {
                    parent_id: parent.id.clone(),
                    id,
                    project: parent.project.clone(),
                    source,
                    label: parent.label,
                },
            ));
            made += 1;
        }
    }
    generated.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(AugmentedDataset {
        originals: d.clone(),
        variants: generated.into_iter().map(|(_, _, v)| v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FlakyCatCategory, Label};

    fn fixture() -> Dataset {
        Dataset::new(
            Taxonomy::FlakyCat,
            vec![
                FlakyTest {
                    id: "a".into(),
                    project: "p".into(),
                    source: "void a() { int n = 3; Thread.sleep(100); assertEquals(\"ok\", s); }"
                        .into(),
                    label: Label::FlakyCat(FlakyCatCategory::AsyncWait),
                },
                FlakyTest {
                    id: "b".into(),
                    project: "q".into(),
                    source: "void b() { long t = System.currentTimeMillis(); double r = 0.5; }"
                        .into(),
                    label: Label::FlakyCat(FlakyCatCategory::Time),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn allocation_matches_largest_remainder() {
        assert_eq!(
            proportional_allocation(&[125, 48, 42, 103, 51], 270),
            vec![92, 35, 31, 75, 37]
        );
        assert_eq!(proportional_allocation(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(proportional_allocation(&[5, 5], 0), vec![0, 0]);
    }

    #[test]
    fn allocation_is_within_one_of_exact_share() {
        let sizes = [7, 13, 1, 29];
        for total in 0..100 {
            let alloc = proportional_allocation(&sizes, total);
            assert_eq!(alloc.iter().sum::<usize>(), total);
            for (a, s) in alloc.iter().zip(sizes) {
                let exact = total as f64 * s as f64 / 50.0;
                assert!((*a as f64 - exact).abs() < 1.0);
            }
        }
    }

    #[test]
    fn small_fixture_gets_unique_variants() {
        let d = fixture();
        let aug = augment_dataset(&d, 6, 9).unwrap();
        assert_eq!(aug.variants.len(), 4);
        let mut sources: HashSet<&str> = d.tests().iter().map(|t| t.source.as_str()).collect();
        for v in &aug.variants {
            assert!(sources.insert(&v.source), "duplicate {}", v.source);
            assert!(lex(&v.source).is_ok());
            assert_eq!(v.label, d.get(&v.parent_id).unwrap().label);
            assert_eq!(v.project, d.get(&v.parent_id).unwrap().project);
        }
        // two classes of one test each: two variants per class
        let per_a = aug.variants.iter().filter(|v| v.parent_id == "a").count();
        assert_eq!(per_a, 2);
        assert_eq!(aug.to_dataset().len(), 6);
    }

    #[test]
    fn zero_deficit_is_identity() {
        let d = fixture();
        let aug = augment_dataset(&d, 2, 0).unwrap();
        assert!(aug.variants.is_empty());
        assert_eq!(aug.originals, d);
    }

    #[test]
    fn target_below_size_rejected() {
        assert_eq!(
            augment_dataset(&fixture(), 1, 0),
            Err(AugmentError::TargetTooSmall { target: 1, have: 2 })
        );
    }

    #[test]
    fn unmutable_sources_exhaust_budget() {
        let d = Dataset::new(
            Taxonomy::FlakyCat,
            vec![FlakyTest {
                id: "x".into(),
                project: "p".into(),
                source: "void x() { run(); }".into(),
                label: Label::FlakyCat(FlakyCatCategory::Concurrency),
            }],
        )
        .unwrap();
        assert_eq!(
            augment_dataset(&d, 3, 0),
            Err(AugmentError::Exhausted {
                achieved: 0,
                requested: 2
            })
        );
    }

    #[test]
    fn csv_round_trip_with_parent_column() {
        let aug = augment_dataset(&fixture(), 5, 1).unwrap();
        let mut buf = Vec::new();
        aug.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,project,label,source,parent_id\n"));
        let back = read_augmented(buf.as_slice(), Taxonomy::FlakyCat).unwrap();
        assert_eq!(back, aug);
    }

    #[test]
    fn orphan_variant_rejected() {
        let csv = "id,project,label,source,parent_id\na,p,time,x,\nb,p,time,y,zzz\n";
        assert!(read_augmented(csv.as_bytes(), Taxonomy::FlakyCat).is_err());
    }
}
