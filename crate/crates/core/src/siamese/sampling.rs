use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

/// Indices of an (anchor, positive, negative) example triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("triplets need at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("no class has two members to serve as anchor and positive")]
    NoAnchorClass,
}

/// Draws `count` random triplets: anchors uniform over all examples whose
/// class has at least two members, positives uniform over the anchor's
/// classmates, negatives uniform over every other-class example.
pub fn sample_triplets<L: Ord, R: Rng + ?Sized>(
    labels: &[L],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>, SampleError> {
    let mut classes: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(SampleError::TooFewClasses(classes.len()));
    }
    // class slot per example, and each class's complement
    let groups: Vec<&Vec<usize>> = classes.values().collect();
    let mut slot = vec![0usize; labels.len()];
    for (c, members) in groups.iter().enumerate() {
        for &i in members.iter() {
            slot[i] = c;
        }
    }
    let others: Vec<Vec<usize>> = (0..groups.len())
        .map(|c| (0..labels.len()).filter(|&i| slot[i] != c).collect())
        .collect();
    let anchors: Vec<usize> = (0..labels.len())
        .filter(|&i| groups[slot[i]].len() >= 2)
        .collect();
    if anchors.is_empty() {
        return Err(SampleError::NoAnchorClass);
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = anchors[rng.random_range(0..anchors.len())];
        let c = slot[anchor];
        let mates = groups[c];
        let own = mates.iter().position(|&i| i == anchor).unwrap();
        let mut j = rng.random_range(0..mates.len() - 1);
        if j >= own {
            j += 1;
        }
        let negative = others[c][rng.random_range(0..others[c].len())];
        out.push(Triplet {
            anchor,
            positive: mates[j],
            negative,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn singleton_class_never_anchors() {
        let labels = ["A", "A", "B"];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts = sample_triplets(&labels, 4, &mut rng).unwrap();
        assert_eq!(ts.len(), 4);
        for t in ts {
            assert!(t.anchor < 2);
            assert_eq!(t.positive, 1 - t.anchor);
            assert_eq!(t.negative, 2);
        }
    }

    #[test]
    fn single_class_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_triplets(&["x", "x", "x"], 3, &mut rng),
            Err(SampleError::TooFewClasses(1))
        );
        assert_eq!(
            sample_triplets(&["x", "y"], 3, &mut rng),
            Err(SampleError::NoAnchorClass)
        );
    }

    #[test]
    fn same_seed_same_triplets() {
        let labels: Vec<u8> = (0..30).map(|i| i % 4).collect();
        let a = sample_triplets(&labels, 50, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_triplets(&labels, 50, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplets_respect_labels_and_cover_roles_uniformly() {
        let labels = [0, 0, 0, 1, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = sample_triplets(&labels, 30_000, &mut rng).unwrap();
        let mut anchor_hits: HashMap<usize, usize> = HashMap::new();
        for t in &ts {
            assert_eq!(labels[t.anchor], labels[t.positive]);
            assert_ne!(t.anchor, t.positive);
            assert_ne!(labels[t.anchor], labels[t.negative]);
            *anchor_hits.entry(t.anchor).or_default() += 1;
        }
        // five eligible anchors (index 5 is a singleton), each ~6000 hits
        assert!(!anchor_hits.contains_key(&5));
        for i in 0..5 {
            let hits = anchor_hits[&i] as f64;
            assert!((hits - 6000.0).abs() < 400.0, "anchor {i}: {hits}");
        }
    }
}
