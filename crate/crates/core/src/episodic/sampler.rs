//! N-way K-shot episode sampling.

use super::data::Dataset;
use super::DataError;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One sampled item: dataset image index plus its episode-local class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub image: usize,
    pub class: usize,
}

/// One few-shot task: disjoint support and query sets over N classes.
///
/// Items are ordered class-major: all of class 0 first, then class 1, and so
/// on — K support items and T query items per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Episode class n -> dataset class position.
    pub class_map: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }
}

/// Samples an N-way K-shot episode with T queries per class.
///
/// Classes are drawn without replacement, then K+T distinct items per class,
/// split K/T, so support and query never overlap. Advances `rng`
/// deterministically.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    t_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, DataError> {
    if n_way < 2 {
        return Err(DataError::InvalidSpec(format!(
            "episodes need at least 2 classes, got {n_way}"
        )));
    }
    if k_shot == 0 || t_query == 0 {
        return Err(DataError::InvalidSpec(
            "k_shot and t_query must be positive".into(),
        ));
    }
    if dataset.num_classes() < n_way {
        return Err(DataError::InsufficientData(format!(
            "{} split has {} classes, episode needs {n_way}",
            dataset.split,
            dataset.num_classes()
        )));
    }
    let per_class = k_shot + t_query;
    let class_map: Vec<usize> = index::sample(rng, dataset.num_classes(), n_way).into_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * t_query);
    for (class, &ds_class) in class_map.iter().enumerate() {
        let items = &dataset.classes[ds_class].items;
        if items.len() < per_class {
            return Err(DataError::InsufficientData(format!(
                "class '{}' has {} items, episode needs {per_class}",
                dataset.classes[ds_class].label,
                items.len()
            )));
        }
        let picks = index::sample(rng, items.len(), per_class).into_vec();
        for &p in &picks[..k_shot] {
            support.push(EpisodeItem {
                image: items[p],
                class,
            });
        }
        for &p in &picks[k_shot..] {
            query.push(EpisodeItem {
                image: items[p],
                class,
            });
        }
    }
    Ok(Episode {
        class_map,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::data::{gen_synthetic, GenSpec};
    use rand::SeedableRng;

    fn dataset() -> Dataset {
        gen_synthetic(&GenSpec {
            classes: 40,
            per_class: 20,
            seed: 3,
        })
        .unwrap()
        .train
    }

    #[test]
    fn counts_and_disjointness() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let s: std::collections::BTreeSet<usize> = ep.support.iter().map(|i| i.image).collect();
        let q: std::collections::BTreeSet<usize> = ep.query.iter().map(|i| i.image).collect();
        assert!(s.is_disjoint(&q));
        assert_eq!(s.len(), 5);
        assert_eq!(q.len(), 75);
    }

    #[test]
    fn fixed_rng_reproduces_episode() {
        let ds = dataset();
        let a = sample_episode(&ds, 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&ds, 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_classes_errors() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_episode(&ds, 21, 1, 1, &mut rng),
            Err(DataError::InsufficientData(_))
        ));
    }

    #[test]
    fn insufficient_items_errors() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_episode(&ds, 5, 10, 11, &mut rng),
            Err(DataError::InsufficientData(_))
        ));
    }

    #[test]
    fn class_selection_is_uniform() {
        // 10^4 episodes of 5 classes over 20: each class expects 2500 picks
        // with sigma ~ 43; the fixed seed keeps this deterministic.
        let ds = gen_synthetic(&GenSpec {
            classes: 40,
            per_class: 4,
            seed: 5,
        })
        .unwrap()
        .train;
        assert_eq!(ds.num_classes(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut counts = [0usize; 20];
        let trials = 10_000;
        for _ in 0..trials {
            let ep = sample_episode(&ds, 5, 1, 1, &mut rng).unwrap();
            for c in ep.class_map {
                counts[c] += 1;
            }
        }
        let expect = trials as f64 * 5.0 / 20.0;
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - expect).abs();
            assert!(dev <= 3.0 * sigma, "class {c}: count {n}, dev {dev:.1}");
        }
    }

    #[test]
    fn support_query_per_class_counts() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let ep = sample_episode(&ds, 4, 3, 2, &mut rng).unwrap();
            for class in 0..4 {
                assert_eq!(ep.support.iter().filter(|i| i.class == class).count(), 3);
                assert_eq!(ep.query.iter().filter(|i| i.class == class).count(), 2);
            }
        }
    }
}
