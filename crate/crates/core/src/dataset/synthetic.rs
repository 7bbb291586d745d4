//! Generated datasets with known structure.

use rand::distributions::{Distribution, WeightedIndex};

use super::SequenceDataset;
use crate::rng::rng_from_seed;

/// User `u` walks the item cycle from item `u mod n`: every item is
/// always followed by its successor modulo `num_items`.
pub fn cycle_dataset(num_items: usize, num_users: usize, length: usize) -> SequenceDataset {
    let sequences = (0..num_users)
        .map(|u| (0..length).map(|t| (u + t) % num_items).collect())
        .collect();
    SequenceDataset::from_sequences(num_items, sequences)
}

/// Zipf weights `1 / rank^exponent`, item 0 being the most popular.
pub fn zipf_weights(num_items: usize, exponent: f64) -> Vec<f64> {
    (1..=num_items).map(|r| (r as f64).powf(-exponent)).collect()
}

/// Every user gets `length` distinct items, drawn one after another from a
/// Zipf profile over the catalog (redrawing on repeats).
pub fn zipf_dataset(num_items: usize, num_users: usize, length: usize, exponent: f64, seed: u64) -> SequenceDataset {
    assert!(
        length <= num_items,
        "cannot draw {length} distinct items from {num_items}"
    );
    let dist = WeightedIndex::new(zipf_weights(num_items, exponent)).expect("positive weights");
    let mut rng = rng_from_seed(seed);
    let sequences = (0..num_users)
        .map(|_| {
            let mut seq: Vec<usize> = Vec::with_capacity(length);
            while seq.len() < length {
                let i = dist.sample(&mut rng);
                if !seq.contains(&i) {
                    seq.push(i);
                }
            }
            seq
        })
        .collect();
    SequenceDataset::from_sequences(num_items, sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_is_deterministic_successor() {
        let ds = cycle_dataset(20, 200, 12);
        assert_eq!(ds.num_users(), 200);
        for s in &ds.sequences {
            assert_eq!(s.len(), 12);
            assert!(s.windows(2).all(|w| w[1] == (w[0] + 1) % 20));
        }
    }

    #[test]
    fn zipf_sequences_are_distinct_and_head_heavy() {
        let ds = zipf_dataset(1000, 300, 7, 1.0, 1);
        for s in &ds.sequences {
            let mut d = s.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 7);
        }
        assert!(ds.popularity[0] > ds.popularity[500]);
        assert_eq!(ds.popularity.iter().sum::<u64>() as usize, ds.num_actions());
    }
}
