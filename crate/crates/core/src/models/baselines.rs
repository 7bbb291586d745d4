//! Non-neural reference scorers.

use std::collections::HashMap;

use super::{check_items, ModelError, ScoreFunction};

/// Scores each item by its interaction count, ignoring the prefix.
#[derive(Clone, Debug)]
pub struct PopularityScorer {
    name: String,
    counts: Vec<u64>,
}

impl PopularityScorer {
    pub fn new(name: &str, counts: Vec<u64>) -> Result<Self, ModelError> {
        if counts.is_empty() {
            return Err(ModelError::InvalidConfig("popularity counts are empty".into()));
        }
        Ok(Self {
            name: name.to_string(),
            counts,
        })
    }
}

impl ScoreFunction for PopularityScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        check_items(prefix, self.counts.len())?;
        check_items(candidates, self.counts.len())?;
        Ok(candidates.iter().map(|&c| self.counts[c] as f64).collect())
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

/// First-order transition model: scores `j` after the last prefix item
/// `i` by the add-one smoothed estimate `(c(i→j) + 1) / (c(i→·) + n)`.
#[derive(Clone, Debug)]
pub struct MarkovScorer {
    name: String,
    num_items: usize,
    transitions: Vec<HashMap<usize, u64>>,
    outgoing: Vec<u64>,
}

impl MarkovScorer {
    pub fn fit(name: &str, num_items: usize, train: &[Vec<usize>]) -> Result<Self, ModelError> {
        if num_items == 0 {
            return Err(ModelError::InvalidConfig("empty catalog".into()));
        }
        let mut transitions = vec![HashMap::new(); num_items];
        let mut outgoing = vec![0u64; num_items];
        for seq in train {
            check_items(seq, num_items)?;
            for w in seq.windows(2) {
                *transitions[w[0]].entry(w[1]).or_insert(0) += 1;
                outgoing[w[0]] += 1;
            }
        }
        Ok(Self {
            name: name.to_string(),
            num_items,
            transitions,
            outgoing,
        })
    }

    pub fn transition_count(&self, from: usize, to: usize) -> u64 {
        self.transitions
            .get(from)
            .and_then(|m| m.get(&to))
            .copied()
            .unwrap_or(0)
    }
}

impl ScoreFunction for MarkovScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        let &last = prefix.last().ok_or(ModelError::EmptyPrefix)?;
        check_items(prefix, self.num_items)?;
        check_items(candidates, self.num_items)?;
        let denom = (self.outgoing[last] + self.num_items as u64) as f64;
        Ok(candidates
            .iter()
            .map(|&c| (self.transition_count(last, c) + 1) as f64 / denom)
            .collect())
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split;
    use crate::dataset::synthetic::cycle_dataset;
    use crate::metrics::MetricSpec;
    use crate::ranking::evaluate;
    use crate::targetset::TargetSetSpec;

    #[test]
    fn popularity_scores_are_counts() {
        let p = PopularityScorer::new("pop", vec![5, 1, 0]).unwrap();
        assert_eq!(p.score(&[2], &[1, 0, 2]).unwrap(), vec![1.0, 5.0, 0.0]);
        assert!(p.score(&[0], &[3]).is_err());
    }

    #[test]
    fn markov_counts_transitions_from_the_last_item() {
        let train = vec![vec![0, 1], vec![0, 1, 2], vec![2, 0, 1], vec![0, 2]];
        let m = MarkovScorer::fit("mc", 4, &train).unwrap();
        assert_eq!(m.transition_count(0, 1), 3);
        assert_eq!(m.transition_count(0, 2), 1);
        // 0 has 4 outgoing transitions; add-one over 4 items.
        let s = m.score(&[3, 0], &[1, 2, 3]).unwrap();
        assert_eq!(s, vec![4.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0]);
        assert!(matches!(m.score(&[], &[1]), Err(ModelError::EmptyPrefix)));
    }

    #[test]
    fn markov_is_perfect_on_the_cycle() {
        let ds = cycle_dataset(20, 200, 12);
        let sp = split(&ds).unwrap();
        let m = MarkovScorer::fit("mc", 20, &sp.train).unwrap();
        let run = evaluate(&[&m], &sp.validation, 20, &TargetSetSpec::full(), &[]).unwrap();
        assert_eq!(run.models[0].mean(MetricSpec::hr(1)).unwrap(), 1.0);
    }
}
