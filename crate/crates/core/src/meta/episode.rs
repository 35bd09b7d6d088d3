use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::retriever::Hit;

/// One C-way N-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Global class ids in ascending order; row `i` of the prototype matrix
    /// belongs to `classes[i]`.
    pub classes: Vec<usize>,
    /// `support[i]` holds the N examples of `classes[i]`.
    pub support: Vec<Vec<LabeledExample>>,
    pub query: Vec<LabeledExample>,
    /// Retrieval results per query, filled before scoring.
    pub retrieved: Vec<Vec<Hit>>,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Episode-local target index of a query.
    pub fn target(&self, query: &LabeledExample) -> usize {
        self.classes
            .binary_search(&query.label)
            .expect("query label belongs to an episode class")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.query.iter().map(|q| self.target(q)).collect()
    }
}

/// Samples C classes uniformly without replacement, then N support and a
/// share of the q queries from each. Queries are spread as evenly as
/// possible over the classes, so each class needs `N + ceil(q / C)` examples.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    c: usize,
    n: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    let per_class = n + q.div_ceil(c);
    let eligible: Vec<usize> = dataset
        .by_class
        .iter()
        .filter(|(_, ex)| ex.len() >= per_class)
        .map(|(&k, _)| k)
        .collect();
    if eligible.len() < c {
        return Err(Error::Sampling(format!(
            "{c}-way {n}-shot with {q} queries needs {c} classes holding at least {per_class} examples; \
             only {} qualify",
            eligible.len()
        )));
    }
    let picked: Vec<usize> = index::sample(rng, eligible.len(), c)
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    // query quota follows the random pick order, so the classes receiving the
    // remainder are random too
    let base = q / c;
    let extra = q % c;
    let mut chosen: Vec<(usize, usize)> = picked
        .iter()
        .enumerate()
        .map(|(i, &class)| (class, base + usize::from(i < extra)))
        .collect();
    chosen.sort_unstable();

    let mut classes = Vec::with_capacity(c);
    let mut support = Vec::with_capacity(c);
    let mut query = Vec::with_capacity(q);
    for (class, n_query) in chosen {
        let pool = &dataset.by_class[&class];
        let idx = index::sample(rng, pool.len(), n + n_query).into_vec();
        classes.push(class);
        support.push(idx[..n].iter().map(|&i| pool[i].clone()).collect());
        query.extend(idx[n..].iter().map(|&i| pool[i].clone()));
    }
    query.shuffle(rng);
    Ok(Episode {
        classes,
        support,
        retrieved: vec![Vec::new(); query.len()],
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(classes: usize, per_class: usize) -> Dataset {
        let pairs: Vec<(String, String)> = (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| (format!("class{c:02}"), format!("c{c} s{i} word")))
            })
            .collect();
        Dataset::from_pairs(pairs).unwrap()
    }

    #[test]
    fn five_way_one_shot_shape() {
        let ds = dataset(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&ds, 5, 1, 5, &mut rng).unwrap();
        assert_eq!(ep.classes.len(), 5);
        assert!(ep.classes.windows(2).all(|w| w[0] < w[1]));
        assert!(ep.support.iter().all(|s| s.len() == 1));
        assert_eq!(ep.query.len(), 5);
        for q in &ep.query {
            assert!(ep.support.iter().flatten().all(|s| s != q));
            assert!(ep.classes.contains(&q.label));
        }
        // one query per class when q == C
        let mut t = ep.targets();
        t.sort();
        assert_eq!(t, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn uneven_queries_spread() {
        let ds = dataset(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ep = sample_episode(&ds, 3, 2, 7, &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for t in ep.targets() {
            counts[t] += 1;
        }
        let mut sorted = counts;
        sorted.sort();
        assert_eq!(sorted, [2, 2, 3]);
    }

    #[test]
    fn pigeonhole_failure() {
        let ds = dataset(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_episode(&ds, 5, 1, 5, &mut rng),
            Err(Error::Sampling(_))
        ));
        let few = dataset(3, 10);
        assert!(sample_episode(&few, 5, 1, 5, &mut rng).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let ds = dataset(8, 10);
        let a = sample_episode(&ds, 5, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&ds, 5, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
