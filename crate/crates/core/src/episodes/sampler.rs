//! One-way episodic sampling.

use rand::seq::{index, IndexedRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { ways: 1, shots: 1, queries: 1 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways != 1 {
            return Err(Error::config(format!("only 1-way episodes are supported, got {}", self.ways)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::config("shots and queries must be at least 1"));
        }
        Ok(())
    }

    pub fn needed(&self) -> usize {
        self.shots + self.queries
    }
}

/// Dataset indices of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Picks a class with enough images, then `K + Q` distinct images of it.
pub fn sample_episode(ds: &Dataset, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
    spec.validate()?;
    let need = spec.needed();
    let groups = ds.by_class();
    let eligible: Vec<&(usize, Vec<usize>)> = groups.iter().filter(|(_, v)| v.len() >= need).collect();
    let Some((class, items)) = eligible.choose(rng).copied() else {
        let available = groups.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        return Err(Error::InsufficientData { needed: need, available });
    };
    let picks = index::sample(rng, items.len(), need);
    let chosen: Vec<usize> = picks.iter().map(|i| items[i]).collect();
    Ok(Episode { class: *class, support: chosen[..spec.shots].to_vec(), query: chosen[spec.shots..].to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::data::{gen_domain, SyntheticDomain};
    use crate::rng;
    use proptest::prelude::*;

    fn ds(n: usize) -> Dataset {
        let d = SyntheticDomain { image_size: [16, 16], classes: 2, ..SyntheticDomain::source() };
        gen_domain(&d, n, 1).unwrap()
    }

    #[test]
    fn examples() {
        let d = ds(20);
        let mut r = rng::stream(0, &[]);
        let e = sample_episode(&d, &EpisodeSpec::default(), &mut r).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (1, 1));
        assert_ne!(e.support[0], e.query[0]);

        let five = EpisodeSpec { shots: 5, ..Default::default() };
        let e = sample_episode(&d, &five, &mut r).unwrap();
        let mut s = e.support.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);

        let tiny = ds(3);
        assert!(matches!(
            sample_episode(&tiny, &five, &mut r),
            Err(Error::InsufficientData { needed: 6, available: 2 })
        ));
        assert!(sample_episode(&d, &EpisodeSpec { ways: 2, ..Default::default() }, &mut r).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn never_leaks_and_single_class(seed in any::<u64>(), shots in 1usize..4, queries in 1usize..3) {
            let d = ds(16);
            let spec = EpisodeSpec { ways: 1, shots, queries };
            let e = sample_episode(&d, &spec, &mut rng::stream(seed, &[])).unwrap();
            prop_assert!(e.support.iter().all(|s| !e.query.contains(s)));
            prop_assert!(e.support.iter().chain(&e.query).all(|&i| d.samples[i].class == e.class));
        }
    }
}
