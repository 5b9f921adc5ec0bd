use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draws `n` distinct keywords uniformly without replacement from the
/// unique titles. Duplicate titles count once.
pub fn sample_keywords(titles: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if titles.is_empty() {
        return Err(Error::invalid("keyword sampling needs at least one title"));
    }
    let mut seen = HashSet::new();
    let unique: Vec<&String> = titles.iter().filter(|t| seen.insert(t.as_str())).collect();
    if n > unique.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} keywords from {} unique titles",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, unique.len(), n)
        .into_iter()
        .map(|i| unique[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn titles(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn distinct_members() {
        let t = titles(&["a", "b", "c"]);
        let k = sample_keywords(&t, 2, 7).unwrap();
        assert_eq!(k.len(), 2);
        assert_ne!(k[0], k[1]);
        assert!(k.iter().all(|x| t.contains(x)));
    }

    #[test]
    fn singleton() {
        for seed in [0, 1, 99] {
            assert_eq!(sample_keywords(&titles(&["a"]), 1, seed).unwrap(), vec!["a"]);
        }
    }

    #[test]
    fn deterministic() {
        let t: Vec<String> = (0..500).map(|i| format!("title-{i}")).collect();
        assert_eq!(
            sample_keywords(&t, 50, 11).unwrap(),
            sample_keywords(&t, 50, 11).unwrap()
        );
        assert_ne!(
            sample_keywords(&t, 50, 11).unwrap(),
            sample_keywords(&t, 50, 12).unwrap()
        );
    }

    #[test]
    fn too_many_requested() {
        assert!(sample_keywords(&titles(&["a", "a", "b"]), 3, 0).is_err());
        assert!(sample_keywords(&[], 0, 0).is_err());
    }
}
