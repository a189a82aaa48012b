use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Corpus;
use crate::error::{DopError, Result};

/// Leave-one-domain-out split, stored as id lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_domain: String,
    pub few_shot_k: usize,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Source examples are shuffled and the first `valid_size` held out; target
/// examples are shuffled and the first `few_shot_k` move into train. The
/// shuffles depend only on `seed`, so larger `k` extends smaller ones.
pub fn build_split(
    corpus: &Corpus,
    target_domain: &str,
    valid_size: usize,
    few_shot_k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if !corpus.domains().iter().any(|d| d == target_domain) {
        return Err(DopError::contract(format!("target domain {target_domain} not in corpus")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source: Vec<String> = corpus
        .examples()
        .iter()
        .filter(|e| e.domain != target_domain)
        .map(|e| e.id.clone())
        .collect();
    let mut target: Vec<String> = corpus
        .in_domain(target_domain)
        .map(|e| e.id.clone())
        .collect();
    if valid_size >= source.len() {
        return Err(DopError::contract(format!(
            "valid_size {valid_size} leaves no training data among {} source examples",
            source.len()
        )));
    }
    if few_shot_k > target.len() {
        return Err(DopError::contract(format!(
            "few_shot_k {few_shot_k} exceeds {} target examples",
            target.len()
        )));
    }
    source.shuffle(&mut rng);
    target.shuffle(&mut rng);
    let valid = source.drain(..valid_size).collect();
    let mut train = source;
    let test = target.split_off(few_shot_k);
    train.extend(target);
    Ok(SplitPlan {
        target_domain: target_domain.to_string(),
        few_shot_k,
        train,
        valid,
        test,
    })
}

impl SplitPlan {
    /// Keeps at most `n` source-domain training ids; few-shot target ids
    /// are always kept.
    pub fn limit_source(&mut self, n: usize) {
        let k = self.few_shot_k;
        let split = self.train.len() - k;
        let few: Vec<String> = self.train.drain(split..).collect();
        self.train.truncate(n);
        self.train.extend(few);
        debug_assert!(self.train.len() <= n + k);
    }

    /// The last `n` test ids. These do not depend on `few_shot_k` as long as
    /// `k + n` fits in the target domain.
    pub fn eval_ids(&self, n: Option<usize>) -> &[String] {
        match n {
            Some(n) if n < self.test.len() => &self.test[self.test.len() - n..],
            _ => &self.test,
        }
    }

    /// SHA-256 over the id lists.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("split plans serialize");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| DopError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DopError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{generate_synthetic_corpus, SyntheticSpec};

    fn corpus() -> Corpus {
        generate_synthetic_corpus(&SyntheticSpec {
            examples_per_domain: 60,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_shot_partition() {
        let c = corpus();
        let plan = build_split(&c, "hotel", 20, 0, 3).unwrap();
        let all: Vec<&String> = plan.train.iter().chain(&plan.valid).chain(&plan.test).collect();
        let set: HashSet<&String> = all.iter().copied().collect();
        assert_eq!(all.len(), c.len());
        assert_eq!(set.len(), c.len());
        assert!(plan.test.iter().all(|id| id.starts_with("hotel-")));
        assert!(plan.train.iter().chain(&plan.valid).all(|id| !id.starts_with("hotel-")));
        assert_eq!(plan.valid.len(), 20);
    }

    #[test]
    fn few_shot_moves_target_examples() {
        let c = corpus();
        let plan = build_split(&c, "taxi", 20, 50, 3).unwrap();
        let in_train = plan.train.iter().filter(|id| id.starts_with("taxi-")).count();
        assert_eq!(in_train, 50);
        assert_eq!(plan.test.len(), 10);
        let test: HashSet<_> = plan.test.iter().collect();
        assert!(plan.train.iter().all(|id| !test.contains(id)));

        let small = build_split(&c, "taxi", 20, 10, 3).unwrap();
        let few_small: HashSet<_> = small.train.iter().filter(|i| i.starts_with("taxi-")).collect();
        let few_big: HashSet<_> = plan.train.iter().filter(|i| i.starts_with("taxi-")).collect();
        assert!(few_small.is_subset(&few_big));
        assert_eq!(small.eval_ids(Some(10)), plan.eval_ids(Some(10)));
    }

    #[test]
    fn contract_errors() {
        let c = corpus();
        assert!(build_split(&c, "spaceport", 20, 0, 0).is_err());
        assert!(build_split(&c, "taxi", 240, 0, 0).is_err());
        assert!(build_split(&c, "taxi", 20, 61, 0).is_err());
    }

    #[test]
    fn limit_source_keeps_few_shot() {
        let c = corpus();
        let mut plan = build_split(&c, "taxi", 20, 5, 1).unwrap();
        plan.limit_source(30);
        assert_eq!(plan.train.len(), 35);
        assert_eq!(plan.train.iter().filter(|i| i.starts_with("taxi-")).count(), 5);
    }

    #[test]
    fn json_round_trip_and_hash() {
        let c = corpus();
        let plan = build_split(&c, "train", 20, 0, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        plan.save(&p).unwrap();
        let back = SplitPlan::load(&p).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.hash(), plan.hash());
        assert_ne!(build_split(&c, "train", 20, 0, 10).unwrap().hash(), plan.hash());
    }
}
