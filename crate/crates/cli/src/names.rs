//! Concept names, alias files and the `name:weight,...` distribution grammar.

use std::collections::BTreeMap;
use std::path::Path;

use distok::pool::ConceptPool;
use distok::world::ClassDistribution;

use crate::error::CliError;

/// Weights may sum to anything within this distance of 1 and are renormalized.
pub const DIST_TOLERANCE: f64 = 0.01;

pub struct Names {
    names: Vec<String>,
    aliases: BTreeMap<String, usize>,
    num_known: usize,
}

impl Names {
    pub fn new(pool: &ConceptPool, aliases: BTreeMap<String, String>) -> Result<Self, CliError> {
        let names: Vec<String> = (0..pool.len()).map(|id| pool.name_of(id)).collect();
        let mut out = Self {
            names,
            aliases: BTreeMap::new(),
            num_known: pool.num_known(),
        };
        for (alias, target) in aliases {
            let id = out.resolve(&target)?;
            out.aliases.insert(alias, id);
        }
        Ok(out)
    }

    /// Reads a JSON object mapping alias to canonical name, e.g. `{"cat": "c0"}`.
    pub fn load(pool: &ConceptPool, aliases: Option<&Path>) -> Result<Self, CliError> {
        let map = match aliases {
            Some(path) => {
                let text = distok::codec::read_text(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("alias file {}: {e}", path.display())))?
            }
            None => BTreeMap::new(),
        };
        Self::new(pool, map)
    }

    pub fn resolve(&self, name: &str) -> Result<usize, CliError> {
        if let Some(&id) = self.aliases.get(name) {
            return Ok(id);
        }
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Usage(format!("unknown concept {name:?}; valid names: {}", self.valid())))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    fn valid(&self) -> String {
        let mut all: Vec<&str> = self.names.iter().map(String::as_str).collect();
        all.extend(self.aliases.keys().map(String::as_str));
        all.join(", ")
    }

    /// `a,b` into two ids.
    pub fn parse_pair(&self, text: &str) -> Result<(usize, usize), CliError> {
        match text.split(',').map(str::trim).collect::<Vec<_>>()[..] {
            [a, b] => Ok((self.resolve(a)?, self.resolve(b)?)),
            _ => Err(CliError::Usage(format!("--pair expects two names as a,b, got {text:?}"))),
        }
    }

    /// Parses `name:weight,...` over known concepts.
    pub fn parse_distribution(&self, text: &str) -> Result<ClassDistribution, CliError> {
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, weight) = item
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("expected name:weight, got {item:?}")))?;
            let id = self.resolve(name.trim())?;
            if id >= self.num_known {
                return Err(CliError::Usage(format!(
                    "{name:?} is a novel concept; distributions range over known concepts only"
                )));
            }
            if support.contains(&id) {
                return Err(CliError::Usage(format!("{name:?} appears twice")));
            }
            let w: f64 = weight
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad weight {weight:?} for {name:?}")))?;
            if !w.is_finite() || w < 0.0 {
                return Err(CliError::Usage(format!("weight for {name:?} must be finite and non-negative")));
            }
            support.push(id);
            weights.push(w);
        }
        if support.is_empty() {
            return Err(CliError::Usage("empty distribution".into()));
        }
        Ok(ClassDistribution::from_weights(support, weights, DIST_TOLERANCE)?)
    }

    pub fn format_distribution(&self, dist: &ClassDistribution) -> String {
        dist.support()
            .iter()
            .zip(dist.probabilities())
            .map(|(id, p)| format!("{}:{p}", self.name(*id)))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use distok::world::{World, WorldConfig};

    fn names() -> Names {
        let pool = ConceptPool::init(&World::build(WorldConfig::default()).unwrap());
        Names::new(&pool, BTreeMap::from([("cat".to_string(), "c3".to_string())])).unwrap()
    }

    #[test]
    fn resolves_canonical_names_and_aliases() {
        let n = names();
        assert_eq!(n.resolve("c0").unwrap(), 0);
        assert_eq!(n.resolve("cat").unwrap(), 3);
        let err = n.resolve("dog").unwrap_err().to_string();
        assert!(err.contains("c0, c1") && err.contains("cat"), "{err}");
    }

    #[test]
    fn alias_to_missing_concept_is_rejected() {
        let pool = ConceptPool::init(&World::build(WorldConfig::default()).unwrap());
        assert!(Names::new(&pool, BTreeMap::from([("x".to_string(), "n0".to_string())])).is_err());
    }

    #[test]
    fn weights_within_tolerance_are_renormalized() {
        let n = names();
        let d = n.parse_distribution("c0:0.5, cat:0.505").unwrap();
        assert_eq!(d.support(), &[0, 3]);
        let total: f64 = d.probabilities().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((d.probabilities()[0] - 0.5 / 1.005).abs() < 1e-12);
    }

    #[test]
    fn malformed_distributions_are_usage_errors() {
        let n = names();
        for bad in ["c0:0.7,c1:0.7", "c0:0.98", "c0", "c0:x", "c0:0.5,c0:0.5", "c0:-0.5,c1:1.5", "", "n0:1"] {
            let e = n.parse_distribution(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn formatted_distribution_parses_back() {
        let n = names();
        let d = n.parse_distribution("c1:0.25,c6:0.75").unwrap();
        assert_eq!(n.parse_distribution(&n.format_distribution(&d)).unwrap(), d);
    }

    #[test]
    fn pair_needs_two_names() {
        let n = names();
        assert_eq!(n.parse_pair("c0, cat").unwrap(), (0, 3));
        assert!(n.parse_pair("c0").is_err());
        assert!(n.parse_pair("c0,c1,c2").is_err());
    }
}
