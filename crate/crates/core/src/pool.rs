//! The concept pool: known concepts plus novel concepts admitted from sampled
//! latents whose oracle distribution is not dominated by a single class.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{check_len, Error, Result};
use crate::world::{ClassDistribution, TokenVector, World};

pub const POOL_VERSION: u32 = 1;
pub const DEFAULT_CAPACITY_NOVEL: usize = 512;
pub const POOL_EXTENSION: &str = "pool.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Known,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub id: usize,
    pub kind: ConceptKind,
    pub token: TokenVector,
    pub distribution: ClassDistribution,
    pub created_step: usize,
    #[serde(with = "codec::real")]
    pub max_oracle_prob: f64,
}

impl ConceptEntry {
    /// `c{k}` for known concepts, `n{j}` for the j-th admitted novel concept.
    pub fn name(&self, num_known: usize) -> String {
        concept_name(self.id, num_known)
    }
}

pub fn concept_name(id: usize, num_known: usize) -> String {
    if id < num_known {
        format!("c{id}")
    } else {
        format!("n{}", id - num_known)
    }
}

/// Parses `c{k}` / `n{j}` back to an id.
pub fn parse_concept_name(name: &str, num_known: usize) -> Option<usize> {
    let (prefix, rest) = name.split_at_checked(1)?;
    let idx: usize = rest.parse().ok()?;
    match prefix {
        "c" if idx < num_known => Some(idx),
        "n" => Some(num_known + idx),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    Admitted { id: usize },
    /// The oracle was too confident: `max p ≥ τ`.
    NotNovel,
    PoolFull,
}

impl Admission {
    pub fn admitted(&self) -> bool {
        matches!(self, Admission::Admitted { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPool {
    entries: Vec<ConceptEntry>,
    num_known: usize,
    capacity_novel: usize,
    /// Threshold used by the most recent admission attempt.
    tau: Option<f64>,
}

impl ConceptPool {
    pub fn init(world: &World) -> Self {
        Self::with_capacity(world, DEFAULT_CAPACITY_NOVEL)
    }

    pub fn with_capacity(world: &World, capacity_novel: usize) -> Self {
        let entries = world
            .known_tokens()
            .iter()
            .enumerate()
            .map(|(k, t)| ConceptEntry {
                id: k,
                kind: ConceptKind::Known,
                token: t.clone(),
                distribution: ClassDistribution::one_hot(k),
                created_step: 0,
                max_oracle_prob: 1.0,
            })
            .collect();
        Self {
            entries,
            num_known: world.num_known(),
            capacity_novel,
            tau: None,
        }
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    pub fn known_ids(&self) -> std::ops::Range<usize> {
        0..self.num_known
    }

    pub fn novel_count(&self) -> usize {
        self.entries.len() - self.num_known
    }

    pub fn novel_entries(&self) -> &[ConceptEntry] {
        &self.entries[self.num_known..]
    }

    pub fn capacity_novel(&self) -> usize {
        self.capacity_novel
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn get(&self, id: usize) -> Result<&ConceptEntry> {
        // Ids are dense: known 0..K, then novel in admission order.
        self.entries
            .get(id)
            .ok_or_else(|| Error::UnknownConcept(concept_name(id, self.num_known)))
    }

    pub fn name_of(&self, id: usize) -> String {
        concept_name(id, self.num_known)
    }

    pub fn lookup(&self, name: &str) -> Result<&ConceptEntry> {
        parse_concept_name(name, self.num_known)
            .and_then(|id| self.entries.get(id))
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    /// Two distinct entries drawn uniformly without replacement.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(&ConceptEntry, &ConceptEntry)> {
        let n = self.entries.len();
        if n < 2 {
            return Err(Error::Pool(format!("need 2 entries to sample a pair, have {n}")));
        }
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        Ok((&self.entries[i], &self.entries[j]))
    }

    pub fn sample_novel<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&ConceptEntry> {
        let novel = self.novel_entries();
        if novel.is_empty() {
            return Err(Error::NoNovel);
        }
        Ok(&novel[rng.random_range(0..novel.len())])
    }

    /// Admits `token` as a novel concept iff `max p < tau` and capacity remains.
    pub fn try_admit(
        &mut self,
        token: TokenVector,
        oracle_distribution: ClassDistribution,
        tau: f64,
        step: usize,
    ) -> Result<Admission> {
        // τ = 0 is accepted and admits nothing.
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::OutOfRange(format!("tau {tau} outside [0, 1]")));
        }
        oracle_distribution.check_known(self.num_known)?;
        check_len("candidate token", self.entries[0].token.len(), token.len())?;
        self.tau = Some(tau);
        let max_p = oracle_distribution.max_probability();
        if max_p >= tau {
            return Ok(Admission::NotNovel);
        }
        if self.novel_count() >= self.capacity_novel {
            return Ok(Admission::PoolFull);
        }
        let id = self.entries.len();
        self.entries.push(ConceptEntry {
            id,
            kind: ConceptKind::Novel,
            token,
            distribution: oracle_distribution,
            created_step: step,
            max_oracle_prob: max_p,
        });
        Ok(Admission::Admitted { id })
    }

    /// Known entries must coincide with the world's concepts.
    pub fn check_against(&self, world: &World) -> Result<()> {
        if self.num_known != world.num_known() {
            return Err(Error::Pool(format!(
                "pool has {} known concepts, world has {}",
                self.num_known,
                world.num_known()
            )));
        }
        for (entry, token) in self.entries.iter().zip(world.known_tokens()) {
            if &entry.token != token {
                return Err(Error::Pool(format!(
                    "known concept {} does not match the world",
                    entry.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PoolDocRef {
            version: POOL_VERSION,
            num_known: self.num_known,
            capacity_novel: self.capacity_novel,
            tau: self.tau.map(codec::format_real),
            entries: &self.entries,
        };
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        Ok(text)
    }

    /// Parses and validates a pool document. Novel entries whose stored
    /// probability is not below the stored threshold are kept and reported.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        codec::check_version(text, POOL_VERSION)?;
        let doc: PoolDoc = codec::from_json_str(text)?;
        let tau = doc
            .tau
            .as_deref()
            .map(codec::parse_real)
            .transpose()
            .map_err(Error::Malformed)?;
        let pool = Self {
            entries: doc.entries,
            num_known: doc.num_known,
            capacity_novel: doc.capacity_novel,
            tau,
        };
        let warnings = pool.validate()?;
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((pool, warnings))
    }

    fn validate(&self) -> Result<Vec<String>> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(Error::Pool(format!("duplicate concept id {}", e.id)));
            }
        }
        if self.num_known < 2 || self.entries.len() < self.num_known {
            return Err(Error::Pool("pool must hold at least two known concepts".into()));
        }
        let dim = self.entries[0].token.len();
        let mut warnings = Vec::new();
        for (pos, e) in self.entries.iter().enumerate() {
            if e.id != pos {
                return Err(Error::Pool(format!("entry {pos} carries id {}", e.id)));
            }
            check_len("pool token", dim, e.token.len())?;
            e.distribution.check_known(self.num_known)?;
            let expect_known = pos < self.num_known;
            match (expect_known, e.kind) {
                (true, ConceptKind::Known) => {
                    if e.distribution != ClassDistribution::one_hot(e.id) {
                        return Err(Error::Pool(format!("known concept {} is not one-hot", e.id)));
                    }
                }
                (false, ConceptKind::Novel) => {
                    if !(0.0..=1.0).contains(&e.max_oracle_prob) {
                        return Err(Error::Pool(format!("entry {} has probability outside [0, 1]", e.id)));
                    }
                    if let Some(tau) = self.tau {
                        if e.max_oracle_prob >= tau {
                            warnings.push(format!(
                                "novel concept {} has max oracle probability {} >= stored tau {tau}",
                                e.name(self.num_known),
                                e.max_oracle_prob
                            ));
                        }
                    }
                }
                _ => {
                    return Err(Error::Pool(format!(
                        "entry {} has kind {:?} out of position",
                        e.id, e.kind
                    )))
                }
            }
        }
        if self.novel_count() > self.capacity_novel {
            return Err(Error::Pool(format!(
                "{} novel concepts exceed capacity {}",
                self.novel_count(),
                self.capacity_novel
            )));
        }
        Ok(warnings)
    }
}

pub fn save_pool(pool: &ConceptPool, path: &Path) -> Result<()> {
    codec::write_text(path, &pool.to_json()?)
}

pub fn load_pool(path: &Path) -> Result<(ConceptPool, Vec<String>)> {
    ConceptPool::from_json(&codec::read_text(path)?)
}

#[derive(Serialize)]
struct PoolDocRef<'a> {
    version: u32,
    num_known: usize,
    capacity_novel: usize,
    tau: Option<String>,
    entries: &'a [ConceptEntry],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolDoc {
    #[allow(dead_code)]
    version: u32,
    num_known: usize,
    capacity_novel: usize,
    tau: Option<String>,
    entries: Vec<ConceptEntry>,
}
