//! Synthetic semantic world standing in for the text encoder, the image
//! generator and the vision-language classifier.
//!
//! Every map is a fixed linear operator plus normalization or softmax, so all
//! downstream losses stay analytically checkable:
//!
//! * text encoder: `E(q) = normalize(W_E · (context + token))`
//! * renderer: `x = W_G · token + ε`
//! * classifier: `softmax(⟨u_c, x⟩ / T)` over prototypes `u_c = W_G · t_c`

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{check_len, Error, Result};
use crate::ndmath::{dot, normalize, normalize_backward, softmax};

pub const WORLD_VERSION: u32 = 1;

/// Maximum pairwise cosine allowed between known tokens.
pub const MAX_TOKEN_COSINE: f64 = 0.5;

/// Draws allowed per known concept before construction gives up.
const DRAWS_PER_CONCEPT: usize = 10 * 1000;

const STREAM_TOKENS: u64 = 1;
const STREAM_ENCODER: u64 = 2;
const STREAM_RENDERER: u64 = 3;
const STREAM_TEMPLATES: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_known_concepts: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    #[serde(with = "codec::lenient_real")]
    pub classifier_temperature: f64,
    #[serde(with = "codec::lenient_real")]
    pub render_noise_std: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    /// The desk-scale preset: 8 concepts in a 32-dimensional token space.
    fn default() -> Self {
        Self {
            num_known_concepts: 8,
            token_dim: 32,
            embed_dim: 32,
            feature_dim: 32,
            classifier_temperature: 0.5,
            render_noise_std: 0.0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    /// Field pointers in errors are relative to this object.
    pub fn validate(&self) -> Result<()> {
        if self.num_known_concepts < 2 {
            return Err(Error::config("/num_known_concepts", "need at least 2 known concepts"));
        }
        for (name, v) in [
            ("token_dim", self.token_dim),
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
        ] {
            if v < 2 {
                return Err(Error::config(format!("/{name}"), "dimension must be at least 2"));
            }
        }
        if !(self.classifier_temperature > 0.0 && self.classifier_temperature.is_finite()) {
            return Err(Error::config("/classifier_temperature", "temperature must be positive"));
        }
        if !(self.render_noise_std >= 0.0 && self.render_noise_std.is_finite()) {
            return Err(Error::config("/render_noise_std", "noise must be non-negative"));
        }
        Ok(())
    }
}

/// A point in token-embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenVector(#[serde(with = "codec::reals")] Vec<f64>);

impl TokenVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    AdaptivePhoto,
    RestrictivePair,
    AuxiliaryPet,
    Neutral,
}

impl TemplateKind {
    fn stream(self) -> u64 {
        STREAM_TEMPLATES
            + match self {
                TemplateKind::AdaptivePhoto => 0,
                TemplateKind::RestrictivePair => 1,
                TemplateKind::AuxiliaryPet => 2,
                TemplateKind::Neutral => 3,
            }
    }
}

/// Unit-norm text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding(Vec<f64>);

impl PromptEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A prompt embedding together with what its backward pass needs.
#[derive(Debug, Clone)]
pub struct PromptTrace {
    pub embedding: PromptEmbedding,
    pre_norm: f64,
}

impl PromptTrace {
    /// Maps `dL/d embedding` to `dL/d token`.
    pub fn backward(&self, world: &World, grad_embedding: &[f64]) -> Vec<f64> {
        let grad_pre = normalize_backward(&self.embedding.0, self.pre_norm, grad_embedding);
        world.encoder_transpose_apply(&grad_pre)
    }
}

/// Rendered image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature(Vec<f64>);

impl ImageFeature {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the simplex over a subset of known concept ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionDoc", into = "DistributionDoc")]
pub struct ClassDistribution {
    support: Vec<usize>,
    probabilities: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DistributionDoc {
    support: Vec<usize>,
    #[serde(with = "codec::reals")]
    probabilities: Vec<f64>,
}

impl TryFrom<DistributionDoc> for ClassDistribution {
    type Error = Error;

    fn try_from(doc: DistributionDoc) -> Result<Self> {
        ClassDistribution::new(doc.support, doc.probabilities)
    }
}

impl From<ClassDistribution> for DistributionDoc {
    fn from(d: ClassDistribution) -> Self {
        DistributionDoc {
            support: d.support,
            probabilities: d.probabilities,
        }
    }
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl ClassDistribution {
    pub fn new(support: Vec<usize>, probabilities: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if support.len() != probabilities.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} ids but {} probabilities",
                support.len(),
                probabilities.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = support.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidDistribution(format!("duplicate id {dup}")));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidDistribution("negative or non-finite probability".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            support,
            probabilities,
        })
    }

    /// Normalizes raw weights whose sum lies within `1 ± tolerance`.
    pub fn from_weights(support: Vec<usize>, weights: Vec<f64>, tolerance: f64) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || (total - 1.0).abs() > tolerance {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, outside 1 ± {tolerance}"
            )));
        }
        Self::new(support, weights.iter().map(|w| w / total).collect())
    }

    pub fn one_hot(id: usize) -> Self {
        Self {
            support: vec![id],
            probabilities: vec![1.0],
        }
    }

    pub fn uniform(support: Vec<usize>) -> Result<Self> {
        let n = support.len() as f64;
        let probs = vec![1.0 / n; support.len()];
        Self::new(support, probs)
    }

    /// Full-support distribution over `0..probabilities.len()`.
    pub fn dense_over_all(probabilities: Vec<f64>) -> Result<Self> {
        Self::new((0..probabilities.len()).collect(), probabilities)
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn check_known(&self, num_known: usize) -> Result<()> {
        match self.support.iter().find(|id| **id >= num_known) {
            Some(id) => Err(Error::InvalidDistribution(format!(
                "id {id} is not a known concept (have {num_known})"
            ))),
            None => Ok(()),
        }
    }

    /// Expands to a length-`num_known` probability vector.
    pub fn to_dense(&self, num_known: usize) -> Result<Vec<f64>> {
        self.check_known(num_known)?;
        let mut dense = vec![0.0; num_known];
        for (id, p) in self.support.iter().zip(&self.probabilities) {
            dense[*id] = *p;
        }
        Ok(dense)
    }

    pub fn max_probability(&self) -> f64 {
        self.probabilities.iter().copied().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probabilities.len() {
            if self.probabilities[i] > self.probabilities[best] {
                best = i;
            }
        }
        self.support[best]
    }
}

/// The frozen oracle stack.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    /// `embed_dim × token_dim`, row-major.
    w_e: Vec<Vec<f64>>,
    /// `feature_dim × token_dim`, row-major.
    w_g: Vec<Vec<f64>>,
    known_tokens: Vec<TokenVector>,
    adaptive_photo: Vec<f64>,
    restrictive_pair: Vec<f64>,
    auxiliary_pet: Vec<f64>,
    // Derived from the above.
    prototypes: Vec<Vec<f64>>,
    aux_embedding: PromptEmbedding,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.w_e == other.w_e
            && self.w_g == other.w_g
            && self.known_tokens == other.known_tokens
            && self.adaptive_photo == other.adaptive_photo
            && self.restrictive_pair == other.restrictive_pair
            && self.auxiliary_pet == other.auxiliary_pet
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let std = (1.0 / cols as f64).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn template_vector(seed: u64, kind: TemplateKind, dim: usize) -> Vec<f64> {
    if kind == TemplateKind::Neutral {
        return vec![0.0; dim];
    }
    let mut rng = stream_rng(seed, kind.stream());
    let std = (1.0 / dim as f64).sqrt();
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Known tokens are unit vectors with pairwise cosine below
/// [`MAX_TOKEN_COSINE`]; in addition every prototype must score itself higher
/// than any other prototype does, so clean renders classify correctly.
fn place_known_tokens(
    config: &WorldConfig,
    w_g: &[Vec<f64>],
) -> Result<(Vec<TokenVector>, Vec<Vec<f64>>)> {
    let k = config.num_known_concepts;
    let d = config.token_dim;
    let budget = k * DRAWS_PER_CONCEPT;
    let mut rng = stream_rng(config.seed, STREAM_TOKENS);
    let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut draws = 0;
    while tokens.len() < k {
        if draws == budget {
            return Err(Error::WorldBuild(format!(
                "placed only {} of {k} separated tokens in {budget} draws (token_dim {d} too small)",
                tokens.len()
            )));
        }
        draws += 1;
        let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let Ok((cand, _)) = normalize(&raw, "token draw") else {
            continue;
        };
        if tokens.iter().any(|t| dot(t, &cand) >= MAX_TOKEN_COSINE) {
            continue;
        }
        let u = mat_vec(w_g, &cand);
        let self_score = dot(&u, &u);
        let separated = protos.iter().all(|p| {
            let cross = dot(p, &u);
            cross < self_score && cross < dot(p, p)
        });
        if !separated {
            continue;
        }
        tokens.push(cand);
        protos.push(u);
    }
    Ok((tokens.into_iter().map(TokenVector).collect(), protos))
}

impl World {
    pub fn build(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let w_e = gaussian_matrix(config.embed_dim, d, &mut stream_rng(config.seed, STREAM_ENCODER));
        let w_g = gaussian_matrix(
            config.feature_dim,
            d,
            &mut stream_rng(config.seed, STREAM_RENDERER),
        );
        let (known_tokens, _) = place_known_tokens(&config, &w_g)?;
        let seed = config.seed;
        Self::assemble(
            config,
            w_e,
            w_g,
            known_tokens,
            template_vector(seed, TemplateKind::AdaptivePhoto, d),
            template_vector(seed, TemplateKind::RestrictivePair, d),
            template_vector(seed, TemplateKind::AuxiliaryPet, d),
        )
    }

    fn assemble(
        config: WorldConfig,
        w_e: Vec<Vec<f64>>,
        w_g: Vec<Vec<f64>>,
        known_tokens: Vec<TokenVector>,
        adaptive_photo: Vec<f64>,
        restrictive_pair: Vec<f64>,
        auxiliary_pet: Vec<f64>,
    ) -> Result<Self> {
        let d = config.token_dim;
        check_len("w_e rows", config.embed_dim, w_e.len())?;
        check_len("w_g rows", config.feature_dim, w_g.len())?;
        for row in w_e.iter().chain(&w_g) {
            check_len("matrix columns", d, row.len())?;
        }
        check_len("known tokens", config.num_known_concepts, known_tokens.len())?;
        for t in &known_tokens {
            check_len("known token", d, t.len())?;
        }
        for v in [&adaptive_photo, &restrictive_pair, &auxiliary_pet] {
            check_len("template context", d, v.len())?;
        }
        let prototypes = known_tokens.iter().map(|t| mat_vec(&w_g, t.as_slice())).collect();
        let mut world = Self {
            config,
            w_e,
            w_g,
            known_tokens,
            adaptive_photo,
            restrictive_pair,
            auxiliary_pet,
            prototypes,
            aux_embedding: PromptEmbedding(Vec::new()),
        };
        let centroid = world.known_centroid();
        world.aux_embedding = world.encode_prompt(TemplateKind::AuxiliaryPet, &centroid)?;
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn num_known(&self) -> usize {
        self.config.num_known_concepts
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    pub fn known_tokens(&self) -> &[TokenVector] {
        &self.known_tokens
    }

    pub fn known_token(&self, id: usize) -> Result<&TokenVector> {
        self.known_tokens
            .get(id)
            .ok_or_else(|| Error::UnknownConcept(format!("c{id}")))
    }

    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id]
    }

    pub fn known_centroid(&self) -> TokenVector {
        let mut mean = vec![0.0; self.token_dim()];
        for t in &self.known_tokens {
            crate::ndmath::ops::axpy(1.0, t.as_slice(), &mut mean);
        }
        let k = self.known_tokens.len() as f64;
        TokenVector(mean.into_iter().map(|v| v / k).collect())
    }

    pub fn template_context(&self, kind: TemplateKind) -> Vec<f64> {
        match kind {
            TemplateKind::AdaptivePhoto => self.adaptive_photo.clone(),
            TemplateKind::RestrictivePair => self.restrictive_pair.clone(),
            TemplateKind::AuxiliaryPet => self.auxiliary_pet.clone(),
            TemplateKind::Neutral => vec![0.0; self.token_dim()],
        }
    }

    fn context_ref(&self, kind: TemplateKind) -> Option<&[f64]> {
        match kind {
            TemplateKind::AdaptivePhoto => Some(&self.adaptive_photo),
            TemplateKind::RestrictivePair => Some(&self.restrictive_pair),
            TemplateKind::AuxiliaryPet => Some(&self.auxiliary_pet),
            TemplateKind::Neutral => None,
        }
    }

    fn encoder_transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.token_dim()];
        for (row, gi) in self.w_e.iter().zip(g) {
            crate::ndmath::ops::axpy(*gi, row, &mut out);
        }
        out
    }

    fn encode_sum(&self, kind: TemplateKind, parts: &[&[f64]]) -> Result<PromptTrace> {
        let d = self.token_dim();
        let mut input = match self.context_ref(kind) {
            Some(c) => c.to_vec(),
            None => vec![0.0; d],
        };
        let mut scale = crate::ndmath::norm(&input);
        for part in parts {
            check_len("prompt token", d, part.len())?;
            crate::ndmath::ops::axpy(1.0, part, &mut input);
            scale += crate::ndmath::norm(part);
        }
        // Exact cancellation can leave rounding residue instead of a true zero.
        if crate::ndmath::norm(&input) <= 1e-12 * scale {
            return Err(Error::Degenerate("prompt"));
        }
        let pre = mat_vec(&self.w_e, &input);
        let (unit, pre_norm) = normalize(&pre, "prompt")?;
        Ok(PromptTrace {
            embedding: PromptEmbedding(unit),
            pre_norm,
        })
    }

    /// `normalize(W_E · (context + token))`
    pub fn encode_prompt(&self, kind: TemplateKind, token: &TokenVector) -> Result<PromptEmbedding> {
        Ok(self.encode_sum(kind, &[token.as_slice()])?.embedding)
    }

    /// Like [`World::encode_prompt`] but keeps what the backward pass needs.
    pub fn trace_prompt(&self, kind: TemplateKind, token: &[f64]) -> Result<PromptTrace> {
        self.encode_sum(kind, &[token])
    }

    /// Restrictive pair prompt: `normalize(W_E · (c_pair + a + b))`.
    pub fn encode_pair_prompt(&self, a: &TokenVector, b: &TokenVector) -> Result<PromptEmbedding> {
        check_len("pair token", a.len(), b.len())?;
        // Summing a + b first keeps the result bitwise symmetric.
        let ab: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
        Ok(self.encode_sum(TemplateKind::RestrictivePair, &[&ab])?.embedding)
    }

    /// The auxiliary prompt applied to the centroid of all known tokens.
    pub fn aux_embedding(&self) -> &PromptEmbedding {
        &self.aux_embedding
    }

    /// `W_G · token`, plus Gaussian noise when `render_noise_std > 0`.
    pub fn render_image<R: Rng + ?Sized>(&self, token: &TokenVector, rng: &mut R) -> Result<ImageFeature> {
        let mut x = self.render_clean(token)?.0;
        let std = self.config.render_noise_std;
        if std > 0.0 {
            let noise = Normal::new(0.0, std).map_err(|e| Error::OutOfRange(e.to_string()))?;
            for v in &mut x {
                *v += noise.sample(rng);
            }
        }
        Ok(ImageFeature(x))
    }

    pub fn render_clean(&self, token: &TokenVector) -> Result<ImageFeature> {
        check_len("render token", self.token_dim(), token.len())?;
        Ok(ImageFeature(mat_vec(&self.w_g, token.as_slice())))
    }

    pub fn classify(&self, image: &ImageFeature) -> Result<ClassDistribution> {
        check_len("image feature", self.config.feature_dim, image.0.len())?;
        if image.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image feature".into()));
        }
        let t = self.config.classifier_temperature;
        let logits: Vec<f64> = self.prototypes.iter().map(|u| dot(u, &image.0) / t).collect();
        Ok(ClassDistribution {
            support: (0..self.num_known()).collect(),
            probabilities: softmax(&logits),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = WorldDoc {
            version: WORLD_VERSION,
            config: self.config.clone(),
            w_e: self.w_e.clone(),
            w_g: self.w_g.clone(),
            known_tokens: self.known_tokens.iter().map(|t| t.0.clone()).collect(),
            templates: TemplatesDoc {
                adaptive_photo: self.adaptive_photo.clone(),
                restrictive_pair: self.restrictive_pair.clone(),
                auxiliary_pet: self.auxiliary_pet.clone(),
            },
        };
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        codec::check_version(text, WORLD_VERSION)?;
        let doc: WorldDoc = codec::from_json_str(text)?;
        doc.config.validate()?;
        Self::assemble(
            doc.config,
            doc.w_e,
            doc.w_g,
            doc.known_tokens.into_iter().map(TokenVector).collect(),
            doc.templates.adaptive_photo,
            doc.templates.restrictive_pair,
            doc.templates.auxiliary_pet,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplatesDoc {
    #[serde(with = "codec::reals")]
    adaptive_photo: Vec<f64>,
    #[serde(with = "codec::reals")]
    restrictive_pair: Vec<f64>,
    #[serde(with = "codec::reals")]
    auxiliary_pet: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldDoc {
    version: u32,
    config: WorldConfig,
    #[serde(with = "codec::matrix")]
    w_e: Vec<Vec<f64>>,
    #[serde(with = "codec::matrix")]
    w_g: Vec<Vec<f64>>,
    #[serde(with = "codec::matrix")]
    known_tokens: Vec<Vec<f64>>,
    templates: TemplatesDoc,
}
