//! Inference and evaluation: pair fusion, distribution-conditional generation,
//! unconditional sampling, input-vs-oracle KL, and the consistency ablation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::digest;
use crate::error::{Error, Result};
use crate::model::{combine_tokens, pair_input, DistokModel, LatentVector, ModelConfig};
use crate::ndmath::ops::{cosine_similarity, kl_divergence, KL_EPSILON};
use crate::pool::ConceptPool;
use crate::trainer::{run_training, TrainConfig};
use crate::world::{ClassDistribution, TokenVector, World};

/// Number of held-out distributions in an evaluation suite.
pub const EVAL_SUITE_SIZE: usize = 30;
/// Coordinate bound applied to Cauchy latents.
pub const CAUCHY_CLIP: f64 = 10.0;

const STREAM_EVAL: u64 = 3;

/// The encode/decode pair used at inference time.
pub trait Codec {
    fn encode(&self, input: &TokenVector) -> Result<LatentVector>;
    fn decode(&self, z: &LatentVector) -> Result<TokenVector>;
    fn latent_dim(&self) -> usize;
    fn normalize_pair_input(&self) -> bool;
}

impl Codec for DistokModel {
    fn encode(&self, input: &TokenVector) -> Result<LatentVector> {
        DistokModel::encode(self, input)
    }

    fn decode(&self, z: &LatentVector) -> Result<TokenVector> {
        DistokModel::decode(self, z)
    }

    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn normalize_pair_input(&self) -> bool {
        self.config().normalize_pair_input
    }
}

/// Passes tokens straight through; the latent space is the token space.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCodec {
    pub dim: usize,
    pub normalize_pair_input: bool,
}

impl Codec for IdentityCodec {
    fn encode(&self, input: &TokenVector) -> Result<LatentVector> {
        LatentVector::new(input.as_slice().to_vec())
    }

    fn decode(&self, z: &LatentVector) -> Result<TokenVector> {
        TokenVector::new(z.as_slice().to_vec())
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn normalize_pair_input(&self) -> bool {
        self.normalize_pair_input
    }
}

fn generate<C: Codec + ?Sized>(codec: &C, input: &TokenVector) -> Result<TokenVector> {
    codec.decode(&codec.encode(input)?)
}

/// Creative token for two pool entries.
pub fn fuse_pair<C: Codec + ?Sized>(codec: &C, pool: &ConceptPool, id_a: usize, id_b: usize) -> Result<TokenVector> {
    let a = &pool.get(id_a)?.token;
    let b = &pool.get(id_b)?.token;
    generate(codec, &pair_input(a, b, codec.normalize_pair_input())?)
}

/// Creative token for a distribution over known concepts.
pub fn generate_from_distribution<C: Codec + ?Sized>(
    world: &World,
    codec: &C,
    distribution: &ClassDistribution,
) -> Result<TokenVector> {
    distribution.check_known(world.num_known())?;
    generate(codec, &combine_tokens(distribution, world.known_tokens())?)
}

/// Oracle label of a token's noiseless render.
pub fn label_token(world: &World, token: &TokenVector) -> Result<ClassDistribution> {
    world.classify(&world.render_clean(token)?)
}

/// `KL(p ‖ oracle(render(generate(p))))` with a noiseless render.
pub fn kl_input_vs_oracle<C: Codec + ?Sized>(world: &World, codec: &C, distribution: &ClassDistribution) -> Result<f64> {
    let token = generate_from_distribution(world, codec, distribution)?;
    let predicted = label_token(world, &token)?;
    let k = world.num_known();
    kl_divergence(&distribution.to_dense(k)?, &predicted.to_dense(k)?, KL_EPSILON)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Gaussian,
    Laplace,
    Uniform,
    Cauchy,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [Self::Gaussian, Self::Laplace, Self::Uniform, Self::Cauchy];

    /// Zero mean and unit variance, except Cauchy whose variance is undefined.
    pub fn has_unit_variance(self) -> bool {
        self != Self::Cauchy
    }

    /// One raw coordinate, before any clipping.
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian => rng.sample(StandardNormal),
            Self::Laplace => {
                let b = std::f64::consts::FRAC_1_SQRT_2;
                // Inverse CDF on u ∈ (−1/2, 1/2).
                let u: f64 = rng.random::<f64>() - 0.5;
                let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                -b * u.signum() * tail.ln()
            }
            Self::Uniform => {
                let r = 3f64.sqrt();
                rng.random_range(-r..r)
            }
            Self::Cauchy => {
                let u: f64 = rng.random();
                (std::f64::consts::PI * (u - 0.5)).tan()
            }
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "laplace" => Ok(Self::Laplace),
            "uniform" => Ok(Self::Uniform),
            "cauchy" => Ok(Self::Cauchy),
            _ => Err(Error::OutOfRange(format!(
                "unknown sampler {s:?}; expected gaussian, laplace, uniform or cauchy"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSamples {
    pub latents: Vec<LatentVector>,
    pub clipped_coordinates: usize,
    pub total_coordinates: usize,
}

impl LatentSamples {
    pub fn clip_rate(&self) -> f64 {
        self.clipped_coordinates as f64 / self.total_coordinates.max(1) as f64
    }
}

pub fn sample_latents<R: Rng + ?Sized>(kind: SamplerKind, count: usize, dim: usize, rng: &mut R) -> Result<LatentSamples> {
    let mut clipped = 0;
    let latents = (0..count)
        .map(|_| {
            let z = (0..dim)
                .map(|_| {
                    let v = kind.draw(rng);
                    if kind == SamplerKind::Cauchy && v.abs() > CAUCHY_CLIP {
                        clipped += 1;
                        // tan can overflow to ±inf; NaN never occurs.
                        v.clamp(-CAUCHY_CLIP, CAUCHY_CLIP)
                    } else {
                        v
                    }
                })
                .collect();
            LatentVector::new(z)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentSamples {
        latents,
        clipped_coordinates: clipped,
        total_coordinates: count * dim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnconditionalSamples {
    pub kind: SamplerKind,
    pub tokens: Vec<TokenVector>,
    pub clip_rate: f64,
}

pub fn sample_unconditional<C: Codec + ?Sized, R: Rng + ?Sized>(
    codec: &C,
    kind: SamplerKind,
    count: usize,
    rng: &mut R,
) -> Result<UnconditionalSamples> {
    if count == 0 {
        return Err(Error::OutOfRange("count must be at least 1".into()));
    }
    let samples = sample_latents(kind, count, codec.latent_dim(), rng)?;
    let tokens = samples
        .latents
        .iter()
        .map(|z| codec.decode(z))
        .collect::<Result<Vec<_>>>()?;
    Ok(UnconditionalSamples {
        kind,
        tokens,
        clip_rate: samples.clip_rate(),
    })
}

/// Mean of `1 − cos` over all unordered pairs.
pub fn diversity_score(tokens: &[TokenVector]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::OutOfRange("diversity needs at least 2 tokens".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            sum += 1.0 - cosine_similarity(tokens[i].as_slice(), tokens[j].as_slice())?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Held-out suite: random supports of 2 to 4 classes with Dirichlet(1) weights.
pub fn eval_distributions(num_known: usize, count: usize, seed: u64) -> Result<Vec<ClassDistribution>> {
    if num_known < 2 {
        return Err(Error::OutOfRange("need at least 2 known concepts".into()));
    }
    let mut rng = eval_rng(seed);
    (0..count)
        .map(|_| {
            let size = rng.random_range(2..=num_known.min(4));
            let mut support = index::sample(&mut rng, num_known, size).into_vec();
            support.sort_unstable();
            let weights: Vec<f64> = (0..size).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = weights.iter().sum();
            ClassDistribution::new(support, weights.iter().map(|w| w / total).collect())
        })
        .collect()
}

/// Evaluation stream: same seed as training, separate ChaCha stream.
fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EVAL);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kl_values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
    pub config_digests: BTreeMap<String, String>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    pub fn new(kl_values: Vec<f64>, seeds: Vec<u64>, config_digests: BTreeMap<String, String>) -> Self {
        let n = kl_values.len().max(1) as f64;
        let mean = kl_values.iter().sum::<f64>() / n;
        let std = (kl_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Self {
            median: median(&kl_values),
            mean,
            std,
            kl_values,
            seeds,
            config_digests,
        }
    }
}

pub fn evaluate_suite<C: Codec + ?Sized>(world: &World, codec: &C, suite: &[ClassDistribution]) -> Result<Vec<f64>> {
    suite.iter().map(|p| kl_input_vs_oracle(world, codec, p)).collect()
}

/// Paired outcome for one seed. `diff = kl_no_cst − kl_full`, so positive
/// values favour consistency supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub kl_full: f64,
    pub kl_no_cst: f64,
    pub diff: f64,
    pub median_kl_initial: f64,
    pub median_kl_full: f64,
    pub novel_full: usize,
    pub novel_no_cst: usize,
    /// First step of the full arm whose sampling round admitted a concept.
    pub first_admission_full: Option<usize>,
    /// Largest stored oracle probability among the full arm's novel entries.
    pub max_novel_prob_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: EvalReport,
    pub no_cst: EvalReport,
    pub rows: Vec<AblationRow>,
    pub mean_diff: f64,
    pub seeds_favouring_full: usize,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,kl_full,kl_no_cst,diff\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", r.seed, r.kl_full, r.kl_no_cst, r.diff));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Model and training configs for one seed of a sweep.
pub fn seeded_configs(model: &ModelConfig, train: &TrainConfig, seed: u64) -> (ModelConfig, TrainConfig) {
    (
        ModelConfig {
            seed,
            ..model.clone()
        },
        TrainConfig {
            seed,
            ..train.clone()
        },
    )
}

/// Trains a full and a `β = 0` arm per seed and evaluates both on the seed's
/// held-out suite. Seeds run in parallel.
pub fn run_ablation(world: &World, model: &ModelConfig, train: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.len() < 5 {
        return Err(Error::OutOfRange(format!("ablation needs at least 5 seeds, got {}", seeds.len())));
    }
    let rows: Vec<(AblationRow, Vec<f64>, Vec<f64>)> = seeds
        .par_iter()
        .map(|&seed| {
            let (model_cfg, train_cfg) = seeded_configs(model, train, seed);
            let no_cst_cfg = TrainConfig {
                beta: 0.0,
                ..train_cfg.clone()
            };
            let suite = eval_distributions(world.num_known(), EVAL_SUITE_SIZE, seed)?;
            let initial = DistokModel::new(model_cfg.clone())?;
            let kl_initial = evaluate_suite(world, &initial, &suite)?;
            let full = run_training(world, &model_cfg, &train_cfg)?;
            let no_cst = run_training(world, &model_cfg, &no_cst_cfg)?;
            let kl_full = evaluate_suite(world, &full.model, &suite)?;
            let kl_no_cst = evaluate_suite(world, &no_cst.model, &suite)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let row = AblationRow {
                seed,
                kl_full: mean(&kl_full),
                kl_no_cst: mean(&kl_no_cst),
                diff: mean(&kl_no_cst) - mean(&kl_full),
                median_kl_initial: median(&kl_initial),
                median_kl_full: median(&kl_full),
                novel_full: full.pool.novel_count(),
                novel_no_cst: no_cst.pool.novel_count(),
                first_admission_full: full.log.iter().find(|r| r.admissions_this_step > 0).map(|r| r.step),
                max_novel_prob_full: full
                    .pool
                    .novel_entries()
                    .iter()
                    .map(|e| e.max_oracle_prob)
                    .max_by(f64::total_cmp),
            };
            log::info!(
                "seed {seed}: kl full {:.4}, no cst {:.4}",
                row.kl_full,
                row.kl_no_cst
            );
            Ok((row, kl_full, kl_no_cst))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut digests = BTreeMap::new();
    digests.insert("world".to_string(), digest(world.config())?);
    digests.insert("model".to_string(), digest(model)?);
    digests.insert("train".to_string(), digest(train)?);
    let mut no_cst_digests = digests.clone();
    no_cst_digests.insert(
        "train".to_string(),
        digest(&TrainConfig {
            beta: 0.0,
            ..train.clone()
        })?,
    );

    let full_values: Vec<f64> = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    let no_cst_values: Vec<f64> = rows.iter().flat_map(|r| r.2.iter().copied()).collect();
    let rows: Vec<AblationRow> = rows.into_iter().map(|r| r.0).collect();
    let mean_diff = rows.iter().map(|r| r.diff).sum::<f64>() / rows.len() as f64;
    Ok(AblationReport {
        full: EvalReport::new(full_values, seeds.to_vec(), digests),
        no_cst: EvalReport::new(no_cst_values, seeds.to_vec(), no_cst_digests),
        seeds_favouring_full: rows.iter().filter(|r| r.diff > 0.0).count(),
        rows,
        mean_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::ops::softmax;
    use crate::world::WorldConfig;

    fn world() -> World {
        World::build(WorldConfig::default()).unwrap()
    }

    fn identity(normalize: bool) -> IdentityCodec {
        IdentityCodec {
            dim: 32,
            normalize_pair_input: normalize,
        }
    }

    #[test]
    fn one_hot_through_identity_returns_known_token() {
        let w = world();
        for k in 0..8 {
            let t = generate_from_distribution(&w, &identity(false), &ClassDistribution::one_hot(k)).unwrap();
            assert_eq!(&t, w.known_token(k).unwrap());
        }
    }

    #[test]
    fn support_order_is_irrelevant() {
        let w = world();
        let m = DistokModel::new(ModelConfig::default()).unwrap();
        let p = ClassDistribution::new(vec![1, 4, 6], vec![0.5, 0.3, 0.2]).unwrap();
        let q = ClassDistribution::new(vec![6, 1, 4], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(
            generate_from_distribution(&w, &m, &p).unwrap(),
            generate_from_distribution(&w, &m, &q).unwrap()
        );
    }

    #[test]
    fn fuse_pair_is_symmetric_and_matches_uniform_dcg() {
        let w = world();
        let pool = ConceptPool::init(&w);
        for normalize in [false, true] {
            let m = DistokModel::new(ModelConfig {
                normalize_pair_input: normalize,
                ..ModelConfig::default()
            })
            .unwrap();
            for a in 0..8 {
                for b in a + 1..8 {
                    let ab = fuse_pair(&m, &pool, a, b).unwrap();
                    assert_eq!(ab, fuse_pair(&m, &pool, b, a).unwrap());
                    if normalize {
                        let u = ClassDistribution::uniform(vec![a, b]).unwrap();
                        assert_eq!(ab, generate_from_distribution(&w, &m, &u).unwrap());
                    }
                }
            }
        }
        let m = DistokModel::new(ModelConfig::default()).unwrap();
        assert!(matches!(fuse_pair(&m, &pool, 0, 99), Err(Error::UnknownConcept(_))));
    }

    #[test]
    fn kl_one_hot_identity_matches_scalar_oracle() {
        let w = world();
        let t = w.config().classifier_temperature;
        for k in 0..8 {
            let kl = kl_input_vs_oracle(&w, &identity(false), &ClassDistribution::one_hot(k)).unwrap();
            // Scalar recomputation: render is W_G·u_k, logits are prototype dots.
            let feature: Vec<f64> = w.render_clean(w.known_token(k).unwrap()).unwrap().as_slice().to_vec();
            let logits: Vec<f64> = (0..8)
                .map(|c| {
                    let proto = w.prototype(c);
                    let mut s = 0.0;
                    for i in 0..feature.len() {
                        s += proto[i] * feature[i];
                    }
                    s / t
                })
                .collect();
            let q = softmax(&logits);
            // KL(one-hot ‖ q) = −ln q̃_k with q̃ the smoothed prediction.
            let q_total: f64 = q.iter().sum::<f64>() + 8.0 * KL_EPSILON;
            let closed = -((q[k] + KL_EPSILON) / q_total).ln();
            assert!((kl - closed).abs() < 1e-12 * closed.max(1.0), "{kl} vs {closed}");
        }
    }

    #[test]
    fn kl_is_zero_for_self_consistent_input() {
        let w = world();
        let m = DistokModel::new(ModelConfig::default()).unwrap();
        let p = ClassDistribution::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
        let token = generate_from_distribution(&w, &m, &p).unwrap();
        let q = label_token(&w, &token).unwrap();
        let k = w.num_known();
        let dense = q.to_dense(k).unwrap();
        assert_eq!(kl_divergence(&dense, &dense, KL_EPSILON).unwrap(), 0.0);
    }

    #[test]
    fn samplers_are_standardized() {
        for kind in [SamplerKind::Gaussian, SamplerKind::Laplace, SamplerKind::Uniform] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let s = sample_latents(kind, 1000, 4, &mut rng).unwrap();
            assert_eq!(s.clipped_coordinates, 0);
            for j in 0..4 {
                let xs: Vec<f64> = s.latents.iter().map(|z| z.as_slice()[j]).collect();
                let mean = xs.iter().sum::<f64>() / 1000.0;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 999.0;
                assert!(mean.abs() < 0.1, "{kind:?} mean {mean}");
                assert!((var - 1.0).abs() < 0.15, "{kind:?} var {var}");
            }
        }
    }

    #[test]
    fn cauchy_is_clipped_and_finite() {
        let m = DistokModel::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = sample_unconditional(&m, SamplerKind::Cauchy, 500, &mut rng).unwrap();
        // P(|X| > 10) = 1 − 2·atan(10)/π ≈ 0.0635.
        assert!((s.clip_rate - 0.0635).abs() < 0.015, "{}", s.clip_rate);
        assert!(s.tokens.iter().all(|t| t.as_slice().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn unconditional_sampling_is_reproducible() {
        let m = DistokModel::new(ModelConfig::default()).unwrap();
        let a = sample_unconditional(&m, SamplerKind::Gaussian, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_unconditional(&m, SamplerKind::Gaussian, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let u = sample_unconditional(&m, SamplerKind::Uniform, 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let g = sample_unconditional(&m, SamplerKind::Gaussian, 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_ne!(diversity_score(&u.tokens).unwrap(), diversity_score(&g.tokens).unwrap());
        assert!(sample_unconditional(&m, SamplerKind::Gaussian, 0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn diversity_closed_forms() {
        let t = TokenVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(diversity_score(&[t.clone(), t.clone(), t]).unwrap(), 0.0);
        let a = TokenVector::new(vec![1.0, 0.0]).unwrap();
        let b = TokenVector::new(vec![0.0, 2.0]).unwrap();
        assert_eq!(diversity_score(&[a.clone(), b]).unwrap(), 1.0);
        assert!(diversity_score(&[a.clone()]).is_err());
        assert!(diversity_score(&[a, TokenVector::zeros(2)]).is_err());
    }

    #[test]
    fn eval_suite_shape_and_determinism() {
        let a = eval_distributions(8, 30, 1).unwrap();
        assert_eq!(a, eval_distributions(8, 30, 1).unwrap());
        assert_ne!(a, eval_distributions(8, 30, 2).unwrap());
        for p in &a {
            assert!((2..=4).contains(&p.support().len()));
            let s: f64 = p.probabilities().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            p.check_known(8).unwrap();
        }
    }

    #[test]
    fn sampler_names_parse() {
        assert_eq!("Laplace".parse::<SamplerKind>().unwrap(), SamplerKind::Laplace);
        assert!("beta".parse::<SamplerKind>().is_err());
    }
}
