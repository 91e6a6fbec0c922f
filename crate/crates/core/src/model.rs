//! Distribution encoder and creative decoder, plus the fusion, consistency and
//! latent-regularization losses wired through the world's text encoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{check_len, Error, Result};
use crate::ndmath::{cosine_with_grad, Mlp2, MlpCache, MlpGrad, Parameters};
use crate::world::{ClassDistribution, TemplateKind, TokenVector, World};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Lower bound on the batch variance in the latent regularizer.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    #[serde(with = "codec::lenient_real")]
    pub theta1: f64,
    #[serde(with = "codec::lenient_real")]
    pub theta2: f64,
    pub seed: u64,
    /// Feed the pair mean instead of the pair sum to the encoder when fusing.
    #[serde(default)]
    pub normalize_pair_input: bool,
    /// Weight of an optional `(σ² − 1)²` term added to the latent regularizer.
    #[serde(default, with = "codec::lenient_real")]
    pub variance_anchor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            hidden_dim: 64,
            latent_dim: 8,
            theta1: 0.8,
            theta2: 0.7,
            seed: 7,
            normalize_pair_input: false,
            variance_anchor: 0.0,
        }
    }
}

impl ModelConfig {
    /// The full-size architecture: 768 hidden units and a 20-dimensional latent.
    pub fn full_scale(token_dim: usize) -> Self {
        Self {
            token_dim,
            hidden_dim: 768,
            latent_dim: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim < 2 {
            return Err(Error::config("/token_dim", "dimension must be at least 2"));
        }
        if self.latent_dim == 0 || self.latent_dim >= self.token_dim {
            return Err(Error::config(
                "/latent_dim",
                "latent_dim must be positive and smaller than token_dim",
            ));
        }
        if self.hidden_dim < self.latent_dim {
            return Err(Error::config("/hidden_dim", "hidden_dim must be at least latent_dim"));
        }
        for (name, v) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("/{name}"), "threshold must lie in (0, 1]"));
            }
        }
        if !(self.variance_anchor >= 0.0 && self.variance_anchor.is_finite()) {
            return Err(Error::config("/variance_anchor", "weight must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(#[serde(with = "codec::reals")] Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(Self(values))
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
}

/// Encoder `d → hidden → δ` and decoder `δ → hidden → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistokModel {
    config: ModelConfig,
    encoder: Mlp2,
    decoder: Mlp2,
}

/// Parameter-shaped gradient of a [`DistokModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
}

impl ModelGrad {
    pub fn zeros(model: &DistokModel) -> Self {
        Self {
            encoder: MlpGrad::zeros(&model.encoder),
            decoder: MlpGrad::zeros(&model.decoder),
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGrad, s: f64) {
        self.encoder.add_scaled(&other.encoder, s);
        self.decoder.add_scaled(&other.decoder, s);
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }
}

macro_rules! prefixed_parameters {
    ($ty:ty) => {
        impl Parameters for $ty {
            fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
                self.encoder.visit(&mut |n, t| f(&format!("encoder.{n}"), t));
                self.decoder.visit(&mut |n, t| f(&format!("decoder.{n}"), t));
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
                self.encoder.visit_mut(&mut |n, t| f(&format!("encoder.{n}"), t));
                self.decoder.visit_mut(&mut |n, t| f(&format!("decoder.{n}"), t));
            }
        }
    };
}

prefixed_parameters!(DistokModel);
prefixed_parameters!(ModelGrad);

/// Forward intermediates of `decode(encode(input))`.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    encoder_cache: MlpCache,
    decoder_cache: MlpCache,
    pub latent: LatentVector,
    pub token: TokenVector,
}

/// `Σ weight · token` accumulated in the given order.
fn weighted_sum(dim: usize, terms: &[(f64, &TokenVector)]) -> Result<TokenVector> {
    let mut out = vec![0.0; dim];
    for (w, t) in terms {
        check_len("combined token", dim, t.len())?;
        crate::ndmath::ops::axpy(*w, t.as_slice(), &mut out);
    }
    TokenVector::new(out)
}

/// `Σ_i p_i · t_i` where `tokens[i]` is the token of concept id `i`.
///
/// Terms are accumulated in ascending id order, so the result does not depend
/// on the order of the distribution's support.
pub fn combine_tokens(distribution: &ClassDistribution, tokens: &[TokenVector]) -> Result<TokenVector> {
    let dim = tokens
        .first()
        .map(TokenVector::len)
        .ok_or_else(|| Error::InvalidDistribution("no tokens to combine".into()))?;
    let mut terms: Vec<(usize, f64)> = distribution
        .support()
        .iter()
        .copied()
        .zip(distribution.probabilities().iter().copied())
        .collect();
    if let Some((id, _)) = terms.iter().find(|(id, _)| *id >= tokens.len()) {
        return Err(Error::InvalidDistribution(format!(
            "support id {id} has no token (have {})",
            tokens.len()
        )));
    }
    terms.sort_by_key(|(id, _)| *id);
    let weighted: Vec<(f64, &TokenVector)> = terms.iter().map(|(id, p)| (*p, &tokens[*id])).collect();
    weighted_sum(dim, &weighted)
}

/// Encoder input for fusing two tokens: the literal sum, or the uniform
/// two-class combination when `normalize` is set.
pub fn pair_input(a: &TokenVector, b: &TokenVector, normalize: bool) -> Result<TokenVector> {
    check_len("pair tokens", a.len(), b.len())?;
    if normalize {
        // Same arithmetic as combine_tokens over a uniform two-class support.
        weighted_sum(a.len(), &[(0.5, a), (0.5, b)])
    } else {
        weighted_sum(a.len(), &[(1.0, a), (1.0, b)])
    }
}

impl DistokModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Mlp2::random(config.token_dim, config.hidden_dim, config.latent_dim, &mut rng);
        let decoder = Mlp2::random(config.latent_dim, config.hidden_dim, config.token_dim, &mut rng);
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Assembles a model from explicit networks; dimensions must agree with `config`.
    pub fn from_parts(config: ModelConfig, encoder: Mlp2, decoder: Mlp2) -> Result<Self> {
        config.validate()?;
        check_len("encoder input", config.token_dim, encoder.input_dim())?;
        check_len("encoder output", config.latent_dim, encoder.output_dim())?;
        check_len("decoder input", config.latent_dim, decoder.input_dim())?;
        check_len("decoder output", config.token_dim, decoder.output_dim())?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Mlp2 {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp2 {
        &self.decoder
    }

    pub fn encode(&self, combined: &TokenVector) -> Result<LatentVector> {
        let (z, _) = self.encoder.forward(combined.as_slice())?;
        LatentVector::new(z)
    }

    pub fn decode(&self, z: &LatentVector) -> Result<TokenVector> {
        let (t, _) = self.decoder.forward(z.as_slice())?;
        TokenVector::new(t)
    }

    pub fn trace(&self, input: &TokenVector) -> Result<ModelTrace> {
        let (z, encoder_cache) = self.encoder.forward(input.as_slice())?;
        let latent = LatentVector::new(z)?;
        let (t, decoder_cache) = self.decoder.forward(latent.as_slice())?;
        Ok(ModelTrace {
            encoder_cache,
            decoder_cache,
            latent,
            token: TokenVector::new(t)?,
        })
    }

    /// Backward through the decoder only; returns `dL/dz` and decoder gradients.
    pub fn backward_decoder(&self, trace: &ModelTrace, grad_token: &[f64]) -> Result<(Vec<f64>, MlpGrad)> {
        self.decoder.backward(&trace.decoder_cache, grad_token)
    }

    pub fn backward_encoder(&self, trace: &ModelTrace, grad_latent: &[f64]) -> Result<MlpGrad> {
        Ok(self.encoder.backward(&trace.encoder_cache, grad_latent)?.1)
    }

    /// Full backward of `decode(encode(·))` for `dL/d token`.
    pub fn backward(&self, trace: &ModelTrace, grad_token: &[f64]) -> Result<ModelGrad> {
        let (grad_z, decoder) = self.backward_decoder(trace, grad_token)?;
        let encoder = self.backward_encoder(trace, &grad_z)?;
        Ok(ModelGrad { encoder, decoder })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointRef {
            version: CHECKPOINT_VERSION,
            config: &self.config,
            encoder: &self.encoder,
            decoder: &self.decoder,
        };
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        codec::check_version(text, CHECKPOINT_VERSION)?;
        let doc: Checkpoint = codec::from_json_str(text)?;
        Self::from_parts(doc.config, doc.encoder, doc.decoder)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    version: u32,
    config: &'a ModelConfig,
    encoder: &'a Mlp2,
    decoder: &'a Mlp2,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    #[allow(dead_code)]
    version: u32,
    config: ModelConfig,
    encoder: Mlp2,
    decoder: Mlp2,
}

/// A loss evaluated up to the creative token, before backpropagating into the
/// model. The trainer uses this split to fold the regularizer gradient into
/// each sub-step's encoder pass.
#[derive(Debug, Clone)]
pub struct TokenLoss {
    pub value: f64,
    pub trace: ModelTrace,
    pub grad_token: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixDetail {
    pub cos_restrictive: f64,
    pub cos_auxiliary: f64,
    pub restrictive_clamped: bool,
    pub auxiliary_clamped: bool,
}

/// Loss value with exact parameter gradients.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    pub grads: ModelGrad,
    pub latent: LatentVector,
    pub token: TokenVector,
}

/// `1 − min(c, threshold)` and its derivative in `c`; the clamped side (including
/// equality) has zero slope.
fn thresholded_distance(cos: f64, theta: f64) -> (f64, f64, bool) {
    if cos < theta {
        (1.0 - cos, -1.0, false)
    } else {
        (1.0 - theta, 0.0, true)
    }
}

/// Thresholded fusion loss up to the creative token.
pub fn mix_forward(
    world: &World,
    model: &DistokModel,
    token_a: &TokenVector,
    token_b: &TokenVector,
) -> Result<(TokenLoss, MixDetail)> {
    let cfg = model.config();
    let input = pair_input(token_a, token_b, cfg.normalize_pair_input)?;
    let trace = model.trace(&input)?;
    let adaptive = world.trace_prompt(TemplateKind::AdaptivePhoto, trace.token.as_slice())?;
    let restrictive = world.encode_pair_prompt(token_a, token_b)?;
    let auxiliary = world.aux_embedding();

    let cos_r = cosine_with_grad(restrictive.as_slice(), adaptive.embedding.as_slice())?;
    let cos_s = cosine_with_grad(auxiliary.as_slice(), adaptive.embedding.as_slice())?;
    let (term_r, slope_r, clamped_r) = thresholded_distance(cos_r.value, cfg.theta1);
    let (term_s, slope_s, clamped_s) = thresholded_distance(cos_s.value, cfg.theta2);

    let mut grad_embedding = vec![0.0; cos_r.grad_b.len()];
    crate::ndmath::ops::axpy(slope_r, &cos_r.grad_b, &mut grad_embedding);
    crate::ndmath::ops::axpy(slope_s, &cos_s.grad_b, &mut grad_embedding);
    let grad_token = adaptive.backward(world, &grad_embedding);

    Ok((
        TokenLoss {
            value: term_r + term_s,
            trace,
            grad_token,
        },
        MixDetail {
            cos_restrictive: cos_r.value,
            cos_auxiliary: cos_s.value,
            restrictive_clamped: clamped_r,
            auxiliary_clamped: clamped_s,
        },
    ))
}

/// Thresholded fusion loss with gradients for every model parameter.
pub fn mix_loss(
    world: &World,
    model: &DistokModel,
    token_a: &TokenVector,
    token_b: &TokenVector,
) -> Result<(LossTerm, MixDetail)> {
    let (fwd, detail) = mix_forward(world, model, token_a, token_b)?;
    let grads = model.backward(&fwd.trace, &fwd.grad_token)?;
    Ok((
        LossTerm {
            value: fwd.value,
            grads,
            latent: fwd.trace.latent,
            token: fwd.trace.token,
        },
        detail,
    ))
}

/// Consistency loss up to the creative token. The target receives no gradient.
pub fn consistency_forward(
    world: &World,
    model: &DistokModel,
    distribution: &ClassDistribution,
    known_tokens: &[TokenVector],
    target_token: &TokenVector,
) -> Result<TokenLoss> {
    let input = combine_tokens(distribution, known_tokens)?;
    let trace = model.trace(&input)?;
    let generated = world.trace_prompt(TemplateKind::Neutral, trace.token.as_slice())?;
    let target = world.encode_prompt(TemplateKind::Neutral, target_token)?;
    let cos = cosine_with_grad(generated.embedding.as_slice(), target.as_slice())?;
    let grad_embedding: Vec<f64> = cos.grad_a.iter().map(|g| -g).collect();
    let grad_token = generated.backward(world, &grad_embedding);
    Ok(TokenLoss {
        value: 1.0 - cos.value,
        trace,
        grad_token,
    })
}

pub fn consistency_loss(
    world: &World,
    model: &DistokModel,
    distribution: &ClassDistribution,
    known_tokens: &[TokenVector],
    target_token: &TokenVector,
) -> Result<LossTerm> {
    let fwd = consistency_forward(world, model, distribution, known_tokens, target_token)?;
    let grads = model.backward(&fwd.trace, &fwd.grad_token)?;
    Ok(LossTerm {
        value: fwd.value,
        grads,
        latent: fwd.trace.latent,
        token: fwd.trace.token,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentBatchStats {
    pub mean: Vec<f64>,
    /// Dimension-averaged population variance, after flooring.
    pub variance: f64,
    pub variance_floored: bool,
}

#[derive(Debug, Clone)]
pub struct RegOutcome {
    pub stats: LatentBatchStats,
    pub value: f64,
    /// `d value / d z_i` for every latent in the batch.
    pub grads: Vec<Vec<f64>>,
}

/// `‖μ‖² / σ²` over a batch of latents.
pub fn reg_loss(latents: &[LatentVector]) -> Result<RegOutcome> {
    reg_loss_with_anchor(latents, 0.0)
}

/// [`reg_loss`] plus `anchor · (σ² − 1)²`.
pub fn reg_loss_with_anchor(latents: &[LatentVector], anchor: f64) -> Result<RegOutcome> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::OutOfRange(format!(
            "latent regularizer needs at least 2 latents, got {n}"
        )));
    }
    let dim = latents[0].len();
    for z in latents {
        check_len("latent batch", dim, z.len())?;
    }
    let nf = n as f64;
    let df = dim as f64;
    let mut mean = vec![0.0; dim];
    for z in latents {
        crate::ndmath::ops::axpy(1.0 / nf, z.as_slice(), &mut mean);
    }
    let mut raw_var = 0.0;
    for z in latents {
        for (v, m) in z.as_slice().iter().zip(&mean) {
            raw_var += (v - m) * (v - m);
        }
    }
    raw_var /= nf * df;
    let floored = raw_var < VARIANCE_FLOOR;
    let var = if floored { VARIANCE_FLOOR } else { raw_var };
    let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
    let mut value = mean_sq / var;
    if anchor > 0.0 {
        value += anchor * (var - 1.0) * (var - 1.0);
    }

    // d(A/S) = dA/S − A dS/S²; dS vanishes while the floor is engaged.
    let dvar_scale = if floored {
        0.0
    } else {
        -mean_sq / (var * var) + 2.0 * anchor * (var - 1.0)
    };
    let grads = latents
        .iter()
        .map(|z| {
            z.as_slice()
                .iter()
                .zip(&mean)
                .map(|(v, m)| 2.0 * m / (nf * var) + dvar_scale * 2.0 * (v - m) / (nf * df))
                .collect()
        })
        .collect();
    Ok(RegOutcome {
        stats: LatentBatchStats {
            mean,
            variance: var,
            variance_floored: floored,
        },
        value,
        grads,
    })
}

/// Per-window loss summary.
///
/// `mix` and `cst` are means over the sub-steps of each kind, absent when no
/// sub-step of that kind ran. `total` is
/// `(α·Σ mix + β·Σ cst) / n + γ·reg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mix: Option<f64>,
    pub cst: Option<f64>,
    pub reg: f64,
    pub total: f64,
    pub mix_grad_norm: f64,
    pub cst_grad_norm: f64,
    pub reg_grad_norm: f64,
    pub reg_variance_floored: bool,
}

impl LossBreakdown {
    pub fn total_of(
        mix_values: &[f64],
        cst_values: &[f64],
        reg: f64,
        n: usize,
        weights: (f64, f64, f64),
    ) -> f64 {
        let (alpha, beta, gamma) = weights;
        let mix_sum: f64 = mix_values.iter().sum();
        let cst_sum: f64 = cst_values.iter().sum();
        (alpha * mix_sum + beta * cst_sum) / n as f64 + gamma * reg
    }
}
