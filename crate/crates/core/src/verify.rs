//! End-to-end finite-difference verification of every loss, plus the isolated
//! primitives they are built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    consistency_loss, mix_loss, pair_input, reg_loss, DistokModel, LatentVector, ModelGrad,
};
use crate::ndmath::ops::{cosine_with_grad, normalize, normalize_backward};
use crate::ndmath::{finite_diff_check, GradCheckReport, Mlp2, Parameters};
use crate::world::{ClassDistribution, TokenVector, World};

pub const PIPELINE_TOLERANCE: f64 = 1e-4;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
const STEP: f64 = 1e-5;
const REG_BATCH: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    /// Multiplies every analytic gradient, as a negative control.
    pub fault_scale: Option<f64>,
}

impl SuiteOptions {
    fn apply(&self, mut g: Vec<f64>) -> Vec<f64> {
        if let Some(s) = self.fault_scale {
            g.iter_mut().for_each(|v| *v *= s);
        }
        g
    }
}

fn check_model<F>(model: &DistokModel, grads: Vec<f64>, f: F) -> GradCheckReport
where
    F: Fn(&DistokModel) -> Result<f64>,
{
    let params = model.to_flat();
    let mut scratch = model.clone();
    finite_diff_check(
        |p| {
            scratch.set_flat(p).expect("parameter length fixed");
            f(&scratch).unwrap_or(f64::NAN)
        },
        &params,
        &grads,
        STEP,
        PIPELINE_TOLERANCE,
    )
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_distribution<R: Rng>(rng: &mut R, k: usize) -> Result<ClassDistribution> {
    let size = rng.random_range(2..=k.min(4));
    let support = rand::seq::index::sample(rng, k, size).into_vec();
    let weights: Vec<f64> = (0..size).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    ClassDistribution::new(support, weights.iter().map(|w| w / total).collect())
}

/// Gradients of the three losses with respect to every model parameter,
/// through encoder, decoder and world.
pub fn pipeline_checks(world: &World, model: &DistokModel, seed: u64, opts: SuiteOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = world.num_known();
    let mut out = Vec::new();

    let a = rng.random_range(0..k);
    let b = (a + rng.random_range(1..k)) % k;
    let (ta, tb) = (world.known_tokens()[a].clone(), world.known_tokens()[b].clone());
    let (term, _) = mix_loss(world, model, &ta, &tb)?;
    let report = check_model(model, opts.apply(term.grads.to_flat()), |m| {
        Ok(mix_loss(world, m, &ta, &tb)?.0.value)
    });
    out.push(NamedCheck {
        name: format!("mix(c{a}, c{b})"),
        report,
    });

    let dist = random_distribution(&mut rng, k)?;
    let target = TokenVector::new(random_vec(&mut rng, world.token_dim()))?;
    let term = consistency_loss(world, model, &dist, world.known_tokens(), &target)?;
    let report = check_model(model, opts.apply(term.grads.to_flat()), |m| {
        Ok(consistency_loss(world, m, &dist, world.known_tokens(), &target)?.value)
    });
    out.push(NamedCheck {
        name: "consistency".into(),
        report,
    });

    let normalize_pairs = model.config().normalize_pair_input;
    let inputs: Vec<TokenVector> = (0..REG_BATCH)
        .map(|_| {
            let i = rng.random_range(0..k);
            let j = (i + rng.random_range(1..k)) % k;
            pair_input(&world.known_tokens()[i], &world.known_tokens()[j], normalize_pairs)
        })
        .collect::<Result<_>>()?;
    let reg_of = |m: &DistokModel| -> Result<f64> {
        let latents: Vec<LatentVector> = inputs.iter().map(|x| m.encode(x)).collect::<Result<_>>()?;
        Ok(reg_loss(&latents)?.value)
    };
    let traces = inputs.iter().map(|x| model.trace(x)).collect::<Result<Vec<_>>>()?;
    let latents: Vec<LatentVector> = traces.iter().map(|t| t.latent.clone()).collect();
    let reg = reg_loss(&latents)?;
    let mut grads = ModelGrad::zeros(model);
    for (t, g) in traces.iter().zip(&reg.grads) {
        grads.encoder.add_scaled(&model.backward_encoder(t, g)?, 1.0);
    }
    let report = check_model(model, opts.apply(grads.to_flat()), reg_of);
    out.push(NamedCheck {
        name: "latent regularizer".into(),
        report,
    });
    Ok(out)
}

/// Cosine, normalization, perceptron input gradient and the regularizer in its
/// latents, each checked on random inputs.
pub fn primitive_checks(seed: u64, opts: SuiteOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let dim = 16;

    let a = random_vec(&mut rng, dim);
    let b = random_vec(&mut rng, dim);
    let cos = cosine_with_grad(&a, &b)?;
    let report = finite_diff_check(
        |x| cosine_with_grad(x, &b).map(|c| c.value).unwrap_or(f64::NAN),
        &a,
        &opts.apply(cos.grad_a),
        STEP,
        PRIMITIVE_TOLERANCE,
    );
    out.push(NamedCheck {
        name: "cosine".into(),
        report,
    });

    // Scalar projection of the unit vector so the check is one-dimensional.
    let w = random_vec(&mut rng, dim);
    let (unit, n) = normalize(&a, "check")?;
    let grad = normalize_backward(&unit, n, &w);
    let report = finite_diff_check(
        |x| {
            normalize(x, "check")
                .map(|(u, _)| u.iter().zip(&w).map(|(p, q)| p * q).sum())
                .unwrap_or(f64::NAN)
        },
        &a,
        &opts.apply(grad),
        STEP,
        PRIMITIVE_TOLERANCE,
    );
    out.push(NamedCheck {
        name: "normalize".into(),
        report,
    });

    let net = Mlp2::random(dim, 12, 5, &mut rng);
    let probe = random_vec(&mut rng, 5);
    let (_, cache) = net.forward(&a)?;
    let (grad_in, _) = net.backward(&cache, &probe)?;
    let report = finite_diff_check(
        |x| {
            net.forward(x)
                .map(|(y, _)| y.iter().zip(&probe).map(|(p, q)| p * q).sum())
                .unwrap_or(f64::NAN)
        },
        &a,
        &opts.apply(grad_in),
        STEP,
        PRIMITIVE_TOLERANCE,
    );
    out.push(NamedCheck {
        name: "perceptron input".into(),
        report,
    });

    let latent_dim = 4;
    let flat = random_vec(&mut rng, REG_BATCH * latent_dim);
    let batch = |x: &[f64]| -> Result<Vec<LatentVector>> {
        x.chunks(latent_dim).map(|c| LatentVector::new(c.to_vec())).collect()
    };
    let reg = reg_loss(&batch(&flat)?)?;
    let analytic: Vec<f64> = reg.grads.concat();
    let report = finite_diff_check(
        |x| batch(x).and_then(|b| reg_loss(&b)).map(|r| r.value).unwrap_or(f64::NAN),
        &flat,
        &opts.apply(analytic),
        STEP,
        PRIMITIVE_TOLERANCE,
    );
    out.push(NamedCheck {
        name: "regularizer latents".into(),
        report,
    });
    Ok(out)
}

pub fn all_passed(checks: &[NamedCheck]) -> bool {
    checks.iter().all(|c| c.report.passed)
}

/// The check with the largest relative error.
pub fn worst(checks: &[NamedCheck]) -> Option<&NamedCheck> {
    checks
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
}
