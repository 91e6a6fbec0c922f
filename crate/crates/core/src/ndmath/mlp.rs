//! Two-layer perceptron with an explicit forward cache and exact reverse-mode
//! gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec;
use crate::error::{check_len, Error, Result};

/// Anything that exposes named parameter tensors in a fixed order.
///
/// The visiting order defines the layout of flattened parameter vectors and of
/// optimizer state, so implementations must keep it stable.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.num_params(), flat.len())?;
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }

    fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.iter().map(|v| v * v).sum::<f64>());
        s
    }
}

/// Fully connected layer `y = W x + b` with a row-major `out × in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights drawn from `N(0, 1/in_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let out_dim = rows.len();
        check_len("dense bias", out_dim, bias.len())?;
        let in_dim = rows.first().map_or(0, Vec::len);
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Malformed("dense layer with an empty dimension".into()));
        }
        let mut weight = Vec::with_capacity(in_dim * out_dim);
        for row in rows {
            check_len("dense weight row", in_dim, row.len())?;
            weight.extend(row);
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense layer".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weight.chunks(self.in_dim).map(<[f64]>::to_vec).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// `Wᵀ g`
    fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, gi) in self.weight.chunks_exact(self.in_dim).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct DenseDoc {
    #[serde(with = "codec::matrix")]
    weight: Vec<Vec<f64>>,
    #[serde(with = "codec::reals")]
    bias: Vec<f64>,
}

impl Serialize for DenseLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DenseDoc {
            weight: self.rows(),
            bias: self.bias.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = DenseDoc::deserialize(d)?;
        DenseLayer::from_rows(doc.weight, doc.bias).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// `output = W2 · tanh(W1 · input + b1) + b2`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp2 {
    layer1: DenseLayer,
    activation: Activation,
    layer2: DenseLayer,
    /// Bumped whenever parameters may have changed; caches record it.
    #[serde(skip)]
    revision: u64,
}

impl PartialEq for Mlp2 {
    fn eq(&self, other: &Self) -> bool {
        self.layer1 == other.layer1
            && self.layer2 == other.layer2
            && self.activation == other.activation
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    revision: u64,
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl MlpCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

impl Mlp2 {
    pub fn new(layer1: DenseLayer, layer2: DenseLayer) -> Result<Self> {
        check_len("mlp hidden width", layer1.out_dim, layer2.in_dim)?;
        Ok(Self {
            layer1,
            activation: Activation::Tanh,
            layer2,
            revision: 0,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let layer1 = DenseLayer::random(input, hidden, rng);
        let layer2 = DenseLayer::random(hidden, output, rng);
        Self::new(layer1, layer2).expect("consistent by construction")
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.out_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layer2.out_dim
    }

    pub fn layer1(&self) -> &DenseLayer {
        &self.layer1
    }

    pub fn layer2(&self) -> &DenseLayer {
        &self.layer2
    }

    pub fn layers_mut(&mut self) -> (&mut DenseLayer, &mut DenseLayer) {
        self.revision += 1;
        (&mut self.layer1, &mut self.layer2)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_len("mlp input", self.input_dim(), input.len())?;
        let mut hidden = self.layer1.forward(input);
        match self.activation {
            Activation::Tanh => hidden.iter_mut().for_each(|h| *h = h.tanh()),
        }
        let output = self.layer2.forward(&hidden);
        Ok((
            output,
            MlpCache {
                revision: self.revision,
                input: input.to_vec(),
                hidden,
            },
        ))
    }

    /// Returns `dL/d input` and the parameter gradients for `dL/d output`.
    pub fn backward(&self, cache: &MlpCache, grad_output: &[f64]) -> Result<(Vec<f64>, MlpGrad)> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache("parameters changed since forward"));
        }
        if cache.input.len() != self.input_dim() || cache.hidden.len() != self.hidden_dim() {
            return Err(Error::StaleCache("cache from a different network"));
        }
        check_len("mlp output gradient", self.output_dim(), grad_output.len())?;

        let mut grad = MlpGrad::zeros(self);
        outer_into(&mut grad.layer2.weight, grad_output, &cache.hidden);
        grad.layer2.bias.copy_from_slice(grad_output);

        let grad_hidden = self.layer2.transpose_apply(grad_output);
        let grad_pre: Vec<f64> = match self.activation {
            Activation::Tanh => grad_hidden
                .iter()
                .zip(&cache.hidden)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect(),
        };
        outer_into(&mut grad.layer1.weight, &grad_pre, &cache.input);
        grad.layer1.bias.copy_from_slice(&grad_pre);

        let grad_input = self.layer1.transpose_apply(&grad_pre);
        Ok((grad_input, grad))
    }
}

fn outer_into(out: &mut [f64], left: &[f64], right: &[f64]) {
    for (row, l) in out.chunks_exact_mut(right.len()).zip(left) {
        for (o, r) in row.iter_mut().zip(right) {
            *o = l * r;
        }
    }
}

impl Parameters for Mlp2 {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("layer1.weight", &self.layer1.weight);
        f("layer1.bias", &self.layer1.bias);
        f("layer2.weight", &self.layer2.weight);
        f("layer2.bias", &self.layer2.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.revision += 1;
        f("layer1.weight", &mut self.layer1.weight);
        f("layer1.bias", &mut self.layer1.bias);
        f("layer2.weight", &mut self.layer2.weight);
        f("layer2.bias", &mut self.layer2.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter-shaped gradient of an [`Mlp2`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layer1: DenseGrad,
    pub layer2: DenseGrad,
}

impl MlpGrad {
    pub fn zeros(net: &Mlp2) -> Self {
        let z = |l: &DenseLayer| DenseGrad {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        };
        Self {
            layer1: z(&net.layer1),
            layer2: z(&net.layer2),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrad, s: f64) {
        for (a, b) in [
            (&mut self.layer1.weight, &other.layer1.weight),
            (&mut self.layer1.bias, &other.layer1.bias),
            (&mut self.layer2.weight, &other.layer2.weight),
            (&mut self.layer2.bias, &other.layer2.bias),
        ] {
            super::ops::axpy(s, b, a);
        }
    }
}

impl Parameters for MlpGrad {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("layer1.weight", &self.layer1.weight);
        f("layer1.bias", &self.layer1.bias);
        f("layer2.weight", &self.layer2.weight);
        f("layer2.bias", &self.layer2.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("layer1.weight", &mut self.layer1.weight);
        f("layer1.bias", &mut self.layer1.bias);
        f("layer2.weight", &mut self.layer2.weight);
        f("layer2.bias", &mut self.layer2.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop re-implementation of the forward formula.
    fn oracle_forward(net: &Mlp2, x: &[f64]) -> Vec<f64> {
        let (l1, l2) = (net.layer1(), net.layer2());
        let mut hidden = vec![0.0; l1.out_dim()];
        for i in 0..l1.out_dim() {
            let mut acc = l1.bias()[i];
            for j in 0..l1.in_dim() {
                acc += l1.weight()[i * l1.in_dim() + j] * x[j];
            }
            hidden[i] = acc.tanh();
        }
        let mut out = vec![0.0; l2.out_dim()];
        for i in 0..l2.out_dim() {
            let mut acc = l2.bias()[i];
            for j in 0..l2.in_dim() {
                acc += l2.weight()[i * l2.in_dim() + j] * hidden[j];
            }
            out[i] = acc;
        }
        out
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp2::new(DenseLayer::zeros(3, 4), DenseLayer::zeros(4, 2)).unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_network_at_origin() {
        let eye = || DenseLayer::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2]).unwrap();
        let net = Mlp2::new(eye(), eye()).unwrap();
        let (y, _) = net.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let (y, _) = net.forward(&[0.5, -1.0]).unwrap();
        assert_eq!(y, vec![0.5f64.tanh(), (-1.0f64).tanh()]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp2::random(6, 9, 4, &mut rng);
        net.layers_mut().0.bias_mut().iter_mut().for_each(|b| *b = 0.1);
        let x = vec![1.0; 6];
        let (y, _) = net.forward(&x).unwrap();
        let expected = oracle_forward(&net, &x);
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp2::random(5, 7, 3, &mut rng);
        let (_, cache) = net.forward(&[0.3; 5]).unwrap();
        let (gx, g) = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(gx.iter().all(|v| *v == 0.0));
        assert_eq!(g.sq_norm(), 0.0);
    }

    #[test]
    fn single_unit_closed_form() {
        let (w1, b1, w2, b2, x) = (0.7, -0.2, 1.3, 0.4, 0.9);
        let net = Mlp2::new(
            DenseLayer::from_rows(vec![vec![w1]], vec![b1]).unwrap(),
            DenseLayer::from_rows(vec![vec![w2]], vec![b2]).unwrap(),
        )
        .unwrap();
        let (y, cache) = net.forward(&[x]).unwrap();
        let a = (w1 * x + b1).tanh();
        assert!((y[0] - (w2 * a + b2)).abs() < 1e-15);
        let (gx, g) = net.backward(&cache, &[1.0]).unwrap();
        let sech2 = 1.0 - a * a;
        assert!((gx[0] - w2 * sech2 * w1).abs() < 1e-15);
        assert!((g.layer1.weight[0] - w2 * sech2 * x).abs() < 1e-15);
        assert!((g.layer1.bias[0] - w2 * sech2).abs() < 1e-15);
        assert!((g.layer2.weight[0] - a).abs() < 1e-15);
        assert_eq!(g.layer2.bias[0], 1.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp2::random(5, 8, 3, &mut rng);
        let x = [0.4, -0.1, 0.9, -0.7, 0.2];
        let weights = [0.5, -1.5, 2.0];
        let loss = |n: &Mlp2, x: &[f64]| {
            let (y, _) = n.forward(x).unwrap();
            y.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward(&x).unwrap();
        let (gx, g) = net.backward(&cache, &weights).unwrap();

        let params = net.to_flat();
        let report = finite_diff_check(
            |p| {
                let mut n = net.clone();
                n.set_flat(p).unwrap();
                loss(&n, &x)
            },
            &params,
            &g.to_flat(),
            1e-5,
            1e-6,
        );
        assert!(report.passed, "{report:?}");

        let report = finite_diff_check(|xx| loss(&net, xx), &x, &gx, 1e-5, 1e-6);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp2::random(2, 3, 2, &mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2]).unwrap();
        net.visit_mut(&mut |_, t| t[0] += 1.0);
        assert!(matches!(
            net.backward(&cache, &[1.0, 1.0]),
            Err(Error::StaleCache(_))
        ));
        let other = Mlp2::random(3, 3, 2, &mut rng);
        let (_, cache) = other.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(net.backward(&cache, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp2::random(2, 3, 2, &mut rng);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(Mlp2::new(DenseLayer::zeros(2, 3), DenseLayer::zeros(4, 1)).is_err());
    }
}
