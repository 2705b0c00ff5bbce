//! The five dense networks that make up one client.
//!
//! | net | maps | shared? |
//! |-----|------|---------|
//! | persona (ψ) | `x[D] → z_p[d_p]` | private |
//! | learngene (φ) | `x[D] → (μ, log σ²)[d_l each]` | averaged around the ring |
//! | decoder (θ) | `concat(z_p, z_l)[d_p + d_l] → x'[D]` | private |
//! | classifier (ω) | `x[D] → logits[K]` | private |
//! | adversary (ϑ) | `z_l[d_l] → logits[K]` | private |
//!
//! Hidden layers use `tanh`; output layers are linear. Parameters are
//! flattened in canonical order (per layer: weight row-major, then bias),
//! which is also the wire order for the learngene.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds;

/// Clamp applied to every log-variance produced or stored.
pub const LOGVAR_RANGE: (f64, f64) = (-12.0, 12.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Self {
        MlpSpec {
            layer_widths,
            activation: Activation::Tanh,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs at least two positive widths, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        MlpSpec {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multilayer perceptron with tanh hidden activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

/// Tape handles for one binding of an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl Mlp {
    /// Uniform init in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds::rng(spec.seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
                let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))
                    .expect("widths are positive")
                    .requiring_grad();
                let bias = Tensor::vector(draw(fan_out)).requiring_grad();
                Linear { weight, bias }
            })
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Set every weight and bias to `value`.
    pub fn fill(&mut self, value: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().fill(value);
            l.bias.data_mut().fill(value);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params() {
            out.extend_from_slice(p.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("load_flat", &[self.param_count()], &[flat.len()]));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Concatenated gradients in canonical order (zeros where absent).
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params() {
            match p.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
        }
    }

    /// Bind as constants: gradients stop at this network.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.constant(&l.weight), tape.constant(&l.bias)))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.input_width()) {
            return Err(Error::shape("mlp", tape.shape(x), &[self.input_width()]));
        }
        let last = bound.vars.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in bound.vars.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i < last {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Plain forward pass without gradient bookkeeping.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.to_tensor(out))
    }

    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundMlp) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            grads.accumulate(w, &mut layer.weight)?;
            grads.accumulate(b, &mut layer.bias)?;
        }
        Ok(())
    }

    /// SGD with the accumulated gradients, then clear them.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        let mut params = self.params_mut();
        sgd_step(&mut params, lr)?;
        params.iter_mut().for_each(|p| p.zero_grad());
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().iter_mut().for_each(|p| p.zero_grad());
    }
}

/// Widths shared by all clients of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub persona: usize,
    pub learngene: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input: 8,
            persona: 4,
            learngene: 4,
            classes: 4,
            hidden: vec![32, 32],
        }
    }
}

impl ModelDims {
    fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend_from_slice(&self.hidden);
        w.push(output);
        w
    }
}

/// How private (non-learngene) networks are seeded across clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrivateInit {
    /// Each client draws its own private initialization.
    #[default]
    PerClient,
    /// All clients start their private nets from one common draw.
    Common,
}

/// Per-net specs for one client; seeds here are base seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub persona: MlpSpec,
    pub learngene: MlpSpec,
    pub decoder: MlpSpec,
    pub classifier: MlpSpec,
    pub adversary: MlpSpec,
    #[serde(default)]
    pub private_init: PrivateInit,
}

impl ClientSpec {
    pub fn from_dims(dims: &ModelDims, base_seed: u64) -> Self {
        let s = |tag: u64| seeds::mix(base_seed, &[tag]);
        ClientSpec {
            persona: MlpSpec::new(dims.widths(dims.input, dims.persona), s(1)),
            learngene: MlpSpec::new(dims.widths(dims.input, 2 * dims.learngene), s(2)),
            decoder: MlpSpec::new(dims.widths(dims.persona + dims.learngene, dims.input), s(3)),
            classifier: MlpSpec::new(dims.widths(dims.input, dims.classes), s(4)),
            adversary: MlpSpec::new(dims.widths(dims.learngene, dims.classes), s(5)),
            private_init: PrivateInit::PerClient,
        }
    }

    /// Recover `(D, d_p, d_l, K)` and check the nets agree on them.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        for s in [&self.persona, &self.learngene, &self.decoder, &self.classifier, &self.adversary] {
            s.validate()?;
        }
        let first = |s: &MlpSpec| s.layer_widths[0];
        let last = |s: &MlpSpec| *s.layer_widths.last().unwrap();
        let d = first(&self.persona);
        let dp = last(&self.persona);
        let lg_out = last(&self.learngene);
        let k = last(&self.classifier);
        let bad = |what: &str| Err(Error::Config(format!("incoherent widths: {what}")));
        if lg_out % 2 != 0 {
            return bad("learngene output must hold mean and log-variance halves");
        }
        let dl = lg_out / 2;
        if first(&self.learngene) != d || first(&self.classifier) != d {
            return bad("encoders and classifier must read the same input width");
        }
        if first(&self.decoder) != dp + dl {
            return bad("decoder input must equal persona + learngene latent widths");
        }
        if last(&self.decoder) != d {
            return bad("decoder output must equal input width");
        }
        if first(&self.adversary) != dl || last(&self.adversary) != k {
            return bad("adversary must map learngene latent to class logits");
        }
        Ok((d, dp, dl, k))
    }
}

/// Output of the learngene encoder for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LearngeneOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

/// One client's full model: `[ψ, φ, θ, ω]` plus the adversary `ϑ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub client_id: usize,
    pub persona_net: Mlp,
    pub learngene: Mlp,
    pub decoder: Mlp,
    pub classifier: Mlp,
    pub adversary: Mlp,
    input_dim: usize,
    persona_dim: usize,
    learngene_dim: usize,
    classes: usize,
}

/// Learngene tape handles split into mean and clamped log-variance.
#[derive(Clone, Copy, Debug)]
pub struct LearngeneVars {
    pub mu: Var,
    pub logvar: Var,
}

impl ClientModel {
    /// Learngene comes from `shared_learngene_seed`; the other nets from the
    /// spec's base seeds, mixed with the client id unless the spec asks for
    /// a common private initialization.
    pub fn init(spec: &ClientSpec, client_id: usize, shared_learngene_seed: u64) -> Result<Self> {
        let (d, dp, dl, k) = spec.dims()?;
        let private = |s: &MlpSpec| -> Result<Mlp> {
            let seed = match spec.private_init {
                PrivateInit::PerClient => seeds::mix(s.seed, &[client_id as u64]),
                PrivateInit::Common => s.seed,
            };
            Mlp::new(s.with_seed(seed))
        };
        Ok(ClientModel {
            client_id,
            persona_net: private(&spec.persona)?,
            learngene: Mlp::new(spec.learngene.with_seed(shared_learngene_seed))?,
            decoder: private(&spec.decoder)?,
            classifier: private(&spec.classifier)?,
            adversary: private(&spec.adversary)?,
            input_dim: d,
            persona_dim: dp,
            learngene_dim: dl,
            classes: k,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn persona_dim(&self) -> usize {
        self.persona_dim
    }

    pub fn learngene_dim(&self) -> usize {
        self.learngene_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn learngene_param_count(&self) -> usize {
        self.learngene.param_count()
    }

    pub fn nets(&self) -> [&Mlp; 5] {
        [&self.persona_net, &self.learngene, &self.decoder, &self.classifier, &self.adversary]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 5] {
        [
            &mut self.persona_net,
            &mut self.learngene,
            &mut self.decoder,
            &mut self.classifier,
            &mut self.adversary,
        ]
    }

    fn check_width(&self, op: &'static str, x: &Tensor, width: usize) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != width {
            return Err(Error::shape(op, x.shape(), &[width]));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Learngene forward on the tape: mean and clamped log-variance.
    pub fn learngene_vars(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<LearngeneVars> {
        let out = self.learngene.forward(tape, bound, x)?;
        let mu = tape.narrow(out, 0, self.learngene_dim)?;
        let raw = tape.narrow(out, self.learngene_dim, self.learngene_dim)?;
        let logvar = tape.clamp(raw, LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        Ok(LearngeneVars { mu, logvar })
    }

    /// Deterministic persona code `z_p` for a batch.
    pub fn encode_persona(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width("encode_persona", x, self.input_dim)?;
        self.persona_net.apply(x)
    }

    /// `z_l = μ + exp(logvar / 2)⊙ε` with `ε` drawn from `rng_seed`.
    pub fn encode_learngene(&self, x: &Tensor, rng_seed: u64) -> Result<LearngeneOutput> {
        self.check_width("encode_learngene", x, self.input_dim)?;
        let mut tape = Tape::new();
        let bound = self.learngene.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let LearngeneVars { mu, logvar } = self.learngene_vars(&mut tape, &bound, xv)?;
        let mut rng = seeds::rng(rng_seed);
        let z = tape.gaussian_sample(mu, logvar, &mut rng)?;
        Ok(LearngeneOutput {
            mu: tape.to_tensor(mu),
            logvar: tape.to_tensor(logvar),
            z: tape.to_tensor(z),
        })
    }

    pub fn decode(&self, z_p: &Tensor, z_l: &Tensor) -> Result<Tensor> {
        self.check_width("decode", z_p, self.persona_dim)?;
        self.check_width("decode", z_l, self.learngene_dim)?;
        if z_p.rows() != z_l.rows() {
            return Err(Error::shape("decode", z_p.shape(), z_l.shape()));
        }
        let mut tape = Tape::new();
        let bound = self.decoder.bind_frozen(&mut tape);
        let (a, b) = (tape.constant(z_p), tape.constant(z_l));
        let z = tape.concat(&[a, b])?;
        let out = self.decoder.forward(&mut tape, &bound, z)?;
        Ok(tape.to_tensor(out))
    }

    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width("classify", x, self.input_dim)?;
        self.classifier.apply(x)
    }

    pub fn adversary_logits(&self, z_l: &Tensor) -> Result<Tensor> {
        self.check_width("adversary_logits", z_l, self.learngene_dim)?;
        self.adversary.apply(z_l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log_sum_exp;

    fn spec() -> ClientSpec {
        ClientSpec::from_dims(&ModelDims::default(), 99)
    }

    fn batch(rows: usize, seed: u64) -> Tensor {
        let mut rng = seeds::rng(seed);
        Tensor::matrix(rows, 8, (0..rows * 8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn learngene_shared_private_distinct() {
        let a = ClientModel::init(&spec(), 0, 7).unwrap();
        let b = ClientModel::init(&spec(), 1, 7).unwrap();
        assert_eq!(a.learngene.flatten(), b.learngene.flatten());
        assert_ne!(a.persona_net.flatten(), b.persona_net.flatten());
        assert_ne!(a.classifier.flatten(), b.classifier.flatten());
        assert_eq!(a.decoder.input_width(), 8);
    }

    #[test]
    fn common_private_init_matches_across_clients() {
        let mut s = spec();
        s.private_init = PrivateInit::Common;
        let a = ClientModel::init(&s, 0, 7).unwrap();
        let b = ClientModel::init(&s, 3, 7).unwrap();
        assert_eq!(a.persona_net.flatten(), b.persona_net.flatten());
    }

    #[test]
    fn incoherent_widths_rejected() {
        let mut s = spec();
        s.decoder.layer_widths[0] = 9;
        assert!(matches!(ClientModel::init(&s, 0, 1), Err(Error::Config(_))));
        let mut s = spec();
        s.persona.layer_widths = vec![8];
        assert!(ClientModel::init(&s, 0, 1).is_err());
    }

    #[test]
    fn learngene_param_count_for_default_dims() {
        let m = ClientModel::init(&spec(), 0, 1).unwrap();
        // 8·32+32 + 32·32+32 + 32·8+8
        assert_eq!(m.learngene_param_count(), 1608);
    }

    #[test]
    fn persona_is_stateless_per_row() {
        let m = ClientModel::init(&spec(), 0, 1).unwrap();
        let x = batch(1, 3);
        let twice = Tensor::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]).unwrap();
        let z = m.encode_persona(&twice).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.shape(), &[2, 4]);
    }

    #[test]
    fn zero_network_outputs_zero_or_bias() {
        let mut m = ClientModel::init(&spec(), 0, 1).unwrap();
        m.persona_net.fill(0.0);
        let z = m.encode_persona(&batch(3, 1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        m.decoder.fill(0.0);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        m.decoder.layers_mut().last_mut().unwrap().bias.data_mut().copy_from_slice(&bias);
        let zp = Tensor::filled(vec![2, 4], 0.3);
        let zl = Tensor::filled(vec![2, 4], -1.0);
        let out = m.decode(&zp, &zl).unwrap();
        assert_eq!(out.row(0), &bias[..]);
        assert_eq!(out.row(1), &bias[..]);
    }

    #[test]
    fn persona_input_gradient_matches_finite_differences() {
        let m = ClientModel::init(&spec(), 2, 1).unwrap();
        let x = batch(3, 5);
        let f = |data: &[f64]| {
            let t = Tensor::matrix(3, 8, data.to_vec()).unwrap();
            m.encode_persona(&t).unwrap().data().iter().sum::<f64>()
        };
        let mut tape = Tape::new();
        let bound = m.persona_net.bind_frozen(&mut tape);
        let xv = tape.param(&x);
        let z = m.persona_net.forward(&mut tape, &bound, xv).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap().get(xv).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut p, mut q) = (x.data().to_vec(), x.data().to_vec());
            p[i] += h;
            q[i] -= h;
            let num = (f(&p) - f(&q)) / (2.0 * h);
            assert!((num - g[i]).abs() / num.abs().max(1e-6) < 1e-4, "{num} vs {}", g[i]);
        }
    }

    #[test]
    fn learngene_floor_variance_sample_sits_on_mean() {
        let mut m = ClientModel::init(&spec(), 0, 1).unwrap();
        // Drive the log-variance half of the output far below the clamp floor.
        let last = m.learngene.layers_mut().last_mut().unwrap();
        for row in 0..last.weight.rows() {
            for col in 4..8 {
                last.weight.data_mut()[row * 8 + col] = 0.0;
            }
        }
        for col in 4..8 {
            last.bias.data_mut()[col] = -100.0;
        }
        let x = batch(4, 2);
        let out = m.encode_learngene(&x, 17).unwrap();
        assert!(out.logvar.data().iter().all(|&v| v == LOGVAR_RANGE.0));
        let sd = (0.5 * LOGVAR_RANGE.0).exp();
        let mut rng = seeds::rng(17);
        for ((z, mu), _) in out.z.data().iter().zip(out.mu.data()).zip(0..) {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            assert_eq!(*z, mu + sd * eps);
        }
        let again = m.encode_learngene(&x, 17).unwrap();
        assert_eq!(out.z, again.z);
    }

    #[test]
    fn learngene_sample_mean_converges() {
        let m = ClientModel::init(&spec(), 0, 1).unwrap();
        let x = batch(1, 8);
        let n = 100_000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| x.row(0).to_vec()).collect();
        let big = Tensor::from_rows(&rows).unwrap();
        let out = m.encode_learngene(&big, 4).unwrap();
        for j in 0..4 {
            let mean: f64 = (0..n).map(|r| out.z.row(r)[j]).sum::<f64>() / n as f64;
            let mu = out.mu.row(0)[j];
            let sigma = (0.5 * out.logvar.row(0)[j]).exp();
            assert!((mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt(), "dim {j}: {mean} vs {mu}");
        }
    }

    #[test]
    fn decoder_with_identity_weights_copies_prefix() {
        let mut s = spec();
        s.decoder.layer_widths = vec![8, 8];
        let mut m = ClientModel::init(&s, 0, 1).unwrap();
        m.decoder.fill(0.0);
        let w = &mut m.decoder.layers_mut()[0].weight;
        for i in 0..8 {
            w.data_mut()[i * 8 + i] = 1.0;
        }
        let zp = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zl = Tensor::matrix(1, 4, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = m.decode(&zp, &zl).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn decoder_gradient_reaches_both_latents() {
        let m = ClientModel::init(&spec(), 0, 1).unwrap();
        let mut tape = Tape::new();
        let bound = m.decoder.bind_frozen(&mut tape);
        let zp = tape.param(&Tensor::filled(vec![2, 4], 0.2));
        let zl = tape.param(&Tensor::filled(vec![2, 4], -0.4));
        let z = tape.concat(&[zp, zl]).unwrap();
        let out = m.decoder.forward(&mut tape, &bound, z).unwrap();
        let sq = tape.square(out);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(zp).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.get(zl).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn decode_rejects_wrong_latent_width() {
        let m = ClientModel::init(&spec(), 0, 1).unwrap();
        let zp = Tensor::zeros(vec![2, 3]);
        let zl = Tensor::zeros(vec![2, 4]);
        assert!(matches!(m.decode(&zp, &zl), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_classifier_is_uniform_and_rows_permute() {
        let mut m = ClientModel::init(&spec(), 0, 1).unwrap();
        let x = batch(3, 4);
        let logits = m.classify(&x).unwrap();
        let perm = x.select_rows(&[2, 0, 1]);
        let plogits = m.classify(&perm).unwrap();
        assert_eq!(plogits.row(0), logits.row(2));
        assert_eq!(plogits.row(1), logits.row(0));

        m.classifier.fill(0.0);
        let logits = m.classify(&x).unwrap();
        for r in 0..3 {
            let lse = log_sum_exp(logits.row(r));
            for &l in logits.row(r) {
                assert!(((l - lse).exp() - 0.25).abs() < 1e-12);
            }
        }
        m.adversary.fill(0.0);
        let a = m.adversary_logits(&Tensor::filled(vec![2, 4], 1.0)).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_built_separator_is_perfect_on_separable_blobs() {
        // Single linear layer whose logits are -‖x - c_k‖² up to a shared
        // per-row term: w_k = 2c_k, b_k = -‖c_k‖².
        let mut s = spec();
        s.classifier.layer_widths = vec![8, 4];
        let mut m = ClientModel::init(&s, 0, 1).unwrap();
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..8).map(|j| if j == k { 6.0 } else { 0.0 }).collect())
            .collect();
        let layer = &mut m.classifier.layers_mut()[0];
        for (k, c) in centers.iter().enumerate() {
            for j in 0..8 {
                layer.weight.data_mut()[j * 4 + k] = 2.0 * c[j];
            }
            layer.bias.data_mut()[k] = -c.iter().map(|v| v * v).sum::<f64>();
        }
        let mut rng = seeds::rng(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let k = rng.gen_range(0..4);
            rows.push(centers[k].iter().map(|c| c + rng.gen_range(-1.0..1.0)).collect());
            labels.push(k);
        }
        let logits = m.classify(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let correct = (0..200)
            .filter(|&r| {
                let row = logits.row(r);
                let arg = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                arg == labels[r]
            })
            .count();
        assert_eq!(correct, 200);
    }
}
