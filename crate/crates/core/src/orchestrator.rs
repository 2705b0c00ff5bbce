//! Round-by-round training over the ring.
//!
//! Each client, on its turn, blends inherited class statistics into its
//! bank, averages the inherited learngene into its own, runs `E` local
//! epochs of the four-phase update and hands its learngene and statistics
//! to the ring.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::class_stats::{loss_cls, loss_log, ClassGaussianBank, ClassStats};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean, AccuracyReport, GradientOracle, Predictor};
use crate::losses::{
    loss_adv, loss_adv_uniform, loss_ce_dual, loss_kl, reconstruct_with_noise, LossReport,
    LossWeights,
};
use crate::networks::{ClientModel, ClientSpec, ModelDims, PrivateInit};
use crate::partition::PartitionPlan;
use crate::ring::{merge_learngene, FaultEvent, Precision, Ring, RingConfig, RingEvent, RingMessage, RingMode,
    RingNode, RingTopology, CommLedger, RoundReport};
use crate::seeds::{self, Stream};

/// How a client turns an input into a class prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `argmax f_ω(x)`.
    #[default]
    Classifier,
    /// `argmax (f_ω(x) + f_ω(x')) / 2` with `x'` the noiseless reconstruction.
    ClassifierReconstruction,
    /// `argmax p(k | ψ(x))` under the class Gaussian bank.
    Posterior,
    /// `argmax (softmax f_ω(x) + p(k | ψ(x))) / 2`.
    ClassifierPosterior,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Self::Classifier),
            "classifier_reconstruction" => Ok(Self::ClassifierReconstruction),
            "posterior" => Ok(Self::Posterior),
            "classifier_posterior" => Ok(Self::ClassifierPosterior),
            _ => Err(Error::Config(format!("unknown inference mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_alpha: f64,
    /// Reconstruction noise as a fraction of each input column's std.
    pub noise_sigma: f64,
    pub mode: RingMode,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub disable_pr: bool,
    pub disable_gl: bool,
    /// `false` gives the local-only baseline: same training, no ring traffic.
    pub communicate: bool,
    pub precision: Precision,
    pub dims: ModelDims,
    pub private_init: PrivateInit,
    pub inference: InferenceMode,
    pub faults: Vec<FaultEvent>,
    /// Record the per-client event trace (merges and optimizer steps).
    pub instrument: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clients: 4,
            rounds: 60,
            local_epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            ema_alpha: 0.99,
            noise_sigma: 0.1,
            mode: RingMode::Sequential,
            seed: 0,
            loss_weights: LossWeights::default(),
            disable_pr: false,
            disable_gl: false,
            communicate: true,
            precision: Precision::F32,
            dims: ModelDims::default(),
            private_init: PrivateInit::default(),
            inference: InferenceMode::default(),
            faults: Vec::new(),
            instrument: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!("ema_alpha must be in (0, 1], got {}", self.ema_alpha));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.clients == 0 || self.batch_size == 0 {
            return bad("clients and batch_size must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if let Some(f) = self.faults.iter().find(|f| f.client >= self.clients) {
            return bad(format!("fault names client {} but there are {}", f.client, self.clients));
        }
        self.client_spec().dims()?;
        Ok(())
    }

    pub fn client_spec(&self) -> ClientSpec {
        let mut spec = ClientSpec::from_dims(&self.dims, seeds::derive(self.seed, Stream::Init, 0, 0));
        spec.private_init = self.private_init;
        spec
    }

    /// Seed of the learngene every client starts from.
    pub fn learngene_seed(&self) -> u64 {
        seeds::derive(self.seed, Stream::Init, 1, 0)
    }
}

/// Instrumentation hook events, in the order they happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    RoundStart { round: usize },
    MergeStats,
    MergeLearngene,
    Step { phase: Phase },
    Emit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Persona,
    Adversary,
    Learngene,
    Decoder,
    Classifier,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Persona => "persona",
            Phase::Adversary => "adversary",
            Phase::Learngene => "learngene",
            Phase::Decoder => "decoder",
            Phase::Classifier => "classifier",
        }
    }
}

/// What one client did in one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    /// Mean losses per local epoch.
    pub epochs: Vec<LossReport>,
    /// `‖φ̃ − φ‖²` before the merge, if a message was inherited.
    pub delta2: Option<f64>,
    /// Mean over steps of the squared gradient norm of `[ψ, φ, θ, ω]`.
    pub grad_norm2: f64,
    /// Sum over steps of the same quantity.
    pub grad_norm2_sum: f64,
    pub steps: usize,
}

/// A client's private state and its view of the data.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: usize,
    pub model: ClientModel,
    pub bank: ClassGaussianBank,
    data: Arc<Dataset>,
    train: Vec<usize>,
    noise_std: Vec<f64>,
    config: Arc<TrainConfig>,
    last: ClientRound,
    trace: Vec<TraceEvent>,
}

fn column_std(ds: &Dataset, idx: &[usize]) -> Vec<f64> {
    let d = ds.dim();
    if idx.len() < 2 {
        return vec![0.0; d];
    }
    let n = idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in idx {
        mean.iter_mut().zip(ds.inputs().row(i)).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for &i in idx {
        var.iter_mut()
            .zip(ds.inputs().row(i).iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / (n - 1.0));
    }
    var.into_iter().map(f64::sqrt).collect()
}

fn check_loss(v: f64, client: usize, round: usize, phase: Phase) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            client,
            round,
            phase: phase.name(),
        })
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum()
}

impl Client {
    pub fn new(
        id: usize,
        model: ClientModel,
        bank: ClassGaussianBank,
        data: Arc<Dataset>,
        train: Vec<usize>,
        config: Arc<TrainConfig>,
    ) -> Result<Self> {
        if model.input_dim() != data.dim() || model.classes() != data.classes() {
            return Err(Error::shape(
                "client",
                &[model.input_dim(), model.classes()],
                &[data.dim(), data.classes()],
            ));
        }
        if bank.classes() != model.classes() || bank.dim() != model.persona_dim() {
            return Err(Error::shape(
                "client bank",
                &[model.classes(), model.persona_dim()],
                &[bank.classes(), bank.dim()],
            ));
        }
        let noise_std = column_std(&data, &train)
            .into_iter()
            .map(|s| s * config.noise_sigma)
            .collect();
        Ok(Client {
            id,
            model,
            bank,
            data,
            train,
            noise_std,
            config,
            last: ClientRound::default(),
            trace: Vec::new(),
        })
    }

    /// Fresh client: shared learngene init, private nets per the spec.
    pub fn fresh(id: usize, data: Arc<Dataset>, train: Vec<usize>, config: Arc<TrainConfig>) -> Result<Self> {
        let model = ClientModel::init(&config.client_spec(), id, config.learngene_seed())?;
        let bank = ClassGaussianBank::new(config.dims.classes, config.dims.persona, config.ema_alpha)?;
        Self::new(id, model, bank, data, train, config)
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Switch how this client predicts; training is unaffected.
    pub fn set_inference(&mut self, mode: InferenceMode) {
        let mut cfg = self.config.as_ref().clone();
        cfg.inference = mode;
        self.config = Arc::new(cfg);
    }

    pub fn last_round(&self) -> &ClientRound {
        &self.last
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    fn hook(&mut self, e: TraceEvent) {
        if self.config.instrument {
            self.trace.push(e);
        }
    }

    /// Blend inherited statistics, then average in the inherited learngene.
    /// Returns `‖φ̃ − φ‖²` measured before the merge.
    pub fn inherit(&mut self, msg: &RingMessage) -> Result<f64> {
        self.bank.ema_merge(&msg.stats)?;
        self.hook(TraceEvent::MergeStats);
        let mut phi = self.model.learngene.flatten();
        if phi.len() != msg.learngene.len() {
            return Err(Error::shape("inherit", &[phi.len()], &[msg.learngene.len()]));
        }
        let delta2 = phi.iter().zip(&msg.learngene).map(|(a, b)| (a - b) * (a - b)).sum();
        merge_learngene(&mut phi, &msg.learngene)?;
        self.model.learngene.load_flat(&phi)?;
        self.hook(TraceEvent::MergeLearngene);
        Ok(delta2)
    }

    pub fn message(&self, round: usize) -> RingMessage {
        RingMessage {
            round: round as u32,
            sender: self.id as u32,
            learngene: self.model.learngene.flatten(),
            stats: self.bank.snapshot(),
        }
    }

    /// `E` epochs of the four-phase update over shuffled minibatches.
    pub fn local_train(&mut self, round: usize) -> Result<ClientRound> {
        let cfg = Arc::clone(&self.config);
        let mut out = ClientRound::default();
        let mut reparam = seeds::stream_rng(cfg.seed, Stream::Reparam, self.id as u64, round as u64);
        let mut recon = seeds::stream_rng(cfg.seed, Stream::ReconNoise, self.id as u64, round as u64);
        let mut order = self.train.clone();
        for epoch in 0..cfg.local_epochs {
            let tag = (round * cfg.local_epochs + epoch) as u64;
            order.shuffle(&mut seeds::stream_rng(cfg.seed, Stream::Minibatch, self.id as u64, tag));
            let mut reports = Vec::new();
            for batch in order.chunks(cfg.batch_size) {
                let (x, y) = self.data.batch(batch);
                let (report, g2) = self.train_step(round, &x, &y, &mut reparam, &mut recon)?;
                reports.push(report);
                out.grad_norm2_sum += g2;
                out.steps += 1;
            }
            out.epochs.push(LossReport::mean(&reports));
        }
        if out.steps > 0 {
            out.grad_norm2 = out.grad_norm2_sum / out.steps as f64;
        }
        Ok(out)
    }

    /// One minibatch through all four phases. Returns the loss values and
    /// the squared gradient norm over `[ψ, φ, θ, ω]`.
    fn train_step(
        &mut self,
        round: usize,
        x: &Tensor,
        y: &[usize],
        reparam: &mut ChaCha8Rng,
        recon: &mut ChaCha8Rng,
    ) -> Result<(LossReport, f64)> {
        let cfg = Arc::clone(&self.config);
        let w = &cfg.loss_weights;
        let lr = cfg.lr;
        let id = self.id;
        let mut report = LossReport::default();
        let mut g2 = 0.0;

        // PersonaNet and class statistics on L_PR.
        {
            let mut tape = Tape::new();
            let psi = self.model.persona_net.bind(&mut tape);
            let bank = self.bank.bind(&mut tape);
            let xv = tape.constant(x);
            let z_p = self.model.persona_net.forward(&mut tape, &psi, xv)?;
            let cls = loss_cls(&mut tape, bank, self.bank.classes(), z_p, y)?;
            let log = loss_log(&mut tape, bank, z_p, y)?;
            report.l_cls = check_loss(tape.scalar(cls), id, round, Phase::Persona)?;
            report.l_log = check_loss(tape.scalar(log), id, round, Phase::Persona)?;
            if !cfg.disable_pr {
                let a = tape.scale(cls, w.cls);
                let b = tape.scale(log, w.log);
                let total = tape.add(a, b)?;
                let grads = tape.backward(total)?;
                self.model.persona_net.accumulate(&grads, &psi)?;
                self.bank.accumulate(&grads, bank)?;
                g2 += norm2(&self.model.persona_net.flat_grad());
                self.model.persona_net.step(lr)?;
                self.bank.step(lr)?;
                self.hook(TraceEvent::Step { phase: Phase::Persona });
            }
        }

        // Adversary on detached z_l, then learngene through the frozen adversary.
        {
            let mut tape = Tape::new();
            let phi = self.model.learngene.bind_frozen(&mut tape);
            let adv = self.model.adversary.bind(&mut tape);
            let xv = tape.constant(x);
            let lv = self.model.learngene_vars(&mut tape, &phi, xv)?;
            let z = tape.gaussian_sample(lv.mu, lv.logvar, reparam)?;
            let z = tape.detach(z);
            let logits = self.model.adversary.forward(&mut tape, &adv, z)?;
            let l_adv = loss_adv(&mut tape, logits, y)?;
            report.l_adv = check_loss(tape.scalar(l_adv), id, round, Phase::Adversary)?;
            if !cfg.disable_gl {
                let scaled = tape.scale(l_adv, w.adv);
                let grads = tape.backward(scaled)?;
                self.model.adversary.accumulate(&grads, &adv)?;
                self.model.adversary.step(lr)?;
                self.hook(TraceEvent::Step { phase: Phase::Adversary });
            }
        }
        {
            let mut tape = Tape::new();
            let phi = self.model.learngene.bind(&mut tape);
            let adv = self.model.adversary.bind_frozen(&mut tape);
            let xv = tape.constant(x);
            let lv = self.model.learngene_vars(&mut tape, &phi, xv)?;
            let z = tape.gaussian_sample(lv.mu, lv.logvar, reparam)?;
            let kl = loss_kl(&mut tape, lv.mu, lv.logvar)?;
            let logits = self.model.adversary.forward(&mut tape, &adv, z)?;
            let adv_u = loss_adv_uniform(&mut tape, logits)?;
            report.l_kl = check_loss(tape.scalar(kl), id, round, Phase::Learngene)?;
            report.l_adv_u = check_loss(tape.scalar(adv_u), id, round, Phase::Learngene)?;
            if !cfg.disable_gl {
                let a = tape.scale(kl, w.kl);
                let b = tape.scale(adv_u, w.adv_u);
                let total = tape.add(a, b)?;
                let grads = tape.backward(total)?;
                self.model.learngene.accumulate(&grads, &phi)?;
                g2 += norm2(&self.model.learngene.flat_grad());
                self.model.learngene.step(lr)?;
                self.hook(TraceEvent::Step { phase: Phase::Learngene });
            }
        }

        // Decoder on fresh, detached codes; classifier on x and x_p.
        let x_p = {
            let mut tape = Tape::new();
            let psi = self.model.persona_net.bind_frozen(&mut tape);
            let phi = self.model.learngene.bind_frozen(&mut tape);
            let theta = self.model.decoder.bind(&mut tape);
            let xv = tape.constant(x);
            let z_p = self.model.persona_net.forward(&mut tape, &psi, xv)?;
            let lv = self.model.learngene_vars(&mut tape, &phi, xv)?;
            let z_l = tape.gaussian_sample(lv.mu, lv.logvar, reparam)?;
            let z = tape.concat(&[z_p, z_l])?;
            let x_rec = self.model.decoder.forward(&mut tape, &theta, z)?;
            let (l_rec, x_p) = reconstruct_with_noise(&mut tape, xv, x_rec, &self.noise_std, recon)?;
            report.l_rec = check_loss(tape.scalar(l_rec), id, round, Phase::Decoder)?;
            let scaled = tape.scale(l_rec, w.rec);
            let grads = tape.backward(scaled)?;
            self.model.decoder.accumulate(&grads, &theta)?;
            g2 += norm2(&self.model.decoder.flat_grad());
            self.model.decoder.step(lr)?;
            self.hook(TraceEvent::Step { phase: Phase::Decoder });
            x_p
        };
        {
            let mut tape = Tape::new();
            let omega = self.model.classifier.bind(&mut tape);
            let xv = tape.constant(x);
            let xpv = tape.constant(&x_p);
            let a = self.model.classifier.forward(&mut tape, &omega, xv)?;
            let b = self.model.classifier.forward(&mut tape, &omega, xpv)?;
            let ce = loss_ce_dual(&mut tape, a, b, y)?;
            report.l_ce = check_loss(tape.scalar(ce), id, round, Phase::Classifier)?;
            let scaled = tape.scale(ce, w.ce);
            let grads = tape.backward(scaled)?;
            self.model.classifier.accumulate(&grads, &omega)?;
            g2 += norm2(&self.model.classifier.flat_grad());
            self.model.classifier.step(lr)?;
            self.hook(TraceEvent::Step { phase: Phase::Classifier });
        }
        Ok((report.with_totals(), g2))
    }

    /// Class scores under the configured inference mode, `[B, K]`.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let softmax = |logits: Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let v = tape.constant(&logits);
            let s = tape.softmax(v)?;
            Ok(tape.to_tensor(s))
        };
        match self.config.inference {
            InferenceMode::Classifier => self.model.classify(x),
            InferenceMode::ClassifierReconstruction => {
                let z_p = self.model.encode_persona(x)?;
                let z_l = self.model.encode_learngene(x, 0)?.mu;
                let x_rec = self.model.decode(&z_p, &z_l)?;
                let mut a = self.model.classify(x)?;
                let b = self.model.classify(&x_rec)?;
                a.data_mut().iter_mut().zip(b.data()).for_each(|(u, v)| *u = 0.5 * (*u + v));
                Ok(a)
            }
            InferenceMode::Posterior => self.bank.posterior(&self.model.encode_persona(x)?),
            InferenceMode::ClassifierPosterior => {
                let mut a = softmax(self.model.classify(x)?)?;
                let b = self.bank.posterior(&self.model.encode_persona(x)?)?;
                a.data_mut().iter_mut().zip(b.data()).for_each(|(u, v)| *u = 0.5 * (*u + v));
                Ok(a)
            }
        }
    }

    /// Gradient of the full objective on `batch` with respect to
    /// `[ψ, φ, θ, ω]`, flattened in that order. Sampling noise is drawn
    /// from fixed seeds so repeated calls agree.
    fn full_gradient(&mut self, batch: &[usize]) -> Result<Vec<f64>> {
        let (x, y) = self.data.batch(batch);
        let w = self.config.loss_weights.clone();
        let mut reparam = seeds::stream_rng(self.config.seed, Stream::Diagnostics, self.id as u64, 0);
        let mut recon = seeds::stream_rng(self.config.seed, Stream::Diagnostics, self.id as u64, 1);
        let mut tape = Tape::new();
        let psi = self.model.persona_net.bind(&mut tape);
        let phi = self.model.learngene.bind(&mut tape);
        let theta = self.model.decoder.bind(&mut tape);
        let omega = self.model.classifier.bind(&mut tape);
        let bank = self.bank.bind_frozen(&mut tape);
        let adv = self.model.adversary.bind_frozen(&mut tape);
        let xv = tape.constant(&x);

        let z_p = self.model.persona_net.forward(&mut tape, &psi, xv)?;
        let cls = loss_cls(&mut tape, bank, self.bank.classes(), z_p, &y)?;
        let log = loss_log(&mut tape, bank, z_p, &y)?;
        let lv = self.model.learngene_vars(&mut tape, &phi, xv)?;
        let z_l = tape.gaussian_sample(lv.mu, lv.logvar, &mut reparam)?;
        let kl = loss_kl(&mut tape, lv.mu, lv.logvar)?;
        let logits = self.model.adversary.forward(&mut tape, &adv, z_l)?;
        let adv_u = loss_adv_uniform(&mut tape, logits)?;
        let (zp_d, zl_d) = (tape.detach(z_p), tape.detach(z_l));
        let z = tape.concat(&[zp_d, zl_d])?;
        let x_rec = self.model.decoder.forward(&mut tape, &theta, z)?;
        let (rec, x_p) = reconstruct_with_noise(&mut tape, xv, x_rec, &self.noise_std, &mut recon)?;
        let xpv = tape.constant(&x_p);
        let a = self.model.classifier.forward(&mut tape, &omega, xv)?;
        let b = self.model.classifier.forward(&mut tape, &omega, xpv)?;
        let ce = loss_ce_dual(&mut tape, a, b, &y)?;

        let mut terms = Vec::new();
        if !self.config.disable_pr {
            terms.push(tape.scale(cls, w.cls));
            terms.push(tape.scale(log, w.log));
        }
        if !self.config.disable_gl {
            terms.push(tape.scale(kl, w.kl));
            terms.push(tape.scale(adv_u, w.adv_u));
        }
        terms.push(tape.scale(rec, w.rec));
        terms.push(tape.scale(ce, w.ce));
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let grads = tape.backward(total)?;
        let mut out = Vec::new();
        for (net, bound) in [
            (&self.model.persona_net, &psi),
            (&self.model.learngene, &phi),
            (&self.model.decoder, &theta),
            (&self.model.classifier, &omega),
        ] {
            let mut copy = net.clone();
            copy.zero_grad();
            copy.accumulate(&grads, bound)?;
            out.extend(copy.flat_grad());
        }
        Ok(out)
    }

    fn core_nets_mut(&mut self) -> [&mut crate::networks::Mlp; 4] {
        [
            &mut self.model.persona_net,
            &mut self.model.learngene,
            &mut self.model.decoder,
            &mut self.model.classifier,
        ]
    }
}

impl Predictor for Client {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let s = self.scores(x)?;
        Ok((0..s.rows())
            .map(|r| {
                let row = s.row(r);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }
}

impl GradientOracle for Client {
    fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for net in [&self.model.persona_net, &self.model.learngene, &self.model.decoder, &self.model.classifier] {
            out.extend(net.flatten());
        }
        out
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.core_nets_mut().iter().map(|n| n.param_count()).sum();
        if flat.len() != total {
            return Err(Error::shape("set_params", &[total], &[flat.len()]));
        }
        let mut offset = 0;
        for net in self.core_nets_mut() {
            let n = net.param_count();
            net.load_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn gradient(&mut self, batch: &[usize]) -> Result<Vec<f64>> {
        self.full_gradient(batch)
    }

    fn train_indices(&self) -> Vec<usize> {
        self.train.clone()
    }
}

impl RingNode for Client {
    fn step(&mut self, round: usize, inherited: Option<&RingMessage>) -> Result<RingMessage> {
        self.hook(TraceEvent::RoundStart { round });
        let delta2 = inherited.map(|m| self.inherit(m)).transpose()?;
        let mut record = self.local_train(round)?;
        record.delta2 = delta2;
        self.last = record;
        self.hook(TraceEvent::Emit);
        Ok(self.message(round))
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub alive: bool,
    #[serde(flatten)]
    pub losses: LossReport,
    pub local_t: f64,
    pub global_t: f64,
    pub bytes_sent: u64,
    pub delta2: Option<f64>,
    pub grad_norm2: f64,
}

/// Per-round aggregates over the clients that trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_local_t: f64,
    pub mean_global_t: f64,
    pub grad_norm2: f64,
    pub grad_norm2_running: f64,
    pub delta2_max: Option<f64>,
    pub bytes: u64,
    /// Mean total loss over trained clients: first and last local epoch.
    pub loss_start: f64,
    pub loss_end: f64,
    pub grad_norm2_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: TrainConfig,
    pub rounds: Vec<RoundSummary>,
    pub final_accuracy: AccuracyReport,
    pub ledger: CommLedger,
    pub events: Vec<RingEvent>,
    pub message_bytes: usize,
    pub learngene_params: usize,
}

pub struct RunResult {
    pub clients: Vec<Client>,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    /// Last message put on the wire: the run's learngene and statistics.
    pub final_message: RingMessage,
}

impl RunResult {
    pub fn final_learngene(&self) -> &[f64] {
        &self.final_message.learngene
    }

    pub fn final_stats(&self) -> &ClassStats {
        &self.final_message.stats
    }

    /// Mean Local-T / Global-T at the end over clients alive at the end.
    pub fn final_alive_means(&self) -> (f64, f64) {
        let last = self.summary.config.rounds - 1;
        let rows: Vec<&RoundRecord> = self.records.iter().filter(|r| r.round == last && r.alive).collect();
        (
            mean(&rows.iter().map(|r| r.local_t).collect::<Vec<_>>()),
            mean(&rows.iter().map(|r| r.global_t).collect::<Vec<_>>()),
        )
    }
}

/// Where run artifacts go.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    pub trace_messages: bool,
}

impl Outputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn plot(&self) -> PathBuf {
        self.dir.join("plot.csv")
    }

    pub fn models(&self) -> PathBuf {
        self.dir.join("models")
    }

    pub fn final_message(&self) -> PathBuf {
        self.dir.join("final_message.drrm")
    }
}

struct MetricsSink {
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsSink {
    fn open(outputs: Option<&Outputs>) -> Result<Self> {
        let file = match outputs {
            Some(o) => {
                fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
                let p = o.metrics();
                let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
                Some((p, BufWriter::new(f)))
            }
            None => None,
        };
        Ok(MetricsSink { file })
    }

    fn write(&mut self, rec: &RoundRecord) -> Result<()> {
        if let Some((p, w)) = &mut self.file {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((p, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Run `config.rounds` rounds of ring training.
pub fn run_experiment(
    config: &TrainConfig,
    data: Arc<Dataset>,
    plan: &PartitionPlan,
    outputs: Option<&Outputs>,
) -> Result<RunResult> {
    config.validate()?;
    if plan.clients() != config.clients {
        return Err(Error::Config(format!(
            "plan has {} clients, config asks for {}",
            plan.clients(),
            config.clients
        )));
    }
    plan.validate(&data)?;
    let cfg = Arc::new(config.clone());
    let mut clients: Vec<Client> = (0..config.clients)
        .map(|m| Client::fresh(m, Arc::clone(&data), plan.client_train[m].clone(), Arc::clone(&cfg)))
        .collect::<Result<_>>()?;

    let ring_cfg = RingConfig {
        mode: config.mode,
        precision: config.precision,
        communicate: config.communicate,
        faults: config.faults.clone(),
        trace_dir: outputs.filter(|o| o.trace_messages).map(|o| o.dir.join("trace")),
    };
    let mut ring = Ring::new(RingTopology::identity(config.clients)?, ring_cfg)?;
    let mut sink = MetricsSink::open(outputs)?;
    let mut records = Vec::new();
    let mut rounds = Vec::new();
    let mut running = 0.0;
    let mut last_report: Option<RoundReport> = None;

    for t in 0..config.rounds {
        let report = match ring.run_round(t, &mut clients) {
            Ok(r) => r,
            Err(e) => {
                sink.flush()?;
                if let (Some(o), Error::Diverged { client, .. }) = (outputs, &e) {
                    let c = &clients[*client];
                    let dump = serde_json::json!({
                        "error": e.to_string(),
                        "client": client,
                        "last_round": c.last_round(),
                        "model": c.model,
                        "bank": c.bank,
                    });
                    write_json(&o.dir.join("diverged.json"), &dump)?;
                }
                return Err(e);
            }
        };
        let acc = evaluate(&clients, &data, plan)?;
        let trained: Vec<usize> = report.visits.iter().map(|v| v.client).collect();
        let mut grad = Vec::new();
        let mut deltas = Vec::new();
        let (mut l_start, mut l_end, mut g_sum) = (Vec::new(), Vec::new(), Vec::new());
        for m in 0..config.clients {
            let visit = report.visits.iter().find(|v| v.client == m);
            let alive = visit.is_some();
            let cr = clients[m].last_round();
            let losses = if alive { cr.epochs.last().cloned().unwrap_or_default() } else { LossReport::default() };
            if alive {
                grad.push(cr.grad_norm2);
                g_sum.push(cr.grad_norm2_sum);
                if let (Some(a), Some(b)) = (cr.epochs.first(), cr.epochs.last()) {
                    l_start.push(a.total());
                    l_end.push(b.total());
                }
                if let Some(d) = cr.delta2 {
                    deltas.push(d);
                }
            }
            let rec = RoundRecord {
                round: t,
                client: m,
                alive,
                losses,
                local_t: acc.local_t[m],
                global_t: acc.global_t[m],
                bytes_sent: visit.map_or(0, |v| v.bytes_sent as u64),
                delta2: if alive { cr.delta2 } else { None },
                grad_norm2: if alive { cr.grad_norm2 } else { 0.0 },
            };
            sink.write(&rec)?;
            records.push(rec);
        }
        let g = mean(&grad);
        running += (g - running) / (t + 1) as f64;
        let alive_mean = |v: &[f64]| mean(&trained.iter().map(|&m| v[m]).collect::<Vec<_>>());
        rounds.push(RoundSummary {
            round: t,
            mean_local_t: alive_mean(&acc.local_t),
            mean_global_t: alive_mean(&acc.global_t),
            grad_norm2: g,
            grad_norm2_running: running,
            delta2_max: deltas.iter().copied().reduce(f64::max),
            bytes: report.bytes,
            loss_start: mean(&l_start),
            loss_end: mean(&l_end),
            grad_norm2_sum: mean(&g_sum),
        });
        last_report = Some(report);
    }
    sink.flush()?;

    let last = last_report.expect("at least one round");
    let tail = last.visits.last().expect("at least one client trained").client;
    let final_message = clients[tail].message(config.rounds - 1);
    let final_accuracy = evaluate(&clients, &data, plan)?;
    let summary = Summary {
        config: config.clone(),
        rounds,
        final_accuracy,
        ledger: ring.ledger().clone(),
        events: ring.events().to_vec(),
        message_bytes: final_message.encoded_len(config.precision),
        learngene_params: final_message.learngene.len(),
    };
    if let Some(o) = outputs {
        write_json(&o.summary(), &summary)?;
        write_plot_csv(&o.plot(), &summary.rounds)?;
        let models = o.models();
        fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
        for c in &clients {
            let v = serde_json::json!({ "model": c.model, "bank": c.bank });
            write_json(&models.join(format!("client_{:03}.json", c.id)), &v)?;
        }
        let bytes = final_message.encode(Precision::F64)?;
        fs::write(o.final_message(), bytes).map_err(|e| Error::io(o.final_message(), e))?;
    }
    Ok(RunResult {
        clients,
        records,
        summary,
        final_message,
    })
}

fn write_plot_csv(path: &Path, rounds: &[RoundSummary]) -> Result<()> {
    let mut s = String::from("round,mean_local_t,mean_global_t,grad_norm2_running,delta2_max\n");
    for r in rounds {
        let d = r.delta2_max.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.round, r.mean_local_t, r.mean_global_t, r.grad_norm2_running, d
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// A client that joins after training: learngene `φ̃`, bank seeded from
/// the final statistics, everything else freshly initialized.
pub fn init_new_client(
    config: &TrainConfig,
    client_id: usize,
    learngene: &[f64],
    stats: &ClassStats,
    data: Arc<Dataset>,
    train: Vec<usize>,
) -> Result<Client> {
    let cfg = Arc::new(config.clone());
    let mut model = ClientModel::init(&cfg.client_spec(), client_id, cfg.learngene_seed())?;
    model.learngene.load_flat(learngene)?;
    if stats.classes != model.classes() || stats.dim != model.persona_dim() {
        return Err(Error::shape(
            "init_new_client",
            &[model.classes(), model.persona_dim()],
            &[stats.classes, stats.dim],
        ));
    }
    let bank = ClassGaussianBank::from_stats(stats, cfg.ema_alpha)?;
    Client::new(client_id, model, bank, data, train, cfg)
}

/// Local Local-T curve for a lone client: accuracy on `test` after each of
/// `epochs` single-epoch rounds (index 0 is before training).
pub fn local_curve(client: &mut Client, test: &[usize], epochs: usize) -> Result<Vec<f64>> {
    let plan = PartitionPlan {
        scheme: crate::partition::Scheme::Shard { s: client.model.classes() },
        seed: 0,
        client_train: vec![client.train.clone()],
        client_test: vec![test.to_vec()],
    };
    let mut cfg = client.config.as_ref().clone();
    cfg.local_epochs = 1;
    client.config = Arc::new(cfg);
    let ds = Arc::clone(&client.data);
    let mut curve = vec![evaluate(std::slice::from_ref(&*client), &ds, &plan)?.local_t[0]];
    for e in 0..epochs {
        client.local_train(e)?;
        curve.push(evaluate(std::slice::from_ref(&*client), &ds, &plan)?.local_t[0]);
    }
    Ok(curve)
}
