//! Latent state/action/disturbance representation.
//!
//! Three independent autoencoders compress states, actions and disturbances;
//! a latent dynamics network maps `(s̃ₜ, ãₜ, δ̃ₜ)` to `s̃ₜ₊₁`. All five
//! components are trained jointly on a weighted sum of one-step prediction
//! error and reconstruction error, computed in min-max normalized space.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp, Weights};
use crate::tensor::Tensor;
use crate::thermal::{Trajectory, Transitions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    State,
    Action,
    Disturbance,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::State, Group::Action, Group::Disturbance];

    pub fn name(self) -> &'static str {
        match self {
            Group::State => "state",
            Group::Action => "action",
            Group::Disturbance => "disturbance",
        }
    }
}

/// Per-feature min-max scaling onto `[0, 1]`. Constant features get unit span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub span: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &Tensor) -> Self {
        let cols = data.cols();
        let mut lo = vec![f64::INFINITY; cols];
        let mut hi = vec![f64::NEG_INFINITY; cols];
        for r in 0..data.rows() {
            for (c, &v) in data.row_slice(r).iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let span = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h - l > 1e-12 { h - l } else { 1.0 })
            .collect();
        Self { min: lo, span }
    }

    /// Scaling that leaves values unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![0.0; dim],
            span: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_slice_mut(r).iter_mut().zip(&self.min).zip(&self.span) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_slice_mut(r).iter_mut().zip(&self.min).zip(&self.span) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    /// Appends `x·diag(span) + min` to a graph.
    pub fn build_denormalize(&self, graph: &mut Graph, x: NodeId) -> NodeId {
        let scale = graph.constant(Tensor::diag(&self.span));
        let offset = graph.constant(Tensor::row(self.min.clone()));
        let scaled = graph.matmul(x, scale);
        graph.add(scaled, offset)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape("normalizer", self.dim(), x.cols()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    /// Encoder `input → hidden… → latent`, decoder mirrored.
    pub fn new(input: usize, hidden: &[usize], latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(latent);
        let encoder = Mlp::new(&widths, rng);
        widths.reverse();
        let decoder = Mlp::new(&widths, rng);
        Self { encoder, decoder }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub state: usize,
    pub action: usize,
    pub disturbance: usize,
}

impl LatentDims {
    pub fn total(&self) -> usize {
        self.state + self.action + self.disturbance
    }
}

/// Hidden-layer widths of every network. Decoders mirror their encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub state_hidden: Vec<usize>,
    pub action_hidden: Vec<usize>,
    pub disturbance_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            state_hidden: vec![64, 32, 16],
            action_hidden: vec![64, 32, 16],
            disturbance_hidden: vec![128, 64, 32],
            dynamics_hidden: vec![32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the prediction term; the reconstruction term gets `1 − ω`.
    pub omega: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dims: LatentDims,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 64,
            seed: 3,
            dims: LatentDims {
                state: 2,
                action: 3,
                disturbance: 4,
            },
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    /// The 90-zone configuration: latent dims 3/4/6 and 2000 epochs.
    pub fn ninety_zone() -> Self {
        Self {
            epochs: 2000,
            dims: LatentDims {
                state: 3,
                action: 4,
                disturbance: 6,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::Config(format!("omega must lie in (0, 1), got {}", self.omega)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.dims.state == 0 || self.dims.action == 0 || self.dims.disturbance == 0 {
            return Err(Error::Config("latent dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Encoders, decoders, latent dynamics and their normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModelSet {
    pub state: Autoencoder,
    pub action: Autoencoder,
    pub disturbance: Autoencoder,
    pub dynamics: Mlp,
    pub normalizers: Option<[Normalizer; 3]>,
}

/// Loss terms of one multi-task evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub prediction: f64,
    pub reconstruction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Entry 0 is the per-sample loss before training; entry `e` the mean
    /// per-sample mini-batch loss of epoch `e`.
    pub loss_history: Vec<f64>,
    pub samples: usize,
    pub parameters: usize,
}

impl LatentModelSet {
    pub fn new(zones: usize, conditioned: usize, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let arch = &cfg.architecture;
        let d = cfg.dims;
        let state = Autoencoder::new(zones, &arch.state_hidden, d.state, &mut rng);
        let action = Autoencoder::new(conditioned, &arch.action_hidden, d.action, &mut rng);
        let disturbance =
            Autoencoder::new(1 + 2 * zones, &arch.disturbance_hidden, d.disturbance, &mut rng);
        let mut widths = vec![d.total()];
        widths.extend_from_slice(&arch.dynamics_hidden);
        widths.push(d.state);
        let dynamics = Mlp::new(&widths, &mut rng);
        Self {
            state,
            action,
            disturbance,
            dynamics,
            normalizers: None,
        }
    }

    pub fn dims(&self) -> LatentDims {
        LatentDims {
            state: self.state.latent_dim(),
            action: self.action.latent_dim(),
            disturbance: self.disturbance.latent_dim(),
        }
    }

    pub fn original_dims(&self) -> (usize, usize, usize) {
        (
            self.state.encoder.input_dim(),
            self.action.encoder.input_dim(),
            self.disturbance.encoder.input_dim(),
        )
    }

    /// `(n_s + n_a + n_δ) / (Z + A + D)`.
    pub fn reduction_ratio(&self) -> f64 {
        let (z, a, d) = self.original_dims();
        self.dims().total() as f64 / (z + a + d) as f64
    }

    pub fn autoencoder(&self, group: Group) -> &Autoencoder {
        match group {
            Group::State => &self.state,
            Group::Action => &self.action,
            Group::Disturbance => &self.disturbance,
        }
    }

    pub fn normalizer(&self, group: Group) -> Result<&Normalizer> {
        let norms = self
            .normalizers
            .as_ref()
            .ok_or_else(|| Error::NotFitted("normalization statistics".into()))?;
        Ok(&norms[group as usize])
    }

    pub fn fit_normalizers(&mut self, data: &Transitions) {
        let states = Tensor::concat_rows(&[&data.states, &data.next_states]).expect("same width");
        self.normalizers = Some([
            Normalizer::fit(&states),
            Normalizer::fit(&data.actions),
            Normalizer::fit(&data.disturbances),
        ]);
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().map(|m| m.param_count()).sum()
    }

    fn networks(&self) -> [&Mlp; 7] {
        [
            &self.state.encoder,
            &self.state.decoder,
            &self.action.encoder,
            &self.action.decoder,
            &self.disturbance.encoder,
            &self.disturbance.decoder,
            &self.dynamics,
        ]
    }

    fn networks_mut(&mut self) -> [&mut Mlp; 7] {
        [
            &mut self.state.encoder,
            &mut self.state.decoder,
            &mut self.action.encoder,
            &mut self.action.decoder,
            &mut self.disturbance.encoder,
            &mut self.disturbance.decoder,
            &mut self.dynamics,
        ]
    }

    /// Every trainable tensor, in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.networks().into_iter().flat_map(Mlp::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.networks_mut()
            .into_iter()
            .flat_map(Mlp::params_mut)
            .collect()
    }

    /// `E_group(normalize(x))` for each row of `x`.
    pub fn encode(&self, group: Group, x: &Tensor) -> Result<Tensor> {
        let xn = self.normalizer(group)?.normalize(x)?;
        self.autoencoder(group).encoder.forward(&xn)
    }

    /// `denormalize(D_group(z))` for each row of `z`.
    pub fn decode(&self, group: Group, z: &Tensor) -> Result<Tensor> {
        let norm = self.normalizer(group)?;
        let ae = self.autoencoder(group);
        if z.cols() != ae.latent_dim() {
            return Err(Error::shape(format!("decode {}", group.name()), ae.latent_dim(), z.cols()));
        }
        norm.denormalize(&ae.decoder.forward(z)?)
    }

    /// One latent transition per row.
    pub fn latent_step(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor> {
        let dims = self.dims();
        if s.cols() != dims.state || a.cols() != dims.action || d.cols() != dims.disturbance {
            return Err(Error::shape(
                "latent_step",
                format!("{}/{}/{}", dims.state, dims.action, dims.disturbance),
                format!("{}/{}/{}", s.cols(), a.cols(), d.cols()),
            ));
        }
        self.dynamics.forward(&Tensor::concat_cols(&[s, a, d])?)
    }

    /// Latent states `s̃₁..s̃_T` from `s̃₀` under per-row latent actions and
    /// disturbances.
    pub fn latent_rollout(&self, s0: &Tensor, actions: &Tensor, disturbances: &Tensor) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(actions.rows());
        let mut s = s0.clone();
        for t in 0..actions.rows() {
            s = self.latent_step(
                &s,
                &actions.slice_rows(t, 1)?,
                &disturbances.slice_rows(t, 1)?,
            )?;
            rows.push(s.clone());
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat_rows(&refs)
    }

    /// Original-space one-step prediction `D_s(F̃(E_s(s), E_a(a), E_δ(δ)))`.
    pub fn predict(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor> {
        let next = self.latent_step(
            &self.encode(Group::State, s)?,
            &self.encode(Group::Action, a)?,
            &self.encode(Group::Disturbance, d)?,
        )?;
        self.decode(Group::State, &next)
    }

    /// Loss terms and gradients (in [`LatentModelSet::params`] order) over a
    /// batch of transitions.
    pub fn multi_task_loss(&self, batch: &Transitions, omega: f64) -> Result<(LossTerms, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let norms = self
            .normalizers
            .as_ref()
            .ok_or_else(|| Error::NotFitted("normalization statistics".into()))?;
        let s = norms[0].normalize(&batch.states)?;
        let a = norms[1].normalize(&batch.actions)?;
        let d = norms[2].normalize(&batch.disturbances)?;
        let y = norms[0].normalize(&batch.next_states)?;

        let mut g = Graph::new();
        let mut params = Vec::new();
        let mut net = |g: &mut Graph, mlp: &Mlp, x: NodeId, name: &str| {
            let (out, p) = mlp.build(g, x, name, Weights::Trainable);
            params.push(p);
            out
        };
        let sn = g.constant(s);
        let an = g.constant(a);
        let dn = g.constant(d);
        let yn = g.constant(y);
        // Same order as `networks()`.
        let ls = net(&mut g, &self.state.encoder, sn, "es");
        let rs = net(&mut g, &self.state.decoder, ls, "ds");
        let la = net(&mut g, &self.action.encoder, an, "ea");
        let ra = net(&mut g, &self.action.decoder, la, "da");
        let ld = net(&mut g, &self.disturbance.encoder, dn, "ed");
        let rd = net(&mut g, &self.disturbance.decoder, ld, "dd");
        let latent = g.concat(&[ls, la, ld], Axis::Cols);
        let next = net(&mut g, &self.dynamics, latent, "f");
        // The prediction path reuses the state decoder's weights.
        let pred = self.state.decoder.apply(&mut g, next, &params[1]);

        let sq_err = |g: &mut Graph, a: NodeId, b: NodeId| {
            let diff = g.sub(a, b);
            let sq = g.square(diff);
            g.sum(sq)
        };
        let lm = sq_err(&mut g, pred, yn);
        let lvs = sq_err(&mut g, rs, sn);
        let lva = sq_err(&mut g, ra, an);
        let lvd = sq_err(&mut g, rd, dn);
        let lv_parts = g.concat(&[lvs, lva, lvd], Axis::Cols);
        let lv = g.sum(lv_parts);
        let wm = g.scale(lm, omega);
        let wv = g.scale(lv, 1.0 - omega);
        let total = g.add(wm, wv);

        g.evaluate()?;
        let value = |id: NodeId| g.value(id).expect("evaluated").get(0, 0);
        let terms = LossTerms {
            total: value(total),
            prediction: value(lm),
            reconstruction: value(lv),
        };
        let mut grads = g.backward(total)?;
        let flat: Vec<Tensor> = params
            .into_iter()
            .flatten()
            .map(|id| grads.take(id).expect("every parameter reaches the loss"))
            .collect();
        Ok((terms, flat))
    }

    /// Prediction and reconstruction terms evaluated with plain forward passes.
    pub fn loss_terms(&self, batch: &Transitions) -> Result<(f64, f64)> {
        let norms = self
            .normalizers
            .as_ref()
            .ok_or_else(|| Error::NotFitted("normalization statistics".into()))?;
        let s = norms[0].normalize(&batch.states)?;
        let a = norms[1].normalize(&batch.actions)?;
        let d = norms[2].normalize(&batch.disturbances)?;
        let y = norms[0].normalize(&batch.next_states)?;
        let ls = self.state.encoder.forward(&s)?;
        let la = self.action.encoder.forward(&a)?;
        let ld = self.disturbance.encoder.forward(&d)?;
        let pred = self
            .state
            .decoder
            .forward(&self.dynamics.forward(&Tensor::concat_cols(&[&ls, &la, &ld])?)?)?;
        let lm = pred.sub(&y)?.norm_sq();
        let lv = self.state.decoder.forward(&ls)?.sub(&s)?.norm_sq()
            + self.action.decoder.forward(&la)?.sub(&a)?.norm_sq()
            + self.disturbance.decoder.forward(&ld)?.sub(&d)?.norm_sq();
        Ok((lm, lv))
    }

    /// Mini-batch adaptive-moment training on the transitions of `data`.
    /// Fits normalization statistics first.
    pub fn train(&mut self, data: &Trajectory, cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        let transitions = data.transitions()?;
        self.fit_normalizers(&transitions);
        let n = transitions.len();

        let (lm0, lv0) = self.loss_terms(&transitions)?;
        let mut history = vec![(cfg.omega * lm0 + (1.0 - cfg.omega) * lv0) / n as f64];

        let shapes: Vec<(usize, usize)> = self.params().iter().map(|p| p.shape()).collect();
        let mut adam = Adam::new(cfg.learning_rate, shapes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
        let mut order: Vec<usize> = (0..n).collect();

        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch = gather(&transitions, chunk)?;
                let (terms, grads) = self.multi_task_loss(&batch, cfg.omega)?;
                if !terms.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        loss: terms.total,
                    });
                }
                epoch_loss += terms.total;
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                adam.step(&mut self.params_mut(), &grad_refs);
            }
            let mean = epoch_loss / n as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged { epoch, loss: mean });
            }
            history.push(mean);
        }
        Ok(TrainReport {
            loss_history: history,
            samples: n,
            parameters: self.parameter_count(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn gather(t: &Transitions, idx: &[usize]) -> Result<Transitions> {
    let pick = |m: &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * m.cols());
        for &i in idx {
            data.extend_from_slice(m.row_slice(i));
        }
        Tensor::new(idx.len(), m.cols(), data)
    };
    Ok(Transitions {
        states: pick(&t.states)?,
        actions: pick(&t.actions)?,
        disturbances: pick(&t.disturbances)?,
        next_states: pick(&t.next_states)?,
    })
}

/// Anything that maps a batch of `(sₜ, aₜ₊₁, δₜ₊₁)` rows to predicted `sₜ₊₁` rows.
pub trait OneStepPredictor {
    fn predict_batch(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor>;
}

impl OneStepPredictor for LatentModelSet {
    fn predict_batch(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor> {
        self.predict(s, a, d)
    }
}

impl<F> OneStepPredictor for F
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    fn predict_batch(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor> {
        self(s, a, d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One-step accuracy per zone and aggregated across zones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    /// `None` where the zone's target has zero variance.
    pub r2: Vec<Option<f64>>,
    pub rmse_summary: MeanStd,
    pub mae_summary: MeanStd,
    pub r2_summary: MeanStd,
}

pub fn evaluate_model(predictor: &impl OneStepPredictor, data: &Trajectory) -> Result<ModelMetrics> {
    let tr = data.transitions()?;
    let pred = predictor.predict_batch(&tr.states, &tr.actions, &tr.disturbances)?;
    if pred.shape() != tr.next_states.shape() {
        return Err(Error::shape(
            "evaluate_model",
            format!("{:?}", tr.next_states.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = tr.len() as f64;
    let zones = tr.next_states.cols();
    let (mut rmse, mut mae, mut r2) = (Vec::new(), Vec::new(), Vec::new());
    for z in 0..zones {
        let y = tr.next_states.column(z);
        let p = pred.column(z);
        let sse: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        let sae: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        let mean = y.iter().sum::<f64>() / n;
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        rmse.push((sse / n).sqrt());
        mae.push(sae / n);
        r2.push((sst > 0.0).then(|| 1.0 - sse / sst));
    }
    let defined: Vec<f64> = r2.iter().flatten().copied().collect();
    Ok(ModelMetrics {
        rmse_summary: MeanStd::of(&rmse),
        mae_summary: MeanStd::of(&mae),
        r2_summary: MeanStd::of(&defined),
        rmse,
        mae,
        r2,
    })
}
