//! Losses, the learning-rate schedule and the minibatch SGD loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{forward, forward_encoded, init_params, ForwardOutput, HomogeneousMode, ModelConfig, SceneInput};
use crate::math::{finite_difference_check_with, GradCheckOptions, GradCheckReport, NodeId, ParamStore, Tape, Tensor};
use crate::spatial::{encode_spatial_batch, SpatialMap};

/// A scene with its ground-truth interactions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScene {
    pub id: String,
    pub input: SceneInput,
    /// One multi-hot row of length `A` per pair, pair `(i, j)` at `i * M + j`.
    pub labels: Vec<Vec<bool>>,
}

impl LabeledScene {
    pub fn validate(&self, a: usize) -> Result<()> {
        if self.labels.len() != self.input.pairs() {
            return Err(Error::invalid(
                "labels",
                format!("scene {} has {} label rows for {} pairs", self.id, self.labels.len(), self.input.pairs()),
            ));
        }
        if let Some(p) = self.labels.iter().position(|row| row.len() != a) {
            return Err(Error::invalid(
                "labels",
                format!("scene {} pair {p} has {} classes, expected {a}", self.id, self.labels[p].len()),
            ));
        }
        Ok(())
    }

    /// `[N * M * A]` targets for the interaction loss.
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().flatten().map(|&l| f64::from(u8::from(l))).collect()
    }

    /// Interactiveness indicator per pair: 1 iff any class is active.
    pub fn interactiveness(&self) -> Vec<f64> {
        self.labels.iter().map(|row| f64::from(u8::from(row.iter().any(|&l| l)))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda: 6.0,
            lr0: 0.001,
            decay: 0.6,
            decay_every: 10,
            batch_size: 4,
            epochs: 40,
            seed: 0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} out of range: {v}")));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", self.lr0);
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay", self.decay);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 * decay^floor(epoch / decay_every)`.
pub fn learning_rate(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Mean clamped binary cross-entropy of the weights against 0/1 labels;
/// 0 for an empty grid.
pub fn interactiveness_loss(tape: &mut Tape, w: NodeId, labels: &[f64]) -> Result<NodeId> {
    tape.bce(w, Tensor::vector(labels.to_vec()))
}

/// Mean clamped binary cross-entropy over all `N * M * A` entries.
pub fn interaction_loss(tape: &mut Tape, y: NodeId, labels: &[f64]) -> Result<NodeId> {
    let shape = tape.shape(y).to_vec();
    tape.bce(y, Tensor::new(shape, labels.to_vec())?)
}

/// `lambda * l_ho + l_w`.
pub fn total_loss(tape: &mut Tape, l_ho: NodeId, l_w: NodeId, lambda: f64) -> Result<NodeId> {
    let weighted = tape.scale(l_ho, lambda)?;
    tape.add(weighted, l_w)
}

/// Training objective of one scene. The interactiveness term is present
/// only in variants that compute weights.
pub fn scene_loss(tape: &mut Tape, out: &ForwardOutput, scene: &LabeledScene, lambda: f64) -> Result<NodeId> {
    let l_ho = interaction_loss(tape, out.y, &scene.targets())?;
    let l_w = match out.w {
        Some(w) => interactiveness_loss(tape, w, &scene.interactiveness())?,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    total_loss(tape, l_ho, l_w, lambda)
}

/// Central finite differences of the full training loss of one scene
/// against the tape gradients.
pub fn gradient_check(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    scene: &LabeledScene,
    lambda: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    scene.validate(cfg.a)?;
    finite_difference_check_with(params, opts, |p, tape| {
        let out = forward(tape, p, cfg, &scene.input)?;
        scene_loss(tape, &out, scene, lambda)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochStats>,
    /// Position of the shuffling generator after the last epoch.
    pub rng_word_pos: u128,
}

/// Spatial maps of each scene, computed once.
fn prepare(dataset: &[LabeledScene], cfg: &TrainConfig) -> Result<Vec<Vec<SpatialMap>>> {
    let homogeneous = cfg.model.flags.homogeneous != HomogeneousMode::Off;
    dataset
        .iter()
        .map(|s| {
            s.validate(cfg.model.a)?;
            s.input.validate(cfg.model.f)?;
            s.input.spatial_maps(homogeneous)
        })
        .collect::<Result<_>>()
}

/// Generator used for shuffling; separate stream from initialization.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Mean loss of a minibatch, with gradients accumulated into `params`.
pub fn batch_step(
    params: &mut ParamStore,
    cfg: &TrainConfig,
    scenes: &[&LabeledScene],
    maps: &[&[SpatialMap]],
) -> Result<f64> {
    params.zero_grad();
    let mut tape = Tape::new();
    let all: Vec<&SpatialMap> = maps.iter().flat_map(|m| m.iter()).collect();
    let spatial = encode_spatial_batch(&mut tape, params, &cfg.model.spatial, &all)?;
    let mut offset = 0;
    let mut total = None;
    for (scene, m) in scenes.iter().zip(maps) {
        let rows: Vec<usize> = (offset..offset + m.len()).collect();
        offset += m.len();
        let wrap = |e: Error| Error::Scene { scene: scene.id.clone(), source: Box::new(e) };
        let s = tape.gather(spatial, &rows).map_err(wrap)?;
        let out = forward_encoded(&mut tape, params, &cfg.model, &scene.input, s).map_err(wrap)?;
        let loss = scene_loss(&mut tape, &out, scene, cfg.lambda).map_err(wrap)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let Some(total) = total else { return Ok(0.0) };
    let mean = tape.scale(total, 1.0 / scenes.len() as f64)?;
    let value = tape.item(mean)?;
    if !value.is_finite() {
        let ids: Vec<_> = scenes.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::Scene { scene: ids.join(","), source: Box::new(Error::NonFinite { op: "loss" }) });
    }
    tape.backward(mean, params)?;
    Ok(value)
}

/// Heavy-ball SGD: `v = momentum * v + g`, `theta -= lr * v`.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Sgd { velocity: params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(), momentum }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.data().to_vec();
            for ((theta, vk), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vk = self.momentum * *vk + g;
                *theta -= lr * *vk;
            }
        }
    }
}

/// Trains from fresh parameters.
pub fn train(dataset: &[LabeledScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_, _, _| Ok(()))
}

/// Trains from fresh parameters, calling `on_epoch` after every epoch with
/// the stats, the parameters and the shuffling generator's word position.
pub fn train_with<F>(dataset: &[LabeledScene], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats, &ParamStore, u128) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("train", "empty dataset"));
    }
    let maps = prepare(dataset, cfg)?;
    let mut params = init_params(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut sgd = Sgd::new(&params, cfg.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<&LabeledScene> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batch_maps: Vec<&[SpatialMap]> = chunk.iter().map(|&i| maps[i].as_slice()).collect();
            sum += batch_step(&mut params, cfg, &scenes, &batch_maps)?;
            sgd.step(&mut params, lr);
            batches += 1;
        }
        let stats = EpochStats { epoch, lr, loss: sum / batches as f64 };
        log::info!("epoch {epoch}: lr {lr:.6} loss {:.6}", stats.loss);
        on_epoch(&stats, &params, rng.get_word_pos())?;
        history.push(stats);
    }
    Ok(TrainOutcome { params, history, rng_word_pos: rng.get_word_pos() })
}
