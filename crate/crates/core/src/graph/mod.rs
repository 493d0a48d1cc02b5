//! The heterogeneous scene graph and its reasoning pass.
//!
//! Node embeddings live on the tape as matrices: subjects `[N, D]`, objects
//! `[M, D]`, and pair features `[N * M, D]` with pair `(i, j)` at row
//! `i * M + j`. Every reasoning step is a tape operation, so the whole pass
//! is differentiable.

mod config;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{Flags, HomogeneousMode, ModelConfig};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::math::{Activation, NodeId, ParamStore, Reduction, Tape, Tensor};
use crate::spatial::{build_spatial_map, encode_spatial_batch, SpatialMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Subject,
    Object,
}

/// One detected entity: box, detector confidence and raw appearance features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub features: Vec<f64>,
}

/// Detector output for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneInput {
    pub subjects: Vec<Instance>,
    pub objects: Vec<Instance>,
}

impl SceneInput {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn m(&self) -> usize {
        self.objects.len()
    }

    pub fn pairs(&self) -> usize {
        self.n() * self.m()
    }

    pub fn validate(&self, f: usize) -> Result<()> {
        for (kind, list) in [("subjects", &self.subjects), ("objects", &self.objects)] {
            for (i, inst) in list.iter().enumerate() {
                inst.bbox
                    .validate()
                    .map_err(|e| Error::invalid("instance", format!("{kind}[{i}].box: {e}")))?;
                if !(0.0..=1.0).contains(&inst.confidence) {
                    return Err(Error::invalid(
                        "instance",
                        format!("{kind}[{i}].confidence {} outside [0, 1]", inst.confidence),
                    ));
                }
                if inst.features.len() != f {
                    return Err(Error::shape(
                        "init_graph",
                        format!("{kind}[{i}] has {} features, projection expects {f}", inst.features.len()),
                    ));
                }
                if inst.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("instance", format!("{kind}[{i}].features contain non-finite values")));
                }
            }
        }
        Ok(())
    }

    fn all_boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.subjects.iter().chain(&self.objects).map(|i| &i.bbox)
    }

    /// Spatial maps in the order the encoder output is consumed: subject-object
    /// pairs row-major, or every ordered node pair when `homogeneous`.
    pub fn spatial_maps(&self, homogeneous: bool) -> Result<Vec<SpatialMap>> {
        if homogeneous {
            let boxes: Vec<_> = self.all_boxes().collect();
            let layout = HomoLayout::new(self.n(), self.m());
            layout.recv.iter().zip(&layout.send).map(|(&v, &u)| build_spatial_map(boxes[v], boxes[u])).collect()
        } else {
            let mut maps = Vec::with_capacity(self.pairs());
            for s in &self.subjects {
                for o in &self.objects {
                    maps.push(build_spatial_map(&s.bbox, &o.bbox)?);
                }
            }
            Ok(maps)
        }
    }
}

/// Index bookkeeping for subject-object pairs.
#[derive(Clone, Debug)]
struct PairLayout {
    sub_idx: Vec<usize>,
    obj_idx: Vec<usize>,
    by_subject: Vec<Vec<usize>>,
    by_object: Vec<Vec<usize>>,
}

impl PairLayout {
    fn new(n: usize, m: usize) -> Self {
        let sub_idx = (0..n * m).map(|k| k / m.max(1)).collect();
        let obj_idx = (0..n * m).map(|k| k % m.max(1)).collect();
        let by_subject = (0..n).map(|i| (0..m).map(|j| i * m + j).collect()).collect();
        let by_object = (0..m).map(|j| (0..n).map(|i| i * m + j).collect()).collect();
        PairLayout { sub_idx, obj_idx, by_subject, by_object }
    }
}

/// Ordered pairs `(v, u)`, `v != u`, over all `N + M` nodes (subjects first).
#[derive(Clone, Debug)]
struct HomoLayout {
    recv: Vec<usize>,
    send: Vec<usize>,
    by_receiver: Vec<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
    /// Row of subject-object pair `(i, j)` in the ordered-pair table.
    het_rows: Vec<usize>,
}

impl HomoLayout {
    fn new(n: usize, m: usize) -> Self {
        let k = n + m;
        let (mut recv, mut send) = (Vec::new(), Vec::new());
        let mut by_receiver = vec![Vec::new(); k];
        for v in 0..k {
            for u in (0..k).filter(|&u| u != v) {
                by_receiver[v].push(recv.len());
                recv.push(v);
                send.push(u);
            }
        }
        // Row of (v, u) is v * (k - 1) + (u if u < v else u - 1).
        let het_rows = (0..n * m)
            .map(|p| {
                let (i, u) = (p / m, n + p % m);
                i * (k - 1) + u - 1
            })
            .collect();
        let neighbors = (0..k).map(|v| (0..k).filter(|&u| u != v).collect()).collect();
        HomoLayout { recv, send, by_receiver, neighbors, het_rows }
    }
}

fn others(count: usize) -> Vec<Vec<usize>> {
    (0..count).map(|v| (0..count).filter(|&u| u != v).collect()).collect()
}

/// Expected `(name, shape)` of every parameter the configuration uses.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, a) = (cfg.d, cfg.f, cfg.a);
    let mut shapes = Vec::new();
    let mut linear = |name: &str, out: usize, input: usize| {
        shapes.push((format!("{name}.w"), vec![out, input]));
        shapes.push((format!("{name}.b"), vec![out]));
    };
    linear("proj.subject", d, f);
    linear("proj.object", d, f);
    let flags = &cfg.flags;
    match flags.homogeneous {
        HomogeneousMode::Off => {
            if flags.use_intra {
                if flags.use_intra_attention {
                    linear("ctx.subject", d, d);
                    linear("ctx.object", d, d);
                }
                linear("intra.subject", d, d);
                linear("intra.object", d, d);
            }
            if flags.use_inter {
                if flags.use_interactiveness_weight {
                    linear("inter.weight", 1, d);
                }
                linear("inter.to_subject", d, 2 * d);
                linear("inter.to_object", d, 2 * d);
            }
        }
        HomogeneousMode::Intra => {
            if flags.use_intra_attention {
                linear("ctx.shared", d, d);
            }
            linear("intra.shared", d, d);
        }
        HomogeneousMode::Inter => {
            if flags.use_interactiveness_weight {
                linear("inter.weight", 1, d);
            }
            linear("inter.shared", d, 2 * d);
        }
    }
    if cfg.runs_rounds() {
        linear("update", d, d);
    }
    linear("cls", a, d);
    shapes.extend(cfg.spatial.param_shapes(d));
    shapes
}

/// Fresh parameters, uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        if name.starts_with("spatial.") {
            continue;
        }
        // Bias fan-in is the input width of its weight.
        let fan_in = if name.ends_with(".w") {
            shape[1]
        } else {
            store.value(&format!("{}.w", name.trim_end_matches(".b")))?.shape()[1]
        };
        store.insert_uniform(name, &shape, fan_in, rng);
    }
    cfg.spatial.init_params(&mut store, cfg.d, rng);
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `cfg` needs.
pub fn check_params(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let expected = param_shapes(cfg);
    for (name, shape) in &expected {
        let have = store.value(name)?.shape();
        if have != shape.as_slice() {
            return Err(Error::shape("check_params", format!("{name} is {have:?}, config expects {shape:?}")));
        }
    }
    if store.len() != expected.len() {
        let extra: Vec<_> = store.names().filter(|n| !expected.iter().any(|(e, _)| e == n)).collect();
        return Err(Error::shape("check_params", format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

fn fc(tape: &mut Tape, params: &ParamStore, x: NodeId, name: &str, act: Activation) -> Result<NodeId> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.linear_map(x, w, b, act)
}

fn zeros(tape: &mut Tape, rows: usize, d: usize) -> Result<NodeId> {
    tape.constant(Tensor::zeros(&[rows, d]))
}

fn features(list: &[Instance], f: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = list.iter().map(|i| i.features.clone()).collect();
    Tensor::from_rows(&rows, f)
}

/// Node and pair state of one scene during a forward pass.
#[derive(Clone, Debug)]
pub struct SceneGraph {
    pub n: usize,
    pub m: usize,
    d: usize,
    pub h0_subjects: NodeId,
    pub h0_objects: NodeId,
    pub h_subjects: NodeId,
    pub h_objects: NodeId,
    /// Context vectors from the latest round that computed them.
    pub r_subjects: Option<NodeId>,
    pub r_objects: Option<NodeId>,
    /// `[N * M, D]` encoded spatial features.
    pub spatial: NodeId,
    layout: PairLayout,
    homo: Option<(HomoLayout, NodeId)>,
}

/// Per-node messages for one round.
#[derive(Clone, Copy, Debug)]
pub struct Messages {
    pub subjects: NodeId,
    pub objects: NodeId,
}

impl Messages {
    pub fn zeros(tape: &mut Tape, g: &SceneGraph) -> Result<Self> {
        Ok(Messages { subjects: zeros(tape, g.n, g.d)?, objects: zeros(tape, g.m, g.d)? })
    }
}

/// Attention distribution of every node over its homogeneous neighbors;
/// `None` for nodes without neighbors.
#[derive(Clone, Debug)]
pub struct Attention {
    pub subjects: Vec<Option<NodeId>>,
    pub objects: Vec<Option<NodeId>>,
}

/// Softmax rows produced during a pass, kept for inspection.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub intra_rows: Vec<NodeId>,
    pub inter_rows: Vec<NodeId>,
}

impl Trace {
    fn record_intra(&mut self, rows: &[Option<NodeId>]) {
        self.intra_rows.extend(rows.iter().flatten());
    }
}

/// Projects raw features into `h0` and attaches the encoded spatial rows.
///
/// `spatial` holds one row per map of [`SceneInput::spatial_maps`] for the
/// configured mode.
pub fn init_graph(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneInput,
    spatial: NodeId,
) -> Result<SceneGraph> {
    scene.validate(cfg.f)?;
    let (n, m, d) = (scene.n(), scene.m(), cfg.d);
    let xs = tape.constant(features(&scene.subjects, cfg.f)?)?;
    let h0_subjects = fc(tape, params, xs, "proj.subject", Activation::Identity)?;
    let xo = tape.constant(features(&scene.objects, cfg.f)?)?;
    let h0_objects = fc(tape, params, xo, "proj.object", Activation::Identity)?;
    let homogeneous = cfg.flags.homogeneous != HomogeneousMode::Off;
    let expected = if homogeneous { (n + m) * (n + m).saturating_sub(1) } else { n * m };
    if tape.shape(spatial) != [expected, d] {
        return Err(Error::shape(
            "init_graph",
            format!("spatial rows {:?}, expected [{expected}, {d}]", tape.shape(spatial)),
        ));
    }
    let layout = PairLayout::new(n, m);
    let (homo, pair_spatial) = if homogeneous {
        let hl = HomoLayout::new(n, m);
        let s = tape.gather(spatial, &hl.het_rows)?;
        (Some((hl, spatial)), s)
    } else {
        (None, spatial)
    };
    Ok(SceneGraph {
        n,
        m,
        d,
        h0_subjects,
        h0_objects,
        h_subjects: h0_subjects,
        h_objects: h0_objects,
        r_subjects: None,
        r_objects: None,
        spatial: pair_spatial,
        layout,
        homo,
    })
}

/// `h_p + h_o + s` for every subject-object pair, `[N * M, D]`.
pub fn pair_sum(tape: &mut Tape, g: &SceneGraph) -> Result<NodeId> {
    let hp = tape.gather(g.h_subjects, &g.layout.sub_idx)?;
    let ho = tape.gather(g.h_objects, &g.layout.obj_idx)?;
    let sum = tape.add(hp, ho)?;
    tape.add(sum, g.spatial)
}

/// Element-wise max over heterogeneous neighbors of `relu(f_r(h_p + h_o + s))`.
pub fn compute_context_vectors(tape: &mut Tape, params: &ParamStore, g: &mut SceneGraph) -> Result<()> {
    let ps = pair_sum(tape, g)?;
    let fs = fc(tape, params, ps, "ctx.subject", Activation::Relu)?;
    g.r_subjects = Some(tape.segment_reduce(fs, &g.layout.by_subject, Reduction::Max)?);
    let fo = fc(tape, params, ps, "ctx.object", Activation::Relu)?;
    g.r_objects = Some(tape.segment_reduce(fo, &g.layout.by_object, Reduction::Max)?);
    Ok(())
}

fn attention_rows(tape: &mut Tape, r: Option<NodeId>, neighbors: &[Vec<usize>]) -> Result<Vec<Option<NodeId>>> {
    let mut rows = vec![None; neighbors.len()];
    let mut out = Vec::with_capacity(neighbors.len());
    for (v, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            out.push(None);
            continue;
        }
        let alpha = match r {
            Some(r) => {
                let mut row = |tape: &mut Tape, i: usize| -> Result<NodeId> {
                    if rows[i].is_none() {
                        rows[i] = Some(tape.row(r, i)?);
                    }
                    Ok(rows[i].unwrap())
                };
                let rv = row(tape, v)?;
                let mut eps = Vec::with_capacity(nb.len());
                for &u in nb {
                    let ru = row(tape, u)?;
                    eps.push(tape.cosine(rv, ru)?);
                }
                let eps = tape.stack(&eps)?;
                tape.softmax(eps)?
            }
            None => tape.constant(Tensor::filled(&[nb.len()], 1.0 / nb.len() as f64))?,
        };
        out.push(Some(alpha));
    }
    Ok(out)
}

/// Softmax over cosine similarities of context vectors, self excluded.
/// Without context vectors the weights are uniform.
pub fn intra_attention(tape: &mut Tape, g: &SceneGraph) -> Result<Attention> {
    Ok(Attention {
        subjects: attention_rows(tape, g.r_subjects, &others(g.n))?,
        objects: attention_rows(tape, g.r_objects, &others(g.m))?,
    })
}

fn attention_message(
    tape: &mut Tape,
    f: NodeId,
    neighbors: &[Vec<usize>],
    alphas: &[Option<NodeId>],
    mean_divide: bool,
    d: usize,
) -> Result<NodeId> {
    if neighbors.is_empty() {
        return zeros(tape, 0, d);
    }
    let mut parts = Vec::with_capacity(neighbors.len());
    for (nb, alpha) in neighbors.iter().zip(alphas) {
        let part = match alpha {
            None => zeros(tape, 1, d)?,
            Some(alpha) => {
                let rows = tape.gather(f, nb)?;
                let weighted = tape.scale_rows(rows, *alpha)?;
                let all: Vec<usize> = (0..nb.len()).collect();
                let sum = tape.segment_reduce(weighted, &[all], Reduction::Sum)?;
                if mean_divide {
                    tape.scale(sum, 1.0 / nb.len() as f64)?
                } else {
                    sum
                }
            }
        };
        parts.push(part);
    }
    tape.concat_rows(&parts)
}

/// `sum_u alpha_vu * relu(f_intra(h_u))` over homogeneous neighbors.
pub fn intra_message(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    g: &SceneGraph,
    attention: &Attention,
) -> Result<Messages> {
    let fs = fc(tape, params, g.h_subjects, "intra.subject", Activation::Relu)?;
    let subjects = attention_message(tape, fs, &others(g.n), &attention.subjects, cfg.intra_mean_divide, g.d)?;
    let fo = fc(tape, params, g.h_objects, "intra.object", Activation::Relu)?;
    let objects = attention_message(tape, fo, &others(g.m), &attention.objects, cfg.intra_mean_divide, g.d)?;
    Ok(Messages { subjects, objects })
}

/// `sigmoid(f_w(h_p + h_o + s))` per pair, as an `[N * M]` vector.
pub fn interactiveness_weights(tape: &mut Tape, params: &ParamStore, g: &SceneGraph) -> Result<NodeId> {
    let ps = pair_sum(tape, g)?;
    let w = fc(tape, params, ps, "inter.weight", Activation::Sigmoid)?;
    tape.reshape(w, &[g.n * g.m])
}

/// For each receiver, softmax its pair weights (uniform without `w`), scale
/// the candidate rows and take the element-wise max. Receivers without
/// pairs get zero rows.
fn weighted_max(
    tape: &mut Tape,
    cand: NodeId,
    groups: &[Vec<usize>],
    w: Option<NodeId>,
    trace: &mut Trace,
) -> Result<NodeId> {
    let d = tape.shape(cand)[1];
    let order: Vec<usize> = groups.concat();
    if order.is_empty() {
        return zeros(tape, groups.len(), d);
    }
    let mut weights = Vec::new();
    let mut contiguous = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for group in groups {
        contiguous.push((offset..offset + group.len()).collect::<Vec<_>>());
        offset += group.len();
        if group.is_empty() {
            continue;
        }
        let row = match w {
            Some(w) => {
                let logits = tape.gather(w, group)?;
                let row = tape.softmax(logits)?;
                trace.inter_rows.push(row);
                row
            }
            None => tape.constant(Tensor::filled(&[group.len()], 1.0 / group.len() as f64))?,
        };
        weights.push(row);
    }
    let weights = tape.concat_cols(&weights)?;
    let rows = tape.gather(cand, &order)?;
    let scaled = tape.scale_rows(rows, weights)?;
    tape.segment_reduce(scaled, &contiguous, Reduction::Max)
}

fn inter_message_traced(
    tape: &mut Tape,
    params: &ParamStore,
    g: &SceneGraph,
    w: Option<NodeId>,
    trace: &mut Trace,
) -> Result<Messages> {
    let ho = tape.gather(g.h_objects, &g.layout.obj_idx)?;
    let to_sub = tape.concat_cols(&[g.spatial, ho])?;
    let cand_sub = fc(tape, params, to_sub, "inter.to_subject", Activation::Relu)?;
    let subjects = weighted_max(tape, cand_sub, &g.layout.by_subject, w, trace)?;
    let hp = tape.gather(g.h_subjects, &g.layout.sub_idx)?;
    let to_obj = tape.concat_cols(&[g.spatial, hp])?;
    let cand_obj = fc(tape, params, to_obj, "inter.to_object", Activation::Relu)?;
    let objects = weighted_max(tape, cand_obj, &g.layout.by_object, w, trace)?;
    Ok(Messages { subjects, objects })
}

/// Subject `i` receives `max_j softmax_j(w_i.)_j * relu(f(s_ij ++ h_oj))`;
/// objects receive the symmetric message over subjects.
pub fn inter_message(tape: &mut Tape, params: &ParamStore, g: &SceneGraph, w: Option<NodeId>) -> Result<Messages> {
    inter_message_traced(tape, params, g, w, &mut Trace::default())
}

/// `h' = relu(mu(h + M_intra + M_inter)) + h0` for both node kinds.
pub fn update_nodes(tape: &mut Tape, params: &ParamStore, g: &mut SceneGraph, intra: Messages, inter: Messages) -> Result<()> {
    let step = |tape: &mut Tape, h: NodeId, h0: NodeId, a: NodeId, b: NodeId| -> Result<NodeId> {
        let x = tape.add(h, a)?;
        let x = tape.add(x, b)?;
        let u = fc(tape, params, x, "update", Activation::Relu)?;
        tape.add(u, h0)
    };
    g.h_subjects = step(tape, g.h_subjects, g.h0_subjects, intra.subjects, inter.subjects)?;
    g.h_objects = step(tape, g.h_objects, g.h0_objects, intra.objects, inter.objects)?;
    Ok(())
}

fn split_nodes(tape: &mut Tape, all: NodeId, n: usize, m: usize) -> Result<Messages> {
    let subjects = tape.gather(all, &(0..n).collect::<Vec<_>>())?;
    let objects = tape.gather(all, &(n..n + m).collect::<Vec<_>>())?;
    Ok(Messages { subjects, objects })
}

/// One round of the homogeneous variant: every node is treated alike and
/// receives a single message type from all other nodes.
fn homogeneous_messages(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    g: &mut SceneGraph,
    trace: &mut Trace,
) -> Result<(Messages, Option<NodeId>)> {
    let (layout, spatial) = g.homo.clone().expect("homogeneous graph");
    let (n, m, d) = (g.n, g.m, g.d);
    let h = tape.concat_rows(&[g.h_subjects, g.h_objects])?;
    let ps = if layout.recv.is_empty() {
        None
    } else {
        let hv = tape.gather(h, &layout.recv)?;
        let hu = tape.gather(h, &layout.send)?;
        let sum = tape.add(hv, hu)?;
        Some(tape.add(sum, spatial)?)
    };
    let flags = &cfg.flags;
    let (all, w) = match flags.homogeneous {
        HomogeneousMode::Intra => {
            let r = match (ps, flags.use_intra_attention) {
                (Some(ps), true) => {
                    let f = fc(tape, params, ps, "ctx.shared", Activation::Relu)?;
                    Some(tape.segment_reduce(f, &layout.by_receiver, Reduction::Max)?)
                }
                (None, true) => Some(zeros(tape, n + m, d)?),
                _ => None,
            };
            if let Some(r) = r {
                let split = split_nodes(tape, r, n, m)?;
                g.r_subjects = Some(split.subjects);
                g.r_objects = Some(split.objects);
            }
            let alphas = attention_rows(tape, r, &layout.neighbors)?;
            trace.record_intra(&alphas);
            let f = fc(tape, params, h, "intra.shared", Activation::Relu)?;
            (attention_message(tape, f, &layout.neighbors, &alphas, cfg.intra_mean_divide, d)?, None)
        }
        HomogeneousMode::Inter => match ps {
            None => (zeros(tape, n + m, d)?, None),
            Some(ps) => {
                let w = if flags.use_interactiveness_weight {
                    let w = fc(tape, params, ps, "inter.weight", Activation::Sigmoid)?;
                    Some(tape.reshape(w, &[layout.recv.len()])?)
                } else {
                    None
                };
                let hu = tape.gather(h, &layout.send)?;
                let x = tape.concat_cols(&[spatial, hu])?;
                let cand = fc(tape, params, x, "inter.shared", Activation::Relu)?;
                let msg = weighted_max(tape, cand, &layout.by_receiver, w, trace)?;
                let pair_w = match w {
                    Some(w) => Some(tape.gather(w, &layout.het_rows)?),
                    None => None,
                };
                (msg, pair_w)
            }
        },
        HomogeneousMode::Off => unreachable!("heterogeneous graphs use the typed messages"),
    };
    Ok((split_nodes(tape, all, n, m)?, w))
}

/// One reasoning round; returns the interactiveness weights it used.
pub fn reasoning_round(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    g: &mut SceneGraph,
    trace: &mut Trace,
) -> Result<Option<NodeId>> {
    let flags = &cfg.flags;
    let (intra, inter, w) = if flags.homogeneous != HomogeneousMode::Off {
        let (msg, w) = homogeneous_messages(tape, params, cfg, g, trace)?;
        (msg, Messages::zeros(tape, g)?, w)
    } else {
        let intra = if flags.use_intra {
            if flags.use_intra_attention {
                compute_context_vectors(tape, params, g)?;
            }
            let attention = intra_attention(tape, g)?;
            trace.record_intra(&attention.subjects);
            trace.record_intra(&attention.objects);
            intra_message(tape, params, cfg, g, &attention)?
        } else {
            Messages::zeros(tape, g)?
        };
        let (inter, w) = if flags.use_inter {
            let w = if flags.use_interactiveness_weight && g.n * g.m > 0 {
                Some(interactiveness_weights(tape, params, g)?)
            } else {
                None
            };
            (inter_message_traced(tape, params, g, w, trace)?, w)
        } else {
            (Messages::zeros(tape, g)?, None)
        };
        (intra, inter, w)
    };
    update_nodes(tape, params, g, intra, inter)?;
    Ok(w)
}

/// Joint classifier `sigmoid(f_cls(h_p + h_o + s))`, `[N * M, A]`.
pub fn predict(tape: &mut Tape, params: &ParamStore, g: &SceneGraph) -> Result<NodeId> {
    let ps = pair_sum(tape, g)?;
    fc(tape, params, ps, "cls", Activation::Sigmoid)
}

/// Result of a full pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N * M, A]` interaction probabilities.
    pub y: NodeId,
    /// `[N * M]` interactiveness weights of the last round, when used.
    pub w: Option<NodeId>,
    pub graph: SceneGraph,
    pub trace: Trace,
}

/// Runs the model on a scene whose spatial maps are already encoded.
pub fn forward_encoded(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneInput,
    spatial: NodeId,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let mut graph = init_graph(tape, params, cfg, scene, spatial)?;
    let mut trace = Trace::default();
    let mut w = None;
    if cfg.runs_rounds() {
        for _ in 0..cfg.t {
            w = reasoning_round(tape, params, cfg, &mut graph, &mut trace)?;
        }
    }
    let y = predict(tape, params, &graph)?;
    Ok(ForwardOutput { y, w, graph, trace })
}

/// Encodes the scene's spatial maps, then runs [`forward_encoded`].
pub fn forward(tape: &mut Tape, params: &ParamStore, cfg: &ModelConfig, scene: &SceneInput) -> Result<ForwardOutput> {
    let maps = scene.spatial_maps(cfg.flags.homogeneous != HomogeneousMode::Off)?;
    let spatial = encode_spatial_batch(tape, params, &cfg.spatial, &maps)?;
    forward_encoded(tape, params, cfg, scene, spatial)
}

/// Interaction probabilities `[N * M, A]` of one scene.
pub fn infer(params: &ParamStore, cfg: &ModelConfig, scene: &SceneInput) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, cfg, scene)?;
    Ok(tape.value(out.y).clone())
}

/// The graph-free reference model `sigmoid(f_cls(h0_p + h0_o + s))` on
/// subject-object spatial rows `[N * M, D]`.
pub fn baseline_classifier(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneInput,
    spatial: NodeId,
) -> Result<NodeId> {
    scene.validate(cfg.f)?;
    let layout = PairLayout::new(scene.n(), scene.m());
    let xs = tape.constant(features(&scene.subjects, cfg.f)?)?;
    let hp = fc(tape, params, xs, "proj.subject", Activation::Identity)?;
    let xo = tape.constant(features(&scene.objects, cfg.f)?)?;
    let ho = fc(tape, params, xo, "proj.object", Activation::Identity)?;
    let gp = tape.gather(hp, &layout.sub_idx)?;
    let go = tape.gather(ho, &layout.obj_idx)?;
    let sum = tape.add(gp, go)?;
    let ps = tape.add(sum, spatial)?;
    fc(tape, params, ps, "cls", Activation::Sigmoid)
}

/// Detection scores `y * s_h * s_o`, flattened as `[N * M * A]`.
pub fn detection_scores(y: &Tensor, scene: &SceneInput) -> Result<Vec<f64>> {
    let (n, m) = (scene.n(), scene.m());
    if y.rank() != 2 || y.shape()[0] != n * m {
        return Err(Error::shape("detection_scores", format!("y {:?} for {n}x{m} pairs", y.shape())));
    }
    let a = y.shape()[1];
    let mut out = Vec::with_capacity(n * m * a);
    for (p, row) in y.data().chunks(a.max(1)).take(n * m).enumerate() {
        let sh = scene.subjects[p / m].confidence;
        let so = scene.objects[p % m].confidence;
        out.extend(row.iter().map(|&v| v * sh * so));
    }
    Ok(out)
}

/// Snapshot of one node after a pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeState {
    pub kind: NodeKind,
    pub h: Vec<f64>,
    pub h0: Vec<f64>,
    pub r: Option<Vec<f64>>,
    pub det_confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Snapshot of one subject-object pair after a pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairEdge {
    pub subject: usize,
    pub object: usize,
    pub s: Vec<f64>,
    pub w: Option<f64>,
    pub y: Vec<f64>,
}

impl ForwardOutput {
    pub fn node_states(&self, tape: &Tape, scene: &SceneInput) -> Vec<NodeState> {
        let g = &self.graph;
        let mut out = Vec::with_capacity(g.n + g.m);
        let sides = [
            (NodeKind::Subject, &scene.subjects, g.h_subjects, g.h0_subjects, g.r_subjects),
            (NodeKind::Object, &scene.objects, g.h_objects, g.h0_objects, g.r_objects),
        ];
        for (kind, list, h, h0, r) in sides {
            for (i, inst) in list.iter().enumerate() {
                out.push(NodeState {
                    kind,
                    h: tape.value(h).row(i).to_vec(),
                    h0: tape.value(h0).row(i).to_vec(),
                    r: r.map(|r| tape.value(r).row(i).to_vec()),
                    det_confidence: inst.confidence,
                    bbox: inst.bbox,
                });
            }
        }
        out
    }

    pub fn pair_edges(&self, tape: &Tape) -> Vec<PairEdge> {
        let g = &self.graph;
        (0..g.n * g.m)
            .map(|p| PairEdge {
                subject: p / g.m,
                object: p % g.m,
                s: tape.value(g.spatial).row(p).to_vec(),
                w: self.w.map(|w| tape.value(w).data()[p]),
                y: tape.value(self.y).row(p).to_vec(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
