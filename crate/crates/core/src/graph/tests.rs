use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::math::finite_difference_check;
use crate::spatial::SpatialConfig;

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

fn small_cfg(d: usize, f: usize, a: usize) -> ModelConfig {
    ModelConfig { d, f, a, t: 2, spatial: SpatialConfig { channels: [2, 2, 2] }, ..ModelConfig::default() }
}

fn random_instance(rng: &mut ChaCha8Rng, f: usize) -> Instance {
    let x = rng.random_range(0.0..100.0);
    let y = rng.random_range(0.0..100.0);
    Instance {
        bbox: bb(x, y, x + rng.random_range(5.0..60.0), y + rng.random_range(5.0..60.0)),
        confidence: rng.random_range(0.5..1.0),
        features: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, m: usize, f: usize) -> SceneInput {
    SceneInput {
        subjects: (0..n).map(|_| random_instance(rng, f)).collect(),
        objects: (0..m).map(|_| random_instance(rng, f)).collect(),
    }
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn rows_tensor(rows: &[Vec<f64>], d: usize) -> Tensor {
    Tensor::from_rows(rows, d).unwrap()
}

fn set(params: &mut ParamStore, name: &str, data: Vec<f64>) {
    let v = params.value_mut(name).unwrap();
    assert_eq!(v.numel(), data.len(), "{name}");
    v.data_mut().copy_from_slice(&data);
}

fn identity(d: usize) -> Vec<f64> {
    (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Straight-line arithmetic of the heterogeneous model, independent of the tape.
mod oracle {
    use super::*;

    pub fn lin(p: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
        let w = p.value(&format!("{name}.w")).unwrap();
        let b = p.value(&format!("{name}.b")).unwrap();
        let (out, input) = (w.shape()[0], w.shape()[1]);
        assert_eq!(input, x.len());
        (0..out)
            .map(|o| b.data()[o] + (0..input).map(|i| w.data()[o * input + i] * x[i]).sum::<f64>())
            .collect()
    }

    pub fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    pub fn sigmoid(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
    }

    pub fn add3(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
        (0..a.len()).map(|k| a[k] + b[k] + c[k]).collect()
    }

    fn max_rows(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
        if rows.is_empty() {
            return vec![0.0; d];
        }
        (0..d).map(|k| rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max)).collect()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return 0.0;
        }
        (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
    }

    fn intra(p: &ParamStore, cfg: &ModelConfig, h: &[Vec<f64>], r: Option<&[Vec<f64>]>, name: &str) -> Vec<Vec<f64>> {
        let d = cfg.d;
        let f: Vec<Vec<f64>> = h.iter().map(|x| relu(lin(p, name, x))).collect();
        (0..h.len())
            .map(|v| {
                let nb: Vec<usize> = (0..h.len()).filter(|&u| u != v).collect();
                if nb.is_empty() {
                    return vec![0.0; d];
                }
                let alpha = match r {
                    Some(r) => softmax(&nb.iter().map(|&u| cosine(&r[v], &r[u])).collect::<Vec<_>>()),
                    None => vec![1.0 / nb.len() as f64; nb.len()],
                };
                let mut out = vec![0.0; d];
                for (a, &u) in alpha.iter().zip(&nb) {
                    for k in 0..d {
                        out[k] += a * f[u][k];
                    }
                }
                if cfg.intra_mean_divide {
                    out.iter_mut().for_each(|x| *x /= nb.len() as f64);
                }
                out
            })
            .collect()
    }

    /// Returns `(y, w)` with `y[i * m + j]` the class probabilities of pair (i, j).
    pub fn forward(p: &ParamStore, cfg: &ModelConfig, scene: &SceneInput, s: &[Vec<f64>]) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
        let (n, m, d) = (scene.n(), scene.m(), cfg.d);
        let h0p: Vec<Vec<f64>> = scene.subjects.iter().map(|i| lin(p, "proj.subject", &i.features)).collect();
        let h0o: Vec<Vec<f64>> = scene.objects.iter().map(|i| lin(p, "proj.object", &i.features)).collect();
        let (mut hp, mut ho) = (h0p.clone(), h0o.clone());
        let flags = cfg.flags;
        let mut last_w = None;
        let rounds = if flags.use_intra || flags.use_inter { cfg.t } else { 0 };
        for _ in 0..rounds {
            let ps = |i: usize, j: usize, hp: &[Vec<f64>], ho: &[Vec<f64>]| add3(&hp[i], &ho[j], &s[i * m + j]);
            let (mut ip, mut io) = (vec![vec![0.0; d]; n], vec![vec![0.0; d]; m]);
            if flags.use_intra {
                let (rp, ro) = if flags.use_intra_attention {
                    let rp: Vec<Vec<f64>> = (0..n)
                        .map(|i| max_rows(&(0..m).map(|j| relu(lin(p, "ctx.subject", &ps(i, j, &hp, &ho)))).collect::<Vec<_>>(), d))
                        .collect();
                    let ro: Vec<Vec<f64>> = (0..m)
                        .map(|j| max_rows(&(0..n).map(|i| relu(lin(p, "ctx.object", &ps(i, j, &hp, &ho)))).collect::<Vec<_>>(), d))
                        .collect();
                    (Some(rp), Some(ro))
                } else {
                    (None, None)
                };
                ip = intra(p, cfg, &hp, rp.as_deref(), "intra.subject");
                io = intra(p, cfg, &ho, ro.as_deref(), "intra.object");
            }
            let (mut ep, mut eo) = (vec![vec![0.0; d]; n], vec![vec![0.0; d]; m]);
            if flags.use_inter {
                let w: Option<Vec<f64>> = flags.use_interactiveness_weight.then(|| {
                    (0..n * m).map(|k| sigmoid(lin(p, "inter.weight", &ps(k / m, k % m, &hp, &ho)))[0]).collect()
                });
                let weights = |ks: &[usize]| match &w {
                    Some(w) => softmax(&ks.iter().map(|&k| w[k]).collect::<Vec<_>>()),
                    None => vec![1.0 / ks.len() as f64; ks.len()],
                };
                for i in 0..n {
                    let ks: Vec<usize> = (0..m).map(|j| i * m + j).collect();
                    let a = weights(&ks);
                    let cands: Vec<Vec<f64>> = ks
                        .iter()
                        .zip(&a)
                        .map(|(&k, &a)| {
                            let x: Vec<f64> = s[k].iter().chain(&ho[k % m]).copied().collect();
                            relu(lin(p, "inter.to_subject", &x)).into_iter().map(|v| v * a).collect()
                        })
                        .collect();
                    ep[i] = max_rows(&cands, d);
                }
                for j in 0..m {
                    let ks: Vec<usize> = (0..n).map(|i| i * m + j).collect();
                    let a = weights(&ks);
                    let cands: Vec<Vec<f64>> = ks
                        .iter()
                        .zip(&a)
                        .map(|(&k, &a)| {
                            let x: Vec<f64> = s[k].iter().chain(&hp[k / m]).copied().collect();
                            relu(lin(p, "inter.to_object", &x)).into_iter().map(|v| v * a).collect()
                        })
                        .collect();
                    eo[j] = max_rows(&cands, d);
                }
                last_w = w;
            }
            let upd = |h: &[f64], a: &[f64], b: &[f64], h0: &[f64]| -> Vec<f64> {
                let u = relu(lin(p, "update", &add3(h, a, b)));
                u.iter().zip(h0).map(|(x, y)| x + y).collect()
            };
            hp = (0..n).map(|i| upd(&hp[i], &ip[i], &ep[i], &h0p[i])).collect();
            ho = (0..m).map(|j| upd(&ho[j], &io[j], &eo[j], &h0o[j])).collect();
        }
        let y = (0..n * m).map(|k| sigmoid(lin(p, "cls", &add3(&hp[k / m], &ho[k % m], &s[k])))).collect();
        (y, last_w)
    }
}

struct Fixture {
    cfg: ModelConfig,
    params: ParamStore,
    scene: SceneInput,
    spatial: Vec<Vec<f64>>,
}

fn fixture(seed: u64, n: usize, m: usize, cfg: ModelConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&cfg, &mut rng).unwrap();
    let scene = random_scene(&mut rng, n, m, cfg.f);
    let rows = if cfg.flags.homogeneous == HomogeneousMode::Off { n * m } else { (n + m) * (n + m).saturating_sub(1) };
    let spatial = random_rows(&mut rng, rows, cfg.d);
    Fixture { cfg, params, scene, spatial }
}

impl Fixture {
    fn run(&self) -> (Tape, ForwardOutput) {
        let mut tape = Tape::new();
        let s = tape.constant(rows_tensor(&self.spatial, self.cfg.d)).unwrap();
        let out = forward_encoded(&mut tape, &self.params, &self.cfg, &self.scene, s).unwrap();
        (tape, out)
    }

    fn graph(&self, tape: &mut Tape) -> SceneGraph {
        let s = tape.constant(rows_tensor(&self.spatial, self.cfg.d)).unwrap();
        init_graph(tape, &self.params, &self.cfg, &self.scene, s).unwrap()
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn param_sets_follow_flags() {
    let names = |flags: Flags| -> Vec<String> {
        let cfg = ModelConfig { flags, ..ModelConfig::default() };
        param_shapes(&cfg).into_iter().map(|(n, _)| n).filter(|n| n.ends_with(".w")).collect()
    };
    let full = names(Flags::default());
    for expected in ["ctx.subject.w", "ctx.object.w", "intra.subject.w", "inter.weight.w", "inter.to_object.w", "update.w"] {
        assert!(full.contains(&expected.to_string()), "{expected}");
    }
    let base = names(Flags::baseline());
    assert!(!base.iter().any(|n| n.starts_with("update") || n.starts_with("intra") || n.starts_with("inter")));
    let homo = names(Flags { homogeneous: HomogeneousMode::Inter, ..Flags::default() });
    assert!(homo.contains(&"inter.shared.w".to_string()));
    assert!(!homo.iter().any(|n| n.contains("subject") && !n.starts_with("proj")));
}

#[test]
fn variant_names() {
    assert_eq!(Flags::default().variant(), "full");
    assert_eq!(Flags::baseline().variant(), "baseline");
    let no_attention = Flags { use_intra_attention: false, use_interactiveness_weight: false, ..Flags::default() };
    assert_eq!(no_attention.variant(), "full-no-intra-attention-no-w");
    assert_eq!(Flags { use_inter: false, ..Flags::default() }.variant(), "no-inter");
    assert_eq!(Flags { homogeneous: HomogeneousMode::Intra, ..Flags::default() }.variant(), "homogeneous-intra");
}

#[test]
fn check_params_detects_mismatch() {
    let cfg = small_cfg(4, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params(&cfg, &mut rng).unwrap();
    check_params(&cfg, &params).unwrap();
    let wider = ModelConfig { d: 5, ..cfg.clone() };
    assert!(check_params(&wider, &params).is_err());
    let base = ModelConfig { flags: Flags::baseline(), ..cfg };
    assert!(check_params(&base, &params).is_err());
}

#[test]
fn empty_scenes_predict_nothing() {
    for (n, m) in [(0, 0), (0, 3), (2, 0)] {
        for flags in [Flags::default(), Flags { homogeneous: HomogeneousMode::Intra, ..Flags::default() }, Flags { homogeneous: HomogeneousMode::Inter, ..Flags::default() }] {
            let fx = fixture(1, n, m, ModelConfig { flags, ..small_cfg(3, 4, 2) });
            let (tape, out) = fx.run();
            assert_eq!(tape.shape(out.y), &[0, 2]);
            assert_eq!(out.pair_edges(&tape).len(), 0);
            assert_eq!(out.node_states(&tape, &fx.scene).len(), n + m);
        }
    }
}

#[test]
fn empty_scene_runs_with_real_encoder() {
    let cfg = small_cfg(3, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_params(&cfg, &mut rng).unwrap();
    let scene = random_scene(&mut rng, 3, 0, 4);
    let mut tape = Tape::new();
    let out = forward(&mut tape, &params, &cfg, &scene).unwrap();
    assert_eq!(tape.value(out.y).numel(), 0);
}

#[test]
fn grid_has_one_edge_per_pair() {
    let fx = fixture(3, 2, 3, small_cfg(3, 4, 2));
    let (tape, out) = fx.run();
    let edges = out.pair_edges(&tape);
    assert_eq!(edges.len(), 6);
    assert_eq!((edges[4].subject, edges[4].object), (1, 1));
    assert!(edges.iter().all(|e| e.y.iter().all(|&v| (0.0..=1.0).contains(&v))));
}

#[test]
fn feature_length_mismatch_is_a_shape_error() {
    let mut fx = fixture(4, 1, 1, small_cfg(3, 4, 2));
    fx.scene.objects[0].features.pop();
    let mut tape = Tape::new();
    let s = tape.constant(rows_tensor(&fx.spatial, 3)).unwrap();
    let err = init_graph(&mut tape, &fx.params, &fx.cfg, &fx.scene, s).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
    assert!(err.to_string().contains("objects[0]"));
}

#[test]
fn identical_subjects_share_state() {
    let mut fx = fixture(5, 3, 2, small_cfg(4, 4, 3));
    fx.scene.subjects[2] = fx.scene.subjects[0].clone();
    // Spatial rows follow boxes, so the duplicate gets the same rows.
    for j in 0..2 {
        fx.spatial[2 * 2 + j] = fx.spatial[j].clone();
    }
    let (tape, out) = fx.run();
    let states = out.node_states(&tape, &fx.scene);
    assert_close(&states[0].h, &states[2].h, 1e-12);
    assert_eq!(states[0].h0, states[2].h0);
    let y = tape.value(out.y);
    assert_close(&y.data()[0..6], &y.data()[12..18], 1e-12);
}

#[test]
fn singleton_context_is_the_pair_encoding() {
    let fx = fixture(6, 1, 1, small_cfg(3, 4, 2));
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    compute_context_vectors(&mut tape, &fx.params, &mut g).unwrap();
    let h0p = oracle::lin(&fx.params, "proj.subject", &fx.scene.subjects[0].features);
    let h0o = oracle::lin(&fx.params, "proj.object", &fx.scene.objects[0].features);
    let x = oracle::add3(&h0p, &h0o, &fx.spatial[0]);
    let expected = oracle::relu(oracle::lin(&fx.params, "ctx.subject", &x));
    assert_close(tape.value(g.r_subjects.unwrap()).data(), &expected, 1e-12);
}

#[test]
fn duplicate_objects_leave_context_unchanged() {
    let fx = fixture(7, 2, 1, small_cfg(3, 4, 2));
    let mut dup = fx.scene.clone();
    dup.objects.push(dup.objects[0].clone());
    let spatial_dup: Vec<Vec<f64>> = fx.spatial.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
    let r_of = |scene: &SceneInput, spatial: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let s = tape.constant(rows_tensor(spatial, 3)).unwrap();
        let mut g = init_graph(&mut tape, &fx.params, &fx.cfg, scene, s).unwrap();
        compute_context_vectors(&mut tape, &fx.params, &mut g).unwrap();
        tape.value(g.r_subjects.unwrap()).clone()
    };
    assert_eq!(r_of(&fx.scene, &fx.spatial), r_of(&dup, &spatial_dup));
}

#[test]
fn context_without_objects_is_zero() {
    let fx = fixture(8, 2, 0, small_cfg(3, 4, 2));
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    compute_context_vectors(&mut tape, &fx.params, &mut g).unwrap();
    assert!(tape.value(g.r_subjects.unwrap()).data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.shape(g.r_subjects.unwrap()), &[2, 3]);
}

#[test]
fn attention_rows_over_identical_contexts() {
    for (n, expected) in [(2usize, vec![1.0]), (3, vec![0.5, 0.5])] {
        let mut fx = fixture(9, n, 1, small_cfg(3, 4, 2));
        for i in 1..n {
            fx.scene.subjects[i] = fx.scene.subjects[0].clone();
            fx.spatial[i] = fx.spatial[0].clone();
        }
        let mut tape = Tape::new();
        let mut g = fx.graph(&mut tape);
        compute_context_vectors(&mut tape, &fx.params, &mut g).unwrap();
        let att = intra_attention(&mut tape, &g).unwrap();
        for row in &att.subjects {
            assert_close(tape.value(row.unwrap()).data(), &expected, 1e-15);
        }
        assert!(att.objects[0].is_none());
    }
}

#[test]
fn single_subject_gets_no_intra_message() {
    let fx = fixture(10, 1, 2, small_cfg(3, 4, 2));
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    compute_context_vectors(&mut tape, &fx.params, &mut g).unwrap();
    let att = intra_attention(&mut tape, &g).unwrap();
    let msg = intra_message(&mut tape, &fx.params, &fx.cfg, &g, &att).unwrap();
    assert!(tape.value(msg.subjects).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_intra_map_passes_the_neighbor_through() {
    let mut fx = fixture(11, 2, 1, small_cfg(2, 2, 2));
    set(&mut fx.params, "proj.subject.w", identity(2));
    set(&mut fx.params, "proj.subject.b", vec![0.0, 0.0]);
    set(&mut fx.params, "intra.subject.w", identity(2));
    set(&mut fx.params, "intra.subject.b", vec![0.0, 0.0]);
    fx.scene.subjects[0].features = vec![0.3, 0.9];
    fx.scene.subjects[1].features = vec![1.5, 0.25];
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    compute_context_vectors(&mut tape, &fx.params, &mut g).unwrap();
    let att = intra_attention(&mut tape, &g).unwrap();
    let msg = intra_message(&mut tape, &fx.params, &fx.cfg, &g, &att).unwrap();
    assert_eq!(tape.value(msg.subjects).row(0), &[1.5, 0.25]);
    assert_eq!(tape.value(msg.subjects).row(1), &[0.3, 0.9]);
}

#[test]
fn hand_weighted_intra_message() {
    let mut fx = fixture(12, 3, 1, small_cfg(2, 2, 2));
    set(&mut fx.params, "proj.subject.w", identity(2));
    set(&mut fx.params, "proj.subject.b", vec![0.0, 0.0]);
    set(&mut fx.params, "intra.subject.w", vec![2.0, 0.0, 1.0, 1.0]);
    set(&mut fx.params, "intra.subject.b", vec![0.0, 1.0]);
    let feats = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
    for (s, f) in fx.scene.subjects.iter_mut().zip(feats) {
        s.features = f.to_vec();
    }
    // f(h) = relu([2 h0, h0 + h1 + 1]): [2, 4], [6, 3], [1, 2].
    let mut tape = Tape::new();
    let g = fx.graph(&mut tape);
    let alpha = [vec![0.25, 0.75], vec![0.6, 0.4], vec![0.1, 0.9]];
    let subjects = alpha.iter().map(|a| Some(tape.constant(Tensor::vector(a.clone())).unwrap())).collect();
    let att = Attention { subjects, objects: vec![None] };
    let msg = intra_message(&mut tape, &fx.params, &fx.cfg, &g, &att).unwrap();
    let got = tape.value(msg.subjects).clone();
    assert_close(got.row(0), &[0.25 * 6.0 + 0.75 * 1.0, 0.25 * 3.0 + 0.75 * 2.0], 1e-12);
    assert_close(got.row(1), &[0.6 * 2.0 + 0.4 * 1.0, 0.6 * 4.0 + 0.4 * 2.0], 1e-12);
    assert_close(got.row(2), &[0.1 * 2.0 + 0.9 * 6.0, 0.1 * 4.0 + 0.9 * 3.0], 1e-12);
}

#[test]
fn constant_interactiveness_map() {
    let mut fx = fixture(13, 2, 3, small_cfg(3, 4, 2));
    set(&mut fx.params, "inter.weight.w", vec![0.0; 3]);
    set(&mut fx.params, "inter.weight.b", vec![-0.7]);
    let mut tape = Tape::new();
    let g = fx.graph(&mut tape);
    let w = interactiveness_weights(&mut tape, &fx.params, &g).unwrap();
    let expected = 1.0 / (1.0 + 0.7f64.exp());
    assert!(tape.value(w).data().iter().all(|&v| (v - expected).abs() < 1e-15));
}

#[test]
fn identical_pairs_get_identical_weights() {
    let mut fx = fixture(14, 2, 1, small_cfg(3, 4, 2));
    fx.scene.subjects[1] = fx.scene.subjects[0].clone();
    fx.spatial[1] = fx.spatial[0].clone();
    let mut tape = Tape::new();
    let g = fx.graph(&mut tape);
    let w = interactiveness_weights(&mut tape, &fx.params, &g).unwrap();
    assert_eq!(tape.value(w).data()[0], tape.value(w).data()[1]);
}

#[test]
fn interactiveness_gradient_matches_finite_differences() {
    let mut fx = fixture(15, 2, 2, small_cfg(4, 3, 2));
    let (cfg, scene, spatial) = (fx.cfg.clone(), fx.scene.clone(), fx.spatial.clone());
    let report = finite_difference_check(&mut fx.params, 1e-5, |p, tape| {
        let s = tape.constant(rows_tensor(&spatial, 4))?;
        let g = init_graph(tape, p, &cfg, &scene, s)?;
        let w = interactiveness_weights(tape, p, &g)?;
        tape.bce(w, Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn singleton_inter_message() {
    let fx = fixture(16, 1, 1, small_cfg(3, 4, 2));
    let mut tape = Tape::new();
    let g = fx.graph(&mut tape);
    let w = interactiveness_weights(&mut tape, &fx.params, &g).unwrap();
    let msg = inter_message(&mut tape, &fx.params, &g, Some(w)).unwrap();
    let ho = oracle::lin(&fx.params, "proj.object", &fx.scene.objects[0].features);
    let x: Vec<f64> = fx.spatial[0].iter().chain(&ho).copied().collect();
    let expected = oracle::relu(oracle::lin(&fx.params, "inter.to_subject", &x));
    assert_close(tape.value(msg.subjects).data(), &expected, 1e-12);
}

#[test]
fn identical_neighbors_split_the_weight() {
    let mut fx = fixture(17, 1, 2, small_cfg(3, 4, 2));
    fx.scene.objects[1] = fx.scene.objects[0].clone();
    fx.spatial[1] = fx.spatial[0].clone();
    let mut tape = Tape::new();
    let g = fx.graph(&mut tape);
    let w = interactiveness_weights(&mut tape, &fx.params, &g).unwrap();
    let mut trace = Trace::default();
    let msg = inter_message_traced(&mut tape, &fx.params, &g, Some(w), &mut trace).unwrap();
    assert_eq!(tape.value(trace.inter_rows[0]).data(), &[0.5, 0.5]);
    let ho = oracle::lin(&fx.params, "proj.object", &fx.scene.objects[0].features);
    let x: Vec<f64> = fx.spatial[0].iter().chain(&ho).copied().collect();
    let expected: Vec<f64> = oracle::relu(oracle::lin(&fx.params, "inter.to_subject", &x)).iter().map(|v| v * 0.5).collect();
    assert_close(tape.value(msg.subjects).data(), &expected, 1e-12);
}

#[test]
fn hand_two_neighbor_inter_message() {
    let mut fx = fixture(18, 1, 2, small_cfg(1, 1, 2));
    // D = 1: h_o = feature, f_inter([s, h]) = relu(s + 2h), w = sigmoid(ps).
    set(&mut fx.params, "proj.subject.w", vec![0.0]);
    set(&mut fx.params, "proj.subject.b", vec![0.0]);
    set(&mut fx.params, "proj.object.w", vec![1.0]);
    set(&mut fx.params, "proj.object.b", vec![0.0]);
    set(&mut fx.params, "inter.to_subject.w", vec![1.0, 2.0]);
    set(&mut fx.params, "inter.to_subject.b", vec![0.0]);
    set(&mut fx.params, "inter.weight.w", vec![1.0]);
    set(&mut fx.params, "inter.weight.b", vec![0.0]);
    fx.scene.objects[0].features = vec![1.0];
    fx.scene.objects[1].features = vec![0.5];
    fx.spatial = vec![vec![0.0], vec![2.0]];
    let mut tape = Tape::new();
    let g = fx.graph(&mut tape);
    let w = interactiveness_weights(&mut tape, &fx.params, &g).unwrap();
    let msg = inter_message(&mut tape, &fx.params, &g, Some(w)).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (w0, w1) = (sig(1.0), sig(2.5));
    let a0 = w0.exp() / (w0.exp() + w1.exp());
    // Candidates 2 * a0 and 3 * (1 - a0).
    let expected = (2.0 * a0).max(3.0 * (1.0 - a0));
    assert!((tape.value(msg.subjects).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn update_with_identity_and_zero_maps() {
    let mut fx = fixture(19, 2, 1, small_cfg(2, 2, 2));
    fx.scene.subjects[0].features = vec![0.5, 1.0];
    fx.scene.subjects[1].features = vec![2.0, 0.25];
    set(&mut fx.params, "proj.subject.w", identity(2));
    set(&mut fx.params, "proj.subject.b", vec![0.0, 0.0]);
    set(&mut fx.params, "update.w", identity(2));
    set(&mut fx.params, "update.b", vec![0.0, 0.0]);
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    let zero = Messages::zeros(&mut tape, &g).unwrap();
    update_nodes(&mut tape, &fx.params, &mut g, zero, zero).unwrap();
    assert_eq!(tape.value(g.h_subjects).data(), &[1.0, 2.0, 4.0, 0.5]);

    set(&mut fx.params, "update.w", vec![0.0; 4]);
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    let zero = Messages::zeros(&mut tape, &g).unwrap();
    let before = tape.value(g.h0_objects).clone();
    update_nodes(&mut tape, &fx.params, &mut g, zero, zero).unwrap();
    assert_eq!(tape.value(g.h_subjects).data(), &[0.5, 1.0, 2.0, 0.25]);
    assert_eq!(tape.value(g.h_objects), &before);
}

#[test]
fn update_matches_hand_arithmetic() {
    let fx = fixture(20, 2, 2, small_cfg(3, 4, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mi = random_rows(&mut rng, 2, 3);
    let me = random_rows(&mut rng, 2, 3);
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    let h0 = rows_of(tape.value(g.h0_subjects));
    let intra = Messages { subjects: tape.constant(rows_tensor(&mi, 3)).unwrap(), objects: zeros(&mut tape, 2, 3).unwrap() };
    let inter = Messages { subjects: tape.constant(rows_tensor(&me, 3)).unwrap(), objects: zeros(&mut tape, 2, 3).unwrap() };
    update_nodes(&mut tape, &fx.params, &mut g, intra, inter).unwrap();
    for i in 0..2 {
        let u = oracle::relu(oracle::lin(&fx.params, "update", &oracle::add3(&h0[i], &mi[i], &me[i])));
        let expected: Vec<f64> = u.iter().zip(&h0[i]).map(|(a, b)| a + b).collect();
        assert_close(tape.value(g.h_subjects).row(i), &expected, 1e-12);
    }
}

fn flag_variants() -> Vec<(Flags, bool)> {
    let base = Flags::default();
    vec![
        (base, false),
        (base, true),
        (Flags { use_intra: false, ..base }, false),
        (Flags { use_inter: false, ..base }, false),
        (Flags { use_intra_attention: false, use_interactiveness_weight: false, ..base }, false),
        (Flags::baseline(), false),
    ]
}

#[test]
fn forward_matches_oracle_for_every_variant() {
    for (seed, (n, m)) in [(1, 1), (2, 3), (3, 2), (4, 4), (1, 3), (3, 1)].into_iter().enumerate() {
        for (flags, mean_divide) in flag_variants() {
            let cfg = ModelConfig { flags, intra_mean_divide: mean_divide, ..small_cfg(4, 3, 3) };
            let fx = fixture(100 + seed as u64, n, m, cfg);
            let (tape, out) = fx.run();
            let (y, w) = oracle::forward(&fx.params, &fx.cfg, &fx.scene, &fx.spatial);
            let got = tape.value(out.y);
            for (p, row) in y.iter().enumerate() {
                assert_close(got.row(p), row, 1e-12);
            }
            match (w, out.w) {
                (Some(w), Some(node)) => assert_close(tape.value(node).data(), &w, 1e-12),
                (None, None) => {}
                other => panic!("w presence differs for {}: {:?}", flags.variant(), other.1),
            }
        }
    }
}

#[test]
fn tiny_scene_hand_trace() {
    // N = M = 1, D = 2, T = 2. With one subject and one object only the
    // inter messages are non-zero.
    let cfg = ModelConfig { flags: Flags::default(), ..small_cfg(2, 2, 1) };
    let mut fx = fixture(21, 1, 1, cfg);
    set(&mut fx.params, "proj.subject.w", identity(2));
    set(&mut fx.params, "proj.subject.b", vec![0.0, 0.0]);
    set(&mut fx.params, "proj.object.w", identity(2));
    set(&mut fx.params, "proj.object.b", vec![0.0, 0.0]);
    set(&mut fx.params, "inter.to_subject.w", vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    set(&mut fx.params, "inter.to_subject.b", vec![0.0, 0.0]);
    set(&mut fx.params, "inter.to_object.w", vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    set(&mut fx.params, "inter.to_object.b", vec![0.0, 0.0]);
    set(&mut fx.params, "update.w", vec![0.5, 0.0, 0.0, 0.5]);
    set(&mut fx.params, "update.b", vec![0.0, 0.0]);
    set(&mut fx.params, "cls.w", vec![1.0, -1.0]);
    set(&mut fx.params, "cls.b", vec![0.0]);
    fx.scene.subjects[0].features = vec![1.0, 0.0];
    fx.scene.objects[0].features = vec![0.0, 2.0];
    fx.spatial = vec![vec![0.5, 0.5]];
    // s = [.5, .5], hp = [1, 0], ho = [0, 2].
    // Round 1: Mp = relu([s0 + ho1, s1]) = [2.5, .5]; Mo = relu([hp0, hp1]) = [1, 0].
    //   hp = .5 * ([1, 0] + [2.5, .5]) + [1, 0] = [2.75, .25]
    //   ho = .5 * ([0, 2] + [1, 0]) + [0, 2] = [.5, 3]
    // Round 2: Mp = [3.5, .5]; Mo = [2.75, .25].
    //   hp = .5 * [6.25, .75] + [1, 0] = [4.125, .375]
    //   ho = .5 * [3.25, 3.25] + [0, 2] = [1.625, 3.625]
    // y = sigmoid((4.125 + 1.625 + .5) - (.375 + 3.625 + .5)) = sigmoid(1.75)
    let (tape, out) = fx.run();
    assert_close(tape.value(out.graph.h_subjects).data(), &[4.125, 0.375], 1e-12);
    assert_close(tape.value(out.graph.h_objects).data(), &[1.625, 3.625], 1e-12);
    assert!((tape.value(out.y).data()[0] - 1.0 / (1.0 + (-1.75f64).exp())).abs() < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..10 {
        for homogeneous in [HomogeneousMode::Off, HomogeneousMode::Intra, HomogeneousMode::Inter] {
            let cfg = ModelConfig { flags: Flags { homogeneous, ..Flags::default() }, ..small_cfg(4, 3, 2) };
            let fx = fixture(200 + seed, 1 + seed as usize % 4, 1 + (seed as usize / 2) % 4, cfg);
            let (tape, out) = fx.run();
            for row in out.trace.intra_rows.iter().chain(&out.trace.inter_rows) {
                let sum: f64 = tape.value(*row).data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{sum}");
            }
        }
    }
}

#[test]
fn detection_score_examples() {
    let scene = |sh: f64, so: f64| SceneInput {
        subjects: vec![Instance { bbox: bb(0.0, 0.0, 1.0, 1.0), confidence: sh, features: vec![] }],
        objects: vec![Instance { bbox: bb(0.0, 0.0, 1.0, 1.0), confidence: so, features: vec![] }],
    };
    let y = Tensor::matrix(1, 2, vec![1.0, 0.5]).unwrap();
    let s = detection_scores(&y, &scene(0.9, 0.8)).unwrap();
    assert!((s[0] - 0.72).abs() < 1e-15);
    assert_eq!(detection_scores(&y, &scene(0.0, 0.8)).unwrap(), vec![0.0, 0.0]);
    assert_eq!(detection_scores(&y, &scene(1.0, 1.0)).unwrap()[1], 0.5);
}

#[test]
fn zeroed_rounds_reduce_to_the_baseline() {
    let mut fx = fixture(22, 3, 2, small_cfg(4, 3, 3));
    set(&mut fx.params, "update.w", vec![0.0; 16]);
    set(&mut fx.params, "update.b", vec![0.0; 4]);
    let mut tape = Tape::new();
    let mut g = fx.graph(&mut tape);
    for _ in 0..fx.cfg.t {
        let zero = Messages::zeros(&mut tape, &g).unwrap();
        update_nodes(&mut tape, &fx.params, &mut g, zero, zero).unwrap();
    }
    let y = predict(&mut tape, &fx.params, &g).unwrap();
    let s = tape.constant(rows_tensor(&fx.spatial, 4)).unwrap();
    let base = baseline_classifier(&mut tape, &fx.params, &fx.cfg, &fx.scene, s).unwrap();
    assert_eq!(tape.value(y), tape.value(base));

    let cfg = ModelConfig { flags: Flags::baseline(), ..fx.cfg.clone() };
    let out = forward_encoded(&mut tape, &fx.params, &cfg, &fx.scene, s).unwrap();
    assert_eq!(tape.value(out.y), tape.value(base));
}

fn full_loss(tape: &mut Tape, out: &ForwardOutput, labels: &[f64], w_labels: &[f64]) -> Result<NodeId> {
    let ho = tape.bce(out.y, Tensor::new(tape.shape(out.y).to_vec(), labels.to_vec())?)?;
    let ho = tape.scale(ho, 6.0)?;
    match out.w {
        Some(w) => {
            let lw = tape.bce(w, Tensor::vector(w_labels.to_vec()))?;
            tape.add(ho, lw)
        }
        None => Ok(ho),
    }
}

#[test]
fn full_model_gradient_check() {
    for homogeneous in [HomogeneousMode::Off, HomogeneousMode::Intra, HomogeneousMode::Inter] {
        let cfg = ModelConfig { flags: Flags { homogeneous, ..Flags::default() }, ..small_cfg(4, 3, 3) };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = init_params(&cfg, &mut rng).unwrap();
        let scene = random_scene(&mut rng, 2, 2, 3);
        let labels: Vec<f64> = (0..12).map(|k| f64::from(k % 5 == 0)).collect();
        let w_labels = [1.0, 0.0, 0.0, 1.0];
        let report = finite_difference_check(&mut params, 1e-5, |p, tape| {
            let out = forward(tape, p, &cfg, &scene)?;
            full_loss(tape, &out, &labels, &w_labels)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{homogeneous}: {report:?}");
        assert!(report.non_finite.is_empty());
        assert!(report.checked > 200);
    }
}

fn permute<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| items[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_permutation_equivariant(
        seed in 0u64..1000,
        n in 1usize..5,
        m in 1usize..5,
        homo in 0usize..3,
        shuffle in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let homogeneous = [HomogeneousMode::Off, HomogeneousMode::Intra, HomogeneousMode::Inter][homo];
        let cfg = ModelConfig { flags: Flags { homogeneous, ..Flags::default() }, ..small_cfg(4, 3, 2) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng).unwrap();
        let scene = random_scene(&mut rng, n, m, 3);
        let mut prng = ChaCha8Rng::seed_from_u64(shuffle);
        let mut pi: Vec<usize> = (0..n).collect();
        let mut sigma: Vec<usize> = (0..m).collect();
        pi.shuffle(&mut prng);
        sigma.shuffle(&mut prng);
        let permuted = SceneInput { subjects: permute(&scene.subjects, &pi), objects: permute(&scene.objects, &sigma) };
        let mut tape = Tape::new();
        let a = forward(&mut tape, &params, &cfg, &scene).unwrap();
        let b = forward(&mut tape, &params, &cfg, &permuted).unwrap();
        let (ya, yb) = (tape.value(a.y), tape.value(b.y));
        for i in 0..n {
            for j in 0..m {
                let (ra, rb) = (ya.row(pi[i] * m + sigma[j]), yb.row(i * m + j));
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn duplicated_objects_give_equal_columns(seed in 0u64..1000, n in 1usize..4, m in 1usize..4) {
        let cfg = small_cfg(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng).unwrap();
        let mut scene = random_scene(&mut rng, n, m, 3);
        scene.objects.push(scene.objects[0].clone());
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &cfg, &scene).unwrap();
        let y = tape.value(out.y);
        for i in 0..n {
            prop_assert_eq!(y.row(i * (m + 1)), y.row(i * (m + 1) + m));
        }
    }
}
