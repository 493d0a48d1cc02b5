//! Planted-rule synthetic scenes.
//!
//! Class `a` holds between a subject and an object iff the subject intends
//! `a` and either the object is the target type of `a` sitting in the
//! relation assigned to `a` (overlapping, left, right or above), or the
//! object is an `a` cue held at the subject's hand. Intent is visible in the
//! subject features unless the subject is occluded; then it can only be
//! inferred from context:
//!
//! * crowd scenes: a team around the target shares one intent; occluded
//!   members must look at the visible teammate, not at a bystander who
//!   stands apart with another intent.
//! * holder scenes: two subjects, each possibly holding a cue whose type
//!   reveals its intent; they may share one target, so a cue has to be
//!   bound to the hand that holds it.
//! * simple scenes: one subject, one object, nothing hidden.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::graph::{Instance, SceneInput};
use crate::train::LabeledScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Overlapping,
    Left,
    Right,
    Above,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Overlapping, Relation::Left, Relation::Right, Relation::Above];

    pub fn for_class(a: usize) -> Relation {
        Relation::ALL[a % 4]
    }
}

/// Where `object` lies relative to `subject`, if anywhere in particular.
pub fn relation_of(subject: &BoundingBox, object: &BoundingBox) -> Option<Relation> {
    let inter = subject.intersection_area(object);
    if inter >= 0.5 * object.area().min(subject.area()) {
        return Some(Relation::Overlapping);
    }
    let v_overlap = (subject.y2.min(object.y2) - subject.y1.max(object.y1)).max(0.0);
    let h_overlap = (subject.x2.min(object.x2) - subject.x1.max(object.x1)).max(0.0);
    let beside = v_overlap >= 0.5 * object.height().min(subject.height());
    let stacked = h_overlap >= 0.5 * object.width().min(subject.width());
    let near_x = subject.width();
    let near_y = 0.5 * subject.height();
    if beside && object.x2 <= subject.x1 && subject.x1 - object.x2 <= near_x {
        Some(Relation::Left)
    } else if beside && object.x1 >= subject.x2 && object.x1 - subject.x2 <= near_x {
        Some(Relation::Right)
    } else if stacked && object.y2 <= subject.y1 && subject.y1 - object.y2 <= near_y {
        Some(Relation::Above)
    } else {
        None
    }
}

/// Point where a subject holds a cue object.
pub fn hand_point(subject: &BoundingBox) -> (f64, f64) {
    (subject.x1 + 0.5 * subject.width(), subject.y1 + 0.6 * subject.height())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Action classes.
    pub a: usize,
    /// Feature length.
    pub f: usize,
    /// Standard deviation of the feature noise.
    pub sigma: f64,
    /// Size of the team-code palette.
    pub teams: usize,
    pub simple_fraction: f64,
    /// Share of crowd scenes among the non-simple ones.
    pub crowd_fraction: f64,
    /// Probability that an eligible subject is occluded.
    pub occlusion: f64,
    /// Magnitude of the team code in subject features.
    pub code_scale: f64,
    /// Probability that a crowd scene has a bystander.
    pub bystander: f64,
    /// Probability that a subject is placed in the planted relation to the
    /// scene's target.
    pub in_relation: f64,
    /// Probability that the two holders of a holder scene share one target.
    pub shared_target: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            a: 4,
            f: 16,
            sigma: 0.1,
            teams: 6,
            simple_fraction: 0.2,
            crowd_fraction: 0.5,
            occlusion: 0.7,
            bystander: 0.5,
            code_scale: 5.0,
            in_relation: 0.85,
            shared_target: 0.5,
            width: 800.0,
            height: 600.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.a < 2 {
            return Err(Error::Config(format!("generator needs at least 2 classes, got {}", self.a)));
        }
        if self.f < 4 || self.f < self.subject_dims() || self.f < self.object_dims() {
            return Err(Error::Config(format!(
                "generator needs f >= {} for a={} and {} team codes, got {}",
                self.subject_dims().max(self.object_dims()).max(4),
                self.a,
                self.teams,
                self.f
            )));
        }
        if self.teams < 2 {
            return Err(Error::Config("generator needs at least 2 team codes".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        for (name, p) in [
            ("simple_fraction", self.simple_fraction),
            ("crowd_fraction", self.crowd_fraction),
            ("occlusion", self.occlusion),
            ("bystander", self.bystander),
            ("in_relation", self.in_relation),
            ("shared_target", self.shared_target),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.width < 400.0 || self.height < 400.0 {
            return Err(Error::Config("canvas must be at least 400x400".into()));
        }
        Ok(())
    }

    /// Intent one-hot (classes plus "none"), then the team code.
    fn subject_dims(&self) -> usize {
        self.a + 1 + self.teams
    }

    /// Targets, cues, distractor.
    fn object_dims(&self) -> usize {
        2 * self.a + 1
    }

    pub fn team_offset(&self) -> usize {
        self.a + 1
    }
}

/// Object categories of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    Target(usize),
    Cue(usize),
    Distractor,
}

impl ObjectKind {
    pub fn index(self, a: usize) -> usize {
        match self {
            ObjectKind::Target(k) => k,
            ObjectKind::Cue(k) => a + k,
            ObjectKind::Distractor => 2 * a,
        }
    }
}

/// Latent variables behind a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub intents: Vec<Option<usize>>,
    pub occluded: Vec<bool>,
    pub teams: Vec<usize>,
    pub kinds: Vec<ObjectKind>,
}

struct Builder<'a> {
    spec: &'a GeneratorSpec,
    rng: &'a mut ChaCha8Rng,
    subjects: Vec<BoundingBox>,
    objects: Vec<BoundingBox>,
    latent: Latent,
}

impl Builder<'_> {
    fn subject_box(&mut self) -> (f64, f64) {
        (self.rng.random_range(50.0..70.0), self.rng.random_range(120.0..160.0))
    }

    fn object_box(&mut self, cx: f64, cy: f64, size: f64) -> BoundingBox {
        let half = 0.5 * size;
        BoundingBox { x1: cx - half, y1: cy - half, x2: cx + half, y2: cy + half }
    }

    /// A target near the middle of the canvas.
    fn target(&mut self, kind: ObjectKind) -> BoundingBox {
        let cx = self.rng.random_range(0.4..0.6) * self.spec.width;
        self.target_at(kind, cx)
    }

    fn target_at(&mut self, kind: ObjectKind, cx: f64) -> BoundingBox {
        let cy = self.rng.random_range(0.45..0.6) * self.spec.height;
        let size = self.rng.random_range(36.0..48.0);
        let b = self.object_box(cx, cy, size);
        self.push_object(b, kind);
        b
    }

    /// A subject box such that `target` lies in `relation` to it, or, for
    /// `None`, somewhere unrelated.
    fn subject_near(&mut self, target: &BoundingBox, relation: Option<Relation>) -> BoundingBox {
        loop {
            let (w, h) = self.subject_box();
            let (tx, ty) = target.center();
            let along = self.rng.random_range(0.3..0.7);
            let gap = self.rng.random_range(2.0..0.6 * w);
            let (x1, y1) = match relation {
                Some(Relation::Overlapping) => (tx - self.rng.random_range(0.3..0.7) * w, ty - along * h),
                Some(Relation::Left) => (target.x2 + gap, ty - along * h),
                Some(Relation::Right) => (target.x1 - gap - w, ty - along * h),
                Some(Relation::Above) => {
                    (tx - self.rng.random_range(0.3..0.7) * w, target.y2 + self.rng.random_range(2.0..0.3 * h))
                }
                None => {
                    let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
                    let dist = self.rng.random_range(1.6..2.4) * h;
                    (tx + dist * angle.cos() - 0.5 * w, ty + dist * angle.sin() - 0.5 * h)
                }
            };
            let b = BoundingBox { x1, y1, x2: x1 + w, y2: y1 + h };
            if b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= self.spec.width && b.y2 <= self.spec.height && relation_of(&b, target) == relation {
                return b;
            }
        }
    }

    /// Either the planted relation or, with the complementary probability,
    /// a different one or none.
    fn placement(&mut self, planted: Relation) -> Option<Relation> {
        if self.rng.random_bool(self.spec.in_relation) {
            return Some(planted);
        }
        let others: Vec<Option<Relation>> =
            Relation::ALL.iter().filter(|&&r| r != planted).map(|&r| Some(r)).chain([None, None]).collect();
        *others.choose(self.rng).expect("non-empty")
    }

    fn push_object(&mut self, b: BoundingBox, kind: ObjectKind) {
        self.objects.push(b);
        self.latent.kinds.push(kind);
    }

    fn push_subject(&mut self, b: BoundingBox, intent: Option<usize>, occluded: bool, team: usize) {
        self.subjects.push(b);
        self.latent.intents.push(intent);
        self.latent.occluded.push(occluded);
        self.latent.teams.push(team);
    }

    fn other_class(&mut self, not: usize) -> usize {
        let k = self.rng.random_range(0..self.spec.a - 1);
        if k >= not {
            k + 1
        } else {
            k
        }
    }

    /// Distractors or targets of random type anywhere on the canvas.
    fn filler_objects(&mut self, count: usize) {
        for _ in 0..count {
            let kind = if self.rng.random_bool(0.5) {
                ObjectKind::Distractor
            } else {
                ObjectKind::Target(self.rng.random_range(0..self.spec.a))
            };
            let size = self.rng.random_range(30.0..48.0);
            // Keep clear of every subject so the filler is unrelated to all.
            for _ in 0..100 {
                let cx = self.rng.random_range(30.0..self.spec.width - 30.0);
                let cy = self.rng.random_range(30.0..self.spec.height - 30.0);
                let b = self.object_box(cx, cy, size);
                let margin = BoundingBox { x1: b.x1 - 90.0, y1: b.y1 - 90.0, x2: b.x2 + 90.0, y2: b.y2 + 90.0 };
                if self.subjects.iter().all(|s| s.intersection_area(&margin) == 0.0) {
                    self.push_object(b, kind);
                    break;
                }
            }
        }
    }

    fn simple(&mut self) {
        let t = self.rng.random_range(0..self.spec.a);
        let kind = if self.rng.random_bool(0.9) { ObjectKind::Target(t) } else { ObjectKind::Distractor };
        let target = self.target(kind);
        let intent = if self.rng.random_bool(0.9) {
            Some(if self.rng.random_bool(0.8) { t } else { self.other_class(t) })
        } else {
            None
        };
        let rel = self.placement(Relation::for_class(t));
        let b = self.subject_near(&target, rel);
        let team = self.rng.random_range(0..self.spec.teams);
        self.push_subject(b, intent, false, team);
    }

    /// One team around the target, optionally watched by a bystander who
    /// stands apart and intends something else.
    fn crowd(&mut self) {
        let t = self.rng.random_range(0..self.spec.a);
        let target = self.target(ObjectKind::Target(t));
        let bystander = self.rng.random_bool(self.spec.bystander);
        let size = if bystander { self.rng.random_range(2..=3) } else { self.rng.random_range(2..=4) };
        let mut codes: Vec<usize> = (0..self.spec.teams).collect();
        codes.shuffle(self.rng);
        let mut intents = [t, self.other_class(t)];
        intents.shuffle(self.rng);
        // Occlusion hides every member but one.
        let visible = self.rng.random_bool(self.spec.occlusion).then(|| self.rng.random_range(0..size));
        for member in 0..size {
            let rel = self.placement(Relation::for_class(t));
            let b = self.subject_near(&target, rel);
            let hidden = visible.is_some_and(|v| v != member);
            self.push_subject(b, Some(intents[0]), hidden, codes[0]);
        }
        if bystander {
            let b = self.subject_near(&target, None);
            self.push_subject(b, Some(intents[1]), false, codes[1]);
        }
        let extra = self.rng.random_range(0..=3);
        self.filler_objects(extra);
    }

    /// Two subjects on opposite halves of the canvas, each with its own
    /// target.
    fn holders(&mut self) -> bool {
        let mut codes: Vec<usize> = (0..self.spec.teams).collect();
        codes.shuffle(self.rng);
        let mut cues = Vec::new();
        let shared = self.rng.random_bool(self.spec.shared_target);
        let common = if shared {
            let t = self.rng.random_range(0..self.spec.a);
            Some((t, self.target(ObjectKind::Target(t))))
        } else {
            None
        };
        for (side, code) in codes.into_iter().take(2).enumerate() {
            let (t, target) = match common {
                Some(c) => c,
                None => {
                    let t = self.rng.random_range(0..self.spec.a);
                    let cx = (0.25 + 0.5 * side as f64 + self.rng.random_range(-0.05..0.05)) * self.spec.width;
                    (t, self.target_at(ObjectKind::Target(t), cx))
                }
            };
            let intent = if self.rng.random_bool(0.5) { t } else { self.other_class(t) };
            let occluded = self.rng.random_bool(self.spec.occlusion);
            let rel = self.placement(Relation::for_class(t));
            let b = self.subject_near(&target, rel);
            self.push_subject(b, Some(intent), occluded, code);
            if occluded || self.rng.random_bool(0.2) {
                cues.push((b, intent));
            }
        }
        for &(holder, intent) in &cues {
            let (hx, hy) = hand_point(&holder);
            let cue = self.object_box(hx, hy, 24.0);
            self.push_object(cue, ObjectKind::Cue(intent));
        }
        if self.objects.len() < 4 && self.rng.random_bool(0.5) {
            self.filler_objects(1);
        }
        // A cue touches its holder only.
        let subjects = self.subjects.clone();
        cues.iter().all(|(holder, _)| {
            let (hx, hy) = hand_point(holder);
            let cue = BoundingBox { x1: hx - 12.0, y1: hy - 12.0, x2: hx + 12.0, y2: hy + 12.0 };
            subjects.iter().filter(|s| *s != holder).all(|s| s.intersection_area(&cue) == 0.0)
        })
    }
}

/// Ground truth implied by the latent variables and the boxes.
pub fn planted_labels(subjects: &[BoundingBox], objects: &[BoundingBox], latent: &Latent, a: usize) -> Vec<Vec<bool>> {
    let mut labels = Vec::with_capacity(subjects.len() * objects.len());
    for (s, intent) in subjects.iter().zip(&latent.intents) {
        for (o, kind) in objects.iter().zip(&latent.kinds) {
            let rel = relation_of(s, o);
            let (hx, hy) = hand_point(s);
            let held = o.x1 <= hx && hx <= o.x2 && o.y1 <= hy && hy <= o.y2;
            labels.push(
                (0..a)
                    .map(|c| {
                        *intent == Some(c)
                            && ((*kind == ObjectKind::Target(c) && rel == Some(Relation::for_class(c)))
                                || (*kind == ObjectKind::Cue(c) && held))
                    })
                    .collect(),
            );
        }
    }
    labels
}

fn features(spec: &GeneratorSpec, hot: &[(usize, f64)], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..spec.f).map(|_| if spec.sigma > 0.0 { noise.sample(rng) } else { 0.0 }).collect();
    for &(k, value) in hot {
        v[k] += value;
    }
    v
}

/// One scene with its latent variables.
pub fn generate_scene(id: String, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<(LabeledScene, Latent)> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut b = loop {
        let empty = Latent { intents: vec![], occluded: vec![], teams: vec![], kinds: vec![] };
        let mut b = Builder { spec, rng: &mut *rng, subjects: vec![], objects: vec![], latent: empty };
        let roll: f64 = b.rng.random();
        let ok = if roll < spec.simple_fraction {
            b.simple();
            true
        } else if b.rng.random_bool(spec.crowd_fraction) {
            b.crowd();
            true
        } else {
            b.holders()
        };
        if ok {
            break b;
        }
    };
    let mut order: Vec<usize> = (0..b.objects.len()).collect();
    order.shuffle(b.rng);
    b.objects = order.iter().map(|&k| b.objects[k]).collect();
    b.latent.kinds = order.iter().map(|&k| b.latent.kinds[k]).collect();

    let Builder { subjects, objects, latent, rng, .. } = b;
    let mut input = SceneInput { subjects: Vec::new(), objects: Vec::new() };
    for (k, bbox) in subjects.iter().enumerate() {
        let mut hot = vec![(spec.team_offset() + latent.teams[k], spec.code_scale)];
        if !latent.occluded[k] {
            hot.push((latent.intents[k].unwrap_or(spec.a), 1.0));
        }
        let confidence = rng.random_range(0.9..=1.0);
        input.subjects.push(Instance { bbox: *bbox, confidence, features: features(spec, &hot, &noise, rng) });
    }
    for (bbox, kind) in objects.iter().zip(&latent.kinds) {
        let confidence = rng.random_range(0.9..=1.0);
        let f = features(spec, &[(kind.index(spec.a), 1.0)], &noise, rng);
        input.objects.push(Instance { bbox: *bbox, confidence, features: f });
    }
    let labels = planted_labels(&subjects, &objects, &latent, spec.a);
    Ok((LabeledScene { id, input, labels }, latent))
}

pub fn generate_synthetic_scenes(count: usize, seed: u64, spec: &GeneratorSpec) -> Result<Vec<LabeledScene>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|k| generate_scene(format!("synth-{seed}-{k}"), spec, &mut rng).map(|(s, _)| s)).collect()
}

/// Unstructured scene: uniform boxes on a `size` canvas, uniform features in
/// `[-1, 1)` and independent random labels.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, f: usize, a: usize, size: f64) -> LabeledScene {
    let instance = |rng: &mut R| {
        let x = rng.random_range(0.0..size * 0.8);
        let y = rng.random_range(0.0..size * 0.8);
        let w = rng.random_range(size * 0.05..size * 0.2);
        let h = rng.random_range(size * 0.05..size * 0.2);
        Instance {
            bbox: BoundingBox { x1: x, y1: y, x2: x + w, y2: y + h },
            confidence: rng.random_range(0.5..1.0),
            features: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    };
    let subjects = (0..n).map(|_| instance(rng)).collect();
    let objects = (0..m).map(|_| instance(rng)).collect();
    let labels = (0..n * m).map(|_| (0..a).map(|_| rng.random_bool(0.3)).collect()).collect();
    LabeledScene { id: "random".into(), input: SceneInput { subjects, objects }, labels }
}
