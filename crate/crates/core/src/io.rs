//! Scene, prediction and ground-truth files, checkpoints and config text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{HoiGroundTruth, HoiPrediction};
use crate::geometry::BoundingBox;
use crate::graph::{check_params, HomogeneousMode, Instance, NodeKind, SceneInput};
use crate::math::{ParamStore, Tensor};
use crate::synth::GeneratorSpec;
use crate::train::{LabeledScene, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub kind: NodeKind,
    /// `[x1, y1, x2, y2]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub features: Vec<f64>,
}

/// Interactions of one subject-object pair; pairs not listed have none.
impl InstanceRecord {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let [x1, y1, x2, y2] = self.bbox;
        BoundingBox::new(x1, y1, x2, y2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLabel {
    pub subject: usize,
    pub object: usize,
    pub actions: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactiveness: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub instances: Vec<InstanceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<PairLabel>>,
}

fn bad(what: &'static str, detail: String) -> Error {
    Error::invalid(what, detail)
}

impl SceneFile {
    /// Checks every documented invariant; messages name the field and index.
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(bad("scene", format!("{}: width and height must be positive", self.image_id)));
        }
        let f = self.instances.first().map(|i| i.features.len());
        for (k, inst) in self.instances.iter().enumerate() {
            inst.bounding_box().map_err(|e| bad("scene", format!("instances[{k}].box: {e}")))?;
            if !(0.0..=1.0).contains(&inst.confidence) {
                return Err(bad("scene", format!("instances[{k}].confidence {} outside [0, 1]", inst.confidence)));
            }
            if Some(inst.features.len()) != f {
                return Err(bad(
                    "scene",
                    format!("instances[{k}].features has {} values, expected {}", inst.features.len(), f.unwrap_or(0)),
                ));
            }
            if let Some(p) = inst.features.iter().position(|v| !v.is_finite()) {
                return Err(bad("scene", format!("instances[{k}].features[{p}] is not finite")));
            }
        }
        let (n, m) = self.counts();
        if let Some(labels) = &self.labels {
            let a = labels.first().map(|l| l.actions.len());
            let mut seen = BTreeSet::new();
            for (k, l) in labels.iter().enumerate() {
                if l.subject >= n {
                    return Err(bad("scene", format!("labels[{k}].subject {} out of range for {n} subjects", l.subject)));
                }
                if l.object >= m {
                    return Err(bad("scene", format!("labels[{k}].object {} out of range for {m} objects", l.object)));
                }
                if Some(l.actions.len()) != a {
                    return Err(bad(
                        "scene",
                        format!("labels[{k}].actions has {} classes, expected {}", l.actions.len(), a.unwrap_or(0)),
                    ));
                }
                if !seen.insert((l.subject, l.object)) {
                    return Err(bad("scene", format!("labels[{k}] repeats pair ({}, {})", l.subject, l.object)));
                }
                if let Some(flag) = l.interactiveness {
                    if flag != l.actions.iter().any(|&x| x) {
                        return Err(bad("scene", format!("labels[{k}].interactiveness disagrees with actions")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> (usize, usize) {
        let n = self.instances.iter().filter(|i| i.kind == NodeKind::Subject).count();
        (n, self.instances.len() - n)
    }

    pub fn input(&self) -> Result<SceneInput> {
        self.validate()?;
        let mut scene = SceneInput { subjects: Vec::new(), objects: Vec::new() };
        for inst in &self.instances {
            let i = Instance { bbox: inst.bounding_box()?, confidence: inst.confidence, features: inst.features.clone() };
            match inst.kind {
                NodeKind::Subject => scene.subjects.push(i),
                NodeKind::Object => scene.objects.push(i),
            }
        }
        Ok(scene)
    }

    /// Converts to a training scene with `a` classes; files without labels
    /// are all-negative.
    pub fn to_labeled(&self, a: usize) -> Result<LabeledScene> {
        let input = self.input()?;
        let m = input.m();
        let mut labels = vec![vec![false; a]; input.pairs()];
        for (k, l) in self.labels.iter().flatten().enumerate() {
            if l.actions.len() != a {
                return Err(bad("scene", format!("labels[{k}].actions has {} classes, model has {a}", l.actions.len())));
            }
            labels[l.subject * m + l.object] = l.actions.clone();
        }
        Ok(LabeledScene { id: self.image_id.clone(), input, labels })
    }

    pub fn from_labeled(scene: &LabeledScene, width: f64, height: f64) -> SceneFile {
        let record = |kind, i: &Instance| InstanceRecord {
            kind,
            bbox: [i.bbox.x1, i.bbox.y1, i.bbox.x2, i.bbox.y2],
            confidence: i.confidence,
            features: i.features.clone(),
        };
        let mut instances: Vec<_> = scene.input.subjects.iter().map(|i| record(NodeKind::Subject, i)).collect();
        instances.extend(scene.input.objects.iter().map(|i| record(NodeKind::Object, i)));
        let m = scene.input.m();
        let labels = scene
            .labels
            .iter()
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&l| l))
            .map(|(p, row)| PairLabel {
                subject: p / m,
                object: p % m,
                actions: row.clone(),
                interactiveness: Some(true),
            })
            .collect();
        SceneFile { image_id: scene.id.clone(), width, height, instances, labels: Some(labels) }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| bad("json", format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(Box<SceneFile>),
    Many(Vec<SceneFile>),
}

/// Reads scene files from a JSON file (one scene or an array) or from every
/// `.json` file of a directory, in name order.
pub fn read_scenes(path: &Path) -> Result<Vec<SceneFile>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        entries
    } else {
        vec![path.to_path_buf()]
    };
    let mut scenes = Vec::new();
    for file in files {
        let parsed: OneOrMany = read_json(&file)?;
        let batch = match parsed {
            OneOrMany::One(s) => vec![*s],
            OneOrMany::Many(v) => v,
        };
        for s in &batch {
            s.validate().map_err(|e| Error::Scene { scene: format!("{} ({})", s.image_id, file.display()), source: Box::new(e) })?;
        }
        scenes.extend(batch);
    }
    Ok(scenes)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub predictions: Vec<HoiPrediction>,
}

/// Subject and object counts of one image, for the complexity split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub subjects: usize,
    pub objects: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub ground_truth: Vec<HoiGroundTruth>,
    #[serde(default)]
    pub images: Vec<ImageInfo>,
    /// Known-object candidate images per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_object: Option<BTreeMap<usize, BTreeSet<String>>>,
}

impl GroundTruthFile {
    pub fn from_scenes(scenes: &[LabeledScene]) -> GroundTruthFile {
        let mut file = GroundTruthFile::default();
        let mut known: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for s in scenes {
            for g in crate::eval::scene_ground_truth(s) {
                known.entry(g.class).or_default().insert(g.image_id.clone());
                file.ground_truth.push(g);
            }
            file.images.push(ImageInfo { image_id: s.id.clone(), subjects: s.input.n(), objects: s.input.m() });
        }
        file.known_object = Some(known);
        file
    }

    /// Image ids with one subject and one object.
    pub fn simple_images(&self) -> BTreeSet<String> {
        self.images.iter().filter(|i| i.subjects == 1 && i.objects == 1).map(|i| i.image_id.clone()).collect()
    }
}

/// Known-object filter: either a bare class-to-images map or a
/// ground-truth file carrying one.
pub fn read_known_object(path: &Path) -> Result<BTreeMap<usize, BTreeSet<String>>> {
    let mut value: serde_json::Value = read_json(path)?;
    if let Some(inner) = value.get_mut("known_object") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| bad("known-object filter", format!("{}: {e}", path.display())))
}

const MAGIC: &[u8; 4] = b"CHGN";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Trained parameters with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    /// Position of the shuffling generator, so training can resume.
    pub rng_word_pos: u128,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: String,
    epoch: usize,
    rng: RngState,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn variant(&self) -> String {
        self.config.model.flags.variant()
    }

    /// `CHGN`, version byte, little-endian `u32` header length, JSON header,
    /// then every tensor as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            variant: self.variant(),
            epoch: self.epoch,
            rng: RngState { seed: self.config.seed, stream: 1, word_pos: self.rng_word_pos.to_string() },
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, p)| TensorEntry { name: name.to_string(), shape: p.value.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| bad("checkpoint", "header too large".into()))?;
        let mut out = Vec::with_capacity(9 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(bad("checkpoint", "not a checkpoint file".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(bad("checkpoint", format!("version {} unsupported, expected {CHECKPOINT_VERSION}", bytes[4])));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(9..9 + len).ok_or_else(|| bad("checkpoint", "truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        header.config.validate()?;
        if header.variant != header.config.model.flags.variant() {
            return Err(bad(
                "checkpoint",
                format!("variant {} does not match its flags ({})", header.variant, header.config.model.flags.variant()),
            ));
        }
        let rng_word_pos =
            header.rng.word_pos.parse().map_err(|_| bad("checkpoint", format!("rng word_pos {:?}", header.rng.word_pos)))?;
        let mut data = bytes[9 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let needed: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if bytes.len() - 9 - len != 8 * needed {
            return Err(bad(
                "checkpoint",
                format!("{} data bytes for {needed} values", bytes.len() - 9 - len),
            ));
        }
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let numel = t.shape.iter().product();
            let values: Vec<f64> = data.by_ref().take(numel).collect();
            params.insert(t.name.clone(), Tensor::new(t.shape.clone(), values)?);
        }
        check_params(&header.config.model, &params)?;
        Ok(Checkpoint { config: header.config, epoch: header.epoch, rng_word_pos, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Invalid { what, detail } => Error::Invalid { what, detail: format!("{}: {detail}", path.display()) },
            other => other,
        })
    }
}

/// `epoch,lr,loss` lines with a header row.
pub fn loss_csv(history: &[crate::train::EpochStats]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.lr, h.loss));
    }
    out
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
fn key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", k + 1)))?;
        out.push((k + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {value:?}")))
}

/// Applies a `key = value` config text on top of `base`.
pub fn parse_train_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (line, key, value) in key_values(text)? {
        let v = value.as_str();
        let flags = &mut cfg.model.flags;
        match key.as_str() {
            "lambda" => cfg.lambda = parse_value(line, &key, v)?,
            "lr0" => cfg.lr0 = parse_value(line, &key, v)?,
            "decay" => cfg.decay = parse_value(line, &key, v)?,
            "decay_every" => cfg.decay_every = parse_value(line, &key, v)?,
            "batch_size" => cfg.batch_size = parse_value(line, &key, v)?,
            "epochs" => cfg.epochs = parse_value(line, &key, v)?,
            "seed" => cfg.seed = parse_value(line, &key, v)?,
            "momentum" => cfg.momentum = parse_value(line, &key, v)?,
            "d" => cfg.model.d = parse_value(line, &key, v)?,
            "f" => cfg.model.f = parse_value(line, &key, v)?,
            "a" => cfg.model.a = parse_value(line, &key, v)?,
            "t" => cfg.model.t = parse_value(line, &key, v)?,
            "intra_mean_divide" => cfg.model.intra_mean_divide = parse_value(line, &key, v)?,
            "spatial_channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse_value(line, &key, p.trim())).collect::<Result<_>>()?;
                cfg.model.spatial.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("line {line}: spatial_channels needs three values")))?;
            }
            "use_intra" => flags.use_intra = parse_value(line, &key, v)?,
            "use_inter" => flags.use_inter = parse_value(line, &key, v)?,
            "use_intra_attention" => flags.use_intra_attention = parse_value(line, &key, v)?,
            "use_interactiveness_weight" => flags.use_interactiveness_weight = parse_value(line, &key, v)?,
            "homogeneous" => flags.homogeneous = v.parse::<HomogeneousMode>()?,
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The config as `key = value` text that [`parse_train_config`] reads back.
pub fn format_train_config(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let f = &m.flags;
    let c = m.spatial.channels;
    let lines = [
        format!("lambda = {}", cfg.lambda),
        format!("lr0 = {}", cfg.lr0),
        format!("decay = {}", cfg.decay),
        format!("decay_every = {}", cfg.decay_every),
        format!("batch_size = {}", cfg.batch_size),
        format!("epochs = {}", cfg.epochs),
        format!("seed = {}", cfg.seed),
        format!("momentum = {}", cfg.momentum),
        format!("d = {}", m.d),
        format!("f = {}", m.f),
        format!("a = {}", m.a),
        format!("t = {}", m.t),
        format!("intra_mean_divide = {}", m.intra_mean_divide),
        format!("spatial_channels = {},{},{}", c[0], c[1], c[2]),
        format!("use_intra = {}", f.use_intra),
        format!("use_inter = {}", f.use_inter),
        format!("use_intra_attention = {}", f.use_intra_attention),
        format!("use_interactiveness_weight = {}", f.use_interactiveness_weight),
        format!("homogeneous = {}", f.homogeneous),
    ];
    lines.join("\n") + "\n"
}

/// Parses `n=200,sigma=0.05` (commas or whitespace) into a scene count and
/// generator settings on top of the defaults.
pub fn parse_synth_spec(text: &str) -> Result<(usize, GeneratorSpec)> {
    let mut spec = GeneratorSpec::default();
    let mut count = 500;
    let joined = text.split([',', ' ']).filter(|s| !s.is_empty()).collect::<Vec<_>>().join("\n");
    for (_, key, value) in key_values(&joined)? {
        let v = value.as_str();
        let num = |v: &str| -> Result<f64> { v.parse().map_err(|_| Error::Config(format!("synth {key}: cannot parse {v:?}"))) };
        let int = |v: &str| -> Result<usize> { v.parse().map_err(|_| Error::Config(format!("synth {key}: cannot parse {v:?}"))) };
        match key.as_str() {
            "n" => count = int(v)?,
            "a" => spec.a = int(v)?,
            "f" => spec.f = int(v)?,
            "sigma" => spec.sigma = num(v)?,
            "teams" => spec.teams = int(v)?,
            "simple_fraction" => spec.simple_fraction = num(v)?,
            "crowd_fraction" => spec.crowd_fraction = num(v)?,
            "occlusion" => spec.occlusion = num(v)?,
            "bystander" => spec.bystander = num(v)?,
            "code_scale" => spec.code_scale = num(v)?,
            "in_relation" => spec.in_relation = num(v)?,
            "shared_target" => spec.shared_target = num(v)?,
            other => return Err(Error::Config(format!("unknown synth key {other:?}"))),
        }
    }
    spec.validate()?;
    Ok((count, spec))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{init_params, ModelConfig};
    use crate::synth::generate_synthetic_scenes;

    fn scene_json() -> serde_json::Value {
        serde_json::json!({
            "image_id": "img-1",
            "width": 640.0,
            "height": 480.0,
            "instances": [
                {"kind": "subject", "box": [10.0, 10.0, 50.0, 120.0], "confidence": 0.9, "features": [1.0, 0.0, 0.5]},
                {"kind": "object", "box": [60.0, 40.0, 90.0, 70.0], "confidence": 0.8, "features": [0.0, 1.0, 0.0]},
                {"kind": "object", "box": [5.0, 5.0, 20.0, 20.0], "confidence": 0.7, "features": [0.2, 0.0, 1.0]}
            ],
            "labels": [{"subject": 0, "object": 1, "actions": [false, true]}]
        })
    }

    fn parse(v: serde_json::Value) -> Result<SceneFile> {
        let s: SceneFile = serde_json::from_value(v)?;
        s.validate()?;
        Ok(s)
    }

    #[test]
    fn scene_file_converts_to_labels() {
        let s = parse(scene_json()).unwrap();
        let l = s.to_labeled(2).unwrap();
        assert_eq!((l.input.n(), l.input.m()), (1, 2));
        assert_eq!(l.labels, vec![vec![false, false], vec![false, true]]);
        assert_eq!(l.interactiveness(), vec![0.0, 1.0]);
        let back = SceneFile::from_labeled(&l, 640.0, 480.0);
        assert_eq!(back.to_labeled(2).unwrap(), l);
    }

    #[test]
    fn scene_violations_name_field_and_index() {
        let cases: Vec<(fn(&mut serde_json::Value), &str)> = vec![
            (|v| v["instances"][2]["features"] = serde_json::json!([1.0]), "instances[2].features"),
            (|v| v["instances"][1]["box"] = serde_json::json!([90.0, 40.0, 60.0, 70.0]), "instances[1].box"),
            (|v| v["instances"][0]["confidence"] = serde_json::json!(1.5), "instances[0].confidence"),
            (|v| v["labels"][0]["subject"] = serde_json::json!(3), "labels[0].subject"),
            (|v| v["labels"][0]["object"] = serde_json::json!(2), "labels[0].object"),
            (|v| v["labels"][0]["interactiveness"] = serde_json::json!(false), "labels[0].interactiveness"),
            (
                |v| v["labels"] = serde_json::json!([{"subject": 0, "object": 1, "actions": [true, false]}, {"subject": 0, "object": 1, "actions": [true, false]}]),
                "labels[1] repeats",
            ),
            (
                |v| v["labels"] = serde_json::json!([{"subject": 0, "object": 1, "actions": [true]}, {"subject": 0, "object": 0, "actions": [true, false]}]),
                "labels[1].actions",
            ),
        ];
        for (edit, needle) in cases {
            let mut v = scene_json();
            edit(&mut v);
            let err = parse(v).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn scene_without_objects_is_valid() {
        let mut v = scene_json();
        v["instances"] = serde_json::json!([v["instances"][0].clone()]);
        v["labels"] = serde_json::Value::Null;
        let s = parse(v).unwrap();
        assert_eq!(s.to_labeled(2).unwrap().labels.len(), 0);
    }

    #[test]
    fn read_scenes_accepts_files_arrays_and_directories() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("b.json");
        fs::write(&one, scene_json().to_string()).unwrap();
        let mut second = scene_json();
        second["image_id"] = "img-2".into();
        fs::write(dir.path().join("a.json"), serde_json::json!([second]).to_string()).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        assert_eq!(read_scenes(&one).unwrap().len(), 1);
        let all = read_scenes(dir.path()).unwrap();
        assert_eq!(all.iter().map(|s| s.image_id.as_str()).collect::<Vec<_>>(), ["img-2", "img-1"]);
        let err = read_scenes(&dir.path().join("missing.json")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn checkpoint(seed: u64) -> Checkpoint {
        let mut config = TrainConfig { seed, ..TrainConfig::default() };
        config.model = ModelConfig { d: 8, spatial: crate::spatial::SpatialConfig { channels: [2, 3, 2] }, ..ModelConfig::default() };
        let params = init_params(&config.model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        Checkpoint { config, epoch: 7, rng_word_pos: 123_456_789_012_345_678_901_234_567, params }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ck = checkpoint(3);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.chk");
        ck.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn checkpoint_header_echoes_config_and_variant() {
        let bytes = checkpoint(1).to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(header["variant"], "full");
        assert_eq!(header["config"]["lambda"], 6.0);
        assert_eq!(header["config"]["model"]["t"], 2);
        assert_eq!(header["epoch"], 7);
        assert_eq!(bytes[4], CHECKPOINT_VERSION);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = checkpoint(2).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        assert!(Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string().contains("version 99"));
        // A checkpoint whose tensors disagree with its config.
        let mut ck = checkpoint(2);
        ck.config.model.d = 9;
        assert!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.model.flags.homogeneous = HomogeneousMode::Inter;
        cfg.model.spatial.channels = [4, 8, 8];
        cfg.lr0 = 0.2;
        let text = format_train_config(&cfg);
        assert_eq!(parse_train_config(&text, TrainConfig::default()).unwrap(), cfg);
    }

    #[test]
    fn default_config_echo_has_published_values() {
        let text = format_train_config(&TrainConfig::default());
        for line in ["lambda = 6", "t = 2", "lr0 = 0.001", "decay = 0.6", "decay_every = 10", "batch_size = 4", "epochs = 40"] {
            assert!(text.lines().any(|l| l == line), "missing {line} in\n{text}");
        }
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        let err = parse_train_config("# comment\nlambda = 6\nbogus = 1\n", TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_train_config("\nepochs = many\n", TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_train_config("lambda = 0", TrainConfig::default()).is_err());
        assert!(parse_train_config("homogeneous = both", TrainConfig::default()).is_err());
    }

    #[test]
    fn synth_spec_parses() {
        let (n, spec) = parse_synth_spec("n=200,sigma=0.05 a=3").unwrap();
        assert_eq!((n, spec.sigma, spec.a), (200, 0.05, 3));
        assert!(parse_synth_spec("n=10,a=1").is_err());
        assert!(parse_synth_spec("colour=red").is_err());
    }

    #[test]
    fn ground_truth_file_from_scenes() {
        let scenes = generate_synthetic_scenes(40, 5, &GeneratorSpec::default()).unwrap();
        let gt = GroundTruthFile::from_scenes(&scenes);
        assert_eq!(gt.images.len(), 40);
        let positives: usize = scenes.iter().map(|s| s.labels.iter().flatten().filter(|&&l| l).count()).sum();
        assert_eq!(gt.ground_truth.len(), positives);
        let simple = gt.simple_images();
        assert_eq!(simple.len(), scenes.iter().filter(|s| s.input.n() == 1 && s.input.m() == 1).count());
        let text = serde_json::to_string(&gt).unwrap();
        assert_eq!(serde_json::from_str::<GroundTruthFile>(&text).unwrap(), gt);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        write_json(&path, &gt).unwrap();
        assert_eq!(read_known_object(&path).unwrap(), gt.known_object.clone().unwrap());
    }
}
