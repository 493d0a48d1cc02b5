//! Pairwise spatial configuration maps and the convolutional encoder that
//! turns them into feature vectors.
//!
//! A map has two binary channels (human footprint, object footprint) drawn
//! in a square frame around the union of the two boxes, so the map depends
//! only on the pair's relative geometry.

use std::borrow::Borrow;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::math::{Activation, NodeId, ParamStore, Tape, Tensor};

pub const MAP_SIZE: usize = 64;
const CHANNEL: usize = MAP_SIZE * MAP_SIZE;

/// 2 x 64 x 64 binary raster: channel 0 is the human, channel 1 the object.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * CHANNEL..(c + 1) * CHANNEL]
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[channel * CHANNEL + row * MAP_SIZE + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![2, MAP_SIZE, MAP_SIZE], self.data.clone()).expect("fixed map shape")
    }

    /// Binary PGM with the two channels side by side.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", 2 * MAP_SIZE, MAP_SIZE)?;
        let mut row = Vec::with_capacity(2 * MAP_SIZE);
        for r in 0..MAP_SIZE {
            row.clear();
            for c in 0..2 {
                row.extend((0..MAP_SIZE).map(|col| if self.at(c, r, col) > 0.0 { 255u8 } else { 0 }));
            }
            out.write_all(&row)?;
        }
        Ok(())
    }
}

fn rasterize(channel: &mut [f64], b: &BoundingBox, fx: f64, fy: f64, side: f64) {
    let cells = MAP_SIZE as f64;
    let (u1, u2) = ((b.x1 - fx) / side * cells, (b.x2 - fx) / side * cells);
    let (v1, v2) = ((b.y1 - fy) / side * cells, (b.y2 - fy) / side * cells);
    let inside = |lo: f64, hi: f64, i: usize| {
        let center = i as f64 + 0.5;
        lo <= center && center < hi
    };
    let mut any = false;
    for r in 0..MAP_SIZE {
        if !inside(v1, v2, r) {
            continue;
        }
        for c in 0..MAP_SIZE {
            if inside(u1, u2, c) {
                channel[r * MAP_SIZE + c] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        // Boxes thinner than a cell still mark the cell holding their center.
        let r = (((v1 + v2) / 2.0).floor().max(0.0) as usize).min(MAP_SIZE - 1);
        let c = (((u1 + u2) / 2.0).floor().max(0.0) as usize).min(MAP_SIZE - 1);
        channel[r * MAP_SIZE + c] = 1.0;
    }
}

/// Rasterizes a human-object pair. The frame is the union box expanded to a
/// square about its center; a cell is set iff its center lies in the box
/// (half-open on the far edges).
pub fn build_spatial_map(human: &BoundingBox, object: &BoundingBox) -> Result<SpatialMap> {
    human.validate()?;
    object.validate()?;
    let frame = human.union(object);
    let side = frame.width().max(frame.height());
    if !(side > 0.0) || frame.area() <= 0.0 {
        return Err(Error::domain("build_spatial_map", "union frame has zero area"));
    }
    let (cx, cy) = frame.center();
    let (fx, fy) = (cx - side / 2.0, cy - side / 2.0);
    let mut data = vec![0.0; 2 * CHANNEL];
    let (h, o) = data.split_at_mut(CHANNEL);
    rasterize(h, human, fx, fy, side);
    rasterize(o, object, fx, fy, side);
    Ok(SpatialMap { data })
}

/// Channel widths of the three convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub channels: [usize; 3],
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig { channels: [16, 32, 32] }
    }
}

struct ConvLayer {
    name: &'static str,
    kernel: usize,
    stride: usize,
    pad: usize,
}

const LAYERS: [ConvLayer; 3] = [
    ConvLayer { name: "spatial.conv1", kernel: 5, stride: 2, pad: 2 },
    ConvLayer { name: "spatial.conv2", kernel: 5, stride: 2, pad: 2 },
    ConvLayer { name: "spatial.conv3", kernel: 3, stride: 1, pad: 1 },
];
const POOL: usize = 2;
const FC: &str = "spatial.fc";

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!("spatial channels must be positive, got {:?}", self.channels)));
        }
        Ok(())
    }

    /// Side of the pooled feature map.
    fn pooled_side(&self) -> usize {
        let mut side = MAP_SIZE;
        for l in &LAYERS {
            side = (side + 2 * l.pad - l.kernel) / l.stride + 1;
        }
        side / POOL
    }

    pub fn flat_features(&self) -> usize {
        let s = self.pooled_side();
        self.channels[2] * s * s
    }

    /// Expected `(name, shape)` of every encoder parameter for output size `d`.
    pub fn param_shapes(&self, d: usize) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c_in = 2;
        for (l, &c_out) in LAYERS.iter().zip(&self.channels) {
            shapes.push((format!("{}.w", l.name), vec![c_out, c_in, l.kernel, l.kernel]));
            shapes.push((format!("{}.b", l.name), vec![c_out]));
            c_in = c_out;
        }
        shapes.push((format!("{FC}.w"), vec![d, self.flat_features()]));
        shapes.push((format!("{FC}.b"), vec![d]));
        shapes
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, d: usize, rng: &mut R) {
        for (name, shape) in self.param_shapes(d) {
            let fan_in = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else if name.ends_with(".w") {
                shape[1]
            } else {
                // Biases share the fan-in of their weight.
                let w = store.value(&name.replace(".b", ".w")).expect("weights precede biases").shape().to_vec();
                w[1..].iter().product()
            };
            store.insert_uniform(name, &shape, fan_in, rng);
        }
    }
}

/// Encodes a batch of maps into a `[maps.len(), d]` feature matrix, where
/// `d` is the output size of `spatial.fc`.
pub fn encode_spatial_batch<M: Borrow<SpatialMap>>(
    tape: &mut Tape,
    params: &ParamStore,
    config: &SpatialConfig,
    maps: &[M],
) -> Result<NodeId> {
    let d = params.value(&format!("{FC}.w"))?.shape()[0];
    if maps.is_empty() {
        return tape.constant(Tensor::zeros(&[0, d]));
    }
    let mut data = Vec::with_capacity(maps.len() * 2 * CHANNEL);
    for m in maps {
        data.extend_from_slice(&m.borrow().data);
    }
    let mut x = tape.constant(Tensor::new(vec![maps.len(), 2, MAP_SIZE, MAP_SIZE], data)?)?;
    for (l, &c_out) in LAYERS.iter().zip(&config.channels) {
        let w = tape.param(params, &format!("{}.w", l.name))?;
        if tape.shape(w)[0] != c_out {
            return Err(Error::shape(
                "encode_spatial",
                format!("{} has {} filters, config expects {c_out}", l.name, tape.shape(w)[0]),
            ));
        }
        let b = tape.param(params, &format!("{}.b", l.name))?;
        let conv = tape.conv2d(x, w, Some(b), l.stride, l.pad)?;
        x = tape.relu(conv)?;
    }
    let pooled = tape.max_pool2d(x, POOL)?;
    let flat = tape.reshape(pooled, &[maps.len(), config.flat_features()])?;
    let w = tape.param(params, &format!("{FC}.w"))?;
    let b = tape.param(params, &format!("{FC}.b"))?;
    tape.linear_map(flat, w, b, Activation::Identity)
}

/// Encodes one map into a length-`d` vector.
pub fn encode_spatial(tape: &mut Tape, params: &ParamStore, config: &SpatialConfig, map: &SpatialMap) -> Result<NodeId> {
    let batch = encode_spatial_batch(tape, params, config, std::slice::from_ref(map))?;
    tape.row(batch, 0)
}
