//! Two small, structurally different segmentation networks.
//!
//! `ConvNet` is a three-stage encoder-decoder with skip connections.
//! `Mixer` cuts the slice into 4x4 patches and alternates token-mixing and
//! channel-mixing MLPs, so every location sees the whole slice after one
//! block; a light convolutional refinement restores pixel detail.
//! Both expose per-class logits at input resolution and unit-length
//! projected features on the stride-4 grid.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::{seeding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Convnet,
    Mixer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Convnet: width of each stage. Mixer: `[token dim, token-mix hidden,
    /// channel-mix hidden, refinement width]`.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Square input side; must be divisible by `feature_stride`.
    pub input_size: usize,
    pub feature_stride: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    pub projector: [usize; 2],
}

fn default_blocks() -> usize {
    2
}

impl ModelSpec {
    pub fn convnet(num_classes: usize, input_size: usize) -> Self {
        ModelSpec {
            arch: Arch::Convnet,
            channels: vec![8, 16, 32],
            num_classes,
            input_size,
            feature_stride: 4,
            blocks: 2,
            projector: [256, 128],
        }
    }

    pub fn mixer(num_classes: usize, input_size: usize) -> Self {
        ModelSpec {
            arch: Arch::Mixer,
            channels: vec![64, 64, 128, 8],
            num_classes,
            input_size,
            feature_stride: 4,
            blocks: 2,
            projector: [256, 128],
        }
    }

    pub fn feature_side(&self) -> usize {
        self.input_size / self.feature_stride
    }

    pub fn feature_dim(&self) -> usize {
        self.projector[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.feature_stride != 4 {
            return bad(format!("feature_stride {} (only 4 is built)", self.feature_stride));
        }
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return bad(format!("input_size {} not a multiple of 4", self.input_size));
        }
        let want = match self.arch {
            Arch::Convnet => 3,
            Arch::Mixer => 4,
        };
        if self.channels.len() != want || self.channels.contains(&0) {
            return bad(format!("{:?} needs {want} non-zero channel entries", self.arch));
        }
        if self.projector.contains(&0) {
            return bad("projector widths must be positive".into());
        }
        if self.arch == Arch::Mixer && self.blocks == 0 {
            return bad("mixer needs at least one block".into());
        }
        Ok(())
    }
}

// Parameter layout: (name, shape, init) in a fixed order.
#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Zero,
    One,
}

fn layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, Init)> {
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let conv = |out: &mut Vec<_>, name: &str, ci: usize, co: usize, k: usize| {
        out.push((format!("{name}.w"), vec![co, ci, k, k], Init::He(ci * k * k)));
        out.push((format!("{name}.b"), vec![co], Init::Zero));
    };
    let lin = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, di: usize, dout: usize| {
        out.push((format!("{name}.w"), vec![di, dout], Init::He(di)));
        out.push((format!("{name}.b"), vec![dout], Init::Zero));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize| {
        out.push((format!("{name}.g"), vec![d], Init::One));
        out.push((format!("{name}.b"), vec![d], Init::Zero));
    };
    let c = spec.num_classes;
    let feat_in = match spec.arch {
        Arch::Convnet => {
            let (c1, c2, c3) = (spec.channels[0], spec.channels[1], spec.channels[2]);
            conv(&mut out, "enc1a", 1, c1, 3);
            conv(&mut out, "enc1b", c1, c1, 3);
            conv(&mut out, "enc2a", c1, c2, 3);
            conv(&mut out, "enc2b", c2, c2, 3);
            conv(&mut out, "enc3a", c2, c3, 3);
            conv(&mut out, "enc3b", c3, c3, 3);
            conv(&mut out, "dec2a", c3 + c2, c2, 3);
            conv(&mut out, "dec2b", c2, c2, 3);
            conv(&mut out, "dec1a", c2 + c1, c1, 3);
            conv(&mut out, "dec1b", c1, c1, 3);
            conv(&mut out, "head", c1, c, 1);
            c3
        }
        Arch::Mixer => {
            let p = spec.feature_stride;
            let tokens = spec.feature_side() * spec.feature_side();
            let (d, th, ch, r) = (
                spec.channels[0],
                spec.channels[1],
                spec.channels[2],
                spec.channels[3],
            );
            lin(&mut out, "embed", p * p, d);
            for i in 0..spec.blocks {
                norm(&mut out, &format!("blk{i}.ln1"), d);
                lin(&mut out, &format!("blk{i}.tok1"), tokens, th);
                // No bias: a per-token shift is cancelled by the next norm.
                out.push((format!("blk{i}.tok2.w"), vec![th, tokens], Init::He(th)));
                norm(&mut out, &format!("blk{i}.ln2"), d);
                lin(&mut out, &format!("blk{i}.ch1"), d, ch);
                lin(&mut out, &format!("blk{i}.ch2"), ch, d);
            }
            norm(&mut out, "final_ln", d);
            lin(&mut out, "unpatch", d, r * p * p);
            conv(&mut out, "refine", r + 1, r, 3);
            conv(&mut out, "head", r, c, 1);
            d
        }
    };
    lin(&mut out, "proj1", feat_in, spec.projector[0]);
    lin(&mut out, "proj2", spec.projector[0], spec.projector[1]);
    out
}

/// Network weights plus the spec they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
}

/// Parameters as tape leaves for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B, C, H, W]`.
    pub logits: Var,
    /// `[B, C, H, W]`, softmax of `logits`.
    pub prob: Var,
    /// `[B, h, w, D]`, unit rows; `h = H / feature_stride`.
    pub features: Var,
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub prob: Tensor<T>,
    pub features: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(spec) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| T::of(normal.sample(rng))).collect()
                }
            };
            names.push(name);
            params.push(Tensor { shape, data });
        }
        Ok(Model {
            spec: spec.clone(),
            names,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Registers every parameter on `tape`; `trainable = false` records them
    /// as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// `input: [B, 1, H, W]` with `H = W = input_size`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: &Tensor<T>) -> Result<ForwardVars> {
        let s = self.spec.input_size;
        match input.shape.as_slice() {
            [_, 1, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::Config(format!(
                    "input {other:?} does not match a 1-channel {s}x{s} model"
                )))
            }
        }
        let mut cursor = Cursor {
            vars: &bound.vars,
            at: 0,
        };
        let x = tape.constant(input.clone());
        let (logits, feat_tokens) = match self.spec.arch {
            Arch::Convnet => self.convnet(tape, &mut cursor, x)?,
            Arch::Mixer => self.mixer(tape, &mut cursor, input, x)?,
        };
        let h1 = tape.linear(feat_tokens, cursor.next(), cursor.next())?;
        let h1 = tape.relu(h1);
        let h2 = tape.linear(h1, cursor.next(), cursor.next())?;
        let unit = tape.l2_normalize(h2);
        let b = input.shape[0];
        let fs = self.spec.feature_side();
        let features = tape.reshape(unit, &[b, fs, fs, self.spec.feature_dim()])?;
        debug_assert_eq!(cursor.at, bound.vars.len());
        let prob = tape.softmax_channels(logits)?;
        Ok(ForwardVars {
            logits,
            prob,
            features,
        })
    }

    fn convnet(&self, tape: &mut Tape<T>, cur: &mut Cursor, x: Var) -> Result<(Var, Var)> {
        let block = |tape: &mut Tape<T>, cur: &mut Cursor, x: Var| -> Result<Var> {
            let a = tape.conv(x, cur.next(), cur.next())?;
            let a = tape.relu(a);
            let b = tape.conv(a, cur.next(), cur.next())?;
            Ok(tape.relu(b))
        };
        let e1 = block(tape, cur, x)?;
        let p1 = tape.avg_pool2(e1)?;
        let e2 = block(tape, cur, p1)?;
        let p2 = tape.avg_pool2(e2)?;
        let e3 = block(tape, cur, p2)?;
        let u2 = tape.upsample2(e3)?;
        let c2 = tape.concat_channels(u2, e2)?;
        let d2 = block(tape, cur, c2)?;
        let u1 = tape.upsample2(d2)?;
        let c1 = tape.concat_channels(u1, e1)?;
        let d1 = block(tape, cur, c1)?;
        let logits = tape.conv(d1, cur.next(), cur.next())?;
        // Deepest decoder-side map (the bottleneck) feeds the projector.
        let [b, c3, h, w] = [
            tape.shape(e3)[0],
            tape.shape(e3)[1],
            tape.shape(e3)[2],
            tape.shape(e3)[3],
        ];
        let flat = tape.reshape(e3, &[b, c3, h * w])?;
        let tokens = tape.transpose12(flat)?;
        Ok((logits, tokens))
    }

    fn mixer(
        &self,
        tape: &mut Tape<T>,
        cur: &mut Cursor,
        input: &Tensor<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let p = self.spec.feature_stride;
        let fs = self.spec.feature_side();
        let patches = tape.constant(patchify(input, p));
        let mut t = tape.linear(patches, cur.next(), cur.next())?;
        for _ in 0..self.spec.blocks {
            let n = tape.layer_norm(t, cur.next(), cur.next())?;
            let n = tape.transpose12(n)?;
            let m = tape.linear(n, cur.next(), cur.next())?;
            let m = tape.relu(m);
            let no_bias = tape.constant(Tensor::zeros(&[fs * fs]));
            let m = tape.linear(m, cur.next(), no_bias)?;
            let m = tape.transpose12(m)?;
            t = tape.add(t, m)?;
            let n = tape.layer_norm(t, cur.next(), cur.next())?;
            let m = tape.linear(n, cur.next(), cur.next())?;
            let m = tape.relu(m);
            let m = tape.linear(m, cur.next(), cur.next())?;
            t = tape.add(t, m)?;
        }
        let z = tape.layer_norm(t, cur.next(), cur.next())?;
        let up = tape.linear(z, cur.next(), cur.next())?;
        let up = tape.depth_to_space(up, fs, fs, p)?;
        let up = tape.relu(up);
        let cat = tape.concat_channels(up, x)?;
        let r = tape.conv(cat, cur.next(), cur.next())?;
        let r = tape.relu(r);
        let logits = tape.conv(r, cur.next(), cur.next())?;
        Ok((logits, z))
    }

    /// Forward pass without gradient bookkeeping for the caller.
    pub fn predict(&self, input: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, input)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            prob: tape.value(out.prob).clone(),
            features: tape.value(out.features).clone(),
        })
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }
}

/// `[B, 1, H, W] -> [B, (H/p)(W/p), p*p]`, tokens in row-major patch order.
fn patchify<T: Real>(input: &Tensor<T>, p: usize) -> Tensor<T> {
    let (b, h, w) = (input.shape[0], input.shape[2], input.shape[3]);
    let (th, tw) = (h / p, w / p);
    let mut data = Vec::with_capacity(input.len());
    for n in 0..b {
        let img = &input.data[n * h * w..(n + 1) * h * w];
        for ty in 0..th {
            for tx in 0..tw {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(img[(ty * p + dy) * w + tx * p + dx]);
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![b, th * tw, p * p],
        data,
    }
}

/// Builds both networks from one seed with independent parameter streams.
pub fn init_models<T: Real>(spec_a: &ModelSpec, spec_b: &ModelSpec, seed: u64) -> Result<(Model<T>, Model<T>)> {
    if spec_a.num_classes != spec_b.num_classes
        || spec_a.input_size != spec_b.input_size
        || spec_a.feature_dim() != spec_b.feature_dim()
        || spec_a.feature_stride != spec_b.feature_stride
    {
        return Err(Error::Config(
            "models must share classes, input size and feature geometry".into(),
        ));
    }
    if spec_a.arch == spec_b.arch {
        log::warn!("both models use the {:?} architecture", spec_a.arch);
    }
    let a = Model::init(spec_a, &mut seeding::rng(seed, &[0x6d6f_6461]))?;
    let b = Model::init(spec_b, &mut seeding::rng(seed, &[0x6d6f_6462]))?;
    Ok((a, b))
}

const CKPT_MAGIC: &[u8; 4] = b"XTCK";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
}

/// Spec JSON followed by the flat little-endian `f32` parameter blob.
pub fn write_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        params: model
            .names
            .iter()
            .cloned()
            .zip(model.params.iter().map(|p| p.shape.clone()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 4 * model.param_count() + 16);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.write_u16::<LittleEndian>(CKPT_VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    for p in &model.params {
        for v in &p.data {
            buf.write_f32::<LittleEndian>(*v).expect("vec write");
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "not a model checkpoint"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    if r.len() < n {
        return Err(Error::format(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..n])?;
    r = &r[n..];
    let expected = layout(&header.spec);
    if expected.len() != header.params.len()
        || expected
            .iter()
            .zip(&header.params)
            .any(|((n1, s1, _), (n2, s2))| n1 != n2 || s1 != s2)
    {
        return Err(Error::format(path, "parameter layout does not match spec"));
    }
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in header.params {
        let len: usize = shape.iter().product();
        if r.len() < 4 * len {
            return Err(Error::format(path, format!("truncated parameter {name}")));
        }
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| Error::io(path, e))?;
        names.push(name);
        params.push(Tensor { shape, data });
    }
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(Model {
        spec: header.spec,
        names,
        params,
    })
}

/// Random `[B, 1, S, S]` batch in `[0, 1)`; used by tests and benches.
pub fn random_batch<T: Real>(b: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor {
        shape: vec![b, 1, size, size],
        data: (0..b * size * size).map(|_| T::of(rng.random::<f64>())).collect(),
    }
}
