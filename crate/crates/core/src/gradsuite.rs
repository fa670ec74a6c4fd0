//! Registered finite-difference suite over every differentiable primitive and loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{gradcheck, ConvSpec, Graph, Tensor, Var, DEFAULT_EPS};
use crate::error::Result;
use crate::levelset::{default_radius, lsf_to_mask, signed_distance, BinaryMask};
use crate::losses::{
    arc_loss, cls_loss, dtc_loss, labeled_loss, lsf_loss, mask_loss, unlabeled_loss, LossWeights, Targets,
};
use crate::model::ForwardVars;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Primitive,
    Loss,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCheck {
    pub name: String,
    pub kind: CheckKind,
    pub instances: usize,
    /// Worst relative error over all instances.
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    pub instances: usize,
    pub checks: Vec<SuiteCheck>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &SuiteCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub instances: usize,
    pub seed: u64,
    pub tol: f64,
    /// Adds a check of an operation with a deliberately wrong gradient.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { instances: 20, seed: 0, tol: 1e-4, inject_fault: false }
    }
}

pub const PRIMITIVES: [&str; 23] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row_bias",
    "affine",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "layer_norm",
    "conv2d",
    "resize_bilinear",
    "concat",
    "narrow",
    "reshape",
    "sum",
    "mean",
    "normalize_sum",
    "cross_entropy",
    "lsf_to_mask",
];

pub const LOSS_TERMS: [&str; 7] = ["mask", "cls", "lsf", "dtc", "arc", "total_lab", "total_unlab"];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero, keeping ReLU kinks outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Random projection to a scalar, so every output element gets a distinct cotangent.
fn project(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let (cy, cx) = (rng.gen_range(2.0..size as f64 - 2.0), rng.gen_range(2.0..size as f64 - 2.0));
    let r = rng.gen_range(1.5..size as f64 / 2.5);
    BinaryMask::from_fn(size, size, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

struct Recorder {
    tol: f64,
    checks: Vec<SuiteCheck>,
}

impl Recorder {
    fn record(&mut self, name: &str, kind: CheckKind, rel_err: f64) {
        let rel_err = if rel_err.is_nan() { f64::INFINITY } else { rel_err };
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.instances += 1;
                c.rel_err = c.rel_err.max(rel_err);
                c.passed = c.rel_err < self.tol;
            }
            None => self.checks.push(SuiteCheck {
                name: name.into(),
                kind,
                instances: 1,
                rel_err,
                passed: rel_err < self.tol,
            }),
        }
    }

    fn input(&mut self, name: &str, kind: CheckKind, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<()> {
        let r = gradcheck(f, x, DEFAULT_EPS, self.tol)?;
        self.record(name, kind, r.rel_err);
        Ok(())
    }

    fn primitive(&mut self, name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<()> {
        self.input(name, CheckKind::Primitive, x, f)
    }
}

/// Runs every registered check on `instances` random inputs each.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut rec = Recorder { tol: opts.tol, checks: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for inst in 0..opts.instances {
        primitives(&mut rec, &mut rng, inst)?;
        losses(&mut rec, &mut rng, inst)?;
        if opts.inject_fault {
            let x = random(&mut rng, &[3, 4]);
            rec.primitive("faulty_square", &x, |g, v| {
                let y = g.faulty_square(v)?;
                g.sum(y)
            })?;
        }
    }
    let passed = rec.checks.iter().all(|c| c.passed);
    Ok(SuiteReport { tol: opts.tol, instances: opts.instances, checks: rec.checks, passed })
}

fn primitives(rec: &mut Recorder, rng: &mut ChaCha8Rng, inst: usize) -> Result<()> {
    let x = random(rng, &[3, 4]);
    let other = random(rng, &[3, 4]);
    let w34 = random(rng, &[3, 4]);
    let w43 = random(rng, &[4, 3]);
    let w32 = random(rng, &[3, 2]);

    let tall = random(rng, &[4, 2]);
    rec.primitive("matmul", &x, |g, v| {
        let b = g.constant(tall.clone())?;
        let y = g.matmul(v, b)?;
        project(g, y, &w32)
    })?;
    rec.primitive("transpose", &x, |g, v| {
        let y = g.transpose(v)?;
        project(g, y, &w43)
    })?;
    rec.primitive("add", &x, |g, v| {
        let o = g.constant(other.clone())?;
        let y = g.add(v, o)?;
        let y = g.mul(y, y)?;
        project(g, y, &w34)
    })?;
    rec.primitive("sub", &x, |g, v| {
        let o = g.constant(other.clone())?;
        let y = g.sub(o, v)?;
        let y = g.mul(y, y)?;
        project(g, y, &w34)
    })?;
    rec.primitive("mul", &x, |g, v| {
        let o = g.constant(other.clone())?;
        let y = g.mul(v, o)?;
        let y = g.mul(y, v)?;
        project(g, y, &w34)
    })?;
    let bias = random(rng, &[4]);
    rec.primitive("add_row_bias", &bias, |g, v| {
        let xx = g.constant(x.clone())?;
        let y = g.add_row_bias(xx, v)?;
        let y = g.mul(y, y)?;
        project(g, y, &w34)
    })?;
    let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
    rec.primitive("affine", &x, |g, v| {
        let y = g.affine(v, a, b)?;
        let y = g.mul(y, y)?;
        project(g, y, &w34)
    })?;
    rec.primitive("scale", &x, |g, v| {
        let y = g.scale(v, a)?;
        let y = g.tanh(y)?;
        project(g, y, &w34)
    })?;
    let off = off_zero(rng, &[3, 4]);
    rec.primitive("relu", &off, |g, v| {
        let y = g.relu(v)?;
        project(g, y, &w34)
    })?;
    rec.primitive("sigmoid", &x, |g, v| {
        let y = g.sigmoid(v)?;
        project(g, y, &w34)
    })?;
    rec.primitive("tanh", &x, |g, v| {
        let y = g.tanh(v)?;
        project(g, y, &w34)
    })?;
    let axis = inst % 2;
    rec.primitive("softmax", &x, |g, v| {
        let y = g.softmax(v, axis)?;
        project(g, y, &w34)
    })?;
    let gain = random(rng, &[4]);
    rec.primitive("layer_norm", &x, |g, v| {
        let (ga, b) = (g.constant(gain.clone())?, g.constant(bias.clone())?);
        let y = g.layer_norm(v, ga, b)?;
        project(g, y, &w34)
    })?;
    rec.primitive("layer_norm", &gain, |g, v| {
        let (xx, b) = (g.constant(x.clone())?, g.constant(bias.clone())?);
        let y = g.layer_norm(xx, v, b)?;
        project(g, y, &w34)
    })?;

    let conv_x = random(rng, &[2, 5, 5]);
    let conv_w = random(rng, &[3, 2, 3, 3]);
    let conv_b = random(rng, &[3]);
    let spec = ConvSpec { stride: 1 + inst % 2, padding: 1 };
    let out = (5 + 2 - 3) / spec.stride + 1;
    let wc = random(rng, &[3, out, out]);
    rec.primitive("conv2d", &conv_x, |g, v| {
        let (w, b) = (g.constant(conv_w.clone())?, g.constant(conv_b.clone())?);
        let y = g.conv2d(v, w, Some(b), spec)?;
        project(g, y, &wc)
    })?;
    rec.primitive("conv2d", &conv_w, |g, v| {
        let (xx, b) = (g.constant(conv_x.clone())?, g.constant(conv_b.clone())?);
        let y = g.conv2d(xx, v, Some(b), spec)?;
        project(g, y, &wc)
    })?;

    let img = random(rng, &[2, 3, 4]);
    let (oh, ow) = if inst.is_multiple_of(2) { (6, 8) } else { (2, 3) };
    let wr = random(rng, &[2, oh, ow]);
    rec.primitive("resize_bilinear", &img, |g, v| {
        let y = g.resize_bilinear(v, oh, ow)?;
        project(g, y, &wr)
    })?;
    let side = random(rng, &[1, 3, 4]);
    let wcat = random(rng, &[4, 3, 4]);
    rec.primitive("concat", &img, |g, v| {
        let o = g.constant(side.clone())?;
        let y = g.concat(&[o, v, o], 0)?;
        project(g, y, &wcat)
    })?;
    let wn = random(rng, &[2, 2, 4]);
    rec.primitive("narrow", &img, |g, v| {
        let y = g.narrow(v, 1, inst % 2, 2)?;
        project(g, y, &wn)
    })?;
    let wre = random(rng, &[6, 4]);
    rec.primitive("reshape", &img, |g, v| {
        let y = g.reshape(v, &[6, 4])?;
        project(g, y, &wre)
    })?;
    rec.primitive("sum", &x, |g, v| {
        let y = g.sum(v)?;
        g.mul(y, y)
    })?;
    rec.primitive("mean", &x, |g, v| {
        let y = g.mean(v)?;
        g.mul(y, y)
    })?;
    let pos = Tensor::from_fn(&[6], |_| rng.gen_range(0.1..1.0));
    let w6 = random(rng, &[6]);
    rec.primitive("normalize_sum", &pos, |g, v| {
        let y = g.normalize_sum(v)?;
        project(g, y, &w6)
    })?;
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    rec.primitive("cross_entropy", &x, |g, v| g.cross_entropy(v, 0, &targets))?;
    let ls = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-0.5..0.5));
    let k = rng.gen_range(1.0..5.0);
    rec.primitive("lsf_to_mask", &ls, |g, v| {
        let y = lsf_to_mask(g, v, k)?;
        project(g, y, &w34)
    })
}

fn losses(rec: &mut Recorder, rng: &mut ChaCha8Rng, inst: usize) -> Result<()> {
    const SIZE: usize = 8;
    let mask = random_mask(rng, SIZE);
    let logits = Tensor::from_fn(&[2, SIZE, SIZE], |_| rng.gen_range(-2.0..2.0));
    let level_set = Tensor::from_fn(&[SIZE, SIZE], |_| rng.gen_range(-0.8..0.8));
    let target_ls = signed_distance(&mask, default_radius(SIZE, SIZE))?.to_tensor();
    let label = rng.gen_range(0..3);
    let k = rng.gen_range(1.0..6.0);

    rec.input("mask", CheckKind::Loss, &logits, |g, v| mask_loss(g, v, &mask))?;
    rec.input("lsf", CheckKind::Loss, &level_set, |g, v| lsf_loss(g, v, &target_ls))?;
    let cls = random(rng, &[3]);
    rec.input("cls", CheckKind::Loss, &cls, |g, v| cls_loss(g, v, label))?;
    rec.input("dtc", CheckKind::Loss, &logits, |g, v| {
        let l = g.constant(level_set.clone())?;
        dtc_loss(g, v, l, k)
    })?;
    rec.input("dtc", CheckKind::Loss, &level_set, |g, v| {
        let l = g.constant(logits.clone())?;
        dtc_loss(g, l, v, k)
    })?;
    // The mask side of the attention term is a constant, so only the attention is perturbed.
    let raw = Tensor::from_fn(&[4], |_| rng.gen_range(0.2..1.5));
    rec.input("arc", CheckKind::Loss, &raw, |g, v| {
        let a = g.normalize_sum(v)?;
        let l = g.constant(logits.clone())?;
        arc_loss(g, a, l, (2, 2))
    })?;

    // Totals are checked against every head output packed into one vector. Even
    // instances perturb all heads with the attention term off; odd instances hold
    // the mask logits fixed, since the attention term reads them as a constant.
    let with_arc = inst % 2 == 1;
    let w = LossWeights { arc: if with_arc { 1.0 } else { 0.0 }, k, rampup_length: 10.0, ..Default::default() };
    let t = rng.gen_range(0.0..12.0);
    let heads = Tensor::from_fn(&[SIZE * SIZE + 3 + 4], |i| {
        if i < SIZE * SIZE {
            rng.gen_range(-0.8..0.8)
        } else if i < SIZE * SIZE + 3 {
            rng.gen_range(-1.0..1.0)
        } else {
            rng.gen_range(0.2..1.5)
        }
    });
    let packed = if with_arc {
        heads.clone()
    } else {
        Tensor::new(&[logits.len() + heads.len()], logits.data().iter().chain(heads.data()).copied().collect())?
    };
    let unpack = |g: &mut Graph, v: Var| -> Result<ForwardVars> {
        let (mask_logits, rest) = if with_arc {
            (g.constant(logits.clone())?, v)
        } else {
            let m = g.narrow(v, 0, 0, logits.len())?;
            (g.reshape(m, &[2, SIZE, SIZE])?, g.narrow(v, 0, logits.len(), heads.len())?)
        };
        let ls = g.narrow(rest, 0, 0, SIZE * SIZE)?;
        let level_set = g.reshape(ls, &[SIZE, SIZE])?;
        let class_logits = g.narrow(rest, 0, SIZE * SIZE, 3)?;
        let raw = g.narrow(rest, 0, SIZE * SIZE + 3, 4)?;
        let cls_attention = g.normalize_sum(raw)?;
        Ok(ForwardVars { mask_logits, level_set, class_logits, cls_attention, attention: Vec::new(), grid: (2, 2) })
    };
    let targets = Targets { mask: Some(&mask), level_set: Some(&target_ls), label };
    rec.input("total_lab", CheckKind::Loss, &packed, |g, v| {
        let out = unpack(g, v)?;
        Ok(labeled_loss(g, &out, &targets, &w, t)?.0)
    })?;
    rec.input("total_unlab", CheckKind::Loss, &packed, |g, v| {
        let out = unpack(g, v)?;
        Ok(unlabeled_loss(g, &out, label, &w, t)?.0)
    })
}
