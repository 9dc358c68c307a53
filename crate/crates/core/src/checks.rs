//! Named finite-difference gradient checks over every differentiable op
//! and composite module, each on three seeded shapes.
//!
//! Checks run in f64 with weighted-sum objectives so that every output
//! element carries a distinct gradient. Deformable paths use fractional
//! offsets away from integer sampling positions, where bilinear
//! interpolation is not differentiable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ae::{ae_forward, AeParams};
use crate::autodiff::{grad_check_report, GradCheckReport};
use crate::error::{Error, Result};
use crate::loss::{self, label_boundary, CannyConfig};
use crate::mask::Mask;
use crate::mgfi::{mgfi_forward, mgfi_lower, mgfi_upper, MgfiConfig, MgfiLower, MgfiParams, MgfiUpper};
use crate::network::{ModelConfig, NetworkParams};
use crate::ops::{self, BatchNormState, ConvParams, Mode};
use crate::params::Module;
use crate::tensor::{Shape, Tensor};

/// Maximum accepted relative error.
pub const GRAD_TOL: f64 = 1e-3;
/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;

type T = Tensor<f64>;
type Objective = Box<dyn Fn(&[T]) -> Result<T>>;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub cases: usize,
    pub evaluations: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOL
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> T {
    let v: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("shape")
}

fn noise(shape: Shape, rng: &mut ChaCha8Rng) -> T {
    uniform(shape, -1.0, 1.0, rng)
}

/// `Σ w ∘ x` with a fixed random `w` drawn from `seed`.
fn weighted(x: &T, seed: u64) -> Result<T> {
    let w = noise(x.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    Ok(ops::sum(&ops::mul(x, &w)?))
}

fn random_mask(n: usize, h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Mask {
    Mask::new(n, h, w, (0..n * h * w).map(|_| rng.random_range(0..classes)).collect()).expect("shape")
}

/// Blocky masks so that the boundary target is non-trivial.
fn blob_mask(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let mut data = vec![0u8; n * h * w];
    for i in 0..n {
        let (y0, x0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
        for y in y0..y0 + h / 2 {
            for x in x0..x0 + w / 2 {
                data[i * h * w + y * w + x] = 1;
            }
        }
    }
    Mask::new(n, h, w, data).expect("shape")
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, dil: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
    let w = uniform(Shape::new(cout, cin, k, k), -0.5, 0.5, rng);
    let b = uniform(Shape::new(1, cout, 1, 1), -0.2, 0.2, rng);
    ConvParams::new(w, Some(b), stride, pad, dil)
}

/// Gives every offset-generating conv a fractional bias and small weights.
fn fractional_offsets(p: &mut ConvParams<f64>, rng: &mut ChaCha8Rng) {
    let ws = p.weight.shape();
    p.weight = uniform(ws, -0.05, 0.05, rng);
    let c = p.out_channels();
    let b: Vec<f64> = (0..c).map(|_| rng.random_range(0.15..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    p.bias = Some(Tensor::from_f64(Shape::new(1, c, 1, 1), &b).expect("shape"));
}

/// Perturbs every learnable of a freshly initialized module so that zero
/// inits (offsets, biases, β) do not hide gradient paths.
fn jitter<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit("", &mut |name, t, kind| {
        if kind == crate::params::Kind::Learnable && !name.contains("offsets") {
            let v: Vec<f64> = t.data().iter().map(|&x| x + rng.random_range(-0.1..0.1)).collect();
            *t = Tensor::from_f64(t.shape(), &v).expect("shape");
        }
    });
}

fn module_objective<M, F>(base: M, forward: F, seed: u64) -> Objective
where
    M: Module<f64> + Clone + 'static,
    F: Fn(&mut M, &T) -> Result<T> + 'static,
{
    Box::new(move |inputs: &[T]| {
        let mut m = base.clone();
        m.set_learnables(&inputs[1..])?;
        weighted(&forward(&mut m, &inputs[0])?, seed)
    })
}

fn module_inputs<M: Module<f64> + Clone>(x: T, m: &M) -> Vec<T> {
    std::iter::once(x).chain(m.learnables()).collect()
}

/// One check case: objective plus the inputs to differentiate.
fn case(name: &str, i: usize) -> Result<(Objective, Vec<T>)> {
    let seed = 1000 + i as u64;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ name.len() as u64);
    let shapes = [Shape::new(1, 2, 3, 4), Shape::new(2, 3, 4, 3), Shape::new(2, 1, 5, 5)];
    let s = shapes[i];
    let w = move |x: &T| weighted(x, seed);
    let unary = |f: fn(&T) -> T, x: T| -> (Objective, Vec<T>) { (Box::new(move |v: &[T]| w(&f(&v[0]))), vec![x]) };
    Ok(match name {
        "add" | "sub" | "mul" => {
            let op: fn(&T, &T) -> Result<T> = match name {
                "add" => ops::add::<f64>,
                "sub" => ops::sub::<f64>,
                _ => ops::mul::<f64>,
            };
            (Box::new(move |v: &[T]| w(&op(&v[0], &v[1])?)), vec![noise(s, rng), noise(s, rng)])
        }
        "scale" => (Box::new(move |v: &[T]| w(&ops::scale(&v[0], -1.75))), vec![noise(s, rng)]),
        "sum" => (Box::new(|v: &[T]| Ok(ops::sum(&ops::mul(&v[0], &v[0])?))), vec![noise(s, rng)]),
        "mean" => (Box::new(|v: &[T]| Ok(ops::mean(&ops::mul(&v[0], &v[0])?))), vec![noise(s, rng)]),
        "relu" => unary(ops::relu, noise(s, rng)),
        "sigmoid" => unary(ops::sigmoid, uniform(s, -3.0, 3.0, rng)),
        "softmax_channels" => unary(ops::softmax_channels, uniform(s, -2.0, 2.0, rng)),
        "flatten_transpose" => unary(ops::flatten_transpose, noise(s, rng)),
        "unflatten_transpose" => {
            let (h, wd) = (s.h, s.w);
            let x = noise(Shape::new(s.n, s.h * s.w, s.c, 1), rng);
            (Box::new(move |v: &[T]| w(&ops::unflatten_transpose(&v[0], h, wd)?)), vec![x])
        }
        "reshape" => {
            let to = Shape::new(s.n, 1, s.c * s.h, s.w);
            (Box::new(move |v: &[T]| w(&ops::reshape(&v[0], to)?)), vec![noise(s, rng)])
        }
        "concat_channels" => {
            let other = Shape::new(s.n, 2, s.h, s.w);
            (Box::new(move |v: &[T]| w(&ops::concat_channels(&[&v[0], &v[1]])?)), vec![noise(s, rng), noise(other, rng)])
        }
        "slice_channels" => {
            let wide = Shape::new(s.n, s.c + 2, s.h, s.w);
            (Box::new(move |v: &[T]| w(&ops::slice_channels(&v[0], 1, 2)?)), vec![noise(wide, rng)])
        }
        "conv2d" | "conv2d_strided" | "atrous_conv2d" => {
            let (stride, dil) = match name {
                "conv2d" => (1, 1),
                "conv2d_strided" => (2, 1),
                _ => (1, 2),
            };
            let p = conv(s.c, 2, 3, stride, dil, dil, rng);
            let x = noise(Shape::new(s.n, s.c, s.h + 2, s.w + 2), rng);
            let obj = move |v: &[T]| {
                let p = ConvParams::new(v[1].clone(), Some(v[2].clone()), stride, dil, dil);
                w(&ops::conv2d(&v[0], &p)?)
            };
            (Box::new(obj), vec![x, p.weight, p.bias.unwrap()])
        }
        "depthwise_conv2d" => {
            let k = uniform(Shape::new(s.c, 1, 3, 3), -0.5, 0.5, rng);
            (Box::new(move |v: &[T]| w(&ops::depthwise_conv2d(&v[0], &v[1], 1, 1)?)), vec![noise(s, rng), k])
        }
        "pointwise_conv" => {
            let p = conv(s.c, 3, 1, 1, 0, 1, rng);
            let obj = move |v: &[T]| w(&ops::pointwise_conv(&v[0], &v[1], Some(&v[2]))?);
            (Box::new(obj), vec![noise(s, rng), p.weight, p.bias.unwrap()])
        }
        "overlap_downsample" => {
            let p = conv(s.c, s.c, 3, 2, 1, 1, rng);
            let obj = move |v: &[T]| {
                let p = ConvParams::new(v[1].clone(), Some(v[2].clone()), 2, 1, 1);
                w(&ops::overlap_downsample(&v[0], &p)?)
            };
            (Box::new(obj), vec![noise(s, rng), p.weight, p.bias.unwrap()])
        }
        "deform_conv2d" => {
            let p = conv(s.c, 2, 3, 1, 1, 1, rng);
            let mut off = conv(s.c, 18, 3, 1, 1, 1, rng);
            fractional_offsets(&mut off, rng);
            let offsets = ops::conv2d(&noise(s, rng), &off)?;
            let obj = move |v: &[T]| {
                let p = ConvParams::new(v[1].clone(), Some(v[2].clone()), 1, 1, 1);
                w(&ops::deform_conv2d(&v[0], &p, &v[3])?)
            };
            (Box::new(obj), vec![noise(s, rng), p.weight, p.bias.unwrap(), offsets])
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let mode = if name == "batchnorm_train" { Mode::Train } else { Mode::Eval };
            let mut st = BatchNormState::<f64>::new(s.c);
            st.running_mean = noise(st.gamma.shape(), rng);
            st.running_var = uniform(st.gamma.shape(), 0.5, 2.0, rng);
            let (g, b) = (uniform(st.gamma.shape(), 0.5, 1.5, rng), noise(st.gamma.shape(), rng));
            let obj = move |v: &[T]| {
                let mut st = st.clone();
                st.gamma = v[1].clone();
                st.beta = v[2].clone();
                w(&ops::batchnorm(&v[0], &mut st, mode)?)
            };
            (Box::new(obj), vec![noise(s, rng), g, b])
        }
        "upsample_bilinear" => (Box::new(move |v: &[T]| w(&ops::upsample_bilinear(&v[0], 2)?)), vec![noise(s, rng)]),
        "cross_entropy" | "dice_loss" => {
            let labels = random_mask(s.n, s.h, s.w, 3, rng);
            let probs = uniform(Shape::new(s.n, 3, s.h, s.w), 0.05, 0.95, rng);
            let dice = name == "dice_loss";
            let obj = move |v: &[T]| if dice { loss::dice_loss(&v[0], &labels) } else { loss::cross_entropy(&v[0], &labels) };
            (Box::new(obj), vec![probs])
        }
        "boundary_loss" => {
            let gt = random_mask(s.n, s.h, s.w, 2, rng);
            (Box::new(move |v: &[T]| loss::boundary_loss(&v[0], &gt)), vec![uniform(Shape::new(s.n, 1, s.h, s.w), 0.05, 0.95, rng)])
        }
        "mgfi_upper" | "mgfi_lower" | "mgfi_forward" => {
            let cfg = MgfiConfig { in_channels: 4, mid_channels: 2, offset_hidden: if i == 2 { 3 } else { 0 }, ..MgfiConfig::default() };
            let x = noise([Shape::new(1, 4, 8, 8), Shape::new(2, 4, 6, 5), Shape::new(1, 4, 7, 8)][i], rng);
            let mut p = MgfiParams::<f64>::init(&cfg, true, true, rng)?;
            jitter(&mut p, rng);
            let lower = p.lower.as_mut().expect("lower section");
            fractional_offsets(&mut lower.offsets.conv, rng);
            if let Some(proj) = lower.offsets.project.as_mut() {
                fractional_offsets(proj, rng);
                proj.weight = uniform(proj.weight.shape(), -0.2, 0.2, rng);
            }
            match name {
                "mgfi_upper" => {
                    let up = p.upper.expect("upper section");
                    let inputs = module_inputs(x, &up);
                    let f = |m: &mut MgfiUpper<f64>, x: &T| Ok(mgfi_upper(x, m, Mode::Train)?.0);
                    (module_objective(up, f, seed), inputs)
                }
                "mgfi_lower" => {
                    let low = p.lower.expect("lower section");
                    let inputs = module_inputs(x, &low);
                    (module_objective(low, |m: &mut MgfiLower<f64>, x: &T| mgfi_lower(x, m), seed), inputs)
                }
                _ => {
                    let inputs = module_inputs(x, &p);
                    (module_objective(p, |m: &mut MgfiParams<f64>, x: &T| mgfi_forward(x, m, Mode::Train), seed), inputs)
                }
            }
        }
        "ae_forward" => {
            let x = noise([Shape::new(1, 4, 8, 8), Shape::new(2, 3, 5, 6), Shape::new(1, 2, 9, 7)][i], rng);
            let mut p = AeParams::<f64>::init(x.shape().c, rng);
            jitter(&mut p, rng);
            fractional_offsets(&mut p.offsets, rng);
            let inputs = module_inputs(x, &p);
            (module_objective(p, |m: &mut AeParams<f64>, x: &T| ae_forward(x, m), seed), inputs)
        }
        "encoder" | "model_hybrid" => {
            let cfg = ModelConfig {
                stage_channels: vec![2, 3],
                blocks_per_stage: 1,
                classes: [2, 3, 2][i],
                input_channels: [3, 1, 3][i],
                mgfi: MgfiConfig { mid_channels: 2, ..MgfiConfig::default() },
                seed,
                ..ModelConfig::default()
            };
            let (n, h, wd) = [(2, 16, 16), (2, 8, 16), (1, 16, 16)][i];
            let x = uniform(Shape::new(n, cfg.input_channels, h, wd), 0.0, 1.0, rng);
            let mut p = NetworkParams::<f64>::init(&cfg)?;
            jitter(&mut p, rng);
            for m in &mut p.mgfi {
                fractional_offsets(&mut m.lower.as_mut().expect("lower section").offsets.conv, rng);
            }
            fractional_offsets(&mut p.ae.as_mut().expect("edge head").offsets, rng);
            let inputs = module_inputs(x, &p);
            if name == "encoder" {
                let f = move |m: &mut NetworkParams<f64>, x: &T| {
                    let skips = m.encode(x, Mode::Train)?;
                    let parts: Vec<T> = skips.iter().enumerate().map(|(k, s)| weighted(s, seed + k as u64)).collect::<Result<_>>()?;
                    parts.iter().skip(1).try_fold(parts[0].clone(), |a, b| ops::add(&a, b))
                };
                (module_objective(p, f, seed), inputs)
            } else {
                let labels = if cfg.classes == 2 { blob_mask(n, h, wd, rng) } else { random_mask(n, h, wd, 3, rng) };
                let boundary = label_boundary(&labels, &CannyConfig::default())?;
                let obj = move |v: &[T]| {
                    let mut m = p.clone();
                    m.set_learnables(&v[1..])?;
                    let pred = m.forward(&v[0], Mode::Train)?;
                    let probs = ops::softmax_channels(&pred.logits);
                    Ok(loss::hybrid_loss(&probs, pred.edge.as_ref(), &labels, &boundary, 0.7)?.tensor)
                };
                (Box::new(obj), inputs)
            }
        }
        _ => return Err(Error::invalid(format!("unknown gradient check {name:?}"))),
    })
}

pub const CHECKS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "softmax_channels",
    "concat_channels",
    "slice_channels",
    "flatten_transpose",
    "unflatten_transpose",
    "reshape",
    "conv2d",
    "conv2d_strided",
    "atrous_conv2d",
    "depthwise_conv2d",
    "pointwise_conv",
    "overlap_downsample",
    "deform_conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "upsample_bilinear",
    "cross_entropy",
    "dice_loss",
    "boundary_loss",
    "mgfi_upper",
    "mgfi_lower",
    "mgfi_forward",
    "ae_forward",
    "encoder",
    "model_hybrid",
];

/// Number of seeded shapes per check.
pub const CASES: usize = 3;

/// Full report of case `i` of check `name` at step `eps`.
pub fn run_case(name: &str, i: usize, eps: f64) -> Result<GradCheckReport> {
    if i >= CASES {
        return Err(Error::invalid(format!("case index {i} out of range (0..{CASES})")));
    }
    let (f, inputs) = case(name, i)?;
    grad_check_report(f, &inputs, eps)
}

pub fn run_check(name: &str) -> Result<CheckResult> {
    let &name = CHECKS.iter().find(|&&c| c == name).ok_or_else(|| Error::invalid(format!("unknown gradient check {name:?}")))?;
    let mut result = CheckResult { name, max_rel_error: 0.0, cases: 0, evaluations: 0 };
    for i in 0..CASES {
        let r = run_case(name, i, GRAD_EPS)?;
        result.max_rel_error = result.max_rel_error.max(r.max_rel_error);
        result.evaluations += r.evaluations;
        result.cases += 1;
    }
    Ok(result)
}
