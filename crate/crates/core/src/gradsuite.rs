//! Finite-difference verification of every differentiable op and of the
//! composed training losses, in `f64` at 8×8 scale.

use crate::error::Result;
use crate::networks::{
    baseline_logits, build_baseline_unet, build_discriminator, build_generator, discriminator_forward,
    generator_forward, Bound, DiscriminatorSpec, GeneratorSpec, NormStats, ParameterSet,
};
use crate::objectives::{
    bce_from_logits, discriminator_loss, generator_adversarial_loss, generator_total_loss, l1_loss,
    pixel_bce_with_logits, DEFAULT_LAMBDA,
};
use crate::tensor::{grad_check, Activation, ConvGeometry, GradCheckReport, NormMode, Rng, Tape, Tensor, Var};

/// Relative-error bound for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for whole network losses.
pub const GRAPH_TOLERANCE: f64 = 1e-3;
/// Central-difference step relative to `max(1, |x|)`.
pub const STEP: f64 = 1e-5;
/// Spatial extent of the full-graph checks.
pub const GRAPH_SIZE: usize = 8;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

type Op = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn sample(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(dims, -1.0, 1.0, rng).expect("non-empty dims")
}

/// Dots `x` with fixed pseudo-random weights so every output element matters.
fn weighted_mean(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let dims = t.value(x).dims().to_vec();
    let w = t.constant(sample(&dims, &mut Rng::new(0xD07)));
    let y = t.mul(x, w)?;
    t.mean(y)
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    let pair = || vec![vec![2, 3], vec![2, 3]];
    vec![
        ("add", pair(), |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, x)?;
            t.mean(y)
        }),
        ("sub", pair(), |t, v| {
            let x = t.sub(v[0], v[1])?;
            let y = t.mul(x, v[0])?;
            t.mean(y)
        }),
        ("mul", pair(), |t, v| {
            let x = t.mul(v[0], v[1])?;
            t.mean(x)
        }),
        ("mul_broadcast", vec![vec![2, 3], vec![1]], |t, v| {
            let x = t.mul(v[0], v[1])?;
            let y = t.mul(x, x)?;
            t.mean(y)
        }),
        ("scalar_mul", vec![vec![2, 3]], |t, v| {
            let x = t.scalar_mul(v[0], -1.7)?;
            weighted_mean(t, x)
        }),
        ("abs", vec![vec![2, 3]], |t, v| {
            let x = t.abs(v[0])?;
            weighted_mean(t, x)
        }),
        ("neg", vec![vec![2, 3]], |t, v| {
            let x = t.neg(v[0])?;
            weighted_mean(t, x)
        }),
        ("log", vec![vec![2, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let one = t.constant(Tensor::scalar(1.0));
            let p = t.add(sq, one)?;
            let l = t.log(p)?;
            weighted_mean(t, l)
        }),
        ("mean", vec![vec![3, 4]], |t, v| {
            let x = t.mul(v[0], v[0])?;
            t.mean(x)
        }),
        ("conv2d", vec![vec![2, 2, 8, 8], vec![3, 2, 4, 4], vec![3]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(2, 1))?;
            weighted_mean(t, y)
        }),
        ("conv2d_stride1", vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3], vec![2]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(1, 1))?;
            weighted_mean(t, y)
        }),
        ("conv_transpose2d", vec![vec![2, 2, 4, 4], vec![2, 3, 4, 4], vec![3]], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::new(2, 1))?;
            weighted_mean(t, y)
        }),
        ("channel_norm_batch", vec![vec![2, 3, 3, 3], vec![3], vec![3]], |t, v| {
            let (y, _) = t.channel_norm(v[0], v[1], v[2], NormMode::Batch)?;
            weighted_mean(t, y)
        }),
        ("channel_norm_running", vec![vec![2, 3, 3, 3], vec![3], vec![3]], |t, v| {
            let mode = NormMode::Running { mean: &[0.3, -0.1, 0.0], var: &[1.5, 0.5, 2.0] };
            let (y, _) = t.channel_norm(v[0], v[1], v[2], mode)?;
            weighted_mean(t, y)
        }),
        ("relu", vec![vec![3, 4]], |t, v| {
            let y = t.activation(Activation::Relu, v[0])?;
            weighted_mean(t, y)
        }),
        ("leaky_relu", vec![vec![3, 4]], |t, v| {
            let y = t.activation(Activation::LeakyRelu(0.2), v[0])?;
            weighted_mean(t, y)
        }),
        ("tanh", vec![vec![3, 4]], |t, v| {
            let y = t.activation(Activation::Tanh, v[0])?;
            weighted_mean(t, y)
        }),
        ("sigmoid", vec![vec![3, 4]], |t, v| {
            let y = t.activation(Activation::Sigmoid, v[0])?;
            weighted_mean(t, y)
        }),
        ("softplus", vec![vec![3, 4]], |t, v| {
            let y = t.activation(Activation::Softplus, v[0])?;
            weighted_mean(t, y)
        }),
        ("dropout", vec![vec![1, 2, 4, 4]], |t, v| {
            let y = t.dropout(v[0], 0.5, &mut Rng::new(3), true)?;
            weighted_mean(t, y)
        }),
        ("concat_channels", vec![vec![2, 1, 3, 3], vec![2, 2, 3, 3]], |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            weighted_mean(t, y)
        }),
        ("bce_from_logits_real", vec![vec![1, 1, 3, 3]], |t, v| {
            let l = t.scalar_mul(v[0], 3.0)?;
            bce_from_logits(t, l, true)
        }),
        ("bce_from_logits_fake", vec![vec![1, 1, 3, 3]], |t, v| {
            let l = t.scalar_mul(v[0], 3.0)?;
            bce_from_logits(t, l, false)
        }),
        ("l1_loss", pair(), |t, v| l1_loss(t, v[0], v[1])),
        ("pixel_bce_with_logits", vec![vec![1, 1, 3, 3]], |t, v| {
            let m = t.constant(
                Tensor::new(&[1, 1, 3, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0]).expect("nine values"),
            );
            pixel_bce_with_logits(t, v[0], m)
        }),
    ]
}

fn graph_generator_spec() -> GeneratorSpec {
    GeneratorSpec { in_channels: 1, out_channels: 1, base_width: 4, depth: 2, dropout_p: 0.5, image_size: GRAPH_SIZE }
}

fn graph_discriminator_spec() -> DiscriminatorSpec {
    DiscriminatorSpec { in_channels: 2, base_width: 4, n_layers: 2 }
}

/// Moves every trainable tensor off its initial value. Zero biases and shifts
/// put dead channels exactly on a ReLU kink, where differences are meaningless.
fn generic_point(mut p: ParameterSet<f64>, rng: &mut Rng) -> ParameterSet<f64> {
    let names: Vec<String> = p.trainable().map(|e| e.name.clone()).collect();
    for name in names {
        let t = p.get_mut(&name).expect("listed name");
        for v in t.values_mut() {
            *v += rng.uniform_in(-0.3, 0.3);
        }
    }
    p
}

/// A conv bias followed by a batch-statistics norm is cancelled by the mean
/// subtraction, so the loss is constant in it and both gradients are noise.
fn is_inert(p: &ParameterSet<f64>, name: &str) -> bool {
    name.strip_suffix(".bias").is_some_and(|layer| p.iter().any(|e| e.name == format!("{layer}.gain")))
}

fn checked_tensors(p: &ParameterSet<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    p.trainable().filter(|e| !is_inert(p, &e.name)).map(|e| (e.name.clone(), e.tensor.clone())).unzip()
}

/// Binds the checked tensors to `vars` and everything else as constants.
fn bound_from(t: &mut Tape<f64>, p: &ParameterSet<f64>, names: &[String], vars: &[Var]) -> Bound {
    let mut bound: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
    for e in p.trainable().filter(|e| !names.contains(&e.name)) {
        bound.push((e.name.clone(), t.constant(e.tensor.clone())));
    }
    Bound::new(bound)
}

fn graph_inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = Rng::new(seed).fork(10);
    let dims = [1, 1, GRAPH_SIZE, GRAPH_SIZE];
    let x = sample(&dims, &mut rng);
    let mask = Tensor::new(&dims, (0..GRAPH_SIZE * GRAPH_SIZE).map(|_| rng.below(2) as f64).collect())
        .expect("matching length");
    let y = mask.map(|m| 2.0 * m - 1.0);
    (x, y, mask)
}

fn discriminator_graph(seed: u64) -> Result<GradCheckReport> {
    let (gs, ds) = (graph_generator_spec(), graph_discriminator_spec());
    let g = generic_point(build_generator(&gs, &mut Rng::new(seed).fork(0))?.cast(), &mut Rng::new(seed).fork(3));
    let d = generic_point(build_discriminator(&ds, &mut Rng::new(seed).fork(1))?.cast(), &mut Rng::new(seed).fork(4));
    let (x, y, _) = graph_inputs(seed);
    let fake = {
        let mut tape = Tape::new();
        let b = g.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = generator_forward(&mut tape, &gs, &g, &b, xv, Some(&mut Rng::new(seed).fork(2)), NormStats::Batch)?;
        tape.value(out.output).clone()
    };
    let (names, tensors) = checked_tensors(&d);
    grad_check(
        |t, v| {
            let b = bound_from(t, &d, &names, v);
            let (xv, yv, fv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(fake.clone()));
            let real = discriminator_forward(t, &ds, &d, &b, xv, yv, NormStats::Batch)?;
            let fake = discriminator_forward(t, &ds, &d, &b, xv, fv, NormStats::Batch)?;
            Ok(discriminator_loss(t, real.output, fake.output)?.2)
        },
        &tensors,
        STEP,
    )
}

fn generator_graph(seed: u64) -> Result<GradCheckReport> {
    let (gs, ds) = (graph_generator_spec(), graph_discriminator_spec());
    let g = generic_point(build_generator(&gs, &mut Rng::new(seed).fork(0))?.cast(), &mut Rng::new(seed).fork(3));
    let d = generic_point(build_discriminator(&ds, &mut Rng::new(seed).fork(1))?.cast(), &mut Rng::new(seed).fork(4));
    let (x, y, _) = graph_inputs(seed);
    let (names, tensors) = checked_tensors(&g);
    grad_check(
        |t, v| {
            let b = bound_from(t, &g, &names, v);
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            let mut noise = Rng::new(seed).fork(2);
            let fake = generator_forward(t, &gs, &g, &b, xv, Some(&mut noise), NormStats::Batch)?.output;
            let db = d.bind(t, false);
            let judged = discriminator_forward(t, &ds, &d, &db, xv, fake, NormStats::Batch)?;
            let adv = generator_adversarial_loss(t, judged.output)?;
            let l1 = l1_loss(t, yv, fake)?;
            generator_total_loss(t, adv, l1, DEFAULT_LAMBDA)
        },
        &tensors,
        STEP,
    )
}

fn baseline_graph(seed: u64) -> Result<GradCheckReport> {
    let spec = GeneratorSpec { dropout_p: 0.0, ..graph_generator_spec() };
    let u = generic_point(build_baseline_unet(&spec, &mut Rng::new(seed).fork(0))?.cast(), &mut Rng::new(seed).fork(3));
    let (x, _, mask) = graph_inputs(seed);
    let (names, tensors) = checked_tensors(&u);
    grad_check(
        |t, v| {
            let b = bound_from(t, &u, &names, v);
            let (xv, mv) = (t.constant(x.clone()), t.constant(mask.clone()));
            let logits = baseline_logits(t, &spec, &u, &b, xv, NormStats::Batch)?;
            pixel_bce_with_logits(t, logits.output, mv)
        },
        &tensors,
        STEP,
    )
}

/// Runs every op check and the three full-graph checks.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    for (k, (name, dims, f)) in op_cases().into_iter().enumerate() {
        let mut rng = Rng::new(seed).fork(100 + k as u64);
        let inputs: Vec<Tensor<f64>> = dims.iter().map(|d| sample(d, &mut rng)).collect();
        let report = grad_check(f, &inputs, STEP)?;
        cases.push(SuiteCase { name: name.to_string(), report, tolerance: OP_TOLERANCE });
    }
    for (name, report) in [
        ("graph/discriminator_loss", discriminator_graph(seed)?),
        ("graph/generator_total_loss", generator_graph(seed)?),
        ("graph/baseline_pixel_bce", baseline_graph(seed)?),
    ] {
        cases.push(SuiteCase { name: name.to_string(), report, tolerance: GRAPH_TOLERANCE });
    }
    Ok(cases)
}
