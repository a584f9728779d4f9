//! Central finite-difference gradient checks.
//!
//! [`check`] compares analytic gradients from [`Graph::backward`] with
//! central differences of the forward pass alone, so the two routes share
//! nothing but the forward code. Each element is differenced at three step
//! sizes and the largest step confirmed by the next smaller one is used, so
//! strongly curved losses do not drown in truncation error. [`suite`] runs the full battery used by the
//! `gradcheck` CLI subcommand and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Reduction, Var};
use crate::error::Result;
use crate::heads::{AttentionPool, HeadVariant, MilHeadSpec};
use crate::model::{Model, ModelSpec};
use crate::nn::{BackboneSpec, Bound, EncoderBlock, LayerNorm, Linear, MultiHeadSelfAttention, NormPlacement, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Central-difference steps, largest first.
pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Largest relative error over every element of every input.
///
/// `f` builds a scalar from the given input vars. Inputs are recorded as
/// gradient-requiring leaves; the forward is re-run for each perturbation.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out)[0];
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            let mut estimates = [0.0; STEPS.len()];
            for (est, h) in estimates.iter_mut().zip(STEPS) {
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&work)?;
                *est = (plus - minus) / (2.0 * h);
            }
            work[i].data_mut()[j] = orig;
            // The largest step whose estimate the next smaller step confirms,
            // up to the rounding noise of that smaller step.
            let confirmed = |k: usize| {
                let (a, b) = (estimates[k], estimates[k + 1]);
                let noise = 10.0 * f64::EPSILON * value.abs().max(1.0) / STEPS[k + 1];
                (a - b).abs() <= 1e-3 * a.abs().max(b.abs()).max(FLOOR) + noise
            };
            let k = (0..STEPS.len() - 1).find(|&k| confirmed(k)).unwrap_or(0);
            let numeric = estimates[k];
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape is consistent")
}

/// Σ rᵢ·yᵢ with fixed random weights, turning any output into a scalar.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(y).len();
    let w = g.constant(g.shape(y).to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const OP_TOLERANCE: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-3;

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        ("transpose", vec![vec![2, 3]], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, 3)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let m = g.mul(a, s)?;
            weighted_sum(g, m, 4)
        }),
        ("scale", vec![vec![4]], |g, v| {
            let y = g.scale(v[0], 0.37);
            weighted_sum(g, y, 5)
        }),
        ("add_row_bias", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            weighted_sum(g, y, 6)
        }),
        ("tanh", vec![vec![2, 3]], |g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, 7)
        }),
        ("sigmoid", vec![vec![2, 3]], |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, 8)
        }),
        ("relu", vec![vec![2, 3]], |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 9)
        }),
        ("exp", vec![vec![2, 3]], |g, v| {
            let y = g.exp(v[0]);
            weighted_sum(g, y, 10)
        }),
        ("log", vec![vec![2, 3]], |g, v| {
            // Shift into the positive domain: log(x² + 0.5).
            let sq = g.mul(v[0], v[0])?;
            let half = g.constant([2, 3], vec![0.5; 6])?;
            let pos = g.add(sq, half)?;
            let y = g.log(pos)?;
            weighted_sum(g, y, 11)
        }),
        ("softmax_axis0", vec![vec![3, 4]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y, 12)
        }),
        ("softmax_axis1", vec![vec![3, 4]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, 13)
        }),
        ("mean_pool", vec![vec![2, 3, 4]], |g, v| {
            let y = g.mean_pool(v[0], &[0, 2])?;
            weighted_sum(g, y, 14)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y, 15)
        }),
        ("narrow", vec![vec![3, 5]], |g, v| {
            let y = g.narrow(v[0], 1, 1, 3)?;
            weighted_sum(g, y, 16)
        }),
        ("select_rows", vec![vec![4, 3]], |g, v| {
            let y = g.select_rows(v[0], &[2, 0, 2])?;
            weighted_sum(g, y, 17)
        }),
        ("reshape", vec![vec![2, 6]], |g, v| {
            let y = g.reshape(v[0], [3, 4])?;
            weighted_sum(g, y, 18)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 19)
        }),
        ("cross_entropy_mean", vec![vec![4, 5]], |g, v| g.cross_entropy(v[0], &[0, 3, 9, 4], Reduction::Mean, Some(9))),
        ("cross_entropy_sum", vec![vec![4, 5]], |g, v| g.cross_entropy(v[0], &[1, 2, 2, 4], Reduction::Sum, None)),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, y, 20)
        }),
    ]
}

/// Runs every op case for `trials` random draws in [−2, 2].
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s, -2.0, 2.0)).collect();
                worst = worst.max(check(&inputs, f)?);
            }
            Ok(CaseResult {
                name: name.to_string(),
                trials,
                max_rel_err: worst,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

fn model_case(variant: HeadVariant, placement: NormPlacement, pyramid_scales: bool) -> ModelSpec {
    let stage_dims = if pyramid_scales { vec![4, 4] } else { vec![4] };
    let mut head = MilHeadSpec::new(variant, 3);
    head.attention_dim = 3;
    head.depth = 1;
    head.num_heads = 2;
    head.ffn_dim = Some(5);
    head.norm = placement;
    ModelSpec {
        backbone: BackboneSpec::Mlp { input_dim: 3, stage_dims },
        head,
    }
}

/// Checks d(loss)/d(every parameter and input) for a model, where the loss
/// combines bag cross-entropy and a summed instance cross-entropy with one
/// ignored row.
pub fn check_model(model: &Model<f64>, instances: &Tensor<f64>, bag_label: usize) -> Result<f64> {
    let k = instances.shape()[0];
    let classes = model.num_classes();
    let inst_targets: Vec<usize> = (0..k).map(|i| if i == 0 { classes } else { i % classes }).collect();
    let mut inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(instances.clone());
    let n = inputs.len() - 1;
    check(&inputs, |g, vars| {
        let p = Bound::from_vars(vars[..n].to_vec());
        let out = model.forward_var(g, &p, vars[n])?;
        let bag = g.cross_entropy(out.bag_logits, &[bag_label], Reduction::Mean, None)?;
        let inst = g.cross_entropy(out.instance_logits, &inst_targets, Reduction::Sum, Some(classes))?;
        let inst = g.scale(inst, 0.3);
        g.add(bag, inst)
    })
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

/// Layers, blocks and every head variant, `trials` random draws each.
pub fn composite_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |name: &str, worst: f64| {
        results.push(CaseResult {
            name: name.to_string(),
            trials,
            max_rel_err: worst,
            tolerance: BLOCK_TOLERANCE,
        })
    };

    type Build = fn(&mut ParamStore<f64>) -> Result<Box<dyn Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>>>;
    let layers: Vec<(&str, usize, Build)> = vec![
        ("linear", 4, |s| {
            let l = Linear::new(s, "lin", 4, 3, true, ParamGroup::Base);
            Ok(Box::new(move |g, p, x| l.forward(g, p, x)))
        }),
        ("layer_norm_layer", 4, |s| {
            let l = LayerNorm::new(s, "ln", 4, ParamGroup::Base);
            Ok(Box::new(move |g, p, x| l.forward(g, p, x)))
        }),
        ("multihead_self_attention", 4, |s| {
            let l = MultiHeadSelfAttention::new(s, "mhsa", 4, 2, ParamGroup::Transformer)?;
            Ok(Box::new(move |g, p, x| Ok(l.forward(g, p, x)?.output)))
        }),
        ("encoder_block_pre_norm", 4, |s| {
            let l = EncoderBlock::new(s, "enc", 4, 2, 6, NormPlacement::Pre)?;
            Ok(Box::new(move |g, p, x| Ok(l.forward(g, p, x)?.output)))
        }),
        ("encoder_block_post_norm", 4, |s| {
            let l = EncoderBlock::new(s, "enc", 4, 2, 6, NormPlacement::Post)?;
            Ok(Box::new(move |g, p, x| Ok(l.forward(g, p, x)?.output)))
        }),
        ("attention_pool", 4, |s| {
            let l = AttentionPool::new(s, 4, 3, false);
            Ok(Box::new(move |g, p, x| {
                let (z, a) = l.forward(g, p, x)?;
                let zs = weighted_sum(g, z, 31)?;
                let a_s = weighted_sum(g, a, 32)?;
                g.add(zs, a_s)
            }))
        }),
        ("gated_attention_pool", 4, |s| {
            let l = AttentionPool::new(s, 4, 3, true);
            Ok(Box::new(move |g, p, x| {
                let (z, a) = l.forward(g, p, x)?;
                let zs = weighted_sum(g, z, 33)?;
                let a_s = weighted_sum(g, a, 34)?;
                g.add(zs, a_s)
            }))
        }),
    ];
    for (name, dim, build) in layers {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let mut store = ParamStore::new(rng.random());
            let f = build(&mut store)?;
            randomize(&mut store, &mut rng);
            let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
            inputs.push(uniform(&mut rng, &[3, dim], -2.0, 2.0));
            let n = inputs.len() - 1;
            worst = worst.max(check(&inputs, |g, vars| {
                let p = Bound::from_vars(vars[..n].to_vec());
                let y = f(g, &p, vars[n])?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(g, y, 30)
                }
            })?);
        }
        record(name, worst);
    }

    let models = [
        ("model_max", model_case(HeadVariant::Max, NormPlacement::Pre, false)),
        ("model_attention", model_case(HeadVariant::Attention, NormPlacement::Pre, false)),
        ("model_gated_attention", model_case(HeadVariant::GatedAttention, NormPlacement::Pre, false)),
        ("model_transformer", model_case(HeadVariant::Transformer, NormPlacement::Pre, false)),
        ("model_transformer_post_norm", model_case(HeadVariant::Transformer, NormPlacement::Post, false)),
        ("model_pyramid_transformer", model_case(HeadVariant::PyramidTransformer, NormPlacement::Pre, true)),
    ];
    for (name, spec) in models {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let mut model = Model::<f64>::new(&spec, rng.random())?;
            randomize(model.params_mut(), &mut rng);
            let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
            let label = rng.random_range(0..3);
            worst = worst.max(check_model(&model, &x, label)?);
        }
        record(name, worst);
    }
    Ok(results)
}

/// Every op case followed by every composite case.
pub fn suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut all = op_suite(trials, seed)?;
    all.extend(composite_suite(trials, seed.wrapping_add(1))?);
    Ok(all)
}
