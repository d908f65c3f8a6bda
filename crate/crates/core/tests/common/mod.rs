//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use beamcast::baselines::{Lstm, LstmConfig};
use beamcast::forecaster::{Forecaster, ModelConfig};
use beamcast::model::Model;
use beamcast::scenario::WindowedSample;
use beamcast::tensor::{grad_check, grad_check_param, Array, CounterRng, Tape, TensorError, Var};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: [u64; 3] = [11, 29, 47];

pub fn random(shape: &[usize], seed: u64, tag: &str) -> Array {
    let r = CounterRng::new(seed, tag);
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|i| 2.0 * r.uniform(i as u64) - 1.0).collect())
}

/// `sum(w ⊙ y)` with a fixed random `w`, so that ops whose plain sum is
/// constant (softmax, layer norm) still get a non-trivial check.
fn project(t: &mut Tape, y: Var, seed: u64) -> beamcast::tensor::Result<Var> {
    let w = t.constant(random(t.shape(y), seed ^ 0xabc, "proj"));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, Var, u64) -> beamcast::tensor::Result<Var>>;

/// (name, input shape, op applied to the checked input).
pub fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    fn c(t: &mut Tape, shape: &[usize], seed: u64, tag: &str) -> Var {
        t.constant(random(shape, seed, tag))
    }
    vec![
        ("matmul_lhs", vec![3, 4], Box::new(|t, x, s| {
            let b = c(t, &[4, 5], s, "b");
            t.matmul(x, b)
        })),
        ("matmul_rhs", vec![4, 5], Box::new(|t, x, s| {
            let a = c(t, &[3, 4], s, "a");
            t.matmul(a, x)
        })),
        ("transpose", vec![3, 4], Box::new(|t, x, _| t.transpose(x))),
        ("reshape", vec![3, 4], Box::new(|t, x, _| t.reshape(x, &[2, 6]))),
        ("flatten", vec![3, 4], Box::new(|t, x, _| t.flatten(x))),
        ("concat_rows", vec![2, 3], Box::new(|t, x, s| {
            let o = c(t, &[1, 3], s, "o");
            t.concat(&[o, x, x], 0)
        })),
        ("concat_cols", vec![2, 3], Box::new(|t, x, s| {
            let o = c(t, &[2, 2], s, "o");
            t.concat(&[x, o], 1)
        })),
        ("slice_rows", vec![4, 3], Box::new(|t, x, _| t.slice(x, 0, 1, 2))),
        ("slice_cols", vec![4, 3], Box::new(|t, x, _| t.slice(x, 1, 1, 2))),
        ("add", vec![3, 4], Box::new(|t, x, s| {
            let o = c(t, &[3, 4], s, "o");
            t.add(x, o)
        })),
        ("sub", vec![3, 4], Box::new(|t, x, s| {
            let o = c(t, &[3, 4], s, "o");
            t.sub(o, x)
        })),
        ("mul", vec![3, 4], Box::new(|t, x, s| {
            let o = c(t, &[3, 4], s, "o");
            let y = t.mul(x, o)?;
            t.mul(y, x)
        })),
        ("add_row", vec![1, 4], Box::new(|t, x, s| {
            let a = c(t, &[3, 4], s, "a");
            t.add_row(a, x)
        })),
        ("mul_row", vec![1, 4], Box::new(|t, x, s| {
            let a = c(t, &[3, 4], s, "a");
            t.mul_row(a, x)
        })),
        ("mul_row_lhs", vec![3, 4], Box::new(|t, x, s| {
            let r = c(t, &[1, 4], s, "r");
            t.mul_row(x, r)
        })),
        ("scale", vec![3, 4], Box::new(|t, x, _| Ok(t.scale(x, -1.7)))),
        ("add_scalar", vec![3, 4], Box::new(|t, x, _| {
            let y = t.add_scalar(x, 0.3);
            t.mul(y, y)
        })),
        ("softmax_rows", vec![3, 5], Box::new(|t, x, _| t.softmax(x, 1))),
        ("softmax_cols", vec![3, 5], Box::new(|t, x, _| t.softmax(x, 0))),
        ("layer_norm", vec![3, 6], Box::new(|t, x, _| t.layer_norm(x))),
        ("gelu", vec![3, 4], Box::new(|t, x, _| Ok(t.gelu(x)))),
        ("sigmoid", vec![3, 4], Box::new(|t, x, _| Ok(t.sigmoid(x)))),
        ("tanh", vec![3, 4], Box::new(|t, x, _| Ok(t.tanh(x)))),
        ("gather", vec![5, 3], Box::new(|t, x, _| t.gather(x, &[4, 0, 4, 2]))),
        ("sum", vec![3, 4], Box::new(|t, x, _| {
            let y = t.mul(x, x)?;
            let s = t.sum(y);
            t.reshape(s, &[1, 1])
        })),
        ("mean", vec![3, 4], Box::new(|t, x, _| {
            let y = t.mul(x, x)?;
            let s = t.mean(y);
            t.reshape(s, &[1, 1])
        })),
        ("mse", vec![3, 4], Box::new(|t, x, s| {
            let o = c(t, &[3, 4], s, "o");
            let m = t.mse(x, o)?;
            t.reshape(m, &[1, 1])
        })),
        ("attention_q", vec![2, 4], Box::new(|t, x, s| {
            let k = c(t, &[5, 4], s, "k");
            let v = c(t, &[5, 3], s, "v");
            t.attention(x, k, v)
        })),
        ("attention_k", vec![5, 4], Box::new(|t, x, s| {
            let q = c(t, &[2, 4], s, "q");
            let v = c(t, &[5, 3], s, "v");
            t.attention(q, x, v)
        })),
        ("attention_v", vec![5, 3], Box::new(|t, x, s| {
            let q = c(t, &[2, 4], s, "q");
            let k = c(t, &[5, 4], s, "k");
            t.attention(q, k, x)
        })),
    ]
}

/// Worst relative error of one op case at one seeded point.
pub fn op_error(shape: &[usize], op: &OpFn, seed: u64) -> f64 {
    let point = random(shape, seed, "x");
    grad_check(
        |t, x| {
            let y = op(t, x, seed)?;
            project(t, y, seed)
        },
        &point,
        EPS,
    )
    .expect("grad check runs")
}

/// A smooth synthetic window: beam row is a rounded sinusoid over Q=64.
pub fn window(u: usize, h: usize, phase: f32) -> WindowedSample {
    let mut x = Vec::with_capacity(2 * u);
    x.extend((0..u).map(|t| ((t as f32 * 0.37 + phase).sin() * 9.0 + 30.0).round() / 64.0));
    x.extend((0..u).map(|t| 0.45 + 0.006 * t as f32 + 0.03 * phase));
    let y = (0..h).map(|n| (31.0 + 0.5 * n as f32 + phase).round() / 64.0).collect();
    WindowedSample {
        c: 2,
        u,
        x,
        y,
        q_count: 64,
    }
}

fn model_loss<'a>(
    m: &'a dyn Model,
    batch: &'a [WindowedSample],
) -> impl Fn(&mut Tape, &beamcast::tensor::Bindings) -> beamcast::tensor::Result<Var> + 'a {
    move |t, b| {
        let refs: Vec<&WindowedSample> = batch.iter().collect();
        m.batch_loss(t, b, &refs)
            .map_err(|e| TensorError::Precondition(e.to_string()))
    }
}

pub fn lstm_errors(seed: u64) -> Vec<(String, f64)> {
    let cfg = LstmConfig {
        hidden_size: 5,
        layers: 2,
        u_len: 8,
        h_len: 3,
        seed,
    };
    let m = Lstm::new(cfg).expect("valid lstm");
    let batch = [window(8, 3, seed as f32 * 0.1), window(8, 3, 1.0 + seed as f32 * 0.1)];
    m.params()
        .trainable_names()
        .into_iter()
        .map(|name| {
            let e = grad_check_param(m.params(), &name, model_loss(&m, &batch), EPS).expect("grad check");
            (name, e)
        })
        .collect()
}

/// Reduced but complete forecaster (prompt on, two backbone layers).
pub fn grad_forecaster(seed: u64) -> Forecaster {
    Forecaster::new(ModelConfig {
        u_len: 16,
        h_len: 4,
        patch_len: 6,
        stride: 3,
        d_model: 8,
        n_heads: 2,
        backbone_dim: 16,
        backbone_layers: 2,
        backbone_heads: 2,
        vocab_size: 4096,
        n_prototypes: 10,
        seed,
        ..ModelConfig::default()
    })
    .expect("valid config")
}

pub fn forecaster_errors(seed: u64) -> Vec<(String, f64)> {
    let m = grad_forecaster(seed);
    let batch = [window(16, 4, seed as f32 * 0.2), window(16, 4, 2.0 + seed as f32 * 0.2)];
    ["out_proj.w", "cross_var.query"]
        .into_iter()
        .map(|name| {
            let e = grad_check_param(m.params(), name, model_loss(&m, &batch), EPS).expect("grad check");
            (name.to_string(), e)
        })
        .collect()
}
