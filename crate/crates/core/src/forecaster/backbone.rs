//! Frozen pre-norm transformer standing in for the pretrained language model.

use super::{ForecastError, ModelConfig, Result};
use crate::tensor::{seeded_init, Bindings, Init, ParamStore, Tape, Var};

pub(crate) fn init_frozen(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let seed = cfg.backbone_seed;
    let d = cfg.backbone_dim;
    let mut add = |name: String, shape: &[usize], init: Init| {
        store.insert(&name, seeded_init(&name, shape, init, seed), false)
    };
    add("vocab".into(), &[cfg.vocab_size, d], Init::Uniform(1.0))?;
    add("backbone.pos".into(), &[cfg.max_positions, d], Init::Uniform(0.1))?;
    for l in 0..cfg.backbone_layers {
        let p = format!("backbone.l{l}");
        add(format!("{p}.ln1.g"), &[d], Init::Ones)?;
        add(format!("{p}.ln1.b"), &[d], Init::Zeros)?;
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}.attn.{w}"), &[d, d], Init::UniformScaled)?;
        }
        add(format!("{p}.ln2.g"), &[d], Init::Ones)?;
        add(format!("{p}.ln2.b"), &[d], Init::Zeros)?;
        add(format!("{p}.ffn.w1"), &[d, 4 * d], Init::UniformScaled)?;
        add(format!("{p}.ffn.b1"), &[4 * d], Init::Zeros)?;
        add(format!("{p}.ffn.w2"), &[4 * d, d], Init::UniformScaled)?;
        add(format!("{p}.ffn.b2"), &[d], Init::Zeros)?;
    }
    add("backbone.lnf.g".into(), &[d], Init::Ones)?;
    add("backbone.lnf.b".into(), &[d], Init::Zeros)?;
    Ok(())
}

fn norm(tape: &mut Tape, b: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let n = tape.mul_row(n, b.get(&format!("{prefix}.g"))?)?;
    Ok(tape.add_row(n, b.get(&format!("{prefix}.b"))?)?)
}

fn self_attention(tape: &mut Tape, b: &Bindings, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let q = tape.matmul(x, b.get(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(x, b.get(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(x, b.get(&format!("{prefix}.wv"))?)?;
    let d = tape.shape(q)[1] / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * d, d)?;
        let kh = tape.slice(k, 1, h * d, d)?;
        let vh = tape.slice(v, 1, h * d, d)?;
        outs.push(tape.attention(qh, kh, vh)?);
    }
    let cat = tape.concat(&outs, 1)?;
    Ok(tape.matmul(cat, b.get(&format!("{prefix}.wo"))?)?)
}

/// Runs a `[T, D]` sequence through the frozen stack.
pub fn backbone_forward(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, seq: Var) -> Result<Var> {
    let t = tape.shape(seq)[0];
    if t > cfg.max_positions {
        return Err(ForecastError::Length(format!(
            "sequence of {t} tokens exceeds {} positions",
            cfg.max_positions
        )));
    }
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather(b.get("backbone.pos")?, &positions)?;
    let mut x = tape.add(seq, pos)?;
    for l in 0..cfg.backbone_layers {
        let p = format!("backbone.l{l}");
        let n = norm(tape, b, x, &format!("{p}.ln1"))?;
        let a = self_attention(tape, b, n, &format!("{p}.attn"), cfg.backbone_heads)?;
        x = tape.add(x, a)?;
        let n = norm(tape, b, x, &format!("{p}.ln2"))?;
        let f = tape.matmul(n, b.get(&format!("{p}.ffn.w1"))?)?;
        let f = tape.add_row(f, b.get(&format!("{p}.ffn.b1"))?)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, b.get(&format!("{p}.ffn.w2"))?)?;
        let f = tape.add_row(f, b.get(&format!("{p}.ffn.b2"))?)?;
        x = tape.add(x, f)?;
    }
    norm(tape, b, x, "backbone.lnf")
}
