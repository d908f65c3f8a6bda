//! Beam forecaster built around a frozen transformer backbone.
//!
//! Pipeline for one C×U window: RevIN → patching → shared linear patch
//! embedding → cross-variable attention with a learnable per-patch query →
//! multi-head reprogramming against text prototypes mixed from the frozen
//! vocabulary → `[prompt embeddings ; reprogrammed patches]` through the
//! frozen backbone → last P positions flattened and projected to H values.
//! Only the adapters around the backbone are trainable.

mod backbone;
mod patch;
mod prompt;
mod revin;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::spatial_frequency;
use crate::config::{ConfigError, KvMap};
use crate::model::Model;
use crate::scenario::WindowedSample;
use crate::tensor::{
    seeded_init, Array, Bindings, Init, ParamStore, Tape, TensorError, Var,
};

pub use backbone::backbone_forward;
pub use patch::{patch_count, patchify};
pub use prompt::{
    autocorrelation, build_prompt, prompt_text, token_ids, tokenize, top_lags, trend_stat, Trend,
};
pub use revin::{revin_denormalize, revin_normalize, RevinStats, REVIN_EPS};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] ConfigError),
}

pub type Result<T> = std::result::Result<T, ForecastError>;

/// Which rows of the (beam/Q, AoD) window the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variables {
    Both,
    Beam,
    Aod,
}

impl Variables {
    pub fn rows(self) -> &'static [usize] {
        match self {
            Variables::Both => &[0, 1],
            Variables::Beam => &[0],
            Variables::Aod => &[1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variables::Both => "both",
            Variables::Beam => "beam",
            Variables::Aod => "aod",
        }
    }
}

impl FromStr for Variables {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(Variables::Both),
            "beam" => Ok(Variables::Beam),
            "aod" => Ok(Variables::Aod),
            o => Err(format!("expected both, beam or aod, got `{o}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variables: Variables,
    pub u_len: usize,
    pub h_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub backbone_dim: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub n_prototypes: usize,
    pub use_prompt: bool,
    pub seed: u64,
    /// Seed of the frozen vocabulary and backbone; shared by every model
    /// variant so they reprogram the same "pretrained" network.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variables: Variables::Both,
            u_len: 40,
            h_len: 10,
            patch_len: 16,
            stride: 8,
            d_model: 32,
            n_heads: 4,
            backbone_dim: 64,
            backbone_layers: 2,
            backbone_heads: 4,
            max_positions: 128,
            vocab_size: 4096,
            n_prototypes: 100,
            use_prompt: true,
            seed: 0,
            backbone_seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn c_vars(&self) -> usize {
        self.variables.rows().len()
    }

    pub fn num_patches(&self) -> usize {
        patch_count(self.u_len, self.patch_len, self.stride)
    }

    /// Per-head width `floor(d_model / n_heads)`.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForecastError::Config(m));
        if self.u_len < 2 || self.h_len == 0 {
            return bad(format!("u_len {} / h_len {}", self.u_len, self.h_len));
        }
        if self.patch_len == 0 || self.stride == 0 || self.patch_len > self.u_len {
            return bad(format!(
                "patch_len {} must be in 1..=u_len {} with stride >= 1",
                self.patch_len, self.u_len
            ));
        }
        if self.n_heads == 0 || self.head_dim() == 0 {
            return bad(format!(
                "n_heads {} leaves no per-head width for d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.backbone_heads == 0 || self.backbone_dim % self.backbone_heads != 0 {
            return bad(format!(
                "backbone_dim {} must be divisible by backbone_heads {}",
                self.backbone_dim, self.backbone_heads
            ));
        }
        if self.n_prototypes == 0 || self.n_prototypes >= self.vocab_size {
            return bad(format!(
                "n_prototypes {} must be in 1..vocab_size {}",
                self.n_prototypes, self.vocab_size
            ));
        }
        Ok(())
    }

    /// Consumes the model keys of a config table.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            variables: kv.take_or("variables", d.variables)?,
            u_len: kv.take_or("u_len", d.u_len)?,
            h_len: kv.take_or("h_len", d.h_len)?,
            patch_len: kv.take_or("patch_len", d.patch_len)?,
            stride: kv.take_or("stride", d.stride)?,
            d_model: kv.take_or("d_model", d.d_model)?,
            n_heads: kv.take_or("n_heads", d.n_heads)?,
            backbone_dim: kv.take_or("backbone_dim", d.backbone_dim)?,
            backbone_layers: kv.take_or("backbone_layers", d.backbone_layers)?,
            backbone_heads: kv.take_or("backbone_heads", d.backbone_heads)?,
            max_positions: kv.take_or("max_positions", d.max_positions)?,
            vocab_size: kv.take_or("vocab_size", d.vocab_size)?,
            n_prototypes: kv.take_or("n_prototypes", d.n_prototypes)?,
            use_prompt: kv.take_or("use_prompt", d.use_prompt)?,
            seed: kv.take_or("model_seed", d.seed)?,
            backbone_seed: kv.take_or("backbone_seed", d.backbone_seed)?,
        };
        if let Some(c) = kv.take::<usize>("c_vars")? {
            if c != cfg.c_vars() {
                return Err(ForecastError::Config(format!(
                    "c_vars = {c} disagrees with variables = {}",
                    cfg.variables.name()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("variables", self.variables.name());
        kv.set("u_len", self.u_len);
        kv.set("h_len", self.h_len);
        kv.set("patch_len", self.patch_len);
        kv.set("stride", self.stride);
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("backbone_dim", self.backbone_dim);
        kv.set("backbone_layers", self.backbone_layers);
        kv.set("backbone_heads", self.backbone_heads);
        kv.set("max_positions", self.max_positions);
        kv.set("vocab_size", self.vocab_size);
        kv.set("n_prototypes", self.n_prototypes);
        kv.set("use_prompt", self.use_prompt);
        kv.set("model_seed", self.seed);
        kv.set("backbone_seed", self.backbone_seed);
        kv
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub revin_stats: Vec<RevinStats>,
    /// `[P, C, L_p]`
    pub patches: Array,
    /// `[P, C, d_m]`
    pub embedded: Array,
    /// `[P, d_m]`
    pub fused: Array,
    /// `[P, D]`
    pub reprogrammed: Array,
    /// `[T_prompt + P, D]`
    pub backbone_out: Array,
    /// `[H]`
    pub forecast_norm: Array,
    pub prompt_ids: Vec<usize>,
}

/// Inverts the normalization chain: RevIN of the target row, ×Q, round
/// half-up, clamp to `[0, Q-1]`.
pub fn postprocess(forecast_norm: &[f64], stats: &RevinStats, q_count: usize) -> Vec<usize> {
    forecast_norm
        .iter()
        .map(|&v| to_beam_index(stats.denormalize(v), q_count))
        .collect()
}

/// `value × Q`, rounded half-up and clamped to the codebook.
pub fn to_beam_index(normalized: f64, q_count: usize) -> usize {
    let top = q_count.saturating_sub(1) as f64;
    let q = (normalized * q_count as f64 + 0.5).floor();
    if q.is_nan() {
        0
    } else {
        q.clamp(0.0, top) as usize
    }
}

/// `(1/H) Σ (ŷ_n − y_n)^2`.
pub fn loss(pred_norm: &[f64], target_norm: &[f64]) -> Result<f64> {
    if pred_norm.len() != target_norm.len() || pred_norm.is_empty() {
        return Err(ForecastError::Length(format!(
            "loss over {} predictions and {} targets",
            pred_norm.len(),
            target_norm.len()
        )));
    }
    Ok(pred_norm
        .iter()
        .zip(target_norm)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred_norm.len() as f64)
}

/// Model inputs derived from one raw window.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    /// RevIN-normalized selected rows, `c × u`.
    pub x_norm: Vec<f64>,
    pub stats: Vec<RevinStats>,
    /// Statistics that map the forecast back to beam/Q.
    pub target: RevinStats,
    pub prompt_ids: Vec<usize>,
}

impl PreparedInput {
    /// Statistics of the row the forecast is expressed in.
    pub fn target_stats(&self) -> &RevinStats {
        &self.target
    }
}

/// Selects the configured rows of a raw 2×U window and applies RevIN.
pub fn select_and_normalize(x_raw: &[f32], u: usize, vars: Variables) -> (Vec<f64>, Vec<RevinStats>) {
    let rows: Vec<f64> = vars
        .rows()
        .iter()
        .flat_map(|&r| x_raw[r * u..(r + 1) * u].iter().map(|&v| v as f64))
        .collect();
    revin_normalize(&rows, vars.rows().len())
}

/// Prompt text and token ids for a raw 2×U window under `cfg`.
pub fn window_prompt(x_raw: &[f32], q_count: usize, cfg: &ModelConfig) -> Result<(String, Vec<usize>)> {
    let u = cfg.u_len;
    if x_raw.len() != 2 * u {
        return Err(ForecastError::Shape(format!(
            "expected a 2x{u} window, got {} values",
            x_raw.len()
        )));
    }
    let rows: Vec<f64> = cfg
        .variables
        .rows()
        .iter()
        .flat_map(|&r| x_raw[r * u..(r + 1) * u].iter().map(|&v| v as f64))
        .collect();
    let text = prompt_text(&rows, q_count, cfg)?;
    let ids = token_ids(&text, cfg.vocab_size);
    Ok((text, ids))
}

/// Per-batch values shared by every sample: prototype keys/values per head.
struct Shared {
    proto_kv: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn mk(store: &mut ParamStore, name: &str, shape: &[usize], init: Init, seed: u64, trainable: bool) -> Result<()> {
    store.insert(name, seeded_init(name, shape, init, seed), trainable)?;
    Ok(())
}

impl Forecaster {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let (dm, d, dd, k) = (cfg.d_model, cfg.head_dim(), cfg.backbone_dim, cfg.n_heads);
        let p = cfg.num_patches();
        let seed = cfg.seed;

        backbone::init_frozen(&mut s, &cfg)?;

        mk(&mut s, "patch_embed.w", &[cfg.patch_len, dm], Init::UniformScaled, seed, true)?;
        mk(&mut s, "patch_embed.b", &[dm], Init::Zeros, seed, true)?;
        mk(&mut s, "cross_var.query", &[p, 1, dm], Init::Uniform(1.0), seed, true)?;
        for w in ["wq", "wk", "wv", "wo"] {
            mk(&mut s, &format!("cross_var.{w}"), &[dm, dm], Init::UniformScaled, seed, true)?;
        }
        mk(
            &mut s,
            "prototype_mixer",
            &[cfg.n_prototypes, cfg.vocab_size],
            Init::Uniform(1.0 / (cfg.vocab_size as f32).sqrt()),
            seed,
            true,
        )?;
        for h in 0..k {
            mk(&mut s, &format!("reprogram.h{h}.wq"), &[dm, d], Init::UniformScaled, seed, true)?;
            mk(&mut s, &format!("reprogram.h{h}.wk"), &[dd, d], Init::UniformScaled, seed, true)?;
            mk(&mut s, &format!("reprogram.h{h}.wv"), &[dd, d], Init::UniformScaled, seed, true)?;
        }
        if k * d != dm {
            mk(&mut s, "reprogram.merge.w", &[k * d, dm], Init::UniformScaled, seed, true)?;
            mk(&mut s, "reprogram.merge.b", &[dm], Init::Zeros, seed, true)?;
        }
        mk(&mut s, "reprogram.out.w", &[dm, dd], Init::UniformScaled, seed, true)?;
        mk(&mut s, "reprogram.out.b", &[dd], Init::Zeros, seed, true)?;
        mk(&mut s, "out_proj.w", &[p * dd, cfg.h_len], Init::UniformScaled, seed, true)?;
        mk(&mut s, "out_proj.b", &[cfg.h_len], Init::Zeros, seed, true)?;
        Ok(Self { cfg, params: s })
    }

    /// Checksums of (vocabulary, backbone, prompt embedder). The prompt
    /// embedder is a lookup into the vocabulary table.
    pub fn frozen_checksums(&self) -> [String; 3] {
        let vocab = self.params.checksum(|n, _| n == "vocab");
        let backbone = self.params.checksum(|n, _| n.starts_with("backbone."));
        [vocab.clone(), backbone, vocab]
    }

    pub fn prepare(&self, x_raw: &[f32], q_count: usize) -> Result<PreparedInput> {
        let u = self.cfg.u_len;
        if x_raw.len() != 2 * u {
            return Err(ForecastError::Shape(format!(
                "expected a 2x{u} window, got {} values",
                x_raw.len()
            )));
        }
        let (x_norm, stats) = select_and_normalize(x_raw, u, self.cfg.variables);
        // Without a beam row the forecast lives in the AoD row's normalized
        // units; its statistics are taken on the beam/Q scale the angles map to.
        let target = match self.cfg.variables {
            Variables::Aod => {
                let fr: Vec<f64> = x_raw[u..2 * u].iter().map(|&a| spatial_frequency(a as f64)).collect();
                RevinStats::of(&fr)
            }
            _ => stats[0],
        };
        let prompt_ids = if self.cfg.use_prompt {
            window_prompt(x_raw, q_count, &self.cfg)?.1
        } else {
            Vec::new()
        };
        Ok(PreparedInput {
            x_norm,
            stats,
            target,
            prompt_ids,
        })
    }

    fn shared(&self, tape: &mut Tape, b: &Bindings) -> Result<Shared> {
        let vocab = b.get("vocab")?;
        let mixer = b.get("prototype_mixer")?;
        let protos = tape.matmul(mixer, vocab)?;
        let mut proto_kv = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let wk = b.get(&format!("reprogram.h{h}.wk"))?;
            let wv = b.get(&format!("reprogram.h{h}.wv"))?;
            let kk = tape.matmul(protos, wk)?;
            let vv = tape.matmul(protos, wv)?;
            proto_kv.push((kk, vv));
        }
        Ok(Shared { proto_kv })
    }

    /// Records one sample's graph; returns the `[1, H]` forecast and the
    /// vars of the intermediate stages in trace order.
    fn sample_graph(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        shared: &Shared,
        input: &PreparedInput,
    ) -> Result<(Var, [Var; 6])> {
        let cfg = &self.cfg;
        let (c, u, lp, dm) = (cfg.c_vars(), cfg.u_len, cfg.patch_len, cfg.d_model);
        let p = cfg.num_patches();

        let patches = patchify(&input.x_norm, c, u, lp, cfg.stride)?;
        let patches = tape.constant(Array::new(vec![p * c, lp], patches));

        let emb = tape.matmul(patches, b.get("patch_embed.w")?)?;
        let emb = tape.add_row(emb, b.get("patch_embed.b")?)?;

        // cross-variable attention, one query per patch
        let r = tape.reshape(b.get("cross_var.query")?, &[p, dm])?;
        let q_all = tape.matmul(r, b.get("cross_var.wq")?)?;
        let k_all = tape.matmul(emb, b.get("cross_var.wk")?)?;
        let v_all = tape.matmul(emb, b.get("cross_var.wv")?)?;
        let mut rows = Vec::with_capacity(p);
        for i in 0..p {
            let qi = tape.slice(q_all, 0, i, 1)?;
            let ki = tape.slice(k_all, 0, i * c, c)?;
            let vi = tape.slice(v_all, 0, i * c, c)?;
            rows.push(tape.attention(qi, ki, vi)?);
        }
        let attended = tape.concat(&rows, 0)?;
        let fused = tape.matmul(attended, b.get("cross_var.wo")?)?;

        // reprogramming against the text prototypes
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for (h, &(kk, vv)) in shared.proto_kv.iter().enumerate() {
            let qh = tape.matmul(fused, b.get(&format!("reprogram.h{h}.wq"))?)?;
            heads.push(tape.attention(qh, kk, vv)?);
        }
        let mut z = tape.concat(&heads, 1)?;
        if cfg.n_heads * cfg.head_dim() != dm {
            z = tape.matmul(z, b.get("reprogram.merge.w")?)?;
            z = tape.add_row(z, b.get("reprogram.merge.b")?)?;
        }
        let o = tape.matmul(z, b.get("reprogram.out.w")?)?;
        let o = tape.add_row(o, b.get("reprogram.out.b")?)?;

        let seq = if input.prompt_ids.is_empty() {
            o
        } else {
            let prompt = tape.gather(b.get("vocab")?, &input.prompt_ids)?;
            tape.concat(&[prompt, o], 0)?
        };
        let out = backbone_forward(tape, b, cfg, seq)?;
        let t_total = tape.shape(out)[0];
        let tail = tape.slice(out, 0, t_total - p, p)?;
        let flat = tape.flatten(tail)?;
        let y = tape.matmul(flat, b.get("out_proj.w")?)?;
        let y = tape.add_row(y, b.get("out_proj.b")?)?;
        if tape.check_finite(y, "forecaster output").is_err() {
            return Err(ForecastError::NonFinite("forecaster output".into()));
        }
        Ok((y, [patches, emb, fused, o, out, y]))
    }

    /// Full forward pass for one raw 2×U window.
    pub fn forward(&self, x_raw: &[f32], q_count: usize) -> Result<(Vec<f64>, ForwardTrace)> {
        let input = self.prepare(x_raw, q_count)?;
        let mut tape = Tape::new();
        let b = self.params.bind_with(&mut tape, |_, _| false, |_| None);
        let shared = self.shared(&mut tape, &b)?;
        let (y, [patches, emb, fused, o, out, _]) = self.sample_graph(&mut tape, &b, &shared, &input)?;
        let cfg = &self.cfg;
        let (p, c) = (cfg.num_patches(), cfg.c_vars());
        let reshaped = |v: Var, shape: Vec<usize>| Array::new(shape, tape.value(v).data.clone());
        let forecast = tape.value(y).data.clone();
        let trace = ForwardTrace {
            revin_stats: input.stats.clone(),
            patches: reshaped(patches, vec![p, c, cfg.patch_len]),
            embedded: reshaped(emb, vec![p, c, cfg.d_model]),
            fused: tape.value(fused).clone(),
            reprogrammed: tape.value(o).clone(),
            backbone_out: tape.value(out).clone(),
            forecast_norm: Array::new(vec![cfg.h_len], forecast.clone()),
            prompt_ids: input.prompt_ids,
        };
        Ok((forecast, trace))
    }

    /// Targets of a sample in the model's normalized output space.
    pub fn normalized_target(&self, s: &WindowedSample, stats: &RevinStats) -> Vec<f64> {
        s.y.iter().map(|&v| stats.normalize(v as f64)).collect()
    }

    /// Mean over the batch of the per-sample MSE in normalized space.
    pub fn batch_loss_on(&self, tape: &mut Tape, b: &Bindings, batch: &[&WindowedSample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(ForecastError::Length("empty batch".into()));
        }
        let shared = self.shared(tape, b)?;
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * self.cfg.h_len);
        for s in batch {
            let input = self.prepare(&s.x, s.q_count)?;
            let (y, _) = self.sample_graph(tape, b, &shared, &input)?;
            preds.push(y);
            targets.extend(self.normalized_target(s, input.target_stats()));
        }
        let pred = tape.concat(&preds, 0)?;
        let target = tape.constant(Array::new(vec![batch.len(), self.cfg.h_len], targets));
        Ok(tape.mse(pred, target)?)
    }

    /// Beam indices for the H future slots.
    pub fn predict_indices(&self, x_raw: &[f32], q_count: usize) -> Result<Vec<usize>> {
        let input = self.prepare(x_raw, q_count)?;
        let mut tape = Tape::new();
        let b = self.params.bind_with(&mut tape, |_, _| false, |_| None);
        let shared = self.shared(&mut tape, &b)?;
        let (y, _) = self.sample_graph(&mut tape, &b, &shared, &input)?;
        Ok(postprocess(&tape.value(y).data, input.target_stats(), q_count))
    }
}

impl Model for Forecaster {
    fn kind(&self) -> &'static str {
        "forecaster"
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn horizon(&self) -> usize {
        self.cfg.h_len
    }

    fn window(&self) -> usize {
        self.cfg.u_len
    }

    fn batch_loss(&self, tape: &mut Tape, b: &Bindings, batch: &[&WindowedSample]) -> Result<Var> {
        self.batch_loss_on(tape, b, batch)
    }

    fn predict_batch(&self, windows: &[(&[f32], usize)]) -> Result<Vec<Vec<usize>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let b = self.params.bind_with(&mut tape, |_, _| false, |_| None);
        let shared = self.shared(&mut tape, &b)?;
        let base = tape.len();
        let mut out = Vec::with_capacity(windows.len());
        for &(x, q) in windows {
            let input = self.prepare(x, q)?;
            let (y, _) = self.sample_graph(&mut tape, &b, &shared, &input)?;
            out.push(postprocess(&tape.value(y).data, input.target_stats(), q));
            tape.truncate(base);
        }
        Ok(out)
    }

    fn config_kv(&self) -> KvMap {
        self.cfg.to_kv()
    }
}
