//! Comparator predictors: persistence, least-squares linear extrapolation and
//! an LSTM encoder with a linear head over the same (beam, AoD) window.

use crate::config::KvMap;
use crate::forecaster::{
    postprocess, select_and_normalize, to_beam_index, ForecastError, Result, RevinStats, Variables,
};
use crate::model::Model;
use crate::scenario::WindowedSample;
use crate::tensor::{seeded_init, Array, Bindings, Init, ParamStore, Tape, Var};

/// Last observed beam index of a raw 2×U window (row 0 holds beam / Q).
pub fn last_beam(x: &[f32], u: usize, q_count: usize) -> usize {
    to_beam_index(x[u - 1] as f64, q_count)
}

/// Repeats the last observed beam `h` times.
pub fn persistence_predict(x: &[f32], u: usize, h: usize, q_count: usize) -> Vec<usize> {
    if u == 0 || x.len() < u {
        return Vec::new();
    }
    vec![last_beam(x, u, q_count); h]
}

/// Fits a least-squares line to the U normalized beam values and
/// extrapolates it `h` steps past the window.
pub fn linear_extrapolate(x: &[f32], u: usize, h: usize, q_count: usize) -> Result<Vec<usize>> {
    if u < 2 || x.len() < u {
        return Err(ForecastError::Length(format!(
            "linear extrapolation needs at least 2 observed slots, got {u}"
        )));
    }
    let ys: Vec<f64> = x[..u].iter().map(|&v| v as f64).collect();
    let n = u as f64;
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in ys.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok((1..=h)
        .map(|k| {
            let t = (u - 1 + k) as f64;
            to_beam_index(y_mean + slope * (t - t_mean), q_count)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub u_len: usize,
    pub h_len: usize,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            layers: 2,
            u_len: 40,
            h_len: 10,
            seed: 0,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.layers == 0 || self.u_len == 0 || self.h_len == 0 {
            return Err(ForecastError::Config(format!(
                "lstm needs hidden_size, layers, u_len and h_len >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            hidden_size: kv.take_or("hidden_size", d.hidden_size)?,
            layers: kv.take_or("layers", d.layers)?,
            u_len: kv.take_or("u_len", d.u_len)?,
            h_len: kv.take_or("h_len", d.h_len)?,
            seed: kv.take_or("model_seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("hidden_size", self.hidden_size);
        kv.set("layers", self.layers);
        kv.set("u_len", self.u_len);
        kv.set("h_len", self.h_len);
        kv.set("model_seed", self.seed);
        kv
    }
}

/// Gate activations of one cell step, kept for inspection.
#[derive(Debug, Clone)]
pub struct GateTrace {
    /// Input, forget and output gates concatenated.
    pub gates: Vec<f64>,
    pub candidate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub cfg: LstmConfig,
    pub params: ParamStore,
}

const INPUTS: usize = 2;

impl Lstm {
    pub fn new(cfg: LstmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let hs = cfg.hidden_size;
        for l in 0..cfg.layers {
            let input = if l == 0 { INPUTS } else { hs };
            for (name, shape, init) in [
                (format!("lstm.l{l}.wx"), vec![input, 4 * hs], Init::UniformScaled),
                (format!("lstm.l{l}.wh"), vec![hs, 4 * hs], Init::UniformScaled),
                (format!("lstm.l{l}.b"), vec![4 * hs], Init::Zeros),
            ] {
                s.insert(&name, seeded_init(&name, &shape, init, cfg.seed), true)?;
            }
        }
        s.insert("head.w", seeded_init("head.w", &[hs, cfg.h_len], Init::UniformScaled, cfg.seed), true)?;
        s.insert("head.b", seeded_init("head.b", &[cfg.h_len], Init::Zeros, cfg.seed), true)?;
        Ok(Self { cfg, params: s })
    }

    fn normalized(&self, x: &[f32]) -> Result<(Vec<f64>, Vec<RevinStats>)> {
        let u = self.cfg.u_len;
        if x.len() != INPUTS * u {
            return Err(ForecastError::Shape(format!(
                "lstm expects a 2x{u} window, got {} values",
                x.len()
            )));
        }
        Ok(select_and_normalize(x, u, Variables::Both))
    }

    /// Records the encoder and head; returns `[1, H]` normalized outputs.
    fn graph(&self, tape: &mut Tape, b: &Bindings, xn: &[f64], mut trace: Option<&mut Vec<GateTrace>>) -> Result<Var> {
        let (u, hs) = (self.cfg.u_len, self.cfg.hidden_size);
        // column t of the normalized window is the input at step t
        let mut seq: Vec<Var> = (0..u)
            .map(|t| tape.constant(Array::new(vec![1, INPUTS], vec![xn[t], xn[u + t]])))
            .collect();
        for l in 0..self.cfg.layers {
            let wx = b.get(&format!("lstm.l{l}.wx"))?;
            let wh = b.get(&format!("lstm.l{l}.wh"))?;
            let bias = b.get(&format!("lstm.l{l}.b"))?;
            let mut h = tape.constant(Array::zeros(&[1, hs]));
            let mut c = tape.constant(Array::zeros(&[1, hs]));
            for x_t in seq.iter_mut() {
                let zx = tape.matmul(*x_t, wx)?;
                let zh = tape.matmul(h, wh)?;
                let z = tape.add(zx, zh)?;
                let z = tape.add_row(z, bias)?;
                let zi = tape.slice(z, 1, 0, hs)?;
                let zf = tape.slice(z, 1, hs, hs)?;
                let zg = tape.slice(z, 1, 2 * hs, hs)?;
                let zo = tape.slice(z, 1, 3 * hs, hs)?;
                let i = tape.sigmoid(zi);
                let f = tape.sigmoid(zf);
                let g = tape.tanh(zg);
                let o = tape.sigmoid(zo);
                if let Some(tr) = trace.as_deref_mut() {
                    let mut gates = tape.value(i).data.clone();
                    gates.extend_from_slice(&tape.value(f).data);
                    gates.extend_from_slice(&tape.value(o).data);
                    tr.push(GateTrace {
                        gates,
                        candidate: tape.value(g).data.clone(),
                    });
                }
                let fc = tape.mul(f, c)?;
                let ig = tape.mul(i, g)?;
                c = tape.add(fc, ig)?;
                let tc = tape.tanh(c);
                h = tape.mul(o, tc)?;
                *x_t = h;
            }
        }
        let last = *seq.last().expect("u_len >= 1");
        let y = tape.matmul(last, b.get("head.w")?)?;
        Ok(tape.add_row(y, b.get("head.b")?)?)
    }

    /// H normalized values for a raw 2×U window.
    pub fn forecast(&self, x: &[f32]) -> Result<Vec<f64>> {
        let (xn, _) = self.normalized(x)?;
        let mut tape = Tape::new();
        let b = self.params.bind_with(&mut tape, |_, _| false, |_| None);
        let y = self.graph(&mut tape, &b, &xn, None)?;
        Ok(tape.value(y).data.clone())
    }

    /// Gate activations of every cell step for one window.
    pub fn gate_trace(&self, x: &[f32]) -> Result<Vec<GateTrace>> {
        let (xn, _) = self.normalized(x)?;
        let mut tape = Tape::new();
        let b = self.params.bind_with(&mut tape, |_, _| false, |_| None);
        let mut trace = Vec::new();
        self.graph(&mut tape, &b, &xn, Some(&mut trace))?;
        Ok(trace)
    }
}

impl Model for Lstm {
    fn kind(&self) -> &'static str {
        "lstm"
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
        if batch.is_empty() {
            return Err(ForecastError::Length("empty batch".into()));
        }
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * self.cfg.h_len);
        for s in batch {
            let (xn, stats) = self.normalized(&s.x)?;
            preds.push(self.graph(tape, b, &xn, None)?);
            targets.extend(s.y.iter().map(|&v| stats[0].normalize(v as f64)));
        }
        let pred = tape.concat(&preds, 0)?;
        let target = tape.constant(Array::new(vec![batch.len(), self.cfg.h_len], targets));
        Ok(tape.mse(pred, target)?)
    }

    fn predict_batch(&self, windows: &[(&[f32], usize)]) -> Result<Vec<Vec<usize>>> {
        windows
            .iter()
            .map(|&(x, q)| {
                let (_, stats) = self.normalized(x)?;
                Ok(postprocess(&self.forecast(x)?, &stats[0], q))
            })
            .collect()
    }

    fn config_kv(&self) -> KvMap {
        self.cfg.to_kv()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_param, Tensor, TensorError};
    use proptest::prelude::*;

    fn window(beams: &[usize], q: usize) -> Vec<f32> {
        let mut x: Vec<f32> = beams.iter().map(|&b| b as f32 / q as f32).collect();
        x.extend((0..beams.len()).map(|t| 0.3 + 0.01 * t as f32));
        x
    }

    fn small() -> LstmConfig {
        LstmConfig {
            hidden_size: 5,
            layers: 2,
            u_len: 6,
            h_len: 3,
            seed: 3,
        }
    }

    #[test]
    fn persistence_repeats_last_beam() {
        let mut beams = vec![3; 40];
        beams[39] = 17;
        assert_eq!(persistence_predict(&window(&beams, 64), 40, 10, 64), vec![17; 10]);
        assert!(persistence_predict(&window(&beams, 64), 40, 0, 64).is_empty());
    }

    #[test]
    fn linear_fit_is_exact_on_lines() {
        let x: Vec<f32> = (0..40).map(|t| (10.2 + 0.5 * t as f32) / 64.0).collect();
        let out = linear_extrapolate(&x, 40, 4, 64).unwrap();
        // last value 29.7, slope 0.5 beams per slot
        assert_eq!(out, vec![30, 31, 31, 32]);
        let flat = window(&[9; 40], 64);
        assert_eq!(linear_extrapolate(&flat, 40, 10, 64).unwrap(), vec![9; 10]);
        let steep: Vec<f32> = (0..40).map(|t| (20.0 + t as f32) / 64.0).collect();
        assert_eq!(*linear_extrapolate(&steep, 40, 10, 64).unwrap().last().unwrap(), 63);
        assert!(linear_extrapolate(&[0.5], 1, 3, 64).is_err());
    }

    #[test]
    fn lstm_zero_weights_emit_head_bias() {
        let mut m = Lstm::new(small()).unwrap();
        for name in m.params.trainable_names() {
            let shape = m.params.tensor(&name).unwrap().shape().to_vec();
            m.params.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        m.params
            .set("head.b", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let y = m.forecast(&window(&[4, 5, 6, 7, 8, 9], 64)).unwrap();
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn lstm_default_shape() {
        let m = Lstm::new(LstmConfig::default()).unwrap();
        let beams: Vec<usize> = (0..40).map(|t| 10 + t / 4).collect();
        assert_eq!(m.forecast(&window(&beams, 64)).unwrap().len(), 10);
        assert!(m.forecast(&[0.1; 10]).is_err());
    }

    #[test]
    fn lstm_loss_gradients_match_central_differences() {
        let m = Lstm::new(small()).unwrap();
        let s = WindowedSample {
            c: 2,
            u: 6,
            x: window(&[4, 6, 5, 9, 8, 11], 64),
            y: vec![12.0 / 64.0, 13.0 / 64.0, 12.0 / 64.0],
            q_count: 64,
        };
        for name in ["lstm.l0.wx", "lstm.l1.wh", "lstm.l0.b", "head.w"] {
            let err = grad_check_param(
                &m.params,
                name,
                |t, b| {
                    m.batch_loss(t, b, &[&s])
                        .map_err(|e| TensorError::Precondition(e.to_string()))
                },
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    proptest! {
        #[test]
        fn gates_stay_in_range(beams in proptest::collection::vec(0usize..64, 6), seed in 0u64..50) {
            let m = Lstm::new(LstmConfig { seed, ..small() }).unwrap();
            for step in m.gate_trace(&window(&beams, 64)).unwrap() {
                prop_assert!(step.gates.iter().all(|&g| g > 0.0 && g < 1.0));
                prop_assert!(step.candidate.iter().all(|&g| g > -1.0 && g < 1.0));
            }
        }

        #[test]
        fn baselines_emit_valid_indices(beams in proptest::collection::vec(0usize..32, 8), h in 0usize..12) {
            let x = window(&beams, 32);
            prop_assert!(persistence_predict(&x, 8, h, 32).iter().all(|&q| q < 32));
            prop_assert!(linear_extrapolate(&x, 8, h, 32).unwrap().iter().all(|&q| q < 32));
            let m = Lstm::new(LstmConfig { u_len: 8, h_len: 4, ..small() }).unwrap();
            prop_assert!(m.predict_batch(&[(&x, 32)]).unwrap()[0].iter().all(|&q| q < 32));
        }
    }
}
