//! Prompt-as-prefix: a short text describing the task and the statistics of
//! the observed window, tokenized into ids of the frozen vocabulary.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{ForecastError, ModelConfig, Result, Variables};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Upward,
    Downward,
}

impl Trend {
    pub fn word(self) -> &'static str {
        match self {
            Trend::Upward => "upward",
            Trend::Downward => "downward",
        }
    }
}

/// Sign of the summed first differences (which telescopes to last − first).
pub fn trend_stat(series: &[f64]) -> Result<Trend> {
    if series.len() < 2 {
        return Err(ForecastError::Length(format!(
            "trend needs at least 2 points, got {}",
            series.len()
        )));
    }
    let sum: f64 = series.windows(2).map(|w| w[1] - w[0]).sum();
    Ok(if sum > 0.0 { Trend::Upward } else { Trend::Downward })
}

/// Unnormalized autocorrelation of the mean-removed series at lags
/// `0..len`, computed with a zero-padded FFT.
pub fn autocorrelation(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|&v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|z| z.re / size as f64).collect()
}

/// The `k` lags in `1..len` with the largest autocorrelation, sorted by
/// descending correlation; ties go to the smaller lag.
pub fn top_lags(series: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = series.len();
    if n < 2 || k == 0 || k > n - 1 {
        return Err(ForecastError::Length(format!(
            "top_lags needs 2 <= len and 1 <= k <= len-1 (len {n}, k {k})"
        )));
    }
    let acf = autocorrelation(series);
    // Values are quantized relative to lag 0 so FFT round-off cannot
    // reorder exact ties (a constant series has acf == 0 everywhere).
    let scale = if acf[0] > 1e-300 { acf[0] } else { 1.0 };
    let key = |lag: usize| (acf[lag] / scale * 1e9).round() as i64;
    let mut lags: Vec<usize> = (1..n).collect();
    lags.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
    lags.truncate(k);
    Ok(lags)
}

/// Deterministic text for one window. `x_raw` is row-major `c × u` in
/// model-input units (row 0 beam index / Q when present).
pub fn prompt_text(x_raw: &[f64], q_count: usize, cfg: &ModelConfig) -> Result<String> {
    let u = cfg.u_len;
    if x_raw.len() < u || x_raw.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::Shape(format!(
            "prompt needs a finite window of at least {u} values"
        )));
    }
    let primary = &x_raw[..u];
    let (label, values): (&str, Vec<i64>) = match cfg.variables {
        Variables::Aod => (
            "angle",
            primary.iter().map(|a| a.to_degrees().round() as i64).collect(),
        ),
        _ => (
            "beam",
            primary
                .iter()
                .map(|v| (v * q_count as f64).round() as i64)
                .collect(),
        ),
    };
    let mut sorted = values.clone();
    sorted.sort_unstable();
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    let median = sorted[(sorted.len() - 1) / 2];
    let trend = trend_stat(primary)?;
    let lags = top_lags(primary, 5.min(u - 1))?;
    let lag_text: Vec<String> = lags.iter().map(usize::to_string).collect();
    Ok(format!(
        "mmwave beam prediction , {q_count} dft beams . predict next {h} beams from last {u} . \
         {label} min {min} max {max} median {median} , trend {trend} , lags {lags}",
        h = cfg.h_len,
        trend = trend.word(),
        lags = lag_text.join(" "),
    ))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(PartialEq, Clone, Copy)]
enum Class {
    Alpha,
    Digit,
    Other,
}

fn class(c: char) -> Class {
    if c.is_ascii_digit() {
        Class::Digit
    } else if c.is_alphanumeric() {
        Class::Alpha
    } else {
        Class::Other
    }
}

/// Whitespace split, then runs of letters and runs of digits; any other
/// character is its own piece.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        let mut cur_class = None;
        for ch in word.chars() {
            let c = class(ch);
            if c == Class::Other || Some(c) != cur_class {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            cur.push(ch.to_ascii_lowercase());
            cur_class = Some(c);
            if c == Class::Other {
                out.push(std::mem::take(&mut cur));
                cur_class = None;
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn token_ids(text: &str, vocab_size: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .map(|t| (fnv1a(t.as_bytes()) % vocab_size as u64) as usize)
        .collect()
}

/// Prompt token ids for one window.
pub fn build_prompt(x_raw: &[f64], q_count: usize, cfg: &ModelConfig) -> Result<Vec<usize>> {
    Ok(token_ids(&prompt_text(x_raw, q_count, cfg)?, cfg.vocab_size))
}
