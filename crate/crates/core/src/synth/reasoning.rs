use super::{ContextWindow, MixtureSpec, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::student::{Frequency, LenBucket, Token, Trend, Vocabulary};

/// Number of most recent context values serialized into a prompt.
pub const PROMPT_VALUES: usize = 32;

const FLAT_SLOPE_RATIO: f64 = 1e-3;
const SEASONAL_ACF_THRESHOLD: f64 = 0.5;

/// Oracle trace: `[MODE_k, TREND_*, SEAS_*, EVENT_*, EOS]` built from the
/// true mode, which is always reported truthfully.
pub fn teacher_reasoning(window: &TimeSeriesWindow, spec: &MixtureSpec) -> Result<Vec<Token>> {
    let k = window
        .true_mode
        .ok_or_else(|| Error::Validation("teacher needs the window's true mode".into()))?;
    let mode = spec
        .modes
        .get(k)
        .ok_or_else(|| Error::Validation(format!("true mode {k} not in spec")))?;
    let trend = if mode.slope > 0.0 {
        Trend::Up
    } else if mode.slope < 0.0 {
        Trend::Down
    } else {
        Trend::Flat
    };
    Ok(vec![
        Token::Mode(k),
        Token::Trend(trend),
        Token::Seasonal(mode.amplitude != 0.0),
        Token::Event(window.event),
        Token::Eos,
    ])
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Least-squares `(slope, intercept)` against `0..n`.
fn linear_fit(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, xs.first().copied().unwrap_or(0.0));
    }
    let tm = (n - 1.0) / 2.0;
    let ym = mean(xs);
    let (mut num, mut den) = (0.0, 0.0);
    for (t, &y) in xs.iter().enumerate() {
        let dt = t as f64 - tm;
        num += dt * (y - ym);
        den += dt * dt;
    }
    let slope = num / den;
    (slope, ym - slope * tm)
}

fn trend_of(series: &[f64]) -> Trend {
    let tail = &series[series.len() - (series.len() / 2).max(2).min(series.len())..];
    let (slope, _) = linear_fit(tail);
    if slope.abs() <= FLAT_SLOPE_RATIO * std_pop(series) {
        Trend::Flat
    } else if slope > 0.0 {
        Trend::Up
    } else {
        Trend::Down
    }
}

/// True when the detrended autocorrelation has a local peak above 0.5 at
/// some lag ≥ 2.
fn is_seasonal(series: &[f64]) -> bool {
    let (slope, intercept) = linear_fit(series);
    let resid: Vec<f64> = series
        .iter()
        .enumerate()
        .map(|(t, v)| v - (intercept + slope * t as f64))
        .collect();
    let m = mean(&resid);
    let centered: Vec<f64> = resid.iter().map(|v| v - m).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom <= 1e-12 * series.len() as f64 {
        return false;
    }
    let max_lag = series.len() / 2;
    let acf: Vec<f64> = (0..=max_lag + 1)
        .map(|l| {
            if l >= centered.len() {
                return 0.0;
            }
            centered[..centered.len() - l]
                .iter()
                .zip(&centered[l..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect();
    (2..=max_lag).any(|l| acf[l] > SEASONAL_ACF_THRESHOLD && acf[l] > acf[l - 1] && acf[l] >= acf[l + 1])
}

/// History-only draft `[TREND_*, SEAS_*, EVENT_*]` computed on variate 0.
/// Never contains a mode token.
pub fn baseline_reasoning(ctx: &ContextWindow) -> Vec<Token> {
    let series = ctx.column(0);
    if series.is_empty() {
        return vec![
            Token::Trend(Trend::Flat),
            Token::Seasonal(false),
            Token::Event(ctx.event),
        ];
    }
    vec![
        Token::Trend(trend_of(&series)),
        Token::Seasonal(is_seasonal(&series)),
        Token::Event(ctx.event),
    ]
}

/// Uniform binning of `v` over `[min, max]`; a zero range maps to bin 0.
pub fn quantize(v: f64, min: f64, max: f64, bins: usize) -> usize {
    let range = max - min;
    if !(range > 0.0) {
        return 0;
    }
    let b = ((v - min) / range * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// `[BOS, FREQ, LEN, r_base …, SEP, BIN_* …, SEP]`. The draft sits ahead of
/// the values so every value position can attend to the event cue. When the prompt would
/// exceed `max_len`, the oldest value tokens are dropped first.
pub fn build_prompt(
    ctx: &ContextWindow,
    r_base: &[Token],
    vocab: &Vocabulary,
    frequency: Frequency,
    max_len: usize,
) -> Result<Vec<usize>> {
    let fixed = 4 + r_base.len() + 1;
    if fixed > max_len {
        return Err(Error::Length {
            len: fixed,
            max: max_len,
        });
    }
    let t = ctx.x.len();
    let v_count = ctx.n_variates().max(1);
    let per_variate = t.min(PROMPT_VALUES).min((max_len - fixed) / v_count);
    let bins = vocab.n_bins();
    if bins == 0 {
        return Err(Error::Vocabulary("vocabulary has no value bins".into()));
    }

    let mut tokens = vec![
        Token::Bos,
        Token::Freq(frequency),
        Token::Len(LenBucket::for_context(t)),
    ];
    tokens.extend_from_slice(r_base);
    tokens.push(Token::Sep);
    for v in 0..ctx.n_variates() {
        let col = ctx.column(v);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        tokens.extend(
            col[t - per_variate..]
                .iter()
                .map(|&x| Token::Bin(quantize(x, lo, hi, bins))),
        );
    }
    tokens.push(Token::Sep);
    vocab.encode(&tokens)
}
