//! Positional schemes: absolute sinusoidal embeddings, rotary maps, and the
//! additive temporal-bias family (ALiBi and its slope variants, windowed
//! masks, Sandwich, fixed log bias).
//!
//! All bias constructions here are distance-stationary, so a `BiasSet`
//! stores one diagonal per head instead of a dense L×L matrix; dense slices
//! are materialized on demand for attention. Channel indexing is 0-based,
//! `i ∈ {0..d/2-1}`, matching the executable reference construction rather
//! than the 1-based presentation.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

pub const DEFAULT_BASE: f64 = 1e4;
pub const DEFAULT_SANDWICH_DBAR: usize = 128;
// Fixed log-bias defaults: the log curve fitted to the Sandwich diagonal.
pub const DEFAULT_LOGBIAS_C: f64 = -0.8;
pub const DEFAULT_LOGBIAS_R1: f64 = 0.825;
pub const DEFAULT_LOGBIAS_R2: f64 = 1.0;

/// Tagged configuration selecting one positional scheme and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalScheme {
    None,
    Sinusoidal { base: f64 },
    Rotary { base: f64 },
    Alibi { shift: i64, equalized: Option<f64> },
    Windowed { w: usize },
    Sandwich { dbar: usize, base: f64 },
    LogBias { c: f64, r1: f64, r2: f64 },
}

impl PositionalScheme {
    pub fn sinusoidal() -> Self {
        PositionalScheme::Sinusoidal { base: DEFAULT_BASE }
    }

    pub fn rotary() -> Self {
        PositionalScheme::Rotary { base: DEFAULT_BASE }
    }

    pub fn alibi() -> Self {
        PositionalScheme::Alibi {
            shift: 0,
            equalized: None,
        }
    }

    pub fn windowed(w: usize) -> Self {
        PositionalScheme::Windowed { w }
    }

    pub fn sandwich() -> Self {
        PositionalScheme::Sandwich {
            dbar: DEFAULT_SANDWICH_DBAR,
            base: DEFAULT_BASE,
        }
    }

    pub fn logbias() -> Self {
        PositionalScheme::LogBias {
            c: DEFAULT_LOGBIAS_C,
            r1: DEFAULT_LOGBIAS_R1,
            r2: DEFAULT_LOGBIAS_R2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PositionalScheme::None | PositionalScheme::Alibi { .. } => Ok(()),
            PositionalScheme::Sinusoidal { base } | PositionalScheme::Rotary { base } => {
                if base <= 1.0 {
                    Err(Error::InvalidScheme(format!("base must exceed 1, got {base}")))
                } else {
                    Ok(())
                }
            }
            PositionalScheme::Windowed { w } => {
                if w == 0 {
                    Err(Error::ZeroWindow)
                } else {
                    Ok(())
                }
            }
            PositionalScheme::Sandwich { dbar, base } => {
                if dbar == 0 || dbar % 2 != 0 {
                    Err(Error::OddWidth {
                        what: "sandwich d̄",
                        value: dbar,
                    })
                } else if base <= 1.0 {
                    Err(Error::InvalidScheme(format!("base must exceed 1, got {base}")))
                } else {
                    Ok(())
                }
            }
            PositionalScheme::LogBias { r2, .. } => {
                if r2 < 0.0 {
                    Err(Error::InvalidScheme(format!("r2 must be >= 0, got {r2}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// True when attention scores depend on positions only through `m - n`,
    /// which is what lets cached inference reuse old keys unchanged.
    pub fn is_distance_stationary(&self) -> bool {
        !matches!(self, PositionalScheme::Sinusoidal { .. })
    }

    /// Filename-safe form of the canonical spec string.
    pub fn slug(&self) -> String {
        self.to_string().replace([':', ',', '='], "_")
    }
}

impl fmt::Display for PositionalScheme {
    /// Canonical `name[:key=value[,key=value]*]` form; defaulted parameters
    /// are omitted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PositionalScheme::None => write!(f, "none"),
            PositionalScheme::Sinusoidal { base } => {
                write!(f, "sinusoidal")?;
                if base != DEFAULT_BASE {
                    write!(f, ":base={base}")?;
                }
                Ok(())
            }
            PositionalScheme::Rotary { base } => {
                write!(f, "rotary")?;
                if base != DEFAULT_BASE {
                    write!(f, ":base={base}")?;
                }
                Ok(())
            }
            PositionalScheme::Alibi { shift, equalized } => {
                write!(f, "alibi")?;
                let mut sep = ':';
                if shift != 0 {
                    write!(f, "{sep}shift={shift}")?;
                    sep = ',';
                }
                if let Some(h) = equalized {
                    write!(f, "{sep}h={h}")?;
                }
                Ok(())
            }
            PositionalScheme::Windowed { w } => write!(f, "windowed:w={w}"),
            PositionalScheme::Sandwich { dbar, base } => {
                write!(f, "sandwich")?;
                let mut sep = ':';
                if dbar != DEFAULT_SANDWICH_DBAR {
                    write!(f, "{sep}dbar={dbar}")?;
                    sep = ',';
                }
                if base != DEFAULT_BASE {
                    write!(f, "{sep}base={base}")?;
                }
                Ok(())
            }
            PositionalScheme::LogBias { c, r1, r2 } => {
                write!(f, "logbias")?;
                let mut sep = ':';
                if c != DEFAULT_LOGBIAS_C {
                    write!(f, "{sep}c={c}")?;
                    sep = ',';
                }
                if r1 != DEFAULT_LOGBIAS_R1 {
                    write!(f, "{sep}r1={r1}")?;
                    sep = ',';
                }
                if r2 != DEFAULT_LOGBIAS_R2 {
                    write!(f, "{sep}r2={r2}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PositionalScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n.trim(), Some(r.trim())),
            None => (s.trim(), None),
        };
        let mut params: Vec<(String, String)> = Vec::new();
        if let Some(rest) = rest {
            if rest.is_empty() {
                return Err(Error::InvalidScheme(format!("empty parameter list in `{s}`")));
            }
            for kv in rest.split(',') {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidScheme(format!("expected key=value, got `{kv}`")))?;
                params.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let mut take = |key: &str| -> Option<String> {
            let pos = params.iter().position(|(k, _)| k == key)?;
            Some(params.remove(pos).1)
        };
        fn num<T: FromStr>(key: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidScheme(format!("bad value `{v}` for `{key}`")))
        }
        let scheme = match name {
            "none" => PositionalScheme::None,
            "sinusoidal" => PositionalScheme::Sinusoidal {
                base: take("base").map_or(Ok(DEFAULT_BASE), |v| num("base", v))?,
            },
            "rotary" => PositionalScheme::Rotary {
                base: take("base").map_or(Ok(DEFAULT_BASE), |v| num("base", v))?,
            },
            "alibi" => PositionalScheme::Alibi {
                shift: take("shift").map_or(Ok(0), |v| num("shift", v))?,
                equalized: take("h").map(|v| num("h", v)).transpose()?,
            },
            "windowed" => PositionalScheme::Windowed {
                w: take("w")
                    .map(|v| num("w", v))
                    .transpose()?
                    .ok_or_else(|| Error::InvalidScheme("windowed requires w=<size>".into()))?,
            },
            "sandwich" => PositionalScheme::Sandwich {
                dbar: take("dbar").map_or(Ok(DEFAULT_SANDWICH_DBAR), |v| num("dbar", v))?,
                base: take("base").map_or(Ok(DEFAULT_BASE), |v| num("base", v))?,
            },
            "logbias" => PositionalScheme::LogBias {
                c: take("c").map_or(Ok(DEFAULT_LOGBIAS_C), |v| num("c", v))?,
                r1: take("r1").map_or(Ok(DEFAULT_LOGBIAS_R1), |v| num("r1", v))?,
                r2: take("r2").map_or(Ok(DEFAULT_LOGBIAS_R2), |v| num("r2", v))?,
            },
            other => {
                return Err(Error::InvalidScheme(format!("unknown scheme `{other}`")));
            }
        };
        if let Some((k, _)) = params.first() {
            return Err(Error::InvalidScheme(format!("unknown key `{k}` for `{name}`")));
        }
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Per-head additive temporal biases plus the causal/window mask.
///
/// Every kind built here is constant along diagonals on unmasked entries, so
/// the storage is one diagonal per head: `bias(h, m, n) = diag[h][m - n]`.
/// An empty diagonal list means a mask-only set (windowed attention) and a
/// single diagonal is shared across all heads (fixed log bias).
#[derive(Debug, Clone)]
pub struct BiasSet {
    len: usize,
    mask: Mask,
    diags: Vec<Vec<f64>>,
}

impl BiasSet {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn has_bias(&self) -> bool {
        !self.diags.is_empty()
    }

    /// Bias value at (m, n); `None` when the entry is masked.
    pub fn bias(&self, head: usize, m: usize, n: usize) -> Option<f64> {
        if !self.mask.allows(m, n) {
            return None;
        }
        if self.diags.is_empty() {
            return Some(0.0);
        }
        let d = &self.diags[head.min(self.diags.len() - 1)];
        Some(d[m - n])
    }

    /// The distance diagonal for one head (`None` for mask-only sets).
    pub fn head_diag(&self, head: usize) -> Option<&[f64]> {
        if self.diags.is_empty() {
            None
        } else {
            Some(&self.diags[head.min(self.diags.len() - 1)])
        }
    }

    /// Dense l×l bias matrix for one head; masked entries are zero.
    pub fn dense_head(&self, head: usize, l: usize) -> Result<Vec<f64>> {
        if l > self.len {
            return Err(Error::LengthExceedsBias {
                len: l,
                table: self.len,
            });
        }
        let mut out = vec![0.0; l * l];
        if let Some(diag) = self.head_diag(head) {
            for m in 0..l {
                let (s, e) = self.mask.row_range(m);
                for n in s..e.min(l) {
                    out[m * l + n] = diag[m - n];
                }
            }
        }
        Ok(out)
    }
}

/// ALiBi head exponents `h_n = 8n/H + Δ` for `n = 1..=H`, or an equalized
/// constant for every head. The attention slope for exponent `h` is `2^-h`.
pub fn alibi_head_exponents(heads: usize, shift: i64, equalized: Option<f64>) -> Result<Vec<f64>> {
    if heads == 0 {
        return Err(Error::ZeroHeads);
    }
    if let Some(h) = equalized {
        return Ok(vec![h; heads]);
    }
    Ok((1..=heads)
        .map(|n| 8.0 * n as f64 / heads as f64 + shift as f64)
        .collect())
}

/// Slopes `2^-h` for a list of head exponents.
pub fn slopes_from_exponents(exponents: &[f64]) -> Vec<f64> {
    exponents.iter().map(|h| (-h).exp2()).collect()
}

/// Linear-decay temporal biases: `B[m,n] = -slope_h * (m - n)` under a
/// causal mask.
pub fn alibi_bias(len: usize, slopes: &[f64]) -> BiasSet {
    let diags = slopes
        .iter()
        .map(|&s| (0..len).map(|d| -s * d as f64).collect())
        .collect();
    BiasSet {
        len,
        mask: Mask::causal(len),
        diags,
    }
}

/// Mask-only set restricting attention to the `w` most recent positions.
pub fn windowed_mask(len: usize, w: usize) -> Result<BiasSet> {
    Ok(BiasSet {
        len,
        mask: Mask::windowed(len, w)?,
        diags: Vec::new(),
    })
}

/// Sinusoidal absolute embedding table with interleaved (sin, cos) channel
/// pairs: dims (2i, 2i+1) hold sin and cos of `m / base^(2i/d)`.
pub fn sinusoidal_table(len: usize, d: usize, base: f64) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::OddWidth {
            what: "sinusoidal width d",
            value: d,
        });
    }
    let mut data = vec![0.0; len * d];
    for m in 0..len {
        for i in 0..d / 2 {
            let theta = m as f64 / base.powf(2.0 * i as f64 / d as f64);
            data[m * d + 2 * i] = theta.sin();
            data[m * d + 2 * i + 1] = theta.cos();
        }
    }
    Tensor::from_vec(&[len, d], data)
}

/// Precomputed rotation angles for rotary application: `cos`/`sin` hold
/// `len × dh/2` entries with angle `pos / base^(2i/dh)`.
#[derive(Debug, Clone)]
pub struct RotaryTables {
    pub dh: usize,
    pub len: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RotaryTables {
    pub fn build(len: usize, dh: usize, base: f64) -> Result<Self> {
        if dh == 0 || dh % 2 != 0 {
            return Err(Error::OddWidth {
                what: "rotary head width",
                value: dh,
            });
        }
        let half = dh / 2;
        let mut cos = vec![0.0; len * half];
        let mut sin = vec![0.0; len * half];
        for m in 0..len {
            for i in 0..half {
                let theta = m as f64 / base.powf(2.0 * i as f64 / dh as f64);
                cos[m * half + i] = theta.cos();
                sin[m * half + i] = theta.sin();
            }
        }
        Ok(RotaryTables { dh, len, cos, sin })
    }

    /// Rotate one row in place using the angles of `position`.
    pub fn rotate_row(&self, row: &mut [f64], position: usize) {
        debug_assert_eq!(row.len(), self.dh);
        debug_assert!(position < self.len);
        let half = self.dh / 2;
        let c = &self.cos[position * half..(position + 1) * half];
        let s = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let x0 = row[2 * i];
            let x1 = row[2 * i + 1];
            row[2 * i] = x0 * c[i] - x1 * s[i];
            row[2 * i + 1] = x0 * s[i] + x1 * c[i];
        }
    }

    /// Inverse rotation (used by the backward rule).
    pub fn rotate_row_inverse(&self, row: &mut [f64], position: usize) {
        let half = self.dh / 2;
        let c = &self.cos[position * half..(position + 1) * half];
        let s = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let x0 = row[2 * i];
            let x1 = row[2 * i + 1];
            row[2 * i] = x0 * c[i] + x1 * s[i];
            row[2 * i + 1] = -x0 * s[i] + x1 * c[i];
        }
    }
}

/// Rotate consecutive channel pairs of each row of `x` by its position's
/// angles. Positions beyond the tables' extent are an error.
pub fn rotary_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "rotary_apply",
            msg: format!("expected 2-d input, got {shape:?}"),
        });
    }
    let (l, dh) = (shape[0], shape[1]);
    if positions.len() != l {
        return Err(Error::Dimension {
            op: "rotary_apply",
            msg: format!("{l} rows but {} positions", positions.len()),
        });
    }
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let tables = RotaryTables::build(max_pos + 1, dh, base)?;
    let mut out = x.clone();
    for (m, row) in out.data_mut().chunks_exact_mut(dh).enumerate() {
        tables.rotate_row(row, positions[m]);
    }
    Ok(out)
}

/// The raw Sandwich diagonal `Σ_i cos(δ / base^(2i/d̄))` for distances
/// `0..len`; its maximum `d̄/2` sits at distance zero.
pub fn sandwich_raw_diag(len: usize, dbar: usize, base: f64) -> Vec<f64> {
    let half = dbar / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 1.0 / base.powf(2.0 * i as f64 / dbar as f64))
        .collect();
    (0..len)
        .map(|delta| freqs.iter().map(|f| (delta as f64 * f).cos()).sum())
        .collect()
}

/// Sandwich temporal biases: `(raw(m-n) - d̄/2) / h` per head, causal mask.
pub fn sandwich_bias(len: usize, dbar: usize, base: f64, exponents: &[f64]) -> Result<BiasSet> {
    if dbar == 0 || dbar % 2 != 0 {
        return Err(Error::OddWidth {
            what: "sandwich d̄",
            value: dbar,
        });
    }
    if let Some(head) = exponents.iter().position(|&h| h == 0.0) {
        return Err(Error::ZeroCompression { head });
    }
    let raw = sandwich_raw_diag(len, dbar, base);
    let shift = dbar as f64 / 2.0;
    let diags = exponents
        .iter()
        .map(|&h| raw.iter().map(|&r| (r - shift) / h).collect())
        .collect();
    Ok(BiasSet {
        len,
        mask: Mask::causal(len),
        diags,
    })
}

/// Fixed-parameter log-decay bias `c - r1·ln(1 + r2·(m-n))`, shared by all
/// heads, causal mask.
pub fn log_bias(len: usize, c: f64, r1: f64, r2: f64) -> Result<BiasSet> {
    if r2 < 0.0 {
        return Err(Error::InvalidScheme(format!("r2 must be >= 0, got {r2}")));
    }
    let diag = (0..len)
        .map(|d| c - r1 * (1.0 + r2 * d as f64).ln())
        .collect();
    Ok(BiasSet {
        len,
        mask: Mask::causal(len),
        diags: vec![diag],
    })
}

/// Everything a model forward pass needs from a scheme, precomputed once for
/// a maximum length and sliced per call.
#[derive(Debug, Clone)]
pub struct SchemeTables {
    pub scheme: PositionalScheme,
    pub max_len: usize,
    pub bias: BiasSet,
    pub sinusoidal: Option<Tensor>,
    pub rotary: Option<RotaryTables>,
}

impl SchemeTables {
    pub fn build(
        scheme: &PositionalScheme,
        heads: usize,
        width: usize,
        max_len: usize,
    ) -> Result<Self> {
        scheme.validate()?;
        if heads == 0 {
            return Err(Error::ZeroHeads);
        }
        let mut sinusoidal = None;
        let mut rotary = None;
        let bias = match *scheme {
            PositionalScheme::None => BiasSet {
                len: max_len,
                mask: Mask::causal(max_len),
                diags: Vec::new(),
            },
            PositionalScheme::Sinusoidal { base } => {
                sinusoidal = Some(sinusoidal_table(max_len, width, base)?);
                BiasSet {
                    len: max_len,
                    mask: Mask::causal(max_len),
                    diags: Vec::new(),
                }
            }
            PositionalScheme::Rotary { base } => {
                rotary = Some(RotaryTables::build(max_len, width / heads, base)?);
                BiasSet {
                    len: max_len,
                    mask: Mask::causal(max_len),
                    diags: Vec::new(),
                }
            }
            PositionalScheme::Alibi { shift, equalized } => {
                let exps = alibi_head_exponents(heads, shift, equalized)?;
                alibi_bias(max_len, &slopes_from_exponents(&exps))
            }
            PositionalScheme::Windowed { w } => windowed_mask(max_len, w)?,
            PositionalScheme::Sandwich { dbar, base } => {
                let exps = alibi_head_exponents(heads, 0, None)?;
                sandwich_bias(max_len, dbar, base, &exps)?
            }
            PositionalScheme::LogBias { c, r1, r2 } => log_bias(max_len, c, r1, r2)?,
        };
        Ok(SchemeTables {
            scheme: scheme.clone(),
            max_len,
            bias,
            sinusoidal,
            rotary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alibi_exponents_default_h8() {
        let h = alibi_head_exponents(8, 0, None).unwrap();
        assert_eq!(h, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let slopes = slopes_from_exponents(&h);
        for (n, s) in slopes.iter().enumerate() {
            assert_eq!(*s, 0.5f64.powi(n as i32 + 1));
        }
    }

    #[test]
    fn alibi_exponents_h12_third_head() {
        let h = alibi_head_exponents(12, 0, None).unwrap();
        assert_eq!(h[2], 2.0); // 8*3/12
        assert_eq!(slopes_from_exponents(&h)[2], 0.25);
    }

    #[test]
    fn alibi_exponents_equalized_zero() {
        let h = alibi_head_exponents(4, 0, Some(0.0)).unwrap();
        assert!(slopes_from_exponents(&h).iter().all(|&s| s == 1.0));
        assert!(alibi_head_exponents(0, 0, None).is_err());
    }

    #[test]
    fn alibi_bias_values() {
        let b = alibi_bias(6, &[1.0, 0.0]);
        assert_eq!(b.bias(0, 3, 1), Some(-2.0));
        for m in 0..6 {
            assert_eq!(b.bias(0, m, m), Some(0.0));
        }
        for m in 0..6 {
            for n in 0..=m {
                assert_eq!(b.bias(1, m, n), Some(0.0)); // slope 0
            }
        }
        assert_eq!(b.bias(0, 1, 3), None); // causal
    }

    #[test]
    fn windowed_attendable_counts() {
        let b = windowed_mask(10, 2).unwrap();
        // token m attends to {m-1, m} only
        assert!(b.mask().allows(5, 4) && b.mask().allows(5, 5));
        assert!(!b.mask().allows(5, 3));
        for m in 0..10 {
            let (s, e) = b.mask().row_range(m);
            assert_eq!(e - s, 2.min(m + 1));
        }
        assert!(windowed_mask(4, 0).is_err());
    }

    #[test]
    fn sinusoidal_position_zero_and_quarter_period() {
        let t = sinusoidal_table(4, 6, DEFAULT_BASE).unwrap();
        for i in 0..3 {
            assert_eq!(t.data()[2 * i], 0.0);
            assert_eq!(t.data()[2 * i + 1], 1.0);
        }
        assert!(sinusoidal_table(4, 5, DEFAULT_BASE).is_err());
        // quarter period: theta = pi/2 at channel i when m = base^(2i/d)·pi/2
        let base: f64 = 4.0;
        let d = 4;
        let m = (base.powf(2.0 / d as f64) * std::f64::consts::FRAC_PI_2).round() as usize;
        let t = sinusoidal_table(m + 1, d, base).unwrap();
        let theta = m as f64 / base.powf(2.0 / d as f64);
        assert!((t.data()[m * d + 2] - theta.sin()).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_matches_double_loop_oracle() {
        let (l, d) = (4, 4);
        let t = sinusoidal_table(l, d, DEFAULT_BASE).unwrap();
        for m in 0..l {
            for i in 0..d / 2 {
                let theta = m as f64 / DEFAULT_BASE.powf(2.0 * i as f64 / d as f64);
                assert_eq!(t.data()[m * d + 2 * i], theta.sin());
                assert_eq!(t.data()[m * d + 2 * i + 1], theta.cos());
            }
        }
    }

    #[test]
    fn rotary_zero_position_is_identity() {
        let x = Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let y = rotary_apply(&x, &[0], DEFAULT_BASE).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rotary_preserves_pair_norms() {
        let x = Tensor::from_vec(&[2, 4], vec![0.3, -1.2, 2.0, 0.7, -0.5, 0.1, 0.9, -2.2]).unwrap();
        let y = rotary_apply(&x, &[3, 11], DEFAULT_BASE).unwrap();
        for r in 0..2 {
            for i in 0..2 {
                let n0 = x.data()[r * 4 + 2 * i].hypot(x.data()[r * 4 + 2 * i + 1]);
                let n1 = y.data()[r * 4 + 2 * i].hypot(y.data()[r * 4 + 2 * i + 1]);
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
        assert!(rotary_apply(&Tensor::zeros(&[1, 3]), &[0], DEFAULT_BASE).is_err());
    }

    #[test]
    fn rotary_inner_product_is_relative() {
        // <rot(q,m), rot(k,n)> == <rot(q,m-n), k>
        let q = Tensor::from_vec(&[1, 8], vec![0.3, -1.2, 2.0, 0.7, -0.5, 0.1, 0.9, -2.2]).unwrap();
        let k = Tensor::from_vec(&[1, 8], vec![1.1, 0.2, -0.7, 0.4, 0.8, -1.5, 0.05, 0.6]).unwrap();
        for (m, n) in [(7usize, 3usize), (12, 0), (5, 5), (40, 17)] {
            let qm = rotary_apply(&q, &[m], DEFAULT_BASE).unwrap();
            let kn = rotary_apply(&k, &[n], DEFAULT_BASE).unwrap();
            let lhs: f64 = qm.data().iter().zip(kn.data()).map(|(a, b)| a * b).sum();
            let qrel = rotary_apply(&q, &[m - n], DEFAULT_BASE).unwrap();
            let rhs: f64 = qrel.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "m={m} n={n}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn sandwich_zero_distance_bias_is_zero() {
        let exps = alibi_head_exponents(4, 0, None).unwrap();
        let b = sandwich_bias(8, 32, DEFAULT_BASE, &exps).unwrap();
        for h in 0..4 {
            for m in 0..8 {
                assert_eq!(b.bias(h, m, m), Some(0.0));
            }
        }
    }

    #[test]
    fn sandwich_small_dbar_example() {
        // d̄=4, base=1e4, distance 1, h=1: raw = cos(1) + cos(0.01)
        let b = sandwich_bias(4, 4, 1e4, &[1.0]).unwrap();
        let raw = 1.0f64.cos() + 0.01f64.cos();
        assert!((raw - 1.540252306284805).abs() < 1e-12);
        let got = b.bias(0, 1, 0).unwrap();
        assert!((got - (raw - 2.0)).abs() < 1e-12);
        assert!((got - -0.459747693715195).abs() < 1e-9);
    }

    #[test]
    fn sandwich_rejects_zero_compression() {
        assert!(matches!(
            sandwich_bias(4, 4, 1e4, &[1.0, 0.0]),
            Err(Error::ZeroCompression { head: 1 })
        ));
    }

    #[test]
    fn log_bias_values() {
        let b = log_bias(4, -0.8, 0.825, 1.0).unwrap();
        assert_eq!(b.bias(0, 2, 2), Some(-0.8));
        let want = -0.8 - 0.825 * 2.0f64.ln();
        let got = b.bias(3, 3, 2).unwrap(); // any head: shared diagonal
        assert!((got - want).abs() < 1e-12);
        assert!((got - -1.3718464239619548).abs() < 1e-9);
        assert!(log_bias(4, 0.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn log_bias_r1_zero_is_constant() {
        let b = log_bias(6, 0.37, 0.0, 1.0).unwrap();
        for m in 0..6 {
            for n in 0..=m {
                assert_eq!(b.bias(0, m, n), Some(0.37));
            }
        }
    }

    #[test]
    fn scheme_string_round_trips() {
        for s in [
            "none",
            "sinusoidal",
            "sinusoidal:base=500",
            "rotary",
            "alibi",
            "alibi:shift=6",
            "alibi:shift=-3",
            "alibi:h=2",
            "windowed:w=100",
            "sandwich",
            "sandwich:dbar=32",
            "logbias",
            "logbias:c=-0.9,r1=0.5,r2=2",
        ] {
            let parsed: PositionalScheme = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s, "canonical form of `{s}`");
            let again: PositionalScheme = parsed.to_string().parse().unwrap();
            assert_eq!(parsed, again);
        }
        assert!("sandwich:dbar=7".parse::<PositionalScheme>().is_err());
        assert!("windowed".parse::<PositionalScheme>().is_err());
        assert!("alibi:bogus=1".parse::<PositionalScheme>().is_err());
        assert!("gauss".parse::<PositionalScheme>().is_err());
    }
}
