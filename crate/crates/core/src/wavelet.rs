//! Orthonormal discrete wavelet transform (Daubechies, 8-tap) on
//! zero-padded finite signals, plus the per-sample active-coefficient
//! structure exploited by the state-space likelihood.
//!
//! The transform is the restriction of the orthonormal infinite-signal DWT
//! to signals supported on `[0, signal_len)`: every basis function whose
//! support touches the window contributes one coefficient, so the
//! coefficient count `C` slightly exceeds `signal_len` and the analysis map
//! `A` satisfies `A^T A = I` exactly. Synthesis is the transpose, giving
//! perfect reconstruction and Parseval equality up to rounding.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Daubechies 8-tap scaling (synthesis lowpass) filter, sum = sqrt(2).
const DB4_H: [f64; 8] = [
    0.23037781330885523,
    0.7148465705525415,
    0.6308807679295904,
    -0.02798376941698385,
    -0.18703481171888114,
    0.030841381835986965,
    0.032883011666982945,
    -0.010597401784997278,
];

const FILTER_LEN: usize = 8;
/// Leading shift of the first basis function overlapping the window.
const SHIFT: usize = FILTER_LEN / 2 - 1; // 3

fn qmf(h: &[f64; 8]) -> [f64; 8] {
    let mut g = [0.0; 8];
    for (n, gn) in g.iter_mut().enumerate() {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        *gn = sign * h[FILTER_LEN - 1 - n];
    }
    g
}

/// Coefficient length of one analysis level applied to an input of length n.
fn band_len(n: usize) -> usize {
    (n - 1) / 2 + FILTER_LEN / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum BasisKind {
    Db4,
    /// Diagnostic basis with D = I; test scaffolding for the state-space
    /// machinery, never produced by configuration.
    Identity,
}

/// Wavelet coefficients of one arrival; length equals the basis size `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletCoeffs(pub Vec<f64>);

impl std::ops::Deref for WaveletCoeffs {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A fixed multi-level wavelet basis over `signal_len` samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveletBasis {
    kind: BasisKind,
    signal_len: usize,
    levels: usize,
    /// Band lengths per level, finest first: `band_lens[0] = band_len(signal_len)`.
    band_lens: Vec<usize>,
    /// Total coefficient count.
    c: usize,
    /// Per-sample synthesis rows: `rows[t]` lists `(coeff index, D[t, c])`
    /// for every coefficient whose basis function covers sample `t`.
    #[serde(skip)]
    rows: Vec<Vec<(usize, f64)>>,
    /// Per-coefficient sample support `[first, last]`, derived from `rows`.
    #[serde(skip)]
    supports: Vec<(usize, usize)>,
}

impl WaveletBasis {
    /// Multi-level db4 basis over `signal_len` samples.
    pub fn db4(signal_len: usize, levels: usize) -> Result<Self> {
        if signal_len == 0 {
            return Err(Error::config("signal_len must be positive"));
        }
        if levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        let mut band_lens = Vec::with_capacity(levels);
        let mut n = signal_len;
        for _ in 0..levels {
            n = band_len(n);
            band_lens.push(n);
        }
        let c = band_lens.iter().sum::<usize>() + band_lens[levels - 1];
        let mut basis = WaveletBasis {
            kind: BasisKind::Db4,
            signal_len,
            levels,
            band_lens,
            c,
            rows: Vec::new(),
            supports: Vec::new(),
        };
        basis.rows = (0..signal_len).map(|t| basis.build_row(t)).collect();
        basis.supports = supports_from_rows(&basis.rows, c);
        Ok(basis)
    }

    /// Basis sized for a modulation window of `window_s` seconds at
    /// `rate_hz`, the configuration used throughout the model.
    pub fn for_window(window_s: f64, rate_hz: f64, levels: usize) -> Result<Self> {
        let n = (window_s * rate_hz).round() as usize;
        if n == 0 {
            return Err(Error::config("modulation window shorter than one sample"));
        }
        Self::db4(n, levels)
    }

    #[doc(hidden)]
    pub fn identity(signal_len: usize) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = (0..signal_len).map(|t| vec![(t, 1.0)]).collect();
        let supports = supports_from_rows(&rows, signal_len);
        WaveletBasis {
            kind: BasisKind::Identity,
            signal_len,
            levels: 0,
            band_lens: Vec::new(),
            c: signal_len,
            rows,
            supports,
        }
    }

    /// Rebuild the cached synthesis rows (needed after deserialization).
    pub fn rebuild_rows(&mut self) {
        if self.rows.len() == self.signal_len {
            return;
        }
        self.rows = match self.kind {
            BasisKind::Db4 => (0..self.signal_len).map(|t| self.build_row(t)).collect(),
            BasisKind::Identity => (0..self.signal_len).map(|t| vec![(t, 1.0)]).collect(),
        };
        self.supports = supports_from_rows(&self.rows, self.c);
    }

    /// Sample support `[first, last]` (inclusive) of coefficient `c`.
    pub fn coeff_support(&self, c: usize) -> (usize, usize) {
        self.supports[c]
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Total coefficient count C.
    pub fn coeff_len(&self) -> usize {
        self.c
    }

    /// Synthesis row of sample `t`: all `(coeff index, weight)` pairs with
    /// nonzero weight, sorted by coefficient index.
    pub fn row(&self, t: usize) -> &[(usize, f64)] {
        &self.rows[t]
    }

    /// Offset of the detail band for `level` (1-based, finest = 1) in the
    /// coefficient vector layout `[a_L | d_L | d_(L-1) | ... | d_1]`.
    fn detail_offset(&self, level: usize) -> usize {
        let n_l = self.band_lens[self.levels - 1];
        let mut off = n_l;
        for l in (level + 1..=self.levels).rev() {
            off += self.band_lens[l - 1];
        }
        off
    }

    fn build_row(&self, t: usize) -> Vec<(usize, f64)> {
        let h = &DB4_H;
        let g = qmf(h);
        // weights of the sample w.r.t. the current approximation band
        let mut approx: Vec<(usize, f64)> = vec![(t, 1.0)];
        let mut out: Vec<(usize, f64)> = Vec::new();
        for level in 1..=self.levels {
            let mut next: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
            let mut detail: std::collections::BTreeMap<usize, f64> =
                std::collections::BTreeMap::new();
            for &(p, wt) in &approx {
                // coefficients k with filter support covering position p:
                // ceil((p - 7)/2) <= k <= floor(p/2)
                let k_lo = (p as isize - (FILTER_LEN as isize - 1) + 1).div_euclid(2);
                let k_hi = (p as isize).div_euclid(2);
                for k in k_lo..=k_hi {
                    let j = p as isize - 2 * k;
                    debug_assert!((0..FILTER_LEN as isize).contains(&j));
                    let k_arr = (k + SHIFT as isize) as usize;
                    debug_assert!(k_arr < self.band_lens[level - 1]);
                    *next.entry(k_arr).or_insert(0.0) += wt * h[j as usize];
                    *detail.entry(k_arr).or_insert(0.0) += wt * g[j as usize];
                }
            }
            let d_off = self.detail_offset(level);
            for (k_arr, wt) in detail {
                out.push((d_off + k_arr, wt));
            }
            approx = next.into_iter().collect();
        }
        // final approximation band sits at offset 0
        for (k_arr, wt) in approx {
            out.push((k_arr, wt));
        }
        out.sort_by_key(|&(c, _)| c);
        out
    }

    fn check_signal_len(&self, len: usize) -> Result<()> {
        if len != self.signal_len {
            return Err(Error::dimension(format!(
                "signal length {len} does not match basis signal_len {}",
                self.signal_len
            )));
        }
        Ok(())
    }

    fn check_coeff_len(&self, len: usize) -> Result<()> {
        if len != self.c {
            return Err(Error::dimension(format!(
                "coefficient length {len} does not match basis C {}",
                self.c
            )));
        }
        Ok(())
    }
}

fn supports_from_rows(rows: &[Vec<(usize, f64)>], c: usize) -> Vec<(usize, usize)> {
    let mut supports = vec![(usize::MAX, 0); c];
    for (t, row) in rows.iter().enumerate() {
        for &(ci, _) in row {
            let s = &mut supports[ci];
            s.0 = s.0.min(t);
            s.1 = s.1.max(t);
        }
    }
    supports
}

fn analyze_level(x: &[f64], h: &[f64; 8], g: &[f64; 8]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let nb = band_len(n);
    let mut a = vec![0.0; nb];
    let mut d = vec![0.0; nb];
    for k_arr in 0..nb {
        let k = k_arr as isize - SHIFT as isize;
        let (mut sa, mut sd) = (0.0, 0.0);
        for (j, (&hj, &gj)) in h.iter().zip(g.iter()).enumerate() {
            let i = 2 * k + j as isize;
            if i >= 0 && (i as usize) < n {
                let xi = x[i as usize];
                sa += hj * xi;
                sd += gj * xi;
            }
        }
        a[k_arr] = sa;
        d[k_arr] = sd;
    }
    (a, d)
}

fn synthesize_level(a: &[f64], d: &[f64], n_out: usize, h: &[f64; 8], g: &[f64; 8]) -> Vec<f64> {
    let mut x = vec![0.0; n_out];
    for k_arr in 0..a.len() {
        let k = k_arr as isize - SHIFT as isize;
        for (j, (&hj, &gj)) in h.iter().zip(g.iter()).enumerate() {
            let i = 2 * k + j as isize;
            if i >= 0 && (i as usize) < n_out {
                x[i as usize] += hj * a[k_arr] + gj * d[k_arr];
            }
        }
    }
    x
}

/// Analysis transform: signal of length `signal_len` to `C` coefficients.
pub fn dwt_forward(signal: &[f64], basis: &WaveletBasis) -> Result<WaveletCoeffs> {
    basis.check_signal_len(signal.len())?;
    if basis.kind == BasisKind::Identity {
        return Ok(WaveletCoeffs(signal.to_vec()));
    }
    let h = &DB4_H;
    let g = qmf(h);
    let mut coeffs = vec![0.0; basis.c];
    let mut approx = signal.to_vec();
    for level in 1..=basis.levels {
        let (a, d) = analyze_level(&approx, h, &g);
        let off = basis.detail_offset(level);
        coeffs[off..off + d.len()].copy_from_slice(&d);
        approx = a;
    }
    coeffs[..approx.len()].copy_from_slice(&approx);
    Ok(WaveletCoeffs(coeffs))
}

/// Synthesis transform: `C` coefficients to a signal of length `signal_len`.
pub fn dwt_inverse(coeffs: &[f64], basis: &WaveletBasis) -> Result<Vec<f64>> {
    basis.check_coeff_len(coeffs.len())?;
    if basis.kind == BasisKind::Identity {
        return Ok(coeffs.to_vec());
    }
    let h = &DB4_H;
    let g = qmf(h);
    let n_l = basis.band_lens[basis.levels - 1];
    let mut approx = coeffs[..n_l].to_vec();
    for level in (1..=basis.levels).rev() {
        let off = basis.detail_offset(level);
        let nb = basis.band_lens[level - 1];
        let d = &coeffs[off..off + nb];
        let n_out = if level == 1 {
            basis.signal_len
        } else {
            basis.band_lens[level - 2]
        };
        approx = synthesize_level(&approx, d, n_out, h, &g);
    }
    Ok(approx)
}

/// Indices of the coefficients whose basis functions cover `sample_index`;
/// exactly the nonzero pattern of row `sample_index` of the synthesis
/// matrix. Size is O(levels * filter length).
pub fn active_coefficients(sample_index: usize, basis: &WaveletBasis) -> Result<Vec<usize>> {
    if sample_index >= basis.signal_len {
        return Err(Error::dimension(format!(
            "sample index {sample_index} out of range for signal_len {}",
            basis.signal_len
        )));
    }
    Ok(basis.rows[sample_index].iter().map(|&(c, _)| c).collect())
}
