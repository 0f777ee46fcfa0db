//! MFCC extraction.
//!
//! Pipeline: pre-emphasis -> 25 ms / 10 ms framing -> Hamming window ->
//! power spectrum (FFT zero-padded to the next power of two) -> 26
//! triangular mel filters on the HTK scale spanning 0 Hz to Nyquist ->
//! log with floor 1e-10 -> orthonormal DCT-II keeping all 26 coefficients.
//!
//! Everything runs in `f64` and is bit-deterministic.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SerError};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16000,
            n_mels: 26,
            frame_ms: 25.0,
            hop_ms: 10.0,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_ms / 1000.0 * self.sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms / 1000.0 * self.sample_rate as f64).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.frame_len().next_power_of_two()
    }

    /// Frame count for a window of `len` samples:
    /// `floor((len - frame) / hop) + 1`.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        let frame = self.frame_len();
        if len < frame {
            return Err(SerError::Data(format!(
                "window of {len} samples shorter than one {frame}-sample frame"
            )));
        }
        Ok((len - frame) / self.hop_len() + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reusable MFCC extractor with precomputed window, filterbank and DCT
/// basis.
pub struct MfccExtractor {
    cfg: MfccConfig,
    fft: Arc<dyn Fft<f64>>,
    hamming: Vec<f64>,
    /// Per filter: (bin, weight) pairs.
    filters: Vec<Vec<(usize, f64)>>,
    /// Orthonormal DCT-II basis, `[n_mels, n_mels]` row-major.
    dct: Vec<f64>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        if cfg.n_mels == 0 {
            return Err(SerError::Config("n_mels must be positive".into()));
        }
        let frame = cfg.frame_len();
        if frame < 2 {
            return Err(SerError::Config("frame length below 2 samples".into()));
        }
        let nfft = cfg.fft_size();
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        let hamming: Vec<f64> = (0..frame)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame as f64 - 1.0)).cos()
            })
            .collect();
        let filters = mel_filterbank(cfg.n_mels, nfft, cfg.sample_rate as f64);
        let dct = dct_ii_orthonormal(cfg.n_mels);
        Ok(MfccExtractor {
            cfg,
            fft,
            hamming,
            filters,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Extract MFCCs from one window of samples. Returns the coefficients in
    /// `[n_mels, n_frames]` layout (row = coefficient index) plus the frame
    /// count.
    pub fn extract(&self, window: &[f64]) -> Result<(Vec<f64>, usize)> {
        let n_frames = self.cfg.n_frames(window.len())?;
        let frame = self.cfg.frame_len();
        let hop = self.cfg.hop_len();
        let nfft = self.cfg.fft_size();
        let n_mels = self.cfg.n_mels;
        let pre = self.cfg.pre_emphasis;

        // Pre-emphasis over the whole window; the first sample is kept.
        let mut emphasized = Vec::with_capacity(window.len());
        emphasized.push(window[0]);
        for i in 1..window.len() {
            emphasized.push(window[i] - pre * window[i - 1]);
        }

        let mut out = vec![0.0f64; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        let mut log_energies = vec![0.0f64; n_mels];
        for t in 0..n_frames {
            let start = t * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < frame {
                    Complex::new(emphasized[start + i] * self.hamming[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            // Periodogram estimate: |X|^2 / nfft over the one-sided spectrum.
            let scale = 1.0 / nfft as f64;
            for (m, filter) in self.filters.iter().enumerate() {
                let mut e = 0.0;
                for &(k, w) in filter {
                    e += w * buf[k].norm_sqr() * scale;
                }
                log_energies[m] = e.max(self.cfg.log_floor).ln();
            }
            for c in 0..n_mels {
                let row = &self.dct[c * n_mels..(c + 1) * n_mels];
                let mut acc = 0.0;
                for (m, &le) in log_energies.iter().enumerate() {
                    acc += row[m] * le;
                }
                out[c * n_frames + t] = acc;
            }
        }
        Ok((out, n_frames))
    }
}

/// Triangular mel filterbank from 0 Hz to Nyquist on the HTK scale, with
/// filter edges snapped to FFT bin indices.
fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let low = hz_to_mel(0.0);
    let high = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| low + (high - low) * i as f64 / (n_mels + 1) as f64)
        .collect();
    let bins: Vec<usize> = points
        .iter()
        .map(|&m| ((nfft + 1) as f64 * mel_to_hz(m) / sample_rate).floor() as usize)
        .collect();

    let mut filters = Vec::with_capacity(n_mels);
    for j in 0..n_mels {
        let (a, b, c) = (bins[j], bins[j + 1], bins[j + 2]);
        let mut taps = Vec::new();
        for k in a..b {
            taps.push((k, (k - a) as f64 / (b - a).max(1) as f64));
        }
        for k in b..c {
            taps.push((k, (c - k) as f64 / (c - b).max(1) as f64));
        }
        filters.push(taps);
    }
    filters
}

/// Orthonormal DCT-II basis: row `k` holds
/// `s(k) * cos(pi * (2n + 1) * k / (2N))` with `s(0) = sqrt(1/N)`,
/// `s(k>0) = sqrt(2/N)`.
fn dct_ii_orthonormal(n: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for m in 0..n {
            basis[k * n + m] =
                s * (std::f64::consts::PI * (2.0 * m as f64 + 1.0) * k as f64 / (2.0 * n as f64))
                    .cos();
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        let cfg = MfccConfig::default();
        assert_eq!(cfg.frame_len(), 400);
        assert_eq!(cfg.hop_len(), 160);
        assert_eq!(cfg.fft_size(), 512);
        // floor((28800 - 400) / 160) + 1 = 178 for a 1.8 s window at 16 kHz.
        assert_eq!(cfg.n_frames(28800).unwrap(), 178);
        assert_eq!(cfg.n_frames(400).unwrap(), 1);
        assert!(cfg.n_frames(399).is_err());
    }

    #[test]
    fn all_zero_window_gives_dct_of_log_floor() {
        let cfg = MfccConfig::default();
        let ex = MfccExtractor::new(cfg.clone()).unwrap();
        let (out, n_frames) = ex.extract(&vec![0.0; 4000]).unwrap();
        let c0_expect = (cfg.n_mels as f64).sqrt() * 1e-10f64.ln();
        for t in 0..n_frames {
            assert!((out[t] - c0_expect).abs() < 1e-9, "c0 {}", out[t]);
            for c in 1..cfg.n_mels {
                assert!(out[c * n_frames + t].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_naive_dft_pipeline_oracle() {
        // Independently coded straight-line pipeline with an O(N^2) DFT.
        let cfg = MfccConfig::default();
        let ex = MfccExtractor::new(cfg.clone()).unwrap();
        // Deterministic "white noise".
        let mut s = 0x12345678u64;
        let noise: Vec<f64> = (0..1200)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let (got, n_frames) = ex.extract(&noise).unwrap();

        let frame = cfg.frame_len();
        let hop = cfg.hop_len();
        let nfft = cfg.fft_size();
        let mut pre = vec![noise[0]];
        for i in 1..noise.len() {
            pre.push(noise[i] - 0.97 * noise[i - 1]);
        }
        let filters = mel_filterbank(cfg.n_mels, nfft, 16000.0);
        let dct = dct_ii_orthonormal(cfg.n_mels);
        let mut max_diff = 0.0f64;
        for t in 0..n_frames {
            let mut windowed = vec![0.0; nfft];
            for i in 0..frame {
                let h = 0.54
                    - 0.46
                        * (2.0 * std::f64::consts::PI * i as f64 / (frame as f64 - 1.0)).cos();
                windowed[i] = pre[t * hop + i] * h;
            }
            // Naive DFT, one-sided power spectrum.
            let mut power = vec![0.0; nfft / 2 + 1];
            for (k, p) in power.iter_mut().enumerate() {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in windowed.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / nfft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                *p = (re * re + im * im) / nfft as f64;
            }
            let log_e: Vec<f64> = filters
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|&(k, w)| w * power[k])
                        .sum::<f64>()
                        .max(1e-10)
                        .ln()
                })
                .collect();
            for c in 0..cfg.n_mels {
                let mut acc = 0.0;
                for m in 0..cfg.n_mels {
                    acc += dct[c * cfg.n_mels + m] * log_e[m];
                }
                max_diff = max_diff.max((acc - got[c * n_frames + t]).abs());
            }
        }
        assert!(max_diff < 1e-8, "max |impl - oracle| = {max_diff}");
    }

    #[test]
    fn hop_shift_covariance() {
        let cfg = MfccConfig::default();
        let ex = MfccExtractor::new(cfg.clone()).unwrap();
        let signal: Vec<f64> = (0..2000)
            .map(|i| (i as f64 * 0.131).sin() * 0.4 + (i as f64 * 0.017).cos() * 0.2)
            .collect();
        let (a, fa) = ex.extract(&signal).unwrap();
        let (b, fb) = ex.extract(&signal[cfg.hop_len()..]).unwrap();
        assert_eq!(fa, fb + 1);
        // Interior frames: frame t+1 of the original equals frame t of the
        // shifted signal, except the shifted signal's frame 0 (pre-emphasis
        // sees a different predecessor there).
        for c in 0..cfg.n_mels {
            for t in 1..fb {
                let orig = a[c * fa + (t + 1)];
                let shift = b[c * fb + t];
                assert!(
                    (orig - shift).abs() < 1e-9,
                    "coef {c} frame {t}: {orig} vs {shift}"
                );
            }
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let ex = MfccExtractor::new(MfccConfig::default()).unwrap();
        let sig: Vec<f64> = (0..900).map(|i| ((i * i) as f64 * 1e-4).sin()).collect();
        let (a, _) = ex.extract(&sig).unwrap();
        let (b, _) = ex.extract(&sig).unwrap();
        assert_eq!(a, b);
    }
}
