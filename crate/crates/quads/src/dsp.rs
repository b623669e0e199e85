//! Waveform-to-log-mel-spectrogram frontend.
//!
//! Both the teacher and the student consume the same representation: a
//! Hann-windowed STFT power spectrum projected through a triangular mel
//! filterbank (HTK scale, `m = 2595 * log10(1 + f/700)`), then the natural
//! log of `max(power, log_floor)`.
//!
//! Conventions this frontend pins (none are negotiable once models are
//! trained): periodic Hann window, FFT size = smallest power of two that
//! fits the window (512 at the defaults), unnormalized peak-1 triangles,
//! no pre-emphasis and no per-utterance normalization. All transcendental
//! math goes through `libm` so the matrix is bit-identical across
//! platforms.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
    #[error("waveform too short: {got} samples, need at least {min} (one window)")]
    WaveTooShort { got: usize, min: usize },
    #[error("waveform contains a non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("{n_mels} mel filters exceed the FFT resolution: filter {filter} has no positive bin")]
    FilterWithoutSupport { n_mels: usize, filter: usize },
}

/// Frontend parameters. Defaults: 16 kHz, 80 mel channels, 25 ms windows
/// with a 10 ms stride, full 0..Nyquist band, floor 1e-10.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(DspError::InvalidConfig(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.n_mels < 1 {
            return Err(DspError::InvalidConfig("n_mels must be >= 1".into()));
        }
        if self.window_ms < self.hop_ms {
            return Err(DspError::InvalidConfig(format!(
                "window_ms {} must be >= hop_ms {}",
                self.window_ms, self.hop_ms
            )));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(DspError::InvalidConfig(
                "window and hop must span at least one sample".into(),
            ));
        }
        if !self.log_floor.is_finite() || self.log_floor <= 0.0 {
            return Err(DspError::InvalidConfig("log_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// `(n_mels, frames)` matrix of log mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub frames: usize,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn value(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filterbank, `(n_mels, fft_size/2 + 1)` row-major. Row `m` is
/// a triangle rising from mel point `m` to a peak of 1 at point `m+1` and
/// falling to zero at point `m+2`, the points being equally spaced on the
/// mel axis between `fmin` and `fmax`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Vec<f64>, DspError> {
    cfg.validate()?;
    let bins = cfg.fft_size() / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size() as f64;

    let mut fb = vec![0.0f64; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        let mut any = false;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            if f > lo && f < hi {
                let w = if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if w > 0.0 {
                    fb[m * bins + k] = w;
                    any = true;
                }
            }
        }
        if !any {
            return Err(DspError::FilterWithoutSupport {
                n_mels: cfg.n_mels,
                filter: m,
            });
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of the filters, i.e. the interior mel points.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Log mel spectrogram of a waveform.
///
/// Frames are laid out without padding or centering, so
/// `frames = (len - window) / hop + 1`; a wave shorter than one window is
/// rejected.
pub fn log_mel(wave: &[f32], cfg: &MelConfig) -> Result<MelSpectrogram, DspError> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if wave.len() < win {
        return Err(DspError::WaveTooShort {
            got: wave.len(),
            min: win,
        });
    }
    for (i, &s) in wave.iter().enumerate() {
        if !s.is_finite() {
            return Err(DspError::NonFiniteSample { index: i });
        }
    }
    let frames = (wave.len() - win) / hop + 1;
    let nfft = cfg.fft_size();
    let bins = nfft / 2 + 1;
    let fb = mel_filterbank(cfg)?;

    // Periodic Hann.
    let window: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * libm::cos(2.0 * std::f64::consts::PI * n as f64 / win as f64))
        .collect();
    let twiddles = fft_twiddles(nfft);
    let floor = cfg.log_floor;

    let mut values = vec![0.0f32; cfg.n_mels * frames];
    let mut re = vec![0.0f64; nfft];
    let mut im = vec![0.0f64; nfft];
    let mut power = vec![0.0f64; bins];
    for t in 0..frames {
        let start = t * hop;
        for i in 0..nfft {
            re[i] = if i < win {
                wave[start + i] as f64 * window[i]
            } else {
                0.0
            };
            im[i] = 0.0;
        }
        fft_in_place(&mut re, &mut im, &twiddles);
        for k in 0..bins {
            power[k] = re[k] * re[k] + im[k] * im[k];
        }
        for m in 0..cfg.n_mels {
            let row = &fb[m * bins..(m + 1) * bins];
            let mut acc = 0.0f64;
            for k in 0..bins {
                acc += row[k] * power[k];
            }
            values[m * frames + t] = acc.max(floor).ln() as f32;
        }
    }
    Ok(MelSpectrogram {
        values,
        n_mels: cfg.n_mels,
        frames,
        config: cfg.clone(),
    })
}

fn fft_twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n / 2)
        .map(|k| {
            let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (libm::cos(ang), libm::sin(ang))
        })
        .collect()
}

/// Iterative radix-2 Cooley-Tukey; `re.len()` must be a power of two.
fn fft_in_place(re: &mut [f64], im: &mut [f64], twiddles: &[(f64, f64)]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (wr, wi) = twiddles[k * step];
                let e = start + k;
                let o = start + k + len / 2;
                let tr = re[o] * wr - im[o] * wi;
                let ti = re[o] * wi + im[o] * wr;
                re[o] = re[e] - tr;
                im[o] = im[e] - ti;
                re[e] += tr;
                im[e] += ti;
            }
        }
        len <<= 1;
    }
}
