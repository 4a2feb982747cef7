//! The augmentation transform set: ten signal transforms (plus the optional
//! scaling transform), each driven by a magnitude in [0,1] and an explicit
//! RNG stream address.

mod diff;
pub mod rng;
pub mod spectral;

pub use diff::apply_differentiable;
pub use rng::{slots, RngStream};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multichannel fixed-length signal sample.
#[derive(Clone, Debug)]
pub struct Signal {
    channels: usize,
    length: usize,
    sample_rate_hz: f64,
    values: Vec<f64>, // row-major [channel][time]
}

impl Signal {
    pub fn new(channels: usize, length: usize, sample_rate_hz: f64, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::dim("signal: channels and length must be >= 1"));
        }
        if sample_rate_hz <= 0.0 {
            return Err(Error::Config("signal: sample rate must be > 0".into()));
        }
        if values.len() != channels * length {
            return Err(Error::dim(format!(
                "signal: {channels}x{length} wants {} values, got {}",
                channels * length,
                values.len()
            )));
        }
        Ok(Signal {
            channels,
            length,
            sample_rate_hz,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.length..(c + 1) * self.length]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * self.length..(c + 1) * self.length]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.length], self.values.clone()).expect("consistent")
    }

    pub fn from_tensor(t: &Tensor, sample_rate_hz: f64) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::dim("signal from tensor: expected [C,L]"));
        }
        Signal::new(t.shape()[0], t.shape()[1], sample_rate_hz, t.data().to_vec())
    }

    pub fn bit_eq(&self, other: &Signal) -> bool {
        self.channels == other.channels
            && self.length == other.length
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The transform registry. Order is fixed and versioned: configs and reports
/// reference transforms by snake_case name, index is position in
/// [`registry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformId {
    Identity,
    TimeReverse,
    FftSurrogate,
    ChannelDropout,
    ChannelShuffle,
    TimeMask,
    GaussianNoise,
    RandomBandstop,
    SignFlip,
    FrequencyShift,
    Scaling,
}

const BASE_REGISTRY: [TransformId; 10] = [
    TransformId::Identity,
    TransformId::TimeReverse,
    TransformId::FftSurrogate,
    TransformId::ChannelDropout,
    TransformId::ChannelShuffle,
    TransformId::TimeMask,
    TransformId::GaussianNoise,
    TransformId::RandomBandstop,
    TransformId::SignFlip,
    TransformId::FrequencyShift,
];

/// The transform set TS; `Scaling` joins only when explicitly enabled.
pub fn registry(enable_scaling: bool) -> Vec<TransformId> {
    let mut ts = BASE_REGISTRY.to_vec();
    if enable_scaling {
        ts.push(TransformId::Scaling);
    }
    ts
}

impl TransformId {
    pub fn name(&self) -> &'static str {
        match self {
            TransformId::Identity => "identity",
            TransformId::TimeReverse => "time_reverse",
            TransformId::FftSurrogate => "fft_surrogate",
            TransformId::ChannelDropout => "channel_dropout",
            TransformId::ChannelShuffle => "channel_shuffle",
            TransformId::TimeMask => "time_mask",
            TransformId::GaussianNoise => "gaussian_noise",
            TransformId::RandomBandstop => "random_bandstop",
            TransformId::SignFlip => "sign_flip",
            TransformId::FrequencyShift => "frequency_shift",
            TransformId::Scaling => "scaling",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        registry(true)
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown transform '{name}'")))
    }

    /// True when the output changes smoothly with the magnitude (the
    /// differentiable path carries a nonzero d/dm for these).
    pub fn magnitude_differentiable(&self) -> bool {
        matches!(
            self,
            TransformId::GaussianNoise
                | TransformId::Scaling
                | TransformId::TimeMask
                | TransformId::RandomBandstop
                | TransformId::FrequencyShift
        )
    }
}

/// Magnitude-to-parameter maps shared by the hard and differentiable paths.
#[derive(Clone, Copy, Debug)]
pub struct TransformSettings {
    /// TimeMask: max mask length as a fraction of L.
    pub max_mask_frac: f64,
    /// GaussianNoise: std at m = 1 (signals are z-scored).
    pub noise_sigma_max: f64,
    /// FrequencyShift: shift in Hz at m = 1.
    pub f_max_shift_hz: f64,
    /// Soft-edge steepness (per bin / per sample) for the differentiable
    /// TimeMask and RandomBandstop variants.
    pub soft_steepness: f64,
}

impl Default for TransformSettings {
    fn default() -> Self {
        TransformSettings {
            max_mask_frac: 0.5,
            noise_sigma_max: 0.5,
            f_max_shift_hz: 2.0,
            soft_steepness: 10.0,
        }
    }
}

impl TransformSettings {
    pub fn max_mask_len(&self, length: usize) -> usize {
        (length as f64 * self.max_mask_frac).floor() as usize
    }

    /// Stop-band width in Hz at magnitude m: m * (Nyquist / 2).
    pub fn stop_width_hz(&self, m: f64, sample_rate_hz: f64) -> f64 {
        m * sample_rate_hz / 4.0
    }
}

fn check_magnitude(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) || m.is_nan() {
        return Err(Error::contract(format!("magnitude {m} outside [0,1]")));
    }
    Ok(())
}

/// Applies transform `t` at magnitude `m` using draws from `stream`.
/// Output shape and sample rate always match the input.
pub fn apply(t: TransformId, x: &Signal, m: f64, stream: RngStream) -> Result<Signal> {
    apply_with(t, x, m, stream, &TransformSettings::default())
}

pub fn apply_with(
    t: TransformId,
    x: &Signal,
    m: f64,
    stream: RngStream,
    cfg: &TransformSettings,
) -> Result<Signal> {
    check_magnitude(m)?;
    let mut rng = stream.rng();
    let out = match t {
        TransformId::Identity => x.clone(),
        TransformId::TimeReverse => {
            let mut y = x.clone();
            for c in 0..y.channels() {
                y.row_mut(c).reverse();
            }
            y
        }
        TransformId::SignFlip => {
            let mut y = x.clone();
            for v in y.values_mut() {
                *v = -*v;
            }
            y
        }
        TransformId::FftSurrogate => {
            let mut y = x.clone();
            let n = x.length();
            for c in 0..x.channels() {
                let mut spec = spectral::dft(x.row(c));
                for k in 1..=(n - 1) / 2 {
                    let theta = m * rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let rot = rustfft::num_complex::Complex::from_polar(1.0, theta);
                    spec[k] *= rot;
                    spec[n - k] *= rot.conj();
                }
                y.row_mut(c).copy_from_slice(&spectral::idft(&spec));
            }
            y
        }
        TransformId::ChannelDropout => {
            let count = dropout_count(m, x.channels());
            let mut y = x.clone();
            if count > 0 {
                let picks = rand::seq::index::sample(&mut rng, x.channels(), count);
                for c in picks.iter() {
                    y.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
                }
            }
            y
        }
        TransformId::ChannelShuffle => {
            let mut order: Vec<usize> = (0..x.channels()).collect();
            order.shuffle(&mut rng);
            let mut y = x.clone();
            for (dst, &src) in order.iter().enumerate() {
                y.row_mut(dst).copy_from_slice(x.row(src));
            }
            y
        }
        TransformId::TimeMask => {
            let mask_len = (m * cfg.max_mask_len(x.length()) as f64).round() as usize;
            let mut y = x.clone();
            if mask_len > 0 {
                let u: f64 = rng.random_range(0.0..1.0);
                let start = mask_start(u, x.length(), mask_len);
                for c in 0..y.channels() {
                    y.row_mut(c)[start..start + mask_len]
                        .iter_mut()
                        .for_each(|v| *v = 0.0);
                }
            }
            y
        }
        TransformId::GaussianNoise => {
            if m == 0.0 {
                return Ok(x.clone());
            }
            let std = m * cfg.noise_sigma_max;
            let mut y = x.clone();
            for v in y.values_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += std * z;
            }
            y
        }
        TransformId::RandomBandstop => {
            let width_hz = cfg.stop_width_hz(m, x.sample_rate_hz());
            if width_hz == 0.0 {
                return Ok(x.clone());
            }
            let nyquist = x.sample_rate_hz() / 2.0;
            let center_hz: f64 = rng.random_range(0.0..nyquist);
            let n = x.length();
            let bin_hz = x.sample_rate_hz() / n as f64;
            let (lo, hi) = (center_hz - width_hz / 2.0, center_hz + width_hz / 2.0);
            let mut gain = vec![1.0; n / 2 + 1];
            for (k, g) in gain.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                if f > lo && f < hi {
                    *g = 0.0;
                }
            }
            let mut y = x.clone();
            for c in 0..x.channels() {
                y.row_mut(c)
                    .copy_from_slice(&spectral::filter_with_gain(x.row(c), &gain));
            }
            y
        }
        TransformId::FrequencyShift => {
            if m == 0.0 {
                return Ok(x.clone());
            }
            let shift_hz = m * cfg.f_max_shift_hz;
            let omega = 2.0 * std::f64::consts::PI * shift_hz / x.sample_rate_hz();
            let mut y = x.clone();
            for c in 0..x.channels() {
                let h = spectral::hilbert(x.row(c));
                let row = y.row_mut(c);
                for t in 0..row.len() {
                    let theta = omega * t as f64;
                    row[t] = x.row(c)[t] * theta.cos() - h[t] * theta.sin();
                }
            }
            y
        }
        TransformId::Scaling => {
            if m == 0.0 {
                return Ok(x.clone());
            }
            // per-timestep factor 1 + m*z, shared across channels
            let z: Vec<f64> = (0..x.length())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut y = x.clone();
            for c in 0..y.channels() {
                let row = y.row_mut(c);
                for t in 0..row.len() {
                    row[t] *= 1.0 + m * z[t];
                }
            }
            y
        }
    };
    Ok(out)
}

/// Channels zeroed by ChannelDropout at magnitude m: ceil(m*(C-1)), never C.
pub(crate) fn dropout_count(m: f64, channels: usize) -> usize {
    (m * (channels - 1) as f64).ceil() as usize
}

/// Integer mask start derived from a unit draw: uniform over 0..=L-len.
pub(crate) fn mask_start(u: f64, length: usize, mask_len: usize) -> usize {
    let span = (length - mask_len + 1) as f64;
    ((u * span).floor() as usize).min(length - mask_len)
}

/// Train-time magnitude perturbation: clamp(m + U(-delta, delta), 0, 1).
pub fn perturb_magnitude(m: f64, delta: f64, rng: &mut impl Rng) -> f64 {
    if delta == 0.0 {
        return m.clamp(0.0, 1.0);
    }
    (m + rng.random_range(-delta..delta)).clamp(0.0, 1.0)
}
