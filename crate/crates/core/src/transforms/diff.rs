//! Differentiable transform application for the policy-search phase.
//!
//! Forward values match [`apply`](super::apply) for the same stream, with two
//! exceptions: TimeMask and RandomBandstop substitute sigmoid-edged soft masks
//! so the magnitude gradient exists (their hard variants are step functions of
//! m). Discrete transforms contribute no magnitude gradient; every transform
//! propagates the input gradient through its (fixed-draw) linear map.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use super::{dropout_count, spectral, RngStream, TransformId, TransformSettings};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Applies transform `t` on the tape. `x` is a [C,L] variable, `m` a scalar
/// variable holding the magnitude in [0,1].
pub fn apply_differentiable(
    tape: &mut Tape,
    t: TransformId,
    x: Var,
    m: Var,
    stream: RngStream,
    cfg: &TransformSettings,
    sample_rate_hz: f64,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("apply_differentiable: x must be [C,L]"));
    }
    if tape.value(m).numel() != 1 {
        return Err(Error::dim("apply_differentiable: m must be scalar"));
    }
    let mv = tape.value(m).item();
    if !(0.0..=1.0).contains(&mv) || mv.is_nan() {
        return Err(Error::contract(format!("magnitude {mv} outside [0,1]")));
    }
    let (c, l) = (shape[0], shape[1]);
    let mut rng = stream.rng();

    match t {
        TransformId::Identity => Ok(x),
        TransformId::SignFlip => Ok(tape.neg(x)),
        TransformId::TimeReverse => {
            let xv = tape.value(x).clone();
            let mut data = xv.data().to_vec();
            for ci in 0..c {
                data[ci * l..(ci + 1) * l].reverse();
            }
            let out = Tensor::new(shape.clone(), data)?;
            Ok(tape.record(out, vec![x], Box::new(move |g, _| {
                let mut d = g.data().to_vec();
                for ci in 0..c {
                    d[ci * l..(ci + 1) * l].reverse();
                }
                vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
            })))
        }
        TransformId::ChannelShuffle => {
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut rng);
            let xv = tape.value(x).clone();
            let mut data = vec![0.0; c * l];
            for (dst, &src) in order.iter().enumerate() {
                data[dst * l..(dst + 1) * l].copy_from_slice(&xv.data()[src * l..(src + 1) * l]);
            }
            let out = Tensor::new(shape.clone(), data)?;
            Ok(tape.record(out, vec![x], Box::new(move |g, _| {
                let mut d = vec![0.0; c * l];
                for (dst, &src) in order.iter().enumerate() {
                    d[src * l..(src + 1) * l].copy_from_slice(&g.data()[dst * l..(dst + 1) * l]);
                }
                vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
            })))
        }
        TransformId::ChannelDropout => {
            let count = dropout_count(mv, c);
            let mut mask = vec![1.0; c];
            if count > 0 {
                for ci in rand::seq::index::sample(&mut rng, c, count).iter() {
                    mask[ci] = 0.0;
                }
            }
            let mask_t = {
                let mut d = vec![0.0; c * l];
                for ci in 0..c {
                    d[ci * l..(ci + 1) * l].iter_mut().for_each(|v| *v = mask[ci]);
                }
                Tensor::new(shape.clone(), d)?
            };
            let mk = tape.constant(&mask_t);
            tape.mul(x, mk)
        }
        TransformId::FftSurrogate => {
            let thetas: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    (1..=(l - 1) / 2)
                        .map(|_| {
                            mv * rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
                        })
                        .collect()
                })
                .collect();
            let xv = tape.value(x).clone();
            let rotate = move |src: &[f64], out: &mut [f64], conj: bool, thetas: &[f64]| {
                let n = src.len();
                let mut spec = spectral::dft(src);
                for (i, k) in (1..=(n - 1) / 2).enumerate() {
                    let theta = if conj { -thetas[i] } else { thetas[i] };
                    let rot = Complex::from_polar(1.0, theta);
                    spec[k] *= rot;
                    spec[n - k] *= rot.conj();
                }
                out.copy_from_slice(&spectral::idft(&spec));
            };
            let mut data = vec![0.0; c * l];
            for ci in 0..c {
                let (src, dst) = (
                    &xv.data()[ci * l..(ci + 1) * l],
                    &mut data[ci * l..(ci + 1) * l],
                );
                rotate(src, dst, false, &thetas[ci]);
            }
            let out = Tensor::new(shape.clone(), data)?;
            Ok(tape.record(out, vec![x], Box::new(move |g, _| {
                let mut d = vec![0.0; c * l];
                for ci in 0..c {
                    let (src, dst) =
                        (&g.data()[ci * l..(ci + 1) * l], &mut d[ci * l..(ci + 1) * l]);
                    rotate(src, dst, true, &thetas[ci]);
                }
                vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
            })))
        }
        TransformId::GaussianNoise => {
            let z: Vec<f64> = (0..c * l).map(|_| StandardNormal.sample(&mut rng)).collect();
            let zt = Tensor::new(shape.clone(), z)?;
            let zv = tape.constant(&zt);
            let std = tape.mul_scalar(m, cfg.noise_sigma_max);
            let noise = tape.scale_by(zv, std)?;
            tape.add(x, noise)
        }
        TransformId::Scaling => {
            let z: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut zfull = vec![0.0; c * l];
            for ci in 0..c {
                zfull[ci * l..(ci + 1) * l].copy_from_slice(&z);
            }
            let zt = tape.constant(&Tensor::new(shape.clone(), zfull)?);
            let mz = tape.scale_by(zt, m)?;
            let factors = tape.add_scalar(mz, 1.0);
            tape.mul(x, factors)
        }
        TransformId::TimeMask => {
            let max_len = cfg.max_mask_len(l) as f64;
            let u: f64 = rng.random_range(0.0..1.0);
            let s = cfg.soft_steepness;
            let len_f = mv * max_len;
            let a = u * (l as f64 - len_f);
            let b = a + len_f;
            let da_dm = -u * max_len;
            let db_dm = (1.0 - u) * max_len;
            let mut w = vec![0.0; l];
            let mut dw_dm = vec![0.0; l];
            for (t_idx, (wv, dwv)) in w.iter_mut().zip(dw_dm.iter_mut()).enumerate() {
                let tf = t_idx as f64;
                let (sa, sb) = (sigmoid(s * (tf - a)), sigmoid(s * (tf - b)));
                *wv = 1.0 - sa + sb;
                let (dsa, dsb) = (sa * (1.0 - sa), sb * (1.0 - sb));
                *dwv = dsa * s * da_dm - dsb * s * db_dm;
            }
            let xv = tape.value(x).clone();
            let mut data = vec![0.0; c * l];
            for ci in 0..c {
                for t_idx in 0..l {
                    data[ci * l + t_idx] = xv.data()[ci * l + t_idx] * w[t_idx];
                }
            }
            let out = Tensor::new(shape.clone(), data)?;
            Ok(tape.record(out, vec![x, m], Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![0.0; c * l];
                    for ci in 0..c {
                        for t_idx in 0..l {
                            d[ci * l + t_idx] = g.data()[ci * l + t_idx] * w[t_idx];
                        }
                    }
                    Tensor::new(g.shape().to_vec(), d).unwrap()
                });
                let dm = needs[1].then(|| {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for t_idx in 0..l {
                            acc += g.data()[ci * l + t_idx]
                                * xv.data()[ci * l + t_idx]
                                * dw_dm[t_idx];
                        }
                    }
                    Tensor::scalar(acc)
                });
                vec![dx, dm]
            })))
        }
        TransformId::RandomBandstop => {
            let nyquist = sample_rate_hz / 2.0;
            let center_hz: f64 = rng.random_range(0.0..nyquist);
            let bin_hz = sample_rate_hz / l as f64;
            let c_bin = center_hz / bin_hz;
            let half_bins = mv * l as f64 / 8.0; // (m * fs/8) / bin_hz
            let dhalf_dm = l as f64 / 8.0;
            let s = cfg.soft_steepness;
            let nbins = l / 2 + 1;
            let mut gain = vec![0.0; nbins];
            let mut dgain = vec![0.0; nbins];
            let (lo, hi) = (c_bin - half_bins, c_bin + half_bins);
            for k in 0..nbins {
                let kf = k as f64;
                let (sl, sh) = (sigmoid(s * (kf - lo)), sigmoid(s * (kf - hi)));
                gain[k] = 1.0 - sl + sh;
                let (dsl, dsh) = (sl * (1.0 - sl), sh * (1.0 - sh));
                // d lo/dm = -dhalf_dm, d hi/dm = +dhalf_dm
                dgain[k] = -dsl * s * dhalf_dm - dsh * s * dhalf_dm;
            }
            let xv = tape.value(x).clone();
            let mut data = vec![0.0; c * l];
            for ci in 0..c {
                data[ci * l..(ci + 1) * l]
                    .copy_from_slice(&spectral::filter_with_gain(&xv.data()[ci * l..(ci + 1) * l], &gain));
            }
            let out = Tensor::new(shape.clone(), data)?;
            Ok(tape.record(out, vec![x, m], Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![0.0; c * l];
                    for ci in 0..c {
                        d[ci * l..(ci + 1) * l].copy_from_slice(&spectral::filter_with_gain(
                            &g.data()[ci * l..(ci + 1) * l],
                            &gain,
                        ));
                    }
                    Tensor::new(g.shape().to_vec(), d).unwrap()
                });
                let dm = needs[1].then(|| {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let dyd = spectral::filter_with_gain(
                            &xv.data()[ci * l..(ci + 1) * l],
                            &dgain,
                        );
                        for t_idx in 0..l {
                            acc += g.data()[ci * l + t_idx] * dyd[t_idx];
                        }
                    }
                    Tensor::scalar(acc)
                });
                vec![dx, dm]
            })))
        }
        TransformId::FrequencyShift => {
            let omega_per_m = 2.0 * std::f64::consts::PI * cfg.f_max_shift_hz / sample_rate_hz;
            let omega = mv * omega_per_m;
            let xv = tape.value(x).clone();
            let hx: Vec<Vec<f64>> = (0..c)
                .map(|ci| spectral::hilbert(&xv.data()[ci * l..(ci + 1) * l]))
                .collect();
            let (mut cos_t, mut sin_t) = (vec![0.0; l], vec![0.0; l]);
            for t_idx in 0..l {
                let theta = omega * t_idx as f64;
                cos_t[t_idx] = theta.cos();
                sin_t[t_idx] = theta.sin();
            }
            let mut data = vec![0.0; c * l];
            for ci in 0..c {
                for t_idx in 0..l {
                    data[ci * l + t_idx] =
                        xv.data()[ci * l + t_idx] * cos_t[t_idx] - hx[ci][t_idx] * sin_t[t_idx];
                }
            }
            let out = Tensor::new(shape.clone(), data)?;
            Ok(tape.record(out, vec![x, m], Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    // adjoint of y = cos.x - sin.Hx is cos.g + H(sin.g)
                    let mut d = vec![0.0; c * l];
                    for ci in 0..c {
                        let grow = &g.data()[ci * l..(ci + 1) * l];
                        let sg: Vec<f64> =
                            (0..l).map(|t_idx| sin_t[t_idx] * grow[t_idx]).collect();
                        let hsg = spectral::hilbert(&sg);
                        for t_idx in 0..l {
                            d[ci * l + t_idx] = cos_t[t_idx] * grow[t_idx] + hsg[t_idx];
                        }
                    }
                    Tensor::new(g.shape().to_vec(), d).unwrap()
                });
                let dm = needs[1].then(|| {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for t_idx in 0..l {
                            let dtheta = omega_per_m * t_idx as f64;
                            let dy = (-xv.data()[ci * l + t_idx] * sin_t[t_idx]
                                - hx[ci][t_idx] * cos_t[t_idx])
                                * dtheta;
                            acc += g.data()[ci * l + t_idx] * dy;
                        }
                    }
                    Tensor::scalar(acc)
                });
                vec![dx, dm]
            })))
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{apply, registry, slots, Signal};

    fn toy() -> (Signal, Tensor) {
        let mut rng = RngStream::new(77, 0, 0, 1).rng();
        let values: Vec<f64> = (0..2 * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sig = Signal::new(2, 24, 100.0, values).unwrap();
        let t = sig.to_tensor();
        (sig, t)
    }

    #[test]
    fn forward_matches_hard_apply_for_exact_transforms() {
        let (sig, xt) = toy();
        let stream = RngStream::new(5, 3, 1, slots::TRANSFORM_BASE);
        let cfg = TransformSettings::default();
        for t in registry(true) {
            if matches!(t, TransformId::TimeMask | TransformId::RandomBandstop) {
                continue; // soft-edged in the differentiable path
            }
            let hard = apply(t, &sig, 0.6, stream).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(&xt);
            let m = tape.input(&Tensor::scalar(0.6));
            let y = apply_differentiable(&mut tape, t, x, m, stream, &cfg, 100.0).unwrap();
            let diff: f64 = tape
                .value(y)
                .data()
                .iter()
                .zip(hard.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "{t:?}: forward deviates by {diff}");
        }
    }

    #[test]
    fn soft_variants_stay_close_to_hard_and_are_noop_at_zero() {
        let (sig, xt) = toy();
        let stream = RngStream::new(5, 3, 1, slots::TRANSFORM_BASE);
        let cfg = TransformSettings::default();
        for t in [TransformId::TimeMask, TransformId::RandomBandstop] {
            let mut tape = Tape::new();
            let x = tape.input(&xt);
            let m = tape.input(&Tensor::scalar(0.0));
            let y = apply_differentiable(&mut tape, t, x, m, stream, &cfg, 100.0).unwrap();
            let diff: f64 = tape
                .value(y)
                .data()
                .iter()
                .zip(sig.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "{t:?} at m=0 deviates by {diff}");
        }
    }

    #[test]
    fn discrete_transforms_have_zero_magnitude_gradient() {
        let (_, xt) = toy();
        let stream = RngStream::new(9, 1, 0, slots::TRANSFORM_BASE);
        let cfg = TransformSettings::default();
        for t in registry(true) {
            if t.magnitude_differentiable() {
                continue;
            }
            let mut tape = Tape::new();
            let x = tape.input(&xt);
            let m = tape.input(&Tensor::scalar(0.4).requires_grad(true));
            let y = apply_differentiable(&mut tape, t, x, m, stream, &cfg, 100.0).unwrap();
            let loss = tape.sum(y);
            let grads = tape.backward(loss).unwrap();
            assert_eq!(grads.wrt(m).item(), 0.0, "{t:?} magnitude gradient not 0");
        }
    }

    #[test]
    fn identity_passes_input_gradient_through() {
        let (_, xt) = toy();
        let stream = RngStream::new(9, 1, 0, slots::TRANSFORM_BASE);
        let cfg = TransformSettings::default();
        let mut tape = Tape::new();
        let x = tape.input(&xt.clone().requires_grad(true));
        let m = tape.input(&Tensor::scalar(0.5));
        let y = apply_differentiable(&mut tape, TransformId::Identity, x, m, stream, &cfg, 100.0)
            .unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&g| g == 1.0));
    }
}
