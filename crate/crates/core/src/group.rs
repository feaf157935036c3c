//! Translation groups, their actions on parameters and data, and blurring kernels.
//!
//! Every group in this crate is a product of one or more real translation
//! factors, so a [`GroupElement`] is a vector of shifts and composition is
//! component-wise addition. Parameters transform by adding the shifts to their
//! pose slots; data transforms under a [`DataRepresentation`].
//!
//! Time-series data are shifted cyclically through the Fourier domain, which
//! makes fractional shifts exact for periodic signals. For even bin counts the
//! Nyquist coefficient of a real signal cannot carry a continuous phase, so it
//! is multiplied by `(-1)^round(shift / dt)`. This keeps integer-bin shifts
//! identical to index rolling and every shift exactly invertible; composition
//! of two fractional shifts is exact on signals without Nyquist content and
//! whenever one of the two shifts lies on the sampling grid.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An element of a product of real translation groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupElement {
    shifts: Vec<f64>,
}

impl GroupElement {
    pub fn new(shifts: Vec<f64>) -> Self {
        Self { shifts }
    }

    /// The identity element with `factors` translation factors.
    pub fn identity(factors: usize) -> Self {
        Self {
            shifts: vec![0.0; factors],
        }
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn factors(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_identity(&self) -> bool {
        self.shifts.iter().all(|s| *s == 0.0)
    }

    pub fn inverse(&self) -> Self {
        Self {
            shifts: self.shifts.iter().map(|s| -s).collect(),
        }
    }

    pub fn compose(&self, other: &GroupElement) -> Result<Self> {
        compose(self, other)
    }
}

/// Group operation: component-wise sum of shifts.
pub fn compose(g: &GroupElement, h: &GroupElement) -> Result<GroupElement> {
    if g.factors() != h.factors() {
        return Err(Error::structural(format!(
            "cannot compose group elements with {} and {} factors",
            g.factors(),
            h.factors()
        )));
    }
    Ok(GroupElement {
        shifts: g.shifts.iter().zip(&h.shifts).map(|(a, b)| a + b).collect(),
    })
}

/// `log |det J_g|` of a parameter-space action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogDetJacobian(pub f64);

/// Apply `g` to the pose slots of `theta`. Translations have unit Jacobian.
pub fn act_on_params(
    g: &GroupElement,
    theta: &[f64],
    pose_slots: &[usize],
) -> Result<(Vec<f64>, LogDetJacobian)> {
    if pose_slots.len() != g.factors() {
        return Err(Error::structural(format!(
            "{} pose slots for a group element with {} factors",
            pose_slots.len(),
            g.factors()
        )));
    }
    let mut out = theta.to_vec();
    for (&slot, shift) in pose_slots.iter().zip(g.shifts()) {
        let v = out.get_mut(slot).ok_or_else(|| {
            Error::structural(format!(
                "pose slot {slot} out of range for {}-dimensional parameters",
                theta.len()
            ))
        })?;
        *v += shift;
    }
    Ok((out, LogDetJacobian(0.0)))
}

/// Sampling metadata of the data a representation acts on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Samples per channel (time bins, or time bins of the underlying series
    /// for frequency-domain data).
    pub bins: usize,
    /// Length of the observation window; the period of cyclic shifts.
    pub duration: f64,
    /// Time of the first bin.
    pub start: f64,
    pub channels: usize,
    pub units: String,
}

impl Grid {
    pub fn time_series(bins: usize, start: f64, end: f64, channels: usize) -> Self {
        Self {
            bins,
            duration: end - start,
            start,
            channels,
            units: "s".into(),
        }
    }

    /// A grid for a single real number.
    pub fn scalar() -> Self {
        Self {
            bins: 1,
            duration: 1.0,
            start: 0.0,
            channels: 1,
            units: String::new(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.bins as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.bins).map(|i| self.start + i as f64 * dt).collect()
    }

    /// Number of one-sided frequency bins, `bins / 2 + 1`.
    pub fn frequency_bins(&self) -> usize {
        self.bins / 2 + 1
    }
}

/// How data transform under the group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RepresentationKind {
    /// Real time series, shifted cyclically.
    CyclicTimeShift,
    /// One-sided complex spectra stored as interleaved (re, im) pairs,
    /// shifted by multiplication with `exp(-2πifΔt)`.
    FrequencyPhaseShift,
    /// `x + scale * shift` on every entry.
    Affine1d { scale: f64 },
}

/// A data representation: kind, sampling grid, and the linear map from group
/// factors to per-channel shifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRepresentation {
    pub kind: RepresentationKind,
    pub grid: Grid,
    /// `channel_map[c][f]` is the coefficient of factor `f` in the shift of
    /// channel `c`.
    pub channel_map: Vec<Vec<f64>>,
}

impl DataRepresentation {
    /// Single channel, single factor.
    pub fn new(kind: RepresentationKind, grid: Grid) -> Self {
        let channel_map = vec![vec![1.0]; grid.channels];
        Self {
            kind,
            grid,
            channel_map,
        }
    }

    pub fn with_channel_map(mut self, channel_map: Vec<Vec<f64>>) -> Self {
        self.channel_map = channel_map;
        self
    }

    pub fn factors(&self) -> usize {
        self.channel_map.first().map_or(0, Vec::len)
    }

    /// Length of one channel of data in this representation.
    pub fn channel_len(&self) -> usize {
        match self.kind {
            RepresentationKind::FrequencyPhaseShift => 2 * self.grid.frequency_bins(),
            _ => self.grid.bins,
        }
    }

    pub fn data_len(&self) -> usize {
        self.channel_len() * self.grid.channels
    }

    /// Per-channel shifts induced by `g`.
    pub fn channel_shifts(&self, g: &GroupElement) -> Result<Vec<f64>> {
        if g.factors() != self.factors() {
            return Err(Error::structural(format!(
                "representation has {} factors, group element has {}",
                self.factors(),
                g.factors()
            )));
        }
        Ok(self
            .channel_map
            .iter()
            .map(|row| row.iter().zip(g.shifts()).map(|(c, s)| c * s).sum())
            .collect())
    }
}

/// Apply `g` to `x` under `rep`.
pub fn act_on_data(g: &GroupElement, x: &[f64], rep: &DataRepresentation) -> Result<Vec<f64>> {
    ShiftableData::new(x, rep)?.shifted(g)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Data prepared for repeated group actions. Time series keep their spectra
/// so each shift costs one inverse transform per channel.
#[derive(Clone, Debug)]
pub struct ShiftableData<'a> {
    x: &'a [f64],
    rep: &'a DataRepresentation,
    spectra: Option<Vec<Vec<Complex64>>>,
}

impl<'a> ShiftableData<'a> {
    pub fn new(x: &'a [f64], rep: &'a DataRepresentation) -> Result<Self> {
        if x.len() != rep.data_len() {
            return Err(Error::Data(format!(
                "data length {} does not match representation length {}",
                x.len(),
                rep.data_len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite entry at index {i}")));
        }
        let spectra = match rep.kind {
            RepresentationKind::CyclicTimeShift => {
                let n = rep.grid.bins;
                let (forward, _) = fft_pair(n);
                Some(
                    x.chunks(n)
                        .map(|ch| {
                            let mut buf: Vec<Complex64> =
                                ch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                            forward.process(&mut buf);
                            buf
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        Ok(Self { x, rep, spectra })
    }

    pub fn shifted(&self, g: &GroupElement) -> Result<Vec<f64>> {
        let shifts = self.rep.channel_shifts(g)?;
        if g.is_identity() {
            return Ok(self.x.to_vec());
        }
        let len = self.rep.channel_len();
        let mut out = Vec::with_capacity(self.x.len());
        for (c, &shift) in shifts.iter().enumerate() {
            let channel = &self.x[c * len..(c + 1) * len];
            if shift == 0.0 {
                out.extend_from_slice(channel);
                continue;
            }
            match &self.rep.kind {
                RepresentationKind::Affine1d { scale } => {
                    out.extend(channel.iter().map(|v| v + scale * shift));
                }
                RepresentationKind::FrequencyPhaseShift => {
                    let df = 1.0 / self.rep.grid.duration;
                    for (k, pair) in channel.chunks(2).enumerate() {
                        let z = Complex64::new(pair[0], pair[1]) * phase(k as f64 * df, shift);
                        out.push(z.re);
                        out.push(z.im);
                    }
                }
                RepresentationKind::CyclicTimeShift => {
                    let spectrum = &self.spectra.as_ref().expect("spectra computed")[c];
                    out.extend(cyclic_shift(spectrum, &self.rep.grid, shift));
                }
            }
        }
        Ok(out)
    }
}

fn phase(freq: f64, shift: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * freq * shift)
}

fn cyclic_shift(spectrum: &[Complex64], grid: &Grid, shift: f64) -> Vec<f64> {
    let n = spectrum.len();
    let mut buf = vec![Complex64::default(); n];
    // phases for +f and -f are conjugate; powers of one step avoid a sincos per bin
    let step = phase(1.0 / grid.duration, shift);
    let mut w = Complex64::new(1.0, 0.0);
    for k in 0..=(n - 1) / 2 {
        buf[k] = spectrum[k] * w;
        if k > 0 {
            buf[n - k] = spectrum[n - k] * w.conj();
        }
        w *= step;
    }
    if n % 2 == 0 {
        let bins = (shift / grid.dt()).round();
        let z = spectrum[n / 2];
        buf[n / 2] = if bins.rem_euclid(2.0) == 0.0 { z } else { -z };
    }
    let (_, inverse) = fft_pair(n);
    inverse.process(&mut buf);
    let norm = 1.0 / n as f64;
    buf.into_iter().map(|z| z.re * norm).collect()
}

/// One-sided spectrum of each channel of a real time series, as interleaved
/// (re, im) pairs scaled by the bin width so the result approximates the
/// continuous Fourier transform.
pub fn to_frequency_domain(x: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    let n = grid.bins;
    if x.len() != n * grid.channels {
        return Err(Error::Data(format!(
            "expected {} samples, got {}",
            n * grid.channels,
            x.len()
        )));
    }
    let (forward, _) = fft_pair(n);
    let dt = grid.dt();
    let mut out = Vec::with_capacity(2 * grid.frequency_bins() * grid.channels);
    for ch in x.chunks(n) {
        let mut buf: Vec<Complex64> = ch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        forward.process(&mut buf);
        for z in &buf[..grid.frequency_bins()] {
            out.push(z.re * dt);
            out.push(z.im * dt);
        }
    }
    Ok(out)
}

/// A symmetric blurring kernel over the group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Kernel {
    Gaussian { sigma: Vec<f64> },
    Uniform { half_width: Vec<f64> },
    Delta { factors: usize },
}

impl Kernel {
    pub fn gaussian(sigma: f64) -> Self {
        Kernel::Gaussian { sigma: vec![sigma] }
    }

    pub fn uniform(half_width: f64) -> Self {
        Kernel::Uniform {
            half_width: vec![half_width],
        }
    }

    pub fn delta() -> Self {
        Kernel::Delta { factors: 1 }
    }

    pub fn factors(&self) -> usize {
        match self {
            Kernel::Gaussian { sigma } => sigma.len(),
            Kernel::Uniform { half_width } => half_width.len(),
            Kernel::Delta { factors } => *factors,
        }
    }

    pub fn is_delta(&self) -> bool {
        matches!(self, Kernel::Delta { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let widths = match self {
            Kernel::Gaussian { sigma } => sigma,
            Kernel::Uniform { half_width } => half_width,
            Kernel::Delta { .. } => return Ok(()),
        };
        if widths.is_empty() || widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("kernel", "kernel widths must be positive and finite"));
        }
        Ok(())
    }
}

/// Density of `kernel` at `eps`. The delta kernel returns `+inf` at the
/// identity and zero elsewhere.
pub fn kernel_density(kernel: &Kernel, eps: &GroupElement) -> f64 {
    match kernel {
        Kernel::Gaussian { sigma } => sigma
            .iter()
            .zip(eps.shifts())
            .map(|(s, e)| (-0.5 * (e / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
            .product(),
        Kernel::Uniform { half_width } => half_width
            .iter()
            .zip(eps.shifts())
            .map(|(w, e)| if e.abs() <= *w { 0.5 / w } else { 0.0 })
            .product(),
        Kernel::Delta { .. } => {
            if eps.is_identity() {
                f64::INFINITY
            } else {
                0.0
            }
        }
    }
}

/// Draw `ε ~ κ`, independently per factor.
pub fn sample_kernel<R: Rng + ?Sized>(kernel: &Kernel, rng: &mut R) -> GroupElement {
    let shifts = match kernel {
        Kernel::Gaussian { sigma } => sigma
            .iter()
            .map(|s| s * { let z: f64 = StandardNormal.sample(rng); z })
            .collect(),
        Kernel::Uniform { half_width } => half_width
            .iter()
            .map(|w| rng.random_range(-w..=*w))
            .collect(),
        Kernel::Delta { factors } => vec![0.0; *factors],
    };
    GroupElement::new(shifts)
}

/// Blur a pose into a proxy: `ĝ = g_pose ∘ ε` with `ε ~ κ`.
pub fn make_proxy<R: Rng + ?Sized>(
    g_pose: &GroupElement,
    kernel: &Kernel,
    rng: &mut R,
) -> Result<GroupElement> {
    if kernel.factors() != g_pose.factors() {
        return Err(Error::structural(format!(
            "kernel has {} factors, pose has {}",
            kernel.factors(),
            g_pose.factors()
        )));
    }
    compose(g_pose, &sample_kernel(kernel, rng))
}
