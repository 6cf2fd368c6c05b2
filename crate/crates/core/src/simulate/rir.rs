use crate::audio_dsp::AudioBuffer;
use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Sabine constant `24 ln(10) / c` in s/m.
const SABINE: f64 = 0.161;
/// Half-width of the windowed-sinc fractional delay, in samples.
const SINC_HALF: i64 = 8;

/// Shoebox room with one source and one microphone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dimensions: [f64; 3],
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    pub rt60_s: f64,
}

impl RoomSpec {
    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [l, w, h] = self.dimensions;
        2.0 * (l * w + l * h + w * h)
    }

    /// Shortest reverberation time the room can realise (Sabine with fully
    /// absorbing walls).
    pub fn sabine_bound_s(&self) -> f64 {
        SABINE * self.volume() / self.surface()
    }

    /// Checks geometry, the allowed RT60 range and reachability.
    pub fn validate(&self, rt60_range: (f64, f64)) -> Result<()> {
        for (i, &d) in self.dimensions.iter().enumerate() {
            if !(d.is_finite() && d > 0.0) {
                return invalid(format!("room dimension {i} must be positive, got {d}"));
            }
            for (what, p) in [("source", self.source_pos), ("mic", self.mic_pos)] {
                if !(p[i] > 0.0 && p[i] < d) {
                    return invalid(format!("{what} position {:?} is not strictly inside the room", p));
                }
            }
        }
        if !(self.rt60_s >= rt60_range.0 && self.rt60_s <= rt60_range.1) {
            return invalid(format!(
                "rt60 {} s outside the configured range [{}, {}]",
                self.rt60_s, rt60_range.0, rt60_range.1
            ));
        }
        let bound = self.sabine_bound_s();
        if self.rt60_s <= bound {
            return Err(Error::UnreachableRt60 {
                rt60_s: self.rt60_s,
                bound_s: bound,
            });
        }
        Ok(())
    }

    /// Wall reflection coefficient from inverting Eyring's formula.
    pub fn reflection_coefficient(&self) -> f64 {
        let a = SABINE * self.volume() / (self.surface() * self.rt60_s);
        // Eyring: alpha = 1 - exp(-a), beta = sqrt(1 - alpha)
        (-a / 2.0).exp()
    }

    fn distance(&self) -> f64 {
        self.source_pos
            .iter()
            .zip(&self.mic_pos)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// One image source: propagation distance and wall-reflection count.
#[derive(Debug, Clone, Copy)]
struct Image {
    dist: f64,
    reflections: i32,
}

fn enumerate_images(room: &RoomSpec, max_dist: f64, min_dist: f64) -> Vec<Image> {
    let dims = room.dimensions;
    let n_max: Vec<i64> = dims.iter().map(|d| (max_dist / (2.0 * d)).ceil() as i64 + 1).collect();
    // image coordinate along one axis: (1 - 2q) * s + 2 n L, with q in {0, 1}
    // and |n - q| + |n| reflections
    let mut axis_terms: Vec<Vec<(f64, i32)>> = Vec::with_capacity(3);
    for a in 0..3 {
        let mut terms = Vec::new();
        for n in -n_max[a]..=n_max[a] {
            for q in 0..=1i64 {
                let pos = (1 - 2 * q) as f64 * room.source_pos[a] + 2.0 * n as f64 * dims[a];
                let diff = pos - room.mic_pos[a];
                if diff.abs() <= max_dist {
                    terms.push((diff, ((n - q).abs() + n.abs()) as i32));
                }
            }
        }
        axis_terms.push(terms);
    }
    let max_sq = max_dist * max_dist;
    let mut images = Vec::new();
    for &(dx, rx) in &axis_terms[0] {
        for &(dy, ry) in &axis_terms[1] {
            let dxy = dx * dx + dy * dy;
            if dxy > max_sq {
                continue;
            }
            for &(dz, rz) in &axis_terms[2] {
                let d2 = dxy + dz * dz;
                if d2 > max_sq {
                    continue;
                }
                images.push(Image {
                    dist: d2.sqrt().max(min_dist),
                    reflections: rx + ry + rz,
                });
            }
        }
    }
    images
}

/// Image energy binned by reflection count and 1 ms arrival slot, so the
/// decay for any reflection coefficient is a polynomial per slot.
struct EnergyTable {
    by_order: Vec<Vec<f64>>,
    slots: usize,
}

const SLOT_RATE: f64 = 1000.0;

impl EnergyTable {
    fn new(images: &[Image], duration_s: f64) -> Self {
        let slots = (duration_s * SLOT_RATE).ceil() as usize + 1;
        let max_order = images.iter().map(|im| im.reflections).max().unwrap_or(0) as usize;
        let mut by_order = vec![vec![0.0f64; slots]; max_order + 1];
        for im in images {
            let slot = (im.dist / SPEED_OF_SOUND * SLOT_RATE).round() as usize;
            if slot < slots {
                by_order[im.reflections as usize][slot] += 1.0 / (im.dist * im.dist);
            }
        }
        Self { by_order, slots }
    }

    fn t60(&self, beta: f64) -> Option<f64> {
        let b2 = beta * beta;
        let mut energy = vec![0.0f64; self.slots];
        let mut w = 1.0;
        for row in &self.by_order {
            if w < 1e-300 {
                break;
            }
            energy.iter_mut().zip(row).for_each(|(e, &h)| *e += w * h);
            w *= b2;
        }
        t60_from_energy(&energy, SLOT_RATE).ok()
    }
}

/// Reflection coefficient whose image-method decay realises the target
/// RT60, found by bisection on the absorption exponent. Falls back to the
/// Eyring value when the target cannot be matched.
fn calibrated_beta(room: &RoomSpec, table: &EnergyTable) -> f64 {
    // beta = exp(-a / 2); larger a decays faster
    let (mut lo, mut hi) = (1e-4f64, 60.0f64);
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        match table.t60((-mid / 2.0).exp()) {
            Some(t) if t > room.rt60_s => lo = mid,
            _ => hi = mid,
        }
    }
    let beta = (-(lo * hi).sqrt() / 2.0).exp();
    match table.t60(beta) {
        Some(t) if (t / room.rt60_s - 1.0).abs() < 0.05 => beta,
        _ => room.reflection_coefficient(),
    }
}

/// Impulse response of a shoebox room by the image-source method with a
/// windowed-sinc fractional delay per image. The wall reflection
/// coefficient is calibrated so the response's energy decay matches
/// `rt60_s`. The response spans `rt60_s` seconds after the direct path.
/// Distances below one sample are clamped.
pub fn image_method_rir(room: &RoomSpec, rate: u32, rt60_range: (f64, f64)) -> Result<AudioBuffer> {
    room.validate(rt60_range)?;
    let fs = rate as f64;
    let min_dist = SPEED_OF_SOUND / fs;
    let direct = room.distance().max(min_dist);
    let max_time = direct / SPEED_OF_SOUND + room.rt60_s;
    let len = (max_time * fs).ceil() as usize + SINC_HALF as usize + 1;
    let images = enumerate_images(room, max_time * SPEED_OF_SOUND, min_dist);
    let beta = calibrated_beta(room, &EnergyTable::new(&images, max_time));
    let mut h = vec![0.0f64; len];
    for im in &images {
        let gain = beta.powi(im.reflections) / (4.0 * std::f64::consts::PI * im.dist);
        add_fractional_tap(&mut h, im.dist / SPEED_OF_SOUND * fs, gain);
    }
    high_pass(&mut h, fs);
    AudioBuffer::new(h.into_iter().map(|v| v as f32).collect(), rate)
}

/// Second-order DC-blocking filter with a 100 Hz corner (scaled down when
/// the sample rate is low). Image gains are all positive, so without it the
/// tail accumulates a coherent offset that slows the apparent decay.
fn high_pass(h: &mut [f64], fs: f64) {
    let corner = 100.0f64.min(fs / 32.0);
    let w = 2.0 * std::f64::consts::PI * corner / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in h.iter_mut() {
        let x0 = *v;
        let y0 = x0 + a1 * x1 + r1 * x2 + b1 * y1 + b2 * y2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0;
    }
}

const FRAC_STEPS: usize = 1024;

/// Windowed-sinc taps for fractional delays quantised to `1 / FRAC_STEPS`
/// of a sample; row `f` holds taps `k = -SINC_HALF + 1 ..= SINC_HALF`
/// relative to the integer part.
fn sinc_table() -> &'static [[f64; 2 * SINC_HALF as usize]] {
    static TABLE: std::sync::OnceLock<Vec<[f64; 2 * SINC_HALF as usize]>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=FRAC_STEPS)
            .map(|f| {
                let frac = f as f64 / FRAC_STEPS as f64;
                let mut row = [0.0; 2 * SINC_HALF as usize];
                for (j, slot) in row.iter_mut().enumerate() {
                    let x = (j as i64 - SINC_HALF + 1) as f64 - frac;
                    let sinc = if x.abs() < 1e-12 {
                        1.0
                    } else {
                        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                    };
                    let win = 0.5 + 0.5 * (std::f64::consts::PI * x / SINC_HALF as f64).cos();
                    *slot = sinc * win;
                }
                row
            })
            .collect()
    })
}

fn add_fractional_tap(h: &mut [f64], delay: f64, gain: f64) {
    let centre = delay.floor() as i64;
    let frac = ((delay - centre as f64) * FRAC_STEPS as f64).round() as usize;
    let row = &sinc_table()[frac];
    for (j, &tap) in row.iter().enumerate() {
        let k = centre - SINC_HALF + 1 + j as i64;
        if k < 0 || k as usize >= h.len() {
            continue;
        }
        h[k as usize] += gain * tap;
    }
}

/// Sample index and amplitude of the direct path (largest-magnitude tap).
pub fn direct_path(rir: &AudioBuffer) -> (usize, f32) {
    rir.samples
        .iter()
        .enumerate()
        .fold((0, 0.0f32), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best })
}

/// Schroeder backward-integrated energy decay curve in dB (0 dB at the
/// start).
pub fn schroeder_curve_db(rir: &AudioBuffer) -> Vec<f64> {
    let energy: Vec<f64> = rir.samples.iter().map(|&v| (v as f64) * (v as f64)).collect();
    edc_db(&energy)
}

fn edc_db(energy: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    let mut edc: Vec<f64> = energy
        .iter()
        .rev()
        .map(|&e| {
            acc += e;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    edc.iter().map(|&e| 10.0 * (e.max(f64::MIN_POSITIVE) / total).log10()).collect()
}

/// RT60 from a least-squares line over the -5 dB to -25 dB span of the
/// Schroeder curve, extrapolated to 60 dB.
pub fn schroeder_t60(rir: &AudioBuffer) -> Result<f64> {
    let energy: Vec<f64> = rir.samples.iter().map(|&v| (v as f64) * (v as f64)).collect();
    t60_from_energy(&energy, rir.sample_rate as f64)
}

fn t60_from_energy(energy: &[f64], fs: f64) -> Result<f64> {
    let edc = edc_db(energy);
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, &db)| (-25.0..=-5.0).contains(&db))
        .map(|(i, &db)| (i as f64 / fs, db))
        .collect();
    if pts.len() < 2 {
        return invalid("impulse response does not decay by 25 dB");
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if slope >= 0.0 {
        return invalid("energy decay curve is not decreasing");
    }
    Ok(-60.0 / slope)
}

/// Convolves `speech` with `rir`, advances the result by the direct-path
/// delay and divides by the direct-path amplitude, so the dry and
/// reverberant signals stay time-aligned at comparable level. Output length
/// equals the input length.
pub fn reverberate(speech: &AudioBuffer, rir: &AudioBuffer) -> Result<AudioBuffer> {
    if speech.sample_rate != rir.sample_rate {
        return invalid("speech and impulse response sample rates differ");
    }
    let (lead, amp) = direct_path(rir);
    if amp == 0.0 {
        return invalid("impulse response is all zeros");
    }
    let full = fft_convolve(&speech.samples, &rir.samples);
    let scale = 1.0 / amp as f64;
    let samples = (0..speech.len()).map(|i| (full[i + lead] * scale) as f32).collect();
    AudioBuffer::new(samples, speech.sample_rate)
}

/// Linear convolution of length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f32], b: &[f32]) -> Vec<f64> {
    use rustfft::num_complex::Complex64;
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |x: &[f32]| {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let (fa, fb) = (spectrum(a), spectrum(b));
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    inv.process(&mut prod);
    prod[..out_len].iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(rt60: f64) -> RoomSpec {
        RoomSpec {
            dimensions: [5.0, 4.0, 3.0],
            source_pos: [1.2, 1.5, 1.4],
            mic_pos: [3.6, 2.7, 1.6],
            rt60_s: rt60,
        }
    }

    const TRAIN: (f64, f64) = (0.05, 0.95);

    #[test]
    fn t60_of_half_second_room() {
        let rir = image_method_rir(&room(0.5), 16_000, TRAIN).unwrap();
        let t60 = schroeder_t60(&rir).unwrap();
        assert!((0.4..=0.6).contains(&t60), "t60 {t60}");
    }

    #[test]
    fn t60_tracks_target_across_range() {
        for rt60 in [0.2, 0.35, 0.65, 0.8] {
            let rir = image_method_rir(&room(rt60), 8_000, TRAIN).unwrap();
            let t60 = schroeder_t60(&rir).unwrap();
            assert!((t60 / rt60 - 1.0).abs() < 0.2, "target {rt60} measured {t60}");
        }
    }

    #[test]
    fn energy_decay_is_monotone() {
        let rir = image_method_rir(&room(0.3), 16_000, TRAIN).unwrap();
        let edc = schroeder_curve_db(&rir);
        assert!(edc.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn colocated_source_has_direct_tap_at_zero() {
        let mut r = room(0.05);
        r.dimensions = [1.5, 1.5, 1.5];
        r.source_pos = [0.7, 0.7, 0.7];
        r.mic_pos = [0.7, 0.7, 0.7];
        let rir = image_method_rir(&r, 16_000, TRAIN).unwrap();
        let (idx, amp) = direct_path(&rir);
        assert!(idx <= 1, "direct path at {idx}");
        assert!(amp > 0.0);
    }

    #[test]
    fn rt60_range_and_sabine_bound() {
        let mut small = room(0.05);
        small.dimensions = [1.5, 1.5, 1.5];
        small.source_pos = [0.4, 0.5, 0.6];
        small.mic_pos = [1.0, 1.1, 0.9];
        small.validate(TRAIN).unwrap();
        room(0.95).validate(TRAIN).unwrap();
        assert!(room(1.0).validate(TRAIN).is_err());
        // 5x4x3 cannot decay in 0.05 s
        match room(0.05).validate(TRAIN) {
            Err(Error::UnreachableRt60 { bound_s, .. }) => assert!((bound_s - 0.161 * 60.0 / 94.0).abs() < 1e-12),
            other => panic!("expected Sabine bound error, got {other:?}"),
        }
        let msg = room(0.05).validate(TRAIN).unwrap_err().to_string();
        assert!(msg.contains("Sabine"));
    }

    #[test]
    fn outside_positions_rejected() {
        let mut r = room(0.5);
        r.mic_pos = [5.0, 1.0, 1.0];
        assert!(r.validate(TRAIN).is_err());
    }

    #[test]
    fn deterministic() {
        let a = image_method_rir(&room(0.2), 8_000, TRAIN).unwrap();
        let b = image_method_rir(&room(0.2), 8_000, TRAIN).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let a = [1.0f32, 2.0, -1.0];
        let b = [0.5f32, 0.0, 1.0, 2.0];
        let got = fft_convolve(&a, &b);
        let want = [0.5, 1.0, 0.5, 4.0, 3.0, -2.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn reverberation_with_unit_impulse_is_identity() {
        let speech = AudioBuffer::new(vec![0.1, -0.2, 0.3, 0.0, 0.5], 16_000).unwrap();
        let rir = AudioBuffer::new(vec![0.0, 0.0, 0.5], 16_000).unwrap();
        let out = reverberate(&speech, &rir).unwrap();
        for (a, b) in out.samples.iter().zip(&speech.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
