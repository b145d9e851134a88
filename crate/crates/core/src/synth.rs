//! Synthetic polysomnography fixtures: EDF recordings whose scored epochs are
//! sine, chirp or noise segments, with matching EDF+ hypnograms.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edf::{write_edf, write_hypnogram, EdfHeader, SignalHeader, SleepAnnotation};
use crate::error::Result;

pub const SYNTH_CHANNEL: &str = "EEG Fpz-Cz";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Waveform {
    Sine,
    Chirp,
    Noise,
}

impl Waveform {
    /// Hypnogram label used for this waveform (Sleep-EDF style).
    pub fn stage_label(self) -> &'static str {
        match self {
            Waveform::Sine => "Sleep stage W",
            Waveform::Chirp => "Sleep stage R",
            Waveform::Noise => "Sleep stage 1",
        }
    }

    pub const ALL: [Waveform; 3] = [Waveform::Sine, Waveform::Chirp, Waveform::Noise];
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub epoch_s: f64,
    pub rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            epoch_s: 30.0,
            rate_hz: 50.0,
            seed: 13,
        }
    }
}

/// Microvolt samples for one epoch of `wave`.
pub fn epoch_samples(wave: Waveform, n: usize, rate_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(40.0..80.0);
    let dur = n as f64 / rate_hz;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate_hz;
            let jitter = rng.random_range(-2.0..2.0);
            match wave {
                Waveform::Sine => amp * (std::f64::consts::TAU * 0.4 * t + phase).sin() + jitter,
                Waveform::Chirp => {
                    // 0.05 Hz sweeping up to 1.5 Hz across the epoch
                    let (f0, f1) = (0.05, 1.5);
                    let k = (f1 - f0) / dur;
                    amp * (std::f64::consts::TAU * (f0 * t + 0.5 * k * t * t) + phase).sin() + jitter
                }
                Waveform::Noise => amp * rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

/// One recording: EDF bytes and hypnogram bytes. `plan` lists the waveform of
/// each consecutive epoch; `None` entries are scored as movement time.
pub fn synthetic_recording(plan: &[Option<Waveform>], spec: &SynthSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.epoch_s * spec.rate_hz).round() as usize;
    let header = SignalHeader::new(SYNTH_CHANNEL, -200.0, 200.0, n);
    let mut digital = Vec::with_capacity(n * plan.len());
    let mut annotations = Vec::new();
    for (e, wave) in plan.iter().enumerate() {
        let samples = epoch_samples(wave.unwrap_or(Waveform::Noise), n, spec.rate_hz, &mut rng);
        digital.extend(samples.iter().map(|&v| header.to_digital(v)));
        let label = wave.map_or("Movement time", Waveform::stage_label);
        annotations.push(SleepAnnotation::new(e as f64 * spec.epoch_s, spec.epoch_s, label));
    }
    let edf = write_edf(&EdfHeader::new(plan.len(), spec.epoch_s, vec![header]), &[digital])?;
    let hyp = write_hypnogram(&annotations, spec.epoch_s)?;
    Ok((edf, hyp))
}

/// Writes `recordings` PSG/hypnogram pairs into `dir`, cycling sine, chirp and
/// noise so every recording holds `epochs_per_recording` scored epochs plus
/// one trailing movement-time epoch. Returns the `(psg, hypnogram)` paths.
pub fn write_synthetic_corpus(
    dir: &Path,
    recordings: usize,
    epochs_per_recording: usize,
    spec: &SynthSpec,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for r in 0..recordings {
        let mut plan: Vec<Option<Waveform>> = (0..epochs_per_recording)
            .map(|e| Some(Waveform::ALL[(e + r) % 3]))
            .collect();
        plan.push(None);
        let rec_spec = SynthSpec {
            seed: spec.seed.wrapping_add(r as u64 * 7919),
            ..spec.clone()
        };
        let (edf, hyp) = synthetic_recording(&plan, &rec_spec)?;
        let psg = dir.join(format!("SYN{r:02}-PSG.edf"));
        let hypno = dir.join(format!("SYN{r:02}-Hypnogram.edf"));
        std::fs::write(&psg, edf)?;
        std::fs::write(&hypno, hyp)?;
        out.push((psg, hypno));
    }
    Ok(out)
}
