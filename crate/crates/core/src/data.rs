//! Synthetic CSI-like datasets: seeded generation, stratified splitting,
//! and a stable binary file format.
//!
//! Each class gets a latent signature — per-subcarrier sinusoids with a
//! class frequency, per-antenna phase offsets, and an amplitude envelope —
//! and each sample renders that signature with per-sample jitter (time
//! shift, amplitude scale) plus additive Gaussian noise. Values are
//! quantized to `f32` at generation time so files round-trip bit-for-bit.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RSDS";
pub const DATASET_VERSION: u32 = 1;

/// One labeled sensor tensor `[A, S, T]` of non-negative amplitudes.
#[derive(Debug, Clone)]
pub struct CsiSample {
    pub values: Tensor,
    pub label: usize,
}

/// A labeled dataset of same-shape samples.
#[derive(Debug, Clone)]
pub struct CsiDataset {
    pub classes: usize,
    /// Per-sample extents (antennas, subcarriers, timesteps).
    pub shape: [usize; 3],
    pub samples: Vec<CsiSample>,
}

/// Generation parameters. Presets mirror the evaluation datasets; `custom`
/// builds anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub antennas: usize,
    pub subcarriers: usize,
    pub timesteps: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_level: f64,
    /// Seed for the per-class latent signatures (kept separate from the
    /// per-sample jitter seed so signatures can be held fixed).
    pub signature_seed: u64,
}

impl DatasetSpec {
    /// Six activity classes, 400 samples each, full 3×114×500 tensors.
    pub fn har6() -> Self {
        DatasetSpec {
            classes: 6,
            per_class: 400,
            antennas: 3,
            subcarriers: 114,
            timesteps: 500,
            noise_level: 0.25,
            signature_seed: 0,
        }
    }

    /// Twelve identity classes, 60 samples each, full-size tensors.
    pub fn hid12() -> Self {
        DatasetSpec {
            classes: 12,
            per_class: 60,
            antennas: 3,
            subcarriers: 114,
            timesteps: 500,
            noise_level: 0.25,
            signature_seed: 0,
        }
    }

    /// Desk-scale preset: 1×8×32 tensors, four classes, 50 samples each.
    pub fn tiny() -> Self {
        DatasetSpec {
            classes: 4,
            per_class: 50,
            antennas: 1,
            subcarriers: 8,
            timesteps: 32,
            noise_level: 0.25,
            signature_seed: 0,
        }
    }

    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "har6" => Ok(Self::har6()),
            "hid12" => Ok(Self::hid12()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown dataset variant {other:?}"))),
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.antennas, self.subcarriers, self.timesteps]
    }
}

/// Latent per-class signature drawn once from the signature seed.
#[derive(Debug, Clone)]
pub struct ClassSignature {
    /// Oscillations per window.
    frequency: f64,
    /// One phase offset per antenna.
    antenna_phase: Vec<f64>,
    /// Amplitude envelope parameters over subcarriers.
    envelope_cycles: f64,
    envelope_phase: f64,
}

fn class_signatures(spec: &DatasetSpec) -> Vec<ClassSignature> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.signature_seed);
    (0..spec.classes)
        .map(|_| ClassSignature {
            frequency: rng.gen_range(1.5..6.0),
            antenna_phase: (0..spec.antennas).map(|_| rng.gen_range(0.0..TAU)).collect(),
            envelope_cycles: rng.gen_range(1.0..4.0),
            envelope_phase: rng.gen_range(0.0..TAU),
        })
        .collect()
}

/// Additive offset keeping amplitudes non-negative for typical noise draws;
/// anything beyond is clamped at zero.
fn amplitude_offset(noise_level: f64) -> f64 {
    2.0 + 5.0 * noise_level
}

/// Render one sample: signature + jitter + noise, quantized to `f32`.
///
/// Jitter (time shift uniform in `[0, T/4]`, amplitude scale uniform in
/// `[0.8, 1.2]`) and noise come from the two seeds, so identical seeds give
/// identical tensors.
pub fn render_sample(
    spec: &DatasetSpec,
    signature: &ClassSignature,
    jitter_seed: u64,
    noise_seed: u64,
) -> Tensor {
    let [a, s, t] = spec.sample_shape();
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let shift = jitter_rng.gen_range(0.0..(t as f64) / 4.0);
    let scale = jitter_rng.gen_range(0.8..1.2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let offset = amplitude_offset(spec.noise_level);
    let mut data = Vec::with_capacity(a * s * t);
    for ai in 0..a {
        let phase_a = signature.antenna_phase[ai];
        for si in 0..s {
            let envelope = 1.0
                + 0.5
                    * (TAU * signature.envelope_cycles * si as f64 / s as f64
                        + signature.envelope_phase)
                        .sin();
            let phase_s = TAU * si as f64 / s as f64;
            for ti in 0..t {
                let wave = (TAU * signature.frequency * (ti as f64 - shift) / t as f64
                    + phase_a
                    + phase_s)
                    .sin();
                let noise: f64 = noise_rng.sample(StandardNormal);
                let v = offset + scale * envelope * wave + spec.noise_level * noise;
                data.push((v.max(0.0) as f32) as f64);
            }
        }
    }
    Tensor::new(vec![a, s, t], data).expect("rendered values are finite")
}

/// Generate a labeled dataset: `classes * per_class` samples in class-major
/// order, deterministic for fixed seeds and any thread count.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<CsiDataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.antennas == 0 || spec.subcarriers == 0 || spec.timesteps == 0 || spec.per_class == 0 {
        return Err(Error::Config("all extents must be >= 1".into()));
    }
    let signatures = class_signatures(spec);

    let samples: Vec<CsiSample> = (0..spec.classes * spec.per_class)
        .into_par_iter()
        .map(|i| {
            let class = i / spec.per_class;
            // Distinct sub-seeds per sample, split into jitter and noise
            // streams so a noise-free render is independent of noise_level.
            let base = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64);
            CsiSample {
                values: render_sample(spec, &signatures[class], base, base ^ 0x5bf0_3635),
                label: class,
            }
        })
        .collect();

    Ok(CsiDataset {
        classes: spec.classes,
        shape: spec.sample_shape(),
        samples,
    })
}

impl CsiDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stack samples at the given indices into a `[B, A, S, T]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [a, s, t] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * a * s * t);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Index {
                    op: "batch",
                    index: i,
                    extent: self.samples.len(),
                })?;
            data.extend_from_slice(sample.values.data());
            labels.push(sample.label);
        }
        Ok((Tensor::new(vec![indices.len(), a, s, t], data)?, labels))
    }

    /// Stratified split: `floor(ratio * n_k)` of each class to train, the
    /// rest to test, shuffled within class by the seed.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(CsiDataset, CsiDataset)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("split ratio {ratio} outside [0,1]")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.classes {
                return Err(Error::Index {
                    op: "split",
                    index: s.label,
                    extent: self.classes,
                });
            }
            by_class[s.label].push(i);
        }
        for (k, members) in by_class.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::Config(format!(
                    "class {k} has {} samples; need at least 2 to split",
                    members.len()
                )));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for members in &mut by_class {
            // Fisher-Yates with the shared seed.
            for i in (1..members.len()).rev() {
                let j = rng.gen_range(0..=i);
                members.swap(i, j);
            }
            let cut = ((ratio * members.len() as f64).floor() as usize).min(members.len());
            train.extend_from_slice(&members[..cut]);
            test.extend_from_slice(&members[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();

        let subset = |indices: &[usize]| CsiDataset {
            classes: self.classes,
            shape: self.shape,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        };
        Ok((subset(&train), subset(&test)))
    }

    // ── File format ─────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let [a, s, t] = self.shape;
        let mut buf = Vec::with_capacity(32 + self.samples.len() * (2 + a * s * t * 4));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [
            self.classes as u32,
            a as u32,
            s as u32,
            t as u32,
            self.samples.len() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for sample in &self.samples {
            buf.extend_from_slice(&(sample.label as u16).to_le_bytes());
        }
        for sample in &self.samples {
            for &v in sample.values.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CsiDataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let need = |pos: usize, n: usize, what: &str| -> Result<()> {
            if pos + n > bytes.len() {
                Err(Error::format(
                    pos as u64,
                    format!("truncated while reading {what}"),
                ))
            } else {
                Ok(())
            }
        };

        need(0, 4, "magic")?;
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let mut pos = 4;
        let read_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
            need(*pos, 4, what)?;
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            Ok(v)
        };
        let version = read_u32(&mut pos, "version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let classes = read_u32(&mut pos, "class count")? as usize;
        let a = read_u32(&mut pos, "antenna extent")? as usize;
        let s = read_u32(&mut pos, "subcarrier extent")? as usize;
        let t = read_u32(&mut pos, "timestep extent")? as usize;
        let n = read_u32(&mut pos, "sample count")? as usize;

        need(pos, n * 2, "labels")?;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label =
                u16::from_le_bytes(bytes[pos + 2 * i..pos + 2 * i + 2].try_into().unwrap())
                    as usize;
            if label >= classes {
                return Err(Error::format(
                    (pos + 2 * i) as u64,
                    format!("label {label} outside 0..{classes}"),
                ));
            }
            labels.push(label);
        }
        pos += n * 2;

        let per_sample = a * s * t;
        need(pos, n * per_sample * 4, "sample values")?;
        let mut samples = Vec::with_capacity(n);
        for label in labels {
            let mut data = Vec::with_capacity(per_sample);
            for _ in 0..per_sample {
                let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::format(pos as u64, "non-finite sample value"));
                }
                data.push(v as f64);
                pos += 4;
            }
            samples.push(CsiSample {
                values: Tensor::new(vec![a, s, t], data)
                    .map_err(|e| Error::format(pos as u64, e.to_string()))?,
                label,
            });
        }
        if pos != bytes.len() {
            return Err(Error::format(
                pos as u64,
                format!("{} trailing bytes", bytes.len() - pos),
            ));
        }
        Ok(CsiDataset {
            classes,
            shape: [a, s, t],
            samples,
        })
    }

    /// CSV manifest of `(index, label)` pairs.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,label\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", s.label));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_samples() {
        let spec = DatasetSpec::tiny().with_noise(0.0);
        let sigs = class_signatures(&spec);
        let a = render_sample(&spec, &sigs[0], 42, 1);
        let b = render_sample(&spec, &sigs[0], 42, 2);
        // Noise level zero: only the jitter seed matters.
        assert_eq!(a, b);
        let c = render_sample(&spec, &sigs[0], 43, 1);
        assert_ne!(a, c);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::tiny();
        let a = generate_dataset(&spec, 5).unwrap();
        let b = generate_dataset(&spec, 5).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.values, y.values);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn values_are_non_negative() {
        let ds = generate_dataset(&DatasetSpec::tiny().with_noise(0.5), 1).unwrap();
        for s in &ds.samples {
            assert!(s.values.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn har6_shape_and_counts() {
        let spec = DatasetSpec::har6();
        assert_eq!(spec.sample_shape(), [3, 114, 500]);
        assert_eq!(spec.classes * spec.per_class, 2400);
        let hid = DatasetSpec::hid12();
        assert_eq!(hid.classes * hid.per_class, 720);
    }

    #[test]
    fn split_is_stratified_disjoint_exhaustive() {
        let spec = DatasetSpec {
            classes: 3,
            per_class: 10,
            ..DatasetSpec::tiny()
        };
        let ds = generate_dataset(&spec, 2).unwrap();
        let (train, test) = ds.split(0.8, 7).unwrap();
        assert_eq!(train.len(), 24);
        assert_eq!(test.len(), 6);
        for k in 0..3 {
            assert_eq!(train.samples.iter().filter(|s| s.label == k).count(), 8);
            assert_eq!(test.samples.iter().filter(|s| s.label == k).count(), 2);
        }
        // Disjoint and exhaustive on values.
        let key = |s: &CsiSample| s.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut all: Vec<_> = train.samples.iter().map(key).collect();
        all.extend(test.samples.iter().map(key));
        all.sort();
        let mut orig: Vec<_> = ds.samples.iter().map(key).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_ratios_match_preset_counts() {
        // 400 -> 320/80 and 60 -> 48/12 per class under the floor rule.
        assert_eq!((0.8f64 * 400.0).floor() as usize, 320);
        assert_eq!((0.8f64 * 60.0).floor() as usize, 48);
    }

    #[test]
    fn split_rejects_undersized_classes() {
        let spec = DatasetSpec {
            classes: 2,
            per_class: 1,
            ..DatasetSpec::tiny()
        };
        let ds = generate_dataset(&spec, 0).unwrap();
        assert!(ds.split(0.8, 0).is_err());
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rsds");
        let ds = generate_dataset(&DatasetSpec::tiny(), 3).unwrap();
        ds.save(&path).unwrap();
        let loaded = CsiDataset::load(&path).unwrap();
        assert_eq!(loaded.classes, ds.classes);
        assert_eq!(loaded.shape, ds.shape);
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.values, b.values);
        }
        let path2 = dir.path().join("data2.rsds");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rsds");
        let ds = generate_dataset(&DatasetSpec::tiny(), 3).unwrap();
        ds.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.rsds");
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            CsiDataset::load(&bad).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn header_encodes_extents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rsds");
        let spec = DatasetSpec {
            classes: 6,
            per_class: 2,
            antennas: 3,
            subcarriers: 114,
            timesteps: 500,
            noise_level: 0.1,
            signature_seed: 0,
        };
        generate_dataset(&spec, 0).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        assert_eq!(&bytes[0..4], b"RSDS");
        assert_eq!(u32_at(4), 1);
        assert_eq!(u32_at(8), 6);
        assert_eq!(u32_at(12), 3);
        assert_eq!(u32_at(16), 114);
        assert_eq!(u32_at(20), 500);
        assert_eq!(u32_at(24), 12);
    }

    #[test]
    fn manifest_lists_every_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let ds = generate_dataset(&DatasetSpec::tiny(), 0).unwrap();
        ds.write_manifest(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), ds.len() + 1);
        assert!(text.starts_with("index,label\n"));
    }
}
