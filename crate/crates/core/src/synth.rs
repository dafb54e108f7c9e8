//! Seeded synthetic multilingual face-voice feature generator.
//!
//! Each identity gets one Gaussian prototype in a low-dimensional latent
//! space; face and voice samples are fixed full-rank linear images of the
//! prototype plus isotropic noise. The spoken language adds a constant
//! offset to voice features only, so models trained on one language
//! degrade on the other the way multilingual verification tables do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{FeatureStore, Modality, SampleRecord};

/// Scales applied to the orthonormal-column mixing maps. The face map
/// keeps the identity signal well above the noise; the voice map is
/// smaller so a unit language offset is a substantial fraction of the
/// voice signal and actually costs accuracy on an unheard language.
const FACE_MAP_SCALE: f64 = 1.0;
const VOICE_MAP_SCALE: f64 = 0.15;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_num_identities")]
    pub num_identities: usize,
    #[serde(default = "default_prototype_dim")]
    pub prototype_dim: usize,
    #[serde(default = "default_face_dim")]
    pub face_dim: usize,
    #[serde(default = "default_voice_dim")]
    pub voice_dim: usize,
    #[serde(default = "default_languages")]
    pub languages: Vec<String>,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_language_shift")]
    pub language_shift: f64,
    #[serde(default = "default_samples")]
    pub samples_per_identity_per_language: usize,
    /// Fraction of voice samples whose language offset is swapped for
    /// another language's while keeping the original tag, emulating
    /// cross-language contamination in the pairs. 0 disables it.
    #[serde(default)]
    pub language_mix: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_num_identities() -> usize {
    250
}
fn default_prototype_dim() -> usize {
    32
}
fn default_face_dim() -> usize {
    128
}
fn default_voice_dim() -> usize {
    64
}
fn default_languages() -> Vec<String> {
    vec!["L1".to_string(), "L2".to_string()]
}
fn default_noise_sigma() -> f64 {
    0.1
}
fn default_language_shift() -> f64 {
    1.0
}
fn default_samples() -> usize {
    6
}
fn default_seed() -> u64 {
    42
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: default_num_identities(),
            prototype_dim: default_prototype_dim(),
            face_dim: default_face_dim(),
            voice_dim: default_voice_dim(),
            languages: default_languages(),
            noise_sigma: default_noise_sigma(),
            language_shift: default_language_shift(),
            samples_per_identity_per_language: default_samples(),
            language_mix: 0.0,
            seed: default_seed(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 4 {
            return Err(Error::InvalidArgument(format!(
                "num_identities must be at least 4, got {}",
                self.num_identities
            )));
        }
        if self.prototype_dim == 0 {
            return Err(Error::InvalidArgument("prototype_dim must be positive".into()));
        }
        if self.face_dim < self.prototype_dim || self.voice_dim < self.prototype_dim {
            return Err(Error::InvalidArgument(format!(
                "face_dim ({}) and voice_dim ({}) must be at least prototype_dim ({})",
                self.face_dim, self.voice_dim, self.prototype_dim
            )));
        }
        if self.languages.is_empty() {
            return Err(Error::InvalidArgument("at least one language required".into()));
        }
        if self.noise_sigma <= 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if self.language_shift < 0.0 || !self.language_shift.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "language_shift must be nonnegative, got {}",
                self.language_shift
            )));
        }
        if self.samples_per_identity_per_language == 0 {
            return Err(Error::InvalidArgument(
                "samples_per_identity_per_language must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.language_mix) {
            return Err(Error::InvalidArgument(format!(
                "language_mix must lie in [0, 1], got {}",
                self.language_mix
            )));
        }
        Ok(())
    }

    /// Identity names in generation order: `id0000`, `id0001`, ...
    pub fn identity_names(&self) -> Vec<String> {
        (0..self.num_identities).map(|i| format!("id{i:04}")).collect()
    }
}

/// Deterministic per seed: same spec, byte-identical store.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.prototype_dim;

    let face_map = orthonormal_columns(&mut rng, spec.face_dim, k, FACE_MAP_SCALE);
    let voice_map = orthonormal_columns(&mut rng, spec.voice_dim, k, VOICE_MAP_SCALE);

    // One unit offset direction per language, drawn inside the voice
    // signal subspace so the shift competes with identity information.
    let offsets: Vec<Vec<f64>> = (0..spec.languages.len())
        .map(|_| {
            let coeffs = gaussian_vec(&mut rng, k);
            let mut dir = map_apply(&voice_map, &coeffs, spec.voice_dim, k);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            dir
        })
        .collect();

    let mut records = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let push_sample =
        |records: &mut Vec<SampleRecord>, blob: &mut Vec<f32>, rec_id: String, identity: String, language: String, modality: Modality, values: Vec<f64>| {
            let offset = blob.len();
            blob.extend(values.iter().map(|&v| v as f32));
            records.push(SampleRecord {
                sample_id: rec_id,
                identity,
                language,
                modality,
                dim: values.len(),
                offset,
            });
        };

    for identity in spec.identity_names() {
        let prototype = gaussian_vec(&mut rng, k);
        let face_signal = map_apply(&face_map, &prototype, spec.face_dim, k);
        let voice_signal = map_apply(&voice_map, &prototype, spec.voice_dim, k);

        for (lang_idx, language) in spec.languages.iter().enumerate() {
            for s in 0..spec.samples_per_identity_per_language {
                let mut face = face_signal.clone();
                for v in face.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.noise_sigma * n;
                }
                push_sample(
                    &mut records,
                    &mut blob,
                    format!("{identity}_{language}_face_{s}"),
                    identity.clone(),
                    language.clone(),
                    Modality::Face,
                    face,
                );

                // Possibly contaminate: voice carries another language's
                // offset while keeping this language's tag.
                let mut offset_lang = lang_idx;
                if spec.language_mix > 0.0 && spec.languages.len() > 1 {
                    let roll: f64 = rng.random();
                    if roll < spec.language_mix {
                        let other = rng.random_range(0..spec.languages.len() - 1);
                        offset_lang = if other >= lang_idx { other + 1 } else { other };
                    }
                }
                let mut voice = voice_signal.clone();
                for (v, u) in voice.iter_mut().zip(&offsets[offset_lang]) {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.language_shift * u + spec.noise_sigma * n;
                }
                push_sample(
                    &mut records,
                    &mut blob,
                    format!("{identity}_{language}_voice_{s}"),
                    identity.clone(),
                    language.clone(),
                    Modality::Voice,
                    voice,
                );
            }
        }
    }
    FeatureStore::new(records, blob)
}

/// How the default benchmark partitions identities: 20% held out for test,
/// then 10% of the remaining train pool held out for validation.
#[derive(Debug, Clone)]
pub struct IdentitySplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_identities(identities: &[String], seed: u64) -> Result<IdentitySplit> {
    if identities.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 identities to split, got {}",
            identities.len()
        )));
    }
    let mut shuffled = identities.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad5e_17b3);
    // Fisher-Yates, deterministic per seed.
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let n = shuffled.len();
    let n_test = ((n as f64) * 0.2).ceil() as usize;
    let pool = n - n_test;
    let n_val = ((pool as f64) * 0.1).ceil() as usize;
    if pool - n_val < 2 || n_val < 2 || n_test < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} identities split into {}/{n_val}/{n_test} leaves a degenerate split",
            pool - n_val
        )));
    }
    let test = shuffled.split_off(pool);
    let validation = shuffled.split_off(pool - n_val);
    Ok(IdentitySplit {
        train: shuffled,
        validation,
        test,
    })
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random matrix with orthonormalized columns (Gram-Schmidt over Gaussian
/// draws), uniformly rescaled. Full rank by construction.
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    assert!(rows >= cols);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for _ in 0..cols {
        let mut col = gaussian_vec(rng, rows);
        for prev in &columns {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.iter_mut().for_each(|v| *v /= norm);
        columns.push(col);
    }
    for col in &mut columns {
        col.iter_mut().for_each(|v| *v *= scale);
    }
    // Row-major [rows x cols].
    let mut out = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for i in 0..rows {
            out[i * cols + j] = col[i];
        }
    }
    out
}

fn map_apply(map: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let row = &map[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}
