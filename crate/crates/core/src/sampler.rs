//! Identity-balanced batch sampling and verification-trial construction.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Trial, TrialLabel};
use crate::scalar::Scalar;
use crate::store::{FeatureStore, Modality};
use crate::tensor::Tensor;

/// P identities x K paired samples per batch, so every batch feeds the
/// pairwise loss both same-identity and cross-identity pairs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairSampler {
    #[serde(default = "default_p")]
    pub identities_per_batch: usize,
    #[serde(default = "default_k")]
    pub samples_per_identity: usize,
}

fn default_p() -> usize {
    16
}

fn default_k() -> usize {
    4
}

impl Default for PairSampler {
    fn default() -> Self {
        PairSampler {
            identities_per_batch: 16,
            samples_per_identity: 4,
        }
    }
}

impl PairSampler {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.samples_per_identity
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.identities_per_batch < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 identities per batch".into(),
            ));
        }
        if self.samples_per_identity < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 samples per identity so same-identity pairs exist".into(),
            ));
        }
        if self.batch_size() != batch_size {
            return Err(Error::InvalidArgument(format!(
                "{} identities x {} samples != batch size {batch_size}",
                self.identities_per_batch, self.samples_per_identity
            )));
        }
        Ok(())
    }
}

/// A store restricted to one language, indexed by identity, with stable
/// class labels (position in the sorted identity list).
#[derive(Debug, Clone)]
pub struct LanguageView {
    language: String,
    /// identity -> (face sample ids, voice sample ids), sorted for
    /// determinism.
    samples: BTreeMap<String, (Vec<String>, Vec<String>)>,
    labels: BTreeMap<String, usize>,
    face_dim: usize,
    voice_dim: usize,
}

impl LanguageView {
    pub fn build(store: &FeatureStore, language: &str) -> Result<Self> {
        let mut samples: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
        let mut face_dim = 0;
        let mut voice_dim = 0;
        for rec in store.records() {
            if rec.language != language {
                continue;
            }
            let entry = samples.entry(rec.identity.clone()).or_default();
            match rec.modality {
                Modality::Face => {
                    if face_dim != 0 && rec.dim != face_dim {
                        return Err(Error::InvalidArgument(format!(
                            "face sample `{}` has dim {}, earlier samples have {face_dim}",
                            rec.sample_id, rec.dim
                        )));
                    }
                    face_dim = rec.dim;
                    entry.0.push(rec.sample_id.clone());
                }
                Modality::Voice => {
                    if voice_dim != 0 && rec.dim != voice_dim {
                        return Err(Error::InvalidArgument(format!(
                            "voice sample `{}` has dim {}, earlier samples have {voice_dim}",
                            rec.sample_id, rec.dim
                        )));
                    }
                    voice_dim = rec.dim;
                    entry.1.push(rec.sample_id.clone());
                }
            }
        }
        samples.retain(|_, (faces, voices)| !faces.is_empty() && !voices.is_empty());
        if samples.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no identity has both modalities in language `{language}`"
            )));
        }
        for (faces, voices) in samples.values_mut() {
            faces.sort();
            voices.sort();
        }
        let labels = samples
            .keys()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(LanguageView {
            language: language.to_string(),
            samples,
            labels,
            face_dim,
            voice_dim,
        })
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn num_identities(&self) -> usize {
        self.samples.len()
    }

    pub fn identities(&self) -> Vec<&str> {
        self.samples.keys().map(|s| s.as_str()).collect()
    }

    pub fn label_of(&self, identity: &str) -> Option<usize> {
        self.labels.get(identity).copied()
    }

    pub fn face_dim(&self) -> usize {
        self.face_dim
    }

    pub fn voice_dim(&self) -> usize {
        self.voice_dim
    }

    fn eligible(&self, k: usize) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|(_, (f, v))| f.len() >= k && v.len() >= k)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// One training batch: paired face/voice features, row i of both sides
/// belonging to the same identity, plus the identity labels.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub face: Tensor<S>,
    pub voice: Tensor<S>,
    pub labels: Vec<usize>,
}

impl PairSampler {
    /// Uniformly picks P eligible identities without replacement and K
    /// paired samples for each.
    pub fn sample_batch<S: Scalar>(
        &self,
        store: &FeatureStore,
        view: &LanguageView,
        rng: &mut ChaCha8Rng,
    ) -> Result<Batch<S>> {
        let eligible = view.eligible(self.samples_per_identity);
        if eligible.len() < self.identities_per_batch {
            return Err(Error::InsufficientData(format!(
                "{} identities with >= {} samples per modality in `{}`, need {}",
                eligible.len(),
                self.samples_per_identity,
                view.language(),
                self.identities_per_batch
            )));
        }
        let chosen = sample_without_replacement(rng, eligible.len(), self.identities_per_batch);
        let picked: Vec<&str> = chosen.into_iter().map(|i| eligible[i]).collect();
        self.assemble(store, view, &picked, rng)
    }

    /// Batches covering each eligible identity exactly once per epoch, in
    /// shuffled groups of P; a trailing partial group is dropped.
    pub fn epoch_batches<S: Scalar>(
        &self,
        store: &FeatureStore,
        view: &LanguageView,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Batch<S>>> {
        let mut eligible = view.eligible(self.samples_per_identity);
        if eligible.len() < self.identities_per_batch {
            return Err(Error::InsufficientData(format!(
                "{} identities with >= {} samples per modality in `{}`, need {}",
                eligible.len(),
                self.samples_per_identity,
                view.language(),
                self.identities_per_batch
            )));
        }
        shuffle(rng, &mut eligible);
        eligible
            .chunks_exact(self.identities_per_batch)
            .map(|group| self.assemble(store, view, group, rng))
            .collect()
    }

    fn assemble<S: Scalar>(
        &self,
        store: &FeatureStore,
        view: &LanguageView,
        identities: &[&str],
        rng: &mut ChaCha8Rng,
    ) -> Result<Batch<S>> {
        let b = identities.len() * self.samples_per_identity;
        let mut face_data = Vec::with_capacity(b * view.face_dim());
        let mut voice_data = Vec::with_capacity(b * view.voice_dim());
        let mut labels = Vec::with_capacity(b);
        for identity in identities {
            let (faces, voices) = &view.samples[*identity];
            let face_pick = sample_without_replacement(rng, faces.len(), self.samples_per_identity);
            let voice_pick =
                sample_without_replacement(rng, voices.len(), self.samples_per_identity);
            let label = view.label_of(identity).expect("identity from this view");
            for (fi, vi) in face_pick.into_iter().zip(voice_pick) {
                face_data.extend(store.feature_as::<S>(&faces[fi])?);
                voice_data.extend(store.feature_as::<S>(&voices[vi])?);
                labels.push(label);
            }
        }
        Ok(Batch {
            face: Tensor::from_vec(vec![b, view.face_dim()], face_data)?,
            voice: Tensor::from_vec(vec![b, view.voice_dim()], voice_data)?,
            labels,
        })
    }
}

/// n_same same-identity and n_diff cross-identity face/voice trials over
/// one language view, without repeating a (face, voice) pair while
/// unseen pairs remain.
pub fn build_trials<S: Scalar>(
    view: &LanguageView,
    n_same: usize,
    n_diff: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trial<S>>> {
    if view.num_identities() < 2 {
        return Err(Error::InsufficientData(format!(
            "trial construction needs >= 2 identities in `{}`",
            view.language()
        )));
    }
    let identities: Vec<&str> = view.identities();
    let mut used: HashSet<(String, String)> = HashSet::new();
    let mut trials = Vec::with_capacity(n_same + n_diff);

    let pick_pair = |rng: &mut ChaCha8Rng, label: TrialLabel| -> (String, String) {
        let fi = rng.random_range(0..identities.len());
        let face_ident = identities[fi];
        let voice_ident = match label {
            TrialLabel::Same => face_ident,
            TrialLabel::Different => {
                // Index into the list with the face identity removed, so no
                // rejection loop is needed.
                let vi = rng.random_range(0..identities.len() - 1);
                identities[if vi >= fi { vi + 1 } else { vi }]
            }
        };
        let (faces, _) = &view.samples[face_ident];
        let (_, voices) = &view.samples[voice_ident];
        let face = faces[rng.random_range(0..faces.len())].clone();
        let voice = voices[rng.random_range(0..voices.len())].clone();
        (face, voice)
    };

    let draw = |rng: &mut ChaCha8Rng,
                    used: &mut HashSet<(String, String)>,
                    label: TrialLabel|
     -> Trial<S> {
        // Prefer unseen pairs; after bounded retries treat the pool as
        // exhausted and accept a repeat.
        for _ in 0..64 {
            let (face, voice) = pick_pair(rng, label);
            let key = (face.clone(), voice.clone());
            if !used.contains(&key) {
                used.insert(key);
                return Trial::new(face, voice, label);
            }
        }
        let (face, voice) = pick_pair(rng, label);
        Trial::new(face, voice, label)
    };

    for _ in 0..n_same {
        let t = draw(rng, &mut used, TrialLabel::Same);
        trials.push(t);
    }
    for _ in 0..n_diff {
        let t = draw(rng, &mut used, TrialLabel::Different);
        trials.push(t);
    }
    Ok(trials)
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// First `k` indices of a shuffled 0..n, i.e. uniform without replacement.
fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(k);
    indices
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};
    use rand::SeedableRng;

    fn test_store() -> FeatureStore {
        generate_synthetic(&SyntheticSpec {
            num_identities: 12,
            prototype_dim: 3,
            face_dim: 5,
            voice_dim: 4,
            samples_per_identity_per_language: 4,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn single_sample_per_identity_batch_works() {
        // P=2, K=1: two rows, two distinct labels; the pairwise loss
        // would simply drop its empty same-pair term.
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 2,
            samples_per_identity: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Batch<f64> = sampler.sample_batch(&store, &view, &mut rng).unwrap();
        assert_eq!(batch.labels.len(), 2);
        assert_ne!(batch.labels[0], batch.labels[1]);
    }

    #[test]
    fn minimal_batch_has_distinct_labels() {
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 2,
            samples_per_identity: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Batch<f64> = sampler.sample_batch(&store, &view, &mut rng).unwrap();
        assert_eq!(batch.labels.len(), 4);
        let distinct: HashSet<usize> = batch.labels.iter().copied().collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(batch.face.shape(), &[4, 5]);
        assert_eq!(batch.voice.shape(), &[4, 4]);
    }

    #[test]
    fn batch_rows_pair_same_identity() {
        // Row i of face and voice must reference the same identity: verify
        // via labels being grouped in K-blocks per identity.
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 3,
            samples_per_identity: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch: Batch<f64> = sampler.sample_batch(&store, &view, &mut rng).unwrap();
        for block in batch.labels.chunks(2) {
            assert_eq!(block[0], block[1]);
        }
    }

    #[test]
    fn epoch_covers_each_identity_k_times() {
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 5,
            samples_per_identity: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches: Vec<Batch<f64>> = sampler.epoch_batches(&store, &view, &mut rng).unwrap();
        // 12 identities in groups of 5: two batches, 2 identities dropped.
        assert_eq!(batches.len(), 2);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for batch in &batches {
            for &l in &batch.labels {
                *counts.entry(l).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), 10);
        assert!(counts.values().all(|&c| c == 3));
    }

    #[test]
    fn insufficient_identities_is_an_error() {
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 13,
            samples_per_identity: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sampler
            .sample_batch::<f64>(&store, &view, &mut rng)
            .is_err());

        let sampler = PairSampler {
            identities_per_batch: 2,
            samples_per_identity: 5,
        };
        assert!(sampler
            .sample_batch::<f64>(&store, &view, &mut rng)
            .is_err());
    }

    #[test]
    fn identity_frequency_is_uniform_over_many_batches() {
        // Multinomial check: over 10k batches of P identities from N,
        // each identity's count stays within 3 sigma of the expectation.
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 4,
            samples_per_identity: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; view.num_identities()];
        let draws = 10_000;
        for _ in 0..draws {
            let batch: Batch<f64> = sampler.sample_batch(&store, &view, &mut rng).unwrap();
            let mut seen = HashSet::new();
            for &l in &batch.labels {
                seen.insert(l);
            }
            for l in seen {
                counts[l] += 1;
            }
        }
        let n = view.num_identities() as f64;
        let p = sampler.identities_per_batch as f64 / n;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (l, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "identity {l}: count {c}, expected {mean:.1} +/- {:.1}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let store = test_store();
        let view = LanguageView::build(&store, "L2").unwrap();
        let sampler = PairSampler {
            identities_per_batch: 4,
            samples_per_identity: 2,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let b: Batch<f64> = sampler.sample_batch(&store, &view, &mut rng).unwrap();
            (b.face.data().to_vec(), b.labels)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trials_have_correct_labels_by_construction() {
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials: Vec<Trial<f64>> = build_trials(&view, 20, 20, &mut rng).unwrap();
        assert_eq!(trials.len(), 40);
        for t in &trials {
            let f = store.record(&t.face_sample_id).unwrap();
            let v = store.record(&t.voice_sample_id).unwrap();
            assert_eq!(f.modality, Modality::Face);
            assert_eq!(v.modality, Modality::Voice);
            match t.label {
                TrialLabel::Same => assert_eq!(f.identity, v.identity),
                TrialLabel::Different => assert_ne!(f.identity, v.identity),
            }
        }
    }

    #[test]
    fn zero_same_trials_requested_yields_only_different() {
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials: Vec<Trial<f64>> = build_trials(&view, 0, 10, &mut rng).unwrap();
        assert!(trials.iter().all(|t| t.label == TrialLabel::Different));
    }

    #[test]
    fn trials_are_deterministic_per_seed() {
        let store = test_store();
        let view = LanguageView::build(&store, "L2").unwrap();
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            build_trials::<f64>(&view, 50, 50, &mut rng)
                .unwrap()
                .iter()
                .map(|t| (t.face_sample_id.clone(), t.voice_sample_id.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn trials_avoid_repeats_until_pool_exhausts() {
        let store = test_store();
        let view = LanguageView::build(&store, "L1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 12 identities x 4 faces x 4 voices = 192 same pairs; request few
        // enough that all must be distinct.
        let trials: Vec<Trial<f64>> = build_trials(&view, 100, 0, &mut rng).unwrap();
        let mut seen = HashSet::new();
        for t in &trials {
            assert!(seen.insert((t.face_sample_id.clone(), t.voice_sample_id.clone())));
        }
    }
}
