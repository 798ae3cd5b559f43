//! Speaker comparison by framewise cross-attention.
//!
//! Per-frame speaker embeddings of the candidate audio act as queries over
//! the embeddings of the candidate's reference speech segments. The attended
//! output is projected to the SCAN feature space, and a one-layer head turns
//! each feature row into an auxiliary speaking probability.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::facelib::{IdentitySpeechLibrary, SegmentRef};
use crate::numerics::{scaled_dot_attention, Dense, ParamStore, Tape, Tensor, Var};
use crate::spkembed::{SpeakerEmbedder, WindowedAudio};
use crate::synthcorpus::Corpus;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    /// Width of F_S.
    pub feature_dim: usize,
    /// Reference segments drawn per forward pass.
    pub max_refs: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            max_refs: 4,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.max_refs == 0 {
            return Err(Error::config("scan feature_dim and max_refs must be ≥ 1"));
        }
        Ok(())
    }
}

/// Projection and auxiliary head. Parameters live in the owning model's
/// store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanModule {
    pub proj: Dense,
    pub head: Dense,
}

/// Tape handles of one SCAN pass.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    /// T × d_φ attention output.
    pub raw: Var,
    /// T × K attention weights.
    pub weights: Var,
    /// T × feature_dim.
    pub features: Var,
    /// T × 1 auxiliary probabilities.
    pub aux: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    pub features: Tensor,
    pub attention: Tensor,
    pub aux_scores: Vec<f64>,
}

impl ScanModule {
    pub fn new(store: &mut ParamStore, name: &str, embed_dim: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Dense::new(store, &format!("{name}.proj"), embed_dim, feature_dim, rng),
            head: Dense::new(store, &format!("{name}.head"), feature_dim, 1, rng),
        }
    }

    pub fn feature_dim(&self, store: &ParamStore) -> usize {
        self.proj.out_dim(store)
    }

    /// `queries` is T × d_φ, `refs` is K × d_φ.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, refs: Var) -> Result<ScanVars> {
        let (raw, weights) = scaled_dot_attention(tape, queries, refs, refs)?;
        let h = self.proj.forward(tape, store, raw)?;
        let features = tape.relu(h)?;
        let logits = self.head.forward(tape, store, features)?;
        let aux = tape.sigmoid(logits)?;
        Ok(ScanVars {
            raw,
            weights,
            features,
            aux,
        })
    }

    /// Forward on precomputed embeddings, off the training tape.
    pub fn apply(&self, store: &ParamStore, queries: &Tensor, refs: &Tensor) -> Result<ScanOutput> {
        let mut tape = Tape::new();
        let q = tape.constant(queries.clone());
        let k = tape.constant(refs.clone());
        let v = self.forward(&mut tape, store, q, k)?;
        Ok(ScanOutput {
            features: tape.value(v.features).clone(),
            attention: tape.value(v.weights).clone(),
            aux_scores: tape.value(v.aux).data().to_vec(),
        })
    }
}

/// Reference speech waveforms with their absolute start samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSpeech {
    pub segments: Vec<ReferenceSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSegment {
    pub source: SegmentRef,
    pub start_sample: i64,
    pub samples: Vec<f64>,
}

impl ReferenceSpeech {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Cuts the referenced spans out of the corpus audio.
    pub fn from_corpus(corpus: &Corpus, refs: &[SegmentRef]) -> Result<Self> {
        let segments = refs
            .iter()
            .map(|r| {
                let scenario = corpus
                    .scenario(r.scenario)
                    .ok_or_else(|| Error::contract(format!("segment names unknown scenario {}", r.scenario)))?;
                let sr = f64::from(scenario.audio.sample_rate);
                let n = scenario.audio.samples.len();
                let a = ((r.start * sr).round() as usize).min(n);
                let b = ((r.end * sr).round() as usize).clamp(a, n);
                Ok(ReferenceSegment {
                    source: *r,
                    start_sample: a as i64,
                    samples: scenario.audio.samples[a..b].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { segments })
    }

    /// K × d_φ embedding matrix, one row per segment.
    pub fn embed(&self, embedder: &SpeakerEmbedder) -> Result<Tensor> {
        if self.segments.is_empty() {
            return Err(Error::EmptyReference);
        }
        let rows = self
            .segments
            .iter()
            .map(|s| embedder.embed_at(&s.samples, s.start_sample))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Full SCAN pass from windowed candidate audio and reference speech.
pub fn scan_forward(
    module: &ScanModule,
    store: &ParamStore,
    embedder: &SpeakerEmbedder,
    windowed: &WindowedAudio,
    reference: &ReferenceSpeech,
) -> Result<ScanOutput> {
    if !embedder.is_frozen() {
        return Err(Error::contract("scan_forward needs a frozen embedder"));
    }
    let refs = reference.embed(embedder)?;
    let queries = embedder.embed_windows(windowed)?;
    module.apply(store, &queries, &refs)
}

/// Mean binary cross-entropy of auxiliary probabilities against frame labels.
pub fn scan_aux_loss(tape: &mut Tape, aux: Var, labels: &[bool]) -> Result<Var> {
    if tape.value(aux).len() != labels.len() {
        return Err(Error::shape("scan_aux_loss", tape.shape(aux), &[labels.len()]));
    }
    let target = Tensor::matrix(labels.len(), 1, labels.iter().map(|&l| f64::from(u8::from(l))).collect())?;
    tape.bce(aux, target)
}

/// Uniform draw of `min(k, available)` distinct segments of an identity.
pub fn sample_reference(
    library: &IdentitySpeechLibrary,
    identity: u32,
    rng: &mut impl Rng,
    k: usize,
) -> Result<Vec<SegmentRef>> {
    let entry = library.entry(identity).ok_or(Error::UnknownIdentity(identity))?;
    let n = entry.segments.len();
    let mut picks = sample(rng, n, k.min(n)).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| entry.segments[i]).collect())
}

/// Mean Shannon entropy (nats) of the rows of an attention matrix.
pub fn attention_entropy(weights: &Tensor) -> f64 {
    let rows = weights.rows().max(1);
    (0..weights.rows())
        .map(|r| {
            weights
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facelib::LibraryEntry;
    use crate::numerics::finite_diff_check;
    use crate::rng::{normal, rng_from};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
    }

    fn oracle(q: &Tensor, kv: &Tensor) -> Tensor {
        let d = q.cols() as f64;
        let mut out = vec![0.0; q.rows() * kv.cols()];
        for t in 0..q.rows() {
            let logits: Vec<f64> = (0..kv.rows())
                .map(|k| (0..q.cols()).map(|j| q.get(t, j) * kv.get(k, j)).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (k, ek) in e.iter().enumerate() {
                for j in 0..kv.cols() {
                    out[t * kv.cols() + j] += ek / z * kv.get(k, j);
                }
            }
        }
        Tensor::matrix(q.rows(), kv.cols(), out).unwrap()
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = rng_from(3);
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut store, "scan", 6, 8, &mut rng);
        for _ in 0..50 {
            let t = rng.random_range(1..=5);
            let k = rng.random_range(1..=4);
            let q = random(t, 6, &mut rng);
            let kv = random(k, 6, &mut rng);
            let mut tape = Tape::new();
            let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
            let v = m.forward(&mut tape, &store, qv, kvv).unwrap();
            let want = oracle(&q, &kv);
            for (a, b) in tape.value(v.raw).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_reference_is_copied() {
        let mut rng = rng_from(4);
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut store, "scan", 5, 4, &mut rng);
        let q = random(7, 5, &mut rng);
        let kv = random(1, 5, &mut rng);
        let out = m.apply(&store, &q, &kv).unwrap();
        for t in 0..7 {
            assert_eq!(out.attention.row(t), &[1.0]);
            assert_eq!(out.features.row(t), out.features.row(0));
        }
    }

    #[test]
    fn reference_permutation_leaves_features_unchanged() {
        let mut rng = rng_from(5);
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut store, "scan", 4, 4, &mut rng);
        let q = random(5, 4, &mut rng);
        let kv = random(3, 4, &mut rng);
        let perm = kv.select_rows(&[2, 0, 1]);
        let a = m.apply(&store, &q, &kv).unwrap();
        let b = m.apply(&store, &q, &perm).unwrap();
        for t in 0..5 {
            assert!((a.attention.get(t, 2) - b.attention.get(t, 0)).abs() < 1e-15);
            for (x, y) in a.features.row(t).iter().zip(b.features.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_head_gives_half() {
        let mut rng = rng_from(6);
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut store, "scan", 4, 4, &mut rng);
        *store.get_mut(m.proj.w) = Tensor::zeros(&[4, 4]);
        *store.get_mut(m.proj.b) = Tensor::zeros(&[1, 4]);
        let out = m.apply(&store, &random(3, 4, &mut rng), &random(2, 4, &mut rng)).unwrap();
        assert!(out.aux_scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn empty_reference_is_an_error() {
        let mut rng = rng_from(7);
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut store, "scan", 4, 4, &mut rng);
        let err = m.apply(&store, &random(3, 4, &mut rng), &Tensor::zeros(&[0, 4]));
        assert!(matches!(err, Err(Error::EmptyReference)));
    }

    #[test]
    fn aux_loss_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::filled(&[4, 1], 0.5));
        let l = scan_aux_loss(&mut tape, p, &[true, false, true, false]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let l = scan_aux_loss(&mut tape, p, &[true, false]).unwrap();
        assert!(tape.value(l).item() <= 1e-6 + 1e-7);

        let mut rng = rng_from(8);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..1000).map(|_| rng.random::<bool>()).collect();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1000, 1, scores).unwrap());
        let l = scan_aux_loss(&mut tape, p, &labels).unwrap();
        assert!(tape.value(l).item() > std::f64::consts::LN_2 - 0.1);

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::filled(&[3, 1], 0.5));
        assert!(scan_aux_loss(&mut tape, p, &[true]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from(9);
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut store, "scan", 6, 5, &mut rng);
        let q = random(4, 6, &mut rng);
        let kv = random(3, 6, &mut rng);
        let labels = [true, false, false, true];
        let report = finite_diff_check(&mut store, 1e-5, |tape, store| {
            let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
            let v = m.forward(tape, store, qv, kvv)?;
            scan_aux_loss(tape, v.aux, &labels)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    fn library(n: usize) -> IdentitySpeechLibrary {
        IdentitySpeechLibrary {
            entries: vec![LibraryEntry {
                identity: 3,
                centroid: vec![],
                members: vec![1],
                segments: (0..n)
                    .map(|i| SegmentRef {
                        scenario: 0,
                        start: i as f64,
                        end: i as f64 + 3.0,
                    })
                    .collect(),
                speechless: n == 0,
            }],
        }
    }

    #[test]
    fn reference_sampling() {
        let one = library(1);
        for s in 0..5 {
            let got = sample_reference(&one, 3, &mut rng_from(s), 4).unwrap();
            assert_eq!(got, one.entries[0].segments);
        }
        let five = library(5);
        let got = sample_reference(&five, 3, &mut rng_from(1), 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_ne!(got[0], got[1]);
        assert_eq!(got, sample_reference(&five, 3, &mut rng_from(1), 2).unwrap());
        assert!(matches!(sample_reference(&five, 9, &mut rng_from(1), 2), Err(Error::UnknownIdentity(9))));
    }

    #[test]
    fn entropy_of_uniform_and_one_hot_rows() {
        let u = Tensor::filled(&[2, 4], 0.25);
        assert!((attention_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let h = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(attention_entropy(&h), 0.0);
    }
}
