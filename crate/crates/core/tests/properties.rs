use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use scan_asd::asdnet::{predict_corpus, AsdConfig, AsdModel, AugmentConfig, FeatureBank, ScanMode};
use scan_asd::facelib::{
    aggregate_identities, build_library_oracle, crop_track, pollute_track, Aggregation, IdentitySpeechLibrary,
};
use scan_asd::harness::{generate_corpora, train_arm, Arm, ExperimentConfig, Libraries};
use scan_asd::numerics::{normalize_in_place, softmax_tensor, ParamStore, Tensor};
use scan_asd::rng::{normal, rng_from};
use scan_asd::scan::ScanModule;
use scan_asd::spkembed::{window_audio, EmbedderConfig, SpeakerEmbedder};
use scan_asd::synthcorpus::{
    generate_corpus, generate_population, AudioSignal, Corpus, ScenarioConfig, Track, World, WorldConfig,
};

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

fn small_corpus(seed: u64) -> Corpus {
    let world = World::new(WorldConfig::default()).unwrap();
    let pop = generate_population(&world, 5, seed, 0).unwrap();
    let cfg = ScenarioConfig {
        n_scenarios: 2,
        duration_s: 3.0,
        ..ScenarioConfig::default()
    };
    generate_corpus(&world, &pop, &cfg, seed).unwrap()
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.train.n_scenarios = 4;
    cfg.corpus.val.n_scenarios = 2;
    cfg.corpus.face.n_scenarios = 2;
    cfg.corpus.face_held_out.n_scenarios = 2;
    cfg.embedder.steps = 5;
    cfg.asd.steps = 5;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8, scale in 0.1f64..50.0) {
        let mut rng = rng_from(seed);
        let x = random(rows, cols, &mut rng);
        let scaled = Tensor::matrix(rows, cols, x.data().iter().map(|v| v * scale).collect()).unwrap();
        let s = softmax_tensor(&scaled, 1).unwrap();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), n in 1usize..=8, k in 1usize..=8, m in 1usize..=8) {
        let mut rng = rng_from(seed);
        let (a, b) = (random(n, k, &mut rng), random(k, m, &mut rng));
        let c = a.matmul(&b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.get(i, l) * b.get(l, j);
                }
                prop_assert_eq!(c.get(i, j), acc);
            }
        }
    }

    #[test]
    fn reference_order_does_not_change_scan_features(seed in any::<u64>(), t in 1usize..6, k in 1usize..5, d in 2usize..9) {
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let module = ScanModule::new(&mut store, "scan", d, 4, &mut rng);
        let q = random(t, d, &mut rng);
        let refs = random(k, d, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let shuffled = refs.select_rows(&perm);
        let a = module.apply(&store, &q, &refs).unwrap();
        let b = module.apply(&store, &q, &shuffled).unwrap();
        for r in 0..t {
            for (x, y) in a.features.row(r).iter().zip(b.features.row(r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (j, &p) in perm.iter().enumerate() {
                prop_assert!((b.attention.get(r, j) - a.attention.get(r, p)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), gain in 0.01f64..100.0) {
        let mut rng = rng_from(seed);
        let e = SpeakerEmbedder::new(&EmbedderConfig::default(), 160, &mut rng);
        let wave: Vec<f64> = (0..16_000).map(|_| gain * normal(&mut rng)).collect();
        let v = e.embed(&wave).unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn window_rows_follow_video_frames(frames in 1usize..120, samples in 1usize..40_000) {
        let audio = AudioSignal { samples: vec![0.1; samples], sample_rate: 16_000 };
        let w = window_audio(&audio, frames, 30, 1.0).unwrap();
        prop_assert_eq!(w.frames(), frames);
    }

    #[test]
    fn labels_follow_the_timeline(seed in 0u64..1000) {
        let c = small_corpus(seed);
        for s in &c.scenarios {
            for t in &s.tracks {
                for (i, &l) in t.labels.iter().enumerate() {
                    let time = (i as f64 + 0.5) / f64::from(t.fps);
                    let speaking = s.utterances.iter().any(|u| u.speaker == t.speaker && u.covers(time));
                    prop_assert_eq!(l, speaking);
                }
            }
        }
    }

    #[test]
    fn pollution_preserves_native_frames(seed in 0u64..200, rate in 0.0f64..=1.0, len in 1usize..60) {
        let c = small_corpus(seed % 8);
        let tracks: Vec<&Track> = c.tracks().collect();
        let parent = tracks[(seed as usize) % tracks.len()];
        let crop = crop_track(parent, 0, len.min(parent.len()));
        let pool: Vec<&Track> = tracks.iter().copied().filter(|t| t.speaker != parent.speaker).collect();
        let p = pollute_track(&crop, &pool, rate, seed).unwrap();
        prop_assert_eq!(p.native_frames(), crop.frames.clone());
        prop_assert_eq!(p.len(), crop.len() + (rate * crop.len() as f64).round() as usize);
    }

    #[test]
    fn well_separated_aggregation_is_idempotent(seed in any::<u64>(), ids in 2usize..6, per in 1usize..5, threshold in 0.5f64..0.95) {
        let mut rng = rng_from(seed);
        let dim = 16;
        let mut embeddings = Vec::new();
        let mut id = 0u32;
        for axis in 0..ids {
            for _ in 0..per {
                let mut v = vec![0.0; dim];
                v[axis] = 1.0;
                for x in v.iter_mut() {
                    *x += 0.02 * normal(&mut rng);
                }
                normalize_in_place(&mut v);
                embeddings.push((id, v));
                id += 1;
            }
        }
        let first = aggregate_identities(&embeddings, threshold, Aggregation::Centroid).unwrap();
        prop_assert_eq!(first.len(), ids);
        let centroids: Vec<(u32, Vec<f64>)> = first.iter().enumerate().map(|(i, c)| (i as u32, c.centroid.clone())).collect();
        let again = aggregate_identities(&centroids, threshold, Aggregation::Centroid).unwrap();
        prop_assert_eq!(again.len(), first.len());
    }

    #[test]
    fn library_json_round_trips(seed in 0u64..50, min in 0.5f64..4.0) {
        let c = small_corpus(seed);
        let lib = build_library_oracle(&c, min).unwrap();
        for e in &lib.entries {
            prop_assert!(e.segments.iter().all(|s| s.duration() >= min));
        }
        let text = lib.to_json().unwrap();
        let back = IdentitySpeechLibrary::from_json(&text).unwrap();
        prop_assert_eq!(&back, &lib);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn config_toml_round_trips(lambda in 0.0f64..2.0, steps in 1usize..5000, occ in 0.0f64..=1.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.asd.lambda_aux = lambda;
        cfg.asd.steps = steps;
        cfg.corpus.val.occlusion_rate = occ;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn baseline_ignores_library_presence() {
    let cfg = tiny_experiment();
    let corpora = generate_corpora(&cfg, 3).unwrap();
    let world = World::new(cfg.world.clone()).unwrap();
    let embedder = scan_asd::spkembed::train_embedder(&world, &cfg.embedder, 3).unwrap().0;
    let oracle = |c| build_library_oracle(c, 2.5).unwrap();
    let full = Libraries {
        train_hypothesised: oracle(&corpora.train),
        val_hypothesised: oracle(&corpora.val),
        train_oracle: oracle(&corpora.train),
        val_oracle: oracle(&corpora.val),
    };
    let empty = IdentitySpeechLibrary::default();
    let none = Libraries {
        train_hypothesised: empty.clone(),
        val_hypothesised: empty.clone(),
        train_oracle: empty.clone(),
        val_oracle: empty,
    };
    let a = train_arm(&cfg, Arm::Baseline, &embedder, &corpora, &full, 3).unwrap();
    let b = train_arm(&cfg, Arm::Baseline, &embedder, &corpora, &none, 3).unwrap();
    assert_eq!(a.model.store, b.model.store);
}

#[test]
fn inference_ignores_augmentation_settings() {
    let cfg = AsdConfig {
        dim: 4,
        scan_mode: ScanMode::Off,
        ..AsdConfig::default()
    };
    let c = small_corpus(4);
    let model = AsdModel::new(&cfg, 256, cfg.audio_features(16_000), 64, 1).unwrap();
    let bank = FeatureBank::build(&c, &cfg, None, None).unwrap();
    let plain = predict_corpus(&model, &c, &bank, None, &cfg, 0).unwrap();
    let heavy = AsdConfig {
        augment: AugmentConfig {
            negative_prob: 1.0,
            flip_prob: 1.0,
            shift_prob: 1.0,
            max_shift: 3,
            rotate_prob: 1.0,
        },
        ..cfg.clone()
    };
    assert_eq!(predict_corpus(&model, &c, &bank, None, &heavy, 0).unwrap(), plain);
}
