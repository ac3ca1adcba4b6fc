use std::fs;
use std::path::Path;

use asrtts::data::{
    augment, decode_features, encode_features, gen_corpus, read_features, read_token_file, synth_features, write_features,
    write_token_file, Corpus, DomainSpec, GenConfig, MaskFill, SplitSizes, FIRST_CONTENT, HEADER_LEN,
};
use asrtts::models::{FeatureSeq, TokenSeq};
use asrtts::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small_config(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        splits: SplitSizes {
            paired: 6,
            speech_only: 5,
            text_only: 7,
            dev: 4,
            paired_ood: 3,
            dev_ood: 2,
        },
        ..GenConfig::default()
    }
}

fn f32_exact() -> impl Strategy<Value = f64> {
    (-1.0e4f32..1.0e4).prop_map(f64::from)
}

proptest! {
    #[test]
    fn features_round_trip_bit_exact(
        (n, dim, data) in (1usize..6, 1usize..5)
            .prop_flat_map(|(n, d)| (Just(n), Just(d), proptest::collection::vec(f32_exact(), n * d)))
    ) {
        let x = FeatureSeq::new(n, dim, data).unwrap();
        let bytes = encode_features(&x);
        prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * n * dim);
        let back = decode_features(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn truncation_is_reported_with_offset(n in 1usize..5, dim in 1usize..4, cut in 1usize..8) {
        let x = FeatureSeq::zeros(n, dim);
        let bytes = encode_features(&x);
        let keep = bytes.len().saturating_sub(cut);
        match decode_features(&bytes[..keep], Path::new("cut.eatf")) {
            Err(Error::Format { offset, path, .. }) => {
                prop_assert_eq!(offset as usize, keep);
                prop_assert_eq!(path, Path::new("cut.eatf").to_path_buf());
            }
            other => prop_assert!(false, "expected a format error, got {:?}", other),
        }
    }

    #[test]
    fn augment_masks_stay_within_widths(n in 1usize..12, dim in 1usize..6, fw in 0usize..4, tw in 0usize..6, seed in any::<u64>()) {
        let x = FeatureSeq::new(n, dim, (0..n * dim).map(|i| 1000.0 + i as f64).collect()).unwrap();
        let y = augment(&x, fw, tw, MaskFill::Zero, &mut ChaCha8Rng::seed_from_u64(seed));
        let masked_channels: Vec<usize> = (0..dim)
            .filter(|&c| (0..n).all(|t| y.frame(t)[c] == 0.0))
            .collect();
        let masked_frames: Vec<usize> = (0..n).filter(|&t| y.frame(t).iter().all(|&v| v == 0.0)).collect();
        // Any untouched value is unchanged.
        for t in 0..n {
            for c in 0..dim {
                let v = y.frame(t)[c];
                prop_assert!(v == 0.0 || v == x.frame(t)[c]);
            }
        }
        if masked_frames.len() < n {
            prop_assert!(masked_channels.len() <= fw.min(dim));
        }
        if masked_channels.len() < dim {
            prop_assert!(masked_frames.len() <= tw.min(n));
        }
        let again = augment(&x, fw, tw, MaskFill::Zero, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(again, y);
    }
}

#[test]
fn bad_magic_and_version_point_at_the_field() {
    let mut bytes = encode_features(&FeatureSeq::zeros(2, 2));
    bytes[0] = b'X';
    assert!(matches!(decode_features(&bytes, Path::new("a")), Err(Error::Format { offset: 0, .. })));
    let mut bytes = encode_features(&FeatureSeq::zeros(2, 2));
    bytes[4] = 9;
    assert!(matches!(decode_features(&bytes, Path::new("a")), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn noiseless_rendering_repeats_prototypes() {
    let d = DomainSpec::random(6, 3, 4, 0.0, 0.0, 9);
    let y = TokenSeq::new(vec![2, 5, 3], 6).unwrap();
    let x = synth_features(&y, &d, 1).unwrap();
    assert_eq!(x.n_frames(), 12);
    for (i, &k) in y.tokens().iter().enumerate() {
        for t in 0..4 {
            assert_eq!(x.frame(i * 4 + t), d.pattern_table[k].as_slice());
        }
    }
}

#[test]
fn utterance_offset_is_constant_across_frames() {
    let d = DomainSpec::random(6, 3, 2, 0.0, 0.5, 9);
    let y = TokenSeq::new(vec![2, 2, 4], 6).unwrap();
    let x = synth_features(&y, &d, 3).unwrap();
    let shift: Vec<f64> = x.frame(0).iter().zip(&d.pattern_table[2]).map(|(a, p)| a - p).collect();
    assert!(shift.iter().any(|v| v.abs() > 1e-6));
    for (i, &k) in y.tokens().iter().enumerate() {
        for t in 0..2 {
            for c in 0..3 {
                assert!((x.frame(i * 2 + t)[c] - d.pattern_table[k][c] - shift[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn token_files_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("t.txt");
    let seqs = [TokenSeq::new(vec![2, 3], 5).unwrap(), TokenSeq::new(vec![4], 5).unwrap()];
    write_token_file(&p, &seqs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(read_token_file(&p, 5).unwrap(), seqs);
    assert!(read_token_file(&p, 4).is_err(), "id 4 is out of range for vocab 4");

    let f = dir.path().join("x.eatf");
    let x = FeatureSeq::new(2, 2, vec![0.5, -1.25, 3.0, 8.0]).unwrap();
    write_features(&f, &x).unwrap();
    assert_eq!(read_features(&f).unwrap(), x);
    assert!(matches!(read_features(&dir.path().join("missing.eatf")), Err(Error::Io { .. })));
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_generation_is_deterministic_and_well_formed() {
    let (a, b, c) = (TempDir::new().unwrap(), TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = small_config(4);
    let manifest = gen_corpus(&cfg, a.path()).unwrap();
    gen_corpus(&cfg, b.path()).unwrap();
    gen_corpus(&small_config(5), c.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
    assert_eq!(manifest.vocab_size, cfg.vocab);
    assert_eq!(manifest.feature_dim, cfg.feature_dim);

    let corpus = Corpus::load(&a.path().join("manifest.json")).unwrap();
    let sizes = [
        ("paired", 6),
        ("speech_only", 5),
        ("text_only", 7),
        ("dev", 4),
        ("paired_ood", 3),
        ("dev_ood", 2),
    ];
    for (name, n) in sizes {
        assert_eq!(corpus.split(name).unwrap().len(), n, "{name}");
    }
    for (x, y) in corpus.pairs("paired").unwrap() {
        assert!((cfg.min_len..=cfg.max_len).contains(&y.len()));
        assert!(y.tokens().iter().all(|&t| (FIRST_CONTENT..cfg.vocab).contains(&t)));
        assert_eq!(x.n_frames(), y.len() * cfg.frames_per_token);
        assert_eq!(x.dim(), cfg.feature_dim);
    }
    for (x, y) in corpus.pairs("dev_ood").unwrap() {
        assert_eq!(x.n_frames(), y.len() * cfg.ood_frames_per_token);
    }
    assert_eq!(corpus.texts("text_only").unwrap().len(), 7);
    assert_eq!(corpus.speech("speech_only").unwrap().len(), 5);
    assert!(matches!(corpus.split("nosuch"), Err(Error::Config(_))));
}

#[test]
fn corrupt_feature_file_fails_corpus_load() {
    let dir = TempDir::new().unwrap();
    gen_corpus(&small_config(4), dir.path()).unwrap();
    let feats = dir.path().join("feats");
    let victim = fs::read_dir(&feats).unwrap().next().unwrap().unwrap().path();
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    match Corpus::load(&dir.path().join("manifest.json")) {
        Err(Error::Format { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn unknown_generation_key_is_rejected() {
    let err = serde_json::from_str::<GenConfig>(r#"{"vocab": 8, "frobnicate": true}"#).unwrap_err();
    assert!(err.to_string().contains("frobnicate"));
}
