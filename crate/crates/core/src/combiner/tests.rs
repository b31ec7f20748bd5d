use super::*;
use crate::multitask::{export_encoders, BundleMeta, ModelConfig, MtlModel, TaskHead, TaskKind};
use crate::rng::SeedStreams;
use crate::text::synth_word_vectors;
use proptest::prelude::*;

fn set(id: u8, rows: usize, dim: usize, tag: &str) -> EmbeddingSet {
    let data = (0..rows * dim).map(|i| i as f64 * 0.5 - id as f64).collect();
    EmbeddingSet::new([id; 32], Tensor::matrix(rows, dim, data).unwrap(), tag).unwrap()
}

#[test]
fn corpus_id_is_order_and_boundary_sensitive() {
    let a = corpus_id(&["a b", "c"]);
    assert_eq!(a, corpus_id(&["a b".to_string(), "c".to_string()]));
    assert_ne!(a, corpus_id(&["c", "a b"]));
    assert_ne!(corpus_id(&["ab", "c"]), corpus_id(&["a", "bc"]));
    assert_ne!(corpus_id::<&str>(&[]), corpus_id(&[""]));
}

#[test]
fn average_pooling_examples() {
    let one = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
    assert_eq!(avg_pool_contextual(&one).unwrap(), vec![1.0, -2.0, 0.5]);
    let sym = Tensor::from_rows(&[[1.0, 3.0], [3.0, 1.0]]).unwrap();
    assert_eq!(avg_pool_contextual(&sym).unwrap(), vec![2.0, 2.0]);
    let three = Tensor::from_rows(&[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]]).unwrap();
    assert_eq!(avg_pool_contextual(&three).unwrap(), vec![2.0, 2.0]);
    assert_eq!(max_pool_contextual(&three).unwrap(), vec![6.0, 6.0]);
    assert!(avg_pool_contextual(&Tensor::zeros(&[0, 2])).is_err());
}

proptest! {
    #[test]
    fn pooling_ignores_timestep_order(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let m = Tensor::from_rows(&rows).unwrap();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut crate::rng::Rng::seed_from_u64(seed));
        let p = Tensor::from_rows(&shuffled).unwrap();
        let (a, b) = (avg_pool_contextual(&m).unwrap(), avg_pool_contextual(&p).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(max_pool_contextual(&m).unwrap(), max_pool_contextual(&p).unwrap());
    }

    #[test]
    fn combine_is_associative_and_segments_invert(d1 in 1usize..5, d2 in 1usize..5, d3 in 1usize..5, n in 1usize..6) {
        let (a, b, c) = (set(7, n, d1, "a"), set(7, n, d2, "b"), set(7, n, d3, "c"));
        let flat = combine(&[a.clone(), b.clone(), c.clone()], false).unwrap();
        let nested = combine(&[a.clone(), combine(&[b.clone(), c.clone()], false).unwrap()], false).unwrap();
        prop_assert_eq!(&flat.matrix, &nested.matrix);
        prop_assert_eq!(flat.provenance.as_str(), "a+b+c");
        prop_assert_eq!(flat.segment(0, d1).unwrap().matrix, a.matrix);
        prop_assert_eq!(flat.segment(d1, d1 + d2).unwrap().matrix, b.matrix);
        prop_assert_eq!(flat.segment(d1 + d2, d1 + d2 + d3).unwrap().matrix, c.matrix);
    }
}

#[test]
fn combine_examples() {
    let sets = [set(1, 4, 32, "x"), set(1, 4, 64, "y"), set(1, 4, 100, "z")];
    assert_eq!(combine(&sets, false).unwrap().dim(), 196);
    assert_eq!(combine(&sets[..1], false).unwrap(), sets[0]);
    assert!(matches!(
        combine(&[set(1, 4, 2, "x"), set(2, 4, 2, "y")], false),
        Err(Error::Alignment(_))
    ));
    assert!(combine(&[], false).is_err());
}

#[test]
fn normalized_combination_has_unit_segments() {
    let c = combine(&[set(3, 3, 2, "a"), set(3, 3, 4, "b")], true).unwrap();
    for i in 0..3 {
        let (l, r) = c.matrix.row(i).split_at(2);
        for part in [l, r] {
            let norm: f64 = part.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn non_finite_rows_are_reported() {
    let m = Tensor::from_rows(&[[0.0, 1.0], [f64::NAN, 0.0]]).unwrap();
    let err = EmbeddingSet::new([0; 32], m, "x").unwrap_err().to_string();
    assert!(err.contains("row 1"), "{err}");
}

#[test]
fn cache_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.semb");
    let mut s = set(9, 3, 4, "gensen");
    s.matrix.data_mut()[0] = 0.1 + 0.2;
    s.matrix.data_mut()[1] = -1e-300;
    save_embeddings(&path, &s).unwrap();
    assert_eq!(load_embeddings(&path).unwrap(), s);
    assert!(sidecar_path(&path).exists());
    let ext = load_external(&path).unwrap();
    assert_eq!(ext.provenance, "external:gensen");
    assert_eq!(ext.matrix, s.matrix);
}

#[test]
fn cache_rejects_bad_files() {
    let s = set(2, 3, 2, "x");
    let bytes = write_embeddings(&s);
    // Drop the last row: header still says n = 3.
    let short = &bytes[..bytes.len() - 16];
    let err = read_embeddings(short).unwrap_err().to_string();
    assert!(err.contains("3 rows") && err.contains("2 rows"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_embeddings(&bad).is_err());
    assert!(read_embeddings(&bytes[..10]).is_err());

    let mut nan = bytes.clone();
    let at = bytes.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    let err = read_embeddings(&nan).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
}

#[test]
fn contextual_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sctx");
    let sents = vec![
        Tensor::from_rows(&[[1.0, 3.0], [3.0, 1.0]]).unwrap(),
        Tensor::from_rows(&[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]]).unwrap(),
    ];
    let cv = ContextualVectors::new(corpus_id(&["a b", "c d e"]), 2, sents, "elmo").unwrap();
    save_contextual(&path, &cv).unwrap();
    let back = load_contextual(&path).unwrap();
    assert_eq!(back, cv);
    let pooled = back.pool(Pooling::Average).unwrap();
    assert_eq!(pooled.provenance, "contextual:avg");
    assert_eq!(pooled.matrix.data(), &[2.0, 2.0, 2.0, 2.0]);
    assert!(ContextualVectors::new([0; 32], 2, vec![Tensor::zeros(&[0, 2])], "x").is_err());
}

#[test]
fn embed_modes_follow_the_manifest() {
    let heads = ["a", "b"].map(|n| TaskHead {
        name: n.into(),
        kind: TaskKind::Single,
        num_classes: 2,
    });
    let toks: Vec<String> = "the cat sat on mat".split(' ').map(String::from).collect();
    let (vocab, table) = synth_word_vectors(1, &toks, 5).unwrap();
    let cfg = ModelConfig {
        hidden_dim: 16,
        classifier_hidden: 0,
    };
    let model = MtlModel::init(&heads, 5, &cfg, &SeedStreams::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_encoders(&model, dir.path(), &BundleMeta::default()).unwrap();
    let bundle = EncoderBundle::load(dir.path()).unwrap();
    let lines: Vec<String> = vec!["the cat sat".into(), "on the mat".into(), "cat".into()];

    let all = embed_corpus(&bundle, &lines, &vocab, &table, &EmbedMode::ConcatAll, 2).unwrap();
    assert_eq!(all.dim(), 96);
    assert_eq!(all.corpus_id, corpus_id(&lines));
    let shared = embed_corpus(&bundle, &lines, &vocab, &table, &EmbedMode::Shared, 8).unwrap();
    assert_eq!(shared.provenance, "mtl:shared");
    let tokens: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
    assert_eq!(shared.matrix, model.shared.embed_sentences(&tokens, &vocab, &table, 8).unwrap());
    assert_eq!(all.segment(0, 32).unwrap().matrix, shared.matrix);
    let pb = embed_corpus(&bundle, &lines, &vocab, &table, &"private:b".parse().unwrap(), 8).unwrap();
    assert_eq!(all.segment(64, 96).unwrap().matrix, pb.matrix);
    assert!(embed_corpus(&bundle, &lines, &vocab, &table, &EmbedMode::Private("zzz".into()), 8).is_err());
    assert!("private:".parse::<EmbedMode>().is_err());
}
