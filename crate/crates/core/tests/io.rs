use proptest::prelude::*;
use tracelens::io::{decode_container, encode_container, load_weights, write_weights};
use tracelens::model::{HeadKind, Layout, ModelConfig};
use tracelens::synthetic::random_weights;
use tracelens::Error;

#[test]
fn two_layer_container_round_trips_through_a_file() {
    let config = ModelConfig::tiny(2, 2, 8, 11);
    let weights = random_weights::<f32>(&config, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rpwt");
    write_weights(&path, &config, &weights).unwrap();
    let original = std::fs::read(&path).unwrap();
    let (cfg_back, w_back) = load_weights::<f32>(&path).unwrap();
    assert_eq!(cfg_back, config);
    assert_eq!(w_back, weights);
    let again = dir.path().join("again.rpwt");
    write_weights(&again, &cfg_back, &w_back).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), original);
}

#[test]
fn header_width_mismatch_names_the_tensor() {
    let config = ModelConfig::tiny(1, 1, 9, 5);
    let bytes = encode_container(&config, &random_weights::<f32>(&config, 1)).unwrap();
    // Rewrite the header to claim d = 8 (same byte length, so offsets hold).
    let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
    let at = text.find("\"d_model\":9").unwrap() + 16;
    let mut patched = bytes.clone();
    patched[at + "\"d_model\":".len()] = b'8';
    match decode_container::<f32>(&patched) {
        Err(Error::TensorShape { tensor, expected, found }) => {
            assert_eq!(tensor, "embedding");
            assert_eq!(expected, vec![5, 8]);
            assert_eq!(found, vec![5, 9]);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_weights::<f32>(std::path::Path::new("/nonexistent/model.rpwt")).unwrap_err();
    assert!(err.is_io());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn containers_round_trip_bytewise(
        layers in 1usize..4,
        heads in 1usize..3,
        width in 1usize..4,
        vocab in 2usize..20,
        linear in any::<bool>(),
        parallel in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let mut config = ModelConfig::tiny(layers, heads, heads * width * 2, vocab);
        if linear {
            config.head_kind = HeadKind::LinearHead;
        }
        if parallel {
            config.layout = Layout::Parallel;
        }
        let bytes = encode_container(&config, &random_weights::<f32>(&config, seed)).unwrap();
        let (c, w) = decode_container::<f32>(&bytes).unwrap();
        prop_assert_eq!(&encode_container(&c, &w).unwrap(), &bytes);
        let (_, w64) = decode_container::<f64>(&bytes).unwrap();
        prop_assert_eq!(w64.cast::<f32>(), w);
    }
}
