//! Property tests for the binary formats: encode/decode round-trips
//! are bit-exact for arbitrary payloads.

use mmfusion::formats;
use mmfusion_core::cloud::PointCloud;
use mmfusion_core::tensor::{FeatureMap, Frame, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn kitti_points_roundtrip(points in prop::collection::vec(
        (-100.0f32..100.0, -100.0f32..100.0, -10.0f32..10.0, 0.0f32..1.0)
            .prop_map(|(x, y, z, r)| [x, y, z, r]),
        0..64,
    )) {
        let pc = PointCloud::new(points);
        let bytes = formats::encode_kitti_points(&pc);
        let back = formats::decode_kitti_points(&bytes).unwrap();
        prop_assert_eq!(&pc, &back);
        prop_assert_eq!(bytes, formats::encode_kitti_points(&back));
    }

    #[test]
    fn feature_map_roundtrip(
        c in 1usize..5,
        h in 1usize..7,
        w in 1usize..7,
        seed in 0u64..1000,
    ) {
        let mut rng = mmfusion_core::rng::named_rng(seed, "prop.ff");
        let data: Vec<f32> = mmfusion_core::rng::uniform_vec(&mut rng, c * h * w, -1e6, 1e6)
            .into_iter().map(|v| v as f32).collect();
        let map = FeatureMap::new(Tensor::new(vec![c, h, w], data).unwrap(), Frame::Bev).unwrap();
        let bytes = formats::encode_feature_map(&map);
        let back = formats::decode_feature_map(&bytes, Frame::Bev).unwrap();
        prop_assert_eq!(&map, &back);
        prop_assert_eq!(bytes, formats::encode_feature_map(&back));
    }

    #[test]
    fn truncated_feature_maps_are_rejected(cut in 1usize..20) {
        let map = FeatureMap::new(Tensor::<f32>::zeros(vec![2, 3, 4]), Frame::Bev).unwrap();
        let bytes = formats::encode_feature_map(&map);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(formats::decode_feature_map(&bytes[..bytes.len() - cut], Frame::Bev).is_err());
    }
}

#[test]
fn checkpoint_of_full_pipeline_roundtrips_bit_exact() {
    let cfg = mmfusion_core::PipelineConfig::toy_train();
    let store: mmfusion_core::ParamStore<f32> = cfg.init_params().unwrap();
    let bytes = formats::encode_checkpoint(&store).unwrap();
    let mut other: mmfusion_core::ParamStore<f32> = cfg.init_params().unwrap();
    formats::decode_checkpoint_into(&bytes, &mut other).unwrap();
    assert_eq!(bytes, formats::encode_checkpoint(&other).unwrap());
}
