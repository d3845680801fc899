//! Randomized property tests for the core invariants: attack transforms
//! preserve shape and range, serialization round-trips exactly, and the
//! accuracy metric behaves like a metric.

use proptest::prelude::*;
use wmfp_core::attacks::{
    apply, AttackKind, AttackSpec, BLUR_GRID, CROP_GRID, ERASING_GRID, JPEG_GRID,
};
use wmfp_core::codec::Fingerprint;
use wmfp_core::data::{load_ppm, save_ppm, Image};
use wmfp_core::eval::attribution_accuracy;
use wmfp_core::registry::{Registry, RegistryRecord};
use wmfp_core::tensor::Tape;

fn arb_attack_kind() -> impl Strategy<Value = AttackKind> {
    prop_oneof![
        (0..CROP_GRID.len()).prop_map(|i| AttackKind::Crop { ratio: CROP_GRID[i] }),
        (-29.9f32..29.9).prop_map(|degrees| AttackKind::Rotation { degrees }),
        (0..BLUR_GRID.len()).prop_map(|i| AttackKind::Blur { kernel: BLUR_GRID[i] }),
        (-0.29f32..0.29).prop_map(|delta| AttackKind::Brightness { delta }),
        (0.0f32..0.2).prop_map(|sigma| AttackKind::Noise { sigma }),
        (0..ERASING_GRID.len()).prop_map(|i| AttackKind::Erasing { ratio: ERASING_GRID[i] }),
        (0..JPEG_GRID.len()).prop_map(|i| AttackKind::Jpeg { quality: JPEG_GRID[i] }),
    ]
}

fn arb_image(side: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f32..=1.0, 3 * side * side)
        .prop_map(move |data| Image::new(side, data))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attacks_preserve_shape_and_range(kind in arb_attack_kind(), seed in 0u64..1000, img in arb_image(16)) {
        let spec = AttackSpec::new(kind, seed).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(img.data.clone(), &[1, 3, 16, 16], false).unwrap();
        let y = apply(&spec, &mut tape, x).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 3, 16, 16]);
        prop_assert!(tape.data(y).iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn attack_spec_text_roundtrip(kind in arb_attack_kind(), seed in 0u64..1000) {
        let spec = AttackSpec::new(kind, seed).unwrap();
        let back = AttackSpec::parse(&spec.to_line()).unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn fingerprint_hex_roundtrip(bits in proptest::collection::vec(0u8..=1, 1..=64)) {
        let phi = Fingerprint::from_bits(bits).unwrap();
        let back = Fingerprint::from_hex(&phi.to_hex(), phi.d_phi()).unwrap();
        prop_assert_eq!(back, phi);
    }

    #[test]
    fn accuracy_is_symmetric_and_bounded(
        a in proptest::collection::vec(0u8..=1, 16),
        b in proptest::collection::vec(0u8..=1, 16),
    ) {
        let pa = Fingerprint::from_bits(a).unwrap();
        let pb = Fingerprint::from_bits(b).unwrap();
        let ab = attribution_accuracy(&pa, &pb).unwrap();
        let ba = attribution_accuracy(&pb, &pa).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(attribution_accuracy(&pa, &pa).unwrap(), 1.0);
    }

    #[test]
    fn registry_text_roundtrip(
        n in 1usize..6,
        d_exp in 3u32..6,
        raw in proptest::collection::vec((any::<u64>(), any::<u8>(), any::<u64>()), 6),
    ) {
        let d_phi = 1usize << d_exp;
        let mut reg = Registry::new();
        for (i, (bits_seed, hash_byte, issued)) in raw.into_iter().take(n).enumerate() {
            let bits: Vec<u8> = (0..d_phi).map(|k| ((bits_seed >> (k % 64)) & 1) as u8).collect();
            reg.records.push(RegistryRecord {
                user_id: format!("user{i}"),
                fingerprint: Fingerprint::from_bits(bits).unwrap(),
                model_hash: [hash_byte; 32],
                issued_at: issued,
            });
        }
        let back = Registry::from_text(&reg.to_text()).unwrap();
        prop_assert_eq!(back.records, reg.records);
    }

    #[test]
    fn ppm_roundtrip_quantizes_within_one_step(img in arb_image(8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        prop_assert_eq!(back.side, img.side);
        let max_diff = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        prop_assert!(max_diff <= 1.0 / 255.0 + 1e-6, "max diff {}", max_diff);
    }
}
