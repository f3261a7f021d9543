mod common;

use common::{mask_bits, oracle_mask, random_polygon, single_polygon_set, PolyKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use slidexfer::annot::{parse_asap_xml, rasterize_mask, AnnotationSet, PolygonAnnotation};
use slidexfer::Exec;

fn kind() -> impl Strategy<Value = PolyKind> {
    prop_oneof![Just(PolyKind::Convex), Just(PolyKind::Concave), Just(PolyKind::SelfIntersecting)]
}

proptest! {
    #[test]
    fn rasterizer_matches_point_in_polygon(seed in any::<u64>(), kind in kind(), w in 1usize..96, h in 1usize..96) {
        let mut r = Xoshiro256StarStar::seed_from_u64(seed);
        let set = single_polygon_set(random_polygon(&mut r, kind, w.max(h) as f64));
        let m = rasterize_mask(&set, w, h, Exec::Sequential);
        prop_assert_eq!(mask_bits(&m), oracle_mask(&set, w, h));
        prop_assert_eq!(m, rasterize_mask(&set, w, h, Exec::Parallel));
    }

    #[test]
    fn multiple_polygons_combine_by_parity(seed in any::<u64>()) {
        let mut r = Xoshiro256StarStar::seed_from_u64(seed);
        let polys = (0..3)
            .map(|i| PolygonAnnotation::new(format!("p{i}"), "g", random_polygon(&mut r, PolyKind::Concave, 64.0)).unwrap())
            .collect();
        let set = AnnotationSet::new("s", polys).unwrap();
        prop_assert_eq!(mask_bits(&rasterize_mask(&set, 64, 64, Exec::Sequential)), oracle_mask(&set, 64, 64));
    }

    #[test]
    fn xml_round_trip_preserves_the_mask(seed in any::<u64>(), kind in kind()) {
        let mut r = Xoshiro256StarStar::seed_from_u64(seed);
        let set = single_polygon_set(random_polygon(&mut r, kind, 48.0));
        let back = parse_asap_xml("s", &set.to_asap_xml()).unwrap();
        prop_assert_eq!(rasterize_mask(&back, 48, 48, Exec::Sequential), rasterize_mask(&set, 48, 48, Exec::Sequential));
    }

    #[test]
    fn vertex_rotation_and_reversal_do_not_matter(seed in any::<u64>(), kind in kind(), k in 0usize..14) {
        let mut r = Xoshiro256StarStar::seed_from_u64(seed);
        let v = random_polygon(&mut r, kind, 40.0);
        let mut rotated = v.clone();
        rotated.rotate_left(k % v.len());
        let mut reversed = v.clone();
        reversed.reverse();
        let base = rasterize_mask(&single_polygon_set(v), 40, 40, Exec::Sequential);
        prop_assert_eq!(&base, &rasterize_mask(&single_polygon_set(rotated), 40, 40, Exec::Sequential));
        prop_assert_eq!(&base, &rasterize_mask(&single_polygon_set(reversed), 40, 40, Exec::Sequential));
    }
}
