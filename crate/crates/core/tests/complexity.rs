use proptest::prelude::*;
use sdtp_core::complexity::*;
use sdtp_core::Graph;

fn measured(section: Section, dims: &[LevelDims], heads: usize) -> u64 {
    let mut g = Graph::with_mac_counter();
    measured_macs(&mut g, section, dims, heads).unwrap()
}

#[test]
fn counted_macs_match_the_formulas() {
    let cases = [
        vec![LevelDims::new(2, 2, 4, 1).unwrap()],
        vec![LevelDims::new(3, 5, 6, 1).unwrap()],
        vec![
            LevelDims::new(8, 4, 4, 2).unwrap(),
            LevelDims::new(4, 2, 4, 1).unwrap(),
        ],
    ];
    for dims in &cases {
        for heads in [1, 2] {
            assert_eq!(
                measured(Section::PrimitiveMsa, dims, heads),
                flops_p_msa(dims)
            );
            assert_eq!(
                measured(Section::DecoupledMsa, dims, heads),
                flops_d_msa(dims)
            );
            assert_eq!(
                measured(Section::StridedMsa, dims, heads),
                flops_s_msa(dims)
            );
        }
    }
}

#[test]
fn strided_requires_divisible_maps() {
    let mut g = Graph::with_mac_counter();
    let dims = [LevelDims::new(5, 4, 2, 2).unwrap()];
    assert!(measured_macs(&mut g, Section::StridedMsa, &dims, 1).is_err());
}

#[test]
fn ordering_holds_around_detection_resolution() {
    for (h, w) in [(400, 672), (800, 1344), (1600, 2688)] {
        let table = FlopsTable::new(2, &LevelDims::pyramid(h, w, 256, &DEFAULT_STRIDES));
        assert!(table.ordering_holds(), "{h}x{w}");
    }
}

#[test]
fn zero_sized_levels_are_rejected() {
    assert_eq!(
        LevelDims::new(0, 4, 4, 1).unwrap_err().origin(),
        "flops.levels"
    );
}

proptest! {
    #[test]
    fn unit_stride_is_primitive(h in 1u64..200, w in 1u64..200, c in 1u64..512) {
        let d = [LevelDims::new(h, w, c, 1).unwrap()];
        prop_assert_eq!(flops_s_msa(&d), flops_p_msa(&d));
    }

    #[test]
    fn costs_grow_with_every_dimension(
        h in 1u64..100, w in 1u64..100, c in 1u64..256, s in 1u64..4
    ) {
        let base = LevelDims::new(h, w, c, s).unwrap();
        for bigger in [
            LevelDims::new(h + 1, w, c, s).unwrap(),
            LevelDims::new(h, w + 1, c, s).unwrap(),
            LevelDims::new(h, w, c + 1, s).unwrap(),
        ] {
            prop_assert!(level_p_msa(&bigger) > level_p_msa(&base));
            prop_assert!(level_d_msa(&bigger) > level_d_msa(&base));
            prop_assert!(level_s_msa(&bigger) >= level_s_msa(&base));
        }
    }

    #[test]
    fn decoupled_never_exceeds_primitive_beyond_a_line(
        h in 2u64..100, w in 2u64..100, c in 1u64..256
    ) {
        let d = LevelDims::new(h, w, c, 1).unwrap();
        prop_assert!(level_d_msa(&d) <= level_p_msa(&d));
    }
}
