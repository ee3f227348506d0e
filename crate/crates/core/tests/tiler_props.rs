use ourgan_core::autograd::{Graph, Var};
use ourgan_core::erf_probe::ConvStack;
use ourgan_core::srnet::{sr_image, SrNetwork};
use ourgan_core::tiler::{band_mask, seam_diff, split, stitch_counted, tiled_sr_noised, trim, TileLayout};
use ourgan_core::ImageTensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pointwise upscaler: nearest repeat of each input pixel.
struct Nearest(usize);

impl SrNetwork for Nearest {
    fn ratio(&self) -> usize {
        self.0
    }

    fn trf_radius(&self) -> usize {
        0
    }

    fn forward_graph(&self, g: &Graph, x: &Var) -> Var {
        g.upsample_nearest(&g.tanh(x), self.0)
    }
}

fn layout_strategy() -> impl Strategy<Value = TileLayout> {
    (1usize..40, 1usize..40, 1usize..4, 0usize..5)
        .prop_flat_map(|(hh, ww, r, a)| (Just((hh, ww)), 1..=hh, 1..=ww, Just(r), Just(a)))
        .prop_filter_map("invalid layout", |(full, h, w, r, a)| TileLayout::new(full, (h, w), a, r).ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cores_partition_the_image(lay in layout_strategy()) {
        let (hh, ww) = lay.full_size;
        let mut count = vec![0u8; hh * ww];
        for t in &lay.tiles {
            let (c, p) = (t.core, t.padded);
            prop_assert!(p.y <= c.y && p.x <= c.x && c.bottom() <= p.bottom() && c.right() <= p.right());
            prop_assert!(p.bottom() <= hh && p.right() <= ww);
            let a = lay.overlap;
            let want = (a.min(c.y), a.min(hh - c.bottom()), a.min(c.x), a.min(ww - c.right()));
            prop_assert_eq!(t.padding(), want);
            prop_assert_eq!((t.border.top, t.border.left), (t.row == 0, t.col == 0));
            for y in c.y..c.bottom() {
                for x in c.x..c.right() {
                    count[y * ww + x] += 1;
                }
            }
        }
        prop_assert!(count.iter().all(|&c| c == 1));
        prop_assert_eq!(lay.k(), lay.rows * lay.cols);
    }

    #[test]
    fn stitch_ignores_tile_order(lay in layout_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::random(lay.full_size.0, lay.full_size.1, &mut rng);
        let m = Nearest(lay.ratio);
        let parts = split(&img, &lay).unwrap();
        let mut cores: Vec<_> = parts.iter().enumerate()
            .map(|(i, p)| (i, trim(&sr_image(&m, p).unwrap(), &lay, i).unwrap()))
            .collect();
        let (a, counts) = stitch_counted(&cores, &lay).unwrap();
        prop_assert!(counts.iter().all(|&c| c == 1));
        cores.shuffle(&mut rng);
        let (b, _) = stitch_counted(&cores, &lay).unwrap();
        prop_assert_eq!(a.tensor().to_bits(), b.tensor().to_bits());
        // a pointwise model has no seams at any overlap
        let whole = sr_image(&m, &img).unwrap();
        prop_assert_eq!(a.tensor().to_bits(), whole.tensor().to_bits());
    }

    #[test]
    fn missing_or_duplicate_tiles_are_rejected(lay in layout_strategy()) {
        prop_assume!(lay.k() > 1);
        let img = ImageTensor::filled(lay.full_size.0, lay.full_size.1, 0.25);
        let m = Nearest(lay.ratio);
        let parts = split(&img, &lay).unwrap();
        let mut cores: Vec<_> = parts.iter().enumerate()
            .map(|(i, p)| (i, trim(&sr_image(&m, p).unwrap(), &lay, i).unwrap()))
            .collect();
        let last = cores.pop().unwrap();
        prop_assert!(stitch_counted(&cores, &lay).is_err());
        cores.push(cores[0].clone());
        prop_assert!(stitch_counted(&cores, &lay).is_err());
        cores.pop();
        cores.push(last);
        prop_assert!(stitch_counted(&cores, &lay).is_ok());
    }

    #[test]
    fn band_mask_marks_only_near_boundaries(lay in layout_strategy(), half in 0usize..6) {
        let (oh, ow) = lay.output_size();
        let (ys, xs) = lay.boundaries();
        let mask = band_mask(&lay, half);
        for y in 0..oh {
            for x in 0..ow {
                let band = |v: usize, bs: &[usize]| bs.iter().any(|&b| (b.saturating_sub(half)..b + half).contains(&v));
                let near = band(y, &ys) || band(x, &xs);
                prop_assert_eq!(mask[y * ow + x], near);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn overlap_at_trf_matches_whole(depth in 1usize..4, rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let net = ConvStack::random(depth, 4, 3, seed);
        let alpha = net.trf_radius();
        let full = (rows * 8 + 3, cols * 8 + 1);
        let lay = TileLayout::grid(full, rows, cols, alpha, 1).unwrap();
        let img = ImageTensor::random(full.0, full.1, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let tiled = tiled_sr_noised(&img, &net, &lay, 0).unwrap();
        let whole = sr_image(&net, &img).unwrap();
        let rep = seam_diff(&tiled, &whole, &lay, 1).unwrap();
        prop_assert!(rep.max < 1e-5, "max {}", rep.max);
    }
}
