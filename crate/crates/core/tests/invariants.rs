use proptest::prelude::*;
use sptok_core::io::netpbm::{self, Image};
use sptok_core::io::{assoc, config};
use sptok_core::network::{ModelConfig, Network};
use sptok_core::sagem::{self, SagemParams};
use sptok_core::salrm::{self, SalrmParams};
use sptok_core::superpixel::{self, GridGeometry, NeighborhoodSpec, SuperpixelParams};
use sptok_core::{synthetic, ParamStore, Rng, Tape, Tensor};

fn row_sums(t: &Tensor) -> Vec<f64> {
    let cols = t.dim(t.rank() - 1);
    t.data().chunks(cols).map(|r| r.iter().sum()).collect()
}

/// Grid side in cells, cell size, radius and iterations for a random instance.
fn grid_case() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..5, 1usize..4, 0usize..3, 0usize..3, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn association_rows_are_distributions_inside_the_window(
        (cells, cell, radius, iters, seed) in grid_case()
    ) {
        let side = cells * cell;
        let geo = GridGeometry::square(side, cell).unwrap();
        let spec = NeighborhoodSpec::new(radius, cell);
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let params = SuperpixelParams::new(&mut store, "sp", 3, &mut rng);
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::uniform(&[geo.n(), 3], -1.0, 1.0, &mut rng));
        let state = superpixel::generate(&mut tape, x, &geo, &spec, &params, iters).unwrap();

        for s in row_sums(&state.assoc) {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let m = geo.m();
        for (i, row) in state.assoc.data().chunks(m).enumerate() {
            let own = geo.cell_of(i);
            let support = row.iter().filter(|&&v| v > 0.0).count();
            prop_assert!(support <= spec.pixel_topk);
            for (j, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if v > 0.0 {
                    prop_assert!(geo.cell_distance(own, j) <= radius);
                }
            }
        }
    }

    #[test]
    fn global_maps_normalize_and_fused_map_is_bounded((cells, cell, seed) in (1usize..4, 1usize..3, any::<u64>())) {
        let side = (cells * cell).max(2);
        let cell = if side % cell == 0 { cell } else { 1 };
        let geo = GridGeometry::square(side, cell).unwrap();
        let spec = NeighborhoodSpec::new(2, cell);
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let params = SagemParams::new(&mut store, "g", 4, &mut rng);
        let mut tape = Tape::inference(&store);
        let r = tape.constant(Tensor::uniform(&[geo.n(), 4], -1.0, 1.0, &mut rng));
        let d = tape.constant(Tensor::uniform(&[geo.n(), 4], -1.0, 1.0, &mut rng));
        let maps = sagem::global_maps(&mut tape, r, d, &params, &geo, &spec, 1).unwrap();

        for v in [maps.a_rgb, maps.a_depth, maps.p_rgb, maps.p_depth] {
            for s in row_sums(tape.value(v)) {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let (ar, ad, att) = (tape.value(maps.a_rgb), tape.value(maps.a_depth), tape.value(maps.a_att));
        for ((&x, &y), &z) in ar.data().iter().zip(ad.data()).zip(att.data()) {
            prop_assert!(z >= 0.0 && z <= x.min(y) + 1e-15);
        }
    }

    #[test]
    fn local_selection_is_distinct_and_descending(n in 1usize..20, m in 1usize..6, k in 1usize..12, seed in any::<u64>()) {
        let k = k.min(n);
        let s = Tensor::uniform(&[n, m], 0.0, 1.0, &mut Rng::new(seed));
        let sel = salrm::select_local(&s, k).unwrap();
        prop_assert!(sel.is_rectangular());
        for (j, row) in sel.rows().enumerate() {
            let mut seen = row.to_vec();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), k);
            for w in row.windows(2) {
                prop_assert!(s.get(&[w[0], j]) >= s.get(&[w[1], j]));
            }
        }
    }

    #[test]
    fn netpbm_round_trip(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u64>()) {
        let channels = if gray { 1 } else { 3 };
        let mut rng = Rng::new(seed);
        let data = (0..w * h * channels).map(|_| (rng.next_u64() % 256) as u8).collect();
        let img = Image::new(w, h, channels, data).unwrap();
        let back = Image::decode(&img.encode()).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn assoc_round_trip(n in 1usize..12, m in 1usize..6, seed in any::<u64>()) {
        let a = Tensor::uniform(&[n, m], 0.0, 1.0, &mut Rng::new(seed));
        let back = assoc::decode(&assoc::encode(&a).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), a.shape());
        // Stored as f32.
        for (&b, &x) in back.data().iter().zip(a.data()) {
            prop_assert_eq!(b, f64::from(x as f32));
        }
    }

    #[test]
    fn config_round_trip(size in 1usize..8, radius in 0usize..4, iters in 0usize..4, k in 1usize..20, seed in any::<u64>()) {
        let cfg = ModelConfig {
            input_size: 32 * size,
            channels: [4, 8, 16, 32],
            cells: [2, 2, 1, 1],
            mask_radius: radius,
            iters,
            salrm_k: k,
            seed,
        };
        prop_assert_eq!(config::parse(&config::serialize(&cfg)).unwrap(), cfg);
    }
}

#[test]
fn radius_one_windows_are_the_three_by_three_neighbourhood() {
    let geo = GridGeometry::square(12, 2).unwrap();
    let spec = NeighborhoodSpec::new(1, 2);
    let masks = superpixel::build_masks(&geo, &spec);
    let g = geo.grid_w() as isize;
    for i in 0..geo.n() {
        let own = geo.cell_of(i) as isize;
        let (r, c) = (own / g, own % g);
        let mut expect = Vec::new();
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if (0..g).contains(&rr) && (0..g).contains(&cc) {
                    expect.push((rr * g + cc) as usize);
                }
            }
        }
        let mut got = masks.pixel.row(i).to_vec();
        got.sort_unstable();
        assert_eq!(got, expect, "pixel {i}");
    }
}

#[test]
fn salrm_refinement_scatters_only_to_selected_pixels() {
    let geo = GridGeometry::square(6, 2).unwrap();
    let spec = NeighborhoodSpec::new(1, 2);
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let params = SalrmParams::new(&mut store, "l", 4, 5, &mut rng);
    let mut tape = Tape::inference(&store);
    let r = tape.constant(Tensor::uniform(&[geo.n(), 4], -1.0, 1.0, &mut rng));
    let d = tape.constant(Tensor::uniform(&[geo.n(), 4], -1.0, 1.0, &mut rng));
    let (_, local) = salrm::salrm_forward(&mut tape, r, d, &params, &geo, &spec, 2).unwrap();
    let hit: std::collections::HashSet<usize> = local.selected.rows().flatten().copied().collect();
    let refined = tape.value(local.refined_rgb);
    for (i, row) in refined.data().chunks(4).enumerate() {
        if !hit.contains(&i) {
            assert!(row.iter().all(|&v| v == 0.0), "pixel {i} was never selected");
        }
    }
}

#[test]
fn predictions_are_probabilities_at_input_resolution() {
    let net = Network::new(ModelConfig::tiny()).unwrap();
    let pair = synthetic::saliency_pair(32, &mut Rng::new(3));
    let out = net.predict(&pair.rgb, &pair.depth).unwrap();
    for i in 1..=4 {
        let sm = out.sm(i);
        assert_eq!(sm.numel(), 32 * 32);
        assert!(sm.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let again = net.predict(&pair.rgb, &pair.depth).unwrap();
    assert_eq!(out.prediction().data(), again.prediction().data());
}

#[test]
fn resize_preserves_constant_images() {
    let t = Tensor::full(&[3, 5, 7], 0.25);
    let r = netpbm::resize_chw(&t, 11, 4).unwrap();
    assert_eq!(r.shape(), &[3, 11, 4]);
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}
