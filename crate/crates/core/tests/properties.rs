use proptest::prelude::*;

use vla_core::gridworld::{generate_episode, render, EnvConfig, RenderConfig};
use vla_core::pruning::{apply_pruning, connectivity_scores, top_k_retain, PruneConfig, Retain};
use vla_core::nanomodel::{ModelInput, Slot};
use vla_core::semantic_grid::class::{OTHER, PAD};
use vla_core::semantic_grid::{flatten_grid, pool_semantic_map, unflatten_grid, ClassHierarchy, PoolConfig, SemanticMap};

fn map_strategy(side: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, side * side)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

fn embeddings() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..24, 2usize..12).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(0.1f64..1.0, d).prop_map(unit), n)
    })
}

proptest! {
    #[test]
    fn pooled_cells_are_ordered_and_padded_at_the_tail(px in map_strategy(16), k in 1usize..6) {
        let h = ClassHierarchy::tactical();
        let cfg = PoolConfig { grid_rows: 4, grid_cols: 4, k_per_cell: k };
        let grid = pool_semantic_map(&SemanticMap::new(16, 16, px).unwrap(), &h, &cfg).unwrap();
        prop_assert!(grid.validate(&h).is_ok());
        for cell in grid.cells() {
            prop_assert_eq!(cell.len(), k);
            prop_assert_ne!(cell[0], PAD);
            let first_pad = cell.iter().position(|&c| c == PAD).unwrap_or(k);
            prop_assert!(cell[first_pad..].iter().all(|&c| c == PAD));
            let ranks: Vec<i32> = cell[..first_pad].iter().map(|&c| h.rank(c).unwrap()).collect();
            prop_assert!(ranks.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn pooling_ignores_pixel_order_within_a_block(px in map_strategy(8), seed in any::<u64>()) {
        let h = ClassHierarchy::tactical();
        let cfg = PoolConfig { grid_rows: 1, grid_cols: 1, k_per_cell: 3 };
        let mut shuffled = px.clone();
        let mut s = seed | 1;
        for i in (1..shuffled.len()).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            shuffled.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let a = pool_semantic_map(&SemanticMap::new(8, 8, px).unwrap(), &h, &cfg).unwrap();
        let b = pool_semantic_map(&SemanticMap::new(8, 8, shuffled).unwrap(), &h, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn flatten_roundtrip(px in map_strategy(16), k in 1usize..4) {
        let cfg = PoolConfig { grid_rows: 8, grid_cols: 8, k_per_cell: k };
        let grid = pool_semantic_map(&SemanticMap::new(16, 16, px).unwrap(), &ClassHierarchy::tactical(), &cfg).unwrap();
        let flat = flatten_grid(&grid);
        prop_assert_eq!(flat.tokens.len(), 64 * k);
        prop_assert_eq!(unflatten_grid(&flat, 8, 8, k).unwrap(), grid);
    }

    #[test]
    fn scores_are_probabilities_and_rank_like_similarity(z in embeddings(), tau in 0.05f64..20.0) {
        let a = connectivity_scores(&z, tau).unwrap();
        let b = connectivity_scores(&z, 1.0).unwrap();
        prop_assert!(a.iter().all(|&x| x > 0.0 && x < 1.0));
        for i in 0..a.len() {
            for j in 0..a.len() {
                if b[i] > b[j] + 1e-12 {
                    prop_assert!(a[i] >= a[j]);
                }
            }
        }
    }

    #[test]
    fn top_k_keeps_the_k_best_in_order(scores in prop::collection::vec(0.0f64..1.0, 1..80), k in 1usize..80) {
        let k = k.min(scores.len());
        let cfg = PruneConfig { temperature: 1.0, retain: Retain::Count(k) };
        let r = top_k_retain(&scores, &cfg).unwrap();
        prop_assert_eq!(r.retained.len(), k);
        prop_assert!(r.retained.windows(2).all(|w| w[0] < w[1]));
        let worst_kept = r.retained.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for &i in &r.dropped {
            prop_assert!(scores[i] <= worst_kept);
        }
    }

    #[test]
    fn pruning_keeps_position_ids(n_vis in 1usize..40, frac in 0.05f64..1.0) {
        let mut slots = vec![Slot::Token(3), Slot::Token(4)];
        slots.extend((0..n_vis).map(Slot::Patch));
        slots.push(Slot::Token(2));
        let input = ModelInput { positions: (0..slots.len()).collect(), slots, patches: vec![0.0; n_vis * 4] };
        let scores: Vec<f64> = (0..n_vis).map(|i| ((i * 37) % 11) as f64).collect();
        let r = top_k_retain(&scores, &PruneConfig::fraction(frac)).unwrap();
        let out = apply_pruning(&input, &r).unwrap();
        prop_assert_eq!(out.len(), 3 + r.retained.len());
        for (slot, &pos) in out.slots.iter().zip(&out.positions) {
            match slot {
                Slot::Patch(j) => prop_assert_eq!(pos, 2 + j),
                Slot::Token(_) => {}
            }
        }
        prop_assert_eq!(*out.positions.last().unwrap(), n_vis + 2);
    }

    #[test]
    fn semantic_map_ignores_noise_seed(seed in 0u64..500, a in any::<u64>(), b in any::<u64>()) {
        let (state, _) = generate_episode(seed, &EnvConfig::default()).unwrap();
        let cfg = RenderConfig::default();
        let (m1, r1) = render(&state, a, &cfg);
        let (m2, r2) = render(&state, b, &cfg);
        prop_assert_eq!(m1, m2);
        if a != b {
            prop_assert_ne!(r1, r2);
        }
    }
}

#[test]
fn background_only_block_pools_to_other() {
    let cfg = PoolConfig { grid_rows: 2, grid_cols: 2, k_per_cell: 2 };
    let grid = pool_semantic_map(&SemanticMap::filled(8, 8, OTHER).unwrap(), &ClassHierarchy::tactical(), &cfg).unwrap();
    assert!(grid.cells().all(|c| c == [OTHER, PAD]));
}
