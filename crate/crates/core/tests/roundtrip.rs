//! Lossless round trips: window tiling, cyclic shifts, raster files, the
//! tensor container and checkpoints.

use csunet::cst::{cyclic_shift, window_partition, window_reverse, WindowGrid};
use csunet::network::ModelConfig;
use csunet::params::ParamStore;
use csunet::tensor::{Tape, Tensor};
use csunet::training::io::{decode_tensor, encode_tensor, read_image, read_mask, write_image, write_mask, Raster};
use csunet::training::{AdamW, Checkpoint, OptimState};
use proptest::prelude::*;

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

/// `(n, window, shift, tiles_y, tiles_x, d)`.
fn grid_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (1usize..3, 1usize..5, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, m, ty, tx, d)| (Just(n), Just(m), 0..m, Just(ty), Just(tx), Just(d)))
}

fn map(n: usize, h: usize, w: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, h, w, d], |i| i as f64 * 0.5 - 3.0)
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn partition_tiles_and_reverses((n, m, s, ty, tx, d) in grid_strategy()) {
        let (h, w) = (m * ty, m * tx);
        let grid = WindowGrid::new(m, s, h, w).unwrap();
        let x = map(n, h, w, d);
        let tape = Tape::new();
        let parts = window_partition(tape.constant(x.clone()), &grid).unwrap();
        let pv = parts.value();
        prop_assert_eq!(pv.shape(), &[n * ty * tx, m, m, d][..]);
        for b in 0..n * ty * tx {
            let (img, tile) = (b / (ty * tx), b % (ty * tx));
            let (wy, wx) = (tile / tx, tile % tx);
            for i in 0..m {
                for j in 0..m {
                    for c in 0..d {
                        let got = pv.data()[((b * m + i) * m + j) * d + c];
                        let src = x.data()[((img * h + wy * m + i) * w + wx * m + j) * d + c];
                        prop_assert_eq!(got, src);
                    }
                }
            }
        }
        let back = window_reverse(parts, &grid).unwrap();
        prop_assert_eq!(&*back.value(), &x);
    }

    #[test]
    fn shift_is_a_torus_roll(n in 1usize..3, h in 1usize..7, w in 1usize..7, dy in -8isize..8, dx in -8isize..8) {
        let x = map(n, h, w, 2);
        let tape = Tape::new();
        let rolled = cyclic_shift(tape.constant(x.clone()), dy, dx).unwrap();
        let rv = rolled.value();
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                    let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                    for c in 0..2 {
                        prop_assert_eq!(rv.data()[((b * h + y) * w + xx) * 2 + c], x.data()[((b * h + sy) * w + sx) * 2 + c]);
                    }
                }
            }
        }
        let back = cyclic_shift(rolled, -dy, -dx).unwrap();
        prop_assert_eq!(&*back.value(), &x);
    }

    #[test]
    fn rasters_survive_a_file(channels in prop::sample::select(vec![1usize, 3]), h in 1usize..9, w in 1usize..9, wide in any::<bool>(), seed in any::<u64>()) {
        let max = if wide { 65535u64 } else { 255 };
        let n = channels * h * w;
        let levels: Vec<u64> = (0..n as u64).map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add(i * 1442695040888963407) >> 20) % (max + 1)).collect();
        let raster = Raster { channels, height: h, width: w, data: levels.iter().map(|&k| k as f32 / max as f32).collect() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pnm");
        write_image(&path, &raster, wide).unwrap();
        let back = read_image(&path).unwrap();
        prop_assert_eq!((back.channels, back.height, back.width), (channels, h, w));
        for (a, b) in back.data.iter().zip(&raster.data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn masks_survive_a_file(h in 1usize..12, w in 1usize..12, ascii in any::<bool>(), labels in prop::collection::vec(any::<u8>(), 144)) {
        let labels = &labels[..h * w];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_mask(&path, h, w, labels, ascii).unwrap();
        let (rh, rw, back) = read_mask(&path).unwrap();
        prop_assert_eq!((rh, rw), (h, w));
        prop_assert_eq!(&back[..], labels);
    }

    #[test]
    fn tensor_container_is_bitwise(shape in prop::collection::vec(1usize..4, 0..5), bits in prop::collection::vec(any::<u64>(), 256)) {
        let n: usize = shape.iter().product();
        let t64 = Tensor::new(shape.clone(), bits[..n].iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t64)).unwrap();
        prop_assert_eq!(back.shape(), t64.shape());
        prop_assert!(back.data().iter().zip(t64.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let t32 = Tensor::new(shape, bits[..n].iter().map(|&b| f32::from_bits(b as u32)).collect()).unwrap();
        let back: Tensor<f32> = decode_tensor(&encode_tensor(&t32)).unwrap();
        prop_assert!(back.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(decode_tensor::<f64>(&encode_tensor(&t32)).is_err());
    }

    #[test]
    fn checkpoints_are_bitwise(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..5),
        with_moments in any::<bool>(),
        step in any::<u32>(),
        epochs in 0usize..100,
        best in prop::option::of(0.0f64..1.0),
        salt in any::<u32>(),
    ) {
        let mut store = ParamStore::new();
        let mut counter = salt;
        let mut next = || { counter = counter.wrapping_mul(1664525).wrapping_add(1013904223); f32::from_bits(counter) };
        for (i, s) in shapes.iter().enumerate() {
            let n = s.iter().product();
            store.insert(format!("layer{i}.weight"), Tensor::new(s.clone(), (0..n).map(|_| next()).collect()).unwrap()).unwrap();
        }
        let optim_state = with_moments.then(|| {
            let mut st = OptimState::new(&store);
            st.step = step as u64;
            for t in st.m.iter_mut().chain(st.v.iter_mut()) {
                for v in t.data_mut() { *v = next(); }
            }
            st
        });
        let ck = Checkpoint {
            model: ModelConfig::tiny(),
            epochs_completed: epochs,
            seed: salt as u64,
            best_score: best,
            optimizer: AdamW::default(),
            params: store,
            optim_state,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.params.names(), ck.params.names());
        prop_assert_eq!(back.optim_state.is_some(), with_moments);
        prop_assert_eq!((back.epochs_completed, back.best_score, back.model), (epochs, best, ModelConfig::tiny()));
    }
}
