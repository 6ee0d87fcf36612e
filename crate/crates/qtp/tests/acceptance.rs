//! Acceptance suite. Each test covers one numbered criterion and prints a
//! single PASS/FAIL line; tolerances are pinned as constants below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qtp::encoder::{
    load_encoder, save_encoder, Encoder, EncoderConfig, PositionalSource,
};
use qtp::fdcheck::{assert_grads_close, numeric_grad};
use qtp::graph::{Bindings, Graph};
use qtp::image::{crop_to_patch_multiple, maximal_block_cover, Image, PATCH_SIZE};
use qtp::metrics::{interpolation_bias, mesoscopic_similarity, BASELINE_SIZE};
use qtp::posenc::{
    grid_coordinate, interpolate_table, load_mlp, load_table, save_mlp, save_table,
    CoordinateMlp, InterpMethod, MlpConfig, PositionalTable, GRID_COLS, GRID_ROWS,
};
use qtp::quadtree::{
    build_quadtree, patchify_image, read_qpat, write_qpat, PatchLayout, SelectionPolicy,
};
use qtp::trainer::{
    fit_residual_only, load_checkpoint, train_on_images, TrainConfig, TrainState,
};

const EXACT: f64 = 0.0;
const TOL_TIGHT: f64 = 1e-12;
const TOL_CONST_CZ: f64 = 1e-10;
const TOL_GRAD: f64 = 1e-4;
const TOL_RESIDUAL: f64 = 1e-3;
const TILING_BUDGET: Duration = Duration::from_secs(60);
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const RESIDUAL_BUDGET: Duration = Duration::from_secs(600);

fn criterion(n: usize, desc: &str, body: impl FnOnce()) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    match outcome {
        Ok(()) => println!("ACCEPTANCE {n:02} PASS - {desc}"),
        Err(e) => {
            println!("ACCEPTANCE {n:02} FAIL - {desc}");
            std::panic::resume_unwind(e);
        }
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
    Image::new(h, w, data).unwrap()
}

fn assert_tiles(layout: &PatchLayout) {
    let (rows, cols) = (layout.geometry.rows, layout.geometry.cols);
    let mut seen = vec![false; rows * cols];
    for e in &layout.entries {
        for dr in 0..e.size_patches {
            for dc in 0..e.size_patches {
                let (r, c) = (e.top + dr, e.left + dc);
                assert!(r < rows && c < cols, "leaf out of bounds");
                assert!(!seen[r * cols + c], "overlap at ({r},{c})");
                seen[r * cols + c] = true;
            }
        }
    }
    assert!(seen.iter().all(|&s| s), "uncovered patch");
}

#[test]
fn criterion_01_quadtree_tiling() {
    criterion(1, "quadtree leaves tile every block over 1000 random cases", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
        for case in 0..1000u64 {
            let rows = rng.gen_range(1..9);
            let cols = rng.gen_range(1..9);
            let img = random_image(rows * PATCH_SIZE, cols * PATCH_SIZE, case);
            let policy = match case % 3 {
                0 => SelectionPolicy::NeverMerge,
                1 => SelectionPolicy::Derivative { alpha: rng.gen_range(0.0..3.0) },
                _ => SelectionPolicy::Random { p: rng.gen_range(0.0..1.0), seed: rng.gen() },
            };
            let (cropped, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
            let layout = patchify_image(&cropped, &geom, &policy).unwrap();
            assert_tiles(&layout);
        }
        assert!(start.elapsed() < TILING_BUDGET, "tiling took {:?}", start.elapsed());
    });
}

#[test]
fn criterion_02_ugp_equivalence() {
    criterion(2, "336x336 never_merge layout equals the 576-token uniform grid", || {
        let img = random_image(336, 336, 42);
        let (cropped, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
        let layout = patchify_image(&cropped, &geom, &SelectionPolicy::NeverMerge).unwrap();
        assert_eq!(layout.token_count(), 576);
        for (i, e) in layout.entries.iter().enumerate() {
            assert_eq!((e.top, e.left, e.size_patches), (i / 24, i % 24, 1));
            for c in 0..3 {
                for py in 0..PATCH_SIZE {
                    for px in 0..PATCH_SIZE {
                        let want = cropped.get(c, e.top * PATCH_SIZE + py, e.left * PATCH_SIZE + px);
                        let got = e.pixels[c * PATCH_SIZE * PATCH_SIZE + py * PATCH_SIZE + px];
                        assert_eq!(got - want, EXACT, "pixel mismatch in token {i}");
                    }
                }
            }
        }
    });
}

#[test]
fn criterion_03_one_detailed_quadrant_gives_seven_leaves() {
    criterion(3, "4x4 block with one high-detail quadrant decomposes into 7 leaves", || {
        let px = 4 * PATCH_SIZE;
        let mut img = Image::constant(px, px, 0.5);
        let noisy = random_image(px, px, 7);
        // detail confined to the top-left 2x2-patch quadrant
        let mut data = Vec::with_capacity(px * px * 3);
        for c in 0..3 {
            for y in 0..px {
                for x in 0..px {
                    data.push(if y < px / 2 && x < px / 2 {
                        noisy.get(c, y, x)
                    } else {
                        img.get(c, y, x)
                    });
                }
            }
        }
        img = Image::new(px, px, data).unwrap();
        let tree = build_quadtree(
            &img, 0, 0, 4, PATCH_SIZE,
            &SelectionPolicy::Derivative { alpha: 0.5 },
            None,
        )
        .unwrap();
        assert_eq!(tree.leaves().len(), 7);
    });
}

#[test]
fn criterion_04_alpha_monotonicity() {
    criterion(4, "derivative token_count is non-increasing across an alpha ladder", || {
        for seed in 0..100u64 {
            let img = random_image(8 * PATCH_SIZE, 8 * PATCH_SIZE, 1000 + seed);
            let (cropped, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
            let mut prev = usize::MAX;
            for i in 0..10 {
                let alpha = i as f64 * 0.35;
                let n = patchify_image(&cropped, &geom, &SelectionPolicy::Derivative { alpha })
                    .unwrap()
                    .token_count();
                assert!(n <= prev, "seed {seed}: alpha {alpha} grew tokens {prev} -> {n}");
                prev = n;
            }
        }
    });
}

#[test]
fn criterion_05_block_grid_shapes() {
    criterion(5, "476x518 px gives a 2x2 block grid; 672x896 px gives 3x4", || {
        for (h, w, gr, gc) in [(476usize, 518usize, 2usize, 2usize), (672, 896, 3, 4)] {
            let img = Image::constant(h, w, 0.3);
            let (_, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
            let cover = maximal_block_cover(&geom);
            assert_eq!((cover.grid_rows, cover.grid_cols), (gr, gc), "{h}x{w}");
        }
    });
}

#[test]
fn criterion_06_gradient_integrity() {
    criterion(6, "analytic gradients match finite differences over 50 seeds", || {
        let start = Instant::now();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
            // coordinate MLP forward/backward
            let mlp = CoordinateMlp::init(MlpConfig {
                fourier_features: 4,
                hidden_layers: 1,
                hidden_width: 8,
                out_dim: 8,
                fourier_scale: 2.0,
                init_seed: seed,
            });
            let mut g = Graph::new();
            let coords = g.constant(qtp::tensor::Tensor::new(
                vec![3, 2],
                (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ).unwrap());
            let out = mlp.build_graph(&mut g, coords);
            let loss = g.sum_all(out);
            let mut bind = Bindings::new();
            mlp.bind_params(&mut bind);
            let eval = g.forward(&bind).unwrap();
            let grads = g.backward(&eval, loss, &bind).unwrap();
            for name in ["mlp.h0.w", "mlp.h0.b", "mlp.out.w", "mlp.out.b"] {
                let numeric = numeric_grad(&g, &bind, loss, name);
                assert_grads_close(&grads.params[name], &numeric, TOL_GRAD, name);
            }

            // encoder backward at D=8, depth=1
            let enc = Encoder::init(EncoderConfig {
                depth: 1,
                width: 8,
                heads: 2,
                patch_size: PATCH_SIZE,
                init_seed: seed,
            })
            .unwrap();
            let table = PositionalTable::synthetic_smooth(8, seed);
            let img = random_image(2 * PATCH_SIZE, 2 * PATCH_SIZE, 500 + seed);
            let (cropped, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
            let layout = patchify_image(&cropped, &geom, &SelectionPolicy::NeverMerge).unwrap();
            let mut g = Graph::new();
            let mut bind = Bindings::new();
            let (cls, _) = enc
                .build_cls_graph(&mut g, &layout, PositionalSource::TableBilinear(&table), &mut bind)
                .unwrap();
            let loss = g.sum_all(cls);
            let eval = g.forward(&bind).unwrap();
            let grads = g.backward(&eval, loss, &bind).unwrap();
            for name in ["enc.b0.attn.wq", "enc.b0.mlp.b1", "enc.cls", "enc.ln.g"] {
                let numeric = numeric_grad(&g, &bind, loss, name);
                assert_grads_close(&grads.params[name], &numeric, TOL_GRAD, name);
            }

            // encode_grad_wrt_positions against FD on sampled table entries
            let big = random_image(3 * PATCH_SIZE, 3 * PATCH_SIZE, 700 + seed);
            let (bc, bg) = crop_to_patch_multiple(&big, PATCH_SIZE).unwrap();
            let layout_b = patchify_image(&bc, &bg, &SelectionPolicy::NeverMerge).unwrap();
            let (_, analytic) = enc
                .encode_grad_wrt_positions(&layout, &layout_b, PositionalSource::TableBilinear(&table))
                .unwrap();
            let h = 1e-5;
            for _ in 0..8 {
                let k = rng.gen_range(0..table.values.len());
                let mut plus = table.clone();
                plus.values[k] += h;
                let mut minus = table.clone();
                minus.values[k] -= h;
                let cp = enc
                    .cls_similarity(&layout, &layout_b, PositionalSource::TableBilinear(&plus))
                    .unwrap();
                let cm = enc
                    .cls_similarity(&layout, &layout_b, PositionalSource::TableBilinear(&minus))
                    .unwrap();
                let fd = (cp - cm) / (2.0 * h);
                let a = analytic[k];
                assert!(
                    (a - fd).abs() <= TOL_GRAD * fd.abs().max(1.0),
                    "seed {seed} entry {k}: analytic {a} vs fd {fd}"
                );
            }
        }
        assert!(start.elapsed() < GRAD_BUDGET, "gradients took {:?}", start.elapsed());
    });
}

#[test]
fn criterion_07_bias_metric_identities() {
    criterion(7, "b_interp vanishes for identical layouts; C^z identities hold", || {
        let enc = Encoder::init(EncoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            patch_size: PATCH_SIZE,
            init_seed: 3,
        })
        .unwrap();
        let table = PositionalTable::synthetic_smooth(8, 3);
        let img = random_image(400, 380, 11);
        let b = interpolation_bias(&img, BASELINE_SIZE, PositionalSource::TableBilinear(&table), &enc)
            .unwrap();
        assert!(b.abs() <= TOL_TIGHT, "b_interp at 336 = {b}");
        let cz = mesoscopic_similarity(&img, BASELINE_SIZE, &enc).unwrap();
        assert!((cz - 1.0).abs() <= TOL_TIGHT, "C^z 336->336 = {cz}");
        let flat = Image::constant(500, 450, 0.37);
        for n in [224usize, 448, 560] {
            let cz = mesoscopic_similarity(&flat, n, &enc).unwrap();
            assert!((cz - 1.0).abs() <= TOL_CONST_CZ, "constant C^z at {n} = {cz}");
        }
    });
}

#[test]
fn criterion_08_interpolation_baselines() {
    criterion(8, "table interpolation reproduces nodes; bilinear midpoint is the 4-node mean", || {
        let table = PositionalTable::synthetic_smooth(16, 5);
        for i in 0..GRID_ROWS {
            for j in 0..GRID_COLS {
                let (x, y) = grid_coordinate(i, j).unwrap();
                for method in [InterpMethod::Bilinear, InterpMethod::Bicubic] {
                    let v = interpolate_table(&table, x, y, method);
                    for d in 0..16 {
                        let node = table.values[(i * GRID_COLS + j) * 16 + d];
                        assert!((v[d] - node).abs() <= TOL_TIGHT, "node ({i},{j})[{d}]");
                    }
                }
            }
        }
        for i in 0..GRID_ROWS - 1 {
            for j in 0..GRID_COLS - 1 {
                let (x0, y0) = grid_coordinate(i, j).unwrap();
                let (x1, y1) = grid_coordinate(i + 1, j + 1).unwrap();
                let v = interpolate_table(
                    &table,
                    (x0 + x1) / 2.0,
                    (y0 + y1) / 2.0,
                    InterpMethod::Bilinear,
                );
                for d in 0..16 {
                    let mean = [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)]
                        .iter()
                        .map(|&(r, c)| table.values[(r * GRID_COLS + c) * 16 + d])
                        .sum::<f64>()
                        / 4.0;
                    assert!((v[d] - mean).abs() <= TOL_TIGHT, "midpoint ({i},{j})[{d}]");
                }
            }
        }
    });
}

#[test]
fn criterion_09_residual_fitting() {
    criterion(9, "fit_residual_only reaches L1 <= 1e-3 on a smooth 24x24x32 table", || {
        let start = Instant::now();
        let table = PositionalTable::synthetic_smooth(32, 0);
        let mut mlp = CoordinateMlp::init(MlpConfig {
            fourier_features: 32,
            hidden_layers: 2,
            hidden_width: 128,
            out_dim: 32,
            fourier_scale: 2.0,
            init_seed: 0,
        });
        let trace = fit_residual_only(&mut mlp, &table, 5000, 3e-3).unwrap();
        let last = *trace.last().unwrap();
        assert!(last <= TOL_RESIDUAL, "final L1 residual {last}");
        assert!(start.elapsed() < RESIDUAL_BUDGET, "fitting took {:?}", start.elapsed());

        // loss identity total = l_cls + gamma * r_l1, exactly, on a short run
        let enc = Encoder::init(EncoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            patch_size: PATCH_SIZE,
            init_seed: 1,
        })
        .unwrap();
        let small_table = PositionalTable::synthetic_smooth(8, 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 1,
            base_lr: 1e-3,
            gamma: 0.7,
            seed: 2,
            dataset: "mem".into(),
            ..TrainConfig::default()
        };
        let images = vec![random_image(64, 64, 21)];
        let small_mlp = CoordinateMlp::init(MlpConfig {
            fourier_features: 4,
            hidden_layers: 1,
            hidden_width: 8,
            out_dim: 8,
            fourier_scale: 2.0,
            init_seed: 2,
        });
        let mut state = TrainState::fresh(small_mlp, &cfg, images.len());
        train_on_images(&cfg, &images, &small_table, &enc, &mut state, None, |r| {
            assert_eq!(r.total, r.l_cls + cfg.gamma * r.r_l1, "loss identity at step {}", r.step);
        })
        .unwrap();
    });
}

fn round_trip_bytes(path: &Path, write_again: impl FnOnce(&Path)) {
    let original = std::fs::read(path).unwrap();
    let again = path.with_extension("again");
    write_again(&again);
    assert_eq!(original, std::fs::read(&again).unwrap(), "{}", path.display());
}

#[test]
fn criterion_10_determinism_and_persistence() {
    criterion(10, "seeded runs, checkpoint resume and file formats are bit-exact", || {
        let enc = Encoder::init(EncoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            patch_size: PATCH_SIZE,
            init_seed: 4,
        })
        .unwrap();
        let table = PositionalTable::synthetic_smooth(8, 4);
        let images = vec![random_image(56, 56, 31), random_image(56, 70, 32)];
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 2,
            base_lr: 1e-3,
            seed: 9,
            checkpoint_every: 3,
            dataset: "mem".into(),
            ..TrainConfig::default()
        };
        let mk_mlp = || CoordinateMlp::init(MlpConfig {
            fourier_features: 4,
            hidden_layers: 1,
            hidden_width: 8,
            out_dim: 8,
            fourier_scale: 2.0,
            init_seed: 5,
        });
        let run = |prefix: Option<&Path>| {
            let mut state = TrainState::fresh(mk_mlp(), &cfg, images.len());
            let mut csv = String::new();
            train_on_images(&cfg, &images, &table, &enc, &mut state, prefix, |r| {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            })
            .unwrap();
            (state, csv)
        };
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let (state_a, csv_a) = run(Some(&prefix));
        let (_, csv_b) = run(None);
        assert_eq!(csv_a, csv_b, "seeded runs differ");

        // resume from the step-3 checkpoint (the last one written)
        let mut resumed = load_checkpoint(&prefix).unwrap();
        assert_eq!(resumed.adam.step, 3);
        let mut tail = String::new();
        train_on_images(&cfg, &images, &table, &enc, &mut resumed, None, |r| {
            tail.push_str(&r.csv_row());
            tail.push('\n');
        })
        .unwrap();
        let full_tail: String = csv_a.lines().skip(3).map(|l| format!("{l}\n")).collect();
        assert_eq!(tail, full_tail, "resume diverged");
        for (name, t) in &state_a.mlp.params {
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = resumed.mlp.params[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "param {name} differs after resume");
        }

        // file-format round trips: QEMB, QMLP, QENC, QPAT
        let p = dir.path().join("t.qemb");
        save_table(&table, &p).unwrap();
        let loaded = load_table(&p).unwrap();
        round_trip_bytes(&p, |q| save_table(&loaded, q).unwrap());

        let p = dir.path().join("m.qmlp");
        save_mlp(&state_a.mlp, &p).unwrap();
        let loaded = load_mlp(&p).unwrap();
        round_trip_bytes(&p, |q| save_mlp(&loaded, q).unwrap());

        let p = dir.path().join("e.qenc");
        save_encoder(&enc, &p).unwrap();
        let loaded = load_encoder(&p).unwrap();
        round_trip_bytes(&p, |q| save_encoder(&loaded, q).unwrap());

        let img = random_image(56, 70, 33);
        let (cropped, geom) = crop_to_patch_multiple(&img, PATCH_SIZE).unwrap();
        let layout = patchify_image(&cropped, &geom, &SelectionPolicy::NeverMerge).unwrap();
        let p = dir.path().join("l.qpat");
        write_qpat(&layout, &p).unwrap();
        let (patch_size, tokens) = read_qpat(&p).unwrap();
        assert_eq!(patch_size, PATCH_SIZE);
        assert_eq!(tokens.len(), layout.token_count());
        for t in &tokens {
            assert_eq!(t.len(), PATCH_SIZE * PATCH_SIZE * 3);
        }
    });
}

#[test]
fn criterion_11_sweep_pipeline() {
    criterion(11, "CLI sweep 2x2x2 emits 8 data rows with correct averages, rerunnable", || {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("imgs");
        std::fs::create_dir(&imgs).unwrap();
        for (name, seed) in [("one", 51u64), ("two", 52)] {
            let img = random_image(64, 64, seed);
            qtp::image::save_ppm(&img, &imgs.join(format!("{name}.ppm"))).unwrap();
        }
        let run_sweep = |out: &Path| {
            let code = qtp::cli::run(
                [
                    "qtp", "sweep",
                    "--images", imgs.to_str().unwrap(),
                    "--sizes", "56,84",
                    "--alphas", "0.0,0.5",
                    "--jobs", "2",
                    "--out", out.to_str().unwrap(),
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            );
            assert_eq!(code, 0, "sweep exit code");
            std::fs::read_to_string(out.join("sweep.csv")).unwrap()
        };
        let csv = run_sweep(&dir.path().join("o1"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], qtp::metrics::CSV_HEADER);
        let data: Vec<&&str> = lines[1..].iter().filter(|l| !l.starts_with("average,")).collect();
        assert_eq!(data.len(), 8, "data row count");

        // each average row equals the column means of the 2 rows before it
        let mut pending: Vec<Vec<f64>> = Vec::new();
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            let nums: Vec<f64> = fields[4..].iter().map(|v| v.parse().unwrap()).collect();
            if fields[0] == "average" {
                assert_eq!(pending.len(), 2);
                for (k, v) in nums.iter().enumerate() {
                    let mean = (pending[0][k] + pending[1][k]) / 2.0;
                    assert!((v - mean).abs() <= TOL_TIGHT, "average column {k}");
                }
                pending.clear();
            } else {
                pending.push(nums);
            }
        }
        assert!(pending.is_empty(), "trailing rows without an average");

        let again = run_sweep(&dir.path().join("o2"));
        assert_eq!(csv, again, "rerun differs");
    });
}
