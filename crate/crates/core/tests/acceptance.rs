//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Run with `cargo test -p vignette-core --test acceptance -- --nocapture`.
//! Criterion 10 needs a real encoder and is ignored by default; see
//! `criterion_10_real_encoder`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use vignette_core::config::Config;
use vignette_core::container::{embed_in_container, extract_from_container, list_boxes};
use vignette_core::cost::{breakeven_views, system_cost, CostParams};
use vignette_core::encode::{Encoder, MockEncoder, MockRdParams, SegmentSource};
use vignette_core::metadata::{decode_metadata, encode_metadata, PerceptualMetadata};
use vignette_core::metrics::{ewpsnr, psnr, FramePair};
use vignette_core::motion::{MotionField, MotionVector};
use vignette_core::search::{exhaustive_search, heuristic_search, CandidateReport, CandidateScore};
use vignette_core::storage::{Library, MotionSource, SaliencySource, VideoState, VignetteOptions};
use vignette_core::tiling::{enumerate_configs, map_bitrates, TileLimits, TileQualityMap};
use vignette_core::video::{write_luma_y4m, FrameRate};
use vignette_core::{Error, Plane, SaliencyMap, TileGrid};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(n: u32, budget: Duration, body: impl FnOnce() -> Check) {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let outcome = outcome.and_then(|detail| {
        if elapsed <= budget {
            Ok(detail)
        } else {
            Err(format!("{detail}; took {elapsed:.2?}, budget {budget:.0?}"))
        }
    });
    let mut out = std::io::stdout().lock();
    match &outcome {
        Ok(detail) => writeln!(out, "criterion {n}: PASS ({detail}; {elapsed:.2?})"),
        Err(why) => writeln!(out, "criterion {n}: FAIL ({why})"),
    }
    .unwrap();
    drop(out);
    if let Err(why) = outcome {
        panic!("criterion {n} failed: {why}");
    }
}

fn random_plane(rng: &mut StdRng, w: usize, h: usize) -> Plane {
    Plane::from_fn(w, h, |_, _| rng.random_range(0..=255u8))
}

#[test]
fn criterion_1_metadata_round_trip() {
    run(1, Duration::from_secs(1), || {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..1000 {
            let rows: u8 = rng.random_range(1..=10);
            let cols: u8 = rng.random_range(1..=10);
            let weights: Vec<u8> = (0..rows as usize * cols as usize).map(|_| rng.random()).collect();
            let m = PerceptualMetadata::new(rows, cols, weights).map_err(|e| e.to_string())?;
            let bytes = encode_metadata(&m).map_err(|e| e.to_string())?;
            ensure(bytes.len() == 8 + rows as usize * cols as usize, || {
                format!("{rows}x{cols} serialized to {} bytes", bytes.len())
            })?;
            let back = decode_metadata(&bytes).map_err(|e| e.to_string())?;
            ensure(back == m, || format!("{rows}x{cols} did not round-trip"))?;
        }
        let mut longest = 0;
        for (w, h) in [(1920, 1080), (3840, 2160), (7680, 4320), (1280, 720)] {
            for g in enumerate_configs(w, h, &TileLimits::default()).map_err(|e| e.to_string())?.grids {
                let m = PerceptualMetadata::from_grid(&g, &vec![7; g.num_tiles()]).map_err(|e| e.to_string())?;
                longest = longest.max(encode_metadata(&m).map_err(|e| e.to_string())?.len());
            }
        }
        ensure(longest <= 58 && longest >= 8, || format!("longest default grid is {longest} bytes"))?;
        Ok(format!("1000 round-trips, longest default grid {longest} bytes"))
    });
}

fn mp4_box(fourcc: &[u8; 4], body: &[u8], large: bool) -> Vec<u8> {
    let mut out = Vec::new();
    if large {
        out.extend_from_slice(&1u32.to_be_bytes());
        out.extend_from_slice(fourcc);
        out.extend_from_slice(&(16 + body.len() as u64).to_be_bytes());
    } else {
        out.extend_from_slice(&(8 + body.len() as u32).to_be_bytes());
        out.extend_from_slice(fourcc);
    }
    out.extend_from_slice(body);
    out
}

fn vignette_boxes(path: &Path) -> std::result::Result<usize, String> {
    Ok(list_boxes(path).map_err(|e| e.to_string())?.iter().filter(|b| b.is_vignette()).count())
}

#[test]
fn criterion_2_container_transparency() {
    run(2, Duration::from_secs(1), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut rng = StdRng::seed_from_u64(2);
        let kinds: [&[u8; 4]; 5] = [b"moov", b"free", b"mdat", b"udta", b"skip"];
        let mut large_seen = 0;
        for trial in 0..25 {
            let mut original = mp4_box(b"ftyp", b"isom\0\0\x02\0isomiso2mp41", false);
            for _ in 0..rng.random_range(1..6) {
                let body: Vec<u8> = (0..rng.random_range(0..3000)).map(|_| rng.random()).collect();
                let large = rng.random_bool(0.4);
                large_seen += large as usize;
                original.extend(mp4_box(kinds[rng.random_range(0..kinds.len())], &body, large));
            }
            let src = dir.path().join(format!("in{trial}.mp4"));
            let out = dir.path().join(format!("out{trial}.mp4"));
            std::fs::write(&src, &original).map_err(|e| e.to_string())?;

            let first: Vec<u8> = (0..rng.random_range(9..60)).map(|_| rng.random()).collect();
            embed_in_container(&src, &out, &first).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(&out).map_err(|e| e.to_string())?;
            ensure(bytes.starts_with(&original), || format!("trial {trial}: original boxes changed"))?;
            let got = extract_from_container(&out).map_err(|e| e.to_string())?;
            ensure(got.as_deref() == Some(&first[..]), || format!("trial {trial}: payload mismatch"))?;

            let second = vec![trial as u8; 17];
            embed_in_container(&out, &out, &second).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(&out).map_err(|e| e.to_string())?;
            ensure(bytes.starts_with(&original), || format!("trial {trial}: re-embed changed boxes"))?;
            ensure(vignette_boxes(&out)? == 1, || format!("trial {trial}: more than one vignette box"))?;
            let got = extract_from_container(&out).map_err(|e| e.to_string())?;
            ensure(got.as_deref() == Some(&second[..]), || format!("trial {trial}: second payload"))?;
            ensure(bytes.len() == original.len() + 24 + second.len(), || {
                format!("trial {trial}: unexpected length {}", bytes.len())
            })?;
        }
        ensure(large_seen > 0, || "no 64-bit boxes generated".into())?;
        Ok(format!("25 box sequences, {large_seen} with 64-bit sizes"))
    });
}

#[test]
fn criterion_3_mapping_law() {
    run(3, Duration::from_secs(1), || {
        let mut rng = StdRng::seed_from_u64(3);
        let all: Vec<u8> = (0..=255).collect();
        for _ in 0..100 {
            let target: u32 = rng.random_range(10..=200_000);
            let rates = map_bitrates(&all, target, 0.1).map_err(|e| e.to_string())?;
            let floor = (target as f64 / 10.0).round() as u32;
            ensure(rates[0] == floor, || format!("target {target}: weight 0 gave {}", rates[0]))?;
            ensure(rates[255] == target, || format!("target {target}: weight 255 gave {}", rates[255]))?;
            ensure(rates.windows(2).all(|w| w[0] <= w[1]), || format!("target {target}: not monotone"))?;
        }
        Ok("100 targets".into())
    });
}

#[test]
fn criterion_4_metric_consistency() {
    run(4, Duration::from_secs(5), || {
        let mut rng = StdRng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (w, h) = (rng.random_range(8..96), rng.random_range(8..96));
            let a = random_plane(&mut rng, w, h);
            let spread: i16 = rng.random_range(1..40);
            let b = Plane::from_fn(w, h, |x, y| {
                (a.get(x, y) as i16 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8
            });
            let level: u8 = rng.random();
            let map = SaliencyMap::new(Plane::filled(w, h, level));
            let pair = [FramePair::new(&a, &b).map_err(|e| e.to_string())?];
            let p = psnr(&pair).map_err(|e| e.to_string())?;
            let e = ewpsnr(&pair, &map).map_err(|e| e.to_string())?;
            worst = worst.max((p - e).abs());
        }
        ensure(worst <= 1e-9, || format!("ewpsnr differs from psnr by {worst:e} dB"))?;

        let a = Plane::from_fn(64, 64, |x, y| ((x * 3 + y * 5) % 255) as u8);
        let b = Plane::from_fn(64, 64, |x, y| a.get(x, y) + 1);
        let p = psnr(&[FramePair::new(&a, &b).map_err(|e| e.to_string())?]).map_err(|e| e.to_string())?;
        let closed = 20.0 * 255f64.log10();
        ensure((p - 48.13).abs() <= 0.01 && (p - closed).abs() < 1e-9, || format!("+1 error gave {p} dB"))?;
        Ok(format!("max |ewpsnr - psnr| = {worst:.1e} dB, +1 error = {p:.4} dB"))
    });
}

/// A 1920x1080 segment with a few random saliency blobs over a dim random
/// background, and two rectangular clusters of coherent motion over a nearly
/// static background.
fn synthetic_segment(rng: &mut StdRng) -> (SaliencyMap, Vec<MotionField>) {
    const W: usize = 1920;
    const H: usize = 1080;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.0..W as f64),
                rng.random_range(0.0..H as f64),
                rng.random_range(60.0..260.0),
                rng.random_range(120.0..=255.0),
            )
        })
        .collect();
    let background: u8 = rng.random_range(0..40);
    let map = Plane::from_fn(W, H, |x, y| {
        let blob = blobs
            .iter()
            .map(|&(cx, cy, s, peak)| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                peak * (-d2 / (2.0 * s * s)).exp()
            })
            .fold(0.0, f64::max);
        (blob.round() as u8).max(background)
    });

    let clusters: Vec<(usize, usize, usize, usize, i32, i32)> = (0..2)
        .map(|_| {
            let (cw, ch) = (rng.random_range(200..800), rng.random_range(150..540));
            let speed = rng.random_range(4.0..24.0f64);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            (
                rng.random_range(0..W - cw),
                rng.random_range(0..H - ch),
                cw,
                ch,
                (speed * angle.cos()).round() as i32,
                (speed * angle.sin()).round() as i32,
            )
        })
        .collect();
    let fields = (1..=4)
        .map(|frame| {
            let mut entries = Vec::new();
            for by in (0..H).step_by(16) {
                for bx in (0..W).step_by(16) {
                    let inside = clusters
                        .iter()
                        .find(|c| (c.0..c.0 + c.2).contains(&bx) && (c.1..c.1 + c.3).contains(&by));
                    let (dx, dy) = match inside {
                        Some(c) => (c.4 + rng.random_range(-1..=1), c.5 + rng.random_range(-1..=1)),
                        None if rng.random_bool(0.05) => (rng.random_range(-1..=1), rng.random_range(-1..=1)),
                        None => (0, 0),
                    };
                    entries.push(MotionVector { block_x: bx as u32, block_y: by as u32, dx, dy });
                }
            }
            MotionField::new(frame, W as u32, H as u32, entries).unwrap()
        })
        .collect();
    (SaliencyMap::new(map), fields)
}

#[test]
fn criterion_5_heuristic_vs_exhaustive() {
    run(5, Duration::from_secs(30), || {
        const TRIALS: usize = 24;
        const TARGET: u32 = 4000;
        let mut rng = StdRng::seed_from_u64(5);
        let grids = enumerate_configs(1920, 1080, &TileLimits::default()).map_err(|e| e.to_string())?.grids;
        ensure(grids.len() == 49, || format!("{} candidates", grids.len()))?;
        let mut within = 0;
        let mut within_pick = 0;
        let mut gaps = Vec::new();
        for _ in 0..TRIALS {
            let (map, fields) = synthetic_segment(&mut rng);
            let segment = SegmentSource::synthetic(1920, 1080, 12.0, fields);

            let heuristic_enc = MockEncoder::new(MockRdParams::default()).map_err(|e| e.to_string())?;
            let h = heuristic_search(&segment.motion, &grids).map_err(|e| e.to_string())?;
            ensure(heuristic_enc.invocations() == 0, || "heuristic invoked the encoder".into())?;

            let exhaustive_enc = MockEncoder::new(MockRdParams::default()).map_err(|e| e.to_string())?;
            let x = exhaustive_search(&segment, &map, &grids, TARGET, 0.1, &exhaustive_enc, 4)
                .map_err(|e| e.to_string())?;
            ensure(exhaustive_enc.invocations() == 49, || {
                format!("exhaustive made {} invocations", exhaustive_enc.invocations())
            })?;

            let psnr_of = |r: &CandidateReport| match r.score {
                CandidateScore::Exhaustive { psnr_db, .. } => psnr_db,
                CandidateScore::Heuristic { .. } => f64::NAN,
            };
            let best_report = x
                .per_config
                .iter()
                .max_by(|a, b| psnr_of(a).total_cmp(&psnr_of(b)))
                .ok_or("no exhaustive results")?;
            let best = psnr_of(best_report);
            let picked = psnr_of(x.chosen_report());
            let quality = TileQualityMap::from_saliency(&map, h.chosen.clone(), TARGET, 0.1)
                .map_err(|e| e.to_string())?;
            let scorer = MockEncoder::new(MockRdParams::default()).map_err(|e| e.to_string())?;
            let chosen = scorer
                .transcode_tiled(&segment, &quality, None)
                .map_err(|e| e.to_string())?
                .frame_psnr()
                .ok_or("mock encode without PSNR")?;
            let gap = best - chosen;
            within += (gap <= 1.0) as usize;
            within_pick += (picked - chosen <= 1.0) as usize;
            gaps.push(format!("{}/{}:{gap:.2}", h.chosen.label(), best_report.grid.label()));
        }
        let rate = within as f64 / TRIALS as f64;
        let detail = format!(
            "{within}/{TRIALS} trials within 1 dB of the best PSNR ({within_pick}/{TRIALS} of the \
             exhaustive pick), 0 vs 49 invocations; heuristic/best:gap_db {}",
            gaps.join(" ")
        );
        ensure(rate >= 0.9, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn criterion_6_enumeration_oracle() {
    run(6, Duration::from_secs(1), || {
        let (w, h) = (1920usize, 1080usize);
        let mut oracle = Vec::new();
        for rows in 1..=20usize {
            for cols in 1..=20usize {
                if (2..=10).contains(&rows)
                    && (2..=10).contains(&cols)
                    && rows * cols <= 50
                    && w / cols >= 256
                    && h / rows >= 64
                {
                    oracle.push((rows, cols));
                }
            }
        }
        let configs = enumerate_configs(w, h, &TileLimits::default()).map_err(|e| e.to_string())?;
        let mut got: Vec<(usize, usize)> = configs.grids.iter().map(|g| (g.rows(), g.cols())).collect();
        got.sort();
        ensure(!configs.fallback && got == oracle, || format!("got {got:?}, oracle {oracle:?}"))?;
        ensure(got.len() == 49, || format!("{} grids", got.len()))?;
        for g in &configs.grids {
            let area: usize = g.tiles().map(|t| t.area()).sum();
            ensure(area == w * h, || format!("{} covers {area} pixels", g.label()))?;
            let rb = g.row_boundaries();
            let cb = g.col_boundaries();
            ensure(rb[0] == 0 && rb[rb.len() - 1] == h && cb[0] == 0 && cb[cb.len() - 1] == w, || {
                format!("{} does not span the frame", g.label())
            })?;
            ensure(rb.windows(2).all(|p| p[0] < p[1]) && cb.windows(2).all(|p| p[0] < p[1]), || {
                format!("{} overlaps", g.label())
            })?;
        }
        Ok("49 grids match the brute-force filter and partition the frame".into())
    });
}

fn write_clip(path: &Path, w: usize, h: usize, frames: usize, rate: FrameRate) -> Result<(), String> {
    let frames: Vec<Plane> = (0..frames)
        .map(|t| Plane::from_fn(w, h, |x, y| ((x + 3 * t) ^ y) as u8))
        .collect();
    write_luma_y4m(path, &frames, rate).map_err(|e| e.to_string())
}

fn mock_library(root: &Path) -> Result<Library, String> {
    let mut config = Config::default();
    config.encoder.worker_limit = 2;
    Library::with_encoder(root, config, Box::new(MockEncoder::default())).map_err(|e| e.to_string())
}

#[test]
fn criterion_7_storage_state_machine() {
    run(7, Duration::from_secs(5), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let src = dir.path().join("clip.y4m");
        write_clip(&src, 512, 128, 48, FrameRate { num: 2, den: 1 })?;
        let lib = mock_library(&dir.path().join("lib"))?;
        lib.ingest(&src, None, None).map_err(|e| e.to_string())?;
        let fixation = dir.path().join("fix.pgm");
        Plane::filled(512, 128, 0).write_pgm(&fixation).map_err(|e| e.to_string())?;

        ensure(matches!(lib.vignette_squeeze("clip", 100), Err(Error::State(_))), || {
            "squeeze on a baseline video did not error".into()
        })?;
        ensure(matches!(lib.vignette_update("clip", &fixation, None), Err(Error::State(_))), || {
            "update on a baseline video did not error".into()
        })?;

        let map = dir.path().join("sal.pgm");
        Plane::from_fn(512, 128, |x, y| ((x / 2) ^ y) as u8).write_pgm(&map).map_err(|e| e.to_string())?;
        let opts = VignetteOptions {
            target_kbps: Some(8000),
            saliency: SaliencySource::Map(map),
            ..Default::default()
        };
        let v = lib.vignette_transcode("clip", &opts).map_err(|e| e.to_string())?.video;
        ensure(v.state == VideoState::Vignette, || "not in vignette state".into())?;
        ensure(lib.vignette_squeeze("clip", 8000).is_err(), || "squeeze to the same target succeeded".into())?;
        ensure(lib.vignette_squeeze("clip", 9000).is_err(), || "upward squeeze succeeded".into())?;

        let mut sizes = vec![v.size_bytes()];
        for target in [6000, 3000, 1500, 700, 100] {
            let s = lib.vignette_squeeze("clip", target).map_err(|e| e.to_string())?;
            for (a, b) in v.segments.iter().zip(&s.segments) {
                ensure(a.grid == b.grid && a.weights == b.weights, || {
                    format!("squeeze to {target} changed segment {} layout", a.index)
                })?;
            }
            sizes.push(s.size_bytes());
        }
        ensure(sizes.windows(2).all(|p| p[0] >= p[1]), || format!("sizes increased: {sizes:?}"))?;
        Ok(format!("mock sizes {sizes:?}"))
    });
}

#[test]
fn criterion_8_cost_model() {
    run(8, Duration::from_secs(1), || {
        let p = CostParams::default();
        let v = breakeven_views(&p).map_err(|e| e.to_string())?;
        ensure((1.5e9..=2.5e9).contains(&v), || format!("break-even {v:e} outside [1.5e9, 2.5e9]"))?;
        let step = 1e6;
        let cheaper = |views: f64| -> Result<bool, String> {
            let base = system_cost(&p, views, false).map_err(|e| e.to_string())?.total;
            let vig = system_cost(&p, views, true).map_err(|e| e.to_string())?.total;
            Ok(vig <= base)
        };
        let mut k = 0u64;
        while !cheaper(k as f64 * step)? {
            k += 1;
            ensure(k < 10_000, || "scan found no break-even below 1e10 views".into())?;
        }
        let scanned = k as f64 * step;
        ensure((scanned - v).abs() <= step, || format!("closed form {v:e}, scan {scanned:e}"))?;
        Ok(format!("break-even {v:.4e} views, scan {scanned:.4e}"))
    });
}

#[test]
fn criterion_9_end_to_end_mock() {
    run(9, Duration::from_secs(5), || {
        const TARGET: u32 = 3000;
        let (w, h) = (1920usize, 1080usize);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let src = dir.path().join("seg.y4m");
        write_clip(&src, w, h, 12, FrameRate { num: 1, den: 1 })?;

        // a salient object covering the top-left 10% of the frame, moving right
        let (ow, oh) = (576usize, 360usize);
        let map = dir.path().join("sal.pgm");
        let plane = Plane::from_fn(w, h, |x, y| if x < ow && y < oh { 255 } else { 0 });
        let zero = plane.data().iter().filter(|&&v| v == 0).count() as f64 / (w * h) as f64;
        plane.write_pgm(&map).map_err(|e| e.to_string())?;
        let mv = dir.path().join("mv.csv");
        let mut csv = String::from("frame,block_x,block_y,dx,dy\n");
        for frame in 1..12 {
            for by in (0..h).step_by(16) {
                for bx in (0..w).step_by(16) {
                    let dx = if bx < ow && by < oh { 6 } else { 0 };
                    csv.push_str(&format!("{frame},{bx},{by},{dx},0\n"));
                }
            }
        }
        std::fs::write(&mv, csv).map_err(|e| e.to_string())?;

        let lib = mock_library(&dir.path().join("lib"))?;
        lib.ingest(&src, Some("seg"), None).map_err(|e| e.to_string())?;
        let baseline = lib.transcode("seg", TARGET).map_err(|e| e.to_string())?;
        ensure(baseline.segments.len() == 1 && baseline.segments[0].duration_s == 12.0, || {
            "expected one 12 s segment".into()
        })?;
        let opts = VignetteOptions {
            target_kbps: Some(TARGET),
            saliency: SaliencySource::Map(map),
            motion: Some(MotionSource::Dump(mv)),
            ..Default::default()
        };
        let v = lib.vignette_transcode("seg", &opts).map_err(|e| e.to_string())?.video;
        let ratio = v.size_bytes() as f64 / baseline.size_bytes() as f64;
        ensure(ratio <= 0.30, || format!("size ratio {ratio:.3}"))?;

        let seg = &v.segments[0];
        let grid: &TileGrid = seg.grid.as_ref().ok_or("no grid in manifest")?;
        let payload = extract_from_container(lib.resolve(&seg.files[0]))
            .map_err(|e| e.to_string())?
            .ok_or("no vignette box")?;
        let meta = decode_metadata(&payload).map_err(|e| e.to_string())?;
        ensure(
            (meta.rows as usize, meta.cols as usize) == (grid.rows(), grid.cols())
                && Some(&meta.weights) == seg.weights.as_ref(),
            || "container metadata differs from the manifest".into(),
        )?;
        Ok(format!(
            "{:.0}% zero saliency, grid {}, size {:.3} of the 1x1 baseline",
            zero * 100.0,
            grid.label(),
            ratio
        ))
    });
}

/// Needs `VIGNETTE_ENCODER` (a tile encode command template) and
/// `VIGNETTE_TEST_CLIP` (a 1080p y4m clip). Tile files are checked with
/// `ffprobe`.
#[test]
#[ignore]
fn criterion_10_real_encoder() {
    run(10, Duration::from_secs(3600), || {
        let clip = std::env::var_os("VIGNETTE_TEST_CLIP").map(PathBuf::from).ok_or("VIGNETTE_TEST_CLIP unset")?;
        std::env::var_os("VIGNETTE_ENCODER").ok_or("VIGNETTE_ENCODER unset")?;
        const TARGET: u32 = 4000;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let lib = Library::with_config(dir.path().join("lib"), Config::default().with_env_override())
            .map_err(|e| e.to_string())?;
        let v = lib.ingest(&clip, Some("clip"), None).map_err(|e| e.to_string())?;
        let (w, h) = (v.width, v.height);
        let uniform = lib.transcode("clip", TARGET).map_err(|e| e.to_string())?.size_bytes();

        let map = dir.path().join("sal.pgm");
        Plane::from_fn(w, h, |x, y| if x < w / 10 && y < h / 10 { 255 } else { 0 })
            .write_pgm(&map)
            .map_err(|e| e.to_string())?;
        let opts = VignetteOptions {
            target_kbps: Some(TARGET),
            saliency: SaliencySource::Map(map),
            ..Default::default()
        };
        let r = lib.vignette_transcode("clip", &opts).map_err(|e| e.to_string())?;
        let floor = (TARGET as f64 * 0.1).round() as u32;
        for s in &r.video.segments {
            let rates = s.bitrates_kbps.as_ref().ok_or("no bitrates")?;
            let at_floor = rates.iter().filter(|&&b| b == floor).count() as f64 / rates.len() as f64;
            ensure(at_floor >= 0.75, || format!("segment {}: only {at_floor:.2} of tiles at the floor", s.index))?;
            for f in &s.files {
                let f = lib.resolve(f);
                if f.extension().is_some_and(|e| e == "vgnt") {
                    continue;
                }
                let ok = std::process::Command::new("ffprobe")
                    .args(["-v", "error", "-show_streams"])
                    .arg(&f)
                    .output()
                    .map_err(|e| format!("ffprobe: {e}"))?
                    .status
                    .success();
                ensure(ok, || format!("{} is not decodable", f.display()))?;
            }
        }
        let ratio = r.video.size_bytes() as f64 / uniform as f64;
        ensure(ratio <= 0.5, || format!("size ratio {ratio:.3}"))?;
        Ok(format!("size {ratio:.3} of the uniform encode"))
    });
}
