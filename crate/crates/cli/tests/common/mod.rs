#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskaudit::dataset::{store_mask, InstanceRecord, NegativeRef, Split};
use maskaudit::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maskaudit"));
    c.env("MASKAUDIT_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Random union of ellipses and rectangles inside `region` (x0, y0, x1, y1).
pub fn blob(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    region: (usize, usize, usize, usize),
) -> BinaryMask {
    let (x0, y0, x1, y1) = region;
    let parts = rng.random_range(1..=3);
    let mut shapes = Vec::new();
    for _ in 0..parts {
        let rw = rng.random_range(((x1 - x0) / 5).max(2)..=((x1 - x0) / 2).max(3)) as f64;
        let rh = rng.random_range(((y1 - y0) / 5).max(2)..=((y1 - y0) / 2).max(3)) as f64;
        let cx = rng.random_range(x0 as f64 + rw..=(x1 as f64 - rw).max(x0 as f64 + rw));
        let cy = rng.random_range(y0 as f64 + rh..=(y1 as f64 - rh).max(y0 as f64 + rh));
        shapes.push((rng.random_bool(0.5), cx, cy, rw, rh));
    }
    BinaryMask::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        shapes.iter().any(|&(ellipse, cx, cy, rw, rh)| {
            let dx = (px - cx) / rw;
            let dy = (py - cy) / rh;
            if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            }
        })
    })
    .unwrap()
}

/// Instance description for [`write_instances`].
pub struct FixtureInstance {
    pub id: String,
    pub split: Split,
    pub category: String,
    pub frames: usize,
    pub key_frame: Option<usize>,
    /// Disjoint, far-away negatives.
    pub valid_negatives: usize,
    /// Negatives overlapping the gt, which selection must drop.
    pub overlapping_negatives: usize,
}

pub const CANVAS: (usize, usize) = (48, 40);

/// Writes gt and negative masks plus `instances.json` into `dir`.
pub fn write_instances(dir: &Path, specs: &[FixtureInstance], seed: u64) -> PathBuf {
    let (w, h) = CANVAS;
    let mut records = Vec::new();
    for spec in specs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ maskaudit::perturb::derive_seed(&[&spec.id]));
        let mut gt_paths = Vec::new();
        let mut negs: Vec<NegativeRef> = (0..spec.valid_negatives + spec.overlapping_negatives)
            .map(|k| NegativeRef {
                id: format!("obj{k}"),
                mask_paths: Vec::new(),
            })
            .collect();
        for f in 0..spec.frames {
            let mut gt = blob(&mut rng, w, h, (14, 9, 34, 31));
            while gt.area() < 150 {
                gt = blob(&mut rng, w, h, (14, 9, 34, 31));
            }
            let rel = format!("in/{}/gt_{f}.png", spec.id);
            store_mask(&gt, &dir.join(&rel)).unwrap();
            gt_paths.push(Some(rel));
            // Corner boxes stay clear of the central region by more than the
            // boundary tolerance.
            let corners = [(0usize, 0usize), (w - 8, 0), (0, h - 7), (w - 8, h - 7)];
            for (k, neg) in negs.iter_mut().enumerate() {
                let m = if k < spec.valid_negatives {
                    let (cx, cy) = corners[k % corners.len()];
                    let side = rng.random_range(4..=6);
                    BinaryMask::rect(w, h, cx + 1, cy + 1, side, side.min(5)).unwrap()
                } else {
                    let (x, y) = gt.foreground().next().unwrap();
                    BinaryMask::rect(w, h, x, y, 3, 3).unwrap()
                };
                let rel = format!("in/{}/neg{k}_{f}.png", spec.id);
                store_mask(&m, &dir.join(&rel)).unwrap();
                neg.mask_paths.push(Some(rel));
            }
        }
        records.push(InstanceRecord {
            instance_id: spec.id.clone(),
            video_id: format!("vid-{}", spec.id),
            reference_text: format!("the {} making the sound", spec.category),
            object_category: spec.category.clone(),
            split: spec.split,
            key_frame_index: spec.key_frame,
            frame_count: spec.frames,
            video_path: Some(format!("videos/{}.mp4", spec.id)),
            audio_path: None,
            gt_mask_paths: gt_paths,
            negative_mask_paths: negs,
        });
    }
    let path = dir.join("instances.json");
    fs::write(&path, serde_json::to_string_pretty(&records).unwrap()).unwrap();
    path
}

pub fn simple_specs(
    n: usize,
    split: Split,
    frames: usize,
    negatives: usize,
) -> Vec<FixtureInstance> {
    (0..n)
        .map(|i| FixtureInstance {
            id: format!("{}-{i:04}", split.as_str()),
            split,
            category: match split {
                Split::TestUnseen => format!("rare{}", i % 5),
                _ => format!("common{}", i % 7),
            },
            frames,
            key_frame: Some(i % frames),
            valid_negatives: negatives,
            overlapping_negatives: 0,
        })
        .collect()
}

/// Every regular file under `root`, relative, sorted.
pub fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Scratch directory, memory-backed when the host offers one so timings
/// measure the tool rather than the disk.
pub fn scratch() -> tempfile::TempDir {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        if let Ok(d) = tempfile::Builder::new()
            .prefix("maskaudit-")
            .tempdir_in(shm)
        {
            return d;
        }
    }
    tempfile::tempdir().unwrap()
}
