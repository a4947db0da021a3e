//! Small procedurally generated depth dataset for smoke tests and the toy
//! profile. Shading darkens with distance, so depth is recoverable from color.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cide::CONTEXT_DIM;
use crate::data::png::write_depth_png;
use crate::data::profile::DatasetProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_scenes: usize,
    pub seed: u64,
    /// Also write a listing without scene indices.
    pub unlabeled_listing: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 8,
            height: 64,
            width: 64,
            num_scenes: 4,
            seed: 0,
            unlabeled_listing: true,
        }
    }
}

pub const TRAIN_LISTING: &str = "train.txt";
pub const TEST_LISTING: &str = "test.txt";
pub const UNLABELED_LISTING: &str = "unlabeled.txt";
pub const CONTEXT_VECTORS: &str = "context_vectors.txt";

fn scene_palette(scene: usize) -> [f64; 3] {
    const P: [[f64; 3]; 6] = [
        [0.9, 0.55, 0.35],
        [0.4, 0.75, 0.9],
        [0.6, 0.9, 0.45],
        [0.85, 0.8, 0.5],
        [0.7, 0.5, 0.85],
        [0.95, 0.95, 0.95],
    ];
    P[scene % P.len()]
}

/// Depth in meters for one sample, row-major.
fn render_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let near = rng.gen_range(1.0..2.0);
    let far = rng.gen_range(4.0..8.0);
    let bh = rng.gen_range(h / 4..=h / 2).max(1);
    let bw = rng.gen_range(w / 4..=w / 2).max(1);
    let by = rng.gen_range(0..=h - bh);
    let bx = rng.gen_range(0..=w - bw);
    let box_depth = near + rng.gen_range(0.3..1.0);
    let mut d = vec![0.0; h * w];
    for y in 0..h {
        // floor recedes toward the top of the frame
        let t = 1.0 - y as f64 / (h.max(2) - 1) as f64;
        for x in 0..w {
            let inside = y >= by && y < by + bh && x >= bx && x < bx + bw;
            d[y * w + x] = if inside { box_depth } else { near + (far - near) * t };
        }
    }
    d
}

fn render_image(rng: &mut ChaCha8Rng, depth: &[f64], h: usize, w: usize, scene: usize) -> RgbImage {
    let base = scene_palette(scene);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-0.02..0.02)).collect();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let shade = (1.05 - depth[i] / 9.0).clamp(0.05, 1.0) + noise[i];
        let px = base.map(|c| ((c * shade).clamp(0.0, 1.0) * 255.0).round() as u8);
        Rgb(px)
    })
}

/// Deterministic context vector for a scene, for the precomputed-condition
/// variant.
pub fn scene_vector(scene: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scene as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..CONTEXT_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Write images, 16-bit depth, listings and context vectors under `root`.
/// Returns the sample ids in listing order.
pub fn generate(root: &Path, spec: &SyntheticSpec, profile: &DatasetProfile) -> Result<Vec<String>> {
    if spec.samples == 0 || spec.num_scenes == 0 || spec.height < 4 || spec.width < 4 {
        return Err(Error::Config(
            "synthetic dataset needs samples, scenes and at least 4x4 frames".into(),
        ));
    }
    let mkdir = |p: PathBuf| fs::create_dir_all(&p).map_err(|e| Error::io(&p, e));
    mkdir(root.join("rgb"))?;
    mkdir(root.join("depth"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut listing = String::new();
    let mut unlabeled = String::new();
    let mut vectors = String::new();
    let mut ids = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let scene = i % spec.num_scenes;
        let (h, w) = (spec.height, spec.width);
        let depth = render_depth(&mut rng, h, w);
        let img = render_image(&mut rng, &depth, h, w, scene);
        let rgb_rel = format!("rgb/{i:04}.png");
        let depth_rel = format!("depth/{i:04}.png");
        let rgb_path = root.join(&rgb_rel);
        img.save(&rgb_path).map_err(|e| Error::Image {
            path: rgb_path,
            source: e,
        })?;
        let values: Vec<u16> = depth.iter().map(|d| profile.depth_to_png(*d)).collect();
        write_depth_png(&root.join(&depth_rel), h, w, &values)?;
        listing.push_str(&format!("{rgb_rel} {depth_rel} {scene}\n"));
        unlabeled.push_str(&format!("{rgb_rel} {depth_rel}\n"));
        let v = scene_vector(scene, spec.seed);
        vectors.push_str(&rgb_rel);
        for x in v {
            vectors.push_str(&format!(" {x}"));
        }
        vectors.push('\n');
        ids.push(rgb_rel);
    }
    let write = |name: &str, text: &str| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(TRAIN_LISTING, &listing)?;
    write(TEST_LISTING, &listing)?;
    if spec.unlabeled_listing {
        write(UNLABELED_LISTING, &unlabeled)?;
    }
    write(CONTEXT_VECTORS, &vectors)?;
    Ok(ids)
}

/// Read `id v_1 ... v_768` lines into a map keyed by sample id.
pub fn read_context_vectors(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split_whitespace();
        let Some(id) = cols.next() else { continue };
        if id.starts_with('#') {
            continue;
        }
        let vals = cols
            .map(|c| c.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != CONTEXT_DIM {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {CONTEXT_DIM} values, found {}", vals.len()),
            });
        }
        out.insert(id.to_string(), vals);
    }
    Ok(out)
}
