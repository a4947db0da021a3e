//! Split listings and lazy sample loading.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rayon::prelude::*;

use crate::data::png::{read_depth_png, read_rgb, DepthPng};
use crate::data::profile::{DatasetProfile, Sizing};
use crate::error::{Error, Result};
use crate::head::DepthMap;
use crate::latent::{normalize_image, ImageTensor, INPUT_MULTIPLE};
use crate::metrics::{build_mask, Crop, ValidityMask};

/// One loaded training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    pub id: String,
    pub image: ImageTensor,
    /// Absent for predict-only inputs.
    pub gt_depth: Option<DepthMap>,
    /// Depth-range validity; the evaluation crop is applied later.
    pub mask: ValidityMask,
    pub scene_index: Option<usize>,
}

impl DepthSample {
    pub fn new(
        id: String,
        image: ImageTensor,
        gt_depth: Option<DepthMap>,
        mask: ValidityMask,
        scene_index: Option<usize>,
    ) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        if let Some(g) = &gt_depth {
            if (g.height, g.width) != (h, w) {
                return Err(Error::Sample {
                    id,
                    msg: format!("image is {h}x{w} but depth is {}x{}", g.height, g.width),
                });
            }
        }
        if (mask.height, mask.width) != (h, w) {
            return Err(Error::Sample {
                id,
                msg: "mask dimensions differ from image".into(),
            });
        }
        Ok(Self {
            id,
            image,
            gt_depth,
            mask,
            scene_index,
        })
    }
}

/// A parsed listing line. Paths are relative to the data root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub line: usize,
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
    pub scene_index: Option<usize>,
}

impl SplitEntry {
    pub fn id(&self) -> String {
        self.image.to_string_lossy().into_owned()
    }
}

/// Parse `image_path [depth_path [scene_index]]` lines. Blank lines and
/// `#` comments are skipped.
pub fn parse_listing(text: &str, source: &Path) -> Result<Vec<SplitEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = body.split_whitespace().collect();
        if cols.len() > 3 {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line,
                msg: format!("expected at most 3 columns, found {}", cols.len()),
            });
        }
        let scene_index = match cols.get(2) {
            Some(s) => Some(s.parse::<usize>().map_err(|_| Error::Parse {
                path: source.to_path_buf(),
                line,
                msg: format!("scene index {s:?} is not a non-negative integer"),
            })?),
            None => None,
        };
        out.push(SplitEntry {
            line,
            image: PathBuf::from(cols[0]),
            depth: cols.get(1).map(PathBuf::from),
            scene_index,
        });
    }
    Ok(out)
}

/// Lazily loads the samples of one split.
#[derive(Debug, Clone)]
pub struct SplitLoader {
    root: PathBuf,
    profile: DatasetProfile,
    sizing: Sizing,
    entries: Vec<SplitEntry>,
}

/// Open a listing. A relative listing path that does not exist as given is
/// looked up under `root`.
pub fn load_split(listing: &Path, root: &Path, profile: &DatasetProfile, sizing: Sizing) -> Result<SplitLoader> {
    profile.validate()?;
    let path = if listing.is_relative() && !listing.exists() {
        root.join(listing)
    } else {
        listing.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries = parse_listing(&text, &path)?;
    Ok(SplitLoader {
        root: root.to_path_buf(),
        profile: profile.clone(),
        sizing,
        entries,
    })
}

impl SplitLoader {
    pub fn from_entries(root: &Path, profile: &DatasetProfile, sizing: Sizing, entries: Vec<SplitEntry>) -> Self {
        Self {
            root: root.to_path_buf(),
            profile: profile.clone(),
            sizing,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SplitEntry] {
        &self.entries
    }

    pub fn profile(&self) -> &DatasetProfile {
        &self.profile
    }

    pub fn has_scene_labels(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.scene_index.is_some())
    }

    pub fn load(&self, index: usize) -> Result<DepthSample> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Input(format!("sample index {index} out of range")))?;
        let id = entry.id();
        self.load_entry(entry).map_err(|e| match e {
            Error::Sample { .. } => e,
            other => Error::Sample {
                id: id.clone(),
                msg: other.to_string(),
            },
        })
    }

    fn load_entry(&self, entry: &SplitEntry) -> Result<DepthSample> {
        let rgb = read_rgb(&self.root.join(&entry.image))?;
        let depth = match &entry.depth {
            Some(p) => Some(read_depth_png(&self.root.join(p))?),
            None => None,
        };
        if let Some(d) = &depth {
            if (d.height, d.width) != (rgb.height() as usize, rgb.width() as usize) {
                return Err(Error::Data(format!(
                    "image is {}x{} but depth PNG is {}x{}",
                    rgb.height(),
                    rgb.width(),
                    d.height,
                    d.width
                )));
            }
        }
        let (rgb, depth) = apply_sizing(rgb, depth, self.sizing)?;
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let image = normalize_image(rgb.as_raw(), 3, h, w)?;
        let (gt_depth, mask) = match depth {
            Some(d) => {
                let map = DepthMap::new(h, w, d.values.iter().map(|v| self.profile.depth_from_png(*v)).collect())?;
                let mask = build_mask(&map, self.profile.d_min, self.profile.cap, Crop::None)?;
                (Some(map), mask)
            }
            None => (None, ValidityMask::all(h, w)),
        };
        DepthSample::new(entry.id(), image, gt_depth, mask, entry.scene_index)
    }

    /// Samples in listing order.
    pub fn iter(&self) -> impl Iterator<Item = Result<DepthSample>> + '_ {
        (0..self.len()).map(move |i| self.load(i))
    }

    /// Load `indices` on up to `workers` threads. Output order follows
    /// `indices`, whatever thread finished first.
    pub fn load_many(&self, indices: &[usize], workers: usize) -> Vec<Result<DepthSample>> {
        if workers <= 1 {
            return indices.iter().map(|i| self.load(*i)).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(|| indices.par_iter().map(|i| self.load(*i)).collect()),
            Err(_) => indices.iter().map(|i| self.load(*i)).collect(),
        }
    }
}

/// A single RGB file brought to the sizing policy, for prediction.
pub fn load_image(path: &Path, sizing: Sizing) -> Result<ImageTensor> {
    let (rgb, _) = apply_sizing(read_rgb(path)?, None, sizing)?;
    normalize_image(rgb.as_raw(), 3, rgb.height() as usize, rgb.width() as usize)
}

/// Crop window `(y0, x0, h, w)` bringing a frame to the sizing policy.
fn crop_box(h: usize, w: usize, sizing: Sizing) -> Result<(usize, usize, usize, usize)> {
    let centered = |th: usize, tw: usize| ((h - th) / 2, (w - tw) / 2, th, tw);
    match sizing {
        Sizing::Floor32 => {
            let th = h / INPUT_MULTIPLE * INPUT_MULTIPLE;
            let tw = w / INPUT_MULTIPLE * INPUT_MULTIPLE;
            if th == 0 || tw == 0 {
                return Err(Error::Data(format!("frame {h}x{w} is smaller than {INPUT_MULTIPLE}")));
            }
            Ok(centered(th, tw))
        }
        Sizing::CenterCrop { height, width } => {
            if height > h || width > w {
                return Err(Error::Data(format!(
                    "frame {h}x{w} is smaller than crop {height}x{width}"
                )));
            }
            Ok(centered(height, width))
        }
        Sizing::Resize { height, width } => {
            // largest window of the target aspect ratio
            let (th, tw) = if w * height > h * width {
                (h, ((h * width) as f64 / height as f64).round() as usize)
            } else {
                (((w * height) as f64 / width as f64).round() as usize, w)
            };
            Ok(centered(th.clamp(1, h), tw.clamp(1, w)))
        }
    }
}

fn apply_sizing(rgb: RgbImage, depth: Option<DepthPng>, sizing: Sizing) -> Result<(RgbImage, Option<DepthPng>)> {
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    let (y0, x0, ch, cw) = crop_box(h, w, sizing)?;
    let rgb = imageops::crop_imm(&rgb, x0 as u32, y0 as u32, cw as u32, ch as u32).to_image();
    let depth = depth.map(|d| DepthPng {
        height: ch,
        width: cw,
        values: (0..ch * cw)
            .map(|i| d.values[(y0 + i / cw) * w + x0 + i % cw])
            .collect(),
    });
    match sizing {
        Sizing::Resize { height, width } if (height, width) != (ch, cw) => {
            let rgb = imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
            // nearest neighbour keeps invalid zeros from bleeding into valid depth
            let depth = depth.map(|d| DepthPng {
                height,
                width,
                values: (0..height * width)
                    .map(|i| {
                        let sy = ((i / width) * ch + ch / 2) / height;
                        let sx = ((i % width) * cw + cw / 2) / width;
                        d.values[sy.min(ch - 1) * cw + sx.min(cw - 1)]
                    })
                    .collect(),
            });
            Ok((rgb, depth))
        }
        _ => Ok((rgb, depth)),
    }
}
