//! Dataset manifests.
//!
//! One record per line: `clear<TAB>depth[<TAB>hazy[<TAB>boxes]]`, paths
//! relative to the manifest's directory. Missing hazy images are synthesised
//! from the configured haze ranges; missing box files mean no boxes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hazeloop_core::haze::{self, HazeRanges};
use hazeloop_core::pipeline::{Dataset, Sample};
use hazeloop_core::rng::SeedTree;
use hazeloop_core::scene::{self, BoxAnn};
use hazeloop_core::tensor::Tensor;

use crate::ckpt::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::image_io;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub clear: PathBuf,
    pub depth: PathBuf,
    pub hazy: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
}

impl Record {
    /// Image id: the clear image's file stem.
    pub fn id(&self) -> String {
        self.clear
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<Record>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=4).contains(&cols.len()) || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::format(
                path,
                format!("line {}: expected 2 to 4 tab-separated paths, got {:?}", n + 1, line),
            ));
        }
        let p = |s: &str| base.join(s);
        out.push(Record {
            clear: p(cols[0]),
            depth: p(cols[1]),
            hazy: cols.get(2).map(|s| p(s)),
            boxes: cols.get(3).map(|s| p(s)),
        });
    }
    if out.is_empty() {
        return Err(Error::format(path, "manifest has no records"));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    parse_manifest(&text, path)
}

/// Parses `x,y,w,h` lines.
pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BoxAnn>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        match v[..] {
            [x, y, w, h] if v.iter().all(|c| c.is_finite()) && w > 0.0 && h > 0.0 => out.push(BoxAnn { x, y, w, h }),
            _ => return Err(Error::format(path, format!("line {}: expected x,y,w,h with w,h > 0", n + 1))),
        }
    }
    Ok(out)
}

pub fn format_boxes(boxes: &[BoxAnn]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    s
}

/// Loads every record. Records without a hazy image get haze drawn from
/// `ranges` with a stream keyed by the record index.
pub fn load_dataset(manifest: &Path, ranges: &HazeRanges, seeds: &SeedTree) -> Result<Dataset> {
    ranges.validate()?;
    let records = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let clear = image_io::read_image(&r.clear)?;
        let depth = image_io::read_depth(&r.depth)?;
        let hazy = match &r.hazy {
            Some(p) => image_io::read_image(p)?,
            None => {
                let params = ranges.sample(&mut seeds.child("manifest", i as u64).stream("haze"));
                haze::synthesize_haze(&clear, &depth, &params)?
            }
        };
        let boxes = match &r.boxes {
            Some(p) => {
                let bytes = read_bytes(p)?;
                parse_boxes(&String::from_utf8_lossy(&bytes), p)?
            }
            None => Vec::new(),
        };
        samples.push(Sample::new(r.id(), clear, hazy, depth, boxes).map_err(|e| match e {
            hazeloop_core::Error::Input(m) | hazeloop_core::Error::NonFinite(m) => Error::format(&r.clear, m),
            other => other.into(),
        })?);
    }
    Ok(Dataset::new(samples))
}

fn seg_mask_image(clear: &Tensor) -> Tensor {
    let labels = scene::seg_labels(clear);
    let (_, h, w) = clear.chw();
    Tensor::from_fn(&[3, h, w], |i| labels[i % (h * w)] as f64)
}

/// Writes every sample under `out_dir` and a manifest listing them:
/// `clear/`, `depth/`, `hazy/` and ground truth under `gt/` (box CSV and a
/// segmentation mask image). Returns the manifest path.
pub fn write_dataset(out_dir: &Path, data: &Dataset) -> Result<PathBuf> {
    let mut manifest = String::new();
    for s in &data.samples {
        let id = &s.id;
        let clear = format!("clear/{id}.png");
        let depth = format!("depth/{id}.pgm");
        let hazy = format!("hazy/{id}.png");
        let boxes = format!("gt/{id}.boxes.csv");
        image_io::write_image(&out_dir.join(&clear), &s.clear)?;
        image_io::write_depth(&out_dir.join(&depth), &s.depth)?;
        image_io::write_image(&out_dir.join(&hazy), &s.hazy)?;
        write_bytes(&out_dir.join(&boxes), format_boxes(&s.boxes).as_bytes())?;
        image_io::write_image(&out_dir.join(format!("gt/{id}.seg.png")), &seg_mask_image(&s.clear))?;
        let _ = writeln!(manifest, "{clear}\t{depth}\t{hazy}\t{boxes}");
    }
    let path = out_dir.join("manifest.tsv");
    write_bytes(&path, manifest.as_bytes())?;
    Ok(path)
}
