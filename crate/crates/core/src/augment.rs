//! Flip-based class balancing.
//!
//! Balancing happens after splitting and independently inside each split, so a
//! flipped copy always lives in the same split as its source image. For a
//! split with `n` minority and `N` majority originals the minority class is
//! topped up to `N`: first with horizontal mirrors, then with a seeded random
//! selection of vertical mirrors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageFormat};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Provenance, SampleRecord, Split};

pub const PLAN_HEADER: [&str; 4] = ["parent_id", "transform", "new_sample_id", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlipAxis {
    /// Mirror left-right: `(x, y) -> (W-1-x, y)`.
    Horizontal,
    /// Mirror top-bottom: `(x, y) -> (x, H-1-y)`.
    Vertical,
}

impl FlipAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            FlipAxis::Horizontal => "hflip",
            FlipAxis::Vertical => "vflip",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            FlipAxis::Horizontal => Provenance::Hflip,
            FlipAxis::Vertical => Provenance::Vflip,
        }
    }
}

impl FromStr for FlipAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hflip" => Ok(FlipAxis::Horizontal),
            "vflip" => Ok(FlipAxis::Vertical),
            _ => Err(format!("invalid transform `{s}` (expected hflip or vflip)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanEntry {
    pub parent_id: String,
    pub transform: FlipAxis,
    pub new_sample_id: String,
    pub split: Split,
}

impl PlanEntry {
    fn new(parent: &SampleRecord, transform: FlipAxis, split: Split) -> Self {
        Self {
            parent_id: parent.sample_id.clone(),
            transform,
            new_sample_id: flipped_id(&parent.sample_id, transform),
            split,
        }
    }
}

/// Flips to perform, ordered by `new_sample_id`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentationPlan {
    pub entries: Vec<PlanEntry>,
}

impl AugmentationPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Number of entries per split and transform, indexed `[split][0 = hflip, 1 = vflip]`.
    pub fn counts(&self) -> [[usize; 2]; 3] {
        let mut counts = [[0; 2]; 3];
        for e in &self.entries {
            counts[e.split.index()][(e.transform == FlipAxis::Vertical) as usize] += 1;
        }
        counts
    }

    /// Checks the plan against the manifest it will be applied to.
    pub fn validate(&self, m: &Manifest) -> Result<()> {
        let originals: HashMap<&str, &SampleRecord> = m
            .records()
            .iter()
            .filter(|r| r.provenance == Provenance::Original)
            .map(|r| (r.sample_id.as_str(), r))
            .collect();
        let existing: HashSet<&str> = m.records().iter().map(|r| r.sample_id.as_str()).collect();
        let mut pairs = HashSet::new();
        let mut new_ids = HashSet::new();
        for e in &self.entries {
            let parent = originals.get(e.parent_id.as_str()).ok_or_else(|| {
                Error::InvalidPlan(format!("parent `{}` is not an original record", e.parent_id))
            })?;
            if parent.split != Some(e.split) {
                return Err(Error::InvalidPlan(format!(
                    "entry `{}` targets split {} but its parent is in {}",
                    e.new_sample_id,
                    e.split,
                    parent.split.map_or("no split", Split::as_str)
                )));
            }
            if !pairs.insert((e.parent_id.as_str(), e.transform)) {
                return Err(Error::InvalidPlan(format!(
                    "`{}` is flipped with {} more than once",
                    e.parent_id,
                    e.transform.as_str()
                )));
            }
            if existing.contains(e.new_sample_id.as_str()) || !new_ids.insert(e.new_sample_id.as_str()) {
                return Err(Error::InvalidPlan(format!("sample id `{}` already taken", e.new_sample_id)));
            }
        }
        Ok(())
    }
}

pub fn flipped_id(parent_id: &str, transform: FlipAxis) -> String {
    format!("{parent_id}__{}", transform.as_str())
}

/// `dir/x.png` becomes `dir/x__hflip.png`.
pub fn flipped_path(parent_path: &str, transform: FlipAxis) -> String {
    let suffix = format!("__{}", transform.as_str());
    let file_start = parent_path.rfind('/').map_or(0, |i| i + 1);
    match parent_path[file_start..].rfind('.') {
        Some(dot) if dot > 0 => {
            let dot = file_start + dot;
            format!("{}{}{}", &parent_path[..dot], suffix, &parent_path[dot..])
        }
        _ => format!("{parent_path}{suffix}"),
    }
}

/// Plans the flips that equalize both classes inside every split.
///
/// Per split, with `n` minority and `N` majority originals and deficit
/// `d = N - n`:
/// - `d = 0`: nothing to do;
/// - `d <= n`: `d` seeded picks are horizontally flipped;
/// - `n < d <= 2n`: all `n` are horizontally flipped and `d - n` seeded picks
///   are vertically flipped;
/// - `d > 2n`: [`Error::InsufficientFlips`].
pub fn plan_balance(m: &Manifest, seed: u64) -> Result<AugmentationPlan> {
    if m.classes().len() != 2 {
        return Err(Error::NotBinary(m.classes().len()));
    }
    if !m.is_split() {
        return Err(Error::InvalidManifest("manifest must be split before balancing".into()));
    }
    if let Some(r) = m.records().iter().find(|r| r.provenance != Provenance::Original) {
        return Err(Error::InvalidManifest(format!(
            "manifest already contains augmented record `{}`",
            r.sample_id
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for split in Split::ALL {
        let mut members: [Vec<&SampleRecord>; 2] = [Vec::new(), Vec::new()];
        for r in m.records_in(split) {
            members[r.class_label].push(r);
        }
        let minority = usize::from(members[0].len() > members[1].len());
        let n = members[minority].len();
        let big = members[1 - minority].len();
        let deficit = big - n;
        if deficit == 0 {
            continue;
        }
        if deficit > 2 * n {
            return Err(Error::InsufficientFlips {
                split: split.to_string(),
                minority: n,
                majority: big,
            });
        }
        let pool = &mut members[minority];
        pool.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

        let pick = |rng: &mut ChaCha8Rng, k: usize| {
            let mut idx = index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        };
        if deficit <= n {
            for i in pick(&mut rng, deficit) {
                entries.push(PlanEntry::new(pool[i], FlipAxis::Horizontal, split));
            }
        } else {
            for parent in pool.iter() {
                entries.push(PlanEntry::new(parent, FlipAxis::Horizontal, split));
            }
            for i in pick(&mut rng, deficit - n) {
                entries.push(PlanEntry::new(pool[i], FlipAxis::Vertical, split));
            }
        }
    }
    entries.sort_by(|a, b| a.new_sample_id.cmp(&b.new_sample_id));
    Ok(AugmentationPlan { entries })
}

/// Mirrors an image along `axis`, keeping its dimensions and pixel format.
pub fn apply_flip(img: &DynamicImage, axis: FlipAxis) -> DynamicImage {
    match axis {
        FlipAxis::Horizontal => img.fliph(),
        FlipAxis::Vertical => img.flipv(),
    }
}

fn lossless_format(path: &Path) -> Result<ImageFormat> {
    match ImageFormat::from_path(path) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Bmp | ImageFormat::Tiff)) => Ok(f),
        _ => Err(Error::Encode {
            path: path.to_path_buf(),
            message: "destination must be a lossless format (png, bmp or tiff)".into(),
        }),
    }
}

/// Decodes `src`, flips it and writes the result losslessly to `dst`.
pub fn flip_file(src: &Path, dst: &Path, axis: FlipAxis) -> Result<()> {
    let format = lossless_format(dst)?;
    let bytes = fs::read(src).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingSource(src.to_path_buf()),
        _ => Error::io(src, e),
    })?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: src.to_path_buf(),
        message: e.to_string(),
    })?;
    let flipped = apply_flip(&img, axis);
    if let Some(dir) = dst.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    flipped.save_with_format(dst, format).map_err(|e| Error::Encode {
        path: dst.to_path_buf(),
        message: e.to_string(),
    })
}

/// The manifest that results from applying `plan`, without touching files.
///
/// Input records keep their order; new records follow, sorted by sample id.
pub fn augmented_manifest(plan: &AugmentationPlan, m: &Manifest) -> Result<Manifest> {
    plan.validate(m)?;
    let parents: HashMap<&str, &SampleRecord> =
        m.records().iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut added: Vec<SampleRecord> = plan
        .entries
        .iter()
        .map(|e| {
            let parent = parents[e.parent_id.as_str()];
            SampleRecord {
                sample_id: e.new_sample_id.clone(),
                path: flipped_path(&parent.path, e.transform),
                split: Some(e.split),
                provenance: e.transform.provenance(),
                parent_id: Some(parent.sample_id.clone()),
                ..parent.clone()
            }
        })
        .collect();
    added.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut records = m.records().to_vec();
    records.extend(added);
    Manifest::new(m.classes().to_vec(), records)
}

/// Writes every flipped image of `plan` and returns the extended manifest.
///
/// Source paths resolve against `src_dir`, new paths against `dst_dir`. All
/// sources are checked before anything is written. Individual write failures
/// do not stop the remaining flips; they are collected into
/// [`Error::PartialWrite`] together with the files that were written.
pub fn execute_plan(
    plan: &AugmentationPlan,
    m: &Manifest,
    src_dir: impl AsRef<Path>,
    dst_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let (src_dir, dst_dir) = (src_dir.as_ref(), dst_dir.as_ref());
    let out = augmented_manifest(plan, m)?;
    if plan.is_empty() {
        return Ok(out);
    }

    let paths: BTreeMap<&str, &str> = m.records().iter().map(|r| (r.sample_id.as_str(), r.path.as_str())).collect();
    let jobs: Vec<(PathBuf, PathBuf, FlipAxis)> = plan
        .entries
        .iter()
        .map(|e| {
            let parent_path = paths[e.parent_id.as_str()];
            (
                src_dir.join(parent_path),
                dst_dir.join(flipped_path(parent_path, e.transform)),
                e.transform,
            )
        })
        .collect();
    for (src, dst, _) in &jobs {
        if !src.is_file() {
            return Err(Error::MissingSource(src.clone()));
        }
        lossless_format(dst)?;
    }

    let results: Vec<(PathBuf, Result<()>)> = jobs
        .par_iter()
        .map(|(src, dst, axis)| (dst.clone(), flip_file(src, dst, *axis)))
        .collect();
    let mut written = Vec::new();
    let mut failures = Vec::new();
    for (dst, res) in results {
        match res {
            Ok(()) => written.push(dst),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::PartialWrite {
            failed: failures.len(),
            total: jobs.len(),
            first: failures.swap_remove(0),
            written,
        });
    }
    Ok(out)
}

/// True when, in every split, all classes have the same number of records.
pub fn is_balanced(m: &Manifest) -> bool {
    let counts = m.split_counts();
    Split::ALL
        .iter()
        .all(|s| counts.iter().all(|row| row[s.index()] == counts[0][s.index()]))
}

pub fn parse_plan(text: &str, origin: &str) -> Result<AugmentationPlan> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().ne(PLAN_HEADER) {
        return Err(parse_err(1, format!("expected header `{}`", PLAN_HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(i).unwrap_or("");
        entries.push(PlanEntry {
            parent_id: field(0).to_string(),
            transform: field(1).parse().map_err(|e| parse_err(line, e))?,
            new_sample_id: field(2).to_string(),
            split: field(3).parse().map_err(|e| parse_err(line, e))?,
        });
    }
    Ok(AugmentationPlan { entries })
}

pub fn render_plan(plan: &AugmentationPlan) -> String {
    let mut out = PLAN_HEADER.join(",");
    out.push('\n');
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for e in &plan.entries {
        w.write_record([
            e.parent_id.as_str(),
            e.transform.as_str(),
            e.new_sample_id.as_str(),
            e.split.as_str(),
        ])
        .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8"));
    out
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<AugmentationPlan> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_plan(&text, &path.display().to_string())
}

pub fn write_plan(plan: &AugmentationPlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_plan(plan)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::DEFAULT_CLASSES;
    use image::{Rgb, RgbImage};

    fn split_manifest(counts: [[usize; 3]; 2]) -> Manifest {
        let mut records = Vec::new();
        for (class, per_split) in counts.iter().enumerate() {
            for (s, &k) in Split::ALL.iter().zip(per_split) {
                for i in 0..k {
                    let id = format!("c{class}_{}_{i:04}", s.as_str());
                    let mut r = SampleRecord::original(id.clone(), format!("{id}.png"), class);
                    r.split = Some(*s);
                    records.push(r);
                }
            }
        }
        Manifest::new(DEFAULT_CLASSES.map(String::from).to_vec(), records).unwrap()
    }

    #[test]
    fn deficits_follow_hflip_then_vflip() {
        let m = split_manifest([[10, 4, 3], [25, 4, 5]]);
        let plan = plan_balance(&m, 9).unwrap();
        // train: n=10, N=25 -> 10 hflips + 5 vflips; val: balanced; test: n=3, N=5 -> 2 hflips.
        assert_eq!(plan.counts(), [[10, 5], [0, 0], [2, 0]]);
        let out = augmented_manifest(&plan, &m).unwrap();
        assert!(is_balanced(&out));
    }

    #[test]
    fn minority_can_be_either_class() {
        let m = split_manifest([[6, 2, 2], [3, 2, 2]]);
        let plan = plan_balance(&m, 1).unwrap();
        assert_eq!(plan.counts(), [[3, 0], [0, 0], [0, 0]]);
        assert!(plan.entries.iter().all(|e| e.parent_id.starts_with("c1_")));
    }

    #[test]
    fn balanced_manifest_yields_empty_plan() {
        let m = split_manifest([[5, 2, 3], [5, 2, 3]]);
        assert!(plan_balance(&m, 0).unwrap().is_empty());
    }

    #[test]
    fn too_large_deficit_is_an_error() {
        let m = split_manifest([[3, 1, 1], [10, 1, 1]]);
        assert!(matches!(
            plan_balance(&m, 0),
            Err(Error::InsufficientFlips { minority: 3, majority: 10, .. })
        ));
        // Exactly three times is still reachable.
        let m = split_manifest([[3, 1, 1], [9, 1, 1]]);
        assert_eq!(plan_balance(&m, 0).unwrap().counts()[0], [3, 3]);
    }

    #[test]
    fn needs_two_classes_and_split_manifest() {
        let records = vec![SampleRecord::original("a", "a.png", 0)];
        let unsplit = Manifest::new(DEFAULT_CLASSES.map(String::from).to_vec(), records).unwrap();
        assert!(matches!(plan_balance(&unsplit, 0), Err(Error::InvalidManifest(_))));

        let mut r = SampleRecord::original("a", "a.png", 2);
        r.split = Some(Split::Train);
        let three = Manifest::new(vec!["x".into(), "y".into(), "z".into()], vec![r]).unwrap();
        assert!(matches!(plan_balance(&three, 0), Err(Error::NotBinary(3))));
    }

    #[test]
    fn plan_is_seed_deterministic() {
        let m = split_manifest([[20, 5, 5], [50, 5, 5]]);
        assert_eq!(plan_balance(&m, 5).unwrap(), plan_balance(&m, 5).unwrap());
        let a = plan_balance(&m, 5).unwrap();
        let b = plan_balance(&m, 6).unwrap();
        assert_eq!(a.counts(), b.counts());
    }

    #[test]
    fn plan_validation_catches_leaks_and_duplicates() {
        let m = split_manifest([[2, 1, 1], [4, 1, 1]]);
        let mut plan = plan_balance(&m, 0).unwrap();
        plan.entries[0].split = Split::Test;
        assert!(matches!(plan.validate(&m), Err(Error::InvalidPlan(_))));

        let mut plan = plan_balance(&m, 0).unwrap();
        let dup = plan.entries[0].clone();
        plan.entries.push(dup);
        assert!(matches!(plan.validate(&m), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn flipped_paths() {
        assert_eq!(flipped_path("a/b/x.png", FlipAxis::Horizontal), "a/b/x__hflip.png");
        assert_eq!(flipped_path("x", FlipAxis::Vertical), "x__vflip");
        assert_eq!(flipped_path("dir.d/.hidden", FlipAxis::Vertical), "dir.d/.hidden__vflip");
    }

    #[test]
    fn two_by_two_index_mapping() {
        let (a, b, c, d) = (Rgb([1, 2, 3]), Rgb([4, 5, 6]), Rgb([7, 8, 9]), Rgb([10, 11, 12]));
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(0, 0, a);
        img.put_pixel(1, 0, b);
        img.put_pixel(0, 1, c);
        img.put_pixel(1, 1, d);
        let img = DynamicImage::ImageRgb8(img);

        let h = apply_flip(&img, FlipAxis::Horizontal).into_rgb8();
        assert_eq!([h[(0, 0)], h[(1, 0)], h[(0, 1)], h[(1, 1)]], [b, a, d, c]);
        let v = apply_flip(&img, FlipAxis::Vertical).into_rgb8();
        assert_eq!([v[(0, 0)], v[(1, 0)], v[(0, 1)], v[(1, 1)]], [c, d, a, b]);
    }

    #[test]
    fn one_pixel_is_a_fixed_point() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(1, 1, Rgb([9, 8, 7])));
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            assert_eq!(apply_flip(&img, axis), img);
        }
    }

    #[test]
    fn plan_file_round_trip() {
        let m = split_manifest([[3, 1, 1], [7, 2, 1]]);
        let plan = plan_balance(&m, 2).unwrap();
        assert_eq!(parse_plan(&render_plan(&plan), "p").unwrap(), plan);
        assert!(parse_plan("parent_id,transform,new_sample_id,split\na,rot90,b,train\n", "p").is_err());
    }
}
