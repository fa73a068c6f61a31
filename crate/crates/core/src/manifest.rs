//! Dataset inventories: loading, validation, stratified splitting, persistence.
//!
//! A manifest lists every image of a dataset with its class, optional
//! acquisition metadata, the split it belongs to, and whether it is an original
//! image or a flipped copy of one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column header of the manifest file format.
pub const MANIFEST_HEADER: [&str; 9] = [
    "sample_id",
    "path",
    "class",
    "magnification",
    "patient_id",
    "subtype",
    "split",
    "provenance",
    "parent_id",
];

/// Class vocabulary assumed when a manifest file does not declare one.
pub const DEFAULT_CLASSES: [&str; 2] = ["benign", "malignant"];

const CLASSES_PREFIX: &str = "# classes=";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    X40,
    X100,
    X200,
    X400,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [Self::X40, Self::X100, Self::X200, Self::X400];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::X40 => "40X",
            Self::X100 => "100X",
            Self::X200 => "200X",
            Self::X400 => "400X",
        }
    }
}

impl FromStr for Magnification {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let digits = s.trim_end_matches(['x', 'X', '×']);
        match digits {
            "40" => Ok(Self::X40),
            "100" => Ok(Self::X100),
            "200" => Ok(Self::X200),
            "400" => Ok(Self::X400),
            _ => Err(format!("invalid magnification `{s}`")),
        }
    }
}

/// One of the three mutually exclusive subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("invalid split `{s}` (expected train, val or test)")),
        }
    }
}

/// How a record came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Hflip,
    Vflip,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Hflip => "hflip",
            Provenance::Vflip => "vflip",
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "original" => Ok(Provenance::Original),
            "hflip" => Ok(Provenance::Hflip),
            "vflip" => Ok(Provenance::Vflip),
            _ => Err(format!("invalid provenance `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Image path relative to the dataset root.
    pub path: String,
    pub class_label: usize,
    pub magnification: Option<Magnification>,
    pub patient_id: Option<String>,
    pub subtype: Option<String>,
    pub split: Option<Split>,
    pub provenance: Provenance,
    /// Set iff `provenance` is not [`Provenance::Original`].
    pub parent_id: Option<String>,
}

impl SampleRecord {
    /// An unsplit original record with no optional metadata.
    pub fn original(sample_id: impl Into<String>, path: impl Into<String>, class_label: usize) -> Self {
        Self {
            sample_id: sample_id.into(),
            path: path.into(),
            class_label,
            magnification: None,
            patient_id: None,
            subtype: None,
            split: None,
            provenance: Provenance::Original,
            parent_id: None,
        }
    }
}

/// A validated dataset inventory.
///
/// Construction through [`Manifest::new`] guarantees unique sample ids, labels
/// inside the class vocabulary, parents that exist and are originals, and a
/// split that is either assigned to every record or to none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    classes: Vec<String>,
    records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(classes: Vec<String>, records: Vec<SampleRecord>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidManifest(format!(
                "need at least two classes, found {}",
                classes.len()
            )));
        }
        let mut names = HashSet::new();
        for c in &classes {
            if c.is_empty() || !names.insert(c.as_str()) {
                return Err(Error::InvalidManifest(format!("bad or repeated class name `{c}`")));
            }
        }

        let mut kinds: HashMap<&str, Provenance> = HashMap::with_capacity(records.len());
        for r in &records {
            if kinds.insert(r.sample_id.as_str(), r.provenance).is_some() {
                return Err(Error::DuplicateSample(r.sample_id.clone()));
            }
            if r.class_label >= classes.len() {
                return Err(Error::InvalidManifest(format!(
                    "sample `{}` has class label {} but only {} classes exist",
                    r.sample_id,
                    r.class_label,
                    classes.len()
                )));
            }
        }
        for r in &records {
            match (&r.provenance, &r.parent_id) {
                (Provenance::Original, None) => {}
                (Provenance::Original, Some(_)) => {
                    return Err(Error::InvalidManifest(format!(
                        "original sample `{}` must not have a parent_id",
                        r.sample_id
                    )))
                }
                (_, None) => {
                    return Err(Error::InvalidManifest(format!(
                        "augmented sample `{}` has no parent_id",
                        r.sample_id
                    )))
                }
                (_, Some(parent)) => {
                    if kinds.get(parent.as_str()) != Some(&Provenance::Original) {
                        return Err(Error::DanglingParent {
                            sample: r.sample_id.clone(),
                            parent: parent.clone(),
                        });
                    }
                }
            }
        }
        let assigned = records.iter().filter(|r| r.split.is_some()).count();
        if assigned != 0 && assigned != records.len() {
            return Err(Error::InvalidManifest(format!(
                "{assigned} of {} records have a split; a manifest must be fully split or fully unsplit",
                records.len()
            )));
        }
        Ok(Self { classes, records })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn is_split(&self) -> bool {
        self.records.first().is_some_and(|r| r.split.is_some())
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.class_label] += 1;
        }
        counts
    }

    /// Record counts indexed `[class][split]`.
    pub fn split_counts(&self) -> Vec<[usize; 3]> {
        let mut counts = vec![[0; 3]; self.classes.len()];
        for r in &self.records {
            if let Some(s) = r.split {
                counts[r.class_label][s.index()] += 1;
            }
        }
        counts
    }

    /// Per-split totals over all classes.
    pub fn split_totals(&self) -> [usize; 3] {
        let mut totals = [0; 3];
        for row in self.split_counts() {
            for (t, c) in totals.iter_mut().zip(row) {
                *t += c;
            }
        }
        totals
    }
}

/// Train/validation/test proportions as exact rationals summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatios {
    parts: [Ratio<u64>; 3],
}

impl SplitRatios {
    pub fn new(train: Ratio<u64>, val: Ratio<u64>, test: Ratio<u64>) -> Result<Self> {
        if train + val + test != Ratio::from_integer(1) {
            return Err(Error::InvalidRatios(format!(
                "{train} + {val} + {test} does not equal 1"
            )));
        }
        Ok(Self {
            parts: [train, val, test],
        })
    }

    /// Proportions `a:b:c`, normalized by their sum.
    pub fn from_parts(a: Ratio<u64>, b: Ratio<u64>, c: Ratio<u64>) -> Result<Self> {
        let total = a + b + c;
        if total == Ratio::from_integer(0) {
            return Err(Error::InvalidRatios("all parts are zero".into()));
        }
        Self::new(a / total, b / total, c / total)
    }

    pub fn get(&self, split: Split) -> Ratio<u64> {
        self.parts[split.index()]
    }

    /// Largest-remainder apportionment of `n` items.
    ///
    /// Each split receives the floor of its exact quota; the leftover units go
    /// to the largest fractional remainders, ties resolved toward train, then
    /// val.
    pub fn quotas(&self, n: usize) -> [usize; 3] {
        let n = n as u64;
        let exact = self.parts.map(|r| r * Ratio::from_integer(n));
        let mut counts = exact.map(|q| q.to_integer());
        let mut leftover = n - counts.iter().sum::<u64>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| exact[b].fract().cmp(&exact[a].fract()).then(a.cmp(&b)));
        for i in order {
            if leftover == 0 {
                break;
            }
            counts[i] += 1;
            leftover -= 1;
        }
        counts.map(|c| c as usize)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.parts[0], self.parts[1], self.parts[2])
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    /// Parses `a:b:c` where each part is an integer, a decimal or a fraction.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidRatios(format!("`{s}` is not of the form a:b:c")));
        }
        let mut parsed = [Ratio::from_integer(0); 3];
        for (slot, p) in parsed.iter_mut().zip(&parts) {
            *slot = parse_rational(p).ok_or_else(|| Error::InvalidRatios(format!("bad part `{p}` in `{s}`")))?;
        }
        Self::from_parts(parsed[0], parsed[1], parsed[2])
    }
}

/// Parses `7`, `0.25` or `1/4` into an exact non-negative rational.
pub fn parse_rational(s: &str) -> Option<Ratio<u64>> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num: u64 = num.trim().parse().ok()?;
        let den: u64 = den.trim().parse().ok()?;
        return (den != 0).then(|| Ratio::new(num, den));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let den = 10u64.pow(frac.len() as u32);
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some(Ratio::from_integer(int) + Ratio::new(frac, den))
}

/// Assigns every record of an unsplit, all-original manifest to a split.
///
/// Within each class the split sizes are the [`SplitRatios::quotas`] of the
/// class size; which records land where is decided by a `seed`-driven
/// shuffle of the class's records in sample_id order, so the result does not
/// depend on the row order of the input.
pub fn stratified_split(m: &Manifest, ratios: &SplitRatios, seed: u64) -> Result<Manifest> {
    if m.is_split() {
        return Err(Error::InvalidManifest("manifest already has splits assigned".into()));
    }
    if let Some(r) = m.records.iter().find(|r| r.provenance != Provenance::Original) {
        return Err(Error::InvalidManifest(format!(
            "cannot split augmented record `{}`; split before augmenting",
            r.sample_id
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m.classes.len()];
    for (i, r) in m.records.iter().enumerate() {
        by_class[r.class_label].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(m.classes[c].clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Train; m.records.len()];
    for members in &mut by_class {
        members.sort_by(|&a, &b| m.records[a].sample_id.cmp(&m.records[b].sample_id));
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.quotas(members.len());
        for (pos, &idx) in members.iter().enumerate() {
            assignment[idx] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    let records = m
        .records
        .iter()
        .zip(assignment)
        .map(|(r, s)| SampleRecord {
            split: Some(s),
            ..r.clone()
        })
        .collect();
    Ok(Manifest {
        classes: m.classes.clone(),
        records,
    })
}

fn opt(field: &str) -> Option<String> {
    (!field.is_empty()).then(|| field.to_string())
}

/// Parses manifest file contents. `origin` names the source in error messages.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Manifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };

    let (classes, body, line_offset) = match text.strip_prefix(CLASSES_PREFIX) {
        Some(rest) => {
            let (first, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let classes: Vec<String> = first.trim_end_matches('\r').split(',').map(str::to_string).collect();
            (classes, body, 1)
        }
        None => (DEFAULT_CLASSES.map(String::from).to_vec(), text, 0),
    };
    let class_ids: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(body.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(line_offset + 1, e.to_string()))?
        .clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(parse_err(
            line_offset + 1,
            format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line + line_offset, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize) + line_offset;
        let field = |i: usize| row.get(i).unwrap_or("");
        if field(0).is_empty() {
            return Err(parse_err(line, "empty sample_id".into()));
        }
        let class_label = *class_ids.get(field(2)).ok_or_else(|| Error::UnknownClass(field(2).to_string()))?;
        let magnification = match field(3) {
            "" => None,
            s => Some(s.parse().map_err(|e| parse_err(line, e))?),
        };
        let split = match field(6) {
            "" => None,
            s => Some(s.parse().map_err(|e| parse_err(line, e))?),
        };
        let provenance = field(7).parse().map_err(|e| parse_err(line, e))?;
        records.push(SampleRecord {
            sample_id: field(0).to_string(),
            path: field(1).to_string(),
            class_label,
            magnification,
            patient_id: opt(field(4)),
            subtype: opt(field(5)),
            split,
            provenance,
            parent_id: opt(field(8)),
        });
    }
    Manifest::new(classes, records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Serializes a manifest. A `# classes=` line is emitted only when the
/// vocabulary differs from [`DEFAULT_CLASSES`].
pub fn render_manifest(m: &Manifest) -> String {
    let mut out = Vec::new();
    if m.classes.iter().ne(DEFAULT_CLASSES.iter()) {
        out.extend_from_slice(CLASSES_PREFIX.as_bytes());
        out.extend_from_slice(m.classes.join(",").as_bytes());
        out.push(b'\n');
    }
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut out);
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &m.records {
            w.write_record([
                r.sample_id.as_str(),
                r.path.as_str(),
                m.classes[r.class_label].as_str(),
                r.magnification.map_or("", Magnification::as_str),
                r.patient_id.as_deref().unwrap_or(""),
                r.subtype.as_deref().unwrap_or(""),
                r.split.map_or("", Split::as_str),
                r.provenance.as_str(),
                r.parent_id.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    String::from_utf8(out).expect("manifest fields are UTF-8")
}

pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_manifest(m)).map_err(|e| Error::io(path, e))
}
