//! Record and label input: Level-4 MAT parsing, the label manifest, and the
//! stratified train/test split.
//!
//! The challenge distributes each record as a Level-4 MAT container holding a
//! single numeric matrix named `val`, plus a `REFERENCE.csv` with one
//! `id,label` line per record (labels `N`, `A`, `O`, `~`).

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors from record parsing, manifest loading, and splitting.
#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("file ends before the declared header/payload ({0})")]
    TruncatedFile(String),
    #[error("unsupported MAT-4 element: {0}")]
    UnsupportedType(String),
    #[error("matrix name is not NUL-terminated within its declared length")]
    BadName,
    #[error("unknown label token {token:?} at line {line}")]
    BadLabel { line: usize, token: String },
    #[error("line {line} is not a single `id,label` pair")]
    MalformedLine { line: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("train size must be strictly between 0 and the manifest size")]
    BadSize,
    #[error("record {0:?} violates an invariant: {1}")]
    BadRecord(String, String),
}

/// The four rhythm classes, in confusion-matrix order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RhythmClass {
    NormalRhythm,
    AtrialFibrillation,
    OtherRhythm,
    Noise,
}

impl RhythmClass {
    pub const ALL: [RhythmClass; 4] = [
        RhythmClass::NormalRhythm,
        RhythmClass::AtrialFibrillation,
        RhythmClass::OtherRhythm,
        RhythmClass::Noise,
    ];

    /// Fixed index used for confusion matrices and one-hot targets.
    pub fn index(self) -> usize {
        match self {
            RhythmClass::NormalRhythm => 0,
            RhythmClass::AtrialFibrillation => 1,
            RhythmClass::OtherRhythm => 2,
            RhythmClass::Noise => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<RhythmClass> {
        RhythmClass::ALL.get(index).copied()
    }

    /// Single-character token used by the reference manifest.
    pub fn token(self) -> char {
        match self {
            RhythmClass::NormalRhythm => 'N',
            RhythmClass::AtrialFibrillation => 'A',
            RhythmClass::OtherRhythm => 'O',
            RhythmClass::Noise => '~',
        }
    }

    pub fn from_token(token: &str) -> Option<RhythmClass> {
        match token {
            "N" => Some(RhythmClass::NormalRhythm),
            "A" => Some(RhythmClass::AtrialFibrillation),
            "O" => Some(RhythmClass::OtherRhythm),
            "~" => Some(RhythmClass::Noise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RhythmClass::NormalRhythm => "Normal rhythm",
            RhythmClass::AtrialFibrillation => "Atrial fibrillation",
            RhythmClass::OtherRhythm => "Other rhythm",
            RhythmClass::Noise => "Noise",
        }
    }
}

impl fmt::Display for RhythmClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.token())
    }
}

/// One labeled single-lead ECG signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    /// Sampling rate in Hz.
    pub fs: f64,
    pub samples: Vec<f64>,
    pub label: Option<RhythmClass>,
}

impl EcgRecord {
    /// Builds a record, enforcing the non-empty / positive-rate invariants.
    pub fn new(
        id: impl Into<String>,
        fs: f64,
        samples: Vec<f64>,
        label: Option<RhythmClass>,
    ) -> Result<EcgRecord, RecordError> {
        let id = id.into();
        if samples.is_empty() {
            return Err(RecordError::BadRecord(id, "empty sample sequence".into()));
        }
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(RecordError::BadRecord(id, format!("bad sampling rate {fs}")));
        }
        Ok(EcgRecord { id, fs, samples, label })
    }

    /// Record duration in seconds.
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// Ordered list of `(record id, class)` pairs from a reference manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<(String, RhythmClass)>,
    /// Directory the record files live in, when known.
    pub source_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-class `(count, proportion)` in manifest class order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassBreakdown {
    pub counts: [usize; 4],
    pub proportions: [f64; 4],
    pub total: usize,
}

/// A train/test partition of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

// MOPT precision digit -> element width in bytes.
fn mat4_elem_size(precision: i32) -> Option<usize> {
    match precision {
        0 => Some(8), // f64
        1 => Some(4), // f32
        2 => Some(4), // i32
        3 => Some(2), // i16
        4 => Some(2), // u16
        5 => Some(1), // u8
        _ => None,
    }
}

/// Parses the first matrix of a Level-4 MAT file and returns its values in
/// storage order, converted to `f64`.
///
/// The header is five little-endian 32-bit integers (`MOPT`, rows, columns,
/// imaginary flag, name length) followed by a NUL-terminated name and the
/// packed numeric payload. The challenge files hold a single `1 x N` int16
/// matrix named `val`.
pub fn parse_mat4(bytes: &[u8]) -> Result<Vec<f64>, RecordError> {
    if bytes.len() < 20 {
        return Err(RecordError::TruncatedFile(format!(
            "{} bytes is shorter than the 20-byte header",
            bytes.len()
        )));
    }
    let word = |i: usize| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (mopt, rows, cols, imagf, namlen) = (word(0), word(1), word(2), word(3), word(4));

    if !(0..=9999).contains(&mopt) || mopt / 1000 != 0 {
        // Thousands digit selects the byte order; only 0 (little-endian IEEE)
        // is supported.
        return Err(RecordError::UnsupportedType(format!(
            "MOPT {mopt} does not describe a little-endian numeric matrix"
        )));
    }
    if (mopt / 100) % 10 != 0 || mopt % 10 != 0 {
        return Err(RecordError::UnsupportedType(format!(
            "MOPT {mopt}: only full numeric matrices are supported"
        )));
    }
    let elem_size = mat4_elem_size((mopt / 10) % 10).ok_or_else(|| {
        RecordError::UnsupportedType(format!("MOPT {mopt}: unknown precision digit"))
    })?;
    if imagf != 0 {
        return Err(RecordError::UnsupportedType(
            "complex matrices are not supported".into(),
        ));
    }
    if rows < 0 || cols < 0 || namlen <= 0 {
        return Err(RecordError::UnsupportedType(format!(
            "nonsensical header dimensions ({rows} x {cols}, name length {namlen})"
        )));
    }

    let namlen = namlen as usize;
    let name_end = 20usize.checked_add(namlen).ok_or(RecordError::BadName)?;
    if bytes.len() < name_end {
        return Err(RecordError::TruncatedFile(format!(
            "name field declares {namlen} bytes but only {} remain",
            bytes.len() - 20
        )));
    }
    if bytes[name_end - 1] != 0 {
        return Err(RecordError::BadName);
    }

    let count = (rows as usize) * (cols as usize);
    let payload = count * elem_size;
    let data = &bytes[name_end..];
    if data.len() < payload {
        return Err(RecordError::TruncatedFile(format!(
            "payload declares {payload} bytes but only {} remain",
            data.len()
        )));
    }

    let mut values = Vec::with_capacity(count);
    for chunk in data[..payload].chunks_exact(elem_size.max(1)) {
        let v = match (mopt / 10) % 10 {
            0 => f64::from_le_bytes(chunk.try_into().unwrap()),
            1 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            2 => i32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            3 => i16::from_le_bytes(chunk.try_into().unwrap()) as f64,
            4 => u16::from_le_bytes(chunk.try_into().unwrap()) as f64,
            5 => chunk[0] as f64,
            _ => unreachable!(),
        };
        values.push(v);
    }
    Ok(values)
}

/// Parses a `REFERENCE.csv`-style manifest: one `id,label` pair per line,
/// labels `N`, `A`, `O`, or `~`.
pub fn load_manifest(labels_text: &str) -> Result<DatasetManifest, RecordError> {
    let mut entries: Vec<(String, RhythmClass)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in labels_text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = line.split(',');
        let (id, token) = match (fields.next(), fields.next(), fields.next()) {
            (Some(id), Some(token), None) if !id.is_empty() => (id, token),
            _ => return Err(RecordError::MalformedLine { line: lineno }),
        };
        let class = RhythmClass::from_token(token).ok_or_else(|| RecordError::BadLabel {
            line: lineno,
            token: token.to_string(),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(RecordError::DuplicateId(id.to_string()));
        }
        entries.push((id.to_string(), class));
    }
    Ok(DatasetManifest { entries, source_dir: None })
}

/// Per-class counts and proportions of a manifest.
pub fn class_breakdown(manifest: &DatasetManifest) -> Result<ClassBreakdown, RecordError> {
    if manifest.is_empty() {
        return Err(RecordError::EmptyManifest);
    }
    let mut counts = [0usize; 4];
    for (_, class) in &manifest.entries {
        counts[class.index()] += 1;
    }
    let total = manifest.len();
    let proportions = counts.map(|c| c as f64 / total as f64);
    Ok(ClassBreakdown { counts, proportions, total })
}

/// Splits a manifest into `train_size` training records plus the remaining
/// test records, approximately preserving the class proportions.
///
/// Per-class train counts follow `round(train_size * proportion)` with the
/// rounding residual resolved in favor of the larger classes (largest
/// fractional remainder first), so the targets always sum to `train_size`
/// even when naive rounding would not. Membership within a class is a seeded
/// shuffle; the same seed always yields the same assignment.
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_size: usize,
    seed: u64,
) -> Result<SplitAssignment, RecordError> {
    if manifest.is_empty() {
        return Err(RecordError::EmptyManifest);
    }
    if train_size == 0 || train_size >= manifest.len() {
        return Err(RecordError::BadSize);
    }

    let breakdown = class_breakdown(manifest)?;
    let mut by_class: [Vec<&str>; 4] = Default::default();
    for (id, class) in &manifest.entries {
        by_class[class.index()].push(id);
    }

    // Largest-remainder apportionment of train_size across the classes.
    let exact: [f64; 4] =
        breakdown.proportions.map(|p| p * train_size as f64);
    let mut targets: [usize; 4] = exact.map(|e| e.floor() as usize);
    for k in 0..4 {
        targets[k] = targets[k].min(by_class[k].len());
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap()
            .then(breakdown.counts[b].cmp(&breakdown.counts[a]))
            .then(a.cmp(&b))
    });
    let mut remaining = train_size - targets.iter().sum::<usize>();
    while remaining > 0 {
        let mut placed = false;
        for &k in &order {
            if remaining == 0 {
                break;
            }
            if targets[k] < by_class[k].len() {
                targets[k] += 1;
                remaining -= 1;
                placed = true;
            }
        }
        if !placed {
            break;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for k in 0..4 {
        let mut ids = by_class[k].clone();
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            if i < targets[k] {
                train.insert(id.to_string());
            } else {
                test.insert(id.to_string());
            }
        }
    }
    Ok(SplitAssignment { train, test, seed })
}

/// Renders a split as the on-disk format: one `id<TAB>train|test` line per
/// manifest entry, in manifest order, LF endings.
pub fn render_split(manifest: &DatasetManifest, split: &SplitAssignment) -> String {
    let mut out = String::new();
    for (id, _) in &manifest.entries {
        let part = if split.train.contains(id) { "train" } else { "test" };
        out.push_str(id);
        out.push('\t');
        out.push_str(part);
        out.push('\n');
    }
    out
}

/// Parses the split file format written by [`render_split`].
pub fn parse_split(text: &str, seed: u64) -> Result<SplitAssignment, RecordError> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (id, part) = line
            .split_once('\t')
            .ok_or(RecordError::MalformedLine { line: lineno })?;
        let inserted = match part {
            "train" => train.insert(id.to_string()),
            "test" => test.insert(id.to_string()),
            _ => return Err(RecordError::MalformedLine { line: lineno }),
        };
        if !inserted || (train.contains(id) && test.contains(id)) {
            return Err(RecordError::DuplicateId(id.to_string()));
        }
    }
    Ok(SplitAssignment { train, test, seed })
}
