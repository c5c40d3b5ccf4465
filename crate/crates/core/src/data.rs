//! Synthetic 6-channel plate/well dataset: generation, loading, statistics.
//!
//! Samples live on 384-well plates (16x24); border wells are never used.
//! Each well carries two imaging sites of one class. Every plate donates its
//! first two usable wells to controls: one untreated negative well, and one
//! positive well rendered with the texture of a known class. Per-class
//! signal is a localized oriented grating added on a per-channel Gaussian
//! background; channel 1 gets the widest per-image mean variance and channel
//! 4 the narrowest.
//!
//! On disk: one `manifest.csv` plus six 16-bit PGM planes per sample
//! (`images/<id>_c1.pgm` .. `_c6.pgm`, maxval 65535, big-endian).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;

pub const NUM_CHANNELS: usize = 6;
const PLATE_ROWS: usize = 16;
const PLATE_COLS: usize = 24;
const BASE_MEANS: [f64; NUM_CHANNELS] = [0.45, 0.40, 0.35, 0.30, 0.40, 0.35];
const PIXEL_NOISE_STD: f64 = 0.02;

/// Stable 64-bit FNV-1a, used for the deterministic id-hash split.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CellType {
    Huvec,
    Rpe,
    HepG2,
    U2os,
}

impl CellType {
    pub const ALL: [CellType; 4] = [CellType::Huvec, CellType::Rpe, CellType::HepG2, CellType::U2os];

    pub fn as_str(self) -> &'static str {
        match self {
            CellType::Huvec => "HUVEC",
            CellType::Rpe => "RPE",
            CellType::HepG2 => "HepG2",
            CellType::U2os => "U2OS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown cell type {s:?}")))
    }

    /// One-hot over the 4-type panel.
    pub fn onehot(self) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[Self::ALL.iter().position(|&c| c == self).expect("panel member")] = 1.0;
        v
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    None,
    Negative,
    Positive,
}

impl Control {
    pub fn as_str(self) -> &'static str {
        match self {
            Control::None => "none",
            Control::Negative => "negative",
            Control::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Control::None),
            "negative" => Ok(Control::Negative),
            "positive" => Ok(Control::Positive),
            other => Err(Error::Parse(format!("unknown control kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Unlabeled,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

/// Shape of the synthetic dataset.
///
/// `profile` lists `(samples_per_class, number_of_classes)` pairs; the class
/// counts must sum to `num_classes - junk_classes`. Junk classes occupy the
/// top of the label space and receive zero samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub junk_classes: usize,
    pub profile: Vec<(usize, usize)>,
    pub image_size: usize,
    pub channel_mean_variances: [f64; NUM_CHANNELS],
    pub seed: u64,
    pub unlabeled_fraction: f64,
    /// Class wells placed on one plate before opening the next; controls the
    /// plate count and thereby the number of control wells.
    pub class_wells_per_plate: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 10,
            junk_classes: 2,
            profile: vec![(40, 8)],
            image_size: 64,
            channel_mean_variances: [2.0e-3, 1.2e-3, 1.0e-3, 3.0e-4, 1.5e-3, 8.0e-4],
            seed: 0,
            unlabeled_fraction: 0.0,
            class_wells_per_plate: 32,
        }
    }
}

impl DatasetSpec {
    pub fn real_classes(&self) -> usize {
        self.num_classes - self.junk_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.junk_classes >= self.num_classes {
            return Err(Error::InvalidConfig("junk_classes must leave >= 1 real class".into()));
        }
        let profile_total: usize = self.profile.iter().map(|&(_, n)| n).sum();
        if profile_total != self.real_classes() {
            return Err(Error::InvalidConfig(format!(
                "profile covers {profile_total} classes but {} are real",
                self.real_classes()
            )));
        }
        if self.profile.iter().any(|&(count, n)| count == 0 || n == 0) {
            return Err(Error::InvalidConfig("profile entries must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("image_size must be >= 8".into()));
        }
        if self.channel_mean_variances.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("channel variances must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::InvalidConfig("unlabeled_fraction must be in [0, 1)".into()));
        }
        if self.class_wells_per_plate == 0 {
            return Err(Error::InvalidConfig("class_wells_per_plate must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-class sample counts, class id 0.. in profile order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.real_classes());
        for &(count, n) in &self.profile {
            out.extend(std::iter::repeat(count).take(n));
        }
        out
    }
}

/// One line of `manifest.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub plate: usize,
    pub well_row: usize,
    pub well_col: usize,
    pub site: usize,
    pub cell_type: CellType,
    pub class_label: Option<usize>,
    pub control: Control,
    pub split: Split,
}

/// A loaded sample: manifest metadata plus its `[0,1]`-valued planes.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub row: ManifestRow,
    pub planes: Tensor<f64>,
}

/// Per-class oriented-grating parameters, derived from the dataset seed.
#[derive(Debug, Clone)]
struct ClassTexture {
    orientation: f64,
    frequency: f64,
    phase: f64,
    amplitudes: [f64; NUM_CHANNELS],
}

fn class_texture(spec: &DatasetSpec, class: usize) -> ClassTexture {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xC1A5_5000 + class as u64));
    let orientation = rng.random_range(0.0..std::f64::consts::PI);
    let frequency = rng.random_range(2.0..5.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut amplitudes = [0.0; NUM_CHANNELS];
    for (c, a) in amplitudes.iter_mut().enumerate() {
        let boost = if c == class % NUM_CHANNELS { 0.18 } else { 0.0 };
        *a = 0.06 + rng.random_range(0.0..0.10) + boost;
    }
    ClassTexture { orientation, frequency, phase, amplitudes }
}

/// Render one sample's planes. Deterministic in `(spec.seed, row.id)`, so
/// generation order (or parallelism) cannot change pixel values. The texture
/// class is the manifest label: positive controls reuse their reagent
/// class's texture exactly, negative controls get background only.
pub fn render_sample(spec: &DatasetSpec, row: &ManifestRow) -> Tensor<f64> {
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, fnv1a64(&row.id)));
    let texture = row.class_label.map(|k| class_texture(spec, k));

    let mean_offsets: Vec<f64> = spec
        .channel_mean_variances
        .iter()
        .map(|&var| {
            if var > 0.0 {
                Normal::new(0.0, var.sqrt()).expect("finite std").sample(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    let blob_x = rng.random_range(0.3 * s as f64..0.7 * s as f64);
    let blob_y = rng.random_range(0.3 * s as f64..0.7 * s as f64);
    let sigma = s as f64 / 6.0;
    let noise = Normal::new(0.0, PIXEL_NOISE_STD).expect("finite std");

    let mut data = vec![0.0f64; NUM_CHANNELS * s * s];
    for c in 0..NUM_CHANNELS {
        let base = BASE_MEANS[c] + mean_offsets[c];
        for y in 0..s {
            for x in 0..s {
                let mut v = base + noise.sample(&mut rng);
                if let Some(t) = &texture {
                    let dx = x as f64 - blob_x;
                    let dy = y as f64 - blob_y;
                    let envelope = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let wave = std::f64::consts::TAU * t.frequency
                        / s as f64
                        * (dx * t.orientation.cos() + dy * t.orientation.sin())
                        + t.phase;
                    v += t.amplitudes[c] * envelope * (0.5 + 0.5 * wave.cos());
                }
                data[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![NUM_CHANNELS, s, s], data).expect("clamped values are finite")
}

fn split_for(id: &str, unlabeled_fraction: f64) -> Split {
    if fnv1a64(id) % 10 < 8 {
        let u = (fnv1a64(&format!("{id}:u")) % 10_000) as f64 / 10_000.0;
        if u < unlabeled_fraction {
            Split::Unlabeled
        } else {
            Split::Train
        }
    } else {
        Split::Val
    }
}

/// Lay out wells and sites for the whole dataset; pixel-free and cheap.
pub fn plan_manifest(spec: &DatasetSpec) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    // non-border wells in row-major order
    let usable: Vec<(usize, usize)> = (2..PLATE_ROWS)
        .flat_map(|r| (2..PLATE_COLS).map(move |c| (r, c)))
        .collect();
    let per_plate = spec.class_wells_per_plate.min(usable.len() - 2);

    // class wells: (class, sites_in_this_well)
    let mut class_wells: Vec<(usize, usize)> = Vec::new();
    for (class, count) in spec.class_counts().iter().enumerate() {
        let mut remaining = *count;
        while remaining > 0 {
            let sites = remaining.min(2);
            class_wells.push((class, sites));
            remaining -= sites;
        }
    }

    let n_plates = class_wells.len().div_ceil(per_plate);
    let mut rows = Vec::new();
    let emit = |rows: &mut Vec<ManifestRow>,
                spec: &DatasetSpec,
                plate: usize,
                slot: usize,
                sites: usize,
                class_label: Option<usize>,
                control: Control| {
        let (well_row, well_col) = usable[slot];
        let well_key = format!("p{plate:02}r{well_row:02}c{well_col:02}");
        let mut cell_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, fnv1a64(&well_key)));
        let cell_type = CellType::ALL[cell_rng.random_range(0..4)];
        for site in 1..=sites {
            let id = format!("{well_key}s{site}");
            let split = match control {
                Control::None => split_for(&id, spec.unlabeled_fraction),
                _ => Split::Test,
            };
            let class_label = match (control, split) {
                (Control::Negative, _) => None,
                (Control::None, Split::Unlabeled) => None,
                _ => class_label,
            };
            rows.push(ManifestRow {
                id,
                plate,
                well_row,
                well_col,
                site,
                cell_type,
                class_label,
                control,
                split,
            });
        }
    };

    let mut next_class_well = 0usize;
    for plate in 1..=n_plates {
        let reagent = (plate - 1) % spec.real_classes();
        emit(&mut rows, spec, plate, 0, 2, None, Control::Negative);
        emit(&mut rows, spec, plate, 1, 2, Some(reagent), Control::Positive);
        for slot in 0..per_plate {
            if next_class_well >= class_wells.len() {
                break;
            }
            let (class, sites) = class_wells[next_class_well];
            next_class_well += 1;
            emit(&mut rows, spec, plate, 2 + slot, sites, Some(class), Control::None);
        }
    }
    Ok(rows)
}

fn manifest_line(row: &ManifestRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        row.id,
        row.plate,
        row.well_row,
        row.well_col,
        row.site,
        row.cell_type.as_str(),
        row.class_label.map(|c| c.to_string()).unwrap_or_default(),
        row.control.as_str(),
        row.split.as_str()
    )
}

pub const MANIFEST_HEADER: &str = "id,plate,well_row,well_col,site,cell_type,class_label,control,split";

/// Generate the dataset under `dir`: `manifest.csv` plus all channel planes.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestRow>> {
    let rows = plan_manifest(spec)?;
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let s = spec.image_size;
    for row in &rows {
        manifest.push_str(&manifest_line(row));
        manifest.push('\n');
        let planes = render_sample(spec, row);
        for c in 0..NUM_CHANNELS {
            let plane = &planes.data()[c * s * s..(c + 1) * s * s];
            let pixels: Vec<u16> = plane.iter().map(|&v| (v * 65535.0).round() as u16).collect();
            pgm::write_pgm16(&images.join(format!("{}_c{}.pgm", row.id, c + 1)), s, s, &pixels)?;
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(rows)
}

/// Read and parse `manifest.csv` from a dataset directory.
pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Parse(format!("manifest: bad header {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse(format!("manifest line {}: expected 9 fields", n + 2)));
        }
        let parse_num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse(format!("manifest line {}: bad {what}", n + 2)))
        };
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            plate: parse_num(fields[1], "plate")?,
            well_row: parse_num(fields[2], "well_row")?,
            well_col: parse_num(fields[3], "well_col")?,
            site: parse_num(fields[4], "site")?,
            cell_type: CellType::parse(fields[5])?,
            class_label: if fields[6].is_empty() {
                None
            } else {
                Some(parse_num(fields[6], "class_label")?)
            },
            control: Control::parse(fields[7])?,
            split: Split::parse(fields[8])?,
        });
    }
    Ok(rows)
}

/// Load one sample's six planes, normalized to `[0,1]` by each file's maxval.
pub fn load_sample(dir: &Path, row: &ManifestRow) -> Result<ImageSample> {
    let images = dir.join("images");
    let mut data: Vec<f64> = Vec::new();
    let mut size: Option<usize> = None;
    for c in 1..=NUM_CHANNELS {
        let path = images.join(format!("{}_c{}.pgm", row.id, c));
        if !path.exists() {
            return Err(Error::MissingPlane { id: row.id.clone(), channel: c });
        }
        let plane = pgm::read_pgm(&path)?;
        if plane.width != plane.height {
            return Err(Error::Parse(format!("{}: plane must be square", path.display())));
        }
        match size {
            None => size = Some(plane.width),
            Some(s) if s == plane.width => {}
            Some(s) => {
                return Err(Error::Parse(format!(
                    "{}: plane size {} differs from channel 1 size {s}",
                    path.display(),
                    plane.width
                )));
            }
        }
        let maxval = plane.maxval as f64;
        data.extend(plane.pixels.iter().map(|&p| p as f64 / maxval));
    }
    let s = size.expect("six channels read");
    Ok(ImageSample { row: row.clone(), planes: Tensor::from_vec(vec![NUM_CHANNELS, s, s], data)? })
}

/// Load every sample listed in the manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let rows = load_manifest(dir)?;
    rows.iter().map(|r| load_sample(dir, r)).collect()
}

const HIST_BINS: usize = 20;

/// Dataset statistics: label histogram, control/split counts, per-channel
/// mean-pixel-value distribution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsReport {
    pub class_counts: BTreeMap<usize, usize>,
    pub control_counts: BTreeMap<&'static str, usize>,
    pub split_counts: BTreeMap<&'static str, usize>,
    pub channel_mean_variance: Vec<f64>,
    /// `[channel][bin]` histogram of per-image channel means over `[0,1]`.
    pub channel_mean_hist: Vec<Vec<usize>>,
    pub total: usize,
}

/// Compute statistics over every image in a dataset directory.
pub fn dataset_stats(dir: &Path) -> Result<StatsReport> {
    let rows = load_manifest(dir)?;
    let mut report = StatsReport {
        channel_mean_hist: vec![vec![0; HIST_BINS]; NUM_CHANNELS],
        channel_mean_variance: vec![0.0; NUM_CHANNELS],
        ..Default::default()
    };
    report.total = rows.len();
    if rows.is_empty() {
        return Ok(report);
    }
    let mut means: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); NUM_CHANNELS];
    for row in &rows {
        if let Some(label) = row.class_label {
            if row.control == Control::None {
                *report.class_counts.entry(label).or_insert(0) += 1;
            }
        }
        *report.control_counts.entry(row.control.as_str()).or_insert(0) += 1;
        *report.split_counts.entry(row.split.as_str()).or_insert(0) += 1;
        let sample = load_sample(dir, row)?;
        let plane_len = sample.planes.numel() / NUM_CHANNELS;
        for c in 0..NUM_CHANNELS {
            let plane = &sample.planes.data()[c * plane_len..(c + 1) * plane_len];
            let mean = plane.iter().sum::<f64>() / plane_len as f64;
            means[c].push(mean);
            let bin = ((mean * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            report.channel_mean_hist[c][bin] += 1;
        }
    }
    for (c, channel_means) in means.iter().enumerate() {
        let n = channel_means.len() as f64;
        let mu = channel_means.iter().sum::<f64>() / n;
        report.channel_mean_variance[c] =
            channel_means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n;
    }
    Ok(report)
}

/// Serialize a stats report as `section,key,value` CSV.
pub fn stats_csv(report: &StatsReport) -> String {
    let mut out = String::from("section,key,value\n");
    for (class, count) in &report.class_counts {
        out.push_str(&format!("class_count,{class},{count}\n"));
    }
    for (kind, count) in &report.control_counts {
        out.push_str(&format!("control_count,{kind},{count}\n"));
    }
    for (split, count) in &report.split_counts {
        out.push_str(&format!("split_count,{split},{count}\n"));
    }
    for (c, var) in report.channel_mean_variance.iter().enumerate() {
        out.push_str(&format!("channel_mean_var,channel{},{var:.9}\n", c + 1));
    }
    for (c, hist) in report.channel_mean_hist.iter().enumerate() {
        for (b, count) in hist.iter().enumerate() {
            out.push_str(&format!("channel_mean_hist,channel{}:bin{b:02},{count}\n", c + 1));
        }
    }
    out.push_str(&format!("total,images,{}\n", report.total));
    out
}
