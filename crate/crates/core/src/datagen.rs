//! Synthetic slice-volume corpus: four shape classes rendered as grayscale
//! stacks with a shared per-volume style and per-slice jitter, so slices
//! within a volume correlate the way neighboring scan slices do. That
//! correlation is what makes the volume-wise split discipline meaningful.

use crate::imaging::Image;
use crate::seeds;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("class {class} has {have} volumes, generation needs at least {need}")]
    TooFewVolumes {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("side {0} is not a power of two")]
    SideNotPowerOfTwo(usize),
    #[error("slice range ({0}, {1}) invalid: need 2 <= lo <= hi")]
    BadSliceRange(usize, usize),
    #[error("split fractions must be positive and sum to 1")]
    BadFractions,
    #[error("majority boost must be >= 1")]
    BadBoost,
    #[error("class {class} has {have} volumes, splitting needs at least 3")]
    ClassTooSmallForSplit { class: usize, have: usize },
    #[error("class {class} has no training slices, weights undefined")]
    NoTrainSlices { class: usize },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("slice file {path}: {reason}")]
    SliceFile { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

pub fn class_letter(class: usize) -> char {
    (b'A' + class as u8) as char
}

pub fn class_from_letter(s: &str) -> Option<usize> {
    match s {
        "A" => Some(0),
        "B" => Some(1),
        "C" => Some(2),
        "D" => Some(3),
        _ => None,
    }
}

/// An ordered stack of same-class slices sharing one rendering style.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub class: usize,
    pub split: Split,
    pub slices: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pub side: usize,
    pub volumes: Vec<Volume>,
}

impl SliceDataset {
    pub fn volumes_in(&self, split: Split) -> impl Iterator<Item = &Volume> {
        self.volumes.iter().filter(move |v| v.split == split)
    }

    /// (image, class) pairs of every slice in a split, volume order.
    pub fn slices_in(&self, split: Split) -> Vec<(&Image, usize)> {
        self.volumes_in(split)
            .flat_map(|v| v.slices.iter().map(move |s| (s, v.class)))
            .collect()
    }

    pub fn total_slices(&self) -> usize {
        self.volumes.iter().map(|v| v.slices.len()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenConfig {
    pub volumes_per_class: [usize; NUM_CLASSES],
    /// Inclusive slice-count range for non-majority volumes.
    pub slice_range: (usize, usize),
    pub side: usize,
    pub seed: u64,
    /// Slice-count multiplier for class A, the majority class; the default
    /// puts it near 30% of all slices.
    pub majority_boost: f64,
    /// Per-volume Gaussian pixel-noise level range.
    pub noise_range: (f64, f64),
    pub split_fractions: (f64, f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            volumes_per_class: [8; NUM_CLASSES],
            slice_range: (10, 20),
            side: 16,
            seed: 0,
            majority_boost: 1.3,
            noise_range: (0.02, 0.08),
            split_fractions: (0.5, 0.25, 0.25),
        }
    }
}

/// Style shared by every slice of one volume.
struct VolumeStyle {
    background: f64,
    contrast: f64,
    /// Shape radius as a fraction of the half-side.
    scale: f64,
    noise: f64,
    /// Ellipse minor/major axis ratio.
    aspect: f64,
    /// Orientation of the oriented shapes.
    angle: f64,
    center_dx: f64,
    center_dy: f64,
    /// Bar/cross arm half-thickness as a fraction of the radius.
    thickness: f64,
    /// Ring inner radius as a fraction of the outer.
    ring_inner: f64,
}

impl VolumeStyle {
    fn draw(rng: &mut ChaCha8Rng, noise_range: (f64, f64)) -> Self {
        VolumeStyle {
            background: rng.gen_range(0.05..0.20),
            contrast: rng.gen_range(0.60..0.90),
            scale: rng.gen_range(0.60..0.85),
            noise: rng.gen_range(noise_range.0..=noise_range.1),
            aspect: rng.gen_range(0.55..0.95),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            center_dx: rng.gen_range(-0.06..0.06),
            center_dy: rng.gen_range(-0.06..0.06),
            thickness: rng.gen_range(0.16..0.24),
            ring_inner: rng.gen_range(0.45..0.65),
        }
    }
}

/// Unit-height box profile with a ~1px antialiased edge.
fn soft_box(v: f64, half_width: f64) -> f64 {
    (half_width - v.abs() + 0.5).clamp(0.0, 1.0)
}

/// Shape membership in [0,1] for a pixel at shape-local coordinates.
fn shape_mask(class: usize, x: f64, y: f64, radius: f64, style: &VolumeStyle, angle: f64) -> f64 {
    let (sin, cos) = angle.sin_cos();
    let xr = x * cos + y * sin;
    let yr = -x * sin + y * cos;
    match class {
        // Filled ellipse.
        0 => {
            let rx = radius;
            let ry = radius * style.aspect;
            let d = ((xr / rx) * (xr / rx) + (yr / ry) * (yr / ry)).sqrt();
            ((1.0 - d) * ry + 0.5).clamp(0.0, 1.0)
        }
        // Cross: two orthogonal bars.
        1 => {
            let t = style.thickness * radius;
            let a = soft_box(xr, radius) * soft_box(yr, t);
            let b = soft_box(xr, t) * soft_box(yr, radius);
            a.max(b)
        }
        // Ring: annulus around the mid radius.
        2 => {
            let r = (xr * xr + yr * yr).sqrt();
            let mid = radius * (1.0 + style.ring_inner) / 2.0;
            let half_width = radius * (1.0 - style.ring_inner) / 2.0;
            soft_box(r - mid, half_width)
        }
        // Single bar.
        3 => {
            let t = style.thickness * radius;
            soft_box(xr, radius) * soft_box(yr, t)
        }
        _ => unreachable!("class out of range"),
    }
}

fn render_slice(
    side: usize,
    class: usize,
    style: &VolumeStyle,
    contrast_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Image {
    // Per-slice jitter, drawn in a fixed order.
    let jitter_dx = rng.gen_range(-0.03..0.03) * side as f64;
    let jitter_dy = rng.gen_range(-0.03..0.03) * side as f64;
    let scale_mult = rng.gen_range(0.92..1.08);
    let angle_jitter = rng.gen_range(-0.08..0.08);
    let contrast_mult = rng.gen_range(0.90..1.10);

    let half = (side as f64 - 1.0) / 2.0;
    let cx = half + style.center_dx * side as f64 + jitter_dx;
    let cy = half + style.center_dy * side as f64 + jitter_dy;
    let radius = style.scale * side as f64 / 2.0 * scale_mult;
    let angle = style.angle + angle_jitter;
    let contrast = style.contrast * contrast_mult * contrast_factor;

    let mut img = Image::zeros(side);
    for r in 0..side {
        for c in 0..side {
            let x = c as f64 - cx;
            let y = r as f64 - cy;
            let m = shape_mask(class, x, y, radius, style, angle);
            let noise = style.noise * seeds::standard_normal(rng);
            let value = (style.background + contrast * m + noise).clamp(0.0, 1.0);
            img.set(r, c, value as f32);
        }
    }
    img
}

/// Volume-wise stratified split: within each class, volumes are shuffled by
/// the seed and dealt to train/validation/test by largest-remainder quotas.
pub fn stratified_split(
    classes: &[usize],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Split>, DatagenError> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DatagenError::BadFractions);
    }
    let max_class = classes.iter().copied().max().unwrap_or(0);
    let mut assignment = vec![Split::Train; classes.len()];
    for class in 0..=max_class {
        let mut members: Vec<usize> = (0..classes.len())
            .filter(|&i| classes[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(DatagenError::ClassTooSmallForSplit {
                class,
                have: members.len(),
            });
        }
        let mut rng = seeds::rng(seed, seeds::stream::DATASET, 1_000_000 + class as u64);
        members.shuffle(&mut rng);

        let n = members.len();
        let quotas = largest_remainder(n, [ft, fv, fe]);
        let mut cursor = 0;
        for (split, quota) in [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .zip(quotas)
        {
            for &idx in &members[cursor..cursor + quota] {
                assignment[idx] = split;
            }
            cursor += quota;
        }
    }
    Ok(assignment)
}

/// Splits `n` into integer quotas proportional to `fractions`: floors first,
/// then leftover units go to the largest fractional parts (earlier bucket on
/// ties).
fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        quotas[order[i % 3]] += 1;
    }
    [quotas[0], quotas[1], quotas[2]]
}

/// Generates the full dataset: volumes per class with styled slice stacks,
/// first/last slices at half contrast, majority class boosted in slice
/// count, then volume-wise stratified split.
pub fn generate(cfg: &GenConfig) -> Result<SliceDataset, DatagenError> {
    for (class, &have) in cfg.volumes_per_class.iter().enumerate() {
        if have < 4 {
            return Err(DatagenError::TooFewVolumes {
                class,
                have,
                need: 4,
            });
        }
    }
    if !cfg.side.is_power_of_two() {
        return Err(DatagenError::SideNotPowerOfTwo(cfg.side));
    }
    let (lo, hi) = cfg.slice_range;
    if lo < 2 || lo > hi {
        return Err(DatagenError::BadSliceRange(lo, hi));
    }
    if cfg.majority_boost < 1.0 {
        return Err(DatagenError::BadBoost);
    }
    if cfg.noise_range.0 < 0.0 || cfg.noise_range.0 > cfg.noise_range.1 {
        return Err(DatagenError::BadFractions);
    }

    let mut volumes = Vec::new();
    let mut vol_index: u64 = 0;
    for class in 0..NUM_CLASSES {
        for _ in 0..cfg.volumes_per_class[class] {
            let mut rng = seeds::rng(cfg.seed, seeds::stream::DATASET, vol_index);
            let base_count = rng.gen_range(lo..=hi);
            let count = if class == 0 {
                (base_count as f64 * cfg.majority_boost).round() as usize
            } else {
                base_count
            };
            let style = VolumeStyle::draw(&mut rng, cfg.noise_range);
            let slices: Vec<Image> = (0..count)
                .map(|i| {
                    // First and last slices carry half the shape contrast,
                    // standing in for near-empty boundary slices.
                    let edge = i == 0 || i + 1 == count;
                    let factor = if edge { 0.5 } else { 1.0 };
                    render_slice(cfg.side, class, &style, factor, &mut rng)
                })
                .collect();
            volumes.push(Volume {
                id: format!("v{vol_index:03}"),
                class,
                split: Split::Train,
                slices,
            });
            vol_index += 1;
        }
    }

    let classes: Vec<usize> = volumes.iter().map(|v| v.class).collect();
    let assignment = stratified_split(&classes, cfg.split_fractions, cfg.seed)?;
    for (volume, split) in volumes.iter_mut().zip(assignment) {
        volume.split = split;
    }

    Ok(SliceDataset {
        side: cfg.side,
        volumes,
    })
}

/// Per-class loss weights from training-split slice frequencies:
/// `w_c = N / (K * N_c)`, so every class's weighted frequency is N/K.
pub fn class_weights(dataset: &SliceDataset) -> Result<[f64; NUM_CLASSES], DatagenError> {
    let mut counts = [0usize; NUM_CLASSES];
    for v in dataset.volumes_in(Split::Train) {
        counts[v.class] += v.slices.len();
    }
    let total: usize = counts.iter().sum();
    let mut weights = [0.0; NUM_CLASSES];
    for (class, &n_c) in counts.iter().enumerate() {
        if n_c == 0 {
            return Err(DatagenError::NoTrainSlices { class });
        }
        weights[class] = total as f64 / (NUM_CLASSES as f64 * n_c as f64);
    }
    Ok(weights)
}

const MANIFEST_HEADER: &str = "dataset v1";

/// Writes `manifest.tsv` plus one raw little-endian f32 file per slice under
/// `slices/`. Running twice on the same dataset produces identical bytes.
pub fn write_dataset(dataset: &SliceDataset, dir: &Path) -> Result<(), DatagenError> {
    let slices_dir = dir.join("slices");
    fs::create_dir_all(&slices_dir)?;

    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    manifest.push_str(&format!("side\t{}\n", dataset.side));
    for v in &dataset.volumes {
        let files: Vec<String> = (0..v.slices.len())
            .map(|i| format!("{}_{i:03}.f32", v.id))
            .collect();
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            v.id,
            class_letter(v.class),
            v.split,
            files.join(",")
        ));
        for (file, slice) in files.iter().zip(&v.slices) {
            let mut bytes = Vec::with_capacity(slice.pixels().len() * 4);
            for p in slice.pixels() {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
            let mut f = fs::File::create(slices_dir.join(file))?;
            f.write_all(&bytes)?;
        }
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SliceDataset, DatagenError> {
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut lines = manifest.lines().enumerate();

    let (_, header) = lines.next().ok_or(DatagenError::Manifest {
        line: 1,
        reason: "empty manifest".into(),
    })?;
    if header != MANIFEST_HEADER {
        return Err(DatagenError::Manifest {
            line: 1,
            reason: format!("unexpected header `{header}`"),
        });
    }
    let (_, side_line) = lines.next().ok_or(DatagenError::Manifest {
        line: 2,
        reason: "missing side".into(),
    })?;
    let side: usize = side_line
        .strip_prefix("side\t")
        .and_then(|s| s.parse().ok())
        .ok_or(DatagenError::Manifest {
            line: 2,
            reason: format!("bad side line `{side_line}`"),
        })?;

    let mut volumes = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DatagenError::Manifest {
                line: lineno,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let class = class_from_letter(fields[1]).ok_or(DatagenError::Manifest {
            line: lineno,
            reason: format!("unknown class `{}`", fields[1]),
        })?;
        let split: Split = fields[2].parse().map_err(|e| DatagenError::Manifest {
            line: lineno,
            reason: e,
        })?;
        let mut slices = Vec::new();
        for file in fields[3].split(',') {
            let path = dir.join("slices").join(file);
            let bytes = fs::read(&path).map_err(|e| DatagenError::SliceFile {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            if bytes.len() != side * side * 4 {
                return Err(DatagenError::SliceFile {
                    path: path.display().to_string(),
                    reason: format!("expected {} bytes, found {}", side * side * 4, bytes.len()),
                });
            }
            let pixels: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            slices.push(Image::from_pixels(side, pixels).expect("length checked"));
        }
        volumes.push(Volume {
            id: fields[0].to_string(),
            class,
            split,
            slices,
        });
    }
    Ok(SliceDataset { side, volumes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            seed: 7,
            ..GenConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn written_datasets_are_byte_identical_across_runs() {
        let cfg = GenConfig {
            seed: 7,
            ..GenConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_dataset(&generate(&cfg).unwrap(), dir_a.path()).unwrap();
        write_dataset(&generate(&cfg).unwrap(), dir_b.path()).unwrap();

        let manifest_a = fs::read(dir_a.path().join("manifest.tsv")).unwrap();
        let manifest_b = fs::read(dir_b.path().join("manifest.tsv")).unwrap();
        assert_eq!(manifest_a, manifest_b);

        let mut files: Vec<String> = fs::read_dir(dir_a.path().join("slices"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert!(!files.is_empty());
        for f in files {
            let a = fs::read(dir_a.path().join("slices").join(&f)).unwrap();
            let b = fs::read(dir_b.path().join("slices").join(&f)).unwrap();
            assert_eq!(a, b, "slice file {f} differs");
        }
    }

    #[test]
    fn dataset_roundtrips_through_directory_format() {
        let cfg = GenConfig {
            volumes_per_class: [4, 4, 4, 4],
            slice_range: (4, 6),
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn majority_class_holds_near_thirty_percent_of_slices() {
        for seed in [0, 7] {
            let cfg = GenConfig {
                seed,
                ..GenConfig::default()
            };
            let ds = generate(&cfg).unwrap();
            let majority: usize = ds
                .volumes
                .iter()
                .filter(|v| v.class == 0)
                .map(|v| v.slices.len())
                .sum();
            let share = majority as f64 / ds.total_slices() as f64;
            assert!(
                (0.27..=0.33).contains(&share),
                "seed {seed}: majority share {share}"
            );
        }
    }

    #[test]
    fn split_is_volume_wise_and_stratified() {
        let ds = generate(&GenConfig::default()).unwrap();
        // 8 volumes per class at (0.5, 0.25, 0.25) split exactly 4/2/2.
        for class in 0..NUM_CLASSES {
            let mut counts = std::collections::HashMap::new();
            for v in ds.volumes.iter().filter(|v| v.class == class) {
                *counts.entry(v.split).or_insert(0usize) += 1;
            }
            assert_eq!(counts[&Split::Train], 4, "class {class}");
            assert_eq!(counts[&Split::Validation], 2, "class {class}");
            assert_eq!(counts[&Split::Test], 2, "class {class}");
        }
        // Slices never leave their volume's split: each split's slice count
        // equals the sum over its volumes.
        for split in [Split::Train, Split::Validation, Split::Test] {
            let by_volumes: usize = ds.volumes_in(split).map(|v| v.slices.len()).sum();
            assert_eq!(ds.slices_in(split).len(), by_volumes);
        }
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(8, [0.5, 0.25, 0.25]), [4, 2, 2]);
        assert_eq!(largest_remainder(9, [0.5, 0.25, 0.25]), [5, 2, 2]);
        assert_eq!(largest_remainder(3, [0.5, 0.25, 0.25]), [1, 1, 1]);
        assert_eq!(largest_remainder(10, [0.5, 0.25, 0.25]), [5, 3, 2]);
    }

    #[test]
    fn split_rejects_small_classes_and_bad_fractions() {
        let err = stratified_split(&[0, 0, 1], (0.5, 0.25, 0.25), 0).unwrap_err();
        assert!(matches!(
            err,
            DatagenError::ClassTooSmallForSplit { class: 0, have: 2 }
        ));
        assert!(matches!(
            stratified_split(&[0, 0, 0], (0.6, 0.25, 0.25), 0),
            Err(DatagenError::BadFractions)
        ));
        let err = generate(&GenConfig {
            volumes_per_class: [3, 8, 8, 8],
            ..GenConfig::default()
        })
        .unwrap_err();
        assert!(matches!(
            err,
            DatagenError::TooFewVolumes {
                class: 0,
                have: 3,
                ..
            }
        ));
    }

    #[test]
    fn rejects_bad_side_and_slice_range() {
        assert!(matches!(
            generate(&GenConfig {
                side: 17,
                ..GenConfig::default()
            }),
            Err(DatagenError::SideNotPowerOfTwo(17))
        ));
        assert!(matches!(
            generate(&GenConfig {
                slice_range: (5, 3),
                ..GenConfig::default()
            }),
            Err(DatagenError::BadSliceRange(5, 3))
        ));
    }

    #[test]
    fn class_weights_balance_weighted_frequencies() {
        let ds = generate(&GenConfig::default()).unwrap();
        let weights = class_weights(&ds).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for v in ds.volumes_in(Split::Train) {
            counts[v.class] += v.slices.len();
        }
        let total: usize = counts.iter().sum();
        for class in 0..NUM_CLASSES {
            let weighted = weights[class] * counts[class] as f64;
            assert_abs_diff_eq!(
                weighted,
                total as f64 / NUM_CLASSES as f64,
                epsilon = 1e-9 * total as f64
            );
        }
        // The majority class gets the smallest weight.
        assert!(weights[0] < weights[1]);
        assert!(weights[0] < weights[2]);
        assert!(weights[0] < weights[3]);
    }

    #[test]
    fn different_seed_changes_pixels_but_not_structure() {
        let a = generate(&GenConfig::default()).unwrap();
        let b = generate(&GenConfig {
            seed: 1,
            ..GenConfig::default()
        })
        .unwrap();
        assert_eq!(a.volumes.len(), b.volumes.len());
        assert_ne!(a, b);
        for (va, vb) in a.volumes.iter().zip(&b.volumes) {
            assert_eq!(va.class, vb.class);
        }
        // Structure invariants hold across seeds.
        for ds in [&a, &b] {
            for v in &ds.volumes {
                assert!(v.slices.iter().all(|s| s.side() == ds.side));
                assert!(v
                    .slices
                    .iter()
                    .all(|s| s.pixels().iter().all(|&p| (0.0..=1.0).contains(&p))));
            }
        }
    }

    #[test]
    fn class_mean_images_are_pairwise_distinct() {
        let ds = generate(&GenConfig::default()).unwrap();
        let n = ds.side * ds.side;
        let mut means = vec![vec![0.0f64; n]; NUM_CLASSES];
        let mut counts = [0usize; NUM_CLASSES];
        for v in &ds.volumes {
            for s in &v.slices {
                for (acc, &p) in means[v.class].iter_mut().zip(s.pixels()) {
                    *acc += p as f64;
                }
                counts[v.class] += 1;
            }
        }
        for (mean, count) in means.iter_mut().zip(counts) {
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
        }
        for i in 0..NUM_CLASSES {
            for j in (i + 1)..NUM_CLASSES {
                let l2: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(l2 > 0.3, "classes {i} and {j} too similar: L2 {l2}");
            }
        }
    }

    #[test]
    fn edge_slices_carry_half_contrast() {
        let cfg = GenConfig {
            noise_range: (0.0, 0.0),
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for v in &ds.volumes {
            let mass = |img: &Image| {
                let min = img.pixels().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
                img.pixels().iter().map(|&p| p as f64 - min).sum::<f64>()
            };
            let interior: Vec<f64> = v.slices[1..v.slices.len() - 1].iter().map(mass).collect();
            let interior_mean = interior.iter().sum::<f64>() / interior.len() as f64;
            for edge in [&v.slices[0], v.slices.last().unwrap()] {
                let ratio = mass(edge) / interior_mean;
                assert!(
                    ratio < 0.85,
                    "volume {}: edge mass ratio {ratio}",
                    v.id
                );
            }
        }
    }

    #[test]
    fn corrupt_manifest_reports_line() {
        let cfg = GenConfig {
            volumes_per_class: [4, 4, 4, 4],
            slice_range: (3, 4),
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();

        let path = dir.path().join("manifest.tsv");
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("\ttrain\t", "\tnowhere\t", 1);
        fs::write(&path, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        match err {
            DatagenError::Manifest { line, reason } => {
                assert!(line >= 3, "line {line}");
                assert!(reason.contains("nowhere"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn truncated_slice_file_is_rejected() {
        let cfg = GenConfig {
            volumes_per_class: [4, 4, 4, 4],
            slice_range: (3, 4),
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("slices").join("v000_000.f32");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DatagenError::SliceFile { .. }), "{err}");
    }
}
