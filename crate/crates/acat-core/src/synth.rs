//! Synthetic lesion volumes with region-level ground truth.
//!
//! Images are low-contrast by construction: a smoothly varying background
//! inside an elliptical boundary, with darker discs standing in for lesions.
//! Every sample carries its class, the affected region(s) of a 3x2 grid and
//! an exact per-slice binary mask, so localisation metrics have ground truth
//! to score against.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{self, Prng};
use crate::tensor::{Result, Tensor, TensorError};

/// Row band of the region grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Band {
    Anterior,
    Middle,
    Posterior,
}

/// Lateral half of the region grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Side {
    Left,
    Right,
}

/// One of the six tiles: three row bands by two sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegionLabel {
    pub band: Band,
    pub side: Side,
}

impl RegionLabel {
    pub fn all() -> [RegionLabel; 6] {
        let bands = [Band::Anterior, Band::Middle, Band::Posterior];
        let sides = [Side::Left, Side::Right];
        let mut out = [RegionLabel { band: Band::Anterior, side: Side::Left }; 6];
        for (i, &band) in bands.iter().enumerate() {
            for (j, &side) in sides.iter().enumerate() {
                out[i * 2 + j] = RegionLabel { band, side };
            }
        }
        out
    }

    /// Stable index in 0..6, row-major over the grid.
    pub fn index(&self) -> usize {
        let row = match self.band {
            Band::Anterior => 0,
            Band::Middle => 1,
            Band::Posterior => 2,
        };
        let col = match self.side {
            Side::Left => 0,
            Side::Right => 1,
        };
        row * 2 + col
    }

    pub fn name(&self) -> String {
        let row = match self.band {
            Band::Anterior => "anterior",
            Band::Middle => "middle",
            Band::Posterior => "posterior",
        };
        let col = match self.side {
            Side::Left => "left",
            Side::Right => "right",
        };
        format!("{row}-{col}")
    }
}

/// Volume-level class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ClassLabel {
    None,
    Left,
    Right,
    Both,
}

impl ClassLabel {
    pub const COUNT: usize = 4;

    pub fn index(&self) -> usize {
        match self {
            ClassLabel::None => 0,
            ClassLabel::Left => 1,
            ClassLabel::Right => 2,
            ClassLabel::Both => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        match i {
            0 => Some(ClassLabel::None),
            1 => Some(ClassLabel::Left),
            2 => Some(ClassLabel::Right),
            3 => Some(ClassLabel::Both),
            _ => None,
        }
    }
}

/// Lesion size tier; tiers map to disjoint quartiles of the radius range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SizeTier {
    T1,
    T2,
    T3,
    T4,
}

impl SizeTier {
    pub const ALL: [SizeTier; 4] = [SizeTier::T1, SizeTier::T2, SizeTier::T3, SizeTier::T4];

    pub fn index(&self) -> usize {
        match self {
            SizeTier::T1 => 0,
            SizeTier::T2 => 1,
            SizeTier::T3 => 2,
            SizeTier::T4 => 3,
        }
    }
}

/// Image plane extents, row-major (height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Geometry {
        Geometry { height, width }
    }

    fn row_bounds(&self) -> [usize; 4] {
        [0, self.height / 3, 2 * self.height / 3, self.height]
    }

    fn col_bounds(&self) -> [usize; 3] {
        [0, self.width / 2, self.width]
    }

    /// The tile containing pixel (y, x). Tiles are half-open, so boundary
    /// pixels belong to the lower-index tile.
    pub fn region_of(&self, y: usize, x: usize) -> Result<RegionLabel> {
        if y >= self.height || x >= self.width {
            return Err(TensorError::Invalid {
                op: "region_of",
                message: format!(
                    "pixel ({y}, {x}) outside {}x{} image",
                    self.height, self.width
                ),
            });
        }
        let rb = self.row_bounds();
        let band = if y < rb[1] {
            Band::Anterior
        } else if y < rb[2] {
            Band::Middle
        } else {
            Band::Posterior
        };
        let side = if x < self.col_bounds()[1] { Side::Left } else { Side::Right };
        Ok(RegionLabel { band, side })
    }

    /// Inclusive pixel ranges (y0, y1, x0, x1) of a tile, half-open.
    fn region_extent(&self, region: RegionLabel) -> (usize, usize, usize, usize) {
        let rb = self.row_bounds();
        let cb = self.col_bounds();
        let row = match region.band {
            Band::Anterior => 0,
            Band::Middle => 1,
            Band::Posterior => 2,
        };
        let col = match region.side {
            Side::Left => 0,
            Side::Right => 1,
        };
        (rb[row], rb[row + 1], cb[col], cb[col + 1])
    }
}

/// Per-slice binary lesion mask for one volume, row-major [slices, h, w].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(slices: usize, height: usize, width: usize) -> Mask {
        Mask { slices, height, width, data: vec![0; slices * height * width] }
    }

    pub fn at(&self, s: usize, y: usize, x: usize) -> bool {
        self.data[(s * self.height + y) * self.width + x] != 0
    }

    fn set(&mut self, s: usize, y: usize, x: usize) {
        self.data[(s * self.height + y) * self.width + x] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

/// One generated volume with its full ground truth.
#[derive(Debug, Clone)]
pub struct SynthSample {
    /// Intensities in [0,1], shape [slices, 1, h, w].
    pub volume: Tensor,
    pub label: ClassLabel,
    /// Affected regions; empty for class None, two entries for Both.
    pub regions: Vec<RegionLabel>,
    pub mask: Mask,
    /// Absent for class None.
    pub tier: Option<SizeTier>,
}

/// Everything the generator needs; a dataset is a pure function of this.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DatasetSpec {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    /// Probabilities for classes none/left/right/both, summing to 1.
    pub class_probs: [f32; 4],
    /// Probabilities for size tiers 1..4, summing to 1.
    pub tier_probs: [f32; 4],
    /// Cell size of the coarse noise grid that gets interpolated.
    pub noise_cell: usize,
    /// Noise standard deviation; values are clamped to twice this.
    pub noise_amp: f32,
    /// Lesion darkening magnitudes (low, high), both positive.
    pub delta_range: (f32, f32),
    pub base_intensity: f32,
    pub seed: u64,
}

impl DatasetSpec {
    /// The configuration the experiments run on: low-contrast lesions on
    /// 64x64x3 volumes, class mix dominated by single-sided cases with a
    /// rare both-sides class.
    pub fn standard(samples: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            samples,
            height: 64,
            width: 64,
            slices: 3,
            class_probs: [0.40, 0.30, 0.29, 0.01],
            tier_probs: [0.25, 0.25, 0.25, 0.25],
            noise_cell: 8,
            noise_amp: 0.005,
            delta_range: (0.10, 0.25),
            base_intensity: 0.55,
            seed,
        }
    }

    fn radius_range(&self) -> (f32, f32) {
        let m = if self.height < self.width { self.height } else { self.width } as f32;
        (0.04 * m + 1.0, 0.10 * m)
    }

    fn tier_radius_band(&self, tier: SizeTier) -> (f32, f32) {
        let (lo, hi) = self.radius_range();
        let q = (hi - lo) / 4.0;
        let i = tier.index() as f32;
        (lo + q * i, lo + q * (i + 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(TensorError::Invalid { op: "DatasetSpec::validate", message })
        };
        if self.samples == 0 {
            return fail("samples must be positive".into());
        }
        if self.slices == 0 {
            return fail("slices must be positive".into());
        }
        if self.height < 12 || self.width < 12 {
            return fail(format!("{}x{} image too small", self.height, self.width));
        }
        if self.noise_cell == 0 {
            return fail("noise_cell must be positive".into());
        }
        for (name, probs) in [("class_probs", &self.class_probs), ("tier_probs", &self.tier_probs)]
        {
            let mut sum = 0.0f32;
            for &p in probs.iter() {
                if !(0.0..=1.0).contains(&p) {
                    return fail(format!("{name} entries must lie in [0,1]"));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return fail(format!("{name} sums to {sum}, expected 1"));
            }
        }
        let (dlo, dhi) = self.delta_range;
        if !(dlo > 0.0 && dhi >= dlo) {
            return fail("delta_range must satisfy 0 < low <= high".into());
        }
        if !(self.noise_amp > 0.0) {
            return fail("noise_amp must be positive".into());
        }
        // Lesion pixels must stay darker than any background pixel even in
        // the worst clamped-noise configuration.
        if dlo <= 4.0 * self.noise_amp {
            return fail(format!(
                "delta low {dlo} must exceed four times noise_amp {} to keep lesions darker than background",
                self.noise_amp
            ));
        }
        if self.base_intensity + 2.0 * self.noise_amp > 1.0
            || self.base_intensity - 2.0 * self.noise_amp - dhi < 0.0
        {
            return fail("base_intensity leaves no headroom for noise and lesions".into());
        }
        // Every region must admit at least one placement of the largest
        // lesion.
        let geom = Geometry::new(self.height, self.width);
        let (r_lo, r_hi) = self.radius_range();
        if r_lo >= r_hi {
            return fail(format!(
                "no feasible lesion placement: radius range ({r_lo}, {r_hi}) collapsed at {}x{}",
                self.height, self.width
            ));
        }
        for region in RegionLabel::all() {
            if valid_centers(geom, region, r_hi).is_empty() {
                return fail(format!(
                    "no valid placement for radius {r_hi} in region {}",
                    region.name()
                ));
            }
        }
        Ok(())
    }
}

/// 70/15/15 split of 0..n.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled 70/15/15 partition of 0..n.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed, "split", 0);
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut r, 0..=i);
        order.swap(i, j);
    }
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let val_end = n_train + n_val;
    Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..val_end].to_vec(),
        test: order[val_end..].to_vec(),
    }
}

const EXTERIOR_INTENSITY: f32 = 0.05;

/// Pixels inside the skull ellipse shrunk by `margin`.
fn inside_ellipse(geom: Geometry, y: f32, x: f32, margin: f32) -> bool {
    let cy = (geom.height as f32 - 1.0) / 2.0;
    let cx = (geom.width as f32 - 1.0) / 2.0;
    let ay = geom.height as f32 / 2.0 - 1.0 - margin;
    let ax = geom.width as f32 / 2.0 - 1.0 - margin;
    if ay <= 0.0 || ax <= 0.0 {
        return false;
    }
    let dy = (y - cy) / ay;
    let dx = (x - cx) / ax;
    dy * dy + dx * dx <= 1.0
}

/// Centers that keep a lesion of radius `r` entirely inside both the
/// region tile and the skull interior.
fn valid_centers(geom: Geometry, region: RegionLabel, r: f32) -> Vec<(usize, usize)> {
    let (y0, y1, x0, x1) = geom.region_extent(region);
    let margin = r;
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let fy = y as f32;
            let fx = x as f32;
            if fy - margin < y0 as f32
                || fy + margin >= y1 as f32
                || fx - margin < x0 as f32
                || fx + margin >= x1 as f32
            {
                continue;
            }
            if inside_ellipse(geom, fy, fx, r + 1.0) {
                out.push((y, x));
            }
        }
    }
    out
}

fn categorical(probs: &[f32], r: &mut Prng) -> usize {
    let u: f32 = rand::Rng::random_range(r, 0.0f32..1.0);
    let mut acc = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct Lesion {
    region: RegionLabel,
    center: (usize, usize),
    radius: f32,
    slice_factors: Vec<f32>,
    delta: f32,
}

fn draw_lesion(
    spec: &DatasetSpec,
    geom: Geometry,
    side: Side,
    tier: SizeTier,
    r: &mut Prng,
) -> Result<Lesion> {
    let band = match rand::Rng::random_range(r, 0..3usize) {
        0 => Band::Anterior,
        1 => Band::Middle,
        _ => Band::Posterior,
    };
    let region = RegionLabel { band, side };
    let (rlo, rhi) = spec.tier_radius_band(tier);
    let radius: f32 = rand::Rng::random_range(r, rlo..rhi);
    let centers = valid_centers(geom, region, radius);
    if centers.is_empty() {
        return Err(TensorError::Invalid {
            op: "generate_dataset",
            message: format!("no placement for radius {radius} in region {}", region.name()),
        });
    }
    let center = centers[rand::Rng::random_range(r, 0..centers.len())];
    let slice_factors: Vec<f32> = (0..spec.slices)
        .map(|_| rand::Rng::random_range(r, 0.9f32..1.0))
        .collect();
    let (dlo, dhi) = spec.delta_range;
    let delta: f32 = rand::Rng::random_range(r, dlo..dhi);
    Ok(Lesion { region, center, radius, slice_factors, delta })
}

/// Smoothed background noise for one slice: a coarse grid of clamped
/// normals, bilinearly interpolated to pixel resolution.
fn background_noise(spec: &DatasetSpec, r: &mut Prng) -> Vec<f32> {
    let gh = spec.height / spec.noise_cell + 2;
    let gw = spec.width / spec.noise_cell + 2;
    let clamp = 2.0 * spec.noise_amp;
    let grid: Vec<f32> = rng::normal_vec(gh * gw, 0.0, spec.noise_amp, r)
        .into_iter()
        .map(|v| v.clamp(-clamp, clamp))
        .collect();
    let cell = spec.noise_cell as f32;
    let mut out = vec![0.0f32; spec.height * spec.width];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let fy = y as f32 / cell;
            let fx = x as f32 / cell;
            let gy = fy as usize;
            let gx = fx as usize;
            let ty = fy - gy as f32;
            let tx = fx - gx as f32;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(gy, gx) * (1.0 - tx) + g(gy, gx + 1) * tx;
            let bot = g(gy + 1, gx) * (1.0 - tx) + g(gy + 1, gx + 1) * tx;
            out[y * spec.width + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn generate_sample(spec: &DatasetSpec, geom: Geometry, index: u64) -> Result<SynthSample> {
    let mut r = rng::substream(spec.seed, "sample", index);
    let label = ClassLabel::from_index(categorical(&spec.class_probs, &mut r)).unwrap();
    let tier = if label == ClassLabel::None {
        None
    } else {
        Some(SizeTier::ALL[categorical(&spec.tier_probs, &mut r)])
    };
    let mut lesions: Vec<Lesion> = Vec::new();
    if let Some(t) = tier {
        match label {
            ClassLabel::Left => lesions.push(draw_lesion(spec, geom, Side::Left, t, &mut r)?),
            ClassLabel::Right => lesions.push(draw_lesion(spec, geom, Side::Right, t, &mut r)?),
            ClassLabel::Both => {
                lesions.push(draw_lesion(spec, geom, Side::Left, t, &mut r)?);
                lesions.push(draw_lesion(spec, geom, Side::Right, t, &mut r)?);
            }
            ClassLabel::None => {}
        }
    }

    let mut mask = Mask::empty(spec.slices, spec.height, spec.width);
    let mut data = vec![0.0f32; spec.slices * spec.height * spec.width];
    for s in 0..spec.slices {
        let noise = background_noise(spec, &mut r);
        let plane = &mut data[s * spec.height * spec.width..(s + 1) * spec.height * spec.width];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let i = y * spec.width + x;
                plane[i] = if inside_ellipse(geom, y as f32, x as f32, 0.0) {
                    spec.base_intensity + noise[i]
                } else {
                    EXTERIOR_INTENSITY
                };
            }
        }
        for lesion in &lesions {
            let reff = lesion.radius * lesion.slice_factors[s];
            let (cy, cx) = lesion.center;
            let reach = reff as usize + 1;
            let ylo = cy.saturating_sub(reach);
            let yhi = (cy + reach + 1).min(spec.height);
            let xlo = cx.saturating_sub(reach);
            let xhi = (cx + reach + 1).min(spec.width);
            for y in ylo..yhi {
                for x in xlo..xhi {
                    let dy = y as f32 - cy as f32;
                    let dx = x as f32 - cx as f32;
                    if dy * dy + dx * dx <= reff * reff {
                        plane[y * spec.width + x] -= lesion.delta;
                        mask.set(s, y, x);
                    }
                }
            }
        }
    }
    let volume = Tensor::new(&[spec.slices, 1, spec.height, spec.width], data)?;
    let regions = lesions.iter().map(|l| l.region).collect();
    Ok(SynthSample { volume, label, regions, mask, tier })
}

/// Generate the full dataset plus its default 70/15/15 split. Both are
/// pure functions of the spec; per-sample substreams keep samples
/// independent of each other and of the sample count.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<SynthSample>, Split)> {
    spec.validate()?;
    let geom = Geometry::new(spec.height, spec.width);
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        samples.push(generate_sample(spec, geom, i as u64)?);
    }
    let split = split_indices(spec.samples, spec.seed);
    Ok((samples, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn tiny_spec(seed: u64) -> DatasetSpec {
        let mut spec = DatasetSpec::standard(8, seed);
        spec.height = 32;
        spec.width = 32;
        spec.slices = 2;
        spec
    }

    #[test]
    fn corner_pixel_is_anterior_left() {
        let geom = Geometry::new(64, 64);
        let r = geom.region_of(0, 0).unwrap();
        assert_eq!(r, RegionLabel { band: Band::Anterior, side: Side::Left });
    }

    #[test]
    fn tile_centers_map_to_their_tile() {
        let geom = Geometry::new(60, 40);
        for region in RegionLabel::all() {
            let (y0, y1, x0, x1) = geom.region_extent(region);
            let got = geom.region_of((y0 + y1) / 2, (x0 + x1) / 2).unwrap();
            assert_eq!(got, region);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let geom = Geometry::new(12, 12);
        assert!(geom.region_of(12, 0).is_err());
        assert!(geom.region_of(0, 12).is_err());
    }

    #[test]
    fn twelve_square_tiles_partition_all_pixels() {
        let geom = Geometry::new(12, 12);
        let mut counts = [0usize; 6];
        for y in 0..12 {
            for x in 0..12 {
                counts[geom.region_of(y, x).unwrap().index()] += 1;
            }
        }
        assert_eq!(counts, [24; 6]);
        assert_eq!(counts.iter().sum::<usize>(), 144);
    }

    #[test]
    fn all_none_spec_gives_empty_masks() {
        let mut spec = tiny_spec(3);
        spec.class_probs = [1.0, 0.0, 0.0, 0.0];
        let (samples, _) = generate_dataset(&spec).unwrap();
        for s in &samples {
            assert_eq!(s.label, ClassLabel::None);
            assert!(s.mask.is_empty());
            assert!(s.regions.is_empty());
            assert!(s.tier.is_none());
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let spec = tiny_spec(11);
        let (a, sa) = generate_dataset(&spec).unwrap();
        let (b, sb) = generate_dataset(&spec).unwrap();
        assert_eq!(sa, sb);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.mask, y.mask);
            let xv = x.volume.to_vec();
            let yv = y.volume.to_vec();
            assert!(xv.iter().zip(yv.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn different_seeds_differ() {
        let (a, _) = generate_dataset(&tiny_spec(1)).unwrap();
        let (b, _) = generate_dataset(&tiny_spec(2)).unwrap();
        let same = a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.volume.to_vec() == y.volume.to_vec());
        assert!(!same);
    }

    #[test]
    fn class_frequencies_track_spec_probabilities() {
        let mut spec = DatasetSpec::standard(1000, 7);
        spec.height = 32;
        spec.width = 32;
        spec.slices = 1;
        let (samples, _) = generate_dataset(&spec).unwrap();
        let mut counts = [0usize; 4];
        for s in &samples {
            counts[s.label.index()] += 1;
        }
        for (i, &p) in spec.class_probs.iter().enumerate() {
            let freq = counts[i] as f32 / samples.len() as f32;
            assert!(
                (freq - p).abs() <= 0.03,
                "class {i}: frequency {freq} vs spec {p}"
            );
        }
    }

    #[test]
    fn labels_and_masks_are_consistent() {
        let mut spec = tiny_spec(5);
        spec.samples = 40;
        spec.class_probs = [0.25, 0.25, 0.25, 0.25];
        let (samples, _) = generate_dataset(&spec).unwrap();
        let mut seen_both = false;
        for s in &samples {
            match s.label {
                ClassLabel::None => {
                    assert!(s.mask.is_empty());
                    assert!(s.regions.is_empty());
                }
                ClassLabel::Left => {
                    assert_eq!(s.regions.len(), 1);
                    assert_eq!(s.regions[0].side, Side::Left);
                }
                ClassLabel::Right => {
                    assert_eq!(s.regions.len(), 1);
                    assert_eq!(s.regions[0].side, Side::Right);
                }
                ClassLabel::Both => {
                    seen_both = true;
                    assert_eq!(s.regions.len(), 2);
                    let sides: Vec<Side> = s.regions.iter().map(|r| r.side).collect();
                    assert!(sides.contains(&Side::Left) && sides.contains(&Side::Right));
                }
            }
            if s.label != ClassLabel::None {
                for sl in 0..spec.slices {
                    let plane_has = (0..spec.height)
                        .any(|y| (0..spec.width).any(|x| s.mask.at(sl, y, x)));
                    assert!(plane_has, "positive sample with an empty slice mask");
                }
            }
        }
        assert!(seen_both, "both class never drawn; bump samples");
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        let (samples, _) = generate_dataset(&tiny_spec(9)).unwrap();
        for s in &samples {
            assert!(s.volume.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn lesions_are_darker_than_their_annulus() {
        let mut spec = DatasetSpec::standard(30, 13);
        spec.class_probs = [0.0, 0.4, 0.4, 0.2];
        let (samples, _) = generate_dataset(&spec).unwrap();
        let geom = Geometry::new(spec.height, spec.width);
        for sample in &samples {
            let v = sample.volume.to_vec();
            let plane = spec.height * spec.width;
            for s in 0..spec.slices {
                let at = |y: usize, x: usize| v[s * plane + y * spec.width + x];
                let mut lesion_sum = 0.0f64;
                let mut lesion_n = 0usize;
                let mut lesion_max = f32::MIN;
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        if sample.mask.at(s, y, x) {
                            lesion_sum += at(y, x) as f64;
                            lesion_n += 1;
                            lesion_max = lesion_max.max(at(y, x));
                        }
                    }
                }
                // Annulus: near any masked pixel, not masked itself, and
                // inside the skull so exterior pixels cannot leak in.
                let mut ann_sum = 0.0f64;
                let mut ann_n = 0usize;
                let mut ann_min = f32::MAX;
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        if sample.mask.at(s, y, x) || !inside_ellipse(geom, y as f32, x as f32, 0.0)
                        {
                            continue;
                        }
                        let near = (y.saturating_sub(3)..(y + 4).min(spec.height)).any(|yy| {
                            (x.saturating_sub(3)..(x + 4).min(spec.width))
                                .any(|xx| sample.mask.at(s, yy, xx))
                        });
                        if near {
                            ann_sum += at(y, x) as f64;
                            ann_n += 1;
                            ann_min = ann_min.min(at(y, x));
                        }
                    }
                }
                assert!(lesion_n > 0 && ann_n > 0);
                assert!(
                    lesion_max < ann_min,
                    "lesion max {lesion_max} not below annulus min {ann_min}"
                );
                assert!(lesion_sum / (lesion_n as f64) < ann_sum / (ann_n as f64));
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let split = split_indices(1000, 21);
        assert_eq!(split.train.len(), 700);
        assert_eq!(split.val.len(), 150);
        assert_eq!(split.test.len(), 150);
        let mut all = BTreeSet::new();
        for part in [&split.train, &split.val, &split.test] {
            for &i in part.iter() {
                assert!(all.insert(i), "index {i} appears twice");
            }
        }
        assert_eq!(all.len(), 1000);
        assert_eq!(*all.iter().next_back().unwrap(), 999);
    }

    #[test]
    fn split_depends_on_seed_but_not_rerun() {
        assert_eq!(split_indices(50, 4), split_indices(50, 4));
        assert_ne!(split_indices(50, 4).train, split_indices(50, 5).train);
    }

    #[test]
    fn oversized_lesions_fail_validation() {
        let mut spec = DatasetSpec::standard(4, 0);
        spec.height = 16;
        spec.width = 16;
        let err = generate_dataset(&spec).unwrap_err();
        assert!(format!("{err}").contains("placement"));
    }

    #[test]
    fn bad_probabilities_fail_validation() {
        let mut spec = tiny_spec(0);
        spec.class_probs = [0.5, 0.5, 0.5, 0.0];
        assert!(spec.validate().is_err());
        spec.class_probs = [1.2, -0.2, 0.0, 0.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tier_probabilities_control_lesion_size() {
        let mut small = DatasetSpec::standard(25, 17);
        small.class_probs = [0.0, 0.5, 0.5, 0.0];
        small.tier_probs = [1.0, 0.0, 0.0, 0.0];
        let mut large = small.clone();
        large.tier_probs = [0.0, 0.0, 0.0, 1.0];
        let (small_samples, _) = generate_dataset(&small).unwrap();
        let (large_samples, _) = generate_dataset(&large).unwrap();
        let max_small = small_samples.iter().map(|s| s.mask.count_ones()).max().unwrap();
        let min_large = large_samples.iter().map(|s| s.mask.count_ones()).min().unwrap();
        assert!(
            max_small < min_large,
            "tier-1 max {max_small} should stay under tier-4 min {min_large}"
        );
        for s in &small_samples {
            assert_eq!(s.tier, Some(SizeTier::T1));
        }
    }
}
