//! 3D activity volumes: data model, synthetic phantoms, Poisson count
//! thinning, conditioning windows, dose normalization and file I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::rng;

/// Full-dose injected activity of the desk-scale phantoms (370 MBq).
pub const DEFAULT_DOSE_BQ: f64 = 3.7e8;
/// Count-fraction ladder used for training pairs and evaluation.
pub const FRACTION_LADDER: [f64; 6] = [0.01, 0.02, 0.05, 0.10, 0.25, 0.50];
/// Voxel size in mm, ordered `[x, y, z]`.
pub const DEFAULT_VOXEL_SIZE_MM: [f64; 3] = [1.67, 1.67, 2.89];

/// A 3D activity grid with acquisition metadata.
///
/// `data` is slice-major: index `(z * height + row) * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    width: usize,
    height: usize,
    slices: usize,
    data: Vec<f32>,
    pub voxel_size_mm: [f64; 3],
    pub dose_bq: f64,
    pub count_fraction: f64,
}

impl Volume3D {
    pub fn new(
        width: usize,
        height: usize,
        slices: usize,
        data: Vec<f32>,
        voxel_size_mm: [f64; 3],
        dose_bq: f64,
        count_fraction: f64,
    ) -> Result<Self> {
        ensure!(
            width > 0 && height > 0 && slices > 0,
            Argument,
            "volume dimensions must be positive (got {width}x{height}x{slices})"
        );
        ensure!(
            data.len() == width * height * slices,
            Argument,
            "volume data length {} does not match {width}x{height}x{slices}",
            data.len()
        );
        ensure!(
            voxel_size_mm.iter().all(|v| v.is_finite() && *v > 0.0),
            Argument,
            "voxel sizes must be positive, got {voxel_size_mm:?}"
        );
        ensure!(
            dose_bq.is_finite() && dose_bq > 0.0,
            Argument,
            "dose must be positive, got {dose_bq}"
        );
        ensure!(
            count_fraction > 0.0 && count_fraction <= 1.0,
            Argument,
            "count fraction must lie in (0, 1], got {count_fraction}"
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite voxel at index {i}")));
        }
        Ok(Self {
            width,
            height,
            slices,
            data,
            voxel_size_mm,
            dose_bq,
            count_fraction,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn slice_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn same_shape(&self, other: &Volume3D) -> bool {
        self.width == other.width && self.height == other.height && self.slices == other.slices
    }

    pub fn check_shape(&self, other: &Volume3D, what: &str) -> Result<()> {
        ensure!(
            self.same_shape(other),
            Argument,
            "{what}: shape mismatch {}x{}x{} vs {}x{}x{}",
            self.width,
            self.height,
            self.slices,
            other.width,
            other.height,
            other.slices
        );
        Ok(())
    }

    pub fn slice_data(&self, z: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    /// Slice `z` as a double-precision grid, multiplied by `scale`.
    pub fn slice_grid(&self, z: usize, scale: f64) -> Grid {
        let data = self
            .slice_data(z)
            .iter()
            .map(|&v| v as f64 * scale)
            .collect();
        Grid::from_vec(self.width, self.height, data).expect("slice length matches")
    }

    /// Copy of this volume's metadata with new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Volume3D> {
        Volume3D::new(
            self.width,
            self.height,
            self.slices,
            data,
            self.voxel_size_mm,
            self.dose_bq,
            self.count_fraction,
        )
    }

    pub fn total_activity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dose(&self) -> DoseInfo {
        DoseInfo {
            dose_bq: self.dose_bq,
            count_fraction: self.count_fraction,
        }
    }
}

/// Dose metadata carried alongside a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseInfo {
    pub dose_bq: f64,
    pub count_fraction: f64,
}

// ----------------------------------------------------------------- phantoms

/// An additive ellipsoid in normalized coordinates (`[-1, 1]` on each axis,
/// axis order `[x, y, z]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub activity: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut r2 = 0.0;
        for k in 0..3 {
            let d = (p[k] - self.center[k]) / self.radii[k];
            r2 += d * d;
        }
        r2 <= 1.0
    }
}

/// Recipe for a synthetic activity phantom.
///
/// Ellipsoid activities add on top of `background`; the sum is scaled by
/// `1 + axial_gradient * z` with `z` the normalized axial coordinate. The
/// seed perturbs each ellipsoid's center by up to `center_jitter` and its
/// activity by up to `activity_jitter` (relative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub background: f64,
    pub axial_gradient: f64,
    pub ellipsoids: Vec<Ellipsoid>,
    pub center_jitter: f64,
    pub activity_jitter: f64,
}

impl Default for PhantomSpec {
    /// A torso-like body with a warm organ, a hot region, a cold region and a
    /// low-contrast lesion (1.7x the surrounding body activity).
    fn default() -> Self {
        let e = |center: [f64; 3], radii: [f64; 3], activity: f64| Ellipsoid {
            center,
            radii,
            activity,
        };
        Self {
            background: 0.0,
            axial_gradient: 0.15,
            ellipsoids: vec![
                e([0.0, 0.0, 0.0], [0.85, 0.7, 0.95], 100.0),
                e([0.3, 0.15, -0.2], [0.35, 0.3, 0.4], 60.0),
                e([0.0, 0.0, 0.65], [0.3, 0.3, 0.22], 200.0),
                e([-0.35, -0.1, 0.1], [0.25, 0.3, 0.35], -60.0),
                e([-0.3, 0.35, -0.45], [0.12, 0.12, 0.15], 70.0),
            ],
            center_jitter: 0.05,
            activity_jitter: 0.1,
        }
    }
}

/// Voxel-center coordinate in `[-1, 1]`.
fn normalized(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

pub fn generate_phantom(seed: u64, width: usize, slices: usize, spec: &PhantomSpec) -> Result<Volume3D> {
    ensure!(
        width >= 8 && slices >= 8,
        Config,
        "phantom needs width and slices >= 8 (got {width}, {slices})"
    );
    ensure!(
        spec.axial_gradient.abs() < 1.0,
        Config,
        "axial gradient must lie in (-1, 1), got {}",
        spec.axial_gradient
    );
    ensure!(
        spec.background >= 0.0,
        Config,
        "background activity must be non-negative"
    );
    ensure!(
        (0.0..1.0).contains(&spec.activity_jitter) && spec.center_jitter >= 0.0,
        Config,
        "jitter amplitudes out of range"
    );
    for e in &spec.ellipsoids {
        ensure!(
            e.radii.iter().all(|r| *r > 0.0) && e.activity.is_finite(),
            Config,
            "ellipsoid radii must be positive: {e:?}"
        );
    }

    let mut rng = rng::stream(seed, 0);
    let ellipsoids: Vec<Ellipsoid> = spec
        .ellipsoids
        .iter()
        .map(|e| {
            let mut center = e.center;
            for c in &mut center {
                *c += spec.center_jitter * (2.0 * rng.random::<f64>() - 1.0);
            }
            let scale = 1.0 + spec.activity_jitter * (2.0 * rng.random::<f64>() - 1.0);
            Ellipsoid {
                center,
                radii: e.radii,
                activity: e.activity * scale,
            }
        })
        .collect();

    let height = width;
    let mut data = Vec::with_capacity(width * height * slices);
    for z in 0..slices {
        let zc = normalized(z, slices);
        let gradient = 1.0 + spec.axial_gradient * zc;
        for row in 0..height {
            let yc = normalized(row, height);
            for col in 0..width {
                let p = [normalized(col, width), yc, zc];
                let mut value = spec.background;
                for e in &ellipsoids {
                    if e.contains(p) {
                        value += e.activity;
                    }
                }
                if value < -1e-9 {
                    return Err(Error::Config(format!(
                        "overlapping ellipsoids give negative activity {value} at voxel (z={z}, row={row}, col={col})"
                    )));
                }
                data.push((value.max(0.0) * gradient) as f32);
            }
        }
    }
    Volume3D::new(
        width,
        height,
        slices,
        data,
        DEFAULT_VOXEL_SIZE_MM,
        DEFAULT_DOSE_BQ,
        1.0,
    )
}

// -------------------------------------------------------------- degradation

/// Poisson thinning to a count fraction.
///
/// Voxel values are read as expected counts at the input count level. Each
/// voxel draws `Poisson(fraction * value)` and is divided by `fraction`, so
/// the expected activity is unchanged while the noise grows as
/// `1 / fraction`.
pub fn degrade_counts(vol: &Volume3D, fraction: f64, seed: u64) -> Result<Volume3D> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        Argument,
        "count fraction must lie in (0, 1], got {fraction}"
    );
    ensure!(
        vol.data.iter().all(|v| *v >= 0.0),
        Argument,
        "cannot thin a volume with negative activity"
    );
    let mut rng = rng::stream(seed, 0);
    let data = vol
        .data
        .iter()
        .map(|&v| {
            let lambda = fraction * v as f64;
            if lambda <= 0.0 {
                return 0.0;
            }
            let counts: f64 = Poisson::new(lambda)
                .expect("positive finite rate")
                .sample(&mut rng);
            (counts / fraction) as f32
        })
        .collect();
    Volume3D::new(
        vol.width,
        vol.height,
        vol.slices,
        data,
        vol.voxel_size_mm,
        vol.dose_bq * fraction,
        vol.count_fraction * fraction,
    )
}

// ---------------------------------------------------------- slice windows

/// `n` consecutive slices centered on `center`, clamped at the volume ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceWindow {
    center: usize,
    width: usize,
    height: usize,
    indices: Vec<usize>,
    /// `n` slices of `height * width`, in ascending slice order.
    stack: Vec<f64>,
}

impl SliceWindow {
    pub fn center(&self) -> usize {
        self.center
    }

    pub fn n(&self) -> usize {
        self.indices.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn stack(&self) -> &[f64] {
        &self.stack
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.stack[k * n..(k + 1) * n]
    }

    pub fn center_channel(&self) -> &[f64] {
        self.channel(self.n() / 2)
    }

    /// Window with every voxel multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> SliceWindow {
        SliceWindow {
            stack: self.stack.iter().map(|v| v * scale).collect(),
            indices: self.indices.clone(),
            ..*self
        }
    }
}

/// Clamped slice indices `s - (n-1)/2 ..= s + (n-1)/2`.
pub fn window_indices(slices: usize, s: usize, n: usize) -> Result<Vec<usize>> {
    ensure!(n % 2 == 1, Config, "window width must be odd, got {n}");
    ensure!(s < slices, Argument, "slice {s} outside 0..{slices}");
    ensure!(
        n < 2 * slices,
        Config,
        "window width {n} exceeds 2 * {slices} - 1"
    );
    let half = (n / 2) as isize;
    Ok((-half..=half)
        .map(|d| (s as isize + d).clamp(0, slices as isize - 1) as usize)
        .collect())
}

pub fn extract_window(vol: &Volume3D, s: usize, n: usize) -> Result<SliceWindow> {
    let indices = window_indices(vol.slices, s, n)?;
    let mut stack = Vec::with_capacity(n * vol.slice_len());
    for &z in &indices {
        stack.extend(vol.slice_data(z).iter().map(|&v| v as f64));
    }
    Ok(SliceWindow {
        center: s,
        width: vol.width,
        height: vol.height,
        indices,
        stack,
    })
}

// ------------------------------------------------------------ normalization

/// Divide activity by the injected dose. Returns the scale for inversion.
pub fn normalize_activity(vol: &Volume3D) -> Result<(Volume3D, f64)> {
    ensure!(
        vol.dose_bq > 0.0,
        Argument,
        "cannot normalize by a zero dose"
    );
    let scale = vol.dose_bq;
    let data = vol
        .data
        .iter()
        .map(|&v| (v as f64 / scale) as f32)
        .collect();
    Ok((vol.with_data(data)?, scale))
}

pub fn denormalize_activity(vol: &Volume3D, scale: f64) -> Result<Volume3D> {
    let data = vol
        .data
        .iter()
        .map(|&v| (v as f64 * scale) as f32)
        .collect();
    vol.with_data(data)
}

// ---------------------------------------------------------------- file I/O

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    width: usize,
    height: usize,
    slices: usize,
    voxel_size_mm: [f64; 3],
    dose_bq: f64,
    count_fraction: f64,
}

/// Header and payload paths for a volume.
///
/// `path` may name either file of the pair or their common stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".vol.raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.vol.json")),
        PathBuf::from(format!("{stem}.vol.raw")),
    )
}

pub fn write_volume(vol: &Volume3D, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let (header_path, raw_path) = volume_paths(path);
    let header = VolumeHeader {
        width: vol.width,
        height: vol.height,
        slices: vol.slices,
        voxel_size_mm: vol.voxel_size_mm,
        dose_bq: vol.dose_bq,
        count_fraction: vol.count_fraction,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
    fs::write(&header_path, json + "\n")?;
    let mut raw = fs::File::create(&raw_path)?;
    raw.write_all(&payload_bytes(vol))?;
    Ok((header_path, raw_path))
}

/// The little-endian `f32` payload exactly as written to disk.
pub fn payload_bytes(vol: &Volume3D) -> Vec<u8> {
    vol.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let (header_path, raw_path) = volume_paths(path);
    let text = fs::read_to_string(&header_path)?;
    let header: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", header_path.display())))?;
    ensure!(
        header.width > 0 && header.height > 0 && header.slices > 0,
        Format,
        "{}: dimensions must be positive (width={}, height={}, slices={})",
        header_path.display(),
        header.width,
        header.height,
        header.slices
    );
    let bytes = fs::read(&raw_path)?;
    let expected = header.width * header.height * header.slices * 4;
    ensure!(
        bytes.len() == expected,
        Format,
        "{}: payload is {} bytes, header implies {expected}",
        raw_path.display(),
        bytes.len()
    );
    let mut data = Vec::with_capacity(expected / 4);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        ensure!(
            v.is_finite(),
            Format,
            "{}: non-finite value at byte offset {}",
            raw_path.display(),
            i * 4
        );
        ensure!(
            v >= 0.0,
            Format,
            "{}: negative activity {v} at byte offset {}",
            raw_path.display(),
            i * 4
        );
        data.push(v);
    }
    Volume3D::new(
        header.width,
        header.height,
        header.slices,
        data,
        header.voxel_size_mm,
        header.dose_bq,
        header.count_fraction,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", header_path.display())))
}

/// Binary (P5) portable graymap of one slice, linearly windowed to `[lo, hi]`.
pub fn slice_to_pgm(vol: &Volume3D, z: usize, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", vol.width, vol.height).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(vol.slice_data(z).iter().map(|&v| {
        let g = ((v as f64 - lo) / span * 255.0).round();
        g.clamp(0.0, 255.0) as u8
    }));
    out
}
