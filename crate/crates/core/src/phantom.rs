//! Randomized left-ventricle activity phantoms and parametric perfusion
//! defects.
//!
//! The LV is a half-ellipsoidal shell (outer minus inner ellipsoid,
//! truncated at the base plane), generated directly in short-axis
//! orientation. A voxel belongs to the shell iff its center does; there is
//! no subvoxel antialiasing. Defects are angular wall sectors with a
//! fractional severity, subtracted downstream in the projection domain.
//!
//! Wall-location angle convention, counterclockwise from +x in the
//! short-axis plane: lateral = 0, anterior = 90, septal = 180,
//! inferior = 270 degrees.

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{tag, SeedStream};
use crate::scalar::Scalar;
use crate::voxel::{Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid geometry: {0}")]
    BadGeometry(String),
    #[error("LV does not fit inside dims {dims:?} at {voxel_mm} mm: axis {axis} needs [{lo:.1}, {hi:.1}] mm")]
    GeometryOutOfBounds {
        dims: (usize, usize, usize),
        voxel_mm: f64,
        axis: usize,
        lo: f64,
        hi: f64,
    },
    #[error("invalid defect spec: {0}")]
    BadDefectSpec(String),
    #[error("no voxel qualifies for the requested defect")]
    EmptyDefect,
    #[error("invalid population range: {0}")]
    BadRange(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Left-ventricle wall sectors used to place defects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallLocation {
    Anterior,
    Inferior,
    Septal,
    Lateral,
}

impl WallLocation {
    /// Canonical sector center angle in degrees.
    pub fn angle_deg(self) -> f64 {
        match self {
            WallLocation::Lateral => 0.0,
            WallLocation::Anterior => 90.0,
            WallLocation::Septal => 180.0,
            WallLocation::Inferior => 270.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WallLocation::Anterior => "anterior",
            WallLocation::Inferior => "inferior",
            WallLocation::Septal => "septal",
            WallLocation::Lateral => "lateral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "anterior" => Some(WallLocation::Anterior),
            "inferior" => Some(WallLocation::Inferior),
            "septal" => Some(WallLocation::Septal),
            "lateral" => Some(WallLocation::Lateral),
            _ => None,
        }
    }
}

/// Half-ellipsoidal shell geometry. `apex_z_mm`/`base_z_mm` are absolute z
/// positions in mm; the long axis passes through the in-plane components
/// of `center_vox`, tilted by `tilt_deg` (about x, then y). The z
/// component of `center_vox` is the reference LV center used for cropping
/// and channel shifts; the population generator keeps it at the apex-base
/// midpoint.
#[derive(Debug, Clone, Copy)]
pub struct LvGeometry {
    pub center_vox: [f64; 3],
    pub outer_radius_mm: f64,
    pub wall_thickness_mm: f64,
    pub apex_z_mm: f64,
    pub base_z_mm: f64,
    pub wall_activity: f64,
    pub background_activity: f64,
    pub tilt_deg: (f64, f64),
}

impl LvGeometry {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let g = self;
        if !(g.outer_radius_mm > 0.0 && g.wall_thickness_mm > 0.0) {
            return Err(PhantomError::BadGeometry("radius/thickness must be positive".into()));
        }
        if g.wall_thickness_mm >= g.outer_radius_mm {
            return Err(PhantomError::BadGeometry(format!(
                "wall thickness {} must be < outer radius {}",
                g.wall_thickness_mm, g.outer_radius_mm
            )));
        }
        if !(g.apex_z_mm > 0.0 && g.base_z_mm > 0.0 && g.apex_z_mm < g.base_z_mm) {
            return Err(PhantomError::BadGeometry(format!(
                "need 0 < apex ({}) < base ({})",
                g.apex_z_mm, g.base_z_mm
            )));
        }
        if g.base_z_mm - g.apex_z_mm <= g.wall_thickness_mm {
            return Err(PhantomError::BadGeometry("LV height must exceed wall thickness".into()));
        }
        if !(g.wall_activity > 0.0) || g.background_activity < 0.0 {
            return Err(PhantomError::BadGeometry("activities must be positive/nonnegative".into()));
        }
        if g.background_activity >= g.wall_activity {
            return Err(PhantomError::BadGeometry("background must be below wall activity".into()));
        }
        Ok(())
    }

    fn height_mm(&self) -> f64 {
        self.base_z_mm - self.apex_z_mm
    }

    /// World-space anchor of the LV local frame, in mm.
    fn anchor_mm(&self, voxel_mm: f64) -> [f64; 3] {
        [
            self.center_vox[0] * voxel_mm,
            self.center_vox[1] * voxel_mm,
            0.5 * (self.apex_z_mm + self.base_z_mm),
        ]
    }

    /// Rows of the world-from-local rotation `Ry(ty) * Rx(tx)`.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let (sx, cx) = self.tilt_deg.0.to_radians().sin_cos();
        let (sy, cy) = self.tilt_deg.1.to_radians().sin_cos();
        // Ry * Rx, row-major.
        [
            [cy, sy * sx, sy * cx],
            [0.0, cx, -sx],
            [-sy, cy * sx, cy * cx],
        ]
    }

    /// Coordinates of voxel center `(x, y, z)` in the LV local frame (mm).
    pub fn local_mm(&self, voxel_mm: f64, x: usize, y: usize, z: usize) -> [f64; 3] {
        let a = self.anchor_mm(voxel_mm);
        let d = [
            x as f64 * voxel_mm - a[0],
            y as f64 * voxel_mm - a[1],
            z as f64 * voxel_mm - a[2],
        ];
        let r = self.rotation();
        // Transpose of the world-from-local rotation.
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// True iff the local point lies in the wall shell.
    pub fn in_wall(&self, q: [f64; 3]) -> bool {
        let h = self.height_mm();
        let half = 0.5 * h;
        if q[2] > half {
            return false;
        }
        let r2 = q[0] * q[0] + q[1] * q[1];
        let dz = q[2] - half;
        let a_out = self.outer_radius_mm;
        let a_in = a_out - self.wall_thickness_mm;
        let c_out = h;
        let c_in = h - self.wall_thickness_mm;
        let outer = r2 / (a_out * a_out) + (dz * dz) / (c_out * c_out) <= 1.0;
        let inner = r2 / (a_in * a_in) + (dz * dz) / (c_in * c_in) < 1.0;
        outer && !inner
    }

    fn fit_check(&self, dims: (usize, usize, usize), voxel_mm: f64) -> Result<(), PhantomError> {
        let a = self.anchor_mm(voxel_mm);
        let r = self.rotation();
        let b = [self.outer_radius_mm, self.outer_radius_mm, 0.5 * self.height_mm()];
        let hi = [
            (dims.0 - 1) as f64 * voxel_mm,
            (dims.1 - 1) as f64 * voxel_mm,
            (dims.2 - 1) as f64 * voxel_mm,
        ];
        for axis in 0..3 {
            let reach: f64 = (0..3).map(|j| r[axis][j].abs() * b[j]).sum();
            let (lo, up) = (a[axis] - reach, a[axis] + reach);
            if lo < 0.0 || up > hi[axis] {
                return Err(PhantomError::GeometryOutOfBounds {
                    dims,
                    voxel_mm,
                    axis,
                    lo,
                    hi: up,
                });
            }
        }
        Ok(())
    }
}

/// Perfusion defect: an angular wall sector with fractional severity and a
/// limited axial extent centered on the mid-wall slice.
#[derive(Debug, Clone, Copy)]
pub struct DefectSpec {
    pub wall_location: WallLocation,
    pub center_angle_deg: f64,
    pub extent_deg: f64,
    pub severity_frac: f64,
    pub axial_extent_slices: usize,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.extent_deg > 0.0 && self.extent_deg <= 360.0) {
            return Err(PhantomError::BadDefectSpec(format!(
                "extent {} must lie in (0, 360]",
                self.extent_deg
            )));
        }
        if !(self.severity_frac > 0.0 && self.severity_frac <= 1.0) {
            return Err(PhantomError::BadDefectSpec(format!(
                "severity {} must lie in (0, 1]",
                self.severity_frac
            )));
        }
        if self.axial_extent_slices == 0 {
            return Err(PhantomError::BadDefectSpec("axial extent must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample ground truth carried through the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub cluster_id: u64,
    pub defect_present: bool,
    pub defect_centroid_vox: [f64; 3],
    pub lv_center_vox: [f64; 3],
    pub slice_range: (usize, usize),
}

impl SampleMeta {
    /// Channel shift target: the defect centroid when present, else the LV
    /// center.
    pub fn shift_target_vox(&self) -> [f64; 3] {
        if self.defect_present {
            self.defect_centroid_vox
        } else {
            self.lv_center_vox
        }
    }

    /// Re-expresses coordinates relative to a crop window at `origin` with
    /// `crop_dims`, clamping the slice range to the window.
    pub fn to_crop_frame(&self, origin: (usize, usize, usize), crop_dims: (usize, usize, usize)) -> SampleMeta {
        let shift = [origin.0 as f64, origin.1 as f64, origin.2 as f64];
        let sub = |p: [f64; 3]| [p[0] - shift[0], p[1] - shift[1], p[2] - shift[2]];
        let s1 = self.slice_range.0.saturating_sub(origin.2);
        let s2 = (self.slice_range.1.saturating_sub(origin.2)).min(crop_dims.2 - 1);
        SampleMeta {
            sample_id: self.sample_id,
            cluster_id: self.cluster_id,
            defect_present: self.defect_present,
            defect_centroid_vox: sub(self.defect_centroid_vox),
            lv_center_vox: sub(self.lv_center_vox),
            slice_range: (s1.min(s2), s2),
        }
    }
}

/// z-extent (inclusive) of the nonzero voxels of `mask`, if any.
pub fn mask_z_extent<T: Scalar>(mask: &Volume3D<T>) -> Option<(usize, usize)> {
    let (nx, ny, nz) = mask.dims();
    let plane = nx * ny;
    let mut lo = None;
    let mut hi = None;
    for z in 0..nz {
        let any = mask.data()[z * plane..(z + 1) * plane]
            .iter()
            .any(|v| *v != T::zero());
        if any {
            if lo.is_none() {
                lo = Some(z);
            }
            hi = Some(z);
        }
    }
    Some((lo?, hi?))
}

/// Builds the activity volume and the binary wall mask for one LV.
pub fn generate_lv_phantom<T: Scalar>(
    geom: &LvGeometry,
    dims: (usize, usize, usize),
    voxel_mm: f64,
) -> Result<(Volume3D<T>, Volume3D<T>), PhantomError> {
    geom.validate()?;
    if !(voxel_mm > 0.0) {
        return Err(PhantomError::BadGeometry(format!("voxel pitch {voxel_mm}")));
    }
    geom.fit_check(dims, voxel_mm)?;
    let wall = T::cast(geom.wall_activity);
    let bg = T::cast(geom.background_activity);
    let mut activity = Volume3D::filled(dims, voxel_mm, bg);
    let mut mask = Volume3D::zeros(dims, voxel_mm);
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if geom.in_wall(geom.local_mm(voxel_mm, x, y, z)) {
                    activity.set(x, y, z, wall);
                    mask.set(x, y, z, T::one());
                }
            }
        }
    }
    Ok((activity, mask))
}

fn wrapped_angle_dist_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Builds the defect-only volume (`severity * activity` on the qualifying
/// sector, zero elsewhere) and the sample truth record. Identity fields of
/// the returned meta are zeroed; callers assign ids.
pub fn make_defect_volume<T: Scalar>(
    activity: &Volume3D<T>,
    mask: &Volume3D<T>,
    geom: &LvGeometry,
    spec: &DefectSpec,
) -> Result<(Volume3D<T>, SampleMeta), PhantomError> {
    spec.validate()?;
    let dims = activity.dims();
    if mask.dims() != dims {
        return Err(PhantomError::BadDefectSpec("mask/activity dims differ".into()));
    }
    let (z_lo, z_hi) = mask_z_extent(mask).ok_or(PhantomError::EmptyDefect)?;
    let mid = (z_lo + z_hi) / 2;
    let w_lo = mid.saturating_sub((spec.axial_extent_slices - 1) / 2);
    let w_hi = (w_lo + spec.axial_extent_slices - 1).min(dims.2 - 1);

    let voxel_mm = activity.voxel_mm();
    let mut defect = Volume3D::zeros(dims, voxel_mm);
    let mut wsum = 0.0;
    let mut centroid = [0.0; 3];
    for z in w_lo..=w_hi {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if mask.at(x, y, z) == T::zero() {
                    continue;
                }
                let q = geom.local_mm(voxel_mm, x, y, z);
                let phi = q[1].atan2(q[0]).to_degrees();
                if wrapped_angle_dist_deg(phi, spec.center_angle_deg) <= 0.5 * spec.extent_deg {
                    let v = activity.at(x, y, z) * T::cast(spec.severity_frac);
                    defect.set(x, y, z, v);
                    let w = v.as_f64();
                    wsum += w;
                    centroid[0] += w * x as f64;
                    centroid[1] += w * y as f64;
                    centroid[2] += w * z as f64;
                }
            }
        }
    }
    if wsum <= 0.0 {
        return Err(PhantomError::EmptyDefect);
    }
    for c in centroid.iter_mut() {
        *c /= wsum;
    }
    let meta = SampleMeta {
        sample_id: 0,
        cluster_id: 0,
        defect_present: true,
        defect_centroid_vox: centroid,
        lv_center_vox: geom.center_vox,
        slice_range: (z_lo, z_hi),
    };
    Ok((defect, meta))
}

/// Uniform parameter ranges for the synthetic population.
#[derive(Debug, Clone)]
pub struct PopulationConfig {
    pub dims: (usize, usize, usize),
    pub voxel_mm: f64,
    pub outer_radius_mm: (f64, f64),
    pub wall_thickness_mm: (f64, f64),
    pub lv_height_mm: (f64, f64),
    pub tilt_max_deg: f64,
    pub wall_activity: (f64, f64),
    pub background_activity: (f64, f64),
    pub center_jitter_vox: f64,
    pub defects: DefectMixture,
}

/// Defect parameter mixture: wall locations drawn uniformly, the center
/// angle jittered around the canonical location angle.
#[derive(Debug, Clone)]
pub struct DefectMixture {
    pub walls: Vec<WallLocation>,
    pub extent_deg: f64,
    pub severity_frac: f64,
    pub axial_extent_slices: usize,
    pub angle_jitter_deg: f64,
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        fn range_ok(name: &str, (lo, hi): (f64, f64), positive: bool) -> Result<(), PhantomError> {
            if lo > hi || (positive && lo <= 0.0) {
                return Err(PhantomError::BadRange(format!("{name}: [{lo}, {hi}]")));
            }
            Ok(())
        }
        range_ok("outer_radius_mm", self.outer_radius_mm, true)?;
        range_ok("wall_thickness_mm", self.wall_thickness_mm, true)?;
        range_ok("lv_height_mm", self.lv_height_mm, true)?;
        range_ok("wall_activity", self.wall_activity, true)?;
        if self.background_activity.0 < 0.0 || self.background_activity.0 > self.background_activity.1 {
            return Err(PhantomError::BadRange("background_activity".into()));
        }
        if self.wall_thickness_mm.1 >= self.outer_radius_mm.0 {
            return Err(PhantomError::BadRange(
                "max wall thickness must stay below min outer radius".into(),
            ));
        }
        if self.wall_thickness_mm.1 >= self.lv_height_mm.0 {
            return Err(PhantomError::BadRange("max wall thickness must stay below min LV height".into()));
        }
        if self.background_activity.1 >= self.wall_activity.0 {
            return Err(PhantomError::BadRange(
                "max background activity must stay below min wall activity".into(),
            ));
        }
        if self.tilt_max_deg < 0.0 || self.center_jitter_vox < 0.0 {
            return Err(PhantomError::BadRange("tilt/jitter must be nonnegative".into()));
        }
        if self.defects.walls.is_empty() {
            return Err(PhantomError::BadRange("defect mixture needs at least one wall".into()));
        }
        let probe = DefectSpec {
            wall_location: self.defects.walls[0],
            center_angle_deg: 0.0,
            extent_deg: self.defects.extent_deg,
            severity_frac: self.defects.severity_frac,
            axial_extent_slices: self.defects.axial_extent_slices,
        };
        probe.validate()?;
        // Worst-case fit: largest radius/height, max tilt and jitter.
        let worst = LvGeometry {
            center_vox: [
                self.dims.0 as f64 / 2.0 + self.center_jitter_vox,
                self.dims.1 as f64 / 2.0 + self.center_jitter_vox,
                self.dims.2 as f64 / 2.0 + self.center_jitter_vox,
            ],
            outer_radius_mm: self.outer_radius_mm.1,
            wall_thickness_mm: self.wall_thickness_mm.0,
            apex_z_mm: (self.dims.2 as f64 / 2.0 + self.center_jitter_vox) * self.voxel_mm
                - self.lv_height_mm.1 / 2.0,
            base_z_mm: (self.dims.2 as f64 / 2.0 + self.center_jitter_vox) * self.voxel_mm
                + self.lv_height_mm.1 / 2.0,
            wall_activity: self.wall_activity.1,
            background_activity: self.background_activity.0,
            tilt_deg: (self.tilt_max_deg, self.tilt_max_deg),
        };
        worst.validate()?;
        worst.fit_check(self.dims, self.voxel_mm)?;
        Ok(())
    }

    /// Draws one geometry from the configured ranges.
    pub fn draw_geometry(&self, stream: &mut SeedStream) -> LvGeometry {
        let d = self.dims;
        let j = self.center_jitter_vox;
        let cx = d.0 as f64 / 2.0 + stream.uniform_in(-j, j);
        let cy = d.1 as f64 / 2.0 + stream.uniform_in(-j, j);
        let cz = d.2 as f64 / 2.0 + stream.uniform_in(-j, j);
        let height = stream.uniform_in(self.lv_height_mm.0, self.lv_height_mm.1);
        let cz_mm = cz * self.voxel_mm;
        LvGeometry {
            center_vox: [cx, cy, cz],
            outer_radius_mm: stream.uniform_in(self.outer_radius_mm.0, self.outer_radius_mm.1),
            wall_thickness_mm: stream.uniform_in(self.wall_thickness_mm.0, self.wall_thickness_mm.1),
            apex_z_mm: cz_mm - height / 2.0,
            base_z_mm: cz_mm + height / 2.0,
            wall_activity: stream.uniform_in(self.wall_activity.0, self.wall_activity.1),
            background_activity: stream
                .uniform_in(self.background_activity.0, self.background_activity.1),
            tilt_deg: (
                stream.uniform_in(-self.tilt_max_deg, self.tilt_max_deg),
                stream.uniform_in(-self.tilt_max_deg, self.tilt_max_deg),
            ),
        }
    }

    /// Draws one defect spec from the mixture.
    pub fn draw_defect(&self, stream: &mut SeedStream) -> DefectSpec {
        let m = &self.defects;
        let wall = m.walls[stream.below(m.walls.len() as u64) as usize];
        let jitter = stream.uniform_in(-m.angle_jitter_deg, m.angle_jitter_deg);
        DefectSpec {
            wall_location: wall,
            center_angle_deg: wall.angle_deg() + jitter,
            extent_deg: m.extent_deg,
            severity_frac: m.severity_frac,
            axial_extent_slices: m.axial_extent_slices,
        }
    }
}

/// One generated phantom with its truth record (defect not yet applied).
pub struct PhantomSample<T: Scalar = f64> {
    pub activity: Volume3D<T>,
    pub mask: Volume3D<T>,
    pub geom: LvGeometry,
    pub meta: SampleMeta,
}

/// Generates `n` phantoms. Each sample derives its own stream from
/// `(seed, sample_id)`, so generation is deterministic and parallel-safe;
/// `cluster_id = sample_id` (one image per synthetic patient).
pub fn sample_population<T: Scalar>(
    cfg: &PopulationConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<PhantomSample<T>>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::BadRange("population size must be positive".into()));
    }
    cfg.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut stream = SeedStream::new(seed, &[tag::POPULATION, id]);
            let geom = cfg.draw_geometry(&mut stream);
            let (activity, mask) = generate_lv_phantom::<T>(&geom, cfg.dims, cfg.voxel_mm)?;
            let slice_range = mask_z_extent(&mask).ok_or(PhantomError::EmptyDefect)?;
            let meta = SampleMeta {
                sample_id: id,
                cluster_id: id,
                defect_present: false,
                defect_centroid_vox: geom.center_vox,
                lv_center_vox: geom.center_vox,
                slice_range,
            };
            Ok(PhantomSample { activity, mask, geom, meta })
        })
        .collect()
}
