//! Physical layout of the shelf deployment and the Fresnel-zone geometry shared by the
//! simulator and the analytic imager.
//!
//! All lengths are meters. The tag mesh lies in the plane `z = origin.z`; antennas sit on
//! the `+z` side facing the shelf. Image planes are parallel to the mesh at a positive
//! offset towards the antennas. Voxel `(u, v)` has flat index `v * width + u`, with `v = 0`
//! the bottom row.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, SPEED_OF_LIGHT};

pub const INCH: f64 = 0.0254;
pub const FOOT: f64 = 0.3048;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Point at parameter `t` on the segment `self -> other`.
    pub fn lerp(&self, other: &Point3, t: f64) -> Point3 {
        Point3::new(
            self.x + t * (other.x - self.x),
            self.y + t * (other.y - self.y),
            self.z + t * (other.z - self.z),
        )
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(p: [f64; 3]) -> Self {
        Point3::new(p[0], p[1], p[2])
    }
}

/// Rectangular mesh of `k_x` columns by `k_y` rows of tags, indexed row-major from the
/// bottom-left tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TagGrid {
    pub k_x: usize,
    pub k_y: usize,
    pub spacing_x: f64,
    pub spacing_y: f64,
    pub origin: Point3,
    pub tag_positions: Vec<Point3>,
}

impl TagGrid {
    pub fn new(k_x: usize, k_y: usize, spacing_x: f64, spacing_y: f64, origin: Point3) -> Result<Self> {
        if k_x == 0 || k_y == 0 {
            return Err(Error::InvalidParameter("tag grid needs at least one row and column".into()));
        }
        if !(spacing_x > 0.0 && spacing_y > 0.0) {
            return Err(Error::InvalidParameter("tag spacing must be positive".into()));
        }
        let tag_positions = (0..k_y)
            .flat_map(|row| {
                (0..k_x).map(move |col| {
                    Point3::new(
                        origin.x + col as f64 * spacing_x,
                        origin.y + row as f64 * spacing_y,
                        origin.z,
                    )
                })
            })
            .collect();
        Ok(Self {
            k_x,
            k_y,
            spacing_x,
            spacing_y,
            origin,
            tag_positions,
        })
    }

    /// Number of tags `K = k_x * k_y`.
    pub fn len(&self) -> usize {
        self.tag_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tag_positions.is_empty()
    }

    pub fn column_of(&self, tag: usize) -> usize {
        tag % self.k_x
    }

    pub fn row_of(&self, tag: usize) -> usize {
        tag / self.k_x
    }

    pub fn position(&self, tag: usize) -> Result<Point3> {
        self.tag_positions.get(tag).copied().ok_or(Error::IndexOutOfRange {
            what: "tag",
            index: tag,
            len: self.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntennaArray {
    pub positions: Vec<Point3>,
}

impl AntennaArray {
    pub fn new(positions: Vec<Point3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidParameter("at least one antenna is required".into()));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, antenna: usize) -> Result<Point3> {
        self.positions.get(antenna).copied().ok_or(Error::IndexOutOfRange {
            what: "antenna",
            index: antenna,
            len: self.len(),
        })
    }
}

/// A voxelised plane parallel to the tag mesh, `p_x` by `p_y` voxels per inter-tag gap.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub z_offset: f64,
    pub p_x: usize,
    pub p_y: usize,
    pub width_vox: usize,
    pub height_vox: usize,
    pub voxel_centers: Vec<Point3>,
}

impl ImagePlane {
    pub fn new(grid: &TagGrid, z_offset: f64, p_x: usize, p_y: usize) -> Result<Self> {
        if p_x == 0 || p_y == 0 {
            return Err(Error::InvalidParameter("voxels per gap must be positive".into()));
        }
        if grid.k_x < 2 || grid.k_y < 2 {
            return Err(Error::InvalidParameter(
                "an image plane needs at least two tag rows and columns".into(),
            ));
        }
        if z_offset < 0.0 {
            return Err(Error::InvalidParameter(format!("negative plane offset {z_offset}")));
        }
        let width_vox = p_x * (grid.k_x - 1);
        let height_vox = p_y * (grid.k_y - 1);
        let pitch_x = grid.spacing_x / p_x as f64;
        let pitch_y = grid.spacing_y / p_y as f64;
        let voxel_centers = (0..height_vox)
            .flat_map(|v| {
                (0..width_vox).map(move |u| {
                    Point3::new(
                        grid.origin.x + (u as f64 + 0.5) * pitch_x,
                        grid.origin.y + (v as f64 + 0.5) * pitch_y,
                        grid.origin.z + z_offset,
                    )
                })
            })
            .collect();
        Ok(Self {
            z_offset,
            p_x,
            p_y,
            width_vox,
            height_vox,
            voxel_centers,
        })
    }

    /// Number of voxels `N`.
    pub fn len(&self) -> usize {
        self.voxel_centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_centers.is_empty()
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width_vox + u
    }
}

/// Voxel count of a plane over a `k_x` by `k_y` mesh.
pub fn voxel_count(k_x: usize, k_y: usize, p_x: usize, p_y: usize) -> usize {
    p_x * p_y * k_x.saturating_sub(1) * k_y.saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub first_column: usize,
    pub last_column: usize,
}

/// Item categories as inclusive tag-column ranges, with their centroids in voxel
/// index coordinates `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryLayout {
    pub categories: Vec<Category>,
    pub centroids: Vec<(f64, f64)>,
}

impl CategoryLayout {
    pub fn new(ranges: &[(usize, usize)], grid: &TagGrid, p_x: usize, p_y: usize) -> Result<Self> {
        let mut categories = Vec::with_capacity(ranges.len());
        for (id, &(first, last)) in ranges.iter().enumerate() {
            if first > last || last >= grid.k_x {
                return Err(Error::InvalidParameter(format!(
                    "category {id} columns {first}..={last} outside 0..{}",
                    grid.k_x
                )));
            }
            categories.push(Category {
                id,
                first_column: first,
                last_column: last,
            });
        }
        for (i, a) in categories.iter().enumerate() {
            for b in &categories[i + 1..] {
                if a.first_column <= b.last_column && b.first_column <= a.last_column {
                    return Err(Error::InvalidParameter(format!(
                        "categories {} and {} overlap",
                        a.id, b.id
                    )));
                }
            }
        }
        let height_vox = p_y * (grid.k_y - 1);
        let v_center = (height_vox as f64 - 1.0) / 2.0;
        // Tag column c sits on the voxel boundary at u = c * p_x; the mean of the voxel
        // centers between the first and last columns is the midpoint minus half a voxel.
        let centroids = categories
            .iter()
            .map(|c| {
                let mid = 0.5 * (c.first_column + c.last_column) as f64 * p_x as f64;
                ((mid - 0.5).max(0.0), v_center)
            })
            .collect();
        Ok(Self {
            categories,
            centroids,
        })
    }

    /// Six categories of four columns separated by one empty column.
    pub fn default_ranges() -> Vec<(usize, usize)> {
        (0..6).map(|i| (5 * i, 5 * i + 3)).collect()
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Tag-column coordinate of the category's center.
    pub fn center_column(&self, category: usize) -> f64 {
        let c = &self.categories[category];
        0.5 * (c.first_column + c.last_column) as f64
    }
}

/// Euclidean tag-to-antenna distance.
pub fn link_distance(tag: usize, antenna: usize, grid: &TagGrid, array: &AntennaArray) -> Result<f64> {
    Ok(grid.position(tag)?.distance(&array.position(antenna)?))
}

/// Ellipsoid half-width `theta0 * sqrt(lambda * d1 * d2 / (d1 + d2))`, the first Fresnel
/// zone radius scaled by `theta0`.
pub fn fresnel_width(theta0: f64, lambda_avg: f64, d1: f64, d2: f64) -> Result<f64> {
    if d1 < 0.0 || d2 < 0.0 {
        return Err(Error::InvalidParameter("negative distance".into()));
    }
    let total = d1 + d2;
    if total == 0.0 {
        return Err(Error::DegenerateLink);
    }
    Ok(theta0 * (lambda_avg * d1 * d2 / total).sqrt())
}

/// Whether `voxel` lies strictly inside the ellipsoid with foci `tag` and `antenna` whose
/// path-length excess is `theta`.
pub fn inside_ellipsoid(voxel: &Point3, tag: &Point3, antenna: &Point3, theta: f64) -> bool {
    voxel.distance(tag) + voxel.distance(antenna) < tag.distance(antenna) + theta
}

/// Wavelength at the band-center frequency.
pub fn average_wavelength(f_low: f64, f_high: f64) -> Result<f64> {
    if !(f_low > 0.0 && f_high > 0.0) {
        return Err(Error::InvalidParameter("frequencies must be positive".into()));
    }
    if f_low > f_high {
        return Err(Error::InvalidParameter(format!("f_low {f_low} > f_high {f_high}")));
    }
    Ok(SPEED_OF_LIGHT / (0.5 * (f_low + f_high)))
}

/// On-disk layout description. Every key is optional; missing keys take the default
/// shelf deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub k_x: usize,
    pub k_y: usize,
    pub spacing_m: f64,
    pub origin: [f64; 3],
    pub antenna_positions: Vec<[f64; 3]>,
    pub z_planes: Vec<f64>,
    pub p_x: usize,
    pub p_y: usize,
    pub categories: Vec<(usize, usize)>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let spacing = 5.0 * INCH;
        let k_x = 29;
        let height = 4.5 * FOOT;
        let mid_x = 0.5 * (k_x - 1) as f64 * spacing;
        let half_gap = 10.0 * INCH;
        let distance = 4.2;
        Self {
            k_x,
            k_y: 4,
            spacing_m: spacing,
            origin: [0.0, height, 0.0],
            antenna_positions: vec![
                [mid_x - half_gap, height, distance],
                [mid_x + half_gap, height, distance],
            ],
            z_planes: vec![0.3, 0.6],
            p_x: 5,
            p_y: 5,
            categories: CategoryLayout::default_ranges(),
        }
    }
}

impl LayoutConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("layout config serializes")
    }

    pub fn build(&self) -> Result<Layout> {
        Layout::from_config(self)
    }
}

/// Fully constructed deployment. Immutable once built.
#[derive(Debug, Clone)]
pub struct Layout {
    pub grid: TagGrid,
    pub antennas: AntennaArray,
    pub planes: Vec<ImagePlane>,
    pub categories: CategoryLayout,
    pub p_x: usize,
    pub p_y: usize,
}

impl Layout {
    pub fn from_config(cfg: &LayoutConfig) -> Result<Self> {
        let grid = TagGrid::new(cfg.k_x, cfg.k_y, cfg.spacing_m, cfg.spacing_m, cfg.origin.into())?;
        let antennas = AntennaArray::new(cfg.antenna_positions.iter().map(|&p| p.into()).collect())?;
        let nearest = antennas
            .positions
            .iter()
            .map(|a| a.z - grid.origin.z)
            .fold(f64::INFINITY, f64::min);
        if nearest <= 0.0 {
            return Err(Error::InvalidParameter("antennas must sit in front of the tag plane".into()));
        }
        if cfg.z_planes.is_empty() {
            return Err(Error::InvalidParameter("at least one image plane is required".into()));
        }
        let planes = cfg
            .z_planes
            .iter()
            .map(|&z| {
                if z >= nearest {
                    return Err(Error::InvalidParameter(format!(
                        "image plane at {z} m is not between the tags and the antennas"
                    )));
                }
                ImagePlane::new(&grid, z, cfg.p_x, cfg.p_y)
            })
            .collect::<Result<Vec<_>>>()?;
        let categories = CategoryLayout::new(&cfg.categories, &grid, cfg.p_x, cfg.p_y)?;
        Ok(Self {
            grid,
            antennas,
            planes,
            categories,
            p_x: cfg.p_x,
            p_y: cfg.p_y,
        })
    }

    pub fn shelf_default() -> Self {
        Self::from_config(&LayoutConfig::default()).expect("default layout is valid")
    }

    pub fn num_tags(&self) -> usize {
        self.grid.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.antennas.len()
    }

    pub fn image_width(&self) -> usize {
        self.p_x * (self.grid.k_x - 1)
    }

    pub fn image_height(&self) -> usize {
        self.p_y * (self.grid.k_y - 1)
    }

    pub fn num_voxels(&self) -> usize {
        self.image_width() * self.image_height()
    }

    /// Converts a plane position in meters to continuous voxel index coordinates.
    pub fn meters_to_voxel(&self, x: f64, y: f64) -> (f64, f64) {
        let pitch_x = self.grid.spacing_x / self.p_x as f64;
        let pitch_y = self.grid.spacing_y / self.p_y as f64;
        (
            (x - self.grid.origin.x) / pitch_x - 0.5,
            (y - self.grid.origin.y) / pitch_y - 0.5,
        )
    }

    /// Plane x coordinate (meters) of a fractional tag column.
    pub fn column_to_x(&self, column: f64) -> f64 {
        self.grid.origin.x + column * self.grid.spacing_x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(tag: Point3, antenna: Point3) -> (TagGrid, AntennaArray) {
        let grid = TagGrid::new(1, 1, 1.0, 1.0, tag).unwrap();
        (grid, AntennaArray::new(vec![antenna]).unwrap())
    }

    #[test]
    fn link_distance_examples() {
        let (g, a) = single(Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 4.2));
        assert_eq!(link_distance(0, 0, &g, &a).unwrap(), 4.2);
        let (g, a) = single(Point3::new(0.127, 0.0, 0.0), Point3::default());
        assert_eq!(link_distance(0, 0, &g, &a).unwrap(), 0.127);
        let (g, a) = single(Point3::new(3.0, 4.0, 0.0), Point3::default());
        assert_eq!(link_distance(0, 0, &g, &a).unwrap(), 5.0);
        assert!(matches!(
            link_distance(1, 0, &g, &a),
            Err(Error::IndexOutOfRange { what: "tag", .. })
        ));
        assert!(link_distance(0, 3, &g, &a).is_err());
    }

    #[test]
    fn fresnel_width_examples() {
        assert_eq!(fresnel_width(1.0, 0.5, 0.0, 2.0).unwrap(), 0.0);
        // mpmath: sqrt(0.32765 * 2.1 * 2.1 / 4.2) = 0.586542837...
        let w = fresnel_width(1.0, 0.32765, 2.1, 2.1).unwrap();
        assert!((w - 0.586_542_837).abs() < 1e-8, "{w}");
        let w2 = fresnel_width(2.0, 0.32765, 2.1, 2.1).unwrap();
        assert!((w2 - 1.173_085_675).abs() < 1e-8, "{w2}");
        assert!(matches!(fresnel_width(1.0, 0.3, 0.0, 0.0), Err(Error::DegenerateLink)));
    }

    #[test]
    fn fresnel_width_peaks_mid_link() {
        let total = 4.2;
        let mid = fresnel_width(1.0, 0.32765, total / 2.0, total / 2.0).unwrap();
        for i in 0..=100 {
            let d1 = total * i as f64 / 100.0;
            let w = fresnel_width(1.0, 0.32765, d1, total - d1).unwrap();
            assert!(w <= mid + 1e-15);
        }
    }

    #[test]
    fn inside_ellipsoid_examples() {
        let tag = Point3::new(0.0, 0.0, 0.0);
        let ant = Point3::new(0.0, 0.0, 4.2);
        assert!(inside_ellipsoid(&Point3::new(0.0, 0.0, 2.1), &tag, &ant, 0.01));
        assert!(!inside_ellipsoid(&Point3::new(10.0, 0.0, 2.1), &tag, &ant, 0.6));
        // 2 * sqrt(2.1^2 + 0.2^2) = 4.2190 < 4.2 + 0.5866
        let off = Point3::new(0.2, 0.0, 2.1);
        let sum = off.distance(&tag) + off.distance(&ant);
        assert!((sum - 4.219_004_622).abs() < 1e-8);
        assert!(inside_ellipsoid(&off, &tag, &ant, 0.5866));
    }

    #[test]
    fn average_wavelength_examples() {
        // mpmath: 2.998e8 / 915e6 = 0.327650273...
        let l = average_wavelength(902.75e6, 927.25e6).unwrap();
        assert!((l - 0.327_650_273).abs() < 1e-8);
        assert!((average_wavelength(915e6, 915e6).unwrap() - 0.327_650_273).abs() < 1e-8);
        assert!((average_wavelength(100e6, 100e6).unwrap() - 2.998).abs() < 1e-12);
        assert!(average_wavelength(0.0, 1.0).is_err());
        assert!(average_wavelength(-1.0, 1.0).is_err());
    }

    #[test]
    fn default_layout_dimensions() {
        let layout = Layout::shelf_default();
        assert_eq!(layout.num_tags(), 116);
        assert_eq!(layout.num_voxels(), 2100);
        assert_eq!(voxel_count(29, 4, 5, 5), 2100);
        assert_eq!(layout.planes[0].len(), 2100);
        assert_eq!((layout.image_width(), layout.image_height()), (140, 15));
        assert_eq!(layout.num_antennas(), 2);
        let d = link_distance(0, 0, &layout.grid, &layout.antennas).unwrap();
        assert!(d > 4.2 && d < 4.7);
    }

    #[test]
    fn grid_is_row_major_and_coplanar() {
        let grid = TagGrid::new(3, 2, 0.1, 0.2, Point3::new(1.0, 2.0, 0.5)).unwrap();
        assert_eq!(grid.position(4).unwrap(), Point3::new(1.1, 2.2, 0.5));
        assert_eq!(grid.column_of(4), 1);
        assert_eq!(grid.row_of(4), 1);
        assert!(grid.tag_positions.iter().all(|p| p.z == 0.5));
        assert!(TagGrid::new(3, 2, 0.0, 0.2, Point3::default()).is_err());
    }

    #[test]
    fn voxel_centers_uniform() {
        let layout = Layout::shelf_default();
        let plane = &layout.planes[0];
        let pitch = 5.0 * INCH / 5.0;
        let a = plane.voxel_centers[plane.index(3, 2)];
        let b = plane.voxel_centers[plane.index(4, 2)];
        let c = plane.voxel_centers[plane.index(3, 3)];
        assert!((b.x - a.x - pitch).abs() < 1e-12);
        assert!((c.y - a.y - pitch).abs() < 1e-12);
        assert_eq!(a.z, 0.3);
    }

    #[test]
    fn category_centroids_in_span() {
        let layout = Layout::shelf_default();
        let cats = &layout.categories;
        assert_eq!(cats.len(), 6);
        for (c, &(u, v)) in cats.categories.iter().zip(&cats.centroids) {
            let lo = (c.first_column * layout.p_x) as f64;
            let hi = (c.last_column * layout.p_x) as f64;
            assert!(u >= lo && u <= hi, "{u} not in {lo}..{hi}");
            assert_eq!(v, 7.0);
        }
        // brute force: mean of voxel centers whose x lies between the first and last column
        let plane = &layout.planes[0];
        let c = cats.categories[2];
        let x0 = layout.column_to_x(c.first_column as f64);
        let x1 = layout.column_to_x(c.last_column as f64);
        let us: Vec<f64> = (0..plane.width_vox)
            .filter(|&u| {
                let x = plane.voxel_centers[u].x;
                x > x0 && x < x1
            })
            .map(|u| u as f64)
            .collect();
        let mean = us.iter().sum::<f64>() / us.len() as f64;
        assert!((mean - cats.centroids[2].0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_categories_rejected() {
        let grid = TagGrid::new(10, 2, 0.1, 0.1, Point3::default()).unwrap();
        assert!(CategoryLayout::new(&[(0, 3), (3, 5)], &grid, 5, 5).is_err());
        assert!(CategoryLayout::new(&[(0, 3), (8, 10)], &grid, 5, 5).is_err());
    }

    #[test]
    fn layout_config_roundtrip() {
        let cfg = LayoutConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(LayoutConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = LayoutConfig::from_toml_str("k_x = 10\ncategories = [[0, 3], [5, 8]]\n").unwrap();
        let layout = partial.build().unwrap();
        assert_eq!(layout.num_tags(), 40);
        assert!(LayoutConfig::from_toml_str("bogus = 1").is_err());
        assert!(LayoutConfig::from_toml_str("z_planes = [5.0]").unwrap().build().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn point() -> impl Strategy<Value = Point3> {
            (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn ellipsoid_symmetric(v in point(), t in point(), a in point(), theta in 0.0..2.0f64) {
                prop_assert_eq!(inside_ellipsoid(&v, &t, &a, theta), inside_ellipsoid(&v, &a, &t, theta));
            }

            #[test]
            fn triangle_inequality(v in point(), t in point(), a in point()) {
                prop_assert!(t.distance(&a) <= t.distance(&v) + v.distance(&a) + 1e-12);
            }
        }
    }
}
