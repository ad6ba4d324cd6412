//! Parametric surface patches with area-uniform sampling, analytic normals
//! and distance-to-patch queries.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::pointcloud::{PointCloud, ShapeLabel};

/// Bounded region of a plane in its local `(u, v)` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    /// Axis-aligned rectangle `|u| ≤ half_u`, `|v| ≤ half_v`, minus an
    /// optional centered circular hole.
    Rectangle { half_u: f64, half_v: f64, hole: f64 },
    /// `r_in ≤ |(u, v)| ≤ r_out`; `r_in = 0` is a disk.
    Annulus { r_in: f64, r_out: f64 },
    /// Regular polygon with `sides` vertices on a circle of `radius` (first
    /// vertex on the `u` axis), minus an optional centered circular hole.
    Polygon { sides: usize, radius: f64, hole: f64 },
}

impl Region {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Region::Rectangle { half_u, half_v, hole } => {
                half_u > 0.0 && half_v > 0.0 && hole >= 0.0 && hole < half_u.min(half_v)
            }
            Region::Annulus { r_in, r_out } => r_in >= 0.0 && r_out > r_in,
            Region::Polygon { sides, radius, hole } => {
                sides >= 3 && radius > 0.0 && hole >= 0.0 && hole < radius * (PI / sides as f64).cos()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid planar region {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Region::Rectangle { half_u, half_v, hole } => 4.0 * half_u * half_v - PI * hole * hole,
            Region::Annulus { r_in, r_out } => PI * (r_out * r_out - r_in * r_in),
            Region::Polygon { sides, radius, hole } => {
                0.5 * sides as f64 * radius * radius * (TAU / sides as f64).sin() - PI * hole * hole
            }
        }
    }

    fn polygon_vertex(sides: usize, radius: f64, i: usize) -> [f64; 2] {
        let a = TAU * (i % sides) as f64 / sides as f64;
        [radius * a.cos(), radius * a.sin()]
    }

    /// Distance in the plane from `(u, v)` to the region (0 inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
        match *self {
            Region::Rectangle { half_u, half_v, hole } => {
                let du = (p[0].abs() - half_u).max(0.0);
                let dv = (p[1].abs() - half_v).max(0.0);
                let outside = (du * du + dv * dv).sqrt();
                outside.max(hole - rho)
            }
            Region::Annulus { r_in, r_out } => (rho - r_out).max(r_in - rho).max(0.0),
            Region::Polygon { sides, radius, hole } => {
                let apothem = radius * (PI / sides as f64).cos();
                let inside = (0..sides).all(|i| {
                    let mid = TAU * (i as f64 + 0.5) / sides as f64;
                    p[0] * mid.cos() + p[1] * mid.sin() <= apothem
                });
                let outside = if inside {
                    0.0
                } else {
                    (0..sides)
                        .map(|i| {
                            let a = Self::polygon_vertex(sides, radius, i);
                            let b = Self::polygon_vertex(sides, radius, i + 1);
                            segment_distance_2d(p, a, b)
                        })
                        .fold(f64::INFINITY, f64::min)
                };
                outside.max(hole - rho).max(0.0)
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match *self {
            Region::Annulus { r_in, r_out } => {
                let r = rng.random_range(r_in * r_in..r_out * r_out).sqrt();
                let a = rng.random_range(0.0..TAU);
                [r * a.cos(), r * a.sin()]
            }
            Region::Rectangle { half_u, half_v, .. } => loop {
                let p = [rng.random_range(-half_u..half_u), rng.random_range(-half_v..half_v)];
                if self.distance(p) == 0.0 {
                    return p;
                }
            },
            Region::Polygon { radius, .. } => loop {
                let p = [rng.random_range(-radius..radius), rng.random_range(-radius..radius)];
                if self.distance(p) == 0.0 {
                    return p;
                }
            },
        }
    }
}

fn segment_distance_2d(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// A bounded patch of one of the four basic surfaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    /// Planar region centered at `origin` spanned by orthonormal `u`, `v`;
    /// the normal is `u × v`.
    Plane { origin: Vec3, u: Vec3, v: Vec3, region: Region },
    /// Spherical cap: points whose angle from `axis` (seen from `center`) is
    /// at most `max_polar`; `max_polar = π` is the whole sphere.
    Sphere { center: Vec3, radius: f64, axis: Vec3, max_polar: f64 },
    /// Lateral surface from `base` to `base + height·axis`. `inward` flips
    /// the normal toward the axis (bores).
    Cylinder { base: Vec3, axis: Vec3, radius: f64, height: f64, inward: bool },
    /// Lateral cone surface between axial distances `start` and `end` from
    /// the apex; the outward normal points away from the axis.
    Cone { apex: Vec3, axis: Vec3, half_angle: f64, start: f64, end: f64 },
}

const UNIT_TOL: f64 = 1e-9;

fn is_unit(v: Vec3) -> bool {
    (geom::norm(v) - 1.0).abs() < UNIT_TOL
}

/// A similarity transform `p ↦ scale·R·p + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    pub fn point(&self, p: Vec3) -> Vec3 {
        geom::add(geom::scale(geom::mat_vec(&self.rotation, p), self.scale), self.translation)
    }

    pub fn direction(&self, d: Vec3) -> Vec3 {
        geom::mat_vec(&self.rotation, d)
    }

    /// Apply `self` after `first`.
    pub fn compose(&self, first: &Similarity) -> Similarity {
        let r = |i: usize, j: usize| (0..3).map(|k| self.rotation[i][k] * first.rotation[k][j]).sum::<f64>();
        Similarity {
            rotation: [[r(0, 0), r(0, 1), r(0, 2)], [r(1, 0), r(1, 1), r(1, 2)], [r(2, 0), r(2, 1), r(2, 2)]],
            scale: self.scale * first.scale,
            translation: self.point(first.translation),
        }
    }
}

impl PrimitiveSpec {
    pub fn label(&self) -> ShapeLabel {
        match self {
            PrimitiveSpec::Plane { .. } => ShapeLabel::Plane,
            PrimitiveSpec::Sphere { .. } => ShapeLabel::Sphere,
            PrimitiveSpec::Cylinder { .. } => ShapeLabel::Cylinder,
            PrimitiveSpec::Cone { .. } => ShapeLabel::Cone,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            PrimitiveSpec::Plane { u, v, region, .. } => {
                region.validate()?;
                is_unit(*u) && is_unit(*v) && geom::dot(*u, *v).abs() < UNIT_TOL
            }
            PrimitiveSpec::Sphere { radius, axis, max_polar, .. } => {
                *radius > 0.0 && is_unit(*axis) && *max_polar > 0.0 && *max_polar <= PI
            }
            PrimitiveSpec::Cylinder { axis, radius, height, .. } => *radius > 0.0 && *height > 0.0 && is_unit(*axis),
            PrimitiveSpec::Cone { axis, half_angle, start, end, .. } => {
                *half_angle > 0.0 && *half_angle < PI / 2.0 && *start >= 0.0 && *end > *start && is_unit(*axis)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid primitive {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            PrimitiveSpec::Plane { region, .. } => region.area(),
            PrimitiveSpec::Sphere { radius, max_polar, .. } => TAU * radius * radius * (1.0 - max_polar.cos()),
            PrimitiveSpec::Cylinder { radius, height, .. } => TAU * radius * height,
            PrimitiveSpec::Cone { half_angle, start, end, .. } => {
                PI * half_angle.tan() / half_angle.cos() * (end * end - start * start)
            }
        }
    }

    /// One area-uniform point and its unit normal.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match self {
            PrimitiveSpec::Plane { origin, u, v, region } => {
                let [a, b] = region.sample(rng);
                let p = geom::axpy(geom::axpy(*origin, a, *u), b, *v);
                (p, geom::cross(*u, *v))
            }
            PrimitiveSpec::Sphere { center, radius, axis, max_polar } => {
                let (e1, e2) = geom::frame(*axis);
                let z = rng.random_range(max_polar.cos()..1.0);
                let s = (1.0 - z * z).max(0.0).sqrt();
                let phi = rng.random_range(0.0..TAU);
                let n = geom::axpy(geom::axpy(geom::scale(*axis, z), s * phi.cos(), e1), s * phi.sin(), e2);
                (geom::axpy(*center, *radius, n), n)
            }
            PrimitiveSpec::Cylinder { base, axis, radius, height, inward } => {
                let (e1, e2) = geom::frame(*axis);
                let phi = rng.random_range(0.0..TAU);
                let t = rng.random_range(0.0..*height);
                let radial = geom::axpy(geom::scale(e1, phi.cos()), phi.sin(), e2);
                let p = geom::axpy(geom::axpy(*base, t, *axis), *radius, radial);
                (p, if *inward { geom::scale(radial, -1.0) } else { radial })
            }
            PrimitiveSpec::Cone { apex, axis, half_angle, start, end } => {
                let (e1, e2) = geom::frame(*axis);
                let t = rng.random_range(start * start..end * end).sqrt();
                let phi = rng.random_range(0.0..TAU);
                let radial = geom::axpy(geom::scale(e1, phi.cos()), phi.sin(), e2);
                let p = geom::axpy(geom::axpy(*apex, t, *axis), t * half_angle.tan(), radial);
                let n = geom::axpy(geom::scale(radial, half_angle.cos()), -half_angle.sin(), *axis);
                (p, n)
            }
        }
    }

    /// Residual of the unbounded surface's implicit equation at `p`
    /// (a distance for plane, sphere and cylinder; the angular deviation
    /// times the distance from the apex for the cone).
    pub fn implicit_residual(&self, p: Vec3) -> f64 {
        match self {
            PrimitiveSpec::Plane { origin, u, v, .. } => geom::dot(geom::sub(p, *origin), geom::cross(*u, *v)).abs(),
            PrimitiveSpec::Sphere { center, radius, .. } => (geom::dist(p, *center) - radius).abs(),
            PrimitiveSpec::Cylinder { base, axis, radius, .. } => {
                let d = geom::sub(p, *base);
                let radial = geom::axpy(d, -geom::dot(d, *axis), *axis);
                (geom::norm(radial) - radius).abs()
            }
            PrimitiveSpec::Cone { apex, axis, half_angle, .. } => {
                let d = geom::sub(p, *apex);
                let t = geom::dot(d, *axis);
                let rho = geom::norm(geom::axpy(d, -t, *axis));
                // distance from (t, rho) to the generator line
                (rho * half_angle.cos() - t * half_angle.sin()).abs()
            }
        }
    }

    /// Angle between `p − apex` and the axis; only meaningful for cones.
    pub fn cone_angle(&self, p: Vec3) -> Option<f64> {
        match self {
            PrimitiveSpec::Cone { apex, axis, .. } => {
                let d = geom::sub(p, *apex);
                Some((geom::dot(d, *axis) / geom::norm(d)).clamp(-1.0, 1.0).acos())
            }
            _ => None,
        }
    }

    /// Euclidean distance from `p` to the bounded patch.
    pub fn patch_distance(&self, p: Vec3) -> f64 {
        match self {
            PrimitiveSpec::Plane { origin, u, v, region } => {
                let d = geom::sub(p, *origin);
                let normal = geom::dot(d, geom::cross(*u, *v));
                let inplane = region.distance([geom::dot(d, *u), geom::dot(d, *v)]);
                (normal * normal + inplane * inplane).sqrt()
            }
            PrimitiveSpec::Sphere { center, radius, axis, max_polar } => {
                let d = geom::sub(p, *center);
                let r = geom::norm(d);
                if r == 0.0 {
                    return *radius;
                }
                let polar = (geom::dot(d, *axis) / r).clamp(-1.0, 1.0).acos();
                if polar <= *max_polar {
                    (r - radius).abs()
                } else {
                    // nearest point is on the rim circle, in the plane of p and the axis
                    let (t, rho) = (geom::dot(d, *axis), geom::norm(geom::axpy(d, -geom::dot(d, *axis), *axis)));
                    let (rt, rr) = (radius * max_polar.cos(), radius * max_polar.sin());
                    ((t - rt).powi(2) + (rho - rr).powi(2)).sqrt()
                }
            }
            PrimitiveSpec::Cylinder { base, axis, radius, height, .. } => {
                let d = geom::sub(p, *base);
                let t = geom::dot(d, *axis);
                let rho = geom::norm(geom::axpy(d, -t, *axis));
                let dt = (-t).max(t - height).max(0.0);
                ((rho - radius).powi(2) + dt * dt).sqrt()
            }
            PrimitiveSpec::Cone { apex, axis, half_angle, start, end } => {
                let d = geom::sub(p, *apex);
                let t = geom::dot(d, *axis);
                let rho = geom::norm(geom::axpy(d, -t, *axis));
                let tan = half_angle.tan();
                segment_distance_2d([t, rho], [*start, start * tan], [*end, end * tan])
            }
        }
    }

    pub fn transformed(&self, s: &Similarity) -> PrimitiveSpec {
        let len = |x: f64| x * s.scale;
        match self {
            PrimitiveSpec::Plane { origin, u, v, region } => {
                let region = match *region {
                    Region::Rectangle { half_u, half_v, hole } => Region::Rectangle {
                        half_u: len(half_u),
                        half_v: len(half_v),
                        hole: len(hole),
                    },
                    Region::Annulus { r_in, r_out } => Region::Annulus { r_in: len(r_in), r_out: len(r_out) },
                    Region::Polygon { sides, radius, hole } => Region::Polygon {
                        sides,
                        radius: len(radius),
                        hole: len(hole),
                    },
                };
                PrimitiveSpec::Plane { origin: s.point(*origin), u: s.direction(*u), v: s.direction(*v), region }
            }
            PrimitiveSpec::Sphere { center, radius, axis, max_polar } => PrimitiveSpec::Sphere {
                center: s.point(*center),
                radius: len(*radius),
                axis: s.direction(*axis),
                max_polar: *max_polar,
            },
            PrimitiveSpec::Cylinder { base, axis, radius, height, inward } => PrimitiveSpec::Cylinder {
                base: s.point(*base),
                axis: s.direction(*axis),
                radius: len(*radius),
                height: len(*height),
                inward: *inward,
            },
            PrimitiveSpec::Cone { apex, axis, half_angle, start, end } => PrimitiveSpec::Cone {
                apex: s.point(*apex),
                axis: s.direction(*axis),
                half_angle: *half_angle,
                start: len(*start),
                end: len(*end),
            },
        }
    }
}

/// `n` area-uniform points on one primitive, labeled with its shape.
pub fn sample_primitive<R: Rng + ?Sized>(spec: &PrimitiveSpec, n: usize, rng: &mut R) -> Result<PointCloud> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot sample zero points"));
    }
    let (points, normals): (Vec<Vec3>, Vec<Vec3>) = (0..n).map(|_| spec.sample_point(rng)).unzip();
    PointCloud::new(points)?
        .with_normals(normals)?
        .with_labels(vec![spec.label(); n])
}
