//! Object categories assembled from primitives, each with one regime
//! parameter that controls its proportions.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::primitives::{PrimitiveSpec, Region};
use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// Rectangular block with a bore through it.
    Box,
    /// Cylinder closed by a flat disk at one end and a hemisphere at the other.
    CappedCylinder,
    /// Hexagonal head, cylindrical shank, conical tip.
    BoltLike,
    /// Sphere resting on a square or round plate.
    SphereOnPlane,
    /// Two cone frusta, sometimes with a cylindrical collar, closed by disks.
    ConeFrustumStack,
    /// Annulus faces with inner and outer rims and a conical chamfer.
    Washer,
    PurePlane,
    PureSphere,
    PureCylinder,
    PureCone,
}

impl Category {
    pub const COMPOSITES: [Category; 6] = [
        Category::Box,
        Category::CappedCylinder,
        Category::BoltLike,
        Category::SphereOnPlane,
        Category::ConeFrustumStack,
        Category::Washer,
    ];

    pub const PURE: [Category; 4] = [
        Category::PurePlane,
        Category::PureSphere,
        Category::PureCylinder,
        Category::PureCone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::CappedCylinder => "capped-cylinder",
            Category::BoltLike => "bolt-like",
            Category::SphereOnPlane => "sphere-on-plane",
            Category::ConeFrustumStack => "cone-frustum-stack",
            Category::Washer => "washer",
            Category::PurePlane => "pure-plane",
            Category::PureSphere => "pure-sphere",
            Category::PureCylinder => "pure-cylinder",
            Category::PureCone => "pure-cone",
        }
    }

    /// Primitives in a local frame for regime parameter `t ∈ [0, 1)`.
    pub fn build<R: Rng + ?Sized>(self, t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
        match self {
            Category::Box => block(t, rng),
            Category::CappedCylinder => capped_cylinder(t, rng),
            Category::BoltLike => bolt(t, rng),
            Category::SphereOnPlane => sphere_on_plane(t, rng),
            Category::ConeFrustumStack => frustum_stack(t, rng),
            Category::Washer => washer(t, rng),
            Category::PurePlane => vec![PrimitiveSpec::Plane {
                origin: [0.0; 3],
                u: X,
                v: Y,
                region: Region::Rectangle { half_u: 1.0, half_v: 0.2 + 0.8 * t, hole: 0.0 },
            }],
            Category::PureSphere => vec![PrimitiveSpec::Sphere {
                center: [0.0; 3],
                radius: 1.0,
                axis: Z,
                max_polar: PI * (0.5 + 0.5 * t),
            }],
            Category::PureCylinder => vec![PrimitiveSpec::Cylinder {
                base: [0.0; 3],
                axis: Z,
                radius: 0.5,
                height: 0.5 + 2.5 * t,
                inward: false,
            }],
            Category::PureCone => {
                let alpha = (15.0 + 45.0 * t).to_radians();
                vec![PrimitiveSpec::Cone {
                    apex: [0.0; 3],
                    axis: Z,
                    half_angle: alpha,
                    start: rng.random_range(0.0..0.3),
                    end: 1.0,
                }]
            }
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::COMPOSITES
            .iter()
            .chain(&Category::PURE)
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Category::COMPOSITES.iter().chain(&Category::PURE).map(|c| c.name()).collect();
                Error::Validation(format!("unknown category `{s}` (known: {})", known.join(", ")))
            })
    }
}

const X: Vec3 = [1.0, 0.0, 0.0];
const Y: Vec3 = [0.0, 1.0, 0.0];
const Z: Vec3 = [0.0, 0.0, 1.0];
const NEG_Y: Vec3 = [0.0, -1.0, 0.0];

fn neg(v: Vec3) -> Vec3 {
    [-v[0], -v[1], -v[2]]
}

/// Horizontal face at height `z` facing up or down; flipping `v` keeps the
/// polygon vertices of both faces aligned.
fn face(z: f64, up: bool, region: Region) -> PrimitiveSpec {
    PrimitiveSpec::Plane {
        origin: [0.0, 0.0, z],
        u: X,
        v: if up { Y } else { NEG_Y },
        region,
    }
}

fn disk(r: f64) -> Region {
    Region::Annulus { r_in: 0.0, r_out: r }
}

fn cylinder(z0: f64, z1: f64, radius: f64, inward: bool) -> PrimitiveSpec {
    PrimitiveSpec::Cylinder { base: [0.0, 0.0, z0], axis: Z, radius, height: z1 - z0, inward }
}

/// Lateral cone surface between `(z0, r0)` and `(z1, r1)` on the z axis,
/// `z0 < z1`, `r0 != r1`; the normal faces away from the axis.
fn frustum(z0: f64, r0: f64, z1: f64, r1: f64) -> PrimitiveSpec {
    let tan = (r0 - r1).abs() / (z1 - z0);
    let half_angle = tan.atan();
    if r0 > r1 {
        // narrows upward: apex above, axis pointing down
        let apex_z = z0 + r0 / tan;
        PrimitiveSpec::Cone { apex: [0.0, 0.0, apex_z], axis: neg(Z), half_angle, start: apex_z - z1, end: apex_z - z0 }
    } else {
        let apex_z = z0 - r0 / tan;
        PrimitiveSpec::Cone { apex: [0.0, 0.0, apex_z], axis: Z, half_angle, start: z0 - apex_z, end: z1 - apex_z }
    }
}

fn block<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
    let (a, b) = (1.0, rng.random_range(0.6..1.0));
    let c = 0.2 + 0.8 * t;
    let r = rng.random_range(0.3..0.55) * b;
    let side = |n: Vec3, u: Vec3, v: Vec3, d: f64, hu: f64, hv: f64| PrimitiveSpec::Plane {
        origin: [n[0] * d, n[1] * d, n[2] * d],
        u,
        v,
        region: Region::Rectangle { half_u: hu, half_v: hv, hole: 0.0 },
    };
    vec![
        face(c, true, Region::Rectangle { half_u: a, half_v: b, hole: r }),
        face(-c, false, Region::Rectangle { half_u: a, half_v: b, hole: r }),
        side(X, Y, Z, a, b, c),
        side(neg(X), Z, Y, a, c, b),
        side(Y, Z, X, b, c, a),
        side(NEG_Y, X, Z, b, a, c),
        cylinder(-c, c, r, true),
    ]
}

fn capped_cylinder<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
    let r = rng.random_range(0.8..1.2);
    let h = r * (0.5 + 2.5 * t);
    vec![
        face(0.0, false, disk(r)),
        cylinder(0.0, h, r, false),
        PrimitiveSpec::Sphere { center: [0.0, 0.0, h], radius: r, axis: Z, max_polar: FRAC_PI_2 },
    ]
}

fn bolt<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
    let shank = rng.random_range(0.4..0.55);
    let head = 1.0;
    let head_h = rng.random_range(0.4..0.7);
    let length = shank * (2.0 + 6.0 * t);
    let tip = shank * rng.random_range(0.6..1.2);
    let apothem = head * (PI / 6.0).cos();
    let mut out = vec![
        face(head_h, true, Region::Polygon { sides: 6, radius: head, hole: 0.0 }),
        face(0.0, false, Region::Polygon { sides: 6, radius: head, hole: shank }),
    ];
    for i in 0..6 {
        let th = (i as f64 + 0.5) * PI / 3.0;
        let (c, s) = (th.cos(), th.sin());
        out.push(PrimitiveSpec::Plane {
            origin: [apothem * c, apothem * s, head_h / 2.0],
            u: [-s, c, 0.0],
            v: Z,
            region: Region::Rectangle { half_u: head / 2.0, half_v: head_h / 2.0, hole: 0.0 },
        });
    }
    out.push(cylinder(-length, 0.0, shank, false));
    out.push(PrimitiveSpec::Cone {
        apex: [0.0, 0.0, -length - tip],
        axis: Z,
        half_angle: (shank / tip).atan(),
        start: 0.0,
        end: tip,
    });
    out
}

fn sphere_on_plane<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
    let radius = 0.25 + 0.55 * t;
    let plate = if rng.random_bool(0.5) {
        Region::Rectangle { half_u: 1.0, half_v: rng.random_range(0.7..1.0), hole: 0.0 }
    } else {
        disk(1.0)
    };
    vec![
        face(0.0, true, plate),
        PrimitiveSpec::Sphere { center: [0.0, 0.0, radius], radius, axis: Z, max_polar: PI },
    ]
}

fn frustum_stack<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
    let a1 = (15.0 + 45.0 * t).to_radians();
    let a2 = rng.random_range(15f64..60.0).to_radians();
    let r0 = 1.0;
    let r1 = r0 * rng.random_range(0.45..0.7);
    let r2 = r1 * rng.random_range(0.3..0.6);
    let z1 = (r0 - r1) / a1.tan();
    let mut out = vec![face(0.0, false, disk(r0)), frustum(0.0, r0, z1, r1)];
    let mut z = z1;
    if rng.random_bool(0.5) {
        let collar = rng.random_range(0.2..0.6);
        out.push(cylinder(z, z + collar, r1, false));
        z += collar;
    }
    let z2 = z + (r1 - r2) / a2.tan();
    out.push(frustum(z, r1, z2, r2));
    out.push(face(z2, true, disk(r2)));
    out
}

fn washer<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Vec<PrimitiveSpec> {
    let outer = 1.0;
    let inner = outer * (0.3 + 0.5 * t);
    let thick = (outer - inner) * rng.random_range(0.15..0.5);
    let chamfer = thick * rng.random_range(0.3..0.6);
    vec![
        face(thick, true, Region::Annulus { r_in: inner, r_out: outer - chamfer }),
        face(0.0, false, Region::Annulus { r_in: inner, r_out: outer }),
        frustum(thick - chamfer, outer, thick, outer - chamfer),
        cylinder(0.0, thick - chamfer, outer, false),
        cylinder(0.0, thick, inner, true),
    ]
}
