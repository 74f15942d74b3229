use rand::Rng;

use super::{
    round_dimension, DamageClass, DefectSpec, Environment, Geometry, PositionTag, Severity,
    METERS_PER_PIXEL,
};
use crate::rng::StreamRng;

fn pick<T: Copy>(rng: &mut StreamRng, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Random spec of a random class drawn from `weights` (indexed like
/// [`DamageClass::ALL`]).
pub fn sample_spec(rng: &mut StreamRng, weights: &[f64], size: usize) -> DefectSpec {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    let mut class = DamageClass::ALL[0];
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            class = DamageClass::ALL[i];
            break;
        }
        r -= w;
    }
    sample_spec_in_class(rng, class, size)
}

/// Random spec of the given class, geometry inside the canvas.
pub fn sample_spec_in_class(rng: &mut StreamRng, class: DamageClass, size: usize) -> DefectSpec {
    let severity = pick(rng, Severity::ALL);
    let environment = pick(rng, Environment::ALL);
    let mut geometry = sample_geometry(rng, class, severity, size as f64);
    if let Geometry::Composite { parts } = &mut geometry {
        for p in parts.iter_mut() {
            p.environment = environment;
        }
    }
    finish(class, geometry, severity, environment, size as f64)
}

fn finish(
    class: DamageClass,
    geometry: Geometry,
    severity: Severity,
    environment: Environment,
    size: f64,
) -> DefectSpec {
    let (x0, _, x1, _) = extent(&geometry);
    let position = PositionTag::from_column_fraction((x0 + x1) / 2.0 / size);
    DefectSpec {
        class,
        length_m: round_dimension(pixel_dimension(&geometry) * METERS_PER_PIXEL),
        geometry,
        severity,
        position,
        environment,
    }
}

/// Axis-aligned extent `(x0, y0, x1, y1)` of the geometry.
pub(crate) fn extent(g: &Geometry) -> (f64, f64, f64, f64) {
    match g {
        Geometry::Polyline { points, width } => {
            let h = width / 2.0;
            points.iter().fold(
                (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
                |(a, b, c, d), p| (a.min(p[0] - h), b.min(p[1] - h), c.max(p[0] + h), d.max(p[1] + h)),
            )
        }
        Geometry::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
        Geometry::Rect { x0, y0, w, h } => (*x0, *y0, x0 + w, y0 + h),
        Geometry::Lattice { x0, y0, size, .. } => (*x0, *y0, x0 + size, y0 + size),
        Geometry::Composite { parts } => parts.iter().map(|p| extent(&p.geometry)).fold(
            (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
            |(a, b, c, d), (e, f, g, h)| (a.min(e), b.min(f), c.max(g), d.max(h)),
        ),
    }
}

/// Characteristic size in pixels: stroke length, diameter, or span.
fn pixel_dimension(g: &Geometry) -> f64 {
    match g {
        Geometry::Polyline { points, .. } => points
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum(),
        Geometry::Ellipse { rx, ry, .. } => rx + ry,
        Geometry::Rect { w, h, .. } => w.max(*h),
        Geometry::Lattice { size, .. } => *size,
        Geometry::Composite { .. } => {
            let (x0, y0, x1, y1) = extent(g);
            (x1 - x0).max(y1 - y0)
        }
    }
}

/// Straight-ish crack from `start` along unit direction `dir`, split into
/// `segments` with perpendicular jitter.
fn crack_path(
    rng: &mut StreamRng,
    start: [f64; 2],
    dir: [f64; 2],
    length: f64,
    segments: usize,
    jitter: f64,
) -> Vec<[f64; 2]> {
    let normal = [-dir[1], dir[0]];
    (0..=segments)
        .map(|s| {
            let t = length * s as f64 / segments as f64;
            let off = if s == 0 || s == segments {
                0.0
            } else {
                uniform(rng, -jitter, jitter)
            };
            [
                start[0] + dir[0] * t + normal[0] * off,
                start[1] + dir[1] * t + normal[1] * off,
            ]
        })
        .collect()
}

fn clamp_points(points: &mut [[f64; 2]], lo_x: f64, hi_x: f64, lo_y: f64, hi_y: f64) {
    for p in points.iter_mut() {
        p[0] = p[0].clamp(lo_x, hi_x);
        p[1] = p[1].clamp(lo_y, hi_y);
    }
}

fn sample_geometry(rng: &mut StreamRng, class: DamageClass, sev: Severity, s: f64) -> Geometry {
    let width = sev.stroke_width();
    let half = width / 2.0;
    let margin = half + 1.0;
    match class {
        DamageClass::Longitudinal | DamageClass::Transverse => {
            let length = uniform(rng, 0.44 * s, 0.86 * s);
            let tilt = uniform(rng, -15f64, 15.0).to_radians();
            let (dir, cx) = if class == DamageClass::Longitudinal {
                // keep clear of the edge and centerline bands
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let off = uniform(rng, 0.1, 0.29);
                ([tilt.sin(), tilt.cos()], s * (0.5 + side * off))
            } else {
                ([tilt.cos(), tilt.sin()], uniform(rng, 0.35 * s, 0.65 * s))
            };
            let cy = uniform(rng, 0.3 * s, 0.7 * s);
            let along = length.min(s - 2.0 * margin);
            let start = [cx - dir[0] * along / 2.0, cy - dir[1] * along / 2.0];
            let mut pts = crack_path(rng, start, dir, along, 4, 1.0);
            clamp_points(&mut pts, margin, s - margin, margin, s - margin);
            Geometry::Polyline { points: pts, width }
        }
        DamageClass::EdgeCrack | DamageClass::CenterlineCrack => {
            let length = uniform(rng, 0.38 * s, 0.86 * s);
            let (lo, hi) = if class == DamageClass::EdgeCrack {
                // outer 15% band
                let band = 0.15 * s;
                if rng.gen::<bool>() {
                    (half + 0.6, band - half - 0.6)
                } else {
                    (s - band + half + 0.6, s - half - 0.6)
                }
            } else {
                // middle 10% band
                (0.45 * s + half + 0.6, 0.55 * s - half - 0.6)
            };
            let x = uniform(rng, lo, hi);
            let y0 = uniform(rng, margin, s - margin - length.min(s - 2.0 * margin));
            let along = length.min(s - 2.0 * margin);
            let mut pts = crack_path(rng, [x, y0], [0.0, 1.0], along, 5, 0.8);
            clamp_points(&mut pts, lo, hi, margin, s - margin);
            Geometry::Polyline { points: pts, width }
        }
        DamageClass::Irregular => {
            let steps = rng.gen_range(24..48);
            let mut p = [uniform(rng, 0.3 * s, 0.7 * s), uniform(rng, 0.3 * s, 0.7 * s)];
            let mut heading = uniform(rng, 0.0, std::f64::consts::TAU);
            let mut pts = vec![p];
            for _ in 0..steps {
                heading += uniform(rng, -0.9, 0.9);
                let mut next = [p[0] + 2.0 * heading.cos(), p[1] + 2.0 * heading.sin()];
                if next[0] < margin || next[0] > s - margin {
                    heading = std::f64::consts::PI - heading;
                    next[0] = next[0].clamp(margin, s - margin);
                }
                if next[1] < margin || next[1] > s - margin {
                    heading = -heading;
                    next[1] = next[1].clamp(margin, s - margin);
                }
                pts.push(next);
                p = next;
            }
            Geometry::Polyline { points: pts, width }
        }
        DamageClass::Pothole => {
            let r = uniform(rng, 0.12 * s, 0.22 * s);
            let aspect = uniform(rng, 0.8, 1.25);
            let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
            Geometry::Ellipse {
                cx: uniform(rng, rx + 1.5, s - rx - 1.5),
                cy: uniform(rng, ry + 1.5, s - ry - 1.5),
                rx,
                ry,
            }
        }
        DamageClass::Discoloration => {
            let (rx, ry) = (uniform(rng, 0.15 * s, 0.28 * s), uniform(rng, 0.15 * s, 0.28 * s));
            Geometry::Ellipse {
                cx: uniform(rng, rx, s - rx),
                cy: uniform(rng, ry, s - ry),
                rx,
                ry,
            }
        }
        DamageClass::PatchRepair => {
            let (w, h) = (uniform(rng, 0.25 * s, 0.5 * s), uniform(rng, 0.25 * s, 0.5 * s));
            Geometry::Rect {
                x0: uniform(rng, 0.0, s - w),
                y0: uniform(rng, 0.0, s - h),
                w,
                h,
            }
        }
        DamageClass::Alligator => {
            let size = uniform(rng, 0.3 * s, 0.5 * s);
            Geometry::Lattice {
                x0: uniform(rng, 1.0, s - size - 1.0),
                y0: uniform(rng, 1.0, s - size - 1.0),
                size,
                spacing: uniform(rng, 5.0, 7.0),
                width: width.min(2.0),
            }
        }
        DamageClass::Mixed => {
            let pool: Vec<DamageClass> = DamageClass::ALL
                .iter()
                .copied()
                .filter(|&c| c != DamageClass::Mixed)
                .collect();
            let a = pick(rng, &pool);
            let b = loop {
                let b = pick(rng, &pool);
                if b != a {
                    break b;
                }
            };
            let parts = [a, b]
                .into_iter()
                .map(|c| {
                    let g = sample_geometry(rng, c, sev, s);
                    finish(c, g, sev, Environment::Bright, s)
                })
                .collect();
            Geometry::Composite { parts }
        }
    }
}
