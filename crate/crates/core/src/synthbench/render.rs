use rand::Rng;

use super::{DamageClass, DefectSpec, Environment, Geometry, Sample, Severity};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{RngStreams, StreamRng};

const ASPHALT_MEAN: f32 = 0.6;

/// Renders image, mask, and caption for `spec` on a `size`×`size` canvas.
pub fn render_sample(spec: &DefectSpec, size: usize, seed: u64) -> Result<Sample> {
    check_bounds(&spec.geometry, size as f64)?;
    let streams = RngStreams::new(seed);
    let mut image = asphalt(size, &mut streams.stream("background"));
    let mut mask = Mask::empty(size, size);
    let mut rng = streams.stream("defect");
    draw(spec, &mut image, &mut mask, &mut rng);
    apply_environment(&mut image, spec.environment);
    Ok(Sample {
        id: String::new(),
        image: image.quantized(),
        mask,
        label: spec.class.index(),
        caption: super::generate_caption(spec),
        spec: spec.clone(),
    })
}

/// The same render with the defect pass skipped.
pub fn render_background(spec: &DefectSpec, size: usize, seed: u64) -> Image {
    let streams = RngStreams::new(seed);
    let mut image = asphalt(size, &mut streams.stream("background"));
    apply_environment(&mut image, spec.environment);
    image.quantized()
}

fn check_bounds(g: &Geometry, size: f64) -> Result<()> {
    let inside = |x: f64, y: f64| (0.0..=size).contains(&x) && (0.0..=size).contains(&y);
    let ok = match g {
        Geometry::Polyline { points, width } => {
            points.len() >= 2 && *width > 0.0 && points.iter().all(|p| inside(p[0], p[1]))
        }
        Geometry::Ellipse { cx, cy, rx, ry } => {
            *rx > 0.0 && *ry > 0.0 && inside(cx - rx, cy - ry) && inside(cx + rx, cy + ry)
        }
        Geometry::Rect { x0, y0, w, h } => {
            *w > 0.0 && *h > 0.0 && inside(*x0, *y0) && inside(x0 + w, y0 + h)
        }
        Geometry::Lattice {
            x0,
            y0,
            size: s,
            spacing,
            width,
        } => {
            *spacing > 0.0 && *width > 0.0 && inside(*x0, *y0) && inside(x0 + s, y0 + s)
        }
        Geometry::Composite { parts } => {
            for p in parts {
                check_bounds(&p.geometry, size)?;
            }
            !parts.is_empty()
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("geometry outside the {size}-pixel canvas: {g:?}")))
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Value-noise lattice, bilinearly interpolated.
fn value_noise(size: usize, cell: usize, rng: &mut StreamRng) -> Vec<f32> {
    let n = size / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f32 / cell as f32;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f32 / cell as f32;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let a = lattice[iy * n + ix];
            let b = lattice[iy * n + ix + 1];
            let c = lattice[(iy + 1) * n + ix];
            let d = lattice[(iy + 1) * n + ix + 1];
            let top = a + (b - a) * tx;
            let bot = c + (d - c) * tx;
            out[y * size + x] = top + (bot - top) * ty;
        }
    }
    out
}

fn asphalt(size: usize, rng: &mut StreamRng) -> Image {
    let coarse = value_noise(size, 16, rng);
    let fine = value_noise(size, 4, rng);
    let pixels = (0..size * size)
        .map(|i| {
            let grain = rng.gen::<f32>() * 2.0 - 1.0;
            ASPHALT_MEAN + 0.05 * coarse[i] + 0.025 * fine[i] + 0.02 * grain
        })
        .collect();
    Image {
        width: size,
        height: size,
        pixels,
    }
}

fn apply_environment(image: &mut Image, env: Environment) {
    let f: fn(f32) -> f32 = match env {
        Environment::Bright => |v| 0.12 + 1.05 * v,
        Environment::Wet => |v| 0.8 * v - 0.04,
        Environment::Foggy => |v| 0.5 * v + 0.42,
        Environment::Dark => |v| 0.55 * v,
    };
    for p in image.pixels.iter_mut() {
        *p = f(*p).clamp(0.0, 1.0);
    }
}

struct Canvas<'a> {
    image: &'a mut Image,
    mask: &'a mut Mask,
}

impl Canvas<'_> {
    fn size(&self) -> usize {
        self.image.width
    }

    fn darken(&mut self, x: usize, y: usize, depth: f32) {
        let v = self.image.get(x, y) * (1.0 - depth);
        self.image.set(x, y, v);
        self.mask.set(x, y);
    }

    fn paint(&mut self, x: usize, y: usize, v: f32) {
        self.image.set(x, y, v);
        self.mask.set(x, y);
    }
}

fn seg_dist(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn stroke(canvas: &mut Canvas, points: &[[f64; 2]], width: f64, depth: f32, rng: &mut StreamRng) {
    let half = width / 2.0;
    let size = canvas.size();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let lo = |v: f64| ((v - half - 1.0).floor().max(0.0)) as usize;
    let hi = |v: f64| ((v + half + 1.0).ceil() as usize).min(size);
    for y in lo(y0)..hi(y1) {
        for x in lo(x0)..hi(x1) {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = points
                .windows(2)
                .map(|w| seg_dist(cx, cy, w[0], w[1]))
                .fold(f64::MAX, f64::min);
            if d <= half {
                let jitter = rng.gen::<f32>() * 0.08;
                canvas.darken(x, y, (depth + jitter).min(0.95));
            }
        }
    }
}

fn draw(spec: &DefectSpec, image: &mut Image, mask: &mut Mask, rng: &mut StreamRng) {
    let mut canvas = Canvas { image, mask };
    draw_part(spec, &mut canvas, rng);
}

fn draw_part(spec: &DefectSpec, canvas: &mut Canvas, rng: &mut StreamRng) {
    let depth = spec.severity.depth();
    match (&spec.geometry, spec.class) {
        (Geometry::Composite { parts }, _) => {
            for p in parts {
                draw_part(p, canvas, rng);
            }
        }
        (Geometry::Polyline { points, width }, _) => stroke(canvas, points, *width, depth, rng),
        (&Geometry::Ellipse { cx, cy, rx, ry }, DamageClass::Discoloration) => {
            blob(canvas, cx, cy, rx, ry, spec.severity)
        }
        (&Geometry::Ellipse { cx, cy, rx, ry }, _) => pothole(canvas, cx, cy, rx, ry, depth, rng),
        (&Geometry::Rect { x0, y0, w, h }, _) => patch(canvas, x0, y0, w, h, depth, rng),
        (
            &Geometry::Lattice {
                x0,
                y0,
                size,
                spacing,
                width,
            },
            _,
        ) => lattice(canvas, x0, y0, size, spacing, width, depth, rng),
    }
}

fn pothole(canvas: &mut Canvas, cx: f64, cy: f64, rx: f64, ry: f64, depth: f32, rng: &mut StreamRng) {
    let (pa, pb): (f64, f64) = (rng.gen::<f64>() * 6.3, rng.gen::<f64>() * 6.3);
    let size = canvas.size();
    let x_range = ((cx - rx - 1.0).floor().max(0.0) as usize)..((cx + rx + 2.0) as usize).min(size);
    let y_range = ((cy - ry - 1.0).floor().max(0.0) as usize)..((cy + ry + 2.0) as usize).min(size);
    for y in y_range {
        for x in x_range.clone() {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let phi = dy.atan2(dx);
            let rim = 1.0 + 0.05 * (0.6 * (3.0 * phi + pa).sin() + 0.4 * (5.0 * phi + pb).sin());
            let rho = (dx * dx + dy * dy).sqrt();
            if rho <= rim {
                let bowl = 0.85 + 0.15 * (1.0 - (rho / rim) as f32);
                canvas.darken(x, y, (depth * bowl + 0.1).min(0.95));
            }
        }
    }
}

fn blob(canvas: &mut Canvas, cx: f64, cy: f64, rx: f64, ry: f64, sev: Severity) {
    let size = canvas.size();
    let strength = 0.25 * sev.depth();
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let r2 = dx * dx + dy * dy;
            if r2 < 1.0 {
                let w = (1.0 - r2) as f32;
                let v = canvas.image.get(x, y) * (1.0 - strength * (0.35 + 0.65 * w));
                canvas.paint(x, y, v);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn patch(canvas: &mut Canvas, x0: f64, y0: f64, w: f64, h: f64, depth: f32, rng: &mut StreamRng) {
    let level = ASPHALT_MEAN * (1.0 - 0.7 * depth);
    let size = canvas.size();
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            if cx >= x0 && cx < x0 + w && cy >= y0 && cy < y0 + h {
                let v = level + 0.015 * (rng.gen::<f32>() * 2.0 - 1.0);
                canvas.paint(x, y, v);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn lattice(
    canvas: &mut Canvas,
    x0: f64,
    y0: f64,
    size: f64,
    spacing: f64,
    width: f64,
    depth: f32,
    rng: &mut StreamRng,
) {
    let lines = (size / spacing).floor() as usize + 1;
    let clamp = |v: f64| v.clamp(0.0, size);
    for axis in 0..2 {
        for k in 0..lines {
            let base = k as f64 * spacing + (rng.gen::<f64>() - 0.5) * 1.5;
            let pts: Vec<[f64; 2]> = (0..4)
                .map(|s| {
                    let along = s as f64 * size / 3.0;
                    let across = clamp(base + (rng.gen::<f64>() - 0.5) * 2.0);
                    if axis == 0 {
                        [x0 + across, y0 + along]
                    } else {
                        [x0 + along, y0 + across]
                    }
                })
                .collect();
            stroke(canvas, &pts, width, depth, rng);
        }
    }
}
