//! Positional encodings for the vision encoder.
//!
//! The orientation-aware strategy builds a per-patch descriptor
//! `[x, y, cos θ, sin θ]` from the patch centre and the dominant structure
//! orientation, then maps it through a two-layer MLP. Four baselines share the
//! same interface: none, sinusoidal absolute, learnable absolute, and a
//! relative bias on attention logits.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::truncated_normal;
use crate::tensor::{ParamId, ParamStore, Real, Session, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeStrategy {
    None,
    SinusoidalAbsolute,
    LearnableAbsolute,
    Relative,
    Dape,
}

impl PeStrategy {
    pub const ALL: [PeStrategy; 5] = [
        PeStrategy::None,
        PeStrategy::SinusoidalAbsolute,
        PeStrategy::LearnableAbsolute,
        PeStrategy::Relative,
        PeStrategy::Dape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeStrategy::None => "none",
            PeStrategy::SinusoidalAbsolute => "sinusoidal_absolute",
            PeStrategy::LearnableAbsolute => "learnable_absolute",
            PeStrategy::Relative => "relative",
            PeStrategy::Dape => "dape",
        }
    }
}

impl fmt::Display for PeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown positional strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DapeConfig {
    pub mlp_hidden: usize,
    /// Mean squared gradient magnitude below which a patch counts as flat.
    pub energy_floor: f64,
}

impl Default for DapeConfig {
    fn default() -> Self {
        Self {
            mlp_hidden: 32,
            energy_floor: 1e-3,
        }
    }
}

/// `[x, y, cos θ, sin θ]` for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalDescriptor {
    pub x: f64,
    pub y: f64,
    pub cos_theta: f64,
    pub sin_theta: f64,
}

impl PositionalDescriptor {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.cos_theta, self.sin_theta]
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel gradients (scaled by 1/8 to approximate a unit-step derivative)
/// with replicated borders. Returns `(gx, gy)` row-major.
pub fn sobel(patch: &[f32], side: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, side as isize - 1) as usize;
        let yc = y.clamp(0, side as isize - 1) as usize;
        patch[yc * side + xc] as f64
    };
    let mut gx = vec![0.0; side * side];
    let mut gy = vec![0.0; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for kx in 0..3 {
                    let v = at(x + kx as isize - 1, y + ky as isize - 1);
                    sx += rx[kx] * v;
                    sy += ry[kx] * v;
                }
            }
            gx[y as usize * side + x as usize] = sx / 8.0;
            gy[y as usize * side + x as usize] = sy / 8.0;
        }
    }
    (gx, gy)
}

/// Dominant along-structure orientation of a square single-channel patch, in
/// `[0, π)`. Angles are measured from the +column axis toward +row (image
/// rows grow downward). Flat patches return exactly 0.
pub fn estimate_orientation(patch: &[f32], side: usize, energy_floor: f64) -> f64 {
    debug_assert_eq!(patch.len(), side * side);
    let (gx, gy) = sobel(patch, side);
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in gx.iter().zip(&gy) {
        jxx += a * a;
        jyy += b * b;
        jxy += a * b;
    }
    let n = (side * side) as f64;
    if (jxx + jyy) / n < energy_floor {
        return 0.0;
    }
    // Leading eigenvector of the structure tensor is the gradient direction;
    // the structure runs perpendicular to it.
    let grad_dir = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
    let theta = (grad_dir + PI / 2.0).rem_euclid(PI);
    if theta >= PI {
        0.0
    } else {
        theta
    }
}

/// Orientation of every patch of `image`, row-major over the patch grid.
pub fn orientation_grid(image: &Image, patch: usize, energy_floor: f64) -> Vec<f64> {
    let g = image.width / patch;
    let mut buf = vec![0.0f32; patch * patch];
    let mut out = Vec::with_capacity(g * g);
    for gi in 0..g {
        for gj in 0..g {
            for y in 0..patch {
                for x in 0..patch {
                    buf[y * patch + x] = image.get(gj * patch + x, gi * patch + y);
                }
            }
            out.push(estimate_orientation(&buf, patch, energy_floor));
        }
    }
    out
}

/// Descriptor of grid cell `(i, j)` (row, column) in a `g`×`g` grid.
pub fn build_descriptor(i: usize, j: usize, g: usize, theta: f64) -> Result<PositionalDescriptor> {
    if i >= g || j >= g {
        return Err(Error::Invalid(format!("cell ({i}, {j}) outside a {g}×{g} grid")));
    }
    Ok(PositionalDescriptor {
        x: (j as f64 + 0.5) / g as f64,
        y: (i as f64 + 0.5) / g as f64,
        cos_theta: theta.cos(),
        sin_theta: theta.sin(),
    })
}

/// Descriptors for all patches of one image.
pub fn image_descriptors(image: &Image, patch: usize, energy_floor: f64) -> Vec<PositionalDescriptor> {
    let g = image.width / patch;
    orientation_grid(image, patch, energy_floor)
        .into_iter()
        .enumerate()
        .map(|(k, th)| build_descriptor(k / g, k % g, g, th).expect("in range"))
        .collect()
}

/// Fixed sine/cosine code of a flattened position: even dims `sin`, odd dims `cos`.
pub fn sinusoidal_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let i = (k / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / d as f64);
            let a = pos as f64 * freq;
            if k % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// `(Δrow, Δcol)` bucket for every query/key pair of a `g`×`g` grid.
pub fn relative_index(g: usize) -> Vec<usize> {
    let l = g * g;
    let span = 2 * g - 1;
    let mut idx = Vec::with_capacity(l * l);
    for q in 0..l {
        for k in 0..l {
            let dr = (k / g) as isize - (q / g) as isize + g as isize - 1;
            let dc = (k % g) as isize - (q % g) as isize + g as isize - 1;
            idx.push(dr as usize * span + dc as usize);
        }
    }
    idx
}

/// Parameters and constants of the chosen positional strategy.
#[derive(Debug, Clone)]
pub struct PositionalEncoder {
    pub strategy: PeStrategy,
    pub grid: usize,
    pub dim: usize,
    pub config: DapeConfig,
    mlp: Option<[ParamId; 4]>,
    table: Option<ParamId>,
    relative: Vec<ParamId>,
    relative_index: Option<Arc<Vec<usize>>>,
    sinusoid: Option<Vec<f64>>,
}

impl PositionalEncoder {
    pub fn new<T: Real, R: Rng>(
        strategy: PeStrategy,
        grid: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        config: DapeConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let init = |rng: &mut R, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| truncated_normal(rng, 0.02)).collect();
            Tensor::from_f64(shape, &v).expect("shape")
        };
        let mut pe = Self {
            strategy,
            grid,
            dim,
            config,
            mlp: None,
            table: None,
            relative: Vec::new(),
            relative_index: None,
            sinusoid: None,
        };
        match strategy {
            PeStrategy::None => {}
            PeStrategy::SinusoidalAbsolute => {
                pe.sinusoid = Some((0..grid * grid).flat_map(|p| sinusoidal_code(p, dim)).collect());
            }
            PeStrategy::LearnableAbsolute => {
                pe.table = Some(store.add("pos.table", init(rng, &[grid * grid, dim])));
            }
            PeStrategy::Relative => {
                let span = (2 * grid - 1) * (2 * grid - 1);
                pe.relative = (0..layers)
                    .map(|l| store.add(format!("pos.rel{l}"), Tensor::zeros(&[heads, span])))
                    .collect();
                pe.relative_index = Some(Arc::new(relative_index(grid)));
            }
            PeStrategy::Dape => {
                let h = config.mlp_hidden;
                let w1 = store.add("pos.mlp.w1", init(rng, &[4, h]));
                let b1 = store.add("pos.mlp.b1", Tensor::zeros(&[h]));
                let w2 = store.add("pos.mlp.w2", init(rng, &[h, dim]));
                let b2 = store.add("pos.mlp.b2", Tensor::zeros(&[dim]));
                pe.mlp = Some([w1, b1, w2, b2]);
            }
        }
        pe
    }

    pub fn mlp_params(&self) -> Option<[ParamId; 4]> {
        self.mlp
    }

    pub fn table_param(&self) -> Option<ParamId> {
        self.table
    }

    /// Whether the encoder needs per-image descriptors.
    pub fn needs_orientation(&self) -> bool {
        self.strategy == PeStrategy::Dape
    }

    /// Additive input vectors for `images` stacked `[images·G² × d]`, or
    /// `None` when the strategy contributes nothing at the input.
    pub fn input_vectors<T: Real>(
        &self,
        sess: &mut Session<T>,
        images: usize,
        descriptors: Option<&[PositionalDescriptor]>,
    ) -> Result<Option<Var>> {
        let cells = self.grid * self.grid;
        match self.strategy {
            PeStrategy::None | PeStrategy::Relative => Ok(None),
            PeStrategy::SinusoidalAbsolute => {
                let code = self.sinusoid.as_ref().expect("sinusoid");
                let t = Tensor::from_f64(&[cells, self.dim], code)?;
                let c = sess.graph.constant(t);
                Ok(Some(sess.graph.tile_rows(c, images)?))
            }
            PeStrategy::LearnableAbsolute => {
                let t = sess.p(self.table.expect("table"));
                Ok(Some(sess.graph.tile_rows(t, images)?))
            }
            PeStrategy::Dape => {
                let desc = descriptors
                    .ok_or_else(|| Error::Contract("orientation encoding needs descriptors".into()))?;
                if desc.len() != images * cells {
                    return Err(Error::shape(
                        "dape",
                        format!("{} descriptors for {images} images of {cells} patches", desc.len()),
                    ));
                }
                Ok(Some(self.mlp_forward(sess, desc)?))
            }
        }
    }

    fn mlp_forward<T: Real>(&self, sess: &mut Session<T>, desc: &[PositionalDescriptor]) -> Result<Var> {
        let [w1, b1, w2, b2] = self.mlp.expect("mlp");
        let flat: Vec<f64> = desc.iter().flat_map(|d| d.to_array()).collect();
        let x = sess.graph.constant(Tensor::from_f64(&[desc.len(), 4], &flat)?);
        let (w1, b1, w2, b2) = (sess.p(w1), sess.p(b1), sess.p(w2), sess.p(b2));
        let h = sess.graph.matmul(x, w1)?;
        let h = sess.graph.add_row(h, b1)?;
        let h = sess.graph.gelu(h);
        let o = sess.graph.matmul(h, w2)?;
        sess.graph.add_row(o, b2)
    }

    /// Relative-bias table and index for attention layer `layer`.
    pub fn attention_bias(&self, layer: usize) -> Option<(ParamId, Arc<Vec<usize>>)> {
        match (self.relative.get(layer), &self.relative_index) {
            (Some(&p), Some(idx)) => Some((p, idx.clone())),
            _ => None,
        }
    }

    /// `f_pos(Ψ)` for a single descriptor.
    pub fn encode_dape<T: Real>(
        &self,
        store: &ParamStore<T>,
        desc: &PositionalDescriptor,
    ) -> Result<Tensor<T>> {
        if self.strategy != PeStrategy::Dape {
            return Err(Error::Contract(format!("encoder strategy is {}", self.strategy)));
        }
        let mut sess = Session::frozen(store);
        let v = self.mlp_forward(&mut sess, std::slice::from_ref(desc))?;
        Tensor::new(vec![self.dim], sess.graph.value(v).data().to_vec())
    }

    /// Input vector of a baseline strategy at cell `(i, j)`. The relative
    /// strategy acts on attention logits, so its input vector is zero.
    pub fn encode_baseline<T: Real>(
        &self,
        store: &ParamStore<T>,
        i: usize,
        j: usize,
    ) -> Result<Tensor<T>> {
        let g = self.grid;
        if i >= g || j >= g {
            return Err(Error::Invalid(format!("cell ({i}, {j}) outside a {g}×{g} grid")));
        }
        let pos = i * g + j;
        match self.strategy {
            PeStrategy::None | PeStrategy::Relative => Ok(Tensor::zeros(&[self.dim])),
            PeStrategy::SinusoidalAbsolute => {
                Tensor::from_f64(&[self.dim], &sinusoidal_code(pos, self.dim))
            }
            PeStrategy::LearnableAbsolute => {
                let t = store.get(self.table.expect("table"));
                Ok(Tensor::vector(t.row(pos).to_vec()))
            }
            PeStrategy::Dape => Err(Error::Invalid(
                "orientation encoding is not a baseline; use encode_dape".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;

    /// Anti-aliased dark line through the patch centre at angle `theta`.
    pub(crate) fn line_patch(side: usize, theta: f64, width: f64) -> Vec<f32> {
        let c = side as f64 / 2.0;
        let (dx, dy) = (theta.cos(), theta.sin());
        let mut p = vec![0.8f32; side * side];
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                let dist = (px * dy - py * dx).abs();
                let cover = (width / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
                p[y * side + x] = (0.8 - 0.6 * cover) as f32;
            }
        }
        p
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(PI);
        d.min(PI - d)
    }

    /// Brute-force oracle: the along-structure angle minimizes the energy of
    /// gradients projected onto it.
    fn brute_force_orientation(patch: &[f32], side: usize) -> f64 {
        let (gx, gy) = sobel(patch, side);
        (0..3600)
            .map(|k| k as f64 * PI / 3600.0)
            .map(|t| {
                let e: f64 = gx
                    .iter()
                    .zip(&gy)
                    .map(|(a, b)| (a * t.cos() + b * t.sin()).powi(2))
                    .sum();
                (t, e)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn horizontal_and_vertical_lines() {
        let h = line_patch(8, 0.0, 2.0);
        assert!(angle_diff(estimate_orientation(&h, 8, 1e-3), 0.0) < 1e-6);
        let v = line_patch(8, PI / 2.0, 2.0);
        assert!(angle_diff(estimate_orientation(&v, 8, 1e-3), PI / 2.0) < 1e-6);
    }

    #[test]
    fn diagonal_line_matches_analytic_and_brute_force() {
        let p = line_patch(8, PI / 4.0, 2.0);
        let est = estimate_orientation(&p, 8, 1e-3);
        assert!(angle_diff(est, PI / 4.0) < 0.1, "{est}");
        let oracle = brute_force_orientation(&p, 8);
        assert!(angle_diff(est, oracle) < 2e-3, "{est} vs {oracle}");
    }

    #[test]
    fn closed_form_agrees_with_brute_force_on_random_lines() {
        let mut rng = RngStreams::new(3).stream("lines");
        for _ in 0..20 {
            let th: f64 = rng.gen::<f64>() * PI;
            let p = line_patch(8, th, 1.5);
            let est = estimate_orientation(&p, 8, 1e-3);
            assert!(angle_diff(est, brute_force_orientation(&p, 8)) < 2e-3);
        }
    }

    #[test]
    fn flat_patch_is_exactly_zero() {
        for v in [0.0f32, 0.37, 1.0] {
            assert_eq!(estimate_orientation(&[v; 64], 8, 1e-3), 0.0);
        }
    }

    #[test]
    fn rotation_shifts_orientation() {
        for base in [0.3, 1.1, 2.0] {
            for delta in [10f64.to_radians(), -10f64.to_radians()] {
                let a = estimate_orientation(&line_patch(8, base, 2.0), 8, 1e-3);
                let b = estimate_orientation(&line_patch(8, base + delta, 2.0), 8, 1e-3);
                let shift = (b - a).rem_euclid(PI);
                let want = delta.rem_euclid(PI);
                assert!(angle_diff(shift, want) < 0.15, "base {base} delta {delta}");
            }
        }
    }

    #[test]
    fn descriptor_values() {
        let d = build_descriptor(0, 0, 8, 0.0).unwrap();
        assert_eq!(d.to_array(), [0.0625, 0.0625, 1.0, 0.0]);
        let d = build_descriptor(4, 4, 8, PI / 2.0).unwrap();
        assert!((d.x - 0.5625).abs() < 1e-12 && (d.y - 0.5625).abs() < 1e-12);
        assert!(d.cos_theta.abs() < 1e-12 && (d.sin_theta - 1.0).abs() < 1e-12);
        let d = build_descriptor(1, 2, 8, PI / 4.0).unwrap();
        assert!((d.cos_theta - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((d.sin_theta - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(build_descriptor(8, 0, 8, 0.0).is_err());
    }

    #[test]
    fn sinusoid_at_origin_alternates_zero_one() {
        let c = sinusoidal_code(0, 8);
        assert_eq!(c, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn relative_index_is_translation_invariant() {
        let g = 4;
        let idx = relative_index(g);
        let l = g * g;
        // (0,0)->(1,1) and (2,2)->(3,3) share the same offset
        assert_eq!(idx[0 * l + 5], idx[10 * l + 15]);
        assert_ne!(idx[0 * l + 5], idx[0 * l + 1]);
        assert!(idx.iter().all(|&i| i < (2 * g - 1) * (2 * g - 1)));
    }

    fn encoder(strategy: PeStrategy, store: &mut ParamStore<f64>) -> PositionalEncoder {
        let mut rng = RngStreams::new(5).stream("init");
        PositionalEncoder::new(strategy, 8, 16, 2, 4, DapeConfig::default(), store, &mut rng)
    }

    #[test]
    fn none_and_relative_baselines_are_zero() {
        for s in [PeStrategy::None, PeStrategy::Relative] {
            let mut store = ParamStore::new();
            let pe = encoder(s, &mut store);
            for (i, j) in [(0, 0), (3, 5), (7, 7)] {
                let v = pe.encode_baseline(&store, i, j).unwrap();
                assert!(v.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn dape_is_a_function_of_the_descriptor() {
        let mut store = ParamStore::new();
        let pe = encoder(PeStrategy::Dape, &mut store);
        let d = build_descriptor(2, 3, 8, 0.7).unwrap();
        let a = pe.encode_dape(&store, &d).unwrap();
        let b = pe.encode_dape(&store, &d).unwrap();
        assert_eq!(a, b);
        let other = pe.encode_dape(&store, &build_descriptor(2, 4, 8, 0.7).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_final_layer_gives_zero_encoding() {
        let mut store = ParamStore::new();
        let pe = encoder(PeStrategy::Dape, &mut store);
        let [_, _, w2, b2] = pe.mlp_params().unwrap();
        store.get_mut(w2).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(b2).data_mut().iter_mut().for_each(|v| *v = 0.0);
        for th in [0.0, 1.0, 3.0] {
            let v = pe.encode_dape(&store, &build_descriptor(1, 1, 8, th).unwrap()).unwrap();
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn unknown_strategy_name_is_rejected() {
        assert!("spiral".parse::<PeStrategy>().is_err());
        assert_eq!("dape".parse::<PeStrategy>().unwrap(), PeStrategy::Dape);
    }
}
