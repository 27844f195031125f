//! Low-frequency exposure compensation on the luminance channel.
//!
//! An [`OffsetGrid`] holds coarse gain and bias grids at two resolutions
//! (8×8 and 16×16). Rendering upsamples every level bilinearly to the image
//! size, sums them, and smooths the result with a 51×51 Gaussian, so the
//! per-pixel maps can only change brightness gradually. Compensation then
//! maps `Y' = gain·Y + bias` in BT.601 full-range YCbCr and leaves chroma
//! alone.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;

pub const KERNEL_SIZE: usize = 51;
pub const BLUR_SIGMA: f64 = KERNEL_SIZE as f64 / 6.0;
pub const LEVEL_RESOLUTIONS: [usize; 2] = [8, 16];
pub const FIT_ITERATIONS: usize = 200;

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// Single-channel row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Plane { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// RGB image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(alloc::format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YCbCrImage {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
}

/// BT.601 full range; Cb/Cr are offset by 0.5 so gray maps to 0.5.
pub fn rgb_to_ycbcr(image: &RgbImage) -> YCbCrImage {
    let (w, h) = (image.width, image.height);
    let mut y = Plane::filled(w, h, 0.0);
    let mut cb = Plane::filled(w, h, 0.0);
    let mut cr = Plane::filled(w, h, 0.0);
    for (i, &[r, g, b]) in image.data.iter().enumerate() {
        let l = KR * r + KG * g + KB * b;
        y.data[i] = l;
        cb.data[i] = 0.5 + (b - l) / (2.0 * (1.0 - KB));
        cr.data[i] = 0.5 + (r - l) / (2.0 * (1.0 - KR));
    }
    YCbCrImage { y, cb, cr }
}

pub fn ycbcr_to_rgb(image: &YCbCrImage) -> RgbImage {
    let data = image
        .y
        .data
        .iter()
        .zip(image.cb.data.iter().zip(image.cr.data.iter()))
        .map(|(&l, (&cb, &cr))| {
            let r = l + 2.0 * (1.0 - KR) * (cr - 0.5);
            let b = l + 2.0 * (1.0 - KB) * (cb - 0.5);
            let g = (l - KR * r - KB * b) / KG;
            [r, g, b]
        })
        .collect();
    RgbImage { width: image.y.width, height: image.y.height, data }
}

/// One grid level: `resolution × resolution` gain and bias cells.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridLevel {
    pub resolution: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gain/bias grids for an image of `width × height`. The rendered gain map
/// is the blurred sum of all upsampled gain levels, likewise for bias.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OffsetGrid {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<GridLevel>,
}

impl OffsetGrid {
    /// Base gain 1, everything else 0.
    pub fn identity(width: usize, height: usize) -> Self {
        Self::constant(width, height, 1.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, gain: f64, bias: f64) -> Self {
        let levels = LEVEL_RESOLUTIONS
            .iter()
            .enumerate()
            .map(|(l, &res)| {
                let (g, b) = if l == 0 { (gain, bias) } else { (0.0, 0.0) };
                GridLevel { resolution: res, gain: vec![g; res * res], bias: vec![b; res * res] }
            })
            .collect();
        OffsetGrid { width, height, levels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidInput("offset grid has no levels".into()));
        }
        for l in &self.levels {
            let n = l.resolution * l.resolution;
            if l.resolution == 0 || l.gain.len() != n || l.bias.len() != n {
                return Err(Error::InvalidInput(alloc::format!(
                    "grid level of resolution {} needs {} gain and bias cells",
                    l.resolution,
                    n
                )));
            }
            if l.gain.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("grid values must be finite".into()));
            }
        }
        Ok(())
    }

    /// Cell-wise sum; both grids need the same layout.
    pub fn add(&self, other: &OffsetGrid) -> Result<OffsetGrid> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::SizeMismatch(self.width, self.height, other.width, other.height));
        }
        if self.levels.len() != other.levels.len()
            || self.levels.iter().zip(&other.levels).any(|(a, b)| a.resolution != b.resolution)
        {
            return Err(Error::InvalidInput("grid levels differ".into()));
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| GridLevel {
                resolution: a.resolution,
                gain: a.gain.iter().zip(&b.gain).map(|(x, y)| x + y).collect(),
                bias: a.bias.iter().zip(&b.bias).map(|(x, y)| x + y).collect(),
            })
            .collect();
        Ok(OffsetGrid { width: self.width, height: self.height, levels })
    }

    fn param_count(&self) -> usize {
        self.levels.iter().map(|l| l.gain.len()).sum()
    }

    fn gains(&self) -> Vec<f64> {
        self.levels.iter().flat_map(|l| l.gain.iter().copied()).collect()
    }

    fn biases(&self) -> Vec<f64> {
        self.levels.iter().flat_map(|l| l.bias.iter().copied()).collect()
    }

    fn with_params(&self, gains: &[f64], biases: &[f64]) -> OffsetGrid {
        let mut out = self.clone();
        let mut k = 0;
        for l in out.levels.iter_mut() {
            let n = l.gain.len();
            l.gain.copy_from_slice(&gains[k..k + n]);
            l.bias.copy_from_slice(&biases[k..k + n]);
            k += n;
        }
        out
    }
}

/// Per-pixel maps produced by [`render_offset`].
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMaps {
    pub gain: Plane,
    pub bias: Plane,
}

/// Normalized 51-tap Gaussian with σ = 51/6.
pub fn gaussian_kernel() -> [f64; KERNEL_SIZE] {
    let mut k = [0.0; KERNEL_SIZE];
    let c = (KERNEL_SIZE / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = fmath::exp(-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA));
    }
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Bilinear sampling table along one axis: for each pixel, the two cell
/// indices and the weight of the second.
fn axis_table(pixels: usize, cells: usize) -> Vec<(usize, usize, f64)> {
    (0..pixels)
        .map(|p| {
            let g = ((p as f64 + 0.5) * cells as f64 / pixels as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
            let i0 = fmath::floor(g) as usize;
            let i1 = (i0 + 1).min(cells - 1);
            (i0, i1, g - i0 as f64)
        })
        .collect()
}

// `a + t·(b - a)` so constant grids upsample to the exact constant.
fn upsample_add(cells: &[f64], res: usize, xs: &[(usize, usize, f64)], ys: &[(usize, usize, f64)], out: &mut Plane) {
    let w = out.width;
    for (y, &(j0, j1, b)) in ys.iter().enumerate() {
        for (x, &(i0, i1, a)) in xs.iter().enumerate() {
            let top = cells[j0 * res + i0] + a * (cells[j0 * res + i1] - cells[j0 * res + i0]);
            let bot = cells[j1 * res + i0] + a * (cells[j1 * res + i1] - cells[j1 * res + i0]);
            out.data[y * w + x] += top + b * (bot - top);
        }
    }
}

fn upsample_adjoint(m: &Plane, res: usize, xs: &[(usize, usize, f64)], ys: &[(usize, usize, f64)], cells: &mut [f64]) {
    let w = m.width;
    for (y, &(j0, j1, b)) in ys.iter().enumerate() {
        for (x, &(i0, i1, a)) in xs.iter().enumerate() {
            let v = m.data[y * w + x];
            cells[j0 * res + i0] += (1.0 - a) * (1.0 - b) * v;
            cells[j0 * res + i1] += a * (1.0 - b) * v;
            cells[j1 * res + i0] += (1.0 - a) * b * v;
            cells[j1 * res + i1] += a * b * v;
        }
    }
}

// One separable pass over `n` samples spaced `stride` apart, edge-replicated.
// Written as `x + Σ w·(x_k - x)` so constants come back bit-exact.
fn blur_line(src: &[f64], dst: &mut [f64], n: usize, stride: usize, k: &[f64; KERNEL_SIZE]) {
    let half = (KERNEL_SIZE / 2) as isize;
    for i in 0..n {
        let c = src[i * stride];
        let mut acc = 0.0;
        for (t, w) in k.iter().enumerate() {
            let j = (i as isize + t as isize - half).clamp(0, n as isize - 1) as usize;
            acc += w * (src[j * stride] - c);
        }
        dst[i * stride] = c + acc;
    }
}

fn blur_line_adjoint(src: &[f64], dst: &mut [f64], n: usize, stride: usize, k: &[f64; KERNEL_SIZE]) {
    let half = (KERNEL_SIZE / 2) as isize;
    for i in 0..n {
        dst[i * stride] = 0.0;
    }
    for i in 0..n {
        let g = src[i * stride];
        for (t, w) in k.iter().enumerate() {
            let j = (i as isize + t as isize - half).clamp(0, n as isize - 1) as usize;
            dst[j * stride] += w * g;
        }
    }
}

fn separable(p: &Plane, adjoint: bool) -> Plane {
    let k = gaussian_kernel();
    let line = if adjoint { blur_line_adjoint } else { blur_line };
    let (w, h) = (p.width, p.height);
    let mut tmp = Plane::filled(w, h, 0.0);
    for y in 0..h {
        line(&p.data[y * w..(y + 1) * w], &mut tmp.data[y * w..(y + 1) * w], w, 1, &k);
    }
    let mut out = Plane::filled(w, h, 0.0);
    for x in 0..w {
        line(&tmp.data[x..], &mut out.data[x..], h, w, &k);
    }
    out
}

/// 51×51 Gaussian blur, edge-replicated.
pub fn gaussian_blur(p: &Plane) -> Plane {
    separable(p, false)
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width < KERNEL_SIZE || height < KERNEL_SIZE {
        return Err(Error::ImageTooSmall { width, height, min: KERNEL_SIZE });
    }
    Ok(())
}

struct Renderer {
    width: usize,
    height: usize,
    tables: Vec<(usize, Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>)>,
}

impl Renderer {
    fn new(grid: &OffsetGrid, width: usize, height: usize) -> Self {
        let tables = grid
            .levels
            .iter()
            .map(|l| (l.resolution, axis_table(width, l.resolution), axis_table(height, l.resolution)))
            .collect();
        Renderer { width, height, tables }
    }

    /// Blurred sum of upsampled levels; `params` is all levels concatenated.
    fn forward(&self, params: &[f64]) -> Plane {
        let mut m = Plane::filled(self.width, self.height, 0.0);
        let mut k = 0;
        for (res, xs, ys) in &self.tables {
            let n = res * res;
            upsample_add(&params[k..k + n], *res, xs, ys, &mut m);
            k += n;
        }
        separable(&m, false)
    }

    fn adjoint(&self, m: &Plane, out: &mut [f64]) {
        let b = separable(m, true);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut k = 0;
        for (res, xs, ys) in &self.tables {
            let n = res * res;
            upsample_adjoint(&b, *res, xs, ys, &mut out[k..k + n]);
            k += n;
        }
    }
}

/// Per-pixel gain and bias maps at `width × height`.
pub fn render_offset(grid: &OffsetGrid, width: usize, height: usize) -> Result<OffsetMaps> {
    grid.validate()?;
    check_size(width, height)?;
    let r = Renderer::new(grid, width, height);
    Ok(OffsetMaps { gain: r.forward(&grid.gains()), bias: r.forward(&grid.biases()) })
}

/// `Y' = clamp(gain·Y + bias, 0, 1)`; Cb and Cr are copied through.
pub fn compensate_ycbcr(image: &YCbCrImage, maps: &OffsetMaps) -> Result<YCbCrImage> {
    let (w, h) = (image.y.width, image.y.height);
    if maps.gain.width != w || maps.gain.height != h {
        return Err(Error::SizeMismatch(w, h, maps.gain.width, maps.gain.height));
    }
    let mut y = image.y.clone();
    for ((v, g), b) in y.data.iter_mut().zip(&maps.gain.data).zip(&maps.bias.data) {
        *v = (g * *v + b).clamp(0.0, 1.0);
    }
    Ok(YCbCrImage { y, cb: image.cb.clone(), cr: image.cr.clone() })
}

/// Applies `grid` to the luminance of `image`. The returned RGB values are
/// not clamped: a brightened saturated color can leave `[0, 1]` slightly,
/// and encoders clamp on quantization.
pub fn apply_compensation(image: &RgbImage, grid: &OffsetGrid) -> Result<RgbImage> {
    if grid.width != image.width || grid.height != image.height {
        return Err(Error::SizeMismatch(image.width, image.height, grid.width, grid.height));
    }
    let maps = render_offset(grid, image.width, image.height)?;
    Ok(ycbcr_to_rgb(&compensate_ycbcr(&rgb_to_ycbcr(image), &maps)?))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of squared luminance differences between `apply(source, grid)` and
/// `target`.
pub fn luminance_residual(source: &RgbImage, target: &RgbImage, grid: &OffsetGrid) -> Result<f64> {
    let out = apply_compensation(source, grid)?;
    let (a, b) = (rgb_to_ycbcr(&out), rgb_to_ycbcr(target));
    if a.y.data.len() != b.y.data.len() {
        return Err(Error::SizeMismatch(source.width, source.height, target.width, target.height));
    }
    Ok(a.y.data.iter().zip(&b.y.data).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Least-squares grid mapping the luminance of `source` onto `target`.
///
/// The model `gain(θ)·Y_s + bias(θ)` is linear in the grid cells, so the fit
/// runs conjugate gradients on the normal equations (CGLS) from the identity
/// grid for [`FIT_ITERATIONS`] steps. The residual never increases along the
/// way, and the output clamp only moves values toward the `[0, 1]` target,
/// so the result is never worse than the identity grid.
pub fn fit_offset(source: &RgbImage, target: &RgbImage) -> Result<OffsetGrid> {
    if source.width != target.width || source.height != target.height {
        return Err(Error::SizeMismatch(source.width, source.height, target.width, target.height));
    }
    let (w, h) = (source.width, source.height);
    check_size(w, h)?;
    let ys = rgb_to_ycbcr(source).y;
    let yt = rgb_to_ycbcr(target).y;
    let init = OffsetGrid::identity(w, h);
    let r = Renderer::new(&init, w, h);
    let n = init.param_count();

    // Gain and bias columns are nearly collinear when Y hovers around its
    // mean, so solve in centered, scaled variables:
    // gain·Y + bias = g̃·(Y - ȳ)/σ + b̃ with gain = g̃/σ, bias = b̃ - ȳ·g̃/σ.
    let npx = ys.data.len() as f64;
    let mean = ys.data.iter().sum::<f64>() / npx;
    let var = ys.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / npx;
    let sigma = if var > 1e-12 { fmath::sqrt(var) } else { 1.0 };
    let yc: Vec<f64> = ys.data.iter().map(|v| (v - mean) / sigma).collect();

    let apply = |g: &[f64], b: &[f64]| -> Plane {
        let mut out = r.forward(b);
        let gm = r.forward(g);
        for ((o, m), l) in out.data.iter_mut().zip(&gm.data).zip(&yc) {
            *o += m * l;
        }
        out
    };
    let adjoint = |res: &Plane, g: &mut [f64], b: &mut [f64]| {
        r.adjoint(res, b);
        let weighted = Plane { width: w, height: h, data: res.data.iter().zip(&yc).map(|(v, l)| v * l).collect() };
        r.adjoint(&weighted, g);
    };

    let mut tg: Vec<f64> = init.gains().iter().map(|g| g * sigma).collect();
    let mut tb: Vec<f64> = init.biases().iter().zip(&init.gains()).map(|(b, g)| b + mean * g).collect();
    let mut res = apply(&tg, &tb);
    for (v, t) in res.data.iter_mut().zip(&yt.data) {
        *v = t - *v;
    }
    let (mut sg, mut sb) = (vec![0.0; n], vec![0.0; n]);
    adjoint(&res, &mut sg, &mut sb);
    let (mut pg, mut pb) = (sg.clone(), sb.clone());
    let mut gamma = dot(&sg, &sg) + dot(&sb, &sb);
    let floor = 1e-30 * (1.0 + gamma);
    for _ in 0..FIT_ITERATIONS {
        if gamma <= floor {
            break;
        }
        let q = apply(&pg, &pb);
        let qq = dot(&q.data, &q.data);
        if !(qq > 0.0) {
            break;
        }
        let alpha = gamma / qq;
        for k in 0..n {
            tg[k] += alpha * pg[k];
            tb[k] += alpha * pb[k];
        }
        for (v, d) in res.data.iter_mut().zip(&q.data) {
            *v -= alpha * d;
        }
        adjoint(&res, &mut sg, &mut sb);
        let next = dot(&sg, &sg) + dot(&sb, &sb);
        let beta = next / gamma;
        gamma = next;
        for k in 0..n {
            pg[k] = sg[k] + beta * pg[k];
            pb[k] = sb[k] + beta * pb[k];
        }
    }
    let gains: Vec<f64> = tg.iter().map(|g| g / sigma).collect();
    let biases: Vec<f64> = tb.iter().zip(&gains).map(|(b, g)| b - mean * g).collect();
    Ok(init.with_params(&gains, &biases))
}
