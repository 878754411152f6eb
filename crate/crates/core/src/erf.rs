//! Effective receptive fields of a ReLU conv stack via input gradients.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, ConvLayer};
use crate::tensor::Tensor;

/// Per-pixel ERF values for one feature location.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub location: (usize, usize),
    pub channels: Vec<usize>,
    pub images: usize,
}

impl ErfMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Inclusive bounding box `(r0, r1, c0, c1)` of the nonzero entries.
    pub fn support(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                let (r, c) = (i / self.width, i % self.width);
                b = Some(match b {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
        b
    }
}

fn geometries(layers: &[ConvLayer], store: &ParamStore, input: &[usize]) -> Result<Vec<ConvGeometry>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let g = ConvGeometry::infer(&shape, store.get(l.kernels).shape(), l.stride, l.pad)?;
        shape = vec![g.filters, g.out_h, g.out_w];
        out.push(g);
    }
    Ok(out)
}

/// Inclusive input box `(r0, r1, c0, c1)` that can influence output `(r, c)` of the stack.
pub fn theoretical_field(
    layers: &[ConvLayer],
    store: &ParamStore,
    input: &[usize],
    location: (usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    let geoms = geometries(layers, store, input)?;
    let (mut r0, mut r1, mut c0, mut c1) = (location.0, location.0, location.1, location.1);
    for g in geoms.iter().rev() {
        (r0, _) = g.input_span(r0, g.in_h);
        (_, r1) = g.input_span(r1, g.in_h);
        (c0, _) = g.input_span(c0, g.in_w);
        (_, c1) = g.input_span(c1, g.in_w);
    }
    Ok((r0, r1, c0, c1))
}

/// `relu(conv_k(... relu(conv_1(x))))` on a tracked image; returns the feature map's gradient
/// maps for each requested channel at `location`, summed over channels.
fn channel_sum(
    layers: &[ConvLayer],
    store: &ParamStore,
    image: &Tensor,
    location: (usize, usize),
    channels: &[usize],
) -> Result<Vec<f64>> {
    if image.rank() != 3 {
        return Err(Error::shape("erf", image.shape(), &[3, 0, 0]));
    }
    let mut tape = Tape::new();
    let x = tape.input(image.clone());
    let mut y = x;
    for l in layers {
        y = l.forward(&mut tape, store, y)?;
        y = tape.relu(y);
    }
    let s = tape.shape(y).to_vec();
    let (r, c) = location;
    if r >= s[1] || c >= s[2] {
        return Err(Error::Config(format!("feature location ({r}, {c}) outside {}x{} map", s[1], s[2])));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut acc = vec![0.0; h * w];
    for &n in channels {
        if n >= s[0] {
            return Err(Error::Config(format!("channel {n} outside {} channels", s[0])));
        }
        let mut seed = Tensor::zeros(&s);
        seed.data_mut()[(n * s[1] + r) * s[2] + c] = 1.0;
        let grads = tape.backward_with(y, seed);
        let Some(gi) = grads.get(x) else { continue };
        for (p, a) in acc.iter_mut().enumerate() {
            *a += (0..image.shape()[0]).map(|ch| gi.data()[ch * h * w + p].powi(2)).sum::<f64>();
        }
    }
    Ok(acc)
}

/// Squared input gradient of feature `(channel, r, c)`, summed over color channels.
pub fn erf_single(
    layers: &[ConvLayer],
    store: &ParamStore,
    image: &Tensor,
    location: (usize, usize),
    channel: usize,
) -> Result<Vec<f64>> {
    channel_sum(layers, store, image, location, &[channel])
}

/// `min(count, channels)` indices spread evenly over `0..channels`.
pub fn default_channels(channels: usize, count: usize) -> Vec<usize> {
    let k = count.min(channels).max(1);
    (0..k).map(|i| i * channels / k).collect()
}

/// `E_ij = Σ_{n∈Ω} Σ_color (∂y^n_rc / ∂I_ij)²`, averaged over images.
pub fn erf_aggregate(
    layers: &[ConvLayer],
    store: &ParamStore,
    images: &[Tensor],
    location: (usize, usize),
    channels: &[usize],
) -> Result<ErfMap> {
    if images.is_empty() || channels.is_empty() {
        return Err(Error::Config("ERF needs at least one image and one channel".into()));
    }
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let mut sum = vec![0.0; h * w];
    for img in images {
        if img.shape() != images[0].shape() {
            return Err(Error::shape("erf", img.shape(), images[0].shape()));
        }
        for (s, v) in sum.iter_mut().zip(channel_sum(layers, store, img, location, channels)?) {
            *s += v;
        }
    }
    let n = images.len() as f64;
    Ok(ErfMap {
        height: h,
        width: w,
        values: sum.into_iter().map(|v| v / n).collect(),
        location,
        channels: channels.to_vec(),
        images: images.len(),
    })
}

/// Normalized Gaussian taps on `-⌈3σ⌉..=⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with zero padding; `σ = 0` returns the input.
pub fn gaussian_smooth(values: &[f64], height: usize, width: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma {sigma} must be nonnegative")));
    }
    if values.len() != height * width {
        return Err(Error::shape("gaussian_smooth", &[values.len()], &[height, width]));
    }
    if sigma == 0.0 {
        return Ok(values.to_vec());
    }
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..height {
            for c in 0..width {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let d = t as isize - rad;
                    let (rr, cc) = if along_rows { (r as isize + d, c as isize) } else { (r as isize, c as isize + d) };
                    if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                        acc += kv * src[rr as usize * width + cc as usize];
                    }
                }
                out[r * width + c] = acc;
            }
        }
        out
    };
    Ok(pass(&pass(values, false), true))
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Result<Vec<u8>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("heat map contains non-finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        warn!("constant heat map; writing zeros");
        return Ok(vec![0; values.len()]);
    }
    Ok(values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect())
}

pub fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("write_pgm", &[values.len()], &[height, width]));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&to_gray(values)?)?;
    Ok(())
}

/// Min-max normalized heat map blended over a `3×H×W` image in `[0, 1]`.
pub fn write_overlay_ppm(path: &Path, values: &[f64], image: &Tensor) -> Result<()> {
    let heat: Vec<f64> = to_gray(values)?.into_iter().map(|g| g as f64 / 255.0).collect();
    write_heat_overlay(path, &heat, image)
}

/// Heat in `[0, 1]` (clamped) blended over a `3×H×W` image; the red channel carries the heat.
pub fn write_heat_overlay(path: &Path, heat: &[f64], image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if image.shape()[0] != 3 || heat.len() != h * w {
        return Err(Error::shape("write_heat_overlay", image.shape(), &[h, w]));
    }
    let plane = h * w;
    let mut px = Vec::with_capacity(3 * plane);
    for (p, &hv) in heat.iter().enumerate() {
        for ch in 0..3 {
            let base = image.data()[ch * plane + p].clamp(0.0, 1.0) * 0.5;
            let v = if ch == 0 { base + 0.5 * hv.clamp(0.0, 1.0) } else { base };
            px.push((v * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&px)?;
    Ok(())
}

fn header_fields(r: &mut impl BufRead, count: usize) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    while fields.len() < count {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated image header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    Ok(fields)
}

/// Reads a binary PGM (P5) or PPM (P6); returns `(channels, height, width, bytes)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let fields = header_fields(&mut r, 4)?;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported image magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad image header field {s:?}")));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(Error::Format("only 8-bit images are supported".into()));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != channels * w * h {
        return Err(Error::Format("pixel data length does not match header".into()));
    }
    Ok((channels, h, w, data))
}

/// A P6 file as a channel-major `3×H×W` tensor in `[0, 1]`.
pub fn read_ppm_image(path: &Path) -> Result<Tensor> {
    let (ch, h, w, bytes) = read_pnm(path)?;
    if ch != 3 {
        return Err(Error::Format("expected a color (P6) image".into()));
    }
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = bytes[p * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `3×H×W` tensor in `[0, 1]` as P6.
pub fn write_ppm_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut px = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            px.push((image.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&px)?;
    Ok(())
}
