//! Image sources: PPM directory ingestion and a structured synthetic
//! generator standing in for natural-image datasets.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::imageio;
use crate::tensor::Tensor;

/// Result of ingesting a directory.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub images: Vec<Tensor>,
    pub names: Vec<String>,
    pub skipped: usize,
}

/// Reads every `.ppm` file of `dir` in lexicographic order, center-crops it
/// to a square and resizes it bilinearly to `size`x`size`. Unreadable files
/// are skipped with a warning and counted.
pub fn ingest_dataset(dir: &Path, size: usize) -> Result<Ingested, ExperimentError> {
    if size == 0 {
        return Err(ExperimentError::Config("image size must be positive".into()));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| ExperimentError::Missing(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    let mut out = Ingested {
        images: Vec::new(),
        names: Vec::new(),
        skipped: 0,
    };
    for p in paths {
        match imageio::read_ppm(&p) {
            Ok(img) => {
                out.images.push(resize_bilinear(&center_crop(&img)?, size, size)?);
                out.names.push(
                    p.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

/// Largest centered square of a `(1,C,H,W)` image.
pub fn center_crop(img: &Tensor) -> Result<Tensor, ExperimentError> {
    let (_, c, h, w) = img.dims4()?;
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let mut data = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in 0..side {
            let row = (ch * h + oy + y) * w + ox;
            data.extend_from_slice(&img.data()[row..row + side]);
        }
    }
    Ok(Tensor::new(&[1, c, side, side], data)?)
}

/// Bilinear resampling with half-pixel centers and edge clamping. Resizing
/// to the same size is the identity.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, ExperimentError> {
    let (_, c, h, w) = img.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = |size: usize, out: usize, i: usize| -> (usize, usize, f64) {
        let f = ((i as f64 + 0.5) * size as f64 / out as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = src(h, out_h, y);
            for x in 0..out_w {
                let (x0, x1, fx) = src(w, out_w, x);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(&[1, c, out_h, out_w], data)?)
}

/// Deterministic synthetic image: a colour gradient background, a few
/// filled discs and rectangles, a low-amplitude sinusoidal texture and
/// multi-scale value noise and pixel noise, quantized to 8-bit levels.
pub fn synthetic_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let rgb = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let (c0, c1) = (rgb(&mut rng), rgb(&mut rng));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut planes = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                planes[(ch * size + y) * size + x] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let shapes = rng.gen_range(1..=4);
    for _ in 0..shapes {
        let col = rgb(&mut rng);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (rx, ry) = (rng.gen_range(0.08..0.35) * s, rng.gen_range(0.08..0.35) * s);
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if disc {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    for ch in 0..3 {
                        planes[(ch * size + y) * size + x] = col[ch];
                    }
                }
            }
        }
    }
    finish_texture(&mut planes, size, &mut rng);
    Tensor::new(&[1, 3, size, size], planes).expect("synthetic pixels are finite")
}

/// Deterministic face-like portrait standing in for aligned face crops: a
/// muted background, a hair region, a skin-toned face ellipse with eyes,
/// brows and mouth, plus the same texture and noise as [`synthetic_image`].
pub fn synthetic_face(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let base: f64 = rng.gen_range(0.25..0.75);
    let bg: [f64; 3] = std::array::from_fn(|_| (base + rng.gen_range(-0.15..0.15f64)).clamp(0.0, 1.0));
    let bg_slope = rng.gen_range(-0.2..0.2);
    let skin_l = rng.gen_range(0.5..0.9);
    let skin = [
        skin_l,
        skin_l * rng.gen_range(0.7..0.82),
        skin_l * rng.gen_range(0.55..0.7),
    ];
    let hair_l = rng.gen_range(0.08..0.65);
    let hair = [
        hair_l,
        hair_l * rng.gen_range(0.7..0.9),
        hair_l * rng.gen_range(0.5..0.75),
    ];
    let (cx, cy) = (s * rng.gen_range(0.45..0.55), s * rng.gen_range(0.52..0.6));
    let (rx, ry) = (s * rng.gen_range(0.25..0.33), s * rng.gen_range(0.33..0.42));
    let hair_drop = rng.gen_range(0.0..0.5);
    let eye_y = cy - ry * rng.gen_range(0.15..0.3);
    let eye_dx = rx * rng.gen_range(0.35..0.5);
    let eye_r = s * rng.gen_range(0.025..0.045);
    let mouth_y = cy + ry * rng.gen_range(0.45..0.6);
    let mouth_w = rx * rng.gen_range(0.3..0.5);
    let lips = [skin_l * 0.8, skin_l * 0.4, skin_l * 0.4];
    let ellipse =
        |x: f64, y: f64, ex: f64, ey: f64, ax: f64, ay: f64| ((x - ex) / ax).powi(2) + ((y - ey) / ay).powi(2) <= 1.0;

    let mut planes = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut col = bg.map(|c| (c + bg_slope * (fy / s - 0.5)).clamp(0.0, 1.0));
            let in_hair = ellipse(fx, fy, cx, cy - ry * 0.15, rx * 1.25, ry * 1.05) && fy < cy + ry * hair_drop;
            if in_hair {
                col = hair;
            }
            if ellipse(fx, fy, cx, cy, rx, ry) && !(fy < cy - ry * 0.55 && in_hair) {
                let shade = 1.0 - 0.25 * ((fx - cx) / rx).powi(2);
                col = skin.map(|c| c * shade);
                for side in [-1.0, 1.0] {
                    if ellipse(fx, fy, cx + side * eye_dx, eye_y, eye_r * 1.6, eye_r) {
                        col = [0.12, 0.1, 0.1];
                    } else if ellipse(
                        fx,
                        fy,
                        cx + side * eye_dx,
                        eye_y - eye_r * 2.2,
                        eye_r * 2.0,
                        eye_r * 0.45,
                    ) {
                        col = hair.map(|c| c * 0.8);
                    }
                }
                if ellipse(fx, fy, cx, mouth_y, mouth_w, s * 0.025) {
                    col = lips;
                }
            }
            for ch in 0..3 {
                planes[(ch * size + y) * size + x] = col[ch];
            }
        }
    }
    finish_texture(&mut planes, size, &mut rng);
    Tensor::new(&[1, 3, size, size], planes).expect("synthetic pixels are finite")
}

/// Adds a sinusoidal texture, value noise and pixel noise, then quantizes
/// to 8-bit levels.
fn finish_texture(planes: &mut [f64], size: usize, rng: &mut ChaCha8Rng) {
    let (fx, fy) = (rng.gen_range(0.05..0.8), rng.gen_range(0.05..0.8));
    let amp = rng.gen_range(0.0..0.1);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let grain = value_noise(size, rng);
    for y in 0..size {
        for x in 0..size {
            let tex = amp * (fx * x as f64 + fy * y as f64 + phase).sin() + grain[y * size + x];
            for ch in 0..3 {
                let i = (ch * size + y) * size + x;
                let noise = rng.gen_range(-0.02..0.02);
                planes[i] = ((planes[i] + tex + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
}

/// Sum of bilinearly interpolated random lattices with cell sizes 2, 4, 8
/// and 16 pixels; finer octaves get smaller amplitudes.
fn value_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for (cell, amp) in [(2usize, 0.04), (4, 0.06), (8, 0.08), (16, 0.1)] {
        let n = size / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-amp..amp)).collect();
        for y in 0..size {
            let (gy, fy) = (y / cell, (y % cell) as f64 / cell as f64);
            for x in 0..size {
                let (gx, fx) = (x / cell, (x % cell) as f64 / cell as f64);
                let at = |a: usize, b: usize| lattice[a * n + b];
                let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
                let bottom = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
                out[y * size + x] += top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Kind of synthetic images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthetic {
    /// Face-like portraits ([`synthetic_face`]).
    Faces,
    /// Gradients, shapes and textures ([`synthetic_image`]).
    Scenes,
}

impl Synthetic {
    pub fn tag(self) -> &'static str {
        match self {
            Synthetic::Faces => "faces",
            Synthetic::Scenes => "scenes",
        }
    }

    pub fn image(self, size: usize, seed: u64) -> Tensor {
        match self {
            Synthetic::Faces => synthetic_face(size, seed),
            Synthetic::Scenes => synthetic_image(size, seed),
        }
    }
}

/// `count` synthetic images with seeds derived from `seed`.
pub fn synthetic_dataset(kind: Synthetic, count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..count)
        .map(|i| kind.image(size, super::derive_seed(seed, i as u64)))
        .collect()
}

/// Writes a synthetic dataset as PPM files `img_0000.ppm`, ...
pub fn write_synthetic_dataset(
    dir: &Path,
    kind: Synthetic,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<(), ExperimentError> {
    for (i, img) in synthetic_dataset(kind, count, size, seed).iter().enumerate() {
        imageio::write_ppm(dir.join(format!("img_{i:04}.ppm")), img)?;
    }
    Ok(())
}
