//! Synthetic two-domain face dataset, PPM image codec, manifest I/O, and
//! flip augmentation.
//!
//! Each identity is a seeded geometric face (ellipse, eyes, mouth with
//! identity-specific geometry and colors). A live sample renders the face
//! under a capture domain (background, sensor noise, blur, channel gains); an
//! attack sample is the same render with that domain's replay signature on
//! top: a periodic interference grid plus a multiplicative color cast.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

// ── Sample types ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Liveness {
    Live,
    Attack,
}

impl Liveness {
    pub fn as_str(self) -> &'static str {
        match self {
            Liveness::Live => "live",
            Liveness::Attack => "attack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "live" => Some(Liveness::Live),
            "attack" => Some(Liveness::Attack),
            _ => None,
        }
    }

    /// Class index used by the liveness branch: live = 0, attack = 1.
    pub fn class_index(self) -> usize {
        match self {
            Liveness::Live => 0,
            Liveness::Attack => 1,
        }
    }
}

impl fmt::Display for Liveness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled image: RGB pixels in `[0,1]`, shape `[3×H×W]`.
#[derive(Debug, Clone)]
pub struct FaceSample {
    pub image: Tensor,
    pub identity: usize,
    pub liveness: Liveness,
    pub domain: String,
}

// ── Synthetic generator configuration ───────────────────────────────────

/// Replay artifacts stamped on attack samples of one domain.
#[derive(Debug, Clone)]
pub struct SpoofSignature {
    /// Stripe spacing of the interference grid, in pixels.
    pub grid_period: f64,
    /// Grid orientation in radians.
    pub grid_angle: f64,
    /// Additive amplitude of the grid, in pixel units.
    pub grid_amplitude: f64,
    /// Multiplicative per-channel color cast.
    pub channel_gain: [f64; 3],
}

/// One capture environment.
#[derive(Debug, Clone)]
pub struct DomainDescriptor {
    pub name: String,
    /// Mean background color.
    pub background: [f64; 3],
    /// Half-width of the uniform per-pixel sensor noise.
    pub noise_level: f64,
    /// Box-blur radius in pixels (0 disables).
    pub blur_radius: usize,
    /// Per-channel capture gain applied to every sample of the domain.
    pub channel_gain: [f64; 3],
    pub spoof: SpoofSignature,
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    /// Samples rendered per identity per domain; must be even so each
    /// (identity, domain) cell is half live, half attack.
    pub samples_per_id: usize,
    pub domains: Vec<DomainDescriptor>,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config("at least 2 identities required".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least 1 domain required".into()));
        }
        if self.samples_per_id < 2 || self.samples_per_id % 2 != 0 {
            return Err(Error::Config(format!(
                "samples_per_id must be an even count >= 2, got {}",
                self.samples_per_id
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        for d in &self.domains {
            if d.name.is_empty() || d.name.contains(',') {
                return Err(Error::Config(format!("bad domain name {:?}", d.name)));
            }
            if !(d.noise_level >= 0.0 && d.noise_level.is_finite()) {
                return Err(Error::Config(format!("domain {}: bad noise level", d.name)));
            }
            let gains = d.channel_gain.iter().chain(&d.spoof.channel_gain);
            if !gains.into_iter().all(|&g| g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("domain {}: gains must be positive", d.name)));
            }
            if !(d.spoof.grid_period > 0.0 && d.spoof.grid_amplitude >= 0.0) {
                return Err(Error::Config(format!("domain {}: bad grid parameters", d.name)));
            }
            if !d.background.iter().all(|&b| (0.0..=1.0).contains(&b)) {
                return Err(Error::Config(format!("domain {}: background outside [0,1]", d.name)));
            }
        }
        Ok(())
    }

    /// A two-environment benchmark: a bright still studio and a dark noisy
    /// kiosk. The replay grids differ per environment (period and angle)
    /// while the replay color cast is the same in both, so a model that keys
    /// on the cast transfers across environments and one that keys on the
    /// grid does not.
    pub fn two_domain(n_identities: usize, samples_per_id: usize, image_size: usize, seed: u64) -> Self {
        let cast = [0.88, 1.0, 1.12];
        SyntheticConfig {
            n_identities,
            samples_per_id,
            domains: vec![
                DomainDescriptor {
                    name: "studio".into(),
                    background: [0.82, 0.84, 0.88],
                    noise_level: 0.02,
                    blur_radius: 0,
                    channel_gain: [1.0, 1.0, 1.0],
                    spoof: SpoofSignature {
                        grid_period: 3.2,
                        grid_angle: 0.0,
                        grid_amplitude: 0.28,
                        channel_gain: cast,
                    },
                },
                DomainDescriptor {
                    name: "kiosk".into(),
                    background: [0.50, 0.47, 0.43],
                    noise_level: 0.03,
                    blur_radius: 1,
                    channel_gain: [1.0, 1.0, 1.0],
                    spoof: SpoofSignature {
                        grid_period: 6.1,
                        grid_angle: 0.7,
                        grid_amplitude: 0.20,
                        channel_gain: cast,
                    },
                },
            ],
            image_size,
            seed,
        }
    }
}

// ── Generation ──────────────────────────────────────────────────────────

struct IdentityLook {
    center: (f64, f64),
    axes: (f64, f64),
    face_color: [f64; 3],
    eye_dx: f64,
    eye_dy: f64,
    eye_radius: f64,
    eye_color: [f64; 3],
    mouth_half_w: f64,
    mouth_half_h: f64,
    mouth_dy: f64,
    mouth_color: [f64; 3],
}

impl IdentityLook {
    fn from_seed(master: u64, id: usize) -> Self {
        let mut r = stream(master, "identity", id as u64);
        IdentityLook {
            center: (r.gen_range(0.46..0.54), r.gen_range(0.46..0.54)),
            axes: (r.gen_range(0.26..0.38), r.gen_range(0.30..0.42)),
            face_color: [r.gen_range(0.45..0.85), r.gen_range(0.40..0.75), r.gen_range(0.35..0.70)],
            eye_dx: r.gen_range(0.10..0.16),
            eye_dy: r.gen_range(-0.14..-0.05),
            eye_radius: r.gen_range(0.030..0.060),
            eye_color: [r.gen_range(0.05..0.30), r.gen_range(0.05..0.30), r.gen_range(0.05..0.35)],
            mouth_half_w: r.gen_range(0.07..0.13),
            mouth_half_h: r.gen_range(0.015..0.035),
            mouth_dy: r.gen_range(0.10..0.18),
            mouth_color: [r.gen_range(0.50..0.80), r.gen_range(0.10..0.30), r.gen_range(0.10..0.30)],
        }
    }
}

/// Renders the full dataset for `cfg`. Pure in `cfg`: two calls produce
/// bit-identical tensors. Ordering: domains outermost, then identities, then
/// samples; the first half of each (identity, domain) cell is live.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<FaceSample>> {
    cfg.validate()?;
    let looks: Vec<IdentityLook> =
        (0..cfg.n_identities).map(|id| IdentityLook::from_seed(cfg.seed, id)).collect();
    let mut out = Vec::with_capacity(cfg.domains.len() * cfg.n_identities * cfg.samples_per_id);
    let mut index = 0u64;
    for domain in &cfg.domains {
        for (id, look) in looks.iter().enumerate() {
            for s in 0..cfg.samples_per_id {
                let live = s < cfg.samples_per_id / 2;
                let image = render_sample(cfg, domain, look, live, index);
                out.push(FaceSample {
                    image,
                    identity: id,
                    liveness: if live { Liveness::Live } else { Liveness::Attack },
                    domain: domain.name.clone(),
                });
                index += 1;
            }
        }
    }
    Ok(out)
}

fn render_sample(
    cfg: &SyntheticConfig,
    domain: &DomainDescriptor,
    look: &IdentityLook,
    live: bool,
    index: u64,
) -> Tensor {
    let n = cfg.image_size;
    let mut r = stream(cfg.seed, "sample", index);
    let jitter = (r.gen_range(-0.04..0.04), r.gen_range(-0.04..0.04));
    let scale: f64 = r.gen_range(0.95..1.05);
    let grid_phase: f64 = r.gen_range(0.0..1.0);

    let (cx, cy) = (look.center.0 + jitter.0, look.center.1 + jitter.1);
    let (ax, ay) = (look.axes.0 * scale, look.axes.1 * scale);
    let mouth_y = cy + look.mouth_dy * scale;
    let eye_y = cy + look.eye_dy * scale;
    let eye_r2 = (look.eye_radius * scale).powi(2);

    let plane = n * n;
    let mut img = vec![0.0f64; 3 * plane];
    for y in 0..n {
        let v = (y as f64 + 0.5) / n as f64;
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64;
            let color = pixel_color(look, u, v, cx, cy, ax, ay, eye_y, eye_r2, mouth_y, scale)
                .unwrap_or(domain.background);
            for c in 0..3 {
                img[c * plane + y * n + x] = color[c];
            }
        }
    }

    if domain.noise_level > 0.0 {
        let lvl = domain.noise_level;
        for p in img.iter_mut() {
            *p += r.gen_range(-lvl..lvl);
        }
    }
    if domain.blur_radius > 0 {
        img = box_blur(&img, n, domain.blur_radius);
    }
    for c in 0..3 {
        for p in &mut img[c * plane..(c + 1) * plane] {
            *p *= domain.channel_gain[c];
        }
    }

    if !live {
        let (sin_a, cos_a) = domain.spoof.grid_angle.sin_cos();
        let period = domain.spoof.grid_period;
        let amp = domain.spoof.grid_amplitude;
        for c in 0..3 {
            for p in &mut img[c * plane..(c + 1) * plane] {
                *p *= domain.spoof.channel_gain[c];
            }
        }
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let t = (xf * cos_a + yf * sin_a) / period + grid_phase;
                let s = (-xf * sin_a + yf * cos_a) / period + grid_phase;
                let wave = 0.5
                    * ((2.0 * std::f64::consts::PI * t).sin() + (2.0 * std::f64::consts::PI * s).sin());
                for c in 0..3 {
                    img[c * plane + y * n + x] += amp * wave;
                }
            }
        }
    }

    for p in &mut img {
        *p = p.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, n, n], img).expect("rendered image is finite")
}

#[allow(clippy::too_many_arguments)]
fn pixel_color(
    look: &IdentityLook,
    u: f64,
    v: f64,
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    eye_y: f64,
    eye_r2: f64,
    mouth_y: f64,
    scale: f64,
) -> Option<[f64; 3]> {
    let (p, q) = ((u - cx) / ax, (v - cy) / ay);
    if p * p + q * q > 1.0 {
        return None;
    }
    for side in [-1.0, 1.0] {
        let ex = cx + side * look.eye_dx * scale;
        if (u - ex).powi(2) + (v - eye_y).powi(2) <= eye_r2 {
            return Some(look.eye_color);
        }
    }
    if (u - cx).abs() <= look.mouth_half_w * scale && (v - mouth_y).abs() <= look.mouth_half_h * scale {
        return Some(look.mouth_color);
    }
    Some(look.face_color)
}

/// Mean over a clamped square window of half-width `radius`, per channel.
fn box_blur(img: &[f64], n: usize, radius: usize) -> Vec<f64> {
    let plane = n * n;
    let mut out = vec![0.0; img.len()];
    let r = radius as isize;
    for c in 0..3 {
        let src = &img[c * plane..(c + 1) * plane];
        for y in 0..n as isize {
            let y0 = (y - r).max(0) as usize;
            let y1 = ((y + r) as usize).min(n - 1);
            for x in 0..n as isize {
                let x0 = (x - r).max(0) as usize;
                let x1 = ((x + r) as usize).min(n - 1);
                let mut acc = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        acc += src[yy * n + xx];
                    }
                }
                let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                out[c * plane + (y as usize) * n + x as usize] = acc / count;
            }
        }
    }
    out
}

// ── Flip augmentation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    /// Live samples emit original + horizontal flip + vertical flip.
    Triple,
    /// Live samples emit original + horizontal flip.
    Double,
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    flip_axis(image, false)
}

pub fn flip_vertical(image: &Tensor) -> Tensor {
    flip_axis(image, true)
}

fn flip_axis(image: &Tensor, vertical: bool) -> Tensor {
    let s = image.shape();
    assert_eq!(s.len(), 3, "flips expect [C×H×W]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let vals = image.values();
    let mut out = vec![0.0; vals.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if vertical { x } else { w - 1 - x };
                out[(ch * h + y) * w + x] = vals[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("flip preserves finiteness")
}

/// Expands live samples with mirrored copies; attack samples pass through.
/// Labels, identities, and domain tags are preserved on every emitted sample.
pub fn augment_flips(samples: &[FaceSample], mode: FlipMode) -> Result<Vec<FaceSample>> {
    if samples.is_empty() {
        return Err(Error::contract("augment_flips", "input is empty"));
    }
    let mut out = Vec::new();
    for s in samples {
        out.push(s.clone());
        if s.liveness == Liveness::Live {
            out.push(FaceSample { image: flip_horizontal(&s.image), ..s.clone() });
            if mode == FlipMode::Triple {
                out.push(FaceSample { image: flip_vertical(&s.image), ..s.clone() });
            }
        }
    }
    Ok(out)
}

// ── Center crop ─────────────────────────────────────────────────────────

/// Central window with each spatial extent scaled by `fraction` (floored).
pub fn center_crop(image: &Tensor, fraction: f64) -> Result<Tensor> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(
            "center_crop",
            format!("fraction must lie in (0,1], got {fraction}"),
        ));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dimension("center_crop", format!("expected [C×H×W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ch, cw) = ((h as f64 * fraction) as usize, (w as f64 * fraction) as usize);
    if ch == 0 || cw == 0 {
        return Err(Error::dimension(
            "center_crop",
            format!("fraction {fraction} collapses {h}×{w} to {ch}×{cw}"),
        ));
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let vals = image.values();
    let mut out = vec![0.0; c * ch * cw];
    for chan in 0..c {
        for y in 0..ch {
            let src = (chan * h + oy + y) * w + ox;
            let dst = (chan * ch + y) * cw;
            out[dst..dst + cw].copy_from_slice(&vals[src..src + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

// ── PPM codec ───────────────────────────────────────────────────────────

/// Writes `image: [3×H×W]` as binary 8-bit PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dimension("write_ppm", format!("expected [3×H×W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let vals = image.values();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((vals[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary 8-bit PPM into `[3×H×W]` with values in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |offset: usize, detail: String| Error::Decode {
        path: path.display().to_string(),
        offset,
        detail,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(decode_err(0, "missing P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and `#` comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(decode_err(pos, "truncated header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(decode_err(pos, "expected integer header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| decode_err(start, format!("header field {text} out of range")))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(decode_err(pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(decode_err(pos, format!("degenerate image {w}x{h}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(decode_err(pos, "expected single whitespace after maxval".into())),
    }
    let plane = w * h;
    let need = 3 * plane;
    if bytes.len() - pos < need {
        return Err(decode_err(
            bytes.len(),
            format!("pixel payload truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let mut vals = vec![0.0f64; need];
    for i in 0..plane {
        for c in 0..3 {
            vals[c * plane + i] = bytes[pos + 3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], vals)
}

// ── Manifest I/O ────────────────────────────────────────────────────────

const MANIFEST_HEADER: &str = "path,identity,liveness,domain";

/// Writes `manifest.csv` plus an `images/` tree of PPM files under `dir`.
/// Returns the manifest path. Rows keep the input ordering.
pub fn save_dataset(samples: &[FaceSample], dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.ppm");
        write_ppm(&dir.join(&rel), &s.image)?;
        manifest.push_str(&format!("{rel},{},{},{}\n", s.identity, s.liveness, s.domain));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a `path,identity,liveness,domain` manifest; image paths resolve
/// relative to the manifest's directory. Output order follows row order.
pub fn load_manifest(path: &Path) -> Result<Vec<FaceSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(1, format!("bad header {header:?}, expected {MANIFEST_HEADER:?}")))
        }
        None => return Err(parse_err(1, "empty manifest".into())),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 fields, got {}", fields.len())));
        }
        let identity: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad identity {:?}", fields[1])))?;
        let liveness = Liveness::parse(fields[2].trim())
            .ok_or_else(|| parse_err(lineno, format!("bad liveness {:?}, expected live|attack", fields[2])))?;
        let domain = fields[3].trim();
        if domain.is_empty() {
            return Err(parse_err(lineno, "empty domain tag".into()));
        }
        let image = read_ppm(&base.join(fields[0].trim()))?;
        out.push(FaceSample { image, identity, liveness, domain: domain.to_string() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig::two_domain(2, 4, 16, 7)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.values(), y.image.values());
            assert_eq!(x.identity, y.identity);
            assert_eq!(x.liveness, y.liveness);
            assert_eq!(x.domain, y.domain);
        }
    }

    #[test]
    fn generation_counts_are_balanced() {
        let samples = generate(&small_cfg()).unwrap();
        assert_eq!(samples.len(), 16);
        let live = samples.iter().filter(|s| s.liveness == Liveness::Live).count();
        assert_eq!(live, 8);
        assert_eq!(samples.iter().filter(|s| s.domain == "studio").count(), 8);
    }

    #[test]
    fn generation_output_is_in_range() {
        for s in generate(&small_cfg()).unwrap() {
            assert!(s.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.shape(), &[3, 16, 16]);
        }
    }

    #[test]
    fn odd_samples_per_id_rejected() {
        let mut cfg = small_cfg();
        cfg.samples_per_id = 3;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        cfg.samples_per_id = 4;
        cfg.n_identities = 1;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn linear_probe_separates_live_from_attack_in_one_domain() {
        let mut cfg = SyntheticConfig::two_domain(2, 20, 16, 99);
        cfg.domains.truncate(1);
        let samples = generate(&cfg).unwrap();
        let dim = 3 * 16 * 16;

        // split: even indices train, odd indices test (both stay balanced
        // because live/attack alternate in blocks of 10 per identity)
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            let y = if s.liveness == Liveness::Live { 1.0 } else { 0.0 };
            if i % 2 == 0 {
                train.push((s.image.values().to_vec(), y));
            } else {
                test.push((s.image.values().to_vec(), y));
            }
        }

        // logistic regression by full-batch gradient descent
        let mut w = vec![0.0f64; dim];
        let mut b = 0.0f64;
        for _ in 0..400 {
            let mut gw = vec![0.0f64; dim];
            let mut gb = 0.0f64;
            for (x, y) in &train {
                let z: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let d = p - y;
                for (gwi, xi) in gw.iter_mut().zip(x) {
                    *gwi += d * xi;
                }
                gb += d;
            }
            let n = train.len() as f64;
            for (wi, gwi) in w.iter_mut().zip(&gw) {
                *wi -= 0.05 * gwi / n;
            }
            b -= 0.05 * gb / n;
        }

        let correct = test
            .iter()
            .filter(|(x, y)| {
                let z: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                (z > 0.0) == (*y > 0.5)
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.5, "probe accuracy {acc} not above chance");
        assert!(acc >= 0.85, "probe accuracy {acc} unexpectedly weak");
    }

    #[test]
    fn flip_counts_match_modes() {
        let samples = generate(&small_cfg()).unwrap();
        let lives = samples.iter().filter(|s| s.liveness == Liveness::Live).cloned();
        let attacks = samples.iter().filter(|s| s.liveness == Liveness::Attack).cloned();
        let mixed: Vec<FaceSample> = lives.take(3).chain(attacks.take(5)).collect();

        let tripled = augment_flips(&mixed, FlipMode::Triple).unwrap();
        assert_eq!(tripled.iter().filter(|s| s.liveness == Liveness::Live).count(), 9);
        assert_eq!(tripled.iter().filter(|s| s.liveness == Liveness::Attack).count(), 5);

        let doubled = augment_flips(&mixed, FlipMode::Double).unwrap();
        assert_eq!(doubled.iter().filter(|s| s.liveness == Liveness::Live).count(), 6);
        assert_eq!(doubled.iter().filter(|s| s.liveness == Liveness::Attack).count(), 5);
    }

    #[test]
    fn flips_preserve_labels_and_are_involutions() {
        let samples = generate(&small_cfg()).unwrap();
        for out in augment_flips(&samples, FlipMode::Triple).unwrap() {
            let src = samples.iter().find(|s| s.identity == out.identity && s.domain == out.domain);
            assert!(src.is_some());
        }
        let img = &samples[0].image;
        assert_eq!(flip_horizontal(&flip_horizontal(img)).values(), img.values());
        assert_eq!(flip_vertical(&flip_vertical(img)).values(), img.values());
    }

    #[test]
    fn augment_rejects_empty_input() {
        assert!(augment_flips(&[], FlipMode::Double).is_err());
    }

    #[test]
    fn crop_identity_and_arithmetic() {
        let img = Tensor::new(vec![3, 4, 4], (0..48).map(|i| i as f64 / 48.0).collect()).unwrap();
        assert_eq!(center_crop(&img, 1.0).unwrap().values(), img.values());

        let half = center_crop(&img, 0.5).unwrap();
        assert_eq!(half.shape(), &[3, 2, 2]);
        // central 2×2 window of a 4×4 grid starts at (1,1)
        assert_eq!(half.values()[0], img.values()[4 * 1 + 1]);
    }

    #[test]
    fn crop_composition_matches_single_crop() {
        let img = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
        .unwrap();
        let two_step = center_crop(&center_crop(&img, 0.5).unwrap(), 0.5).unwrap();
        let one_step = center_crop(&img, 0.25).unwrap();
        assert_eq!(two_step.shape(), one_step.shape());
        assert_eq!(two_step.values(), one_step.values());
    }

    #[test]
    fn crop_rejects_degenerate_and_bad_fraction() {
        let img = Tensor::zeros(vec![3, 4, 4]);
        assert!(matches!(center_crop(&img, 0.1), Err(Error::Dimension { .. })));
        assert!(matches!(center_crop(&img, 0.0), Err(Error::Contract { .. })));
        assert!(matches!(center_crop(&img, 1.5), Err(Error::Contract { .. })));
    }

    #[test]
    fn ppm_round_trip_is_lossless_up_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = generate(&small_cfg()).unwrap().remove(0).image;
        let path = dir.path().join("face.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn ppm_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ppm");
        fs::write(&bad, b"P5\n2 2\n255\n0000").unwrap();
        assert!(matches!(read_ppm(&bad), Err(Error::Decode { offset: 0, .. })));

        let short = dir.path().join("short.ppm");
        fs::write(&short, b"P6\n2 2\n255\nab").unwrap();
        assert!(matches!(read_ppm(&short), Err(Error::Decode { .. })));
    }

    #[test]
    fn dataset_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&small_cfg()).unwrap();
        let manifest = save_dataset(&samples, dir.path()).unwrap();
        let back = load_manifest(&manifest).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.liveness, b.liveness);
            assert_eq!(a.domain, b.domain);
            for (x, y) in a.image.values().iter().zip(b.image.values()) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn empty_manifest_yields_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(&path, format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn bad_liveness_row_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(&path, format!("{MANIFEST_HEADER}\nimages/x.ppm,0,alive,studio\n")).unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("alive"), "{detail}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(&path, format!("{MANIFEST_HEADER}\nimages/nope.ppm,0,live,studio\n")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Io { .. })));
    }
}
