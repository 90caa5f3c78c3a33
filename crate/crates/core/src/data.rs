//! Identity-labelled image datasets: validation, PPM + manifest I/O,
//! resizing and mean subtraction, translation/flip augmentation, and a
//! procedural generator of synthetic multi-camera identities.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::write_atomic;
use crate::tensor::Tensor;

/// One image with its identity and camera labels. Images are `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: Tensor<f32>,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReidDataset {
    pub records: Vec<Record>,
    /// Per-channel mean subtracted by [`preprocess`], if applied.
    pub channel_mean: Option<Vec<f32>>,
}

impl ReidDataset {
    pub fn new(records: Vec<Record>) -> Self {
        ReidDataset {
            records,
            channel_mean: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.records.iter().map(|r| r.identity + 1).max().unwrap_or(0)
    }

    pub fn cameras(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.camera).collect()
    }

    /// `[C, H, W]` of the first image.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.records.first().map(|r| r.image.shape())
    }

    /// Stacks the selected images into `[B, C, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.records[i].image).collect();
        Tensor::stack(&imgs)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.records[i].identity).collect()
    }

    /// Record indices grouped by identity.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_identities()];
        for (i, r) in self.records.iter().enumerate() {
            out[r.identity].push(i);
        }
        out
    }

    /// Identities must be contiguous `0..N`, images equally shaped and
    /// finite.
    pub fn validate(&self) -> Result<()> {
        let Some(shape) = self.image_shape() else {
            return Err(Error::Dataset("dataset is empty".into()));
        };
        if shape.len() != 3 {
            return Err(Error::Dataset(format!("images must be [C, H, W], got {shape:?}")));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.image.shape() != shape {
                return Err(Error::Dataset(format!(
                    "record {i} has shape {:?}, expected {shape:?}",
                    r.image.shape()
                )));
            }
            if !r.image.all_finite() {
                return Err(Error::Dataset(format!("record {i} has non-finite pixels")));
            }
        }
        let ids: BTreeSet<usize> = self.records.iter().map(|r| r.identity).collect();
        if let Some(gap) = (0..self.num_identities()).find(|i| !ids.contains(i)) {
            return Err(Error::Dataset(format!(
                "identity labels are not contiguous: {gap} missing below {}",
                self.num_identities()
            )));
        }
        Ok(())
    }

    /// [`ReidDataset::validate`] plus: every identity appears in every
    /// listed camera.
    pub fn validate_for_cameras(&self, cameras: &[usize]) -> Result<()> {
        self.validate()?;
        let present: BTreeSet<(usize, usize)> =
            self.records.iter().map(|r| (r.identity, r.camera)).collect();
        for id in 0..self.num_identities() {
            for &cam in cameras {
                if !present.contains(&(id, cam)) {
                    return Err(Error::Dataset(format!(
                        "identity {id} has no image from camera {cam}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Records of the given identities, relabelled `0..ids.len()` in the
    /// order given.
    pub fn subset_identities(&self, ids: &[usize]) -> ReidDataset {
        let map: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let records = self
            .records
            .iter()
            .filter_map(|r| {
                map.get(&r.identity).map(|&new| Record {
                    image: r.image.clone(),
                    identity: new,
                    camera: r.camera,
                })
            })
            .collect();
        ReidDataset {
            records,
            channel_mean: self.channel_mean.clone(),
        }
    }

    /// Writes every image as `img_XXXXX.ppm` plus `manifest.txt` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, r) in self.records.iter().enumerate() {
            let name = format!("img_{i:05}.ppm");
            write_atomic(&dir.join(&name), &encode_ppm(&r.image)?)?;
            manifest.push_str(&format!("{name} {} {}\n", r.identity, r.camera));
        }
        let path = dir.join("manifest.txt");
        write_atomic(&path, manifest.as_bytes())?;
        Ok(path)
    }
}

/// Binary PPM (`P6`, maxval 255) of a `[3, H, W]` image with values in
/// `[0, 1]` (clamped).
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("encode_ppm", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Parses a binary PPM into a `[3, H, W]` image with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let err = |msg: &str| Error::Raster {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
    }
    if fields[0] != "P6" {
        return Err(err("expected magic P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(err("unsupported dimensions or maxval"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated raster"));
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = raster[(y * w + x) * 3 + c] as f32 / maxval as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a manifest of `relative_path identity camera` lines (paths
/// relative to the manifest's directory) and the images it names.
pub fn load_directory(manifest: &Path) -> Result<ReidDataset> {
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = Vec::new();
    let mut id_lines: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |msg: String| Error::Manifest {
            path: manifest.to_path_buf(),
            line: line_no,
            msg,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(malformed(format!(
                "expected `path identity camera`, got {} fields",
                parts.len()
            )));
        }
        let identity: usize = parts[1]
            .parse()
            .map_err(|_| malformed(format!("bad identity `{}`", parts[1])))?;
        let camera: usize = parts[2]
            .parse()
            .map_err(|_| malformed(format!("bad camera `{}`", parts[2])))?;
        if let Some(first) = seen.insert(parts[0].to_string(), line_no) {
            return Err(Error::DuplicateEntry {
                manifest: manifest.to_path_buf(),
                line: line_no,
                file: PathBuf::from(format!("{} (first listed on line {first})", parts[0])),
            });
        }
        let file = base.join(parts[0]);
        let bytes = fs::read(&file).map_err(|_| Error::MissingFile {
            manifest: manifest.to_path_buf(),
            line: line_no,
            file: file.clone(),
        })?;
        id_lines.entry(identity).or_insert(line_no);
        records.push(Record {
            image: decode_ppm(&bytes, &file)?,
            identity,
            camera,
        });
    }
    let ds = ReidDataset::new(records);
    if let Some(max) = id_lines.keys().next_back() {
        if let Some(gap) = (0..=*max).find(|k| !id_lines.contains_key(k)) {
            let next = id_lines.range(gap..).next().map(|(_, l)| *l).unwrap_or(0);
            return Err(Error::Manifest {
                path: manifest.to_path_buf(),
                line: next,
                msg: format!("identity labels skip {gap}; identities must be contiguous from 0"),
            });
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// Bilinear resize of a `[C, H, W]` image (half-pixel centres, edge clamp).
pub fn resize_bilinear(image: &Tensor<f32>, size: (usize, usize)) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("resize", s, &[0, size.0, size.1]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (th, tw) = size;
    if th == 0 || tw == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let sy = h as f32 / th as f32;
    let sx = w as f32 / tw as f32;
    let d = image.data();
    let mut out = vec![0.0f32; c * th * tw];
    for y in 0..th {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for x in 0..tw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(ch * th + y) * tw + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}

/// Mirror left-right.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Integer translation by `(dy, dx)`; exposed borders are zero-filled.
pub fn translate(image: &Tensor<f32>, dy: isize, dx: isize) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let d = image.data();
    let mut out = Tensor::zeros(s);
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if sx < 0 || sx >= w {
                    continue;
                }
                o[(ch * h as usize + y as usize) * w as usize + x as usize] =
                    d[(ch * h as usize + sy as usize) * w as usize + sx as usize];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub translations_per_image: usize,
    /// Maximum shift as a fraction of `(H, W)`; each in `[0, 0.5)`.
    pub max_shift: (f64, f64),
    pub horizontal_flip: bool,
    pub target_size: (usize, usize),
}

impl AugmentConfig {
    pub fn new(target_size: (usize, usize)) -> Self {
        AugmentConfig {
            translations_per_image: 3,
            max_shift: (0.05, 0.05),
            horizontal_flip: true,
            target_size,
        }
    }

    pub fn copies_per_image(&self) -> usize {
        1 + self.translations_per_image + usize::from(self.horizontal_flip)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..0.5).contains(&f);
        if !ok(self.max_shift.0) || !ok(self.max_shift.1) {
            return Err(Error::Config(format!(
                "shift fractions must lie in [0, 0.5), got {:?}",
                self.max_shift
            )));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::Config("augment target_size must be positive".into()));
        }
        Ok(())
    }
}

/// Expands every record into the original, `translations_per_image`
/// randomly shifted copies, and (when enabled) one mirrored copy of the
/// original. Images are first resized to `target_size`. Labels are kept.
pub fn augment(dataset: &ReidDataset, cfg: &AugmentConfig, seed: u64) -> Result<ReidDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (th, tw) = cfg.target_size;
    let (ry, rx) = (cfg.max_shift.0 * th as f64, cfg.max_shift.1 * tw as f64);
    let mut records = Vec::with_capacity(dataset.len() * cfg.copies_per_image());
    for r in &dataset.records {
        let base = resize_bilinear(&r.image, cfg.target_size)?;
        let mut push = |image: Tensor<f32>| {
            records.push(Record {
                image,
                identity: r.identity,
                camera: r.camera,
            })
        };
        for _ in 0..cfg.translations_per_image {
            let dy = if ry > 0.0 { rng.random_range(-ry..=ry).round() as isize } else { 0 };
            let dx = if rx > 0.0 { rng.random_range(-rx..=rx).round() as isize } else { 0 };
            push(translate(&base, dy, dx));
        }
        if cfg.horizontal_flip {
            push(flip_horizontal(&base));
        }
        push(base);
    }
    // keep the original first within each group of copies
    let per = cfg.copies_per_image();
    for group in records.chunks_mut(per) {
        group.rotate_right(1);
    }
    Ok(ReidDataset {
        records,
        channel_mean: dataset.channel_mean.clone(),
    })
}

/// Resizes every image and subtracts the per-channel mean computed over
/// this (training) dataset. The mean is stored for reuse on test data.
pub fn preprocess(dataset: &ReidDataset, target_size: (usize, usize)) -> Result<ReidDataset> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot preprocess an empty dataset".into()));
    }
    let resized: Vec<Tensor<f32>> = dataset
        .records
        .iter()
        .map(|r| resize_bilinear(&r.image, target_size))
        .collect::<Result<_>>()?;
    let c = resized[0].shape()[0];
    let plane = target_size.0 * target_size.1;
    let mut sums = vec![0.0f64; c];
    for img in &resized {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += img.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    let n = (resized.len() * plane) as f64;
    let mean: Vec<f32> = sums.iter().map(|s| (s / n) as f32).collect();
    apply_mean(dataset, resized, &mean)
}

/// Resizes and subtracts a previously computed training mean.
pub fn preprocess_with_mean(
    dataset: &ReidDataset,
    target_size: (usize, usize),
    mean: &[f32],
) -> Result<ReidDataset> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot preprocess an empty dataset".into()));
    }
    let resized: Vec<Tensor<f32>> = dataset
        .records
        .iter()
        .map(|r| resize_bilinear(&r.image, target_size))
        .collect::<Result<_>>()?;
    apply_mean(dataset, resized, mean)
}

fn apply_mean(dataset: &ReidDataset, resized: Vec<Tensor<f32>>, mean: &[f32]) -> Result<ReidDataset> {
    let c = resized[0].shape()[0];
    if mean.len() != c {
        return Err(Error::dim("channel mean", &[mean.len()], &[c]));
    }
    let plane = resized[0].len() / c;
    let records = dataset
        .records
        .iter()
        .zip(resized)
        .map(|(r, mut img)| {
            for (ch, m) in mean.iter().enumerate() {
                img.data_mut()[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v -= m);
            }
            Record {
                image: img,
                identity: r.identity,
                camera: r.camera,
            }
        })
        .collect();
    Ok(ReidDataset {
        records,
        channel_mean: Some(mean.to_vec()),
    })
}

/// Nuisance factors of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthNuisance {
    /// Std of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Max per-shot translation of the figure, as a fraction of `(H, W)`.
    pub jitter: (f64, f64),
    /// Per-camera channel gain range `1 ± gain`.
    pub camera_gain: f64,
    /// Per-camera brightness offset range `± offset`.
    pub camera_offset: f64,
    /// Per-camera horizontal shift of the figure, as a fraction of `W`.
    pub camera_shift: f64,
    /// Amplitude of the per-shot random background.
    pub background: f64,
}

impl Default for SynthNuisance {
    fn default() -> Self {
        SynthNuisance {
            pixel_noise: 0.06,
            jitter: (0.08, 0.12),
            camera_gain: 0.3,
            camera_offset: 0.12,
            camera_shift: 0.1,
            background: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub cams: usize,
    pub shots_per_cam: usize,
    /// `(H, W)`.
    pub size: (usize, usize),
    pub seed: u64,
    pub nuisance: SynthNuisance,
}

impl SynthConfig {
    pub fn new(num_ids: usize, cams: usize, shots_per_cam: usize, size: (usize, usize), seed: u64) -> Self {
        SynthConfig {
            num_ids,
            cams,
            shots_per_cam,
            size,
            seed,
            nuisance: SynthNuisance::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct Appearance {
    hair: [f32; 3],
    skin: [f32; 3],
    shirt: [f32; 3],
    pants: [f32; 3],
    shoes: [f32; 3],
    /// 0 plain, 1 horizontal stripes, 2 vertical stripes, 3 checks.
    pattern: u8,
    pattern_color: [f32; 3],
    period: usize,
    /// Torso/leg boundary as a fraction of figure height.
    waist: f32,
    /// Figure width as a fraction of image width.
    build: f32,
    bag: Option<(bool, [f32; 3])>,
}

#[derive(Clone, Debug)]
struct CameraView {
    gain: [f32; 3],
    offset: f32,
    shift: f32,
}

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Clothing colours are drawn from a fixed palette so that identities
/// share attributes and differ in their combination.
const PALETTE: [[f32; 3]; 12] = [
    [0.85, 0.1, 0.1],
    [0.1, 0.65, 0.15],
    [0.1, 0.2, 0.85],
    [0.9, 0.85, 0.1],
    [0.9, 0.5, 0.05],
    [0.55, 0.1, 0.7],
    [0.1, 0.75, 0.8],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
    [0.5, 0.5, 0.5],
    [0.45, 0.25, 0.1],
    [0.95, 0.5, 0.7],
];

fn palette<R: Rng>(rng: &mut R) -> [f32; 3] {
    let c = PALETTE[rng.random_range(0..PALETTE.len())];
    let j = 0.04;
    c.map(|v| (v + rng.random_range(-j..=j)).clamp(0.0, 1.0))
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Appearance {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let skin_tone: f32 = rng.random_range(0.35..0.9);
        Appearance {
            hair: {
                let v: f32 = rng.random_range(0.0..0.5);
                [v, v * 0.8, v * 0.6]
            },
            skin: [skin_tone, skin_tone * 0.8, skin_tone * 0.65],
            shirt: palette(rng),
            pants: palette(rng),
            shoes: {
                let v: f32 = rng.random_range(0.0..0.4);
                [v, v, v]
            },
            pattern: rng.random_range(0..4),
            pattern_color: palette(rng),
            period: rng.random_range(2..5),
            waist: rng.random_range(0.45..0.6),
            build: rng.random_range(0.4..0.6),
            bag: if rng.random_bool(0.4) {
                Some((rng.random_bool(0.5), palette(rng)))
            } else {
                None
            },
        }
    }
}

fn render(
    app: &Appearance,
    cam: &CameraView,
    size: (usize, usize),
    nuisance: &SynthNuisance,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let (h, w) = size;
    let (hf, wf) = (h as f32, w as f32);
    let noise = Normal::new(0.0f32, nuisance.pixel_noise as f32).expect("noise std");
    // background: random base colour plus a linear gradient and blotches
    let bg_amp = nuisance.background as f32;
    let base: [f32; 3] = color(rng);
    let grad: [f32; 3] = [
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    let gdir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let blotches: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..hf),
                rng.random_range(0.0..wf),
                rng.random_range(1.5..(wf / 2.5).max(2.0)),
                color(rng),
            )
        })
        .collect();

    let jy = (rng.random_range(-1.0..1.0) * nuisance.jitter.0 as f32 * hf).round();
    let jx = (rng.random_range(-1.0..1.0) * nuisance.jitter.1 as f32 * wf + cam.shift * wf).round();
    let stride_phase: f32 = rng.random_range(-0.04..0.04);

    let top = 0.04 * hf + jy;
    let height = 0.92 * hf;
    let cx = wf / 2.0 + jx;
    let half_w = app.build * wf / 2.0;

    let mut img = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let t = (py - top) / height; // 0 at head top, 1 at feet
            let u = (px - cx) / half_w; // -1..1 across the body
            let mut px_color: Option<[f32; 3]> = None;
            if (0.0..1.0).contains(&t) {
                if t < 0.16 {
                    let hu = u / 0.45;
                    let ht = (t - 0.08) / 0.08;
                    if hu * hu + ht * ht <= 1.0 {
                        px_color = Some(if t < 0.06 { app.hair } else { app.skin });
                    }
                } else if t < app.waist {
                    if u.abs() <= 1.0 {
                        let (ly, lx) = ((py - top) as usize, (px - cx + wf) as usize);
                        let on = match app.pattern {
                            1 => (ly / app.period).is_multiple_of(2),
                            2 => (lx / app.period).is_multiple_of(2),
                            3 => ((ly / app.period) + (lx / app.period)).is_multiple_of(2),
                            _ => false,
                        };
                        px_color = Some(if on { app.pattern_color } else { app.shirt });
                    } else if u.abs() <= 1.25 && t > 0.2 {
                        px_color = Some(app.skin);
                    }
                    if let Some((left, bag)) = app.bag {
                        let bu = if left { -u } else { u };
                        if (0.55..1.35).contains(&bu) && t > app.waist - 0.18 {
                            px_color = Some(bag);
                        }
                    }
                } else {
                    let gap = 0.12 + stride_phase * (t - app.waist) * 4.0;
                    if u.abs() <= 0.85 && u.abs() >= gap {
                        px_color = Some(if t > 0.95 { app.shoes } else { app.pants });
                    }
                }
            }
            for c in 0..3 {
                let v = match px_color {
                    Some(col) => col[c],
                    None => {
                        let g = grad[c] * ((px / wf - 0.5) * gdir.cos() + (py / hf - 0.5) * gdir.sin());
                        let mut v = 0.5 + bg_amp * (base[c] - 0.5 + g);
                        for &(by, bx, r, col) in &blotches {
                            let dd = ((py - by).powi(2) + (px - bx).powi(2)) / (r * r);
                            if dd < 1.0 {
                                v = 0.5 + bg_amp * (col[c] - 0.5);
                            }
                        }
                        v
                    }
                };
                let v = v * cam.gain[c] + cam.offset + noise.sample(rng);
                // quantise to 8 bits so exported rasters reload bit-exactly
                img[(c * h + y) * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], img).expect("render shape")
}

/// Procedurally generated identities seen by `cams` cameras. Each identity
/// has a fixed appearance keyed to `(seed, identity)`; each camera applies
/// a fixed colour gain, brightness offset and figure shift; every shot adds
/// a random background, position jitter and pixel noise. Deterministic
/// per config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<ReidDataset> {
    if cfg.num_ids < 2 || cfg.cams < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs >= 2 identities and >= 2 cameras, got {} and {}",
            cfg.num_ids, cfg.cams
        )));
    }
    if cfg.shots_per_cam == 0 || cfg.size.0 < 4 || cfg.size.1 < 4 {
        return Err(Error::Config(format!(
            "degenerate synthetic sizes: shots {} image {:?}",
            cfg.shots_per_cam, cfg.size
        )));
    }
    let n = &cfg.nuisance;
    let cams: Vec<CameraView> = (0..cfg.cams)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xCA3, c as u64));
            let g = n.camera_gain as f32;
            let o = n.camera_offset as f32;
            let s = n.camera_shift as f32;
            CameraView {
                gain: [
                    1.0 + rng.random_range(-g..=g),
                    1.0 + rng.random_range(-g..=g),
                    1.0 + rng.random_range(-g..=g),
                ],
                offset: rng.random_range(-o..=o),
                shift: rng.random_range(-s..=s),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.num_ids * cfg.cams * cfg.shots_per_cam);
    for id in 0..cfg.num_ids {
        let mut app_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1D, id as u64));
        let app = Appearance::sample(&mut app_rng);
        for (c, cam) in cams.iter().enumerate() {
            let mut shot_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5407 + c as u64, id as u64));
            for _ in 0..cfg.shots_per_cam {
                records.push(Record {
                    image: render(&app, cam, cfg.size, n, &mut shot_rng),
                    identity: id,
                    camera: c,
                });
            }
        }
    }
    let ds = ReidDataset::new(records);
    ds.validate_for_cameras(&(0..cfg.cams).collect::<Vec<_>>())?;
    Ok(ds)
}

/// Generates `cfg.shots_per_cam + held_out` shots per identity and camera
/// and splits them by shot: the first `cfg.shots_per_cam` go to the
/// training set, the rest to the held-out set. The training part is
/// identical to `generate_synthetic(cfg)`.
pub fn generate_synthetic_split(
    cfg: &SynthConfig,
    held_out: usize,
) -> Result<(ReidDataset, ReidDataset)> {
    if held_out == 0 {
        return Err(Error::Config("held-out shots per camera must be >= 1".into()));
    }
    let per = cfg.shots_per_cam + held_out;
    let all = generate_synthetic(&SynthConfig {
        shots_per_cam: per,
        ..cfg.clone()
    })?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in all.records.into_iter().enumerate() {
        if i % per < cfg.shots_per_cam {
            train.push(r);
        } else {
            test.push(r);
        }
    }
    Ok((ReidDataset::new(train), ReidDataset::new(test)))
}
