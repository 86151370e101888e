//! Synthetic hemorrhage-like dataset: generation, on-disk layout and
//! validated loading.
//!
//! Each case is an elliptical "brain" with smooth texture and one to three
//! bright elliptical lesions. The prognosis label depends on lesion volume
//! *and* on the GCS score carried only by the clinical text, so neither
//! modality alone determines it:
//!
//! `poor  <=>  (volume > V_thr && gcs < 12) || gcs < 9`
//!
//! `V_thr` is the 60th percentile of the generator's volume distribution,
//! estimated by a fixed-seed Monte Carlo pass for the configured raster size.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::standard_normal;
use crate::raster::{jaccard_ratio, BBox, BinaryMask, GrayImage};

pub const GENERATOR_VERSION: &str = "ichscnet-synth/1";
pub const MIN_CASES: usize = 8;

/// Millilitres per pixel at the 128x128 reference raster.
pub const REFERENCE_ML_PER_PIXEL: f64 = 0.01;
const REFERENCE_SIDE: f64 = 128.0;
const THRESHOLD_SEED: u64 = 0x5EED_0F_1C4;
const THRESHOLD_SAMPLES: usize = 2000;
const THRESHOLD_QUANTILE: f64 = 0.6;

pub const GCS_RANGE: (u32, u32) = (3, 15);
pub const AGE_RANGE: (u32, u32) = (18, 95);
pub const STAY_RANGE: (u32, u32) = (1, 60);
pub const ONSET_RANGE: (u32, u32) = (1, 72);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Treatment {
    Conservative,
    Surgical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Location {
    LeftAnterior,
    RightAnterior,
    LeftPosterior,
    RightPosterior,
    Central,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Treatment::Conservative => "conservative",
            Treatment::Surgical => "surgical",
        })
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::LeftAnterior => "left-anterior",
            Location::RightAnterior => "right-anterior",
            Location::LeftPosterior => "left-posterior",
            Location::RightPosterior => "right-posterior",
            Location::Central => "central",
        })
    }
}

/// Structured clinical attributes plus their rendered sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalText {
    pub age: u32,
    pub gender: Gender,
    pub stay_days: u32,
    pub onset_to_ct_hours: u32,
    pub gcs: u32,
    pub treatment: Treatment,
    pub location: Location,
    pub volume_ml: f64,
    pub rendered: String,
}

impl ClinicalText {
    /// Builds the record and renders its text; fails on out-of-range fields.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        age: u32,
        gender: Gender,
        stay_days: u32,
        onset_to_ct_hours: u32,
        gcs: u32,
        treatment: Treatment,
        location: Location,
        volume_ml: f64,
    ) -> Result<Self> {
        let mut t = Self {
            age,
            gender,
            stay_days,
            onset_to_ct_hours,
            gcs,
            treatment,
            location,
            volume_ml,
            rendered: String::new(),
        };
        t.rendered = render_text(&t)?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: u32, (lo, hi): (u32, u32)| {
            if v < lo || v > hi {
                Err(Error::InvalidInput(format!("{name} = {v} outside [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        check("age", self.age, AGE_RANGE)?;
        check("stay_days", self.stay_days, STAY_RANGE)?;
        check("onset_to_ct_hours", self.onset_to_ct_hours, ONSET_RANGE)?;
        check("gcs", self.gcs, GCS_RANGE)?;
        if !(self.volume_ml.is_finite() && self.volume_ml >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "volume_ml = {} must be finite and non-negative",
                self.volume_ml
            )));
        }
        Ok(())
    }
}

/// Fixed template over the structured fields. The `rendered` field of the
/// input is ignored.
pub fn render_text(t: &ClinicalText) -> Result<String> {
    t.validate()?;
    Ok(format!(
        "Age {}, {}. Hospital stay {} d. Onset-to-CT {} h. GCS {}. Treatment: {}. Hemorrhage at {}, volume {:.1} mL.",
        t.age, t.gender, t.stay_days, t.onset_to_ct_hours, t.gcs, t.treatment, t.location, t.volume_ml
    ))
}

/// 0 = good prognosis, 1 = poor prognosis.
pub fn label_rule(volume_ml: f64, gcs: u32, volume_threshold_ml: f64) -> u8 {
    u8::from((volume_ml > volume_threshold_ml && gcs < 12) || gcs < 9)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: GrayImage,
    pub gt_mask: BinaryMask,
    pub rough_mask: BinaryMask,
    pub bbox: BBox,
    pub text: ClinicalText,
    pub label: u8,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        let id = &self.case_id;
        let (w, h) = (self.image.width, self.image.height);
        for (name, m) in [("gt_mask", &self.gt_mask), ("rough_mask", &self.rough_mask)] {
            if m.width != w || m.height != h {
                return Err(Error::data(
                    id,
                    format!("{name} is {}x{}, image is {w}x{h}", m.width, m.height),
                ));
            }
        }
        if self.label > 1 {
            return Err(Error::data(id, format!("label {} not in {{0, 1}}", self.label)));
        }
        if self.bbox.x_min > self.bbox.x_max
            || self.bbox.y_min > self.bbox.y_max
            || self.bbox.x_max >= w
            || self.bbox.y_max >= h
        {
            return Err(Error::data(id, format!("bbox {:?} invalid for {w}x{h}", self.bbox)));
        }
        let fg = self.gt_mask.count();
        if fg == 0 {
            return Err(Error::data(id, "gt_mask is empty"));
        }
        let inside = self
            .gt_mask
            .foreground()
            .filter(|&(x, y)| self.bbox.contains(x, y))
            .count();
        if (inside as f64) < 0.95 * fg as f64 {
            return Err(Error::data(
                id,
                format!("bbox contains {inside}/{fg} foreground pixels (< 95%)"),
            ));
        }
        let j = jaccard_ratio(&self.rough_mask, &self.gt_mask);
        if j < 0.3 {
            return Err(Error::data(id, format!("rough_mask Jaccard vs gt is {j:.3} (< 0.3)")));
        }
        self.text
            .validate()
            .map_err(|e| Error::data(id, e.to_string()))?;
        let expected = render_text(&self.text).map_err(|e| Error::data(id, e.to_string()))?;
        if expected != self.text.rendered {
            return Err(Error::data(id, "rendered text does not match its fields"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub good: usize,
    pub poor: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.good + self.poor
    }

    pub fn of(labels: impl IntoIterator<Item = u8>) -> Self {
        let mut c = Self::default();
        for l in labels {
            if l == 1 {
                c.poor += 1;
            } else {
                c.good += 1;
            }
        }
        c
    }
}

/// A loaded (or freshly generated) dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub generator_version: String,
    pub image_width: usize,
    pub image_height: usize,
    pub volume_threshold_ml: f64,
    pub ml_per_pixel: f64,
    pub class_counts: ClassCounts,
    pub cases: Vec<CaseRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    generator_version: String,
    seed: u64,
    image_width: usize,
    image_height: usize,
    volume_threshold_ml: f64,
    ml_per_pixel: f64,
    label_rule: String,
    class_counts: ClassCounts,
    cases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CaseLine {
    case_id: String,
    age: u32,
    gender: Gender,
    stay_days: u32,
    onset_to_ct_hours: u32,
    gcs: u32,
    treatment: Treatment,
    location: Location,
    volume_ml: f64,
    rendered: String,
    bbox: [usize; 4],
    label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
        }
    }
}

impl GeneratorConfig {
    pub fn square(side: usize) -> Self {
        Self {
            width: side,
            height: side,
        }
    }

    /// Pixel area scaled so volumes are comparable across raster sizes.
    pub fn ml_per_pixel(&self) -> f64 {
        REFERENCE_ML_PER_PIXEL * REFERENCE_SIDE * REFERENCE_SIDE / (self.width * self.height) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidInput(format!(
                "raster {}x{} too small (minimum 16x16)",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// 60th percentile of lesion volume under this generator.
    pub fn volume_threshold_ml(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(THRESHOLD_SEED);
        let mut vols: Vec<f64> = (0..THRESHOLD_SAMPLES)
            .map(|_| {
                let a = Anatomy::sample(self, &mut rng);
                a.lesion_mask(self).count() as f64 * self.ml_per_pixel()
            })
            .collect();
        vols.sort_by(f64::total_cmp);
        quantile_sorted(&vols, THRESHOLD_QUANTILE)
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

struct Anatomy {
    brain: Ellipse,
    lesions: Vec<(Ellipse, f64)>,
}

impl Anatomy {
    fn sample(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let brain = Ellipse {
            cx: w * (0.5 + rng.random_range(-0.04..0.04)),
            cy: h * (0.5 + rng.random_range(-0.04..0.04)),
            rx: w * rng.random_range(0.36..0.44),
            ry: h * rng.random_range(0.38..0.46),
            angle: rng.random_range(-0.3..0.3),
        };
        let n = rng.random_range(1..=3);
        let side = w.min(h);
        let mut lesions = Vec::with_capacity(n);
        for _ in 0..n {
            // centre inside the inner 60% of the brain ellipse
            let (cx, cy) = loop {
                let u: f64 = rng.random_range(-1.0..1.0);
                let v: f64 = rng.random_range(-1.0..1.0);
                if u * u + v * v <= 1.0 {
                    let (s, c) = brain.angle.sin_cos();
                    let (px, py) = (0.6 * u * brain.rx, 0.6 * v * brain.ry);
                    break (brain.cx + px * c - py * s, brain.cy + px * s + py * c);
                }
            };
            let e = Ellipse {
                cx,
                cy,
                rx: side * rng.random_range(0.05..0.15),
                ry: side * rng.random_range(0.05..0.15),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            let intensity = 200.0 + rng.random_range(-10.0..10.0);
            lesions.push((e, intensity));
        }
        Self { brain, lesions }
    }

    fn lesion_mask(&self, cfg: &GeneratorConfig) -> BinaryMask {
        BinaryMask::from_fn(cfg.width, cfg.height, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            self.brain.contains(px, py) && self.lesions.iter().any(|(e, _)| e.contains(px, py))
        })
    }
}

struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(1.0..4.0),
                    rng.random_range(1.0..4.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(3.0..7.0),
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
            .sum()
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn sample_u32(rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.random_range(lo..=hi)
}

fn location_of(mask: &BinaryMask, brain: &Ellipse) -> Location {
    let n = mask.count().max(1) as f64;
    let (sx, sy) = mask
        .foreground()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x as f64 + 0.5, b + y as f64 + 0.5));
    let (dx, dy) = ((sx / n - brain.cx) / brain.rx, (sy / n - brain.cy) / brain.ry);
    if dx.abs() < 0.15 && dy.abs() < 0.15 {
        return Location::Central;
    }
    match (dx < 0.0, dy < 0.0) {
        (true, true) => Location::LeftAnterior,
        (false, true) => Location::RightAnterior,
        (true, false) => Location::LeftPosterior,
        (false, false) => Location::RightPosterior,
    }
}

fn make_rough_mask(gt: &BinaryMask, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut radius: usize = rng.random_range(1..=3);
    loop {
        let mut m = gt.dilate(radius);
        for v in m.data.iter_mut() {
            if *v && rng.random_bool(0.1) {
                *v = false;
            }
        }
        if !m.is_empty() && jaccard_ratio(&m, gt) >= 0.3 {
            return m;
        }
        if radius == 0 {
            return gt.clone();
        }
        radius -= 1;
    }
}

fn make_bbox(gt: &BinaryMask, rng: &mut ChaCha8Rng) -> BBox {
    let exact = gt.bounding_box().expect("lesion mask is never empty");
    let fg = gt.count() as f64;
    let (w, h) = (gt.width as isize, gt.height as isize);
    for _ in 0..16 {
        let j = |v: usize, hi: isize, rng: &mut ChaCha8Rng| {
            (v as isize + rng.random_range(-3i64..=3) as isize).clamp(0, hi - 1) as usize
        };
        let b = BBox {
            x_min: j(exact.x_min, w, rng),
            y_min: j(exact.y_min, h, rng),
            x_max: j(exact.x_max, w, rng),
            y_max: j(exact.y_max, h, rng),
        };
        if b.x_min > b.x_max || b.y_min > b.y_max {
            continue;
        }
        let inside = gt.foreground().filter(|&(x, y)| b.contains(x, y)).count() as f64;
        if inside >= 0.95 * fg {
            return b;
        }
    }
    exact
}

fn generate_case(cfg: &GeneratorConfig, seed: u64, index: usize, v_thr: f64) -> Result<CaseRecord> {
    let mut rng = case_rng(seed, index);
    let anatomy = loop {
        let a = Anatomy::sample(cfg, &mut rng);
        if !a.lesion_mask(cfg).is_empty() {
            break a;
        }
    };
    let gt = anatomy.lesion_mask(cfg);
    let texture = Texture::sample(&mut rng);
    let (w, h) = (cfg.width, cfg.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise = standard_normal(&mut rng);
            let v = if gt.get(x, y) {
                let base = anatomy
                    .lesions
                    .iter()
                    .find(|(e, _)| e.contains(px, py))
                    .map(|(_, i)| *i)
                    .unwrap_or(200.0);
                base + 5.0 * noise
            } else if anatomy.brain.contains(px, py) {
                95.0 + texture.at(px / w as f64, py / h as f64) + 4.0 * noise
            } else {
                8.0 + 2.0 * noise
            };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let image = GrayImage::new(w, h, pixels);
    let rough_mask = make_rough_mask(&gt, &mut rng);
    let bbox = make_bbox(&gt, &mut rng);
    let volume_ml = gt.count() as f64 * cfg.ml_per_pixel();
    let gcs = sample_u32(&mut rng, GCS_RANGE);
    let text = ClinicalText::new(
        sample_u32(&mut rng, AGE_RANGE),
        if rng.random_bool(0.5) { Gender::M } else { Gender::F },
        sample_u32(&mut rng, STAY_RANGE),
        sample_u32(&mut rng, ONSET_RANGE),
        gcs,
        if rng.random_bool(0.4) {
            Treatment::Surgical
        } else {
            Treatment::Conservative
        },
        location_of(&gt, &anatomy.brain),
        volume_ml,
    )?;
    Ok(CaseRecord {
        case_id: format!("case_{index:04}"),
        image,
        gt_mask: gt,
        rough_mask,
        bbox,
        label: label_rule(volume_ml, gcs, v_thr),
        text,
    })
}

/// Generates `n_cases` cases in memory.
pub fn generate_cases(cfg: &GeneratorConfig, n_cases: usize, seed: u64) -> Result<DatasetManifest> {
    if n_cases < MIN_CASES {
        return Err(Error::InvalidInput(format!(
            "n_cases = {n_cases} below the minimum of {MIN_CASES}"
        )));
    }
    cfg.validate()?;
    let v_thr = cfg.volume_threshold_ml();
    let cases = (0..n_cases)
        .map(|i| generate_case(cfg, seed, i, v_thr))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
        image_width: cfg.width,
        image_height: cfg.height,
        volume_threshold_ml: v_thr,
        ml_per_pixel: cfg.ml_per_pixel(),
        class_counts: ClassCounts::of(cases.iter().map(|c| c.label)),
        cases,
    })
}

/// Generates a default-sized dataset and writes it under `out_dir`.
pub fn generate_dataset(n_cases: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    generate_dataset_with(&GeneratorConfig::default(), n_cases, seed, out_dir)
}

pub fn generate_dataset_with(
    cfg: &GeneratorConfig,
    n_cases: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let ds = generate_cases(cfg, n_cases, seed)?;
    write_dataset(&ds, out_dir)?;
    Ok(ds)
}

pub fn write_dataset(ds: &DatasetManifest, out_dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "rough"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mf = ManifestFile {
        generator_version: ds.generator_version.clone(),
        seed: ds.seed,
        image_width: ds.image_width,
        image_height: ds.image_height,
        volume_threshold_ml: ds.volume_threshold_ml,
        ml_per_pixel: ds.ml_per_pixel,
        label_rule: "poor iff (volume_ml > volume_threshold_ml and gcs < 12) or gcs < 9".into(),
        class_counts: ds.class_counts,
        cases: ds.cases.iter().map(|c| c.case_id.clone()).collect(),
    };
    write_json(&out_dir.join("manifest.json"), &mf)?;

    let path = out_dir.join("cases.jsonl");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for c in &ds.cases {
        let t = &c.text;
        let line = CaseLine {
            case_id: c.case_id.clone(),
            age: t.age,
            gender: t.gender,
            stay_days: t.stay_days,
            onset_to_ct_hours: t.onset_to_ct_hours,
            gcs: t.gcs,
            treatment: t.treatment,
            location: t.location,
            volume_ml: t.volume_ml,
            rendered: t.rendered.clone(),
            bbox: c.bbox.as_array(),
            label: c.label,
        };
        let s = serde_json::to_string(&line).map_err(|e| Error::json(&path, e))?;
        writeln!(w, "{s}").map_err(|e| Error::io(&path, e))?;
        write_gray_png(
            &out_dir.join("images").join(format!("{}.png", c.case_id)),
            c.image.width,
            c.image.height,
            &c.image.data,
        )?;
        write_mask_png(&out_dir.join("masks").join(format!("{}.png", c.case_id)), &c.gt_mask)?;
        write_mask_png(&out_dir.join("rough").join(format!("{}.png", c.case_id)), &c.rough_mask)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads and fully validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mf: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;

    let cpath = dir.join("cases.jsonl");
    let f = File::open(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let mut lines = std::collections::HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&cpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cl: CaseLine = serde_json::from_str(&line).map_err(|e| Error::Data {
            case_id: None,
            message: format!("cases.jsonl line {}: {e}", i + 1),
        })?;
        lines.insert(cl.case_id.clone(), cl);
    }

    let mut cases = Vec::with_capacity(mf.cases.len());
    for id in &mf.cases {
        let cl = lines
            .remove(id)
            .ok_or_else(|| Error::data(id, "listed in manifest but missing from cases.jsonl"))?;
        let (w, h, pixels) = read_gray_png(&dir.join("images").join(format!("{id}.png")), id)?;
        if w != mf.image_width || h != mf.image_height {
            return Err(Error::data(
                id,
                format!("image is {w}x{h}, manifest declares {}x{}", mf.image_width, mf.image_height),
            ));
        }
        let gt = read_mask_png(&dir.join("masks").join(format!("{id}.png")), id)?;
        let rough = read_mask_png(&dir.join("rough").join(format!("{id}.png")), id)?;
        let text = ClinicalText {
            age: cl.age,
            gender: cl.gender,
            stay_days: cl.stay_days,
            onset_to_ct_hours: cl.onset_to_ct_hours,
            gcs: cl.gcs,
            treatment: cl.treatment,
            location: cl.location,
            volume_ml: cl.volume_ml,
            rendered: cl.rendered,
        };
        let case = CaseRecord {
            case_id: id.clone(),
            image: GrayImage::new(w, h, pixels),
            gt_mask: gt,
            rough_mask: rough,
            bbox: BBox::from_array(cl.bbox),
            text,
            label: cl.label,
        };
        case.validate()?;
        cases.push(case);
    }
    if let Some(extra) = lines.keys().next() {
        return Err(Error::data(extra, "present in cases.jsonl but not listed in manifest"));
    }
    let counts = ClassCounts::of(cases.iter().map(|c| c.label));
    if counts != mf.class_counts {
        return Err(Error::Data {
            case_id: None,
            message: format!(
                "manifest class counts {:?} disagree with labels {:?}",
                mf.class_counts, counts
            ),
        });
    }
    Ok(DatasetManifest {
        seed: mf.seed,
        generator_version: mf.generator_version,
        image_width: mf.image_width,
        image_height: mf.image_height,
        volume_threshold_ml: mf.volume_threshold_ml,
        ml_per_pixel: mf.ml_per_pixel,
        class_counts: counts,
        cases,
    })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .finish()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_gray_png(path, mask.width, mask.height, &data)
}

fn read_gray_png(path: &PathBuf, case_id: &str) -> Result<(usize, usize, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::data(case_id, format!("{}: {e}", path.display())))?;
    let dec = png::Decoder::new(BufReader::new(f));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::data(case_id, format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(case_id, format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(
            case_id,
            format!("{} is not 8-bit grayscale", path.display()),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

fn read_mask_png(path: &PathBuf, case_id: &str) -> Result<BinaryMask> {
    let (w, h, data) = read_gray_png(path, case_id)?;
    if let Some(v) = data.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::data(
            case_id,
            format!("{} has value {v}; masks must be 0 or 255", path.display()),
        ));
    }
    Ok(BinaryMask::new(w, h, data.iter().map(|&v| v == 255).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_text(gcs: u32, volume: f64) -> ClinicalText {
        ClinicalText::new(65, Gender::M, 10, 5, gcs, Treatment::Surgical, Location::Central, volume).unwrap()
    }

    #[test]
    fn render_contains_gcs_token() {
        let t = sample_text(7, 3.0);
        assert!(t.rendered.contains("GCS 7"));
        assert!(t.rendered.starts_with("Age 65, M."));
    }

    #[test]
    fn render_is_deterministic() {
        let t = sample_text(12, 8.25);
        assert_eq!(render_text(&t).unwrap(), render_text(&t).unwrap());
    }

    #[test]
    fn render_rounds_volume_to_one_decimal() {
        let t = sample_text(12, 12.345);
        assert!(t.rendered.contains("12.3 mL"), "{}", t.rendered);
    }

    #[test]
    fn render_rejects_out_of_range() {
        let mut t = sample_text(12, 1.0);
        t.gcs = 2;
        assert!(render_text(&t).is_err());
        t.gcs = 9;
        t.volume_ml = -1.0;
        assert!(render_text(&t).is_err());
    }

    #[test]
    fn label_rule_branches() {
        assert_eq!(label_rule(1.0, 8, 5.0), 1);
        assert_eq!(label_rule(10.0, 11, 5.0), 1);
        assert_eq!(label_rule(1.0, 11, 5.0), 0);
        assert_eq!(label_rule(10.0, 12, 5.0), 0);
    }

    #[test]
    fn too_few_cases_is_an_error() {
        assert!(generate_cases(&GeneratorConfig::square(32), 0, 1).is_err());
        assert!(generate_cases(&GeneratorConfig::square(32), 7, 1).is_err());
    }

    #[test]
    fn generated_cases_satisfy_invariants() {
        let ds = generate_cases(&GeneratorConfig::square(32), 24, 5).unwrap();
        for c in &ds.cases {
            c.validate().unwrap();
        }
        let ds = generate_cases(&GeneratorConfig::default(), 8, 5).unwrap();
        for c in &ds.cases {
            c.validate().unwrap();
        }
    }
}
