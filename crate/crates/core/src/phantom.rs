//! Seeded synthetic cohorts with known deformations.
//!
//! Every case starts from the cohort template: an elliptical organ whose
//! cross-section tapers towards the first and last slices, fixed surrounding
//! anatomy, and a smooth texture. Each case then gets its own appearance
//! (a few low-contrast background blobs and a global gain/offset) and its own
//! deformation. The deformation has two parts: an organ-shape component that
//! rescales the template ellipse to the case's semi-axes and shifts it by up to
//! [`CASE_SHIFT_MAX`] px, faded out away from the organ, plus a smooth random
//! field of peak magnitude `deform_max`. The label is the template ellipse
//! pulled back through the full deformation analytically, so the returned field
//! reproduces the case label from the template label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use std::path::{Path, PathBuf};

use crate::atlas::{AtlasEntry, AtlasSet, ManifestEntry};
use crate::error::{Error, Result};
use crate::grid::{
    slice_file_name, write_oasg, write_volume, DisplacementField, Image2D, LabelMap2D, Raster,
    Spacing, Volume,
};
use crate::io::write_json_atomic;
use crate::transform::warp_values;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    /// Range of the organ's horizontal semi-axis at its widest slice, px.
    /// Each case draws its own value; the template uses the midpoint.
    pub organ_semi_axis_x: [f64; 2],
    /// Range of the organ's vertical semi-axis at its widest slice, px.
    pub organ_semi_axis_y: [f64; 2],
    /// Amplitude of the smoothed-noise texture.
    pub texture: f64,
    /// Range of the per-case organ contrast against the background.
    pub organ_contrast: [f64; 2],
    /// Peak magnitude of the smooth random part of each case's field, px.
    pub deform_max: f64,
    /// Gaussian sigma used to smooth the random displacement noise, px.
    pub smoothing_radius: f64,
    /// In-plane pixel size and slice thickness, mm.
    pub spacing_mm: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            slices: 12,
            organ_semi_axis_x: [10.0, 13.0],
            organ_semi_axis_y: [8.0, 11.0],
            texture: 0.15,
            organ_contrast: [0.3, 1.0],
            deform_max: 4.0,
            smoothing_radius: 12.0,
            spacing_mm: [1.0, 1.0, 3.0],
            seed: 0,
        }
    }
}

/// Margin kept between the organ (plus deformation) and the image border.
pub const ORGAN_MARGIN: f64 = 8.0;

/// Largest per-axis shift of a case's organ center from the template, px.
pub const CASE_SHIFT_MAX: f64 = 3.0;

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.width < 16 || self.height < 16 {
            return bad("phantom grid must be at least 16x16");
        }
        if self.slices == 0 {
            return bad("phantom needs at least one slice");
        }
        for r in [self.organ_semi_axis_x, self.organ_semi_axis_y] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad("organ semi-axis ranges must satisfy 0 < min <= max");
            }
        }
        if !(self.deform_max >= 0.0
            && self.smoothing_radius > 0.0
            && self.deform_max < self.smoothing_radius)
        {
            return bad("need 0 <= deform_max < smoothing_radius");
        }
        let c = self.organ_contrast;
        if !(c[0] > 0.0 && c[0] <= c[1] && c[1].is_finite()) {
            return bad("organ contrast range must satisfy 0 < min <= max");
        }
        if !(self.texture >= 0.0 && self.texture.is_finite()) {
            return bad("texture amplitude must be >= 0");
        }
        let reach_x =
            self.organ_semi_axis_x[1] + CASE_SHIFT_MAX + self.deform_max + ORGAN_MARGIN + 2.0;
        let reach_y =
            self.organ_semi_axis_y[1] + CASE_SHIFT_MAX + self.deform_max + ORGAN_MARGIN + 2.0;
        if 2.0 * reach_x > self.width as f64 || 2.0 * reach_y > self.height as f64 {
            return bad("organ does not fit inside the grid with an 8 px margin");
        }
        Spacing::new(self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2]).map(|_| ())
    }

    pub fn spacing(&self) -> Spacing {
        Spacing {
            x: self.spacing_mm[0],
            y: self.spacing_mm[1],
            z: self.spacing_mm[2],
        }
    }

    fn template_axes(&self) -> (f64, f64) {
        let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
        (mid(self.organ_semi_axis_x), mid(self.organ_semi_axis_y))
    }

    /// Width of the window that confines the organ-shape component.
    fn shape_window(&self) -> f64 {
        2.0 * self.organ_semi_axis_x[1].max(self.organ_semi_axis_y[1])
    }

    /// Upper bound on `smoothness_loss` of any generated ground-truth field.
    ///
    /// The loss is a mean of four squared unit differences, so it is at most
    /// `4 L^2` for a field with Lipschitz constant `L`. `L` is bounded by the
    /// slope of the random part (about `2 deform_max / smoothing_radius` for
    /// Gaussian-smoothed noise) plus the slope of the windowed shape part.
    pub fn field_smoothness_bound(&self) -> f64 {
        let (at, bt) = self.template_axes();
        let strain = |t: f64, r: [f64; 2]| (t / r[0] - 1.0).abs().max((t / r[1] - 1.0).abs());
        let strain = strain(at, self.organ_semi_axis_x).max(strain(bt, self.organ_semi_axis_y));
        let s = self.shape_window();
        // max |d/dr exp(-(r/s)^4)| is 1.52/s, attained near r = 0.93 s.
        let shape =
            strain + 1.52 / s * (strain * 0.93 * s + CASE_SHIFT_MAX * std::f64::consts::SQRT_2);
        let random = 2.0 * self.deform_max / self.smoothing_radius;
        4.0 * (random + shape).powi(2)
    }
}

/// One synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    /// Case appearance before deformation.
    pub template_image: Volume<Image2D>,
    /// Binary template organ label (shared by the cohort).
    pub template_label: Volume<LabelMap2D>,
    pub image: Volume<Image2D>,
    pub label: Volume<LabelMap2D>,
    /// Per-slice field mapping the template onto this case.
    pub fields: Vec<DisplacementField>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (u, v) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        (u * u + v * v).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

impl Blob {
    fn at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.x, y - self.y);
        self.amplitude * (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Cohort-level anatomy shared by every case.
struct Template {
    organs: Vec<Ellipse>,
    anatomy: Vec<Blob>,
    texture: Vec<Vec<f64>>,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words.
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn slice_profile(slice: usize, slices: usize) -> f64 {
    if slices == 1 {
        return 1.0;
    }
    let t = (slice as f64 + 0.5) / slices as f64;
    0.55 + 0.45 * (std::f64::consts::PI * t).sin()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * data[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

fn smooth_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    let blurred = gaussian_blur(&white, w, h, sigma);
    let peak = blurred.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        blurred.iter().map(|v| v / peak).collect()
    } else {
        blurred
    }
}

fn build_template(p: &PhantomParams) -> Template {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, u64::MAX));
    let (w, h) = (p.width as f64, p.height as f64);
    let (a, b) = p.template_axes();
    let cx = w / 2.0 + rng.random_range(-2.0..=2.0);
    let cy = h / 2.0 + rng.random_range(-2.0..=2.0);
    let organs = (0..p.slices)
        .map(|s| {
            let k = slice_profile(s, p.slices);
            Ellipse {
                cx,
                cy: cy + 0.15 * b * (s as f64 / p.slices.max(1) as f64 - 0.5),
                a: a * k,
                b: b * k,
            }
        })
        .collect();
    // Paired lateral structures and one posterior structure, outside the organ.
    let lateral = p.organ_semi_axis_x[1] + CASE_SHIFT_MAX + p.deform_max + 8.0;
    let anatomy = vec![
        Blob {
            x: cx - lateral,
            y: cy + 0.3 * b,
            sigma: 4.0,
            amplitude: 0.6,
        },
        Blob {
            x: cx + lateral,
            y: cy + 0.3 * b,
            sigma: 4.0,
            amplitude: 0.6,
        },
        Blob {
            x: cx,
            y: cy + p.organ_semi_axis_y[1] + CASE_SHIFT_MAX + p.deform_max + 7.0,
            sigma: 3.5,
            amplitude: -0.5,
        },
    ];
    let texture = (0..p.slices)
        .map(|_| {
            smooth_noise(&mut rng, p.width, p.height, 2.0)
                .into_iter()
                .map(|v| v * p.texture)
                .collect()
        })
        .collect();
    Template {
        organs,
        anatomy,
        texture,
    }
}

fn template_label(p: &PhantomParams, organ: &Ellipse) -> LabelMap2D {
    LabelMap2D::from_mask(p.width, p.height, |x, y| {
        organ.radius(x as f64, y as f64) <= 1.0
    })
    .expect("valid dims")
}

fn organ_intensity(organ: &Ellipse, x: f64, y: f64) -> f64 {
    // Bright organ with a dim rim, about one pixel of edge blur.
    let r = organ.radius(x, y);
    let edge = organ.a.min(organ.b) * (1.0 - r);
    let inside = 1.0 / (1.0 + (-2.5 * edge).exp());
    inside * (0.8 + 0.2 * r.min(1.0))
}

fn case_fields(p: &PhantomParams, rng: &mut ChaCha8Rng) -> Vec<DisplacementField> {
    let (w, h) = (p.width, p.height);
    let base_x = smooth_noise(rng, w, h, p.smoothing_radius);
    let base_y = smooth_noise(rng, w, h, p.smoothing_radius);
    let mut raw: Vec<(Vec<f64>, Vec<f64>)> = (0..p.slices)
        .map(|_| {
            let sx = smooth_noise(rng, w, h, p.smoothing_radius);
            let sy = smooth_noise(rng, w, h, p.smoothing_radius);
            (
                base_x.iter().zip(&sx).map(|(b, s)| b + 0.35 * s).collect(),
                base_y.iter().zip(&sy).map(|(b, s)| b + 0.35 * s).collect(),
            )
        })
        .collect();
    let peak = raw
        .iter()
        .flat_map(|(dx, dy)| dx.iter().zip(dy).map(|(u, v)| (u * u + v * v).sqrt()))
        .fold(0.0_f64, f64::max);
    let scale = if peak > 0.0 { p.deform_max / peak } else { 0.0 };
    raw.iter_mut()
        .map(|(dx, dy)| {
            let dx = dx.iter().map(|v| v * scale).collect();
            let dy = dy.iter().map(|v| v * scale).collect();
            DisplacementField::new(w, h, dx, dy).expect("finite field")
        })
        .collect()
}

/// Generates one case. Deterministic in `(params.seed, case_seed)`.
pub fn generate_case(params: &PhantomParams, case_seed: u64) -> Result<PhantomCase> {
    params.validate()?;
    let template = build_template(params);
    generate_from_template(params, &template, case_seed)
}

fn generate_from_template(
    p: &PhantomParams,
    template: &Template,
    case_seed: u64,
) -> Result<PhantomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, case_seed));
    let (w, h) = (p.width, p.height);
    let random_fields = case_fields(p, &mut rng);

    let gain = rng.random_range(0.8..1.25);
    let offset = rng.random_range(-0.2..0.2);
    let n_clutter = rng.random_range(2..=4);
    let clutter: Vec<Blob> = (0..n_clutter)
        .map(|_| Blob {
            x: rng.random_range(6.0..w as f64 - 6.0),
            y: rng.random_range(6.0..h as f64 - 6.0),
            sigma: rng.random_range(3.0..6.0),
            amplitude: rng.random_range(0.15..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect();
    let contrast = rng.random_range(p.organ_contrast[0]..=p.organ_contrast[1]);
    let case_a = rng.random_range(p.organ_semi_axis_x[0]..=p.organ_semi_axis_x[1]);
    let case_b = rng.random_range(p.organ_semi_axis_y[0]..=p.organ_semi_axis_y[1]);
    let shift_x = rng.random_range(-CASE_SHIFT_MAX..=CASE_SHIFT_MAX);
    let shift_y = rng.random_range(-CASE_SHIFT_MAX..=CASE_SHIFT_MAX);
    let (at, bt) = p.template_axes();
    let window = p.shape_window();
    // A zero amplitude switches deformation off entirely: the case is the template.
    let fields: Vec<DisplacementField> = if p.deform_max == 0.0 {
        random_fields
    } else {
        random_fields
            .iter()
            .zip(&template.organs)
            .map(|(r, organ)| {
                let (cx, cy) = (organ.cx + shift_x, organ.cy + shift_y);
                let shape = |x: f64, y: f64| {
                    let (ox, oy) = (x - cx, y - cy);
                    let g = (-((ox * ox + oy * oy).sqrt() / window).powi(4)).exp();
                    let tx = organ.cx + ox * at / case_a;
                    let ty = organ.cy + oy * bt / case_b;
                    (g * (tx - x), g * (ty - y))
                };
                DisplacementField::from_fn(w, h, |x, y| {
                    let (sx, sy) = shape(x as f64, y as f64);
                    let (rx, ry) = r.at(x, y);
                    (sx + rx, sy + ry)
                })
            })
            .collect::<Result<_>>()?
    };

    let mut template_images = Vec::with_capacity(p.slices);
    let mut template_labels = Vec::with_capacity(p.slices);
    let mut images = Vec::with_capacity(p.slices);
    let mut labels = Vec::with_capacity(p.slices);
    for (s, field) in fields.iter().enumerate() {
        let organ = &template.organs[s];
        let texture = &template.texture[s];
        let appearance = Image2D::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64, y as f64);
            let anatomy: f64 = template
                .anatomy
                .iter()
                .chain(&clutter)
                .map(|b| b.at(fx, fy))
                .sum();
            gain * (contrast * organ_intensity(organ, fx, fy) + anatomy + texture[y * w + x])
                + offset
        })?;
        let image = if p.deform_max == 0.0 {
            appearance.clone()
        } else {
            warp_values(&appearance, field)?
        };
        let label = LabelMap2D::from_mask(w, h, |x, y| {
            let (u, v) = field.at(x, y);
            organ.radius(x as f64 + u, y as f64 + v) <= 1.0
        })?;
        template_images.push(appearance);
        template_labels.push(template_label(p, organ));
        images.push(image);
        labels.push(label);
    }
    let spacing = p.spacing();
    Ok(PhantomCase {
        template_image: Volume::new(template_images, spacing)?,
        template_label: Volume::new(template_labels, spacing)?,
        image: Volume::new(images, spacing)?,
        label: Volume::new(labels, spacing)?,
        fields,
    })
}

/// A generated cohort: labeled atlases plus test cases whose labels are kept
/// for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub params: PhantomParams,
    pub atlases: Vec<(String, PhantomCase)>,
    pub tests: Vec<(String, PhantomCase)>,
}

pub fn atlas_id(i: usize) -> String {
    format!("atlas_{i:02}")
}

pub fn test_id(i: usize) -> String {
    format!("test_{i:02}")
}

const TEST_SEED_OFFSET: u64 = 1 << 32;

pub fn generate_cohort(params: &PhantomParams, n_atlases: usize, n_tests: usize) -> Result<Cohort> {
    params.validate()?;
    if n_atlases < 2 {
        return Err(Error::InvalidParams(format!(
            "an atlas set needs at least 2 atlases, got {n_atlases}"
        )));
    }
    let template = build_template(params);
    let atlases = (0..n_atlases)
        .map(|i| {
            Ok((
                atlas_id(i),
                generate_from_template(params, &template, i as u64)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let tests = (0..n_tests)
        .map(|i| {
            Ok((
                test_id(i),
                generate_from_template(params, &template, TEST_SEED_OFFSET + i as u64)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        params: params.clone(),
        atlases,
        tests,
    })
}

impl Cohort {
    /// Atlas set built from one slice of every atlas case.
    pub fn atlas_set(&self, slice: usize) -> Result<AtlasSet> {
        let entries = self
            .atlases
            .iter()
            .map(|(id, case)| {
                AtlasEntry::new(
                    id.clone(),
                    case.image.slice(slice).clone(),
                    case.label.slice(slice).clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        AtlasSet::new(entries)
    }
}

/// Written next to a cohort as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub params: PhantomParams,
    pub atlases: usize,
    pub tests: usize,
    /// Mean whole-volume DSC between every test label and every atlas label
    /// before any registration.
    pub pre_registration_dsc_percent: f64,
}

pub const ATLAS_MANIFEST: &str = "manifest.json";
pub const TEST_MANIFEST: &str = "tests.json";
pub const COHORT_SUMMARY: &str = "summary.json";

impl Cohort {
    pub fn summary(&self) -> Result<CohortSummary> {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (_, t) in &self.tests {
            for (_, a) in &self.atlases {
                total += crate::metrics::dsc3d(&a.label, &t.label)?;
                pairs += 1;
            }
        }
        Ok(CohortSummary {
            params: self.params.clone(),
            atlases: self.atlases.len(),
            tests: self.tests.len(),
            pre_registration_dsc_percent: if pairs == 0 {
                0.0
            } else {
                total / pairs as f64
            },
        })
    }

    /// Writes `atlases/<id>/{image,label,field}` and `tests/<id>/...` volume
    /// directories, the atlas manifest, a manifest of the tests in the same
    /// format, and the summary.
    pub fn write(&self, dir: &Path) -> Result<CohortSummary> {
        let write_group =
            |group: &str, cases: &[(String, PhantomCase)]| -> Result<Vec<ManifestEntry>> {
                cases
                    .iter()
                    .map(|(id, case)| {
                        let base = PathBuf::from(group).join(id);
                        write_volume(dir.join(&base).join("image"), &case.image)?;
                        write_volume(dir.join(&base).join("label"), &case.label)?;
                        let field_dir = dir.join(&base).join("field");
                        std::fs::create_dir_all(&field_dir)?;
                        for (s, f) in case.fields.iter().enumerate() {
                            write_oasg(field_dir.join(slice_file_name(s)), &f.clone().into())?;
                        }
                        Ok(ManifestEntry {
                            id: id.clone(),
                            image: base.join("image"),
                            label: base.join("label"),
                        })
                    })
                    .collect()
            };
        let atlases = write_group("atlases", &self.atlases)?;
        let tests = write_group("tests", &self.tests)?;
        write_json_atomic(&dir.join(ATLAS_MANIFEST), &atlases)?;
        write_json_atomic(&dir.join(TEST_MANIFEST), &tests)?;
        let summary = self.summary()?;
        write_json_atomic(&dir.join(COHORT_SUMMARY), &summary)?;
        Ok(summary)
    }
}

/// Foreground is one 4-connected component and the background, including the
/// border, is one 4-connected component (no holes).
pub fn is_simply_connected(label: &LabelMap2D) -> bool {
    let (w, h) = label.dims();
    let fg = |i: usize| label.data()[i] >= 0.5;
    let count_components = |want: bool| {
        let mut seen = vec![false; w * h];
        let mut components = 0;
        for start in 0..w * h {
            if seen[start] || fg(start) != want {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if !seen[j] && fg(j) == want {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        components
    };
    count_components(true) == 1 && count_components(false) <= 1
}
