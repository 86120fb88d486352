//! Synthetic segmentation domains.
//!
//! An image holds one object drawn from its domain's shape family on a
//! shaded background. Foreground and background colours belong to the class;
//! the domain style (per-channel gain and bias, a sinusoidal texture field,
//! pixel noise) is applied on top. Masks depend only on the family, the seed
//! and the image index, so two domains sharing a family produce identical
//! masks under the same seed.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Image;
use crate::netpbm;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    Ring,
}

impl ShapeFamily {
    fn tag(self) -> u64 {
        match self {
            Self::Ellipse => 1,
            Self::Polygon => 2,
            Self::Ring => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub texture_amplitude: f32,
    /// Cycles across the image.
    pub texture_frequency: f32,
    pub noise: f32,
}

impl Style {
    pub fn neutral() -> Self {
        Self { gain: [1.0; 3], bias: [0.0; 3], texture_amplitude: 0.04, texture_frequency: 3.0, noise: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub id: String,
    pub family: ShapeFamily,
    pub classes: usize,
    pub style: Style,
    /// Allowed foreground fraction of the image, `[min, max]`.
    pub area: [f32; 2],
    /// `[height, width]`.
    pub image_size: [usize; 2],
}

impl SyntheticDomain {
    pub fn source() -> Self {
        Self {
            id: "source".into(),
            family: ShapeFamily::Ellipse,
            classes: 4,
            style: Style::neutral(),
            area: [0.10, 0.40],
            image_size: [64, 64],
        }
    }

    pub fn target_polygon() -> Self {
        Self {
            id: "target-polygon".into(),
            family: ShapeFamily::Polygon,
            classes: 4,
            style: Style {
                gain: [0.6, 1.2, 0.8],
                bias: [0.2, -0.1, 0.1],
                texture_amplitude: 0.12,
                texture_frequency: 5.0,
                noise: 0.04,
            },
            area: [0.10, 0.40],
            image_size: [64, 64],
        }
    }

    pub fn target_ring() -> Self {
        Self {
            id: "target-ring".into(),
            family: ShapeFamily::Ring,
            classes: 4,
            style: Style {
                gain: [1.3, 0.7, 1.0],
                bias: [-0.1, 0.15, 0.0],
                texture_amplitude: 0.10,
                texture_frequency: 7.0,
                noise: 0.05,
            },
            area: [0.10, 0.40],
            image_size: [64, 64],
        }
    }

    /// Source plus two style-shifted targets with disjoint shape families.
    pub fn defaults() -> Vec<Self> {
        vec![Self::source(), Self::target_polygon(), Self::target_ring()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::config(format!("invalid domain id {:?}", self.id)));
        }
        if self.classes == 0 {
            return Err(Error::config("a domain needs at least one class"));
        }
        if self.style.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::config("style gains must be positive"));
        }
        let [lo, hi] = self.area;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config(format!("area range {lo}..{hi} must satisfy 0 < min < max < 1")));
        }
        if self.image_size.iter().any(|&s| s < 8) {
            return Err(Error::config("images must be at least 8×8"));
        }
        if !(self.style.texture_amplitude >= 0.0 && self.style.noise >= 0.0) {
            return Err(Error::config("texture amplitude and noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Binary `H×W` mask.
    pub mask: Tensor,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain: SyntheticDomain,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class, classes in ascending order.
    pub fn by_class(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.class).or_default().push(i);
        }
        groups.into_iter().collect()
    }
}

/// Class colours, independent of seed and style.
fn palette(family: ShapeFamily, class: usize) -> ([f32; 3], [f32; 3]) {
    let mut r = rng::stream(0, &[rng::tag("palette"), family.tag(), class as u64]);
    loop {
        let fg: [f32; 3] = std::array::from_fn(|_| r.random_range(0.15..0.85));
        let bg: [f32; 3] = std::array::from_fn(|_| r.random_range(0.15..0.85));
        let d = fg.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
        if d >= 0.35 {
            return (fg, bg);
        }
    }
}

struct Raster {
    h: usize,
    w: usize,
}

impl Raster {
    fn fill(&self, inside: impl Fn(f32, f32) -> bool) -> Vec<f32> {
        let mut m = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    m[y * self.w + x] = 1.0;
                }
            }
        }
        m
    }
}

fn ellipse(r: &mut ChaCha8Rng, g: &Raster, class: usize) -> Vec<f32> {
    let side = g.h.min(g.w) as f32;
    let aspect = 1.0 + 0.5 * (class % 4) as f32;
    let rad = r.random_range(0.15..0.36) * side;
    let (a, b) = (rad * aspect.sqrt(), rad / aspect.sqrt());
    let (cx, cy) = (r.random_range(0.3..0.7) * g.w as f32, r.random_range(0.3..0.7) * g.h as f32);
    let th = r.random_range(0.0..PI);
    let (c, s) = (th.cos(), th.sin());
    g.fill(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let u = (dx * c + dy * s) / a;
        let v = (-dx * s + dy * c) / b;
        u * u + v * v <= 1.0
    })
}

fn polygon(r: &mut ChaCha8Rng, g: &Raster, class: usize) -> Vec<f32> {
    let side = g.h.min(g.w) as f32;
    let n = 3 + class % 4;
    let rad = r.random_range(0.2..0.42) * side;
    let (cx, cy) = (r.random_range(0.3..0.7) * g.w as f32, r.random_range(0.3..0.7) * g.h as f32);
    let phase = r.random_range(0.0..2.0 * PI);
    let verts: Vec<(f32, f32)> = (0..n)
        .map(|k| {
            let t = phase + 2.0 * PI * (k as f32 + r.random_range(-0.2..0.2)) / n as f32;
            let rr = rad * r.random_range(0.75..1.0);
            (cx + rr * t.cos(), cy + rr * t.sin())
        })
        .collect();
    g.fill(|x, y| {
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = verts[i];
            let (xj, yj) = verts[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    })
}

fn ring(r: &mut ChaCha8Rng, g: &Raster, class: usize) -> Vec<f32> {
    let side = g.h.min(g.w) as f32;
    let ratio = 0.35 + 0.08 * (class % 4) as f32;
    let outer = r.random_range(0.24..0.45) * side;
    let inner = outer * ratio;
    let (cx, cy) = (r.random_range(0.35..0.65) * g.w as f32, r.random_range(0.35..0.65) * g.h as f32);
    g.fill(|x, y| {
        let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        d <= outer && d >= inner
    })
}

fn draw_mask(family: ShapeFamily, class: usize, size: [usize; 2], area: [f32; 2], r: &mut ChaCha8Rng) -> Vec<f32> {
    let g = Raster { h: size[0], w: size[1] };
    let n = (g.h * g.w) as f32;
    let mut last = Vec::new();
    for _ in 0..10_000 {
        let m = match family {
            ShapeFamily::Ellipse => ellipse(r, &g, class),
            ShapeFamily::Polygon => polygon(r, &g, class),
            ShapeFamily::Ring => ring(r, &g, class),
        };
        let frac = m.iter().sum::<f32>() / n;
        if frac >= area[0] && frac <= area[1] {
            return m;
        }
        last = m;
    }
    last
}

fn render(domain: &SyntheticDomain, class: usize, mask: &[f32], seed: u64, index: u64) -> Vec<f32> {
    let [h, w] = domain.image_size;
    let n = h * w;
    let (fg, bg) = palette(domain.family, class);
    let mut r = rng::stream(seed, &[rng::tag("appearance"), index]);
    let jitter: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.06..0.06));
    let shade_dir = r.random_range(0.0..2.0 * PI);
    let shade = r.random_range(0.0..0.12);

    let st = &domain.style;
    let mut t = rng::stream(seed, &[rng::tag("texture"), index, domain.family.tag()]);
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| (t.random_range(0.0..2.0 * PI), t.random_range(0.0..2.0 * PI), t.random_range(0.6..1.4)))
        .collect();
    let freq = st.texture_frequency * 2.0 * PI;
    let mut out = vec![0.0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            let tex: f32 =
                waves.iter().map(|&(dir, ph, k)| (freq * k * (u * dir.cos() + v * dir.sin()) + ph).sin()).sum::<f32>()
                    / 3.0;
            let s = shade * ((u - 0.5) * shade_dir.cos() + (v - 0.5) * shade_dir.sin());
            let p = y * w + x;
            for c in 0..3 {
                let base = if mask[p] > 0.5 { fg[c] } else { bg[c] } + jitter[c] + s;
                let z: f32 = StandardNormal.sample(&mut t);
                let val = st.gain[c] * base + st.bias[c] + st.texture_amplitude * tex + st.noise * z;
                out[c * n + p] = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    out
}

/// `n_images` samples with classes assigned round-robin.
pub fn gen_domain(domain: &SyntheticDomain, n_images: usize, seed: u64) -> Result<Dataset> {
    domain.validate()?;
    let [h, w] = domain.image_size;
    let samples = (0..n_images)
        .map(|i| {
            let class = i % domain.classes;
            let mut r = rng::stream(seed, &[rng::tag("shape"), domain.family.tag(), i as u64]);
            let mask = draw_mask(domain.family, class, domain.image_size, domain.area, &mut r);
            let image = render(domain, class, &mask, seed, i as u64);
            Ok(Sample {
                image: Image::new(Tensor::new(vec![3, h, w], image)?)?,
                mask: Tensor::new(vec![h, w], mask)?,
                class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { domain: domain.clone(), seed, samples })
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    image: String,
    mask: String,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    domain: SyntheticDomain,
    seed: u64,
    items: Vec<ManifestItem>,
}

/// One domain of a generation plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPlan {
    pub domain: SyntheticDomain,
    pub images: usize,
}

/// Domains to generate; the first is the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub domains: Vec<DomainPlan>,
}

impl Default for DataSpec {
    fn default() -> Self {
        let plan = |domain, images| DomainPlan { domain, images };
        Self {
            domains: vec![
                plan(SyntheticDomain::source(), 200),
                plan(SyntheticDomain::target_polygon(), 100),
                plan(SyntheticDomain::target_ring(), 100),
            ],
        }
    }
}

impl DataSpec {
    /// The default plan at the published 400×400 resolution.
    pub fn paper_scale() -> Self {
        let mut spec = Self::default();
        for p in &mut spec.domains {
            p.domain.image_size = [400, 400];
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.domains.first() else {
            return Err(Error::config("data spec lists no domains"));
        };
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.domains {
            p.domain.validate()?;
            if p.images == 0 {
                return Err(Error::config(format!("domain {} has no images", p.domain.id)));
            }
            if !ids.insert(p.domain.id.as_str()) {
                return Err(Error::config(format!("duplicate domain id {}", p.domain.id)));
            }
            if p.domain.id.starts_with('.') {
                return Err(Error::config(format!("domain id {:?} is not a plain directory name", p.domain.id)));
            }
        }
        if let Some(p) = self.domains[1..].iter().find(|p| p.domain.family == first.domain.family) {
            return Err(Error::config(format!("target {} shares the source class family", p.domain.id)));
        }
        Ok(())
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `manifest.json`, `images/NNNN.ppm` and `masks/NNNN.pgm` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut items = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let image = format!("images/{i:04}.ppm");
        let mask = format!("masks/{i:04}.pgm");
        netpbm::write_ppm(dir.join(&image), &s.image)?;
        netpbm::write_pgm(dir.join(&mask), &s.mask)?;
        items.push(ManifestItem { image, mask, class: s.class });
    }
    let m = Manifest { domain: ds.domain.clone(), seed: ds.seed, items };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
        _ => Error::Io(e),
    })?;
    let m: Manifest = serde_json::from_str(&text)?;
    m.domain.validate()?;
    let samples = m
        .items
        .iter()
        .map(|it| {
            let image = netpbm::read_ppm(dir.join(&it.image))?;
            let mask = netpbm::read_pgm(dir.join(&it.mask))?;
            if image.height() != mask.shape()[0] || image.width() != mask.shape()[1] {
                return Err(Error::shape(format!("{} does not match its mask", it.image)));
            }
            Ok(Sample { image, mask, class: it.class })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { domain: m.domain, seed: m.seed, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_spec_rules() {
        DataSpec::default().validate().unwrap();
        let mut s = DataSpec::default();
        s.domains[1].domain.family = ShapeFamily::Ellipse;
        assert!(s.validate().is_err());
        let mut s = DataSpec::default();
        s.domains[2].domain.id = "source".into();
        assert!(s.validate().is_err());
        assert!(DataSpec { domains: vec![] }.validate().is_err());
    }

    #[test]
    fn deterministic() {
        let d = SyntheticDomain::source();
        assert_eq!(gen_domain(&d, 6, 3).unwrap(), gen_domain(&d, 6, 3).unwrap());
        assert_ne!(gen_domain(&d, 6, 3).unwrap().samples, gen_domain(&d, 6, 4).unwrap().samples);
    }

    #[test]
    fn areas_within_bounds() {
        for d in SyntheticDomain::defaults() {
            let ds = gen_domain(&d, 24, 11).unwrap();
            for s in &ds.samples {
                let f = s.mask.mean() as f32;
                assert!(f >= d.area[0] && f <= d.area[1], "{} area {f}", d.id);
                assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn style_changes_images_not_masks() {
        let a = SyntheticDomain::source();
        let b = SyntheticDomain { id: "restyled".into(), style: SyntheticDomain::target_ring().style, ..a.clone() };
        let (da, db) = (gen_domain(&a, 4, 5).unwrap(), gen_domain(&b, 4, 5).unwrap());
        for (x, y) in da.samples.iter().zip(&db.samples) {
            assert_eq!(x.mask, y.mask);
            let diff = x.image.tensor().sub(y.image.tensor()).unwrap().map(f32::abs).mean();
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn families_are_disjoint() {
        let fams: Vec<_> = SyntheticDomain::defaults().iter().map(|d| d.family).collect();
        assert_eq!(fams.len(), 3);
        assert!(fams[0] != fams[1] && fams[1] != fams[2] && fams[0] != fams[2]);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut d = SyntheticDomain::source();
        d.style.gain[1] = 0.0;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
        let mut d = SyntheticDomain::source();
        d.area = [0.5, 0.2];
        assert!(d.validate().is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_domain(&SyntheticDomain::target_polygon(), 5, 2).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        assert!(matches!(load_dataset(dir.path().join("nope")), Err(Error::NotFound(_))));
    }
}
