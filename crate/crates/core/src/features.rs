//! Multi-level feature pyramids from a fixed, seeded extractor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conv::{avg_pool, conv3x3_forward};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Tensor};

/// Anchor group a pyramid level belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Low,
    Mid,
    High,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Low, Group::Mid, Group::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Low => "low",
            Group::Mid => "mid",
            Group::High => "high",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64], strides: vec![4, 8, 16] }
    }
}

impl PyramidSpec {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Identity for three levels; thirds otherwise.
    pub fn group(&self, level: usize) -> Group {
        Group::ALL[(level * 3 / self.levels()).min(2)]
    }

    /// Levels assigned to `group`, in order.
    pub fn levels_in(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        (0..self.levels()).filter(move |&l| self.group(l) == group)
    }

    /// Channel count shared by every level of `group`, if the group is used.
    pub fn group_channels(&self, group: Group) -> Option<usize> {
        self.levels_in(group).next().map(|l| self.channels[l])
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || l != self.strides.len() {
            return Err(Error::config(format!(
                "{} channel entries vs {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.channels.iter().any(|&c| c < 2) {
            return Err(Error::config("every level needs at least 2 channels"));
        }
        if self.strides[0] == 0 || self.strides.windows(2).any(|p| p[1] <= p[0] || p[1] % p[0] != 0) {
            return Err(Error::config("strides must increase, each dividing the next"));
        }
        for g in Group::ALL {
            let mut chans = self.levels_in(g).map(|l| self.channels[l]);
            if let Some(first) = chans.next() {
                if chans.any(|c| c != first) {
                    return Err(Error::config(format!("levels of group {} must share a channel count", g.name())));
                }
            }
        }
        Ok(())
    }

    /// Per-level `(H_l, W_l)` for an image of `h×w`.
    pub fn spatial(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let largest = *self.strides.last().expect("validated spec");
        if !h.is_multiple_of(largest) || !w.is_multiple_of(largest) || h == 0 || w == 0 {
            return Err(Error::DimensionMismatch(format!("image {h}×{w} not divisible by stride {largest}")));
        }
        Ok(self.strides.iter().map(|s| (h / s, w / s)).collect())
    }
}

/// Image with 1 or 3 channels, values in `[0, 1]`, stored C×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, _, _) = data.dims3()?;
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("image needs 1 or 3 channels, got {c}")));
        }
        Ok(Self { data: data.map(|v| v.clamp(0.0, 1.0)) })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    fn rgb_f64(&self) -> Vec<f64> {
        let v = self.data.to_f64();
        if self.channels() == 3 {
            v
        } else {
            [v.as_slice(), v.as_slice(), v.as_slice()].concat()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        for t in &levels {
            t.dims3()?;
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn scale(&self, s: f32) -> Self {
        Self { levels: self.levels.iter().map(|t| t.scale(s)).collect() }
    }

    pub fn check_spec(&self, spec: &PyramidSpec, image_hw: (usize, usize)) -> Result<()> {
        let dims = spec.spatial(image_hw.0, image_hw.1)?;
        if self.levels.len() != spec.levels() {
            return Err(Error::shape(format!("pyramid has {} levels, spec {}", self.levels.len(), spec.levels())));
        }
        for (l, (t, &(h, w))) in self.levels.iter().zip(&dims).enumerate() {
            let want = [spec.channels[l], h, w];
            if t.shape() != want {
                return Err(Error::shape(format!("level {} is {:?}, want {want:?}", l + 1, t.shape())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorMode {
    /// Seeded 3×3 filter bank, ReLU between levels, average-pool downsampling.
    #[default]
    Filterbank,
    /// Seeded channel projection of the resized image plus a fixed noise field.
    Fixture,
}

const FIXTURE_NOISE: f64 = 0.05;

/// Frozen feature extractor shared by support and query images.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    spec: PyramidSpec,
    mode: ExtractorMode,
    seed: u64,
    weights: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(spec: PyramidSpec, mode: ExtractorMode, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.levels());
        for l in 0..spec.levels() {
            let mut r = rng::stream(seed, &[rng::tag("extractor"), mode as u64, l as u64]);
            let (cout, fan_in) = match mode {
                ExtractorMode::Filterbank => {
                    let cin = if l == 0 { 3 } else { spec.channels[l - 1] };
                    (spec.channels[l], cin * 9)
                }
                ExtractorMode::Fixture => (spec.channels[l], 3),
            };
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = rng::gaussian_vec(&mut r, cout * fan_in, std);
            weights.push(w.into_iter().map(f64::from).collect());
        }
        Ok(Self { spec, mode, seed, weights })
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.spec
    }

    pub fn mode(&self) -> ExtractorMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extract(&self, img: &Image) -> Result<FeaturePyramid> {
        let (h, w) = (img.height(), img.width());
        let dims = self.spec.spatial(h, w)?;
        let levels = match self.mode {
            ExtractorMode::Filterbank => self.filterbank(img, &dims),
            ExtractorMode::Fixture => self.fixture(img, &dims),
        };
        FeaturePyramid::new(levels)
    }

    fn filterbank(&self, img: &Image, dims: &[(usize, usize)]) -> Vec<Tensor> {
        let mut levels = Vec::with_capacity(dims.len());
        let (mut cur, mut cin, mut ch, mut cw) = (img.rgb_f64(), 3, img.height(), img.width());
        let mut prev_stride = 1;
        for (l, &(oh, ow)) in dims.iter().enumerate() {
            let cout = self.spec.channels[l];
            let conv = conv3x3_forward(&cur, cin, ch, cw, &self.weights[l], &[], cout);
            let k = self.spec.strides[l] / prev_stride;
            let pooled = avg_pool(&conv, cout, ch, cw, k);
            debug_assert_eq!(pooled.len(), cout * oh * ow);
            levels.push(Tensor::from_f64(vec![cout, oh, ow], &pooled));
            cur = pooled.into_iter().map(|v| v.max(0.0)).collect();
            (cin, ch, cw, prev_stride) = (cout, oh, ow, self.spec.strides[l]);
        }
        levels
    }

    fn fixture(&self, img: &Image, dims: &[(usize, usize)]) -> Vec<Tensor> {
        let rgb = img.rgb_f64();
        dims.iter()
            .enumerate()
            .map(|(l, &(oh, ow))| {
                let cout = self.spec.channels[l];
                let plan = tensor::ResizePlan::new((img.height(), img.width()), (oh, ow));
                let small = plan.apply(&rgb, 3);
                let mut r = rng::stream(self.seed, &[rng::tag("fixture-noise"), l as u64]);
                let noise = rng::gaussian_vec(&mut r, cout * oh * ow, FIXTURE_NOISE);
                let n = oh * ow;
                let proj = &self.weights[l];
                let mut out = vec![0.0f64; cout * n];
                for c in 0..cout {
                    for p in 0..n {
                        let mut s = noise[c * n + p] as f64;
                        for k in 0..3 {
                            s += proj[c * 3 + k] * small[k * n + p];
                        }
                        out[c * n + p] = s;
                    }
                }
                Tensor::from_f64(vec![cout, oh, ow], &out)
            })
            .collect()
    }
}

/// One-shot extraction with a freshly seeded extractor.
pub fn extract_pyramid(img: &Image, spec: &PyramidSpec, mode: ExtractorMode, seed: u64) -> Result<FeaturePyramid> {
    FeatureExtractor::new(spec.clone(), mode, seed)?.extract(img)
}

fn level_path(stem: &Path, level: usize) -> PathBuf {
    let mut name = stem.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!(".l{}.dmt", level + 1));
    stem.with_file_name(name)
}

/// Writes `<stem>.l<idx>.dmt` for every level (1-based index).
pub fn save_fixture_pyramid(stem: impl AsRef<Path>, pyramid: &FeaturePyramid) -> Result<()> {
    for (l, t) in pyramid.levels.iter().enumerate() {
        tensor::write_tensor(level_path(stem.as_ref(), l), t)?;
    }
    Ok(())
}

pub fn load_fixture_pyramid(
    stem: impl AsRef<Path>,
    spec: &PyramidSpec,
    image_hw: (usize, usize),
) -> Result<FeaturePyramid> {
    let levels =
        (0..spec.levels()).map(|l| tensor::read_tensor(level_path(stem.as_ref(), l))).collect::<Result<Vec<_>>>()?;
    let p = FeaturePyramid::new(levels)?;
    p.check_spec(spec, image_hw)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| ((i * 37 % 101) as f32) / 100.0).collect();
        Image::new(Tensor::new(vec![3, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let p = extract_pyramid(&test_image(64, 64), &PyramidSpec::default(), ExtractorMode::Filterbank, 0).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4]]);
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let img = Image::new(Tensor::zeros(vec![3, 32, 32])).unwrap();
        let p = extract_pyramid(&img, &PyramidSpec::default(), ExtractorMode::Filterbank, 3).unwrap();
        assert!(p.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn fixture_mode_is_deterministic() {
        let img = test_image(32, 48);
        let spec = PyramidSpec::default();
        let a = extract_pyramid(&img, &spec, ExtractorMode::Fixture, 7).unwrap();
        let b = extract_pyramid(&img, &spec, ExtractorMode::Fixture, 7).unwrap();
        assert_eq!(a, b);
        let c = extract_pyramid(&img, &spec, ExtractorMode::Fixture, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn indivisible_image_rejected() {
        let img = test_image(40, 64);
        let r = extract_pyramid(&img, &PyramidSpec::default(), ExtractorMode::Filterbank, 0);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn grayscale_broadcasts() {
        let g = Image::new(Tensor::full(vec![1, 16, 16], 0.5)).unwrap();
        let c = Image::new(Tensor::full(vec![3, 16, 16], 0.5)).unwrap();
        let spec = PyramidSpec::default();
        let a = extract_pyramid(&g, &spec, ExtractorMode::Filterbank, 1).unwrap();
        let b = extract_pyramid(&c, &spec, ExtractorMode::Filterbank, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn groups_by_level() {
        let spec = PyramidSpec::default();
        assert_eq!((0..3).map(|l| spec.group(l)).collect::<Vec<_>>(), Group::ALL.to_vec());
        let six = PyramidSpec { channels: vec![8, 8, 16, 16, 32, 32], strides: vec![2, 4, 8, 16, 32, 64] };
        six.validate().unwrap();
        let groups: Vec<_> = (0..6).map(|l| six.group(l)).collect();
        assert_eq!(groups, vec![Group::Low, Group::Low, Group::Mid, Group::Mid, Group::High, Group::High]);
        let bad = PyramidSpec { channels: vec![8, 16], strides: vec![4] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixture_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("img0");
        let spec = PyramidSpec::default();
        let p = extract_pyramid(&test_image(64, 64), &spec, ExtractorMode::Fixture, 2).unwrap();
        save_fixture_pyramid(&stem, &p).unwrap();
        assert!(dir.path().join("img0.l1.dmt").exists());
        assert_eq!(load_fixture_pyramid(&stem, &spec, (64, 64)).unwrap(), p);

        std::fs::remove_file(dir.path().join("img0.l3.dmt")).unwrap();
        assert!(matches!(load_fixture_pyramid(&stem, &spec, (64, 64)), Err(Error::NotFound(_))));

        save_fixture_pyramid(&stem, &p).unwrap();
        tensor::write_tensor(dir.path().join("img0.l2.dmt"), &Tensor::zeros(vec![31, 8, 8])).unwrap();
        assert!(matches!(load_fixture_pyramid(&stem, &spec, (64, 64)), Err(Error::ShapeMismatch(_))));
    }
}
