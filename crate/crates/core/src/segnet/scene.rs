//! Procedural shape scenes with exact per-pixel labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, DEFAULT_IGNORE_INDEX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Including background (class 0).
    pub n_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub noise_sigma: f64,
    pub color_jitter: f64,
    /// Class drawn only in a fixed fraction of images. Written as `0` in
    /// config files when disabled.
    #[serde(with = "zero_is_none")]
    pub rare_class: Option<u32>,
    pub rare_frequency: f64,
    /// Two classes rendered with nearly identical colors, separable only by
    /// shape. Written as `[]` when disabled.
    #[serde(with = "empty_is_none")]
    pub overlap_classes: Option<[u32; 2]>,
}

// Config files cannot express `None` for a field whose default is `Some`, so
// disabled values get an explicit spelling.
mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u32>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(v.unwrap_or(0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u32>, D::Error> {
        let v = u32::deserialize(d)?;
        Ok((v != 0).then_some(v))
    }
}

mod empty_is_none {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<[u32; 2]>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(pair) => pair.serialize(s),
            None => <[u32; 0]>::default().serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[u32; 2]>, D::Error> {
        let v = Vec::<u32>::deserialize(d)?;
        match v[..] {
            [] => Ok(None),
            [a, b] => Ok(Some([a, b])),
            _ => Err(D::Error::custom("overlap_classes takes two class ids or none")),
        }
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_classes: 5,
            shapes_min: 2,
            shapes_max: 4,
            size_min: 10,
            size_max: 24,
            noise_sigma: 0.05,
            color_jitter: 0.06,
            rare_class: Some(4),
            rare_frequency: 0.1,
            overlap_classes: Some([1, 2]),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "canvas {}x{} below the 32x32 minimum",
                self.height, self.width
            )));
        }
        if self.shapes_min > self.shapes_max || self.size_min == 0 || self.size_min > self.size_max {
            return Err(Error::Config("shape count or size range is empty".into()));
        }
        if self.size_max > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "shapes up to {} px do not fit a {}x{} canvas",
                self.size_max, self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.color_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        if let Some(r) = self.rare_class {
            if r == 0 || r as usize >= self.n_classes {
                return Err(Error::Config(format!("rare class {r} is not a foreground class")));
            }
            if !(0.0..=1.0).contains(&self.rare_frequency) {
                return Err(Error::Config("rare_frequency must lie in [0, 1]".into()));
            }
        }
        if let Some([a, b]) = self.overlap_classes {
            let n = self.n_classes as u32;
            if a == 0 || b == 0 || a >= n || b >= n || a == b {
                return Err(Error::Config(format!("overlap classes ({a}, {b}) invalid")));
            }
        }
        Ok(())
    }

    fn common_classes(&self) -> Vec<u32> {
        (1..self.n_classes as u32)
            .filter(|&c| Some(c) != self.rare_class)
            .collect()
    }

    fn color(&self, class: u32) -> [f64; 3] {
        const PALETTE: [[f64; 3]; 8] = [
            [0.4, 0.4, 0.4],
            [0.85, 0.25, 0.2],
            [0.2, 0.35, 0.85],
            [0.25, 0.8, 0.3],
            [0.85, 0.8, 0.2],
            [0.7, 0.3, 0.8],
            [0.2, 0.8, 0.8],
            [0.95, 0.55, 0.1],
        ];
        if let Some([a, b]) = self.overlap_classes {
            if class == b {
                let base = self.color(a);
                return [base[0] - 0.05, base[1] + 0.05, base[2]];
            }
        }
        match PALETTE.get(class as usize) {
            Some(c) => *c,
            None => {
                let h = (class as f64 * 0.618_033_988_75).fract() * std::f64::consts::TAU;
                [
                    0.5 + 0.35 * h.cos(),
                    0.5 + 0.35 * (h + 2.1).cos(),
                    0.5 + 0.35 * (h + 4.2).cos(),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Rect,
    Disk,
    Triangle,
    Diamond,
}

fn kind_for(class: u32) -> ShapeKind {
    match (class.max(1) - 1) % 4 {
        0 => ShapeKind::Rect,
        1 => ShapeKind::Disk,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Diamond,
    }
}

/// Images (`N x 3 x H x W`, values in `[0, 1]`) and their label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub images: Tensor,
    pub labels: LabelMap,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.labels.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the given image indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LabelMap)> {
        let [_, h, w] = self.labels.shape();
        let plane = 3 * h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut maps = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("image index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            maps.push(self.labels.slice_batch(i, 1)?);
        }
        let refs: Vec<&LabelMap> = maps.iter().collect();
        Ok((
            Tensor::new(vec![indices.len(), 3, h, w], data)?,
            LabelMap::stack(&refs)?,
        ))
    }

    /// Number of images containing `class`.
    pub fn images_with_class(&self, class: u32) -> usize {
        let [n, h, w] = self.labels.shape();
        (0..n)
            .filter(|&i| self.labels.data()[i * h * w..(i + 1) * h * w].contains(&class))
            .count()
    }
}

/// Renders `n_images` scenes. When a rare class is configured it appears in
/// exactly `round(rare_frequency * n_images)` of them, drawn on top.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, n_images: usize, rng: &mut R) -> Result<SyntheticScene> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be positive".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let common = spec.common_classes();
    let mut rare_images = vec![false; n_images];
    if spec.rare_class.is_some() {
        let count = (spec.rare_frequency * n_images as f64).round() as usize;
        let mut order: Vec<usize> = (0..n_images).collect();
        order.shuffle(rng);
        for &i in order.iter().take(count) {
            rare_images[i] = true;
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;

    let mut images = vec![0.0; n_images * 3 * h * w];
    let mut labels = vec![0u32; n_images * h * w];
    for (i, &has_rare) in rare_images.iter().enumerate() {
        let img = &mut images[i * 3 * h * w..(i + 1) * 3 * h * w];
        let lab = &mut labels[i * h * w..(i + 1) * h * w];
        let bg = spec.color(0);
        let shift: f64 = rng.random_range(-0.1..=0.1);
        for c in 0..3 {
            img[c * h * w..(c + 1) * h * w].fill(bg[c] + shift);
        }
        let n_shapes = rng.random_range(spec.shapes_min..=spec.shapes_max);
        let mut classes: Vec<u32> = if common.is_empty() {
            Vec::new()
        } else {
            (0..n_shapes)
                .map(|_| common[rng.random_range(0..common.len())])
                .collect()
        };
        if has_rare {
            classes.push(spec.rare_class.expect("rare images imply a rare class"));
        }
        for class in classes {
            draw_shape(spec, class, img, lab, rng);
        }
        if spec.noise_sigma > 0.0 {
            for v in img.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticScene {
        images: Tensor::new(vec![n_images, 3, h, w], images)?,
        labels: LabelMap::new(n_images, h, w, labels, DEFAULT_IGNORE_INDEX)?,
    })
}

fn draw_shape<R: Rng + ?Sized>(spec: &SceneSpec, class: u32, img: &mut [f64], lab: &mut [u32], rng: &mut R) {
    let (h, w) = (spec.height, spec.width);
    let size = rng.random_range(spec.size_min..=spec.size_max) as f64;
    let half = size / 2.0;
    let cx = rng.random_range(half..=w as f64 - half);
    let cy = rng.random_range(half..=h as f64 - half);
    let aspect = rng.random_range(0.6..=1.0);
    let mut color = spec.color(class);
    for c in color.iter_mut() {
        *c += rng.random_range(-spec.color_jitter..=spec.color_jitter);
    }
    let kind = kind_for(class);
    let y0 = (cy - half).floor().max(0.0) as usize;
    let y1 = ((cy + half).ceil() as usize).min(h);
    let x0 = (cx - half).floor().max(0.0) as usize;
    let x1 = ((cx + half).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match kind {
                ShapeKind::Rect => px.abs() <= half && py.abs() <= half * aspect,
                ShapeKind::Disk => px * px + py * py <= half * half,
                ShapeKind::Triangle => py.abs() <= half && px.abs() <= (py + half) / 2.0,
                ShapeKind::Diamond => px.abs() + py.abs() <= half,
            };
            if inside {
                lab[y * w + x] = class;
                for c in 0..3 {
                    img[c * h * w + y * w + x] = color[c];
                }
            }
        }
    }
}
