//! Procedural shapes corpus: one colored shape on a black background, with a
//! caption that names its size, color, kind and grid cell.
//!
//! Rendering uses integer pixel tests only, so images are bit-stable.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::data::sample::{Content, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether offset `(dy, dx)` from the center lies inside a shape of
    /// radius `r`. Triangles point up.
    fn covers(self, dy: i64, dx: i64, r: i64) -> bool {
        match self {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLine {
    pub name: String,
    pub center: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeColor {
    pub name: String,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSize {
    pub name: String,
    pub radius: usize,
}

/// Everything that determines the corpus apart from `(n, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapesSpec {
    pub image_size: usize,
    pub rows: Vec<GridLine>,
    pub cols: Vec<GridLine>,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ShapeColor>,
    pub sizes: Vec<ShapeSize>,
}

/// One point of the spec's product space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShapeTuple {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub row: usize,
    pub col: usize,
}

fn line(name: &str, center: usize) -> GridLine {
    GridLine {
        name: name.into(),
        center,
    }
}

impl Default for SyntheticShapesSpec {
    fn default() -> Self {
        let color = |name: &str, rgb| ShapeColor { name: name.into(), rgb };
        SyntheticShapesSpec {
            image_size: 32,
            rows: vec![line("top", 6), line("middle", 16), line("bottom", 26)],
            cols: vec![line("left", 6), line("center", 16), line("right", 26)],
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            colors: vec![
                color("red", [1.0, 0.0, 0.0]),
                color("green", [0.0, 1.0, 0.0]),
                color("blue", [0.0, 0.0, 1.0]),
                color("yellow", [1.0, 1.0, 0.0]),
            ],
            sizes: vec![
                ShapeSize {
                    name: "small".into(),
                    radius: 3,
                },
                ShapeSize {
                    name: "large".into(),
                    radius: 5,
                },
            ],
        }
    }
}

impl SyntheticShapesSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.cols.is_empty() || self.shapes.is_empty() || self.colors.is_empty() || self.sizes.is_empty() {
            return Err(Error::Config("every synthetic attribute list must be non-empty".into()));
        }
        let max_r = self.sizes.iter().map(|s| s.radius).max().unwrap_or(0);
        for g in self.rows.iter().chain(&self.cols) {
            if g.center < max_r || g.center + max_r >= self.image_size {
                return Err(Error::Config(format!(
                    "grid line {} at {} does not fit radius {max_r} in a {}-pixel image",
                    g.name, g.center, self.image_size
                )));
            }
        }
        if self.colors.iter().any(|c| c.rgb.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Config("colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Size of the attribute product space.
    pub fn combinations(&self) -> usize {
        self.shapes.len() * self.colors.len() * self.sizes.len() * self.rows.len() * self.cols.len()
    }

    /// Mixed-radix decoding of `k < combinations()`.
    pub fn tuple(&self, mut k: usize) -> ShapeTuple {
        let mut digit = |base: usize| {
            let d = k % base;
            k /= base;
            d
        };
        ShapeTuple {
            col: digit(self.cols.len()),
            row: digit(self.rows.len()),
            shape: digit(self.shapes.len()),
            color: digit(self.colors.len()),
            size: digit(self.sizes.len()),
        }
    }

    pub fn caption(&self, t: ShapeTuple) -> String {
        format!(
            "a {} {} {} at the {} {}",
            self.sizes[t.size].name,
            self.colors[t.color].name,
            self.shapes[t.shape].name(),
            self.rows[t.row].name,
            self.cols[t.col].name
        )
    }

    pub fn render(&self, t: ShapeTuple) -> Image {
        let mut img = Image::filled(self.image_size, [0.0; 3]);
        let (cy, cx) = (self.rows[t.row].center as i64, self.cols[t.col].center as i64);
        let r = self.sizes[t.size].radius as i64;
        let kind = self.shapes[t.shape];
        for y in (cy - r)..=(cy + r) {
            for x in (cx - r)..=(cx + r) {
                if kind.covers(y - cy, x - cx, r) {
                    img.set_pixel(y as usize, x as usize, self.colors[t.color].rgb);
                }
            }
        }
        img
    }

    /// Every word any caption can contain.
    pub fn caption_words(&self) -> Vec<String> {
        let mut words: Vec<String> = ["a", "at", "the"].iter().map(|s| s.to_string()).collect();
        words.extend(self.sizes.iter().map(|s| s.name.clone()));
        words.extend(self.colors.iter().map(|c| c.name.clone()));
        words.extend(self.shapes.iter().map(|s| s.name().to_string()));
        words.extend(self.rows.iter().chain(&self.cols).map(|g| g.name.clone()));
        words.sort();
        words.dedup();
        words
    }
}

/// `n` samples as a pure function of `(spec, n, seed)`. Tuples are distinct
/// whenever `n` does not exceed the product space.
pub fn render_synthetic(spec: &SyntheticShapesSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("synthetic corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.combinations();
    let picks: Vec<usize> = if n <= total {
        index::sample(&mut rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    };
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let t = spec.tuple(k);
            Sample {
                id: format!("synth-{i:05}"),
                image: Arc::new(spec.render(t)),
                content: Content::Caption(spec.caption(t)),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};
    use std::collections::HashSet;

    fn caption(s: &Sample) -> &str {
        match &s.content {
            Content::Caption(c) => c,
            Content::Conversation(_) => unreachable!(),
        }
    }

    #[test]
    fn pure_function_of_seed() {
        let spec = SyntheticShapesSpec::default();
        let a = render_synthetic(&spec, 20, 7).unwrap();
        assert_eq!(a, render_synthetic(&spec, 20, 7).unwrap());
        assert_ne!(a, render_synthetic(&spec, 20, 8).unwrap());
    }

    #[test]
    fn caption_vocabulary_is_small() {
        let spec = SyntheticShapesSpec::default();
        assert_eq!(spec.caption_words().len(), 18);
        let all = render_synthetic(&spec, spec.combinations(), 0).unwrap();
        let words: HashSet<String> = all.iter().flat_map(|s| crate::data::vocab::tokenize(caption(s))).collect();
        assert!(words.len() <= 40);
        assert_eq!(words.len(), 18);
    }

    #[test]
    fn distinct_tuples_give_distinct_captions_and_images() {
        let spec = SyntheticShapesSpec::default();
        let all = render_synthetic(&spec, spec.combinations(), 1).unwrap();
        let captions: HashSet<&str> = all.iter().map(caption).collect();
        assert_eq!(captions.len(), 216);
        let images: HashSet<Vec<u8>> = all.iter().map(|s| s.image.to_rgb8()).collect();
        assert_eq!(images.len(), 216);
    }

    #[test]
    fn shapes_have_expected_extent() {
        let spec = SyntheticShapesSpec::default();
        let t = ShapeTuple {
            shape: 1,
            color: 0,
            size: 0,
            row: 0,
            col: 0,
        };
        let img = spec.render(t);
        // 7x7 red square centred at (6, 6)
        let red: f64 = (0..32).flat_map(|y| (0..32).map(move |x| (y, x))).map(|(y, x)| img.pixel(0, y, x)).sum();
        assert_eq!(red, 49.0);
        assert_eq!(spec.caption(t), "a small red square at the top left");
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let spec = SyntheticShapesSpec::default();
        assert_eq!(SyntheticShapesSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let mut bad = spec.clone();
        bad.rows[0].center = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn golden_first_four_seed_42() {
        let spec = SyntheticShapesSpec::default();
        let samples = render_synthetic(&spec, 4, 42).unwrap();
        let mut h = Sha256::new();
        for s in &samples {
            h.update(s.image.to_rgb8());
            h.update(caption(s).as_bytes());
        }
        let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let captions: Vec<&str> = samples.iter().map(caption).collect();
        assert_eq!(captions, GOLDEN_CAPTIONS, "{captions:?}");
        assert_eq!(digest, GOLDEN_DIGEST);
    }

    const GOLDEN_CAPTIONS: [&str; 4] = [
        "a small green triangle at the top right",
        "a large green square at the top center",
        "a small green circle at the middle center",
        "a large yellow square at the bottom center",
    ];
    const GOLDEN_DIGEST: &str = "febc986c0b6e54ebcfc5e8588af3319f59621354b3b80134ab4df7b5724a9f9a";
}
