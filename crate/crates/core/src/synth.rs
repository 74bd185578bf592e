//! Deterministic synthetic shape datasets.
//!
//! In-distribution images show a small figure outdoors: a head, two feet and a
//! class-specific body in front of sky and grass. The OoD set is a different
//! "dataset": plain geometric objects photographed indoors against a wall and
//! a wooden floor. Position, scale and colours are jittered and every image
//! carries per-pixel grain before 8-bit quantisation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::image_seed;
use crate::ppm::quantize;
use crate::tensor::Image;

pub const IMAGE_SIZE: usize = 32;

pub const IOD_CLASSES: [&str; 6] = ["block", "cone", "ball", "pillar", "bowl", "hourglass"];
pub const OOD_CLASSES: [&str; 4] = ["plus", "ring", "diamond", "bars"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    ImageDir,
    FeatureArchive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub split: Split,
    pub source: DataSource,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "manifest {} has duplicate ids",
                self.name
            )));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.label >= self.class_names.len())
        {
            return Err(Error::Config(format!(
                "entry {} has invalid label {}",
                e.id, e.label
            )));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Images with labels and their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub manifest: DatasetManifest,
}

type Rgb = [f64; 3];

const GRAIN: f64 = 0.06;

struct Canvas {
    data: Vec<f64>,
}

impl Canvas {
    /// Sky above `horizon`, grass below.
    fn outdoor(rng: &mut ChaCha8Rng, horizon: f64) -> Self {
        let sky = jitter(rng, [0.55, 0.75, 0.95]);
        let grass = jitter(rng, [0.3, 0.55, 0.2]);
        let mut cv = Self {
            data: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3],
        };
        cv.paint(sky, |_, _| true);
        cv.paint(grass, |_, y| y >= horizon);
        cv
    }

    /// Plain wall above `floor`, wooden floor below.
    fn indoor(rng: &mut ChaCha8Rng, floor: f64) -> Self {
        let wall = jitter(rng, [0.85, 0.8, 0.7]);
        let boards = jitter(rng, [0.55, 0.4, 0.25]);
        let mut cv = Self {
            data: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3],
        };
        cv.paint(wall, |_, _| true);
        cv.paint(boards, |_, y| y >= floor);
        cv
    }

    fn paint(&mut self, color: Rgb, inside: impl Fn(f64, f64) -> bool) {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                // pixel centres
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.data[(y * IMAGE_SIZE + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }

    fn circle(&mut self, cx: f64, cy: f64, r: f64, color: Rgb) {
        self.paint(color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
    }

    fn ring(&mut self, cx: f64, cy: f64, r_out: f64, r_in: f64, color: Rgb) {
        self.paint(color, |x, y| {
            let d = (x - cx).powi(2) + (y - cy).powi(2);
            d <= r_out * r_out && d >= r_in * r_in
        });
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb) {
        self.paint(color, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1);
    }

    fn triangle(&mut self, a: (f64, f64), b: (f64, f64), c: (f64, f64), color: Rgb) {
        let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| {
            (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
        };
        self.paint(color, |x, y| {
            let (e0, e1, e2) = (edge(a, b, x, y), edge(b, c, x, y), edge(c, a, x, y));
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        });
    }

    fn diamond(&mut self, cx: f64, cy: f64, r: f64, color: Rgb) {
        self.paint(color, |x, y| (x - cx).abs() + (y - cy).abs() <= r);
    }

    /// Per-pixel sensor grain.
    fn grain(&mut self, rng: &mut ChaCha8Rng, amplitude: f64) {
        for v in &mut self.data {
            *v += rng.random_range(-amplitude..=amplitude);
        }
    }

    fn into_image(self) -> Image {
        let data = self
            .data
            .into_iter()
            .map(|v| quantize(v) as f64 / 255.0)
            .collect();
        Image::new(IMAGE_SIZE, IMAGE_SIZE, 3, data).expect("quantized values are in range")
    }
}

fn jitter(rng: &mut ChaCha8Rng, color: Rgb) -> Rgb {
    color.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
}

/// Object centre and scale, jittered.
fn placement(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let c = IMAGE_SIZE as f64 / 2.0;
    (
        c + rng.random_range(-4.0..4.0),
        c + rng.random_range(-4.0..4.0),
        rng.random_range(0.85..1.15),
    )
}

/// OoD object colours.
const PALETTE: [Rgb; 6] = [
    [0.2, 0.4, 0.9],
    [0.9, 0.2, 0.15],
    [0.2, 0.75, 0.3],
    [0.95, 0.78, 0.6],
    [0.9, 0.85, 0.2],
    [0.7, 0.3, 0.85],
];

fn palette(rng: &mut ChaCha8Rng) -> Rgb {
    let c = PALETTE[rng.random_range(0..PALETTE.len())];
    jitter(rng, c)
}

const BODY_COLORS: [Rgb; 6] = [
    [0.2, 0.4, 0.9],
    [0.9, 0.2, 0.15],
    [0.2, 0.75, 0.3],
    [0.55, 0.3, 0.15],
    [0.3, 0.3, 0.6],
    [0.6, 0.6, 0.2],
];

fn draw_iod(class: usize, rng: &mut ChaCha8Rng) -> Image {
    let (cx, cy, s) = placement(rng);
    let mut cv = Canvas::outdoor(rng, cy + 8.0 * s);
    // body
    let body = jitter(rng, BODY_COLORS[class]);
    match class {
        0 => cv.rect(cx - 5.0 * s, cy - 3.0 * s, cx + 5.0 * s, cy + 6.0 * s, body),
        1 => cv.triangle(
            (cx, cy - 4.0 * s),
            (cx - 6.0 * s, cy + 6.0 * s),
            (cx + 6.0 * s, cy + 6.0 * s),
            body,
        ),
        2 => cv.circle(cx, cy + 1.5 * s, 5.0 * s, body),
        3 => cv.rect(cx - 2.5 * s, cy - 3.0 * s, cx + 2.5 * s, cy + 6.0 * s, body),
        4 => {
            let r = 6.0 * s;
            let top = cy - 1.0 * s;
            cv.paint(body, |x, y| {
                y >= top && (x - cx).powi(2) + (y - top).powi(2) <= r * r
            });
        }
        _ => {
            cv.triangle(
                (cx - 5.0 * s, cy - 3.0 * s),
                (cx + 5.0 * s, cy - 3.0 * s),
                (cx, cy + 1.5 * s),
                body,
            );
            cv.triangle(
                (cx - 5.0 * s, cy + 6.0 * s),
                (cx + 5.0 * s, cy + 6.0 * s),
                (cx, cy + 1.5 * s),
                body,
            );
        }
    }
    // parts shared by every class: head with an eye, two feet
    cv.circle(cx, cy - 7.0 * s, 3.5 * s, jitter(rng, [0.95, 0.78, 0.6]));
    cv.rect(
        cx + 0.5 * s,
        cy - 8.0 * s,
        cx + 2.0 * s,
        cy - 6.5 * s,
        jitter(rng, [0.1, 0.1, 0.1]),
    );
    let feet = jitter(rng, [0.6, 0.35, 0.1]);
    cv.rect(cx - 3.5 * s, cy + 6.0 * s, cx - 1.0 * s, cy + 8.5 * s, feet);
    cv.rect(cx + 1.0 * s, cy + 6.0 * s, cx + 3.5 * s, cy + 8.5 * s, feet);
    cv.grain(rng, GRAIN);
    cv.into_image()
}

fn draw_ood(family: usize, rng: &mut ChaCha8Rng) -> Image {
    let (cx, cy, s) = placement(rng);
    let mut cv = Canvas::indoor(rng, cy + 8.0 * s);
    let color = palette(rng);
    match family {
        0 => {
            cv.rect(
                cx - 8.0 * s,
                cy - 2.0 * s,
                cx + 8.0 * s,
                cy + 2.0 * s,
                color,
            );
            cv.rect(
                cx - 2.0 * s,
                cy - 8.0 * s,
                cx + 2.0 * s,
                cy + 8.0 * s,
                color,
            );
        }
        1 => cv.ring(cx, cy, 8.0 * s, 5.0 * s, color),
        2 => cv.diamond(cx, cy, 8.0 * s, color),
        _ => {
            for k in -1..=1 {
                let y = cy + k as f64 * 6.0 * s;
                cv.rect(cx - 9.0 * s, y - 1.5 * s, cx + 9.0 * s, y + 1.5 * s, color);
            }
        }
    }
    cv.grain(rng, GRAIN);
    cv.into_image()
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7261_494E,
        Split::Test => 0x7465_5354,
    }
}

/// `per_class` images of each of the first `classes` shape classes.
pub fn gen_synth(classes: usize, per_class: usize, seed: u64, split: Split) -> Result<LabeledSet> {
    if classes < 2 || classes > IOD_CLASSES.len() {
        return Err(Error::Config(format!(
            "synthetic classes must be in 2..={}, got {classes}",
            IOD_CLASSES.len()
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be >= 1".into()));
    }
    let base = seed ^ split_salt(split);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut entries = Vec::with_capacity(classes * per_class);
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    for i in 0..classes * per_class {
        let label = i % classes;
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(base, i));
        images.push(draw_iod(label, &mut rng));
        labels.push(label);
        entries.push(ManifestEntry {
            id: format!("{prefix}-{i:05}"),
            label,
        });
    }
    let manifest = DatasetManifest {
        name: "synth-shapes".into(),
        class_names: IOD_CLASSES[..classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        split,
        source: DataSource::Synthetic,
        entries,
    };
    Ok(LabeledSet {
        images,
        labels,
        manifest,
    })
}

/// `count` images of the disjoint OoD shape family.
pub fn gen_ood(count: usize, seed: u64) -> Result<LabeledSet> {
    if count == 0 {
        return Err(Error::Config("OoD count must be >= 1".into()));
    }
    let base = seed ^ 0x00D0_0D00;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let family = i % OOD_CLASSES.len();
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(base, i));
        images.push(draw_ood(family, &mut rng));
        labels.push(family);
        entries.push(ManifestEntry {
            id: format!("ood-{i:05}"),
            label: family,
        });
    }
    let manifest = DatasetManifest {
        name: "synth-ood".into(),
        class_names: OOD_CLASSES.iter().map(|s| s.to_string()).collect(),
        split: Split::Test,
        source: DataSource::Synthetic,
        entries,
    };
    Ok(LabeledSet {
        images,
        labels,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let a = gen_synth(3, 10, 7, Split::Train).unwrap();
        let b = gen_synth(3, 10, 7, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.len(), 30);
        assert_eq!(a.manifest.entries.len(), 30);
        a.manifest.validate().unwrap();
        let c = gen_synth(3, 10, 8, Split::Train).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn splits_differ_and_families_disjoint() {
        let train = gen_synth(3, 4, 1, Split::Train).unwrap();
        let test = gen_synth(3, 4, 1, Split::Test).unwrap();
        assert!(train.images.iter().all(|x| !test.images.contains(x)));
        let ood = gen_ood(8, 1).unwrap();
        for name in &ood.manifest.class_names {
            assert!(!train.manifest.class_names.contains(name));
        }
    }

    #[test]
    fn class_count_checked() {
        assert!(gen_synth(1, 4, 0, Split::Train).is_err());
        assert!(gen_synth(7, 4, 0, Split::Train).is_err());
    }

    #[test]
    fn images_are_8bit_levels() {
        let s = gen_synth(2, 1, 0, Split::Train).unwrap();
        for v in s.images[0].data() {
            let q = v * 255.0;
            assert!((q - q.round()).abs() < 1e-9);
        }
    }
}
