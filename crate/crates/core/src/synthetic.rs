//! Small synthetic corpora with known structure, used by tests, the
//! acceptance suite and the command-line demo data.
//!
//! Scenes combine one of four colors with one of four objects. Each image
//! patch is a noisy copy of a fixed prototype: even patches carry the color
//! prototype, odd patches the object prototype.

use crate::dual_encoder::ContrastivePair;
use crate::model::Example;
use crate::numerics::{Matrix, Rng};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "white"];
pub const OBJECTS: [&str; 4] = ["ship", "plane", "road", "field"];
/// Fixed instruction used for caption (alignment) samples.
pub const CAPTION_QUERY: &str = "describe";

pub const PLACES: [&str; 8] = [
    "harbor", "airport", "forest", "desert", "river", "stadium", "farmland", "bridge",
];
pub const DENSITIES: [&str; 4] = ["dense", "sparse", "northern", "southern"];

const PATCH_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub color: usize,
    pub object: usize,
    /// `patches × patch_dim`.
    pub image: Matrix,
}

impl Scene {
    pub fn caption(&self) -> String {
        format!("{} {}", COLORS[self.color], OBJECTS[self.object])
    }

    /// Mean patch, the retriever's view of the image.
    pub fn pooled(&self) -> Vec<f64> {
        mean_rows(&self.image)
    }
}

pub fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let n = m.rows().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `n` scenes cycling through all 16 color/object pairs.
pub fn scenes(patch_dim: usize, patches: usize, n: usize, seed: u64) -> Vec<Scene> {
    let mut rng = Rng::new(seed);
    let color_protos = Matrix::randn(COLORS.len(), patch_dim, 1.0, &mut rng);
    let object_protos = Matrix::randn(OBJECTS.len(), patch_dim, 1.0, &mut rng);
    (0..n)
        .map(|i| {
            let color = i % COLORS.len();
            let object = (i / COLORS.len()) % OBJECTS.len();
            let image = Matrix::from_fn(patches, patch_dim, |p, c| {
                let proto = if p % 2 == 0 {
                    color_protos.get(color, c)
                } else {
                    object_protos.get(object, c)
                };
                proto + PATCH_NOISE * rng.normal()
            });
            Scene { color, object, image }
        })
        .collect()
}

/// Retrieved-knowledge stand-in: a description mentioning the color only.
pub fn scene_semantics(scene: &Scene) -> Vec<String> {
    vec![format!("{} tones", COLORS[scene.color])]
}

/// Alignment pairs: the fixed caption instruction answered by the caption.
pub fn caption_corpus(patch_dim: usize, patches: usize, n: usize, seed: u64) -> Vec<Example> {
    scenes(patch_dim, patches, n, seed)
        .iter()
        .map(|s| Example::from_text(s.image.clone(), &scene_semantics(s), CAPTION_QUERY, &s.caption(), 64))
        .collect()
}

/// Query and answer for a scene: the color when color and object indices
/// have equal parity, the object otherwise.
pub fn instruction_text(scene: &Scene) -> (&'static str, &'static str) {
    if (scene.color + scene.object).is_multiple_of(2) {
        ("color?", COLORS[scene.color])
    } else {
        ("object?", OBJECTS[scene.object])
    }
}

/// Instruction samples asking either for the color or for the object.
pub fn instruction_corpus(patch_dim: usize, patches: usize, n: usize, seed: u64) -> Vec<Example> {
    scenes(patch_dim, patches, n, seed)
        .iter()
        .map(|s| {
            let (query, response) = instruction_text(s);
            Example::from_text(s.image.clone(), &scene_semantics(s), query, response, 64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRecord {
    pub features: Vec<f64>,
    pub text: String,
}

/// 32 feature/text pairs. The argmax of features `0..8` picks the place word
/// and the argmax of features `8..12` the density word; remaining features
/// are noise. Requires `dim >= 12`.
pub fn retrieval_corpus(dim: usize, seed: u64) -> Vec<RetrievalRecord> {
    assert!(dim >= PLACES.len() + DENSITIES.len(), "retrieval features need at least 12 dims");
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(PLACES.len() * DENSITIES.len());
    for (a, place) in PLACES.iter().enumerate() {
        for (b, density) in DENSITIES.iter().enumerate() {
            let mut features: Vec<f64> = (0..dim).map(|_| 0.1 * rng.normal()).collect();
            features[a] += 1.0;
            features[PLACES.len() + b] += 1.0;
            out.push(RetrievalRecord {
                features,
                text: format!("{density} {place}"),
            });
        }
    }
    out
}

pub fn retrieval_pairs(records: &[RetrievalRecord], vocab: usize) -> Vec<ContrastivePair> {
    records
        .iter()
        .map(|r| ContrastivePair::from_text(r.features.clone(), &r.text, vocab))
        .collect()
}
