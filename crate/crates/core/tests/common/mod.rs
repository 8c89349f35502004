//! Scalar reference implementations and fixture builders shared by the
//! integration tests. Oracles are plain loops over `f64` written directly from
//! the formulas, with no calls into the library's math.

#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod checks;

use std::path::PathBuf;

use coder_core::embedding_store::ImageRecord;
use coder_core::{EmbeddingBundle, Family, FeatureMatrix, TextRecord};
use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..rows).map(|_| to_f32(&gaussian(rng, dim))).collect()
}

pub fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..rows).map(|_| to_f32(&unit(&gaussian(rng, dim)))).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        let x = a[i] as f64;
        let y = b[i] as f64;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn coder_oracle(images: &[Vec<f32>], texts: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for img in images {
        let mut row = Vec::new();
        for t in texts {
            row.push(cosine(img, t));
        }
        out.push(row);
    }
    out
}

/// Mean over attribute and analogous entries plus one max over name entries.
pub fn heuristic_oracle(ori: &[f64], att: &[f64], ana: &[f64], syn: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &v in ori.iter().chain(syn) {
        if v > best {
            best = v;
        }
    }
    let mut total = best;
    let mut count = 1.0;
    for &v in att.iter().chain(ana) {
        total += v;
        count += 1.0;
    }
    total / count
}

pub fn stage1_oracle(coder: &[f64], records: &[TextRecord], n_classes: usize) -> Vec<f64> {
    let mut logits = Vec::new();
    for c in 0..n_classes {
        let (mut ori, mut att, mut ana, mut syn) = (vec![], vec![], vec![], vec![]);
        for (k, r) in records.iter().enumerate() {
            if r.class_id as usize != c {
                continue;
            }
            match r.family {
                Family::ClassName => ori.push(coder[k]),
                Family::Attribute => att.push(coder[k]),
                Family::AnalogousClass => ana.push(coder[k]),
                Family::Synonym => syn.push(coder[k]),
                Family::OneToOne => {}
            }
        }
        logits.push(heuristic_oracle(&ori, &att, &ana, &syn));
    }
    logits
}

/// First index of the maximum.
pub fn argmax_oracle(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn side_mean_oracle(image: &[f32], side: &[Vec<f32>]) -> f64 {
    let mut s = 0.0;
    for t in side {
        s += cosine(image, t);
    }
    s / side.len() as f64
}

/// `exp(-beta * (1 - norm(s_i . S^T) / T))` per support row.
pub fn affinity_oracle(s_i: &[f32], support: &[Vec<f32>], beta: f64, t: f64, minmax: bool) -> Vec<f64> {
    let mut inner = Vec::new();
    for row in support {
        let mut d = 0.0;
        for k in 0..row.len() {
            d += s_i[k] as f64 * row[k] as f64;
        }
        inner.push(d);
    }
    let mut normed = Vec::new();
    if minmax {
        let mut lo = inner[0];
        let mut hi = inner[0];
        for &v in &inner {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for &v in &inner {
            normed.push(if hi == lo { 0.5 } else { (v - lo) / (hi - lo) });
        }
    } else {
        let mut sq = 0.0;
        for &v in &inner {
            sq += v * v;
        }
        for &v in &inner {
            normed.push(if sq == 0.0 { 0.0 } else { v / sq.sqrt() });
        }
    }
    let mut out = Vec::new();
    for v in normed {
        out.push((-beta * (1.0 - v / t)).exp());
    }
    out
}

pub fn adapt_oracle(zs: &[f64], affinity: &[f64], labels: &[u32], alpha: f64) -> Vec<f64> {
    let mut out = zs.to_vec();
    for (n, &a) in affinity.iter().enumerate() {
        out[labels[n] as usize] += alpha * a;
    }
    out
}

pub fn text_record(id: u64, family: Family, class_id: u32) -> TextRecord {
    TextRecord {
        id,
        text: format!("{family} text {id} for class {class_id}"),
        family,
        class_id,
        pair_class_id: None,
        template_id: family.as_str().to_string(),
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class {c}")).collect()
}

pub fn text_bundle(rows: &[Vec<f32>], records: Vec<TextRecord>, n_classes: usize) -> EmbeddingBundle {
    EmbeddingBundle::text(
        FeatureMatrix::from_rows(rows, false).unwrap(),
        records,
        class_names(n_classes),
        "planted",
    )
    .unwrap()
}

pub fn image_bundle(rows: &[Vec<f32>], labels: &[u32], first_id: u64, n_classes: usize) -> EmbeddingBundle {
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| ImageRecord {
            id: first_id + i as u64,
            label_class_id: Some(l),
            source_path: String::new(),
        })
        .collect();
    EmbeddingBundle::image(
        FeatureMatrix::from_rows(rows, false).unwrap(),
        records,
        class_names(n_classes),
        "planted",
    )
    .unwrap()
}

/// Synthetic dataset where attribute and analogous texts are noisy copies of
/// the class centroids and each class-name text is pushed off its centroid.
pub struct Planted {
    pub texts: EmbeddingBundle,
    pub test: EmbeddingBundle,
    pub support: EmbeddingBundle,
    pub val: EmbeddingBundle,
}

pub struct PlantedParams {
    pub classes: usize,
    pub dim: usize,
    pub attributes: usize,
    pub analogous: usize,
    /// Norm of the noise added to attribute and analogous texts.
    pub text_noise: f64,
    /// Norm of the fixed offset moving each class-name text off its centroid.
    pub name_offset: f64,
    /// Norm of the per-image noise.
    pub image_noise: f64,
    pub test_images: usize,
    pub shots: usize,
    pub val_per_class: usize,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            attributes: 5,
            analogous: 3,
            text_noise: 0.3,
            name_offset: 1.5,
            image_noise: 3.0,
            test_images: 1000,
            shots: 16,
            val_per_class: 10,
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f64], norm: f64) -> Vec<f64> {
    let d = center.len() as f64;
    let g = gaussian(rng, center.len());
    center
        .iter()
        .zip(&g)
        .map(|(c, e)| c + norm * e / d.sqrt())
        .collect()
}

pub fn planted(p: &PlantedParams, seed: u64) -> Planted {
    let mut rng = rng(seed);
    let centroids: Vec<Vec<f64>> = (0..p.classes).map(|_| unit(&gaussian(&mut rng, p.dim))).collect();

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (c, center) in centroids.iter().enumerate() {
        let offset = unit(&gaussian(&mut rng, p.dim));
        let name: Vec<f64> = center
            .iter()
            .zip(&offset)
            .map(|(x, o)| x + p.name_offset * o)
            .collect();
        rows.push(to_f32(&unit(&name)));
        records.push(text_record(records.len() as u64, Family::ClassName, c as u32));
        for (family, count) in [(Family::Attribute, p.attributes), (Family::AnalogousClass, p.analogous)] {
            for _ in 0..count {
                rows.push(to_f32(&unit(&noisy(&mut rng, center, p.text_noise))));
                records.push(text_record(records.len() as u64, family, c as u32));
            }
        }
    }
    let texts = text_bundle(&rows, records, p.classes);

    let mut draw = |n: usize, by_class: bool, first_id: u64| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = if by_class {
                i % p.classes
            } else {
                rng.random_range(0..p.classes)
            };
            rows.push(to_f32(&unit(&noisy(&mut rng, &centroids[c], p.image_noise))));
            labels.push(c as u32);
        }
        image_bundle(&rows, &labels, first_id, p.classes)
    };
    let test = draw(p.test_images, false, 0);
    let support = draw(p.shots * p.classes, true, 1_000_000);
    let val = draw(p.val_per_class * p.classes, true, 2_000_000);
    Planted {
        texts,
        test,
        support,
        val,
    }
}
