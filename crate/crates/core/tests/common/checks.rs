//! Seeded end-to-end checks shared by the acceptance target and the regular
//! integration tests. Each returns measurements; callers decide pass/fail.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use coder_core::atg::{self, CachedGateway, GenerationContext, ResponseCache, TemplateSet, TextSetSpec, TsvSynonyms};
use coder_core::coder::{self, build_coder, heuristic_logit, LogitParts};
use coder_core::eval::{self, EvalInputs, Mode, RunConfig, RunManifest};
use coder_core::fewshot::{self, AdapterParams, CoderOptions, NormMode, ParamGrid, SupportCache};
use coder_core::zeroshot::{self, one_to_one_scores, MemoryPairStore, PairTexts, RerankConfig};
use coder_core::{read_bundle, ClassPartition, ClassScores, CoderMatrix, EmbeddingBundle, Family, FeatureMatrix, PsiMapping};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub const FAMILIES: [Family; 4] = [
    Family::ClassName,
    Family::Attribute,
    Family::AnalogousClass,
    Family::Synonym,
];

fn matrix(rows: &[Vec<f32>]) -> FeatureMatrix {
    FeatureMatrix::from_rows(rows, false).unwrap()
}

/// Random general text set where every class has at least one name entry.
pub fn random_text_set(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize) -> (Vec<Vec<f32>>, Vec<TextRecord>) {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for c in 0..n_classes {
        let name_family = if rng.random_bool(0.8) { Family::ClassName } else { Family::Synonym };
        records.push(text_record(records.len() as u64, name_family, c as u32));
        rows.push(to_f32(&gaussian(rng, dim)));
        for _ in 0..rng.random_range(0..4) {
            let family = FAMILIES[rng.random_range(0..4)];
            records.push(text_record(records.len() as u64, family, c as u32));
            rows.push(to_f32(&gaussian(rng, dim)));
        }
    }
    // interleave classes so partitions are not contiguous
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let rows = order.iter().map(|&i| rows[i].clone()).collect();
    let records = order.iter().map(|&i| records[i].clone()).collect();
    (rows, records)
}

/// 1NN reduction: agreeing images, total, elapsed.
pub fn one_nn_reduction(seed: u64) -> (usize, usize, Duration) {
    let mut rng = rng(seed);
    let (n_images, n_classes, dim) = (200, 10, 32);
    let images = random_unit_rows(&mut rng, n_images, dim);
    let texts = random_unit_rows(&mut rng, n_classes, dim);
    let records: Vec<_> = (0..n_classes)
        .map(|c| text_record(c as u64, Family::ClassName, c as u32))
        .collect();
    let started = Instant::now();
    let partition = ClassPartition::from_records(&records, n_classes).unwrap();
    let coders = build_coder(&matrix(&images), &matrix(&texts), PsiMapping::Identity).unwrap();
    let mut agree = 0;
    for i in 0..n_images {
        let logits = coder::stage1_logits(coders.row(i), &partition).unwrap();
        let nearest: Vec<f64> = texts.iter().map(|t| cosine(&images[i], t)).collect();
        if logits.argmax() == Some(argmax_oracle(&nearest))
            && coder::one_nn_class(coders.row(i), &partition).unwrap() == argmax_oracle(&nearest)
        {
            agree += 1;
        }
    }
    (agree, n_images, started.elapsed())
}

/// Max deviation of `build_coder` and stage-1 logits from the scalar oracle.
pub fn oracle_build_coder(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.random_range(2..12);
        let n_classes = rng.random_range(1..6);
        let n_images = rng.random_range(1..6);
        let images = random_rows(&mut rng, n_images, dim);
        let (texts, records) = random_text_set(&mut rng, n_classes, dim);
        let got = build_coder(&matrix(&images), &matrix(&texts), PsiMapping::Identity).unwrap();
        let want = coder_oracle(&images, &texts);
        let partition = ClassPartition::from_records(&records, n_classes).unwrap();
        for i in 0..images.len() {
            for k in 0..texts.len() {
                worst = worst.max((f64::from(got.row(i)[k]) - want[i][k]).abs());
            }
            let logits = coder::stage1_logits(got.row(i), &partition).unwrap();
            let want_logits = stage1_oracle(&want[i], &records, n_classes);
            for c in 0..n_classes {
                worst = worst.max((logits.0[c] - want_logits[c]).abs());
            }
        }
    }
    worst
}

pub fn oracle_heuristic(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let draw = |rng: &mut ChaCha8Rng, min: usize| -> Vec<f64> {
        (0..rng.random_range(min..5)).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    for _ in 0..instances {
        let ori = draw(&mut rng, 1);
        let att = draw(&mut rng, 0);
        let ana = draw(&mut rng, 0);
        let syn = draw(&mut rng, 0);
        let got = heuristic_logit(LogitParts {
            ori: &ori,
            att: &att,
            ana: &ana,
            syn: &syn,
        })
        .unwrap();
        worst = worst.max((got - heuristic_oracle(&ori, &att, &ana, &syn)).abs());
    }
    worst
}

pub fn oracle_one_to_one(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.random_range(2..10);
        let image = to_f32(&gaussian(&mut rng, dim));
        let (na, nb) = (rng.random_range(1..5), rng.random_range(1..5));
        let side_a = random_rows(&mut rng, na, dim);
        let side_b = random_rows(&mut rng, nb, dim);
        let pair = PairTexts::new(0, 1, matrix(&side_a), matrix(&side_b)).unwrap();
        let (a, b) = one_to_one_scores(&image, &pair).unwrap();
        worst = worst
            .max((a - side_mean_oracle(&image, &side_a)).abs())
            .max((b - side_mean_oracle(&image, &side_b)).abs());
    }
    worst
}

/// Random support cache over `n_classes` with random CODER rows.
pub fn random_cache(rng: &mut ChaCha8Rng, n_classes: usize, len: usize) -> (SupportCache, Vec<Vec<f32>>, Vec<u32>) {
    let n_support = rng.random_range(1..8);
    let rows: Vec<Vec<f32>> = (0..n_support)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let labels: Vec<u32> = (0..n_support).map(|_| rng.random_range(0..n_classes as u32)).collect();
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    let cache = SupportCache::from_parts(
        CoderMatrix::from_raw(n_support, len, flat),
        labels.clone(),
        n_classes,
        FeatureMatrix::empty(len),
    )
    .unwrap();
    (cache, rows, labels)
}

fn random_params(rng: &mut ChaCha8Rng) -> AdapterParams {
    AdapterParams {
        alpha: rng.random_range(0.0..3.0),
        beta: rng.random_range(0.5..8.0),
        temperature: rng.random_range(0.5..4.0),
        norm: if rng.random_bool(0.5) { NormMode::MinMax } else { NormMode::L2 },
    }
}

pub fn oracle_affinity(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let len = rng.random_range(1..10);
        let (cache, rows, _) = random_cache(&mut rng, 3, len);
        let s_i: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let p = random_params(&mut rng);
        let got = fewshot::affinity(&s_i, &cache, &p).unwrap();
        let want = affinity_oracle(&s_i, &rows, p.beta, p.temperature, p.norm == NormMode::MinMax);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

pub fn oracle_adapt(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let len = rng.random_range(1..10);
        let n_classes = rng.random_range(2..6);
        let (cache, rows, labels) = random_cache(&mut rng, n_classes, len);
        let s_i: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let zs: Vec<f64> = (0..n_classes).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = random_params(&mut rng);
        let got = fewshot::adapt_logits(&ClassScores(zs.clone()), &s_i, &cache, &p).unwrap();
        let a = affinity_oracle(&s_i, &rows, p.beta, p.temperature, p.norm == NormMode::MinMax);
        let want = adapt_oracle(&zs, &a, &labels, p.alpha);
        for (g, w) in got.0.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

pub struct RerankCheck {
    pub mismatches: usize,
    pub instances: usize,
    pub max_gap_error: f64,
    pub max_antisymmetry: f64,
    pub max_zero_sum: f64,
}

/// Stage 2 against exhaustive enumeration of the summed-gap rule.
pub fn rerank_brute_force(seed: u64, instances: usize) -> RerankCheck {
    let mut rng = rng(seed);
    let mut out = RerankCheck {
        mismatches: 0,
        instances,
        max_gap_error: 0.0,
        max_antisymmetry: 0.0,
        max_zero_sum: 0.0,
    };
    for _ in 0..instances {
        let n_classes = rng.random_range(5..9);
        let dim = rng.random_range(3..8);
        let logits: Vec<f64> = (0..n_classes).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = to_f32(&gaussian(&mut rng, dim));
        let mut sides: HashMap<(usize, usize), (Vec<Vec<f32>>, Vec<Vec<f32>>)> = HashMap::new();
        let mut store = MemoryPairStore::new();
        for a in 0..n_classes {
            for b in a + 1..n_classes {
                let (na, nb) = (rng.random_range(1..4), rng.random_range(1..4));
                let sa = random_rows(&mut rng, na, dim);
                let sb = random_rows(&mut rng, nb, dim);
                store.insert(PairTexts::new(a as u32, b as u32, matrix(&sa), matrix(&sb)).unwrap());
                sides.insert((a, b), (sa, sb));
            }
        }
        let cfg = RerankConfig::always();
        let got = zeroshot::rerank(&ClassScores(logits.clone()), &image, &store, &cfg).unwrap();

        // top 5 by logit, ties to lower id
        let mut order: Vec<usize> = (0..n_classes).collect();
        order.sort_by(|&x, &y| logits[y].partial_cmp(&logits[x]).unwrap().then(x.cmp(&y)));
        let top = &order[..5];
        let gap = |c: usize, j: usize| -> f64 {
            let (lo, hi) = (c.min(j), c.max(j));
            let (sl, sh) = &sides[&(lo, hi)];
            let (ol, oh) = (side_mean_oracle(&image, sl), side_mean_oracle(&image, sh));
            if c == lo {
                ol - oh
            } else {
                oh - ol
            }
        };
        let mut best = top[0];
        let mut best_sum = f64::NEG_INFINITY;
        for &c in top {
            let s: f64 = top.iter().filter(|&&j| j != c).map(|&j| gap(c, j)).sum();
            if s > best_sum || (s == best_sum && c < best) {
                best = c;
                best_sum = s;
            }
        }
        if got.final_class != best || got.stage1_top != top {
            out.mismatches += 1;
        }
        let ledger = got.gaps.expect("always-rerank fills the ledger");
        let mut total = 0.0;
        for &c in top {
            for &j in top {
                if c == j {
                    continue;
                }
                let g = ledger.gap(c, j).unwrap();
                out.max_gap_error = out.max_gap_error.max((g - gap(c, j)).abs());
                out.max_antisymmetry = out.max_antisymmetry.max((g + ledger.gap(j, c).unwrap()).abs());
                total += g;
            }
        }
        out.max_zero_sum = out.max_zero_sum.max(total.abs()).max(ledger.sums().iter().sum::<f64>().abs());
    }
    out
}

/// Largest CODER change after rescaling image and text rows by positive factors.
pub fn scale_invariance(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.random_range(2..10);
        let images = random_rows(&mut rng, 4, dim);
        let texts = random_rows(&mut rng, 5, dim);
        let scale = |rows: &[Vec<f32>], rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            rows.iter()
                .map(|r| {
                    let c: f32 = rng.random_range(0.1..10.0);
                    r.iter().map(|x| x * c).collect()
                })
                .collect()
        };
        let a = build_coder(&matrix(&images), &matrix(&texts), PsiMapping::Identity).unwrap();
        let b = build_coder(
            &matrix(&scale(&images, &mut rng)),
            &matrix(&scale(&texts, &mut rng)),
            PsiMapping::Identity,
        )
        .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            worst = worst.max(f64::from((x - y).abs()));
        }
    }
    worst
}

/// Largest change in CODER entries (matched by text) and stage-1 logits
/// after shuffling the text rows.
pub fn permutation_invariance(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.random_range(2..10);
        let n_classes = rng.random_range(1..6);
        let images = random_rows(&mut rng, 3, dim);
        let (texts, records) = random_text_set(&mut rng, n_classes, dim);
        let mut perm: Vec<usize> = (0..texts.len()).collect();
        perm.shuffle(&mut rng);
        let texts_p: Vec<_> = perm.iter().map(|&i| texts[i].clone()).collect();
        let records_p: Vec<_> = perm.iter().map(|&i| records[i].clone()).collect();

        let a = build_coder(&matrix(&images), &matrix(&texts), PsiMapping::Identity).unwrap();
        let b = build_coder(&matrix(&images), &matrix(&texts_p), PsiMapping::Identity).unwrap();
        let pa = ClassPartition::from_records(&records, n_classes).unwrap();
        let pb = ClassPartition::from_records(&records_p, n_classes).unwrap();
        for i in 0..images.len() {
            for (k, &src) in perm.iter().enumerate() {
                worst = worst.max(f64::from((b.row(i)[k] - a.row(i)[src]).abs()));
            }
            let la = coder::stage1_logits(a.row(i), &pa).unwrap();
            let lb = coder::stage1_logits(b.row(i), &pb).unwrap();
            for (x, y) in la.0.iter().zip(&lb.0) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

/// `(alpha = 0 exact?, max affine-in-alpha deviation)`.
pub fn alpha_checks(seed: u64, instances: usize) -> (bool, f64) {
    let mut rng = rng(seed);
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let len = rng.random_range(1..10);
        let n_classes = rng.random_range(2..6);
        let (cache, _, _) = random_cache(&mut rng, n_classes, len);
        let s_i: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let zs = ClassScores((0..n_classes).map(|_| rng.random_range(-5.0..5.0)).collect());
        let p = random_params(&mut rng);
        let at = |alpha: f64| fewshot::adapt_logits(&zs, &s_i, &cache, &AdapterParams { alpha, ..p }).unwrap();
        if at(0.0) != zs {
            exact = false;
        }
        let one = at(1.0);
        let alpha = p.alpha;
        let got = at(alpha);
        for c in 0..n_classes {
            let want = zs.0[c] + alpha * (one.0[c] - zs.0[c]);
            worst = worst.max((got.0[c] - want).abs());
        }
    }
    (exact, worst)
}

/// Each tie rule: stage-1 argmax, top-k order, rerank winner, grid search.
pub fn tie_breaks() -> Vec<(&'static str, bool)> {
    let flat = ClassScores(vec![0.5; 4]);
    let argmax_ok = flat.argmax() == Some(0) && ClassScores(vec![0.1, 0.7, 0.7]).argmax() == Some(1);
    let top_ok = zeroshot::top_k_classes(&ClassScores(vec![0.2, 0.9, 0.2, 0.9]), 4).unwrap() == vec![1, 3, 0, 2];

    // identical sides give zero gaps everywhere, so the lowest id must win
    let mut store = MemoryPairStore::new();
    let side = matrix(&[vec![1.0, 0.5]]);
    for a in 0..5u32 {
        for b in a + 1..5 {
            store.insert(PairTexts::new(a, b, side.clone(), side.clone()).unwrap());
        }
    }
    let logits = ClassScores(vec![0.1, 0.5, 0.4, 0.3, 0.2]);
    let rerank_ok = (0..3).all(|_| {
        zeroshot::rerank(&logits, &[1.0, 1.0], &store, &RerankConfig::always())
            .unwrap()
            .final_class
            == 0
    });

    let mut rng = rng(99);
    let (cache, _, _) = random_cache(&mut rng, 2, 3);
    let coders = CoderMatrix::from_raw(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.2, 0.1]);
    let zs = vec![ClassScores(vec![10.0, 0.0]), ClassScores(vec![0.0, 10.0])];
    let grid = ParamGrid {
        alpha: vec![0.0, 0.0001, 0.0],
        beta: vec![1.0],
        temperature: vec![1.0],
        norm: vec![NormMode::MinMax],
    };
    let r = fewshot::grid_search(&grid.points(), &coders, &[0, 1], &zs, &cache).unwrap();
    let grid_ok = r.best.alpha == 0.0 && r.scores.iter().all(|s| s.1 == 1.0);

    vec![
        ("stage-1 argmax", argmax_ok),
        ("top-k order", top_ok),
        ("rerank winner", rerank_ok),
        ("grid search", grid_ok),
    ]
}

pub fn zeroshot_manifest(families: Option<Vec<Family>>) -> RunManifest {
    RunManifest {
        dataset_tag: "planted".into(),
        image_bundle: "planted_images.codr".into(),
        text_bundle: "planted_texts.codr".into(),
        mode: Mode::Zeroshot,
        config: RunConfig {
            families,
            ..RunConfig::default()
        },
        seed: 0,
        base_dir: None,
    }
}

/// `(accuracy P, accuracy P+Att+Ana, elapsed)` on the planted dataset.
pub fn planted_directional(seed: u64) -> (f64, f64, Duration) {
    let started = Instant::now();
    let world = planted(&PlantedParams::default(), seed);
    let inputs = EvalInputs {
        images: world.test,
        texts: world.texts,
        support: None,
        val: None,
        pairs: None,
    };
    let reports = eval::ablation_sweep_inputs(
        &zeroshot_manifest(None),
        &inputs,
        &[
            vec![Family::ClassName],
            vec![Family::ClassName, Family::Attribute, Family::AnalogousClass],
        ],
    )
    .unwrap();
    (reports[0].accuracy, reports[1].accuracy, started.elapsed())
}

pub struct FewShotCheck {
    pub zero_shot: f64,
    pub adapted: f64,
    pub best: AdapterParams,
    pub val_best: f64,
    pub val_alpha0: f64,
}

pub fn accuracy(pred: &[usize], labels: &[u32]) -> f64 {
    let ok = pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    ok as f64 / labels.len() as f64
}

pub fn labels_of(b: &EmbeddingBundle) -> Vec<u32> {
    b.image_records().unwrap().iter().map(|r| r.label_class_id.unwrap()).collect()
}

/// 16-shot adapter with validation grid search on the planted dataset.
pub fn fewshot_directional(seed: u64) -> FewShotCheck {
    let world = planted(&PlantedParams::default(), seed);
    let cache = SupportCache::build(&world.support, &world.texts, CoderOptions::default()).unwrap();
    let grid = ParamGrid {
        alpha: vec![0.0, 1.0, 10.0, 100.0, 1000.0],
        beta: vec![1.0, 5.5],
        temperature: vec![1.0, 3.0],
        norm: vec![NormMode::MinMax],
    };
    let val_labels = labels_of(&world.val);
    let val_coders = cache.test_coder(&world.val.features).unwrap();
    let val_zs = fewshot::class_name_logits(&world.val.features, &world.texts).unwrap();
    let r = fewshot::grid_search(&grid.points(), &val_coders, &val_labels, &val_zs, &cache).unwrap();
    let val_alpha0 = r
        .scores
        .iter()
        .filter(|(p, _)| p.alpha == 0.0)
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);

    let labels = labels_of(&world.test);
    let zs = fewshot::class_name_logits(&world.test.features, &world.texts).unwrap();
    let zs_pred: Vec<usize> = zs.iter().map(|z| z.argmax().unwrap()).collect();
    let coders = cache.test_coder(&world.test.features).unwrap();
    let adapted = fewshot::predict(&zs, &coders, &cache, &r.best).unwrap();
    FewShotCheck {
        zero_shot: accuracy(&zs_pred, &labels),
        adapted: accuracy(&adapted, &labels),
        best: r.best,
        val_best: r.accuracy,
        val_alpha0,
    }
}

/// Golden bundle files: parse checks and byte-identical re-serialization.
pub fn golden_bundles() -> Vec<(&'static str, Result<(), String>)> {
    let dir = fixtures();
    let check = |name: &str, f: &dyn Fn(&EmbeddingBundle) -> Result<(), String>| -> Result<(), String> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let b = read_bundle(&path).map_err(|e| e.to_string())?;
        f(&b)?;
        let again = b.to_bytes().map_err(|e| e.to_string())?;
        if again != bytes {
            return Err("re-serialized bytes differ".into());
        }
        Ok(())
    };
    let ensure = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };
    let classes = vec!["cat".to_string(), "dog".into(), "fox".into()];

    let text = check("golden_text.codr", &|b| {
        let r = b.text_records().ok_or("not a text bundle")?;
        ensure(b.rows() == 7 && b.features.dim() == 4, "shape")?;
        ensure(b.features.is_normalized(), "normalized flag")?;
        ensure(b.class_names == classes && b.encoder_tag == "toy-4d", "header fields")?;
        let fams: Vec<Family> = r.iter().map(|r| r.family).collect();
        ensure(
            fams == [
                Family::ClassName,
                Family::Attribute,
                Family::ClassName,
                Family::AnalogousClass,
                Family::ClassName,
                Family::Synonym,
                Family::OneToOne,
            ],
            "families",
        )?;
        ensure(r[6].pair_class_id == Some(1) && r[1].text == "a photo of a cat, which has whiskers", "records")?;
        ensure(b.features.row(0) == [1.0, 0.0, 0.0, 0.0], "row 0")
    });
    let image = check("golden_image.codr", &|b| {
        let r = b.image_records().ok_or("not an image bundle")?;
        ensure(b.rows() == 4 && !b.features.is_normalized(), "shape")?;
        ensure(r[3].label_class_id.is_none() && r[0].source_path == "cat/001.jpg", "records")?;
        ensure(b.features.row(1) == [0.1, 0.8, 0.2, 0.0], "row 1")
    });
    let coder_kind = check("golden_coder.codr", &|b| {
        ensure(b.records.kind() == "coder" && b.rows() == 4 && b.features.dim() == 6, "shape")?;
        let img = read_bundle(dir.join("golden_image.codr")).map_err(|e| e.to_string())?;
        let txt = read_bundle(dir.join("golden_text.codr")).map_err(|e| e.to_string())?;
        let keep: Vec<usize> = (0..6).collect();
        let want = build_coder(&img.features, &txt.features.select_rows(&keep), PsiMapping::Identity)
            .map_err(|e| e.to_string())?;
        let err = want
            .values()
            .iter()
            .zip(b.features.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        ensure(err < 1e-6, "payload differs from recomputed CODER")
    });
    vec![
        ("text", text),
        ("image", image),
        ("coder", coder_kind),
    ]
}

pub fn eurosat_text_set() -> String {
    let dir = fixtures();
    let cache = ResponseCache::open(dir.join("eurosat_cache.jsonl")).unwrap();
    let gateway = CachedGateway::offline("gpt-3.5-turbo", cache);
    let synonyms = TsvSynonyms::load(dir.join("eurosat_synonyms.tsv")).unwrap();
    let classes: Vec<String> = std::fs::read_to_string(dir.join("eurosat_classes.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let templates = TemplateSet::default();
    let ctx = GenerationContext {
        gateway: &gateway,
        synonyms: &synonyms,
        templates: &templates,
        encoder: None,
        max_in_flight: 4,
    };
    let set = atg::assemble_general_text_set(&TextSetSpec::new(classes), &ctx).unwrap();
    set.to_file().to_json().unwrap()
}

/// `(records, identical across runs, matches checked-in text set)`.
pub fn atg_offline() -> (usize, bool, bool) {
    let a = eurosat_text_set();
    let b = eurosat_text_set();
    let file: atg::TextSetFile = serde_json::from_str(&a).unwrap();
    let golden = std::fs::read_to_string(fixtures().join("eurosat_texts.json")).unwrap_or_default();
    (file.records.len(), a == b, a == golden)
}

pub fn shared<T>(v: T) -> Arc<T> {
    Arc::new(v)
}
