mod common;

use std::collections::BTreeMap;

use coder_core::atg::{
    self, CachedGateway, GenerationContext, NoSynonyms, ResponseCache, TemplateSet, TextSetFile, TextSetSpec,
    TsvSynonyms,
};
use coder_core::Family;
use common::{checks, fixtures};

fn classes() -> Vec<String> {
    std::fs::read_to_string(fixtures().join("eurosat_classes.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn run(spec: &TextSetSpec, max_in_flight: usize) -> atg::GeneratedTextSet {
    let cache = ResponseCache::open(fixtures().join("eurosat_cache.jsonl")).unwrap();
    let gateway = CachedGateway::offline("gpt-3.5-turbo", cache);
    let synonyms = TsvSynonyms::load(fixtures().join("eurosat_synonyms.tsv")).unwrap();
    let templates = TemplateSet::default();
    let ctx = GenerationContext {
        gateway: &gateway,
        synonyms: &synonyms,
        templates: &templates,
        encoder: None,
        max_in_flight,
    };
    atg::assemble_general_text_set(spec, &ctx).unwrap()
}

#[test]
fn eurosat_fixture_gives_95_records() {
    let (records, stable, _) = checks::atg_offline();
    assert_eq!(records, 95);
    assert!(stable);
}

#[test]
fn family_breakdown_and_ids() {
    let set = run(&TextSetSpec::new(classes()), 4);
    let mut counts = BTreeMap::new();
    for r in &set.records {
        *counts.entry(r.family).or_insert(0) += 1;
    }
    assert_eq!(counts[&Family::ClassName], 10);
    assert_eq!(counts[&Family::Attribute], 50);
    assert_eq!(counts[&Family::AnalogousClass], 20);
    assert_eq!(counts[&Family::Synonym], 15);
    for (i, r) in set.records.iter().enumerate() {
        assert_eq!(r.id, i as u64);
    }
    assert!(set.records.windows(2).all(|w| w[0].class_id <= w[1].class_id));
}

#[test]
fn analogous_never_names_a_dataset_class() {
    let names = classes();
    let set = run(&TextSetSpec::new(names.clone()), 4);
    for r in set.records.iter().filter(|r| r.family == Family::AnalogousClass) {
        for n in &names {
            assert!(!r.text.ends_with(&format!("similar to {n}")), "{}", r.text);
        }
    }
}

#[test]
fn ambiguous_synonyms_are_reported() {
    let set = run(&TextSetSpec::new(classes()), 4);
    assert!(set.warnings.iter().any(|w| w.contains("river")), "{:?}", set.warnings);
}

#[test]
fn output_does_not_depend_on_parallelism() {
    let spec = TextSetSpec::new(classes());
    let a = run(&spec, 1).to_file().to_json().unwrap();
    let b = run(&spec, 8).to_file().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn class_names_only_needs_no_llm() {
    let gateway = CachedGateway::offline("gpt-3.5-turbo", ResponseCache::in_memory());
    let templates = TemplateSet::default();
    let ctx = GenerationContext {
        gateway: &gateway,
        synonyms: &NoSynonyms,
        templates: &templates,
        encoder: None,
        max_in_flight: 2,
    };
    let spec = TextSetSpec::only(classes(), &[Family::ClassName]);
    let set = atg::assemble_general_text_set(&spec, &ctx).unwrap();
    assert_eq!(set.records.len(), 10);
    assert!(set.warnings.is_empty());
}

#[test]
fn cache_misses_degrade_to_warnings() {
    let mut names = classes();
    names.push("glacier".into());
    let set = run(&TextSetSpec::new(names), 4);
    let glacier: Vec<_> = set.records.iter().filter(|r| r.class_id == 10).collect();
    assert!(glacier.iter().any(|r| r.family == Family::ClassName));
    assert!(glacier.iter().all(|r| r.family != Family::Attribute));
    assert!(set.warnings.iter().any(|w| w.contains("glacier")));
}

#[test]
fn text_set_file_round_trips() {
    let json = checks::eurosat_text_set();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("texts.json");
    std::fs::write(&path, &json).unwrap();
    let file = TextSetFile::load(&path).unwrap();
    assert_eq!(file.to_json().unwrap(), json);
}
