use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;
use taxodet::harness::data::build_world;
use taxodet::harness::BenchConfig;
use taxodet::labelspace::{
    cosine, load_embeddings, normalize_name, parse_embeddings, synth_embedding, EmbeddingTable, LabelSpace,
};

const NAMES: [&str; 8] = ["person", "car", "truck", "football", "soccer", "traffic light", "dog", "bus"];

fn arb_datasets() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::sample::subsequence(NAMES.to_vec(), 1..=5), 1..=4)
        .prop_map(|ds| ds.into_iter().map(|d| d.into_iter().map(String::from).collect()).collect())
}

fn name_to_embedding(datasets: &[Vec<String>], order: &[usize]) -> BTreeMap<String, Vec<f64>> {
    let mut space = LabelSpace::new();
    for &i in order {
        space.register_dataset(&format!("ds{i}"), &datasets[i]).unwrap();
    }
    let names: Vec<&String> = space.categories().iter().map(|c| &c.name).collect();
    let mut text = format!("{} 16\n", names.len());
    for name in &names {
        let v: Vec<String> = synth_embedding(name, 16, 9).iter().map(|x| x.to_string()).collect();
        text.push_str(&format!("{name} {}\n", v.join(" ")));
    }
    let table = parse_embeddings(&text, &space).unwrap();
    space.categories().iter().map(|c| (c.name.clone(), table.rows.row(c.embedding_row).to_vec())).collect()
}

proptest! {
    #[test]
    fn registration_order_only_renumbers(datasets in arb_datasets()) {
        let forward: Vec<usize> = (0..datasets.len()).collect();
        let backward: Vec<usize> = forward.iter().rev().copied().collect();
        let a = name_to_embedding(&datasets, &forward);
        let b = name_to_embedding(&datasets, &backward);
        prop_assert_eq!(&a, &b);
        let distinct: std::collections::BTreeSet<String> =
            datasets.iter().flatten().map(|n| normalize_name(n)).collect();
        prop_assert_eq!(a.len(), distinct.len());
    }

    #[test]
    fn embeddings_survive_a_file_round_trip(values in prop::collection::vec(-1e3..1e3f64, 3 * 5)) {
        let mut space = LabelSpace::new();
        space.register_dataset("a", &["person", "car", "traffic light"]).unwrap();
        let table = EmbeddingTable::new(Array2::from_shape_vec((3, 5), values).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.txt");
        table.save(&path, &space).unwrap();
        let back = load_embeddings(&path, &space).unwrap();
        prop_assert_eq!(
            back.rows.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            table.rows.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn synthetic_embeddings_are_deterministic_unit_vectors(name in "[a-z]{1,12}", seed in any::<u64>(), d in 2usize..64) {
        let v = synth_embedding(&name, d, seed);
        prop_assert_eq!(&v, &synth_embedding(&name, d, seed));
        prop_assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn synonyms_with_different_spellings_stay_distinct() {
    let mut space = LabelSpace::new();
    space.register_dataset("a", &["person", "football"]).unwrap();
    space.register_dataset("b", &["Person", "soccer"]).unwrap();
    assert_eq!(space.len(), 3);
    assert_ne!(space.lookup("football").unwrap(), space.lookup("soccer").unwrap());
    assert_eq!(space.lookup("person").unwrap(), space.datasets()[1].local_to_global[0]);
}

#[test]
fn missing_category_is_named() {
    let mut space = LabelSpace::new();
    space.register_dataset("a", &["person", "car"]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.txt");
    std::fs::write(&path, "1 2\nperson 0.1 0.2\n").unwrap();
    let err = load_embeddings(&path, &space).unwrap_err().to_string();
    assert!(err.contains("embedding missing for category: car"), "{err}");
}

#[test]
fn generated_worlds_have_the_required_cosines() {
    let mut aliased = 0;
    let mut unrelated = Vec::new();
    for seed in 0..20 {
        let cfg = BenchConfig { seed, ..BenchConfig::default() };
        let world = build_world(&cfg).unwrap();
        let rows = &world.appearance.rows;
        for i in 0..world.k() {
            for j in i + 1..world.k() {
                let c = cosine(&rows.row(i).to_owned(), &rows.row(j).to_owned());
                if world.alias_pairs.contains(&(i, j)) || world.alias_pairs.contains(&(j, i)) {
                    assert!(c >= 0.95, "alias pair ({i}, {j}) at cosine {c}");
                    aliased += 1;
                } else {
                    unrelated.push(c.abs());
                }
            }
        }
    }
    assert_eq!(aliased, 20 * BenchConfig::default().alias_pairs());
    let worst = unrelated.iter().copied().fold(0.0, f64::max);
    assert!(worst < 0.5, "largest unrelated |cosine| {worst}");
}
