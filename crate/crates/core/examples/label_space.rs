//! Merging taxonomies into one label space keyed by category name, and
//! writing and reading the embedding table.

use taxodet::labelspace::{cosine, load_embeddings, synth_alias, synth_embedding, EmbeddingTable, LabelSpace};

fn main() -> taxodet::Result<()> {
    let mut space = LabelSpace::new();
    let coco = space.register_dataset("coco", &["person", "car", "sports ball"])?;
    let oi = space.register_dataset("openimages", &["Person", "Football", "Soccer", "Taxi"])?;
    println!("{} categories", space.len());
    for (name, d) in [("coco", &coco), ("openimages", &oi)] {
        let ids: Vec<String> =
            d.local_classes.iter().zip(&d.local_to_global).map(|(c, g)| format!("{c}={g}")).collect();
        println!("  {name}: {}", ids.join(", "));
    }

    let d = 16;
    let mut rows = ndarray::Array2::zeros((space.len(), d));
    for cat in space.categories() {
        rows.row_mut(cat.embedding_row).assign(&synth_embedding(&cat.name, d, 1));
    }
    let football = synth_embedding("football", d, 1);
    rows.row_mut(space.lookup("soccer")?).assign(&synth_alias(&football, "soccer", 1, 0.97));
    let table = EmbeddingTable::new(rows)?;
    println!(
        "cos(football, soccer) = {:.3}, cos(football, taxi) = {:.3}",
        cosine(&table.row(space.lookup("football")?), &table.row(space.lookup("soccer")?)),
        cosine(&table.row(space.lookup("football")?), &table.row(space.lookup("taxi")?)),
    );

    let path = std::env::temp_dir().join("taxodet-embeddings.txt");
    table.save(&path, &space)?;
    let back = load_embeddings(&path, &space)?;
    println!("round trip exact: {}", back.rows == table.rows);
    std::fs::remove_file(path)?;
    Ok(())
}
