//! Labeled pairs from a synthetic knowledge base: within-point positives,
//! BM25 hard negatives from other points, stratified 8:1:1 splits.

use adapter_distill::faq::{build_dataset, DatasetOptions, Split, SyntheticConfig};

fn main() -> adapter_distill::Result<()> {
    let tenants = SyntheticConfig {
        num_tenants: 2,
        points_per_tenant: 30,
        seed: 7,
        ..SyntheticConfig::default()
    }
    .generate()?;
    let kb = &tenants[0].kb;
    println!(
        "{}: {} points, {} questions",
        kb.tenant_id,
        kb.points.len(),
        kb.num_questions()
    );
    for p in kb.points.iter().take(2) {
        println!(
            "  {}: {} | {}",
            p.point_id,
            p.standard_question,
            p.similar_questions.join(" | ")
        );
    }

    let data = build_dataset(kb, DatasetOptions::default())?;
    let counts = data.counts();
    for s in Split::ALL {
        println!(
            "{s}: {} positive, {} negative",
            counts[s.index()][1],
            counts[s.index()][0]
        );
    }
    for e in data.examples.iter().filter(|e| e.label == 0).take(3) {
        println!("hard negative: {:?} vs {:?}", e.query, e.candidate);
    }
    Ok(())
}
