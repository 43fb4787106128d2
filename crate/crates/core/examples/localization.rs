//! Measures how often the query attention argmax (and the raw feature-energy
//! argmax) falls inside the target bounding box, over correctly classified
//! test queries.
//!
//! Usage: localization <checkpoint-dir> <dataset-dir> [episodes]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fewshot_core::fewshot::predict_inductive;
use fewshot_core::model::load_checkpoint;
use fewshot_core::synth::{sample_episode, Dataset, Split};
use fewshot_core::transductive::raw_prototypes;

fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

fn main() {
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next().expect("checkpoint dir");
    let data = args.next().expect("dataset dir");
    let episodes: u64 = args.next().map(|v| v.parse().unwrap()).unwrap_or(100);

    let (model, _) = load_checkpoint(checkpoint.as_ref()).unwrap();
    let dataset = Dataset::load(data.as_ref()).unwrap();
    let edge = model.embedding.config.feature_edge();
    let cell_px = dataset.image_size / edge;

    let (mut attn_hits, mut energy_hits, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize);
    let mut mass_in_bbox = 0.0f64;
    for index in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(31337 + index);
        let episode = sample_episode(&dataset, Split::Test, 5, 1, 3, &mut rng).unwrap();
        let mut support_maps = vec![Vec::new(); episode.way];
        for s in &episode.support {
            support_maps[s.episode_label].push(model.embed_image(&dataset.image(s.record)).unwrap());
        }
        let prototypes = raw_prototypes(&support_maps);
        for q in &episode.query {
            total += 1;
            let query_map = model.embed_image(&dataset.image(q.record)).unwrap();
            let outputs = model.pair_outputs(&prototypes, &query_map).unwrap();
            let (label, _) = predict_inductive(&outputs, model.config.alpha);
            if label != q.episode_label {
                continue;
            }
            correct += 1;
            let bbox = dataset.bbox(q.record);
            let in_bbox = |pos: usize| {
                let (row, col) = (pos / edge, pos % edge);
                bbox.contains(col * cell_px + cell_px / 2, row * cell_px + cell_px / 2)
            };
            let attn = outputs[label].query_attention.data();
            if in_bbox(argmax(attn)) {
                attn_hits += 1;
            }
            mass_in_bbox += attn
                .iter()
                .enumerate()
                .filter(|(p, _)| in_bbox(*p))
                .map(|(_, &v)| v as f64)
                .sum::<f64>();
            let energy: Vec<f32> = (0..edge * edge)
                .map(|p| (0..query_map.shape()[0]).map(|ch| query_map.at2(ch, p).powi(2)).sum())
                .collect();
            if in_bbox(argmax(&energy)) {
                energy_hits += 1;
            }
        }
    }
    println!(
        "{episodes} episodes, {total} queries, accuracy {:.3}",
        correct as f64 / total as f64
    );
    println!(
        "attention argmax in bbox: {:.3} ({attn_hits}/{correct}); mean bbox mass {:.3}",
        attn_hits as f64 / correct.max(1) as f64,
        mass_in_bbox / correct.max(1) as f64
    );
    println!(
        "feature-energy argmax in bbox: {:.3} ({energy_hits}/{correct})",
        energy_hits as f64 / correct.max(1) as f64
    );
}
