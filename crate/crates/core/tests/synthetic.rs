//! Synthetic cohorts driven through the public API.

use bdvae_core::bdvae::{Architecture, BdvaeModel, ModelConfig};
use bdvae_core::cohort::{pathway_activity, AnalysisThresholds, LatentEmbedding};
use bdvae_core::datamodel::{stratified_split, Split, Standardizer};
use bdvae_core::latalloc::allocate_proportional;
use bdvae_core::maskspec::compile_masks;
use bdvae_core::ndmath::Tensor;
use bdvae_core::stats::roc_auc;
use bdvae_core::synthgen::{generate, SynthSpec};
use bdvae_core::trainer::{train, TrainConfig, TrainData};

/// Trains on the train split and returns the AUC over validation and test.
fn held_out_auc(spec: &SynthSpec, epochs: usize) -> f64 {
    let c = generate(spec).unwrap();
    let cohort = stratified_split(&c.cohort, [0.64, 0.16, 0.20], spec.seed).unwrap().cohort;
    let train_rows = cohort.indices(Split::Train);
    let mut held = cohort.indices(Split::Val);
    held.extend(cohort.indices(Split::Test));
    let input = Standardizer::fit(&c.features, &train_rows).apply(&c.features);
    let masks = compile_masks(&c.gene_sets, &input).unwrap().masks;
    let sizes: Vec<usize> = masks.entries.iter().map(|e| e.indices.len()).collect();
    let latents = allocate_proportional(&sizes, 64).unwrap();
    let arch = Architecture::new(&masks, &latents, &ModelConfig::default()).unwrap();

    let labels = cohort.labels();
    let pick = |rows: &[usize]| -> (Tensor, Vec<u8>) {
        (input.values().select_rows(rows), rows.iter().map(|&i| labels[i]).collect())
    };
    let (x, y) = pick(&train_rows);
    let (xv, yv) = pick(&cohort.indices(Split::Val));
    let data = TrainData {
        x_train: &x,
        y_train: &y,
        x_val: &xv,
        y_val: &yv,
        kinds: input.value_kind(),
    };
    let cfg = TrainConfig {
        epochs,
        weight_decay_vae: 0.01,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let model = train(BdvaeModel::init(arch, spec.seed), &data, &cfg, &mut ()).unwrap().best;
    let (xh, yh) = pick(&held);
    roc_auc(&model.predict_logits(&xh).unwrap(), &yh).unwrap()
}

#[test]
fn planted_cohort_is_learnable_and_null_cohort_is_not() {
    let planted = held_out_auc(&SynthSpec::benchmark(11), 80);
    assert!(planted > 0.85, "planted AUC {planted}");

    // One held-out AUC on 144 samples has a standard error near 0.05, so
    // the null check averages three seeds.
    let null: f64 = (0..3)
        .map(|seed| {
            let mut spec = SynthSpec::benchmark(20 + seed);
            for p in &mut spec.pathways {
                p.effect = 0.0;
            }
            held_out_auc(&spec, 80)
        })
        .sum::<f64>()
        / 3.0;
    assert!((null - 0.5).abs() <= 0.05, "null AUC {null}");
}

#[test]
fn planted_factors_lead_pathway_effect_sizes() {
    // Feeding the planted factors themselves through pathway activity, with
    // the planted classes as clusters, must put the informative pathways on
    // top. This checks the generator rather than any trained model.
    let mut hits = 0;
    for seed in 0..20 {
        let c = generate(&SynthSpec::benchmark(seed)).unwrap();
        let t = &c.truth;
        let n = t.factors.len();
        let p = t.pathway_names.len();
        let values = Tensor::matrix(n, p, t.factors.concat()).unwrap();
        let emb = LatentEmbedding::new(t.sample_ids.clone(), t.pathway_names.clone(), values).unwrap();
        let map: Vec<(String, Vec<usize>)> = t.pathway_names.iter().cloned().zip((0..p).map(|k| vec![k])).collect();
        let mut act = pathway_activity(&emb, &map, &t.clusters, &AnalysisThresholds::default()).unwrap();
        act.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()));
        let top: Vec<&str> = act.iter().take(t.informative_pathways.len()).map(|a| a.pathway.as_str()).collect();
        if t.informative_pathways.iter().all(|name| top.contains(&name.as_str())) {
            hits += 1;
        }
        // A unit-variance factor shifted by 2 gives δ = 2Φ(√2) − 1 ≈ 0.84.
        for a in act.iter().filter(|a| t.informative_pathways.contains(&a.pathway)) {
            assert!(a.star, "{} δ = {}", a.pathway, a.delta);
        }
    }
    assert!(hits >= 19, "{hits}/20 seeds");
}
