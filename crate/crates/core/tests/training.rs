use mitoshift_core::backbone::{Adaptation, VptViT, ViTConfig};
use mitoshift_core::domain_adapt::GrlCoeff;
use mitoshift_core::synth::{generate, Difficulty, DomainSpec, SynthConfig};
use mitoshift_core::train::{train_loop, ModelInput, Sample, TrainConfig};

fn samples() -> Vec<Sample> {
    let cfg = SynthConfig {
        n_per_class_per_domain: 50,
        domains: vec![DomainSpec { seed: 1, angle_deg: 0.0 }, DomainSpec { seed: 2, angle_deg: 10.0 }],
        noise_sigma: 2.0,
        side: 32,
        difficulty: Difficulty::Easy,
    };
    generate(&cfg)
        .unwrap()
        .samples
        .into_iter()
        .map(|s| Sample { input: ModelInput::Pixels(s.patch), label: s.label, domain: s.domain })
        .collect()
}

#[test]
fn loss_decreases_on_easy_synthetic_data() {
    let data = samples();
    assert_eq!(data.len(), 200);
    let vit = ViTConfig {
        image_side: 32,
        patch_size: 8,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 2,
        prompt_len: 2,
        lora_rank: 0,
    };
    let mut model = VptViT::new(vit, 2, 0).unwrap();
    let cfg = TrainConfig {
        adaptation: Adaptation::Vpt,
        epochs: 10,
        batch_size: 16,
        learning_rate: 0.01,
        seed: 0,
        grl: GrlCoeff::constant(0.1),
        class_weights: None,
        domain_loss_weight: 1.0,
    };
    let report = train_loop(&mut model, &data, &cfg).unwrap();
    let losses: Vec<f64> = report.log.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    assert!(losses[9] < losses[0], "{losses:?}");
}
