use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stageprompt_core::adapter::count_trainable;
use stageprompt_core::backbone::{toy_mae_pretrain, Decoder, MaeConfig};
use stageprompt_core::data::gen_synthetic;
use stageprompt_core::model::{count_parameters, trainable_parameters};
use stageprompt_core::nn::{Graph, Parameterized, Trainable};
use stageprompt_core::{
    AdapterConfig, AdapterMode, BackboneConfig, PromptConfig, Regime, Segmenter, SyntheticSpec,
    Task,
};

fn model(mode: Option<AdapterMode>) -> Segmenter {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = mode.map(|mode| AdapterConfig {
        mode,
        ..AdapterConfig::default()
    });
    Segmenter::new(
        BackboneConfig::toy_hiera((32, 32)),
        cfg.as_ref(),
        &PromptConfig::default(),
        &mut rng,
    )
    .unwrap()
}

#[test]
fn adapter_parameter_counts_match_closed_form() {
    // Prompt width 32, bottleneck 16, stage widths 32, 64, 128, 256.
    let dims = [32usize, 64, 128, 256];
    let (d, h) = (32, 16);
    let per_stage: usize = dims.iter().map(|&s| d * h + h + h * s + s).sum();
    let shared = d * h + h + h * h + h + dims.iter().map(|&s| h * s + s).sum::<usize>();

    let m = model(Some(AdapterMode::PerStage));
    assert_eq!(count_trainable(m.adapters.as_ref().unwrap()), per_stage);
    let m = model(Some(AdapterMode::SharedSingle));
    assert_eq!(count_trainable(m.adapters.as_ref().unwrap()), shared);
    assert!(per_stage > shared);
}

#[test]
fn regimes_select_disjoint_groups() {
    let m = model(Some(AdapterMode::PerStage));
    let adapter = trainable_parameters(&m, Regime::Sam2Adapter);
    assert!(adapter.iter().all(|n| !n.starts_with("encoder.")));
    assert!(adapter.iter().any(|n| n.starts_with("adapter.")));
    assert!(adapter.iter().any(|n| n.starts_with("decoder.")));
    let full = trainable_parameters(&m, Regime::Full);
    assert!(full.is_superset(&adapter));
    assert_eq!(count_parameters(&m, &full), m.num_parameters());

    let plain = model(None);
    let dec = trainable_parameters(&plain, Regime::DecoderOnly);
    assert!(dec.iter().all(|n| n.starts_with("decoder.")));
}

/// `Σ c ⊙ decoder(feats)` evaluated without recording gradients.
fn objective(dec: &Decoder, cfg: &BackboneConfig, feats: &[Array2<f64>], c: &Array2<f64>) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<_> = feats.iter().map(|f| g.constant(f.clone())).collect();
    let y = dec.forward(&mut g, &vars, cfg);
    (g.value(y) * c).sum()
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = BackboneConfig {
        decoder_dim: 4,
        ..BackboneConfig::toy_hiera((32, 32))
    };
    let dec = Decoder::new(&cfg, &mut rng);
    let feats: Vec<Array2<f64>> = (1..=4)
        .map(|s| {
            let (h, w) = cfg.stage_grid(s);
            Array2::from_shape_fn((h * w, cfg.stage_dims[s - 1]), |_| {
                rng.random_range(-1.0..1.0)
            })
        })
        .collect();
    let c = Array2::from_shape_fn((32 * 32, 1), |_| rng.random_range(-1.0..1.0));

    let mut g = Graph::new(Trainable::Everything);
    let vars: Vec<_> = feats.iter().map(|f| g.input(f.clone(), false)).collect();
    let y = dec.forward(&mut g, &vars, &cfg);
    let value = (g.value(y) * &c).sum();
    let loss = g.loss(y, value, c.clone());
    let grads = g.backward(loss);

    let h = 1e-5;
    let mut names = BTreeSet::new();
    dec.visit(&mut |n, _| {
        names.insert(n.to_string());
    });
    for name in names {
        let analytic = grads.params[&name].clone();
        for idx in (0..analytic.len()).step_by(7) {
            let shifted = |delta: f64| {
                let mut d = dec.clone();
                d.visit_mut(&mut |n, a| {
                    if n == name {
                        *a.iter_mut().nth(idx).unwrap() += delta;
                    }
                });
                objective(&d, &cfg, &feats, &c)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(rel < 1e-4, "{name}[{idx}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn masked_pretraining_halves_reconstruction_loss() {
    let ds =
        gen_synthetic(&SyntheticSpec::new(Task::Camouflage, 8, 5).with_resolution(32, 32)).unwrap();
    let mae = MaeConfig {
        steps: 150,
        ..MaeConfig::default()
    };
    let out = toy_mae_pretrain(&BackboneConfig::toy_hiera((32, 32)), &ds, &mae).unwrap();
    assert_eq!(out.losses.len(), 150);
    let ratio = out.final_loss / out.initial_loss;
    assert!(ratio < 0.5, "loss ratio {ratio}");
}

#[test]
fn synthetic_data_is_seed_deterministic() {
    let spec = SyntheticSpec::new(Task::Shadow, 4, 9).with_resolution(24, 24);
    let a = gen_synthetic(&spec).unwrap();
    let b = gen_synthetic(&spec).unwrap();
    for (x, y) in a.samples().iter().zip(b.samples()) {
        assert_eq!(x.id, y.id);
        assert!(x.image == y.image && x.mask == y.mask);
    }
    let c =
        gen_synthetic(&SyntheticSpec::new(Task::Shadow, 4, 10).with_resolution(24, 24)).unwrap();
    assert!(a.samples()[0].image != c.samples()[0].image);
}

#[test]
fn fresh_adapters_leave_the_decoder_output_unchanged() {
    let with = model(Some(AdapterMode::PerStage));
    let mut without = with.clone();
    without.adapters = None;
    without.prompt = None;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = ndarray::Array3::from_shape_fn((32, 32, 3), |_| rng.random::<f64>());
    assert_eq!(
        with.predict_logits(&img).unwrap(),
        without.predict_logits(&img).unwrap()
    );
}
