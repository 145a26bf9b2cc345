mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::gradcheck::{self, rel_err, STEP};
use tabdiff_core::data::{build_inference_sequence, FeatureId, FeatureRegistry, Standardization};
use tabdiff_core::{Binder, Graph, Model, ModelConfig, ParamId, ParamValues, Preset};

#[test]
fn every_op_matches_finite_differences() {
    for (name, report) in gradcheck::all_ops(100, 11) {
        assert_eq!(report.checked, 100);
        assert!(report.max_rel_err < 1e-4, "{name}: relative error {}", report.max_rel_err);
    }
}

#[test]
fn composite_attention_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = gradcheck::random_values(24, -1.0, 1.0, &mut rng);
    let k = gradcheck::random_values(40, -1.0, 1.0, &mut rng);
    let v = gradcheck::random_values(40, -1.0, 1.0, &mut rng);
    let inputs = [(vec![3, 8], q), (vec![5, 8], k), (vec![5, 8], v)];
    let report = gradcheck::check(&inputs, 100, 5, |g, x| {
        let kt = g.transpose(x[1])?;
        let s = g.matmul(x[0], kt)?;
        let s = g.scale(s, 0.35)?;
        let s = g.masked_fill(s, &[false, false, false, true, true], -1e9)?;
        let w = g.softmax(s)?;
        let o = g.matmul_unordered(w, x[2])?;
        let o = g.layer_norm(o)?;
        g.gelu(o)
    });
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
}

fn small_model() -> Model {
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    let stats = vec![Standardization { mean: 0.0, scale: 1.0 }; 3];
    let registry = FeatureRegistry::new(names, stats).unwrap();
    let config = ModelConfig {
        diffusion_steps: 12,
        ..ModelConfig::preset(Preset::Housing)
    };
    Model::new(config, registry, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

/// Loss at a fixed step and noise so the objective is deterministic.
fn fixed_loss(model: &Model, values: &ParamValues) -> (f64, Vec<(ParamId, Vec<f64>)>) {
    let reg = model.registry();
    let seq = build_inference_sequence(&[(FeatureId(1), 0.7), (FeatureId(2), -1.3)], FeatureId(0), reg, 5).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(values, true);
    let cond = model.encode(&mut g, &mut b, &seq).unwrap();
    let loss = model
        .head()
        .loss_at(&mut g, &mut b, model.schedule(), 0.4, cond, 7, -0.9)
        .unwrap();
    let value = g.value(loss)[0];
    let grads = g.backward(loss).unwrap();
    let per_param = b
        .bound()
        .map(|(id, var)| (id, grads.get(var).map_or_else(Vec::new, <[f64]>::to_vec)))
        .collect();
    (value, per_param)
}

#[test]
fn end_to_end_loss_gradient_reaches_every_parameter() {
    let model = small_model();
    let values = model.values();
    let (_, grads) = fixed_loss(&model, &values);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for (id, analytic) in &grads {
        if analytic.is_empty() {
            continue;
        }
        for _ in 0..4 {
            let i = rand::Rng::random_range(&mut rng, 0..analytic.len());
            let mut plus = values.clone();
            plus.get_mut(*id)[i] += STEP;
            let mut minus = values.clone();
            minus.get_mut(*id)[i] -= STEP;
            let numeric = (fixed_loss(&model, &plus).0 - fixed_loss(&model, &minus).0) / (2.0 * STEP);
            let err = rel_err(analytic[i], numeric);
            assert!(err < 1e-4, "{}[{i}]: analytic {} numeric {numeric}", model.params().name(*id), analytic[i]);
            worst = worst.max(err);
        }
    }
    // every tensor, including the embedding rows in use, is bound
    assert_eq!(grads.len(), model.params().len());
}
