//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenprint::tensorio::TokenId;
use tokenprint::toylm::{Example, ToyLM, ToyLMConfig};

fn small_config() -> ToyLMConfig {
    ToyLMConfig {
        vocab_size: 32,
        reserved_count: 4,
        hidden_dim: 8,
        layers: 1,
        heads: 2,
        context_len: 24,
        tied_unembedding: false,
    }
}

fn batch(rng: &mut ChaCha8Rng) -> Vec<Example> {
    let mut out = Vec::new();
    for len in [7, 11] {
        let toks: Vec<TokenId> = (0..len).map(|_| TokenId(rng.random_range(0..32))).collect();
        out.push(Example::causal(toks));
    }
    let prompt: Vec<TokenId> = (0..5).map(|_| TokenId(rng.random_range(0..32))).collect();
    let target: Vec<TokenId> = (0..3).map(|_| TokenId(rng.random_range(0..32))).collect();
    out.push(Example::completion(&prompt, &target));
    out
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs() / 1e-8
    } else {
        (a - b).abs() / scale
    }
}

fn check(cfg: ToyLMConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyLM::new(cfg, seed).unwrap();
    // Perturb every parameter off its initial value.
    for p in model.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let data = batch(&mut rng);
    let (_, grad) = model.forward_loss(&data).unwrap();
    let n = model.parameter_count();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.random_range(0..n);
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let plus = model.loss(&data).unwrap();
        model.params_mut()[i] = orig - h;
        let minus = model.loss(&data).unwrap();
        model.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(grad[i], numeric);
        assert!(
            err <= 1e-4,
            "param {i}: analytic {:e} numeric {numeric:e} rel {err:e}",
            grad[i]
        );
        worst = worst.max(err);
    }
    worst
}

#[test]
fn one_layer_hidden_8_matches_finite_differences() {
    let worst = check(small_config(), 1);
    println!("worst relative error {worst:e}");
}

#[test]
fn tied_unembedding_gradients() {
    let cfg = ToyLMConfig {
        tied_unembedding: true,
        ..small_config()
    };
    check(cfg, 2);
}

#[test]
fn two_layer_gradients() {
    let cfg = ToyLMConfig {
        layers: 2,
        ..small_config()
    };
    check(cfg, 3);
}

/// Every parameter group, not only randomly hit coordinates.
#[test]
fn each_tensor_has_a_checked_coordinate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = ToyLM::new(small_config(), 4).unwrap();
    for p in model.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let data = batch(&mut rng);
    let (_, grad) = model.forward_loss(&data).unwrap();
    let tensors = model.layout().tensors.clone();
    for spec in tensors {
        // Largest-gradient coordinate of the tensor.
        let i = spec
            .range()
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
            .unwrap();
        let orig = model.params()[i];
        model.params_mut()[i] = orig + 1e-5;
        let plus = model.loss(&data).unwrap();
        model.params_mut()[i] = orig - 1e-5;
        let minus = model.loss(&data).unwrap();
        model.params_mut()[i] = orig;
        let numeric = (plus - minus) / 2e-5;
        let err = relative_error(grad[i], numeric);
        assert!(
            err <= 1e-4,
            "{}: analytic {:e} numeric {numeric:e}",
            spec.name,
            grad[i]
        );
    }
}
