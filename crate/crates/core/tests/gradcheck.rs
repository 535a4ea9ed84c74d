//! Finite-difference gradient suites, a few seeds per scope.

use regla::verify::{self, Scope, GRAD_TOL};

fn run(scope: Scope, seeds: usize) -> Vec<String> {
    let reports = verify::gradcheck(scope, 100, seeds).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        assert_eq!(r.seeds, seeds);
        assert!(
            r.max_rel_err <= GRAD_TOL,
            "{}: {:.3e} at seed {}",
            r.name,
            r.max_rel_err,
            r.worst_seed
        );
    }
    reports.into_iter().map(|r| r.name).collect()
}

#[test]
fn primitives() {
    let names = run(Scope::Primitives, 3);
    for op in [
        "matmul",
        "gelu",
        "softmax_rows",
        "layer_norm",
        "relu_linear_attention",
        "cosine_loss",
    ] {
        assert!(names.iter().any(|n| n.starts_with(op)), "{op} not covered");
    }
}

#[test]
fn attention_gates() {
    assert_eq!(
        run(Scope::Attention, 3),
        ["rgma/none", "rgma/decoupled", "rgma/full"]
    );
}

#[test]
fn blocks() {
    let names = run(Scope::Blocks, 3);
    for b in [
        "elrf",
        "ffn",
        "mib",
        "cpe",
        "post_attention/conv3",
        "rgma_block",
    ] {
        assert!(names.iter().any(|n| n == b), "{b} not covered");
    }
}

#[test]
fn distillation_loss() {
    assert_eq!(run(Scope::Distill, 3).len(), 4);
}
