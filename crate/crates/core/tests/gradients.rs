//! Analytic gradients against central finite differences on toy models.

mod common;

use common::{alignment_checks, gnn_check, lora_checks, GradCheck};
use lensgnn::gnn::GnnKind;

fn assert_all(checks: &[GradCheck]) {
    for c in checks {
        println!("{}: {} probes, max relative error {:.2e}", c.component, c.probes, c.max_rel_err);
        assert!(c.passed(), "{} gradient error {:.3e}", c.component, c.max_rel_err);
    }
}

#[test]
fn gnn_layer_gradients() {
    let checks: Vec<GradCheck> = [GnnKind::Gcn, GnnKind::Gat, GnnKind::Gin]
        .into_iter()
        .enumerate()
        .map(|(i, k)| gnn_check(k, 11 + i as u64))
        .collect();
    assert_all(&checks);
}

#[test]
fn projector_and_shared_classifier_gradients() {
    assert_all(&alignment_checks(5));
}

#[test]
fn lora_adapter_gradients() {
    assert_all(&lora_checks(21));
}

#[test]
fn gradients_hold_for_other_seeds() {
    assert_all(&[gnn_check(GnnKind::Gat, 99), gnn_check(GnnKind::Gin, 98)]);
    assert_all(&lora_checks(7));
}
