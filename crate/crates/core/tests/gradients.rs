//! Analytic gradients against central finite differences.

mod common;

use common::grad_suite;

#[test]
fn elementwise_and_linear_ops() {
    grad_suite::elementwise_and_linear_ops();
}

#[test]
fn structural_ops() {
    grad_suite::structural_ops();
}

#[test]
fn reductions_and_normalisations() {
    grad_suite::reductions_and_normalisations();
}

#[test]
fn model_layers() {
    grad_suite::model_layers();
}

#[test]
fn heads_and_losses() {
    grad_suite::heads_and_losses();
}

#[test]
fn end_to_end_classification_loss() {
    grad_suite::end_to_end_classification_loss();
}

#[test]
fn end_to_end_ranking_loss() {
    grad_suite::end_to_end_ranking_loss();
}

#[test]
fn end_to_end_ablations() {
    grad_suite::end_to_end_ablations();
}
