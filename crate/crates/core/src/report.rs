//! Per-epoch metric records produced by the training loops.
//!
//! Each record type fixes its column order through [`MetricRow::COLUMNS`];
//! writers must emit values in exactly that order.

use alloc::vec::Vec;

pub trait MetricRow {
    const COLUMNS: &'static [&'static str];
    fn values(&self) -> Vec<f64>;
}

/// One epoch of supervised (ERM or self-adaptive) training. Weight means are
/// NaN when the corresponding sample group is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub noisy_train_acc: f64,
    pub clean_train_acc: f64,
    pub noisy_val_acc: f64,
    pub clean_val_acc: f64,
    pub loss: f64,
    pub recovery_acc: f64,
    pub mean_clean_weight: f64,
    pub mean_corrupt_weight: f64,
}

impl MetricRow for SupervisedEpoch {
    const COLUMNS: &'static [&'static str] = &[
        "epoch",
        "lr",
        "noisy_train_acc",
        "clean_train_acc",
        "noisy_val_acc",
        "clean_val_acc",
        "loss",
        "recovery_acc",
        "mean_clean_weight",
        "mean_corrupt_weight",
    ];

    fn values(&self) -> Vec<f64> {
        alloc::vec![
            self.epoch as f64,
            self.lr,
            self.noisy_train_acc,
            self.clean_train_acc,
            self.noisy_val_acc,
            self.clean_val_acc,
            self.loss,
            self.recovery_acc,
            self.mean_clean_weight,
            self.mean_corrupt_weight,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub clean_val_acc: f64,
    pub mean_abstain_prob: f64,
}

impl MetricRow for SelectiveEpoch {
    const COLUMNS: &'static [&'static str] =
        &["epoch", "lr", "loss", "clean_val_acc", "mean_abstain_prob"];

    fn values(&self) -> Vec<f64> {
        alloc::vec![
            self.epoch as f64,
            self.lr,
            self.loss,
            self.clean_val_acc,
            self.mean_abstain_prob
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslEpoch {
    pub epoch: usize,
    pub ssl_loss: f64,
    pub collapse_metric: f64,
    pub online_probe_acc: f64,
}

impl MetricRow for SslEpoch {
    const COLUMNS: &'static [&'static str] =
        &["epoch", "ssl_loss", "collapse_metric", "online_probe_acc"];

    fn values(&self) -> Vec<f64> {
        alloc::vec![
            self.epoch as f64,
            self.ssl_loss,
            self.collapse_metric,
            self.online_probe_acc
        ]
    }
}
