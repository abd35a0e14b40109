//! Episodic meta-training of the encoder and head, adaptation to the
//! target city, and the ablation and baseline variants built from the same
//! pieces.

mod data;
mod model;
mod train;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use data::{prepare_transfer, CityData, DataConfig, TargetData, TransferData};
pub use model::{Model, ModelVars};
pub use train::{
    adapt_to_split, adapt_to_target, inner_adapt, inner_adapt_with, meta_gradient, meta_step, pooled_step,
    run_variant, target_only_step, train_variant, StepLog, TargetBatch, TrainState,
};

use crate::error::{Error, Result};
use crate::inference_head::LossForm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MamlOrder {
    /// The inner update is treated as constant with respect to the
    /// meta-parameters.
    First,
    /// Differentiates through the inner updates with Hessian-vector
    /// products taken by central differences of support gradients.
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner-loop and adaptation step size.
    pub alpha: f64,
    /// Outer-loop (adaptive-moment) step size.
    pub beta: f64,
    pub task_batch: usize,
    pub lambda: f64,
    pub inner_steps: usize,
    pub meta_steps: usize,
    pub seed: u64,
    pub maml_order: MamlOrder,
    pub k_support: usize,
    pub k_query: usize,
    /// Target-city windows drawn per meta-step for the domain terms.
    pub target_batch: usize,
    pub lr_d: f64,
    pub adapt_steps: usize,
    pub adapt_batch: usize,
    pub loss_form: LossForm,
    /// Steps without a better rolling query loss before training stops.
    pub patience: usize,
    /// Length of the rolling window used for model selection.
    pub selection_window: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.01,
            beta: 0.001,
            task_batch: 5,
            lambda: 1.5,
            inner_steps: 1,
            meta_steps: 300,
            seed: 0,
            maml_order: MamlOrder::First,
            k_support: 8,
            k_query: 8,
            target_batch: 8,
            lr_d: 0.01,
            adapt_steps: 100,
            adapt_batch: 8,
            loss_form: LossForm::Rmse,
            patience: 50,
            selection_window: 10,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |r: f64| r > 0.0 && r.is_finite();
        if !rate(self.alpha) || !rate(self.beta) {
            return Err(Error::contract(format!("rates must be positive (alpha {}, beta {})", self.alpha, self.beta)));
        }
        if !(self.lr_d >= 0.0 && self.lr_d.is_finite()) {
            return Err(Error::contract(format!("discriminator rate {}", self.lr_d)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda {}", self.lambda)));
        }
        if self.task_batch == 0 || self.k_support == 0 || self.k_query == 0 {
            return Err(Error::contract("task_batch, k_support and k_query must be positive"));
        }
        if self.target_batch == 0 || self.adapt_batch == 0 || self.selection_window == 0 {
            return Err(Error::contract("target_batch, adapt_batch and selection_window must be positive"));
        }
        Ok(())
    }
}

/// Training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Meta-training with the domain terms, then adaptation.
    Full,
    /// Meta-training with `λ = 0` and no discriminator, then adaptation.
    NoDa,
    /// Joint training on pooled source windows with the domain terms, then
    /// adaptation.
    NoMeta,
    /// Training on the target adaptation windows alone.
    TargetOnly,
    /// Pooled source pretraining without the domain terms, then
    /// adaptation.
    Finetune,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoDa,
        Variant::NoMeta,
        Variant::TargetOnly,
        Variant::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDa => "no_da",
            Variant::NoMeta => "no_meta",
            Variant::TargetOnly => "target_only",
            Variant::Finetune => "finetune",
        }
    }

    pub fn uses_sources(self) -> bool {
        self != Variant::TargetOnly
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
