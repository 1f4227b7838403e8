//! Conditional GAN for ERG synthesis and the two transformer classifiers.

pub mod cgan;
pub mod classifier;
pub mod tst;
pub mod vit;

pub use cgan::{
    condition_fidelity, train_gan, train_gan_with, trained_conditions, CentroidProbe,
    ConditionCode, ConstantProbe, FidelityReport, GanCheckpoint, GanConfig, GanError, LatentSeed,
    LossCurves, Probe,
};
pub use classifier::{Classifier, ClassifierError, ClassifierSpec, History, TrainConfig};
pub use tst::{tst_train, Positional, TstConfig, TstModel};
pub use vit::{patchify, unpatchify, vit_train, PatchConfig, VitConfig, VitModel};
