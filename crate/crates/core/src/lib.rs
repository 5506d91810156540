//! Unsupervised driving anomaly detection with conditional GANs.
//!
//! The library predicts upcoming multichannel driving signals (vehicle CAN-Bus
//! telemetry plus driver physiology) from past context with a conditional GAN
//! and scores anomalies as the discriminator-output gap between the predicted
//! and the observed window. Four generator/discriminator variants (FC, CNN,
//! LSTM, CNN+LSTM) are benchmarked against fixed-threshold, PCA, GMM and
//! BeatGAN baselines with DET/EER/AUC evaluation on seeded synthetic sessions.

pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod model_io;
pub mod models;
pub mod nn;
pub mod tensor;

pub use error::DaganError;
