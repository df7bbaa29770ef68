//! Long-lasting heatwave forecasting: synthetic climate archives, heatwave
//! labels, spectral features, a from-scratch convolutional classifier trained
//! with AMSGrad, and the undersampling / transfer-learning experiment pipeline.

pub mod archive;
pub mod config;
pub mod error;
pub mod features;
pub mod grid;
pub mod labeling;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
