//! MetaDG: a sequence-to-sequence graph-convolutional recurrent forecaster
//! for traffic flow that learns its graph on the fly.
//!
//! At every time step the model generates a dynamic node embedding
//! ([`dng`]), enhances it with spatial and temporal cross-step correlations
//! ([`stce`]), qualifies edge reliability into a weight-adjustment matrix
//! ([`dgq`]), and assembles per-node meta-parameters plus a row-normalized
//! dynamic adjacency for the gated graph-convolutional recurrence
//! ([`model`]). Everything runs on a deterministic single-threaded CPU
//! autodiff tape ([`tensor`]), so training runs are reproducible
//! bit-for-bit and every kernel can be gradient-checked against central
//! finite differences in f64.
//!
//! The guide under `book/` walks through the concepts; its code snippets
//! are doc-tested from this crate.
//!
//! ```
//! use metadg::config::ModelConfig;
//! use metadg::data::{make_synthetic, split_and_window};
//! use metadg::model::{ForwardOpts, MetaDg};
//! use metadg::rng::Rng;
//! use metadg::tensor::Graph;
//!
//! let mut cfg = ModelConfig::default();
//! cfg.num_nodes = 4;
//! cfg.horizon_in = 6;
//! cfg.horizon_out = 6;
//! cfg.d_s = 3;
//! cfg.d_tod = 2;
//! cfg.d_dow = 2;
//! cfg.d_c = 2;
//! cfg.d_hidden = 8;
//! cfg.d_attn = 4;
//! cfg.synthetic_steps = 200;
//!
//! let series = make_synthetic(cfg.num_nodes, cfg.synthetic_steps, cfg.seed);
//! let prep = split_and_window(series, &cfg).unwrap();
//! let model = MetaDg::<f32>::new(cfg.clone(), &Rng::new(cfg.seed)).unwrap();
//!
//! let batch = prep.batch::<f32>(&prep.train[..2]);
//! let mut graph = Graph::new();
//! let run = model
//!     .forward(&mut graph, &batch, &prep.normalizer, ForwardOpts::default())
//!     .unwrap();
//! assert_eq!(run.preds_raw.shape(), &[2, 6, 4]);
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dgq;
pub mod dng;
pub mod embeddings;
pub mod error;
pub mod model;
pub mod rng;
pub mod stce;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
