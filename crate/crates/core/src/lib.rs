//! Full-catalog versus sampled target-set evaluation of sequential item
//! recommenders.
//!
//! The crate covers the whole pipeline: ingesting interaction logs and
//! building leave-one-out splits ([`dataset`]), HR@k / NDCG@k
//! ([`metrics`]), full, uniform and popularity target sets
//! ([`targetset`]), model rankings with Kendall's Tau-a ([`ranking`]), a
//! toy model zoo trained with a small autodiff engine ([`models`],
//! [`autodiff`]) and the experiment harness behind the `seqrank` binary
//! ([`harness`]).

pub mod autodiff;
pub mod dataset;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod ranking;
pub mod rng;
pub mod targetset;
