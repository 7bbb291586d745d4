//! Toy settings shared by the integration and acceptance tests.

use seqrank::models::{Bert4RecConfig, GruConfig, ModelConfig, NarmConfig, SasRecConfig, TrainConfig};

pub const ITEMS: usize = 20;

pub fn toy_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig::Gru(GruConfig {
            embedding_size: 32,
            hidden_size: 32,
            ..GruConfig::default()
        }),
        ModelConfig::Narm(NarmConfig {
            embedding_size: 32,
            hidden_size: 32,
            ..NarmConfig::default()
        }),
        ModelConfig::Sasrec(SasRecConfig {
            hidden_size: 32,
            max_len: 12,
            dropout: 0.1,
            ..SasRecConfig::default()
        }),
        ModelConfig::Bert4rec(Bert4RecConfig {
            hidden_size: 32,
            max_len: 12,
            dropout: 0.1,
            ..Bert4RecConfig::default()
        }),
    ]
}

pub fn toy_training() -> TrainConfig {
    TrainConfig {
        max_epochs: 50,
        batch_size: 16,
        learning_rate: 5e-3,
        patience: None,
        seed: 7,
        ..TrainConfig::default()
    }
}
