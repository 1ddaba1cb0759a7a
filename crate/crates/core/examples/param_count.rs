//! Parameter accounting for the standard configurations.

use tskip::model::{count_params, ModelConfig, Targets};

fn main() {
    let uni = ModelConfig::default();
    let bi = ModelConfig::bi_avg_max();
    let both = ModelConfig {
        targets: Targets::Both,
        ..ModelConfig::default()
    };
    for (name, cfg) in [
        ("uni, plain", &uni),
        ("bi 300+300, avg_max", &bi),
        ("uni, two decoders", &both),
    ] {
        let c = count_params(cfg);
        println!(
            "{name:<22} {c}  total={}  sentence_dim={}",
            c.total(),
            cfg.sentence_dim()
        );
    }
}
