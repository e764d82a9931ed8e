#![allow(dead_code)]

use std::sync::OnceLock;

use rolelora::checkpoint::Checkpoint;
use rolelora_core::backbone::BackboneConfig;
use rolelora_core::config::Config;
use rolelora_core::dynlora::BlockLayout;
use rolelora_core::pipeline::{pretune, Pretrained};

pub fn small_config() -> Config {
    let mut c = Config::reference();
    c.layout = BlockLayout::new(3, 2, 2.0).unwrap();
    c.backbone = BackboneConfig { d_model: 8, epochs: 3, ..BackboneConfig::default() };
    c.corpus.sequences_per_role = 40;
    c.corpus.sequence_length = 8;
    c.adapter.epochs = 4;
    c
}

pub fn small() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| pretune(&small_config()).unwrap())
}

pub fn small_checkpoint() -> Checkpoint {
    let p = small();
    Checkpoint { state: p.state.clone(), corpora: p.corpora.clone() }
}
