#![allow(dead_code)]

use std::path::Path;

use clbd_service::config::Config;
use clbd_service::stages;

/// Five scripted sentence models with distinctive names, a stub encoder and
/// an echo generator, over the 30-paper synthetic corpus.
pub const MODELS: [&str; 5] = ["model-alpha", "model-bravo", "model-charlie", "model-delta", "model-echo"];

pub fn config_text(extra: &str) -> String {
    let mut s = String::from("seed = 17\nworkdir = \"run\"\n\n[data]\nsynthetic_papers = 30\n\n");
    for (i, m) in MODELS.iter().enumerate() {
        s.push_str(&format!(
            "[[models]]\nname = \"{m}\"\nbackend = \"scripted\"\noptions = {{ outputs = [{{ text = \"we propose idea number {i} .\", score = 1.0 }}] }}\n\n"
        ));
    }
    s.push_str("[[models]]\nname = \"encoder-stub\"\nbackend = \"stub-biencoder\"\n\n");
    s.push_str("[[models]]\nname = \"echo-gen\"\nbackend = \"echo\"\n\n");
    s.push_str(extra);
    s
}

pub fn write_config(dir: &Path, extra: &str) -> Config {
    let path = dir.join("clbd.toml");
    std::fs::write(&path, config_text(extra)).unwrap();
    Config::load(&path).unwrap()
}

/// Runs the stages the server needs: data, graph and indexes.
pub fn prepared(dir: &Path, extra: &str) -> Config {
    let cfg = write_config(dir, extra);
    stages::build_data(&cfg).unwrap();
    stages::build_kg(&cfg).unwrap();
    stages::build_index(&cfg).unwrap();
    cfg
}
