#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use mitoshift::RunConfig;

pub const TINY: &str = "\
image_side = 16
patch_size = 4
embed_dim = 8
num_layers = 1
num_heads = 2
mlp_ratio = 2
prompt_len = 2
lora_rank = 2
epochs = 2
batch_size = 8
learning_rate = 0.01
synth_per_class = 6
synth_angles = 0,15
synth_noise = 1
";

pub fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

/// Relative path → file bytes for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
