//! Write a small synthetic citation dataset plus a ready-to-run config.
//!
//! Usage: cargo run --example make_demo_data -- <output-dir>

use std::fs;
use std::path::PathBuf;

use qmpnn::synth::{synthesize_citation, write_node_dataset, CitationSpec};

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "demo-data".to_string())
        .into();
    let g = synthesize_citation(&CitationSpec::small(7)).unwrap();
    let (e, f, l) = write_node_dataset(&g, &dir, "demo").unwrap();
    let config = format!(
        r#"{{
  "dataset": {{
    "name": "demo",
    "edges": "{}",
    "features": "{}",
    "labels": "{}"
  }},
  "task": "node",
  "model": {{ "kind": "gcn", "arithmetic": "quaternion", "hidden": 16 }},
  "train": {{ "max_epochs": 200, "patience": 50, "dropout": 0.5 }},
  "split": {{ "train": 0.8, "val": 0.1, "test": 0.1, "seed": 0 }},
  "seeds": [1, 2, 3, 4, 5],
  "out_dir": "out"
}}
"#,
        e.file_name().unwrap().to_string_lossy(),
        f.file_name().unwrap().to_string_lossy(),
        l.file_name().unwrap().to_string_lossy(),
    );
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, config).unwrap();
    println!("wrote dataset and {}", cfg_path.display());
}
