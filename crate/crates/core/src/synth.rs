//! Seeded synthetic datasets sized and shaped like the citation
//! benchmarks, for tests and offline demos.
//!
//! The citation generator draws a planted-partition graph whose nodes
//! carry sparse binary bag-of-words features: each class owns a block of
//! indicative words, nodes activate a handful of words mostly from their
//! class block, and a fraction of observed labels is flipped to keep
//! accuracy ceilings realistic. Everything is a pure function of the
//! spec, including its seed.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, GraphDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CitationSpec {
    pub nodes: usize,
    pub features: usize,
    pub classes: usize,
    pub edges: usize,
    /// Probability that an edge joins two nodes of the same class.
    pub intra_class_fraction: f64,
    /// Width of each class's indicative word block.
    pub words_per_class: usize,
    /// Active (nonzero) words per node.
    pub active_words: usize,
    /// Probability an active word is drawn from the class block rather
    /// than the whole vocabulary.
    pub topic_focus: f64,
    /// Fraction of observed labels flipped to a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl CitationSpec {
    /// Cora-shaped instance: 2708 nodes, 1433 binary features, 7
    /// classes, 5429 undirected edges.
    pub fn cora_scale(seed: u64) -> Self {
        Self {
            nodes: 2708,
            features: 1433,
            classes: 7,
            edges: 5429,
            intra_class_fraction: 0.81,
            words_per_class: 160,
            active_words: 18,
            topic_focus: 0.72,
            label_noise: 0.10,
            seed,
        }
    }

    /// Small instance for fast tests.
    pub fn small(seed: u64) -> Self {
        Self {
            nodes: 120,
            features: 64,
            classes: 3,
            edges: 240,
            intra_class_fraction: 0.85,
            words_per_class: 18,
            active_words: 6,
            topic_focus: 0.8,
            label_noise: 0.05,
            seed,
        }
    }
}

/// Generate a citation-style node-classification graph.
pub fn synthesize_citation(spec: &CitationSpec) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.nodes;

    let true_class: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.classes];
    for (u, &c) in true_class.iter().enumerate() {
        by_class[c].push(u);
    }

    // Planted-partition edges.
    let mut edges = Vec::with_capacity(spec.edges);
    let mut seen = HashSet::with_capacity(spec.edges);
    let max_pairs = n * (n - 1) / 2;
    while edges.len() < spec.edges.min(max_pairs) {
        let u = rng.gen_range(0..n);
        let v = if rng.gen::<f64>() < spec.intra_class_fraction {
            let peers = &by_class[true_class[u]];
            if peers.len() < 2 {
                continue;
            }
            peers[rng.gen_range(0..peers.len())]
        } else {
            rng.gen_range(0..n)
        };
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if seen.insert(key) {
            edges.push(key);
        }
    }

    // Sparse binary bag-of-words features.
    let mut feats = vec![0.0; n * spec.features];
    let block = spec
        .words_per_class
        .min(spec.features / spec.classes.max(1));
    for u in 0..n {
        let c = true_class[u];
        for _ in 0..spec.active_words {
            let w = if rng.gen::<f64>() < spec.topic_focus && block > 0 {
                c * block + rng.gen_range(0..block)
            } else {
                rng.gen_range(0..spec.features)
            };
            feats[u * spec.features + w] = 1.0;
        }
    }

    // Observed labels with noise.
    let labels: Vec<usize> = true_class
        .iter()
        .map(|&c| {
            if spec.classes > 1 && rng.gen::<f64>() < spec.label_noise {
                let shift = rng.gen_range(1..spec.classes);
                (c + shift) % spec.classes
            } else {
                c
            }
        })
        .collect();

    Graph::from_parts(n, &edges, Tensor::matrix(n, spec.features, feats)?, labels)
}

/// Write a graph in the node-dataset text formats. Returns the edge,
/// feature, and label file paths.
pub fn write_node_dataset(
    g: &Graph,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let edge_path = dir.join(format!("{stem}_edges.tsv"));
    let feat_path = dir.join(format!("{stem}_features.csv"));
    let label_path = dir.join(format!("{stem}_labels.txt"));

    let mut ef = fs::File::create(&edge_path)?;
    for &(u, v) in &g.edges {
        writeln!(ef, "{u}\t{v}")?;
    }

    let mut ff = std::io::BufWriter::new(fs::File::create(&feat_path)?);
    let cols = g.features.cols();
    for u in 0..g.num_nodes {
        let row = g.features.row(u);
        let mut line = String::with_capacity(cols * 2);
        for (c, &v) in row.iter().enumerate() {
            if c > 0 {
                line.push(',');
            }
            // Binary features print compactly; anything else round-trips
            // through the shortest f64 representation.
            if v == 0.0 {
                line.push('0');
            } else if v == 1.0 {
                line.push('1');
            } else {
                line.push_str(&format!("{v}"));
            }
        }
        writeln!(ff, "{line}")?;
    }
    ff.flush()?;

    let mut lf = fs::File::create(&label_path)?;
    for &l in &g.labels {
        writeln!(lf, "{l}")?;
    }
    Ok((edge_path, feat_path, label_path))
}

#[derive(Debug, Clone, Copy)]
pub struct GraphSetSpec {
    pub graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for GraphSetSpec {
    fn default() -> Self {
        Self {
            graphs: 40,
            min_nodes: 6,
            max_nodes: 10,
            seed: 0,
        }
    }
}

/// Two-class graph set: paths (label 0) versus stars (label 1), with
/// degree-bucket one-hot features. Mean pooling separates the classes.
pub fn synthesize_graph_set(spec: &GraphSetSpec) -> Result<GraphDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut graphs = Vec::with_capacity(spec.graphs);
    let mut labels = Vec::with_capacity(spec.graphs);
    for i in 0..spec.graphs {
        let n = rng.gen_range(spec.min_nodes..=spec.max_nodes);
        let label = i % 2;
        let edges: Vec<(usize, usize)> = if label == 0 {
            (0..n - 1).map(|u| (u, u + 1)).collect()
        } else {
            (1..n).map(|v| (0, v)).collect()
        };
        let mut deg = vec![0usize; n];
        for &(u, v) in &edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        let mut feats = vec![0.0; n * 4];
        for u in 0..n {
            feats[u * 4 + deg[u].min(3)] = 1.0;
        }
        graphs.push(Graph::from_parts(
            n,
            &edges,
            Tensor::matrix(n, 4, feats)?,
            Vec::new(),
        )?);
        labels.push(label);
    }
    Ok(GraphDataset { graphs, labels })
}

/// Write a graph set plus its manifest; returns the manifest path.
pub fn write_graph_dataset(ds: &GraphDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut mf = fs::File::create(&manifest_path)?;
    writeln!(mf, "edges,features,label")?;
    for (i, (g, &label)) in ds.graphs.iter().zip(&ds.labels).enumerate() {
        let stem = format!("g{i}");
        let (e, f, _) = write_node_dataset(g, dir, &stem)?;
        writeln!(
            mf,
            "{},{},{label}",
            e.file_name().unwrap().to_string_lossy(),
            f.file_name().unwrap().to_string_lossy()
        )?;
    }
    Ok(manifest_path)
}
