//! Graph ingestion, quaternion-compatible padding, splits, and negative
//! edge sampling.
//!
//! CSR rows keep neighbors in edge-insertion order rather than sorted by
//! column. Permuting a graph therefore preserves each row's relative
//! neighbor order, which makes every layer's per-node reduction order
//! permutation-invariant — the equivariance tests compare outputs
//! bitwise.
//!
//! File formats:
//! - edge file: UTF-8 text, one `src<TAB>dst` pair of 0-based ids per
//!   line, `#` comments and blank lines ignored;
//! - feature file: CSV, row r = node r, real values (NaN/Inf rejected);
//! - label file: one integer per line;
//! - graph-classification manifest: CSV with header
//!   `edges,features,label`, paths relative to the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparse structure in compressed-row form. Values, when present, are
/// stored separately so the same structure can back several value sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub num_rows: usize,
    pub num_cols: usize,
    /// `num_rows + 1` offsets into `cols`.
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Csr {
    /// Build from directed pairs, bucketing stably by source row and
    /// keeping first-seen order within each row. Duplicate pairs are
    /// dropped.
    pub fn from_edge_pairs(num_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in pairs {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Invalid(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if seen.insert((u, v)) {
                per_row[u].push(v);
            }
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut cols = Vec::with_capacity(seen.len());
        offsets.push(0);
        for row in per_row {
            cols.extend(row);
            offsets.push(cols.len());
        }
        Ok(Self {
            num_rows: num_nodes,
            num_cols: num_nodes,
            offsets,
            cols,
        })
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, u: usize) -> &[usize] {
        &self.cols[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    /// Same structure with a self-loop appended to the end of every row
    /// that lacks one.
    pub fn with_self_loops(&self) -> Csr {
        let mut offsets = Vec::with_capacity(self.num_rows + 1);
        let mut cols = Vec::with_capacity(self.nnz() + self.num_rows);
        offsets.push(0);
        for u in 0..self.num_rows {
            let row = self.row(u);
            cols.extend_from_slice(row);
            if !row.contains(&u) {
                cols.push(u);
            }
            offsets.push(cols.len());
        }
        Csr {
            num_rows: self.num_rows,
            num_cols: self.num_cols,
            offsets,
            cols,
        }
    }
}

/// Train/validation/test membership per item.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Split fractions plus the shuffle seed; fractions must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let s = Self {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|&f| f < 0.0 || f > 1.0) {
            return Err(Error::Invalid(format!(
                "split fractions out of range: {fr:?}"
            )));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub num_nodes: usize,
    /// Symmetrized adjacency, both directions present, no self loops
    /// unless the input contained them.
    pub csr: Csr,
    /// Unique undirected pairs `(min, max)` in first-seen order; self
    /// loops are excluded. Used for edge splits and negative sampling.
    pub edges: Vec<(usize, usize)>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Optional per-edge features, parallel to `edges`. Carried for
    /// edge-featured datasets; none of the three layer kinds consume
    /// them.
    pub edge_values: Option<Vec<f64>>,
}

impl Graph {
    pub fn from_parts(
        num_nodes: usize,
        undirected_edges: &[(usize, usize)],
        features: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        if !labels.is_empty() && labels.len() != num_nodes {
            return Err(Error::Invalid(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        let mut directed = Vec::with_capacity(undirected_edges.len() * 2);
        let mut edge_set = HashSet::new();
        let mut edges = Vec::new();
        for &(u, v) in undirected_edges {
            directed.push((u, v));
            if u != v {
                directed.push((v, u));
                let key = (u.min(v), u.max(v));
                if edge_set.insert(key) {
                    edges.push(key);
                }
            }
        }
        let csr = Csr::from_edge_pairs(num_nodes, &directed)?;
        Ok(Self {
            num_nodes,
            csr,
            edges,
            features,
            labels,
            edge_values: None,
        })
    }

    /// Attach per-edge features, parallel to the undirected edge list.
    pub fn set_edge_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.edges.len() {
            return Err(Error::Shape(format!(
                "{} edge values for {} edges",
                values.len(),
                self.edges.len()
            )));
        }
        self.edge_values = Some(values);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Relabel nodes: node `u` becomes `perm[u]`. Edge insertion order is
    /// preserved, so per-row neighbor order (and therefore every layer's
    /// reduction order) is carried over exactly.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Invalid("permutation length mismatch".into()));
        }
        let mut check = vec![false; self.num_nodes];
        for &p in perm {
            if p >= self.num_nodes || check[p] {
                return Err(Error::Invalid("not a permutation".into()));
            }
            check[p] = true;
        }
        let mut directed = Vec::with_capacity(self.csr.nnz());
        for u in 0..self.num_nodes {
            for &v in self.csr.row(u) {
                directed.push((perm[u], perm[v]));
            }
        }
        let csr = Csr::from_edge_pairs(self.num_nodes, &directed)?;
        let f = self.features.cols();
        let mut fdata = vec![0.0; self.num_nodes * f];
        for u in 0..self.num_nodes {
            fdata[perm[u] * f..(perm[u] + 1) * f].copy_from_slice(self.features.row(u));
        }
        let mut labels = vec![0; self.labels.len()];
        for (u, &l) in self.labels.iter().enumerate() {
            labels[perm[u]] = l;
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (perm[u], perm[v]);
                (a.min(b), a.max(b))
            })
            .collect();
        Ok(Graph {
            num_nodes: self.num_nodes,
            csr,
            edges,
            features: Tensor::matrix(self.num_nodes, f, fdata)?,
            labels,
            edge_values: self.edge_values.clone(),
        })
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_edge_file(path: &Path, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split('\t');
        let (a, b) = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse_err(path, line_no, "expected `src<TAB>dst`")),
        };
        let u: usize = a
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad node id `{a}`")))?;
        let v: usize = b
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad node id `{b}`")))?;
        if u >= num_nodes || v >= num_nodes {
            return Err(parse_err(
                path,
                line_no,
                format!("node id out of range (graph has {num_nodes} nodes)"),
            ));
        }
        pairs.push((u, v));
    }
    Ok(pairs)
}

fn read_feature_file(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad feature value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, "NaN/Inf feature rejected"));
            }
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {w} columns, got {}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "empty feature file"));
    }
    let n = rows.len();
    let f = width.unwrap();
    Tensor::matrix(n, f, rows.into_iter().flatten().collect())
}

fn read_label_file(path: &Path, num_nodes: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let l: usize = line
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad label `{line}`")))?;
        labels.push(l);
    }
    if labels.len() != num_nodes {
        return Err(parse_err(
            path,
            labels.len() + 1,
            format!("{} labels for {num_nodes} nodes", labels.len()),
        ));
    }
    Ok(labels)
}

/// Load a node-level graph from an edge list, a feature CSV, and a label
/// file. The node count is the feature row count; the adjacency is
/// symmetrized.
pub fn load_graph(edge_file: &Path, feature_file: &Path, label_file: &Path) -> Result<Graph> {
    let features = read_feature_file(feature_file)?;
    let num_nodes = features.rows();
    let pairs = read_edge_file(edge_file, num_nodes)?;
    let labels = read_label_file(label_file, num_nodes)?;
    Graph::from_parts(num_nodes, &pairs, features, labels)
}

/// Load a graph without labels (graph-classification members).
pub fn load_graph_unlabeled(edge_file: &Path, feature_file: &Path) -> Result<Graph> {
    let features = read_feature_file(feature_file)?;
    let num_nodes = features.rows();
    let pairs = read_edge_file(edge_file, num_nodes)?;
    Graph::from_parts(num_nodes, &pairs, features, Vec::new())
}

/// Pad the feature width to the next multiple of 4 — each padded column
/// holds that node's mean over its original features — and pad the class
/// count to the next multiple of 4 with dummy classes no node carries.
/// Returns the padded graph and the padded class count.
pub fn pad_for_quaternion(g: &Graph, num_classes: usize) -> (Graph, usize) {
    let padded_classes = num_classes.div_ceil(4) * 4;
    let f = g.feature_dim();
    let padded_f = f.div_ceil(4) * 4;
    if padded_f == f {
        return (g.clone(), padded_classes.max(num_classes));
    }
    let n = g.num_nodes;
    let mut data = vec![0.0; n * padded_f];
    for u in 0..n {
        let row = g.features.row(u);
        let mean: f64 = row.iter().sum::<f64>() / f as f64;
        data[u * padded_f..u * padded_f + f].copy_from_slice(row);
        for pad in data[u * padded_f + f..(u + 1) * padded_f].iter_mut() {
            *pad = mean;
        }
    }
    let padded = Graph {
        num_nodes: n,
        csr: g.csr.clone(),
        edges: g.edges.clone(),
        features: Tensor::matrix(n, padded_f, data).expect("padded shape"),
        labels: g.labels.clone(),
        edge_values: g.edge_values.clone(),
    };
    (padded, padded_classes)
}

/// Values of `D̃^{−1/2} (A + I) D̃^{−1/2}` over the self-loop structure;
/// degrees count the added loops.
pub fn normalize_adjacency(g: &Graph) -> (Arc<Csr>, Tensor) {
    let with_loops = g.csr.with_self_loops();
    let inv_sqrt: Vec<f64> = (0..g.num_nodes)
        .map(|u| 1.0 / (with_loops.degree(u) as f64).sqrt())
        .collect();
    let mut values = Vec::with_capacity(with_loops.nnz());
    for u in 0..g.num_nodes {
        for &v in with_loops.row(u) {
            values.push(inv_sqrt[u] * inv_sqrt[v]);
        }
    }
    let nnz = values.len();
    (
        Arc::new(with_loops),
        Tensor::matrix(nnz, 1, values).expect("value shape"),
    )
}

/// Per-edge weights `1/deg(u)` for neighbor-mean aggregation over the
/// raw adjacency. Isolated nodes have no entries and aggregate to zero.
pub fn mean_aggregation_values(csr: &Csr) -> Tensor {
    let mut values = Vec::with_capacity(csr.nnz());
    for u in 0..csr.num_rows {
        let deg = csr.degree(u);
        if deg > 0 {
            let inv = 1.0 / deg as f64;
            values.extend(std::iter::repeat(inv).take(deg));
        }
    }
    if values.is_empty() {
        // Zero-edge graphs are legal; spmm over them needs a 0-row value
        // tensor, which Tensor cannot represent, so callers guard on nnz.
        return Tensor::zeros(1, 1);
    }
    let nnz = values.len();
    Tensor::matrix(nnz, 1, values).expect("value shape")
}

/// Deterministic shuffle-and-partition. Validation and test counts are
/// floored; the remainder goes to train.
pub fn make_splits(num_items: usize, spec: &SplitSpec) -> Result<SplitMasks> {
    spec.validate()?;
    if num_items < 3 {
        return Err(Error::Invalid(format!(
            "cannot split {num_items} items into three sets"
        )));
    }
    let mut order: Vec<usize> = (0..num_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let val_count = (spec.val_frac * num_items as f64).floor() as usize;
    let test_count = (spec.test_frac * num_items as f64).floor() as usize;
    let train_count = num_items - val_count - test_count;

    let mut masks = SplitMasks {
        train: vec![false; num_items],
        val: vec![false; num_items],
        test: vec![false; num_items],
    };
    for (pos, &item) in order.iter().enumerate() {
        if pos < train_count {
            masks.train[item] = true;
        } else if pos < train_count + val_count {
            masks.val[item] = true;
        } else {
            masks.test[item] = true;
        }
    }
    Ok(masks)
}

/// Uniformly sample `count` distinct node pairs absent from the edge set,
/// excluding self loops.
pub fn sample_negative_edges(g: &Graph, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n = g.num_nodes;
    let total_pairs = n * (n - 1) / 2;
    let existing: HashSet<(usize, usize)> = g.edges.iter().copied().collect();
    let available = total_pairs - existing.len();
    if count > available {
        return Err(Error::Infeasible(format!(
            "requested {count} negative edges but only {available} non-edges exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(count);
    if available <= count.saturating_mul(2) || n <= 64 {
        // Dense regime: enumerate non-edges and take a shuffled prefix.
        let mut non_edges = Vec::with_capacity(available);
        for u in 0..n {
            for v in u + 1..n {
                if !existing.contains(&(u, v)) {
                    non_edges.push((u, v));
                }
            }
        }
        non_edges.shuffle(&mut rng);
        picked.extend(non_edges.into_iter().take(count));
    } else {
        let mut chosen = HashSet::with_capacity(count);
        while picked.len() < count {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if existing.contains(&key) || !chosen.insert(key) {
                continue;
            }
            picked.push(key);
        }
    }
    Ok(picked)
}

/// A set of graphs with graph-level labels.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub labels: Vec<usize>,
}

impl GraphDataset {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// Load a graph-classification dataset from a manifest CSV with header
/// `edges,features,label`. File paths are resolved relative to the
/// manifest's directory.
pub fn load_dataset_manifest(manifest: &Path) -> Result<GraphDataset> {
    let base = manifest.parent().map(PathBuf::from).unwrap_or_default();
    let text = fs::read_to_string(manifest)?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(manifest, 1, "empty manifest"))?
        .1
        .trim();
    if header != "edges,features,label" {
        return Err(parse_err(
            manifest,
            1,
            format!("expected header `edges,features,label`, got `{header}`"),
        ));
    }
    let mut graphs = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(parse_err(manifest, idx + 1, "expected 3 columns"));
        }
        let g = load_graph_unlabeled(&base.join(parts[0].trim()), &base.join(parts[1].trim()))?;
        let label: usize = parts[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(manifest, idx + 1, format!("bad graph label `{}`", parts[2])))?;
        graphs.push(g);
        labels.push(label);
    }
    if graphs.is_empty() {
        return Err(parse_err(manifest, 2, "manifest lists no graphs"));
    }
    Ok(GraphDataset { graphs, labels })
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn padded_width_is_divisible_and_originals_survive(
            n in 1usize..6, f in 1usize..10, vals in proptest::collection::vec(-10.0f64..10.0, 60)
        ) {
            let data: Vec<f64> = (0..n * f).map(|i| vals[i % vals.len()]).collect();
            let features = Tensor::matrix(n, f, data).unwrap();
            let g = Graph::from_parts(n, &[], features, vec![0; n]).unwrap();
            let (p, classes) = pad_for_quaternion(&g, 3);
            prop_assert_eq!(p.feature_dim() % 4, 0);
            prop_assert_eq!(classes % 4, 0);
            for u in 0..n {
                for c in 0..f {
                    prop_assert_eq!(p.features.get(u, c), g.features.get(u, c));
                }
            }
        }

        #[test]
        fn splits_partition_any_size(n in 3usize..200, seed in 0u64..50) {
            let spec = SplitSpec::new(0.8, 0.1, 0.1, seed).unwrap();
            let m = make_splits(n, &spec).unwrap();
            for i in 0..n {
                let member = m.train[i] as usize + m.val[i] as usize + m.test[i] as usize;
                prop_assert_eq!(member, 1);
            }
        }
    }
}
