//! Dataset directory format.
//!
//! `graph.meta` is a JSON object naming the other files:
//!
//! ```json
//! {"num_nodes": 3, "feature_dim": 2, "features": "features.tsv",
//!  "labels": "labels.tsv", "splits": null, "node_ids": null,
//!  "metapaths": [{"name": "pap", "relation_id": 0, "edges": "edges_pap.tsv"}]}
//! ```
//!
//! When `node_ids` names a file, its line `i` is the external id of dense
//! node `i` and every edge/label/split file refers to nodes by those ids.
//! Otherwise ids are the dense integers `0..num_nodes`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{GraphError, HeteroGraph, MetaPathSubgraph, Result, Split};
use crate::sparse::Csr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPathMeta {
    pub name: String,
    pub relation_id: usize,
    pub edges: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub features: String,
    #[serde(default)]
    pub labels: Option<String>,
    #[serde(default)]
    pub splits: Option<String>,
    pub metapaths: Vec<MetaPathMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_ids: Option<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-blank lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, toks)| !toks.is_empty())
}

struct NodeIndex<'a> {
    file: &'a str,
    num_nodes: usize,
    ids: Option<HashMap<String, usize>>,
}

impl NodeIndex<'_> {
    fn resolve(&self, tok: &str, line: usize) -> Result<usize> {
        match &self.ids {
            Some(map) => map.get(tok).copied().ok_or_else(|| GraphError::Parse {
                file: self.file.to_string(),
                line,
                msg: format!("unknown node id `{tok}`"),
            }),
            None => {
                let v: usize = tok.parse().map_err(|_| GraphError::Parse {
                    file: self.file.to_string(),
                    line,
                    msg: format!("expected a node id, found `{tok}`"),
                })?;
                if v >= self.num_nodes {
                    return Err(GraphError::EndpointOutOfRange {
                        file: self.file.to_string(),
                        line,
                        endpoint: v,
                        num_nodes: self.num_nodes,
                    });
                }
                Ok(v)
            }
        }
    }
}

/// Loads and validates a dataset directory. Edges are de-duplicated and
/// symmetrized; self-loops are dropped with a warning.
pub fn load_dataset(dir: &Path) -> Result<HeteroGraph> {
    let meta_text = read(&dir.join("graph.meta"))?;
    let meta: GraphMeta = serde_json::from_str(&meta_text).map_err(|e| GraphError::Meta(e.to_string()))?;
    let n = meta.num_nodes;
    let f = meta.feature_dim;

    let ids = match &meta.node_ids {
        None => None,
        Some(file) => {
            let text = read(&dir.join(file))?;
            let mut map = HashMap::new();
            let mut ordered = Vec::new();
            for (line, toks) in lines(&text) {
                let id = toks[0].to_string();
                if map.insert(id.clone(), ordered.len()).is_some() {
                    return Err(GraphError::Parse {
                        file: file.clone(),
                        line,
                        msg: format!("duplicate node id `{id}`"),
                    });
                }
                ordered.push(id);
            }
            if ordered.len() != n {
                return Err(GraphError::Meta(format!("{file} lists {} ids for {n} nodes", ordered.len())));
            }
            Some((map, ordered))
        }
    };

    let feat_text = read(&dir.join(&meta.features))?;
    let mut features = Vec::with_capacity(n * f);
    let mut rows = 0;
    for (line, toks) in lines(&feat_text) {
        if toks.len() != f {
            return Err(GraphError::Parse {
                file: meta.features.clone(),
                line,
                msg: format!("expected {f} values, found {}", toks.len()),
            });
        }
        for t in toks {
            let v: f64 = t.parse().map_err(|_| GraphError::Parse {
                file: meta.features.clone(),
                line,
                msg: format!("not a real number: `{t}`"),
            })?;
            if !v.is_finite() {
                return Err(GraphError::Parse {
                    file: meta.features.clone(),
                    line,
                    msg: format!("non-finite feature `{t}`"),
                });
            }
            features.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(GraphError::FeatureRowMismatch { expected: n, found: rows });
    }

    let mut metapaths = Vec::with_capacity(meta.metapaths.len());
    for mp in &meta.metapaths {
        let text = read(&dir.join(&mp.edges))?;
        let idx = NodeIndex {
            file: &mp.edges,
            num_nodes: n,
            ids: ids.as_ref().map(|(m, _)| m.clone()),
        };
        let mut pairs = Vec::new();
        for (line, toks) in lines(&text) {
            if toks.len() != 2 {
                return Err(GraphError::Parse {
                    file: mp.edges.clone(),
                    line,
                    msg: format!("expected `u v`, found {} fields", toks.len()),
                });
            }
            pairs.push((idx.resolve(toks[0], line)?, idx.resolve(toks[1], line)?));
        }
        let (csr, loops) = Csr::symmetric_from_pairs(n, &pairs);
        if loops > 0 {
            warn!("{}: dropped {loops} self-loop(s)", mp.edges);
        }
        metapaths.push(MetaPathSubgraph::new(mp.name.clone(), mp.relation_id, csr)?);
    }

    let mut g = HeteroGraph::new(n, f, features, metapaths)?;

    if let Some(file) = &meta.labels {
        let text = read(&dir.join(file))?;
        let idx = NodeIndex {
            file,
            num_nodes: n,
            ids: ids.as_ref().map(|(m, _)| m.clone()),
        };
        let mut labels = vec![None; n];
        for (line, toks) in lines(&text) {
            if toks.len() != 2 {
                return Err(GraphError::Parse {
                    file: file.clone(),
                    line,
                    msg: "expected `node_id class_id`".into(),
                });
            }
            let node = idx.resolve(toks[0], line)?;
            let class: usize = toks[1].parse().map_err(|_| GraphError::Parse {
                file: file.clone(),
                line,
                msg: format!("bad class id `{}`", toks[1]),
            })?;
            labels[node] = Some(class);
        }
        g = g.with_labels(labels)?;
    }

    if let Some(file) = &meta.splits {
        let text = read(&dir.join(file))?;
        let idx = NodeIndex {
            file,
            num_nodes: n,
            ids: ids.as_ref().map(|(m, _)| m.clone()),
        };
        let mut splits = vec![None; n];
        for (line, toks) in lines(&text) {
            if toks.len() != 2 {
                return Err(GraphError::Parse {
                    file: file.clone(),
                    line,
                    msg: "expected `node_id train|val|test`".into(),
                });
            }
            let node = idx.resolve(toks[0], line)?;
            let s: Split = toks[1].parse().map_err(|msg| GraphError::Parse {
                file: file.clone(),
                line,
                msg,
            })?;
            splits[node] = Some(s);
        }
        g = g.with_splits(splits)?;
    }

    if let Some((_, ordered)) = ids {
        g = g.with_node_ids(ordered)?;
    }
    Ok(g)
}

/// Writes `g` in the dataset directory format (creating `dir`).
pub fn save_dataset(g: &HeteroGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let id = |i: usize| g.node_label(i);

    let mut feats = String::new();
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g.feature_row(i).iter().map(|v| v.to_string()).collect();
        feats.push_str(&row.join("\t"));
        feats.push('\n');
    }
    write(&dir.join("features.tsv"), &feats)?;

    let mut mps = Vec::new();
    for mp in g.metapaths() {
        if mp.name.is_empty() || mp.name.contains(['/', '\\']) {
            return Err(GraphError::Invalid(format!("meta-path name `{}` is not file-safe", mp.name)));
        }
        let file = format!("edges_{}.tsv", mp.name);
        let mut text = String::new();
        for (u, v) in mp.edges().undirected_edges() {
            text.push_str(&format!("{}\t{}\n", id(u), id(v)));
        }
        write(&dir.join(&file), &text)?;
        mps.push(MetaPathMeta {
            name: mp.name.clone(),
            relation_id: mp.relation_id,
            edges: file,
        });
    }

    let labels = match g.labels() {
        None => None,
        Some(labels) => {
            let mut text = String::new();
            for (i, l) in labels.iter().enumerate() {
                if let Some(c) = l {
                    text.push_str(&format!("{}\t{c}\n", id(i)));
                }
            }
            write(&dir.join("labels.tsv"), &text)?;
            Some("labels.tsv".to_string())
        }
    };
    let splits = match g.splits() {
        None => None,
        Some(splits) => {
            let mut text = String::new();
            for (i, s) in splits.iter().enumerate() {
                if let Some(s) = s {
                    text.push_str(&format!("{}\t{}\n", id(i), s.as_str()));
                }
            }
            write(&dir.join("splits.tsv"), &text)?;
            Some("splits.tsv".to_string())
        }
    };
    let node_ids = match g.node_ids() {
        None => None,
        Some(ids) => {
            write(&dir.join("nodes.tsv"), &(ids.join("\n") + "\n"))?;
            Some("nodes.tsv".to_string())
        }
    };

    let meta = GraphMeta {
        num_nodes: g.num_nodes(),
        feature_dim: g.feature_dim(),
        features: "features.tsv".into(),
        labels,
        splits,
        metapaths: mps,
        node_ids,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| GraphError::Meta(e.to_string()))?;
    write(&dir.join("graph.meta"), &(json + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dir(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in files {
            fs::write(dir.path().join(name), body).unwrap();
        }
        dir
    }

    const META: &str = r#"{"num_nodes":3,"feature_dim":1,"features":"features.tsv","labels":null,"splits":null,
        "metapaths":[{"name":"m","relation_id":0,"edges":"edges_m.tsv"}]}"#;

    #[test]
    fn loads_path_graph() {
        let d = write_dir(&[("graph.meta", META), ("features.tsv", "1\n2\n3\n"), ("edges_m.tsv", "0 1\n1 2")]);
        let g = load_dataset(d.path()).unwrap();
        let m = &g.metapaths()[0];
        assert_eq!(m.neighbors(0), &[1]);
        assert_eq!(m.neighbors(1), &[0, 2]);
        assert_eq!(m.neighbors(2), &[1]);
    }

    #[test]
    fn self_loop_dropped() {
        let d = write_dir(&[("graph.meta", META), ("features.tsv", "1\n2\n3\n"), ("edges_m.tsv", "0 0\n0 1\n1 0\n")]);
        let g = load_dataset(d.path()).unwrap();
        let m = &g.metapaths()[0];
        assert_eq!(m.neighbors(0), &[1]);
        assert_eq!(m.num_edges(), 1);
    }

    #[test]
    fn feature_row_mismatch() {
        let d = write_dir(&[("graph.meta", META), ("features.tsv", "1\n2\n"), ("edges_m.tsv", "0 1\n")]);
        let err = load_dataset(d.path()).unwrap_err().to_string();
        assert!(err.contains("feature row count mismatch"), "{err}");
    }

    #[test]
    fn endpoint_out_of_range_reports_line() {
        let d = write_dir(&[("graph.meta", META), ("features.tsv", "1\n2\n3\n"), ("edges_m.tsv", "0 1\n1 3\n")]);
        match load_dataset(d.path()) {
            Err(GraphError::EndpointOutOfRange { line, endpoint, .. }) => {
                assert_eq!((line, endpoint), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_missing_file() {
        let d = write_dir(&[("graph.meta", META), ("features.tsv", "1\nx\n3\n"), ("edges_m.tsv", "0 1\n")]);
        let err = load_dataset(d.path()).unwrap_err().to_string();
        assert!(err.starts_with("features.tsv:2"), "{err}");
        let d = write_dir(&[("graph.meta", META), ("features.tsv", "1\n2\n3\n")]);
        assert!(matches!(load_dataset(d.path()), Err(GraphError::Io { .. })));
    }

    #[test]
    fn sparse_ids_are_densified_in_file_order() {
        let meta = r#"{"num_nodes":3,"feature_dim":1,"features":"f.tsv","labels":"l.tsv","splits":"s.tsv",
            "node_ids":"nodes.tsv","metapaths":[{"name":"m","relation_id":0,"edges":"e.tsv"}]}"#;
        let d = write_dir(&[
            ("graph.meta", meta),
            ("nodes.tsv", "p100\np7\np42\n"),
            ("f.tsv", "0.5\n1.5\n2.5\n"),
            ("e.tsv", "p100 p42\n"),
            ("l.tsv", "p7 1\np42 0\n"),
            ("s.tsv", "p7 train\np42 test\n"),
        ]);
        let g = load_dataset(d.path()).unwrap();
        assert_eq!(g.metapaths()[0].neighbors(0), &[2]);
        assert_eq!(g.labels().unwrap(), &[None, Some(1), Some(0)]);
        assert_eq!(g.splits().unwrap()[1], Some(Split::Train));
        assert_eq!(g.node_label(2), "p42");

        let out = tempfile::tempdir().unwrap();
        save_dataset(&g, out.path()).unwrap();
        assert_eq!(load_dataset(out.path()).unwrap(), g);
    }
}
