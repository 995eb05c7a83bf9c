//! Diffusion runs: load a hand-written sheaf, iterate X ← X − αΔX, then
//! check which classes the exact limit separates linearly.
//!
//! Sheaf spec JSON:
//! ```json
//! {
//!   "family": "special_orthogonal",
//!   "stalk_dim": 2,
//!   "maps": [
//!     {"edge": [0, 1], "source": [[-1, 0], [0, -1]], "target": [[1, 0], [0, 1]]}
//!   ]
//! }
//! ```
//! `source` is the map out of the lower-numbered endpoint, `target` out of
//! the higher; exactly one entry per graph edge. `"family": "identity"`
//! takes no maps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use sheafnet::diffusion::{
    diffusion_step, kernel_projection_limit, linear_separation_check, FeatureMatrix,
};
use sheafnet::linalg::Matrix;
use sheafnet::rotations::Rotation;
use sheafnet::sheaf::{
    degree_blocks, normalized_laplacian, sheaf_laplacian, CellularSheaf, Graph, RestrictionMap,
};
use sheafnet::{Error, Result};

use crate::config::{resolve_dataset, RunConfig};

pub const DIFFUSE_FILE: &str = "diffuse.csv";

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SheafSpecFile {
    family: String,
    stalk_dim: usize,
    #[serde(default)]
    maps: Vec<MapEntry>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct MapEntry {
    edge: (usize, usize),
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

fn parse_matrix(rows: &[Vec<f64>], d: usize, what: &str) -> Result<Matrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Parse(format!("{what} must be a {d}x{d} matrix")));
    }
    Ok(Matrix::from_rows(rows))
}

fn build_map(family: &str, d: usize, rows: &[Vec<f64>], what: &str) -> Result<RestrictionMap<f64>> {
    let m = parse_matrix(rows, d, what)?;
    let built = match family {
        "diagonal" => {
            let mut diag = Vec::with_capacity(d);
            for i in 0..d {
                for j in 0..d {
                    if i != j && m[(i, j)] != 0.0 {
                        return Err(Error::Parse(format!(
                            "{what}: diagonal family forbids off-diagonal entries"
                        )));
                    }
                }
                diag.push(m[(i, i)]);
            }
            RestrictionMap::diagonal(diag)
        }
        "special_orthogonal" => Rotation::new(m).map(RestrictionMap::SpecialOrthogonal),
        "general" => RestrictionMap::general(m),
        other => return Err(Error::Parse(format!("unknown sheaf family {other:?}"))),
    };
    built.map_err(|e| Error::Parse(format!("{what}: {e}")))
}

/// Reads a sheaf spec file and matches its maps to the graph's edges.
pub fn load_sheaf_spec(path: &Path, graph: Arc<Graph<f64>>) -> Result<CellularSheaf<f64>> {
    let text = fs::read_to_string(path)?;
    let spec: SheafSpecFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if spec.stalk_dim == 0 {
        return Err(Error::Parse("stalk_dim must be >= 1".into()));
    }

    if spec.family == "identity" {
        if !spec.maps.is_empty() {
            return Err(Error::Parse("identity sheaf takes no maps".into()));
        }
        return CellularSheaf::identity(graph, spec.stalk_dim);
    }

    let mut by_edge: BTreeMap<(usize, usize), &MapEntry> = BTreeMap::new();
    for entry in &spec.maps {
        if by_edge.insert(entry.edge, entry).is_some() {
            return Err(Error::Parse(format!("duplicate maps for edge {:?}", entry.edge)));
        }
    }
    let mut maps = Vec::with_capacity(graph.num_edges());
    for &(u, v) in graph.edges() {
        let entry = by_edge
            .remove(&(u, v))
            .ok_or_else(|| Error::Parse(format!("no maps for edge ({u}, {v})")))?;
        let src = build_map(&spec.family, spec.stalk_dim, &entry.source, &format!("edge ({u}, {v}) source"))?;
        let tgt = build_map(&spec.family, spec.stalk_dim, &entry.target, &format!("edge ({u}, {v}) target"))?;
        maps.push((src, tgt));
    }
    if let Some((&edge, _)) = by_edge.iter().next() {
        return Err(Error::Parse(format!("maps for {edge:?}, which is not a graph edge")));
    }
    CellularSheaf::new(graph, spec.stalk_dim, maps).map_err(|e| Error::Parse(e.to_string()))
}

/// Node features reshaped into d-dimensional stalks: feature row
/// [x_0, …, x_{df−1}] becomes a d×f block, row-major.
fn stack_features(graph: &Graph<f64>, d: usize) -> Result<FeatureMatrix<f64>> {
    let m = graph.num_features();
    if m % d != 0 {
        return Err(Error::Config(format!(
            "feature dimension {m} is not divisible by stalk dimension {d}"
        )));
    }
    let f = m / d;
    let n = graph.num_nodes();
    let values =
        Matrix::from_fn(n * d, f, |r, c| graph.features()[(r / d, (r % d) * f + c)]);
    FeatureMatrix::new(n, d, values)
}

pub fn run_diffuse(cfg: &RunConfig) -> Result<()> {
    let dataset = resolve_dataset(cfg)?;
    let graph = dataset.graph.clone();
    let spec_path = cfg
        .sheaf_spec
        .as_ref()
        .ok_or_else(|| Error::Config("no sheaf spec: set sheaf_spec or --sheaf".into()))?;
    let sheaf = load_sheaf_spec(spec_path, graph.clone())?;

    let x0 = stack_features(&graph, sheaf.stalk_dim())?;
    let l = sheaf_laplacian(&sheaf);
    let delta = normalized_laplacian(&l, &degree_blocks(&l), cfg.eps)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let mut out = BufWriter::new(fs::File::create(cfg.out_dir.join(DIFFUSE_FILE))?);
    // delta is ‖X(t) − X(t−1)‖∞; the initial row is always present.
    writeln!(out, "step,delta")?;
    writeln!(out, "0,0")?;
    let mut x = x0.clone();
    for t in 1..=cfg.steps {
        let next = diffusion_step(&x, &delta, cfg.alpha);
        writeln!(out, "{t},{}", next.values().sub(x.values()).max_abs())?;
        x = next;
    }

    let limit = kernel_projection_limit(&x0, &delta)?;
    let separable = linear_separation_check(&limit.node_rows_flat(), graph.labels())?;
    writeln!(out, "#separation,class,separable")?;
    for (class, flag) in separable.iter().enumerate() {
        writeln!(out, "#separation,{class},{flag}")?;
    }
    out.flush()?;
    Ok(())
}
