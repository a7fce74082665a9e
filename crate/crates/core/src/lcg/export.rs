use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LatentConceptGraph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const KMEANS_ITERATIONS: usize = 50;
const DOT_COLORS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonNode {
    pub id: usize,
    pub degree: f64,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphJson {
    pub nodes: Vec<JsonNode>,
    pub edges: Vec<JsonEdge>,
}

#[derive(Clone, Debug)]
pub struct GraphExport {
    pub json_path: PathBuf,
    pub dot_path: PathBuf,
    pub graph: GraphJson,
}

/// Seeded k-means (k-means++ seeding, fixed iteration count). Ties go to the
/// lowest cluster index. `k` is clamped to the number of points.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            centroids.len()
        };
        centroids.push(points[pick].clone());
    }

    let nearest = |p: &[f64], cs: &[Vec<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (c, centre) in cs.iter().enumerate() {
            let d = dist(p, centre);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_ITERATIONS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

pub fn graph_json<T: Scalar>(graph: &LatentConceptGraph<T>, clusters: &[usize]) -> GraphJson {
    GraphJson {
        nodes: graph
            .degree
            .iter()
            .enumerate()
            .map(|(id, d)| JsonNode {
                id,
                degree: d.as_f64(),
                cluster: clusters[id],
            })
            .collect(),
        edges: graph
            .edges()
            .into_iter()
            .map(|(i, j, w)| JsonEdge { i, j, weight: w.as_f64() })
            .collect(),
    }
}

pub fn graph_dot(json: &GraphJson) -> String {
    let mut out = String::from("graph lcg {\n");
    let _ = writeln!(out, "  node [shape=circle, style=filled, colorscheme=set3{DOT_COLORS}];");
    for node in &json.nodes {
        let _ = writeln!(
            out,
            "  {id} [label=\"{id}\", fillcolor={color}, width={width:.4}, cluster={cluster}, degree={degree:.6}];",
            id = node.id,
            color = node.cluster % DOT_COLORS + 1,
            width = 0.25 * node.degree,
            cluster = node.cluster,
            degree = node.degree,
        );
    }
    for e in &json.edges {
        let _ = writeln!(out, "  {} -- {} [weight={:.6}];", e.i, e.j, e.weight);
    }
    out.push_str("}\n");
    out
}

/// Writes `<prefix>.json` and `<prefix>.dot`; nodes are clustered by k-means
/// over the rows of the concept keys.
pub fn export_graph<T: Scalar>(
    graph: &LatentConceptGraph<T>,
    concept_keys: &Tensor<T>,
    prefix: impl AsRef<Path>,
    num_clusters: usize,
    seed: u64,
) -> Result<GraphExport> {
    if num_clusters == 0 {
        return Err(Error::Config("num_clusters must be at least 1".into()));
    }
    let points: Vec<Vec<f64>> = (0..concept_keys.rows())
        .map(|r| concept_keys.row(r).iter().map(|v| v.as_f64()).collect())
        .collect();
    let clusters = kmeans(&points, num_clusters, seed);
    let json = graph_json(graph, &clusters);

    let prefix = prefix.as_ref();
    let json_path = prefix.with_extension("json");
    let dot_path = prefix.with_extension("dot");
    fs::write(&json_path, serde_json::to_string_pretty(&json)?)?;
    fs::write(&dot_path, graph_dot(&json))?;
    Ok(GraphExport {
        json_path,
        dot_path,
        graph: json,
    })
}
