//! On-disk datasets: a key=value manifest pointing at CSV files for
//! interactions, node features, labels and split assignments.
//!
//! ```text
//! interactions = interactions.csv   # source_id,target_id,relation,timestamp
//! features = features.csv           # node_id,f0,f1,... or node_id,snapshot,f0,...
//! labels = labels.csv               # node_id,label (human|bot)
//! splits = splits.csv               # node_id,split (train|val|test)
//! relations = follow:0,retweet:1
//! interval_days = 60
//! origin = 0
//! cumulative = true
//! ```
//!
//! Paths are relative to the manifest's directory. External node ids are
//! strings; they are mapped to dense indices in sorted order (numeric order
//! when every id is an integer).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dyngraph::{
    build_snapshots_with_nodes, compute_metrics, DynamicGraph, GraphError, IngestReport,
    InteractionRecord, SnapshotConfig, SnapshotMetrics, FOLLOW, SECONDS_PER_DAY,
};
use crate::model::{ModelConfig, ModelError, ModelInputs, Split, TrainingData};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parsed manifest with paths resolved against its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub interactions: PathBuf,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    /// Relation name to tag; `follow` is the relation used for reciprocity.
    pub relations: Vec<(String, u32)>,
    pub snapshot: SnapshotConfig,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DatasetError::Manifest(format!("line {}: expected key = value", idx + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let path = |key: &str| kv.get(key).map(|v| base.join(v));
        let interactions = path("interactions")
            .ok_or_else(|| DatasetError::Manifest("missing `interactions`".into()))?;

        let relations = match kv.get("relations") {
            None => vec![("follow".to_string(), FOLLOW)],
            Some(spec) => spec
                .split(',')
                .map(|pair| {
                    let (name, tag) = pair
                        .split_once(':')
                        .ok_or_else(|| DatasetError::Manifest(format!("bad relation `{pair}`")))?;
                    let tag = tag
                        .trim()
                        .parse()
                        .map_err(|_| DatasetError::Manifest(format!("bad relation tag `{tag}`")))?;
                    Ok((name.trim().to_string(), tag))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let follow_relation = relations
            .iter()
            .find(|(n, _)| n == "follow")
            .map_or(FOLLOW, |&(_, t)| t);

        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
            kv.get(key)
                .map(|v| {
                    v.parse()
                        .map_err(|_| DatasetError::Manifest(format!("`{key}`: cannot parse `{v}`")))
                })
                .transpose()
        }
        let interval_days: u64 = num(&kv, "interval_days")?.unwrap_or(60);
        if interval_days == 0 {
            return Err(DatasetError::Manifest("`interval_days` must be positive".into()));
        }
        let snapshot = SnapshotConfig {
            interval_secs: interval_days * SECONDS_PER_DAY,
            origin: num(&kv, "origin")?.unwrap_or(0),
            num_snapshots: num(&kv, "num_snapshots")?,
            cumulative: num(&kv, "cumulative")?.unwrap_or(true),
            allow_self_loops: num(&kv, "allow_self_loops")?.unwrap_or(false),
            follow_relation,
        };
        Ok(Self {
            interactions,
            features: path("features"),
            labels: path("labels"),
            splits: path("splits"),
            relations,
            snapshot,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Node features: shared by all snapshots (`[n × dim]`) or given per snapshot
/// (`[T × n × dim]`).
pub type Features = Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub node_ids: Vec<String>,
    pub records: Vec<InteractionRecord>,
    pub features: Features,
    pub labels: Vec<Option<bool>>,
    pub splits: Vec<Option<Split>>,
    pub relations: Vec<(String, u32)>,
    pub snapshot: SnapshotConfig,
}

/// Counts from loading a dataset, alongside the snapshot report.
#[derive(Clone, Debug, Default, Serialize)]
pub struct LoadReport {
    pub num_nodes: usize,
    pub missing_features: usize,
    pub labeled: usize,
    pub bots: usize,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

/// Rows of a CSV file with their 1-based line numbers.
fn rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

/// Column positions in the interactions file, located by header name.
struct InteractionColumns {
    source: usize,
    target: usize,
    timestamp: usize,
    relation: Option<usize>,
}

impl InteractionColumns {
    fn find(path: &Path) -> Result<Self> {
        let mut rdr = reader(path)?;
        let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
        let col = |names: &[&str]| header.iter().position(|h| names.contains(&h));
        let need = |names: &[&str]| col(names).ok_or_else(|| parse_err(path, 1, format!("missing `{}` column", names[0])));
        Ok(Self {
            source: need(&["source_id", "source"])?,
            target: need(&["target_id", "target"])?,
            timestamp: need(&["timestamp"])?,
            relation: col(&["relation"]),
        })
    }

    fn required_width(&self) -> usize {
        self.source.max(self.target).max(self.timestamp)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn sort_ids(ids: &mut Vec<String>) {
    ids.sort();
    ids.dedup();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap());
    }
}

impl Dataset {
    pub fn load(manifest: &Manifest) -> Result<(Self, LoadReport)> {
        let relation_tags: HashMap<&str, u32> =
            manifest.relations.iter().map(|(n, t)| (n.as_str(), *t)).collect();

        let inter_path = &manifest.interactions;
        let cols = InteractionColumns::find(inter_path)?;
        let mut raw = Vec::new();
        for (line, row) in rows(inter_path)? {
            if row.len() <= cols.required_width() {
                return Err(parse_err(inter_path, line, "row is missing source_id, target_id or timestamp"));
            }
            let ts: u64 = row[cols.timestamp]
                .parse()
                .map_err(|_| parse_err(inter_path, line, format!("bad timestamp `{}`", row[cols.timestamp])))?;
            let rel = match cols.relation.and_then(|c| row.get(c)).map(String::as_str) {
                None | Some("") => manifest.snapshot.follow_relation,
                Some(r) => match relation_tags.get(r) {
                    Some(&t) => t,
                    None => r
                        .parse()
                        .map_err(|_| parse_err(inter_path, line, format!("unknown relation `{r}`")))?,
                },
            };
            raw.push((row[cols.source].clone(), row[cols.target].clone(), ts, rel));
        }

        let feature_rows = manifest.features.as_deref().map(rows).transpose()?;
        let label_rows = manifest.labels.as_deref().map(rows).transpose()?;
        let split_rows = manifest.splits.as_deref().map(rows).transpose()?;

        let mut ids: Vec<String> = raw.iter().flat_map(|r| [r.0.clone(), r.1.clone()]).collect();
        for table in [&feature_rows, &label_rows, &split_rows].into_iter().flatten() {
            ids.extend(table.iter().filter_map(|(_, r)| r.first().cloned()));
        }
        sort_ids(&mut ids);
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let n = ids.len();

        let records = raw
            .iter()
            .map(|(s, t, ts, rel)| InteractionRecord {
                source: index[s.as_str()],
                target: index[t.as_str()],
                timestamp: *ts,
                relation: *rel,
            })
            .collect();

        let mut report = LoadReport {
            num_nodes: n,
            ..Default::default()
        };
        let (features, has_features) = match (&manifest.features, feature_rows) {
            (Some(path), Some(table)) => {
                let (f, seen) = parse_features(path, &table, &index, &mut report)?;
                (f, Some(seen))
            }
            _ => {
                report.missing_features = n;
                (Tensor::zeros(&[n.max(1), 1]), None)
            }
        };

        let mut labels = vec![None; n];
        if let (Some(path), Some(table)) = (&manifest.labels, label_rows) {
            for (line, row) in table {
                let value = row.get(1).ok_or_else(|| parse_err(path, line, "expected node_id,label"))?;
                let i = index[row[0].as_str()];
                if has_features.as_ref().is_some_and(|seen| !seen[i]) {
                    return Err(parse_err(path, line, format!("label for node `{}` with no feature row", row[0])));
                }
                labels[i] = Some(match value.to_ascii_lowercase().as_str() {
                    "bot" | "1" => true,
                    "human" | "0" => false,
                    other => return Err(parse_err(path, line, format!("unknown label `{other}`"))),
                });
            }
        }
        let mut splits = vec![None; n];
        if let (Some(path), Some(table)) = (&manifest.splits, split_rows) {
            for (line, row) in table {
                let value = row.get(1).ok_or_else(|| parse_err(path, line, "expected node_id,split"))?;
                splits[index[row[0].as_str()]] = Some(match value.to_ascii_lowercase().as_str() {
                    "train" => Split::Train,
                    "val" | "valid" | "validation" => Split::Val,
                    "test" => Split::Test,
                    other => return Err(parse_err(path, line, format!("unknown split `{other}`"))),
                });
            }
        }
        report.labeled = labels.iter().flatten().count();
        report.bots = labels.iter().flatten().filter(|&&b| b).count();

        Ok((
            Self {
                node_ids: ids,
                records,
                features,
                labels,
                splits,
                relations: manifest.relations.clone(),
                snapshot: manifest.snapshot.clone(),
            },
            report,
        ))
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Snapshots and metrics under `config` (the dataset's own when `None`).
    pub fn graph(&self, config: Option<&SnapshotConfig>) -> Result<(DynamicGraph, IngestReport, SnapshotMetrics)> {
        let config = config.unwrap_or(&self.snapshot);
        let (graph, report) = build_snapshots_with_nodes(&self.records, self.num_nodes(), config)?;
        let metrics = compute_metrics(&graph);
        Ok((graph, report, metrics))
    }

    pub fn training_data(&self, graph: &DynamicGraph, metrics: &SnapshotMetrics, model: &ModelConfig) -> Result<TrainingData> {
        let inputs = ModelInputs::new(graph, metrics, &self.features, model)?;
        Ok(TrainingData::new(inputs, self.labels.clone(), self.splits.clone())?)
    }

    /// Writes the dataset as a manifest plus CSV files into `dir`.
    pub fn export(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        let rel_name: HashMap<u32, &str> = self.relations.iter().map(|(n, t)| (*t, n.as_str())).collect();
        let mut s = String::from("source_id,target_id,relation,timestamp\n");
        for r in &self.records {
            let rel = rel_name.get(&r.relation).map_or_else(|| r.relation.to_string(), |n| n.to_string());
            writeln!(s, "{},{},{},{}", self.node_ids[r.source], self.node_ids[r.target], rel, r.timestamp).unwrap();
        }
        write("interactions.csv", s)?;

        let dim = self.feature_dim();
        let per_snapshot = self.features.rank() == 3;
        let mut s = String::from("node_id");
        if per_snapshot {
            s.push_str(",snapshot");
        }
        for j in 0..dim {
            write!(s, ",f{j}").unwrap();
        }
        s.push('\n');
        let n = self.num_nodes();
        for (r, row) in self.features.data().chunks(dim).enumerate() {
            let (k, i) = (r / n, r % n);
            s.push_str(&self.node_ids[i]);
            if per_snapshot {
                write!(s, ",{k}").unwrap();
            }
            for v in row {
                // shortest representation that round-trips exactly
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        write("features.csv", s)?;

        let mut s = String::from("node_id,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(b) = l {
                writeln!(s, "{},{}", self.node_ids[i], if *b { "bot" } else { "human" }).unwrap();
            }
        }
        write("labels.csv", s)?;

        let mut s = String::from("node_id,split\n");
        for (i, sp) in self.splits.iter().enumerate() {
            if let Some(sp) = sp {
                let name = match sp {
                    Split::Train => "train",
                    Split::Val => "val",
                    Split::Test => "test",
                };
                writeln!(s, "{},{name}", self.node_ids[i]).unwrap();
            }
        }
        write("splits.csv", s)?;

        let c = &self.snapshot;
        let mut m = String::new();
        writeln!(m, "interactions = interactions.csv").unwrap();
        writeln!(m, "features = features.csv").unwrap();
        writeln!(m, "labels = labels.csv").unwrap();
        writeln!(m, "splits = splits.csv").unwrap();
        let rels: Vec<String> = self.relations.iter().map(|(n, t)| format!("{n}:{t}")).collect();
        writeln!(m, "relations = {}", rels.join(",")).unwrap();
        if !c.interval_secs.is_multiple_of(SECONDS_PER_DAY) {
            return Err(DatasetError::Manifest("interval is not a whole number of days".into()));
        }
        writeln!(m, "interval_days = {}", c.interval_secs / SECONDS_PER_DAY).unwrap();
        writeln!(m, "origin = {}", c.origin).unwrap();
        if let Some(k) = c.num_snapshots {
            writeln!(m, "num_snapshots = {k}").unwrap();
        }
        writeln!(m, "cumulative = {}", c.cumulative).unwrap();
        writeln!(m, "allow_self_loops = {}", c.allow_self_loops).unwrap();
        write("manifest.txt", m)?;
        Ok(dir.join("manifest.txt"))
    }
}

fn parse_features(
    path: &Path,
    table: &[(usize, Vec<String>)],
    index: &HashMap<&str, usize>,
    report: &mut LoadReport,
) -> Result<(Tensor, Vec<bool>)> {
    let n = index.len();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let per_snapshot = header.get(1) == Some("snapshot");
    let skip = if per_snapshot { 2 } else { 1 };
    let dim = header.len().saturating_sub(skip);
    if dim == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    let num_snap = if per_snapshot {
        let mut max = 0;
        for (line, row) in table {
            let k: usize = row
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(path, *line, "bad snapshot index"))?;
            max = max.max(k + 1);
        }
        max
    } else {
        1
    };
    let mut data = vec![0.0; num_snap * n * dim];
    let mut seen = vec![false; n];
    for (line, row) in table {
        if row.len() != skip + dim {
            return Err(parse_err(path, *line, format!("expected {} columns, got {}", skip + dim, row.len())));
        }
        let i = index[row[0].as_str()];
        let k = if per_snapshot { row[1].parse::<usize>().unwrap() } else { 0 };
        for (j, v) in row[skip..].iter().enumerate() {
            let x: f64 = v
                .parse()
                .map_err(|_| parse_err(path, *line, format!("bad feature value `{v}`")))?;
            if !x.is_finite() {
                return Err(parse_err(path, *line, format!("non-finite feature value `{v}`")));
            }
            data[(k * n + i) * dim + j] = x;
        }
        seen[i] = true;
    }
    report.missing_features = seen.iter().filter(|s| !**s).count();
    let shape = if per_snapshot { vec![num_snap, n, dim] } else { vec![n, dim] };
    let features = Tensor::new(shape, data).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok((features, seen))
}

/// Stratified assignment of labeled nodes: within each class, a seeded
/// shuffle, then the first `train` share to train, the next `val` share to
/// validation and the rest to test.
pub fn stratified_splits(labels: &[Option<bool>], train: f64, val: f64, seed: u64) -> Vec<Option<Split>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![None; labels.len()];
    for class in [false, true] {
        let mut nodes: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(class)).collect();
        nodes.shuffle(&mut rng);
        let m = nodes.len();
        let n_train = (m as f64 * train).round() as usize;
        let n_val = ((m as f64 * val).round() as usize).min(m - n_train.min(m));
        for (pos, &i) in nodes.iter().enumerate() {
            out[i] = Some(if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    out
}
