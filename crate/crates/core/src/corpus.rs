//! Table corpus: schema ingestion, flattening, tokenization and join groups.
//!
//! Each database arrives as one JSON schema document:
//!
//! ```json
//! {"name": "db1",
//!  "tables": [{"name": "A", "columns": ["x", "y"],
//!              "foreign_keys": [{"column": "x", "ref_table": "B", "ref_column": "z"}]}]}
//! ```
//!
//! Tables become [`TableRecord`]s keyed `<database>.<table>`. Foreign keys
//! become undirected edges of a [`JoinGraph`] whose connected components are
//! the joinability groups.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: malformed schema document: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("duplicate table id `{0}`")]
    DuplicateTable(String),
    #[error("table `{0}` has no columns")]
    EmptyColumns(String),
    #[error("corpus record `{table_id}` is inconsistent: {reason}")]
    Inconsistent { table_id: String, reason: String },
}

/// Token counting contract. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Maximal alphanumeric runs are one token; every other non-whitespace
/// character is a token of its own; whitespace only separates.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

impl Tokenizer for DefaultTokenizer {
    fn count(&self, text: &str) -> usize {
        tokenize(text).len()
    }
}

/// Splits `text` under the [`DefaultTokenizer`] rule.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut word_start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            out.push(&text[start..i]);
        }
        if !ch.is_whitespace() {
            out.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(start) = word_start {
        out.push(&text[start..]);
    }
    out
}

/// Token count under [`DefaultTokenizer`].
pub fn token_count(text: &str) -> usize {
    DefaultTokenizer.count(text)
}

/// `<database> | <table> | <col_1>, <col_2>, ...`
pub fn flatten(database_id: &str, table_name: &str, columns: &[String]) -> String {
    format!("{database_id} | {table_name} | {}", columns.join(", "))
}

pub fn table_id(database_id: &str, table_name: &str) -> String {
    format!("{database_id}.{table_name}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRecord {
    pub table_id: String,
    pub database_id: String,
    pub table_name: String,
    pub columns: Vec<String>,
    pub flattened_text: String,
}

impl TableRecord {
    pub fn new(
        database_id: &str,
        table_name: &str,
        columns: Vec<String>,
    ) -> Result<Self, CorpusError> {
        let id = table_id(database_id, table_name);
        if columns.is_empty() {
            return Err(CorpusError::EmptyColumns(id));
        }
        Ok(TableRecord {
            flattened_text: flatten(database_id, table_name, &columns),
            table_id: id,
            database_id: database_id.to_string(),
            table_name: table_name.to_string(),
            columns,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    /// Empty only in unlabeled inference mode.
    #[serde(default, alias = "gold_table_ids")]
    pub gold: BTreeSet<String>,
}

impl QueryRecord {
    pub fn read_jsonl(path: &Path) -> Result<Vec<QueryRecord>, JsonlError> {
        jsonl::read(path)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SchemaDocument {
    #[serde(alias = "db_id", alias = "database_id")]
    pub name: String,
    pub tables: Vec<SchemaTable>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SchemaTable {
    pub name: String,
    pub columns: Vec<String>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub ref_table: String,
    pub ref_column: String,
}

impl SchemaDocument {
    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let raw = std::fs::read_to_string(path).map_err(|e| JsonlError::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Undirected foreign-key graph. Self-references are kept as `(a, a)` edges
/// so a database with only self-referencing keys still counts as declaring
/// joins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JoinGraph {
    pub edges: BTreeSet<(String, String)>,
    pub group_label: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JoinEdgeRow {
    left: String,
    right: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusRow {
    table_id: String,
    database_id: String,
    table_name: String,
    columns: Vec<String>,
    flattened_text: String,
    group_label: usize,
}

fn edge(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl JoinGraph {
    /// Labels components 0, 1, ... in order of first appearance in `order`.
    fn build(order: &[TableRecord], edges: BTreeSet<(String, String)>) -> Self {
        let mut adjacency: HashMap<&str, Vec<&str>> = HashMap::new();
        for (a, b) in &edges {
            adjacency.entry(a).or_default().push(b);
            adjacency.entry(b).or_default().push(a);
        }
        let mut group_label = BTreeMap::new();
        let mut next = 0;
        for record in order {
            if group_label.contains_key(&record.table_id) {
                continue;
            }
            let mut queue = VecDeque::from([record.table_id.as_str()]);
            group_label.insert(record.table_id.clone(), next);
            while let Some(node) = queue.pop_front() {
                for &peer in adjacency.get(node).into_iter().flatten() {
                    if !group_label.contains_key(peer) {
                        group_label.insert(peer.to_string(), next);
                        queue.push_back(peer);
                    }
                }
            }
            next += 1;
        }
        JoinGraph { edges, group_label }
    }

    pub fn label(&self, table_id: &str) -> Option<usize> {
        self.group_label.get(table_id).copied()
    }
}

/// Immutable table corpus. Record order is ingestion order.
#[derive(Debug, Clone)]
pub struct Corpus {
    tables: Vec<TableRecord>,
    index: HashMap<String, usize>,
    joins: JoinGraph,
}

impl Corpus {
    /// Builds a corpus from records plus foreign-key edges between table ids.
    pub fn from_parts(
        tables: Vec<TableRecord>,
        edges: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(tables.len());
        for (i, t) in tables.iter().enumerate() {
            if t.columns.is_empty() {
                return Err(CorpusError::EmptyColumns(t.table_id.clone()));
            }
            if index.insert(t.table_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateTable(t.table_id.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (a, b) in edges {
            for id in [&a, &b] {
                if !index.contains_key(id.as_str()) {
                    return Err(CorpusError::Inconsistent {
                        table_id: id.clone(),
                        reason: "join edge references a table outside the corpus".into(),
                    });
                }
            }
            edge_set.insert(edge(&a, &b));
        }
        let joins = JoinGraph::build(&tables, edge_set);
        Ok(Corpus {
            tables,
            index,
            joins,
        })
    }

    /// Ingests schema documents in the given order. `path` is only used for
    /// error messages.
    pub fn ingest<'a>(
        docs: impl IntoIterator<Item = (&'a Path, &'a SchemaDocument)>,
    ) -> Result<Self, CorpusError> {
        let mut tables = Vec::new();
        let mut edges = Vec::new();
        for (path, doc) in docs {
            let malformed = |reason: String| CorpusError::Malformed {
                path: path.to_path_buf(),
                reason,
            };
            if doc.name.is_empty() {
                return Err(malformed("empty database name".into()));
            }
            let by_name: HashMap<&str, &SchemaTable> =
                doc.tables.iter().map(|t| (t.name.as_str(), t)).collect();
            for t in &doc.tables {
                if t.name.is_empty() {
                    return Err(malformed("table with empty name".into()));
                }
                tables.push(TableRecord::new(&doc.name, &t.name, t.columns.clone())?);
                for fk in &t.foreign_keys {
                    let target = by_name.get(fk.ref_table.as_str()).ok_or_else(|| {
                        malformed(format!(
                            "foreign key {}.{} references unknown table `{}`",
                            t.name, fk.column, fk.ref_table
                        ))
                    })?;
                    if !t.columns.contains(&fk.column) {
                        return Err(malformed(format!(
                            "foreign key column `{}` is not a column of `{}`",
                            fk.column, t.name
                        )));
                    }
                    if !target.columns.contains(&fk.ref_column) {
                        return Err(malformed(format!(
                            "foreign key target column `{}` is not a column of `{}`",
                            fk.ref_column, fk.ref_table
                        )));
                    }
                    edges.push((
                        table_id(&doc.name, &t.name),
                        table_id(&doc.name, &fk.ref_table),
                    ));
                }
            }
        }
        Corpus::from_parts(tables, edges)
    }

    /// Ingests every `*.json` file in `dir`, sorted by file name.
    pub fn ingest_dir(dir: &Path) -> Result<Self, CorpusError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| JsonlError::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        let docs = paths
            .iter()
            .map(|p| SchemaDocument::read(p))
            .collect::<Result<Vec<_>, _>>()?;
        Corpus::ingest(paths.iter().map(PathBuf::as_path).zip(docs.iter()))
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn tables(&self) -> &[TableRecord] {
        &self.tables
    }

    pub fn get(&self, table_id: &str) -> Option<&TableRecord> {
        self.index.get(table_id).map(|&i| &self.tables[i])
    }

    pub fn contains(&self, table_id: &str) -> bool {
        self.index.contains_key(table_id)
    }

    pub fn joins(&self) -> &JoinGraph {
        &self.joins
    }

    pub fn group_label(&self, table_id: &str) -> Option<usize> {
        self.joins.label(table_id)
    }

    /// Databases that declare at least one foreign key.
    pub fn databases_with_joins(&self) -> BTreeSet<&str> {
        self.joins
            .edges
            .iter()
            .filter_map(|(a, _)| self.get(a).map(|t| t.database_id.as_str()))
            .collect()
    }

    /// Keeps the tables accepted by `keep`, drops edges touching removed
    /// tables and relabels the remaining components.
    pub fn retain_tables(&self, mut keep: impl FnMut(&TableRecord) -> bool) -> Corpus {
        let tables: Vec<TableRecord> = self.tables.iter().filter(|t| keep(t)).cloned().collect();
        let kept: BTreeSet<&str> = tables.iter().map(|t| t.table_id.as_str()).collect();
        let edges: Vec<(String, String)> = self
            .joins
            .edges
            .iter()
            .filter(|(a, b)| kept.contains(a.as_str()) && kept.contains(b.as_str()))
            .cloned()
            .collect();
        Corpus::from_parts(tables, edges).expect("subset of a valid corpus is valid")
    }

    /// Writes `corpus.jsonl` (one record per line, with group label) and the
    /// join edges file.
    pub fn write_jsonl(&self, corpus_path: &Path, joins_path: &Path) -> Result<(), CorpusError> {
        let rows: Vec<CorpusRow> = self
            .tables
            .iter()
            .map(|t| CorpusRow {
                table_id: t.table_id.clone(),
                database_id: t.database_id.clone(),
                table_name: t.table_name.clone(),
                columns: t.columns.clone(),
                flattened_text: t.flattened_text.clone(),
                group_label: self.joins.group_label[&t.table_id],
            })
            .collect();
        jsonl::write(corpus_path, &rows)?;
        let edges: Vec<JoinEdgeRow> = self
            .joins
            .edges
            .iter()
            .map(|(left, right)| JoinEdgeRow {
                left: left.clone(),
                right: right.clone(),
            })
            .collect();
        jsonl::write(joins_path, &edges)?;
        Ok(())
    }

    /// Loads a corpus written by [`Corpus::write_jsonl`], re-checking that
    /// flattened text and group labels agree with the stored fields.
    pub fn read_jsonl(corpus_path: &Path, joins_path: &Path) -> Result<Self, CorpusError> {
        let rows: Vec<CorpusRow> = jsonl::read(corpus_path)?;
        let edges: Vec<JoinEdgeRow> = jsonl::read(joins_path)?;
        let mut tables = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for row in rows {
            if row.table_id != table_id(&row.database_id, &row.table_name) {
                return Err(CorpusError::Inconsistent {
                    table_id: row.table_id,
                    reason: "table_id is not <database_id>.<table_name>".into(),
                });
            }
            let record = TableRecord::new(&row.database_id, &row.table_name, row.columns)?;
            if record.flattened_text != row.flattened_text {
                return Err(CorpusError::Inconsistent {
                    table_id: row.table_id,
                    reason: "flattened_text does not match database, table and columns".into(),
                });
            }
            labels.push(row.group_label);
            tables.push(record);
        }
        let corpus = Corpus::from_parts(tables, edges.into_iter().map(|e| (e.left, e.right)))?;
        for (t, stored) in corpus.tables.iter().zip(labels) {
            if corpus.joins.group_label[&t.table_id] != stored {
                return Err(CorpusError::Inconsistent {
                    table_id: t.table_id.clone(),
                    reason: format!(
                        "group_label {stored} disagrees with the join edges (expected {})",
                        corpus.joins.group_label[&t.table_id]
                    ),
                });
            }
        }
        Ok(corpus)
    }
}

/// `joins.jsonl` next to the corpus file.
pub fn default_joins_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_file_name("joins.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(json: &str) -> SchemaDocument {
        serde_json::from_str(json).unwrap()
    }

    fn ingest(docs: &[SchemaDocument]) -> Result<Corpus, CorpusError> {
        let p = Path::new("mem.json");
        Corpus::ingest(docs.iter().map(|d| (p, d)))
    }

    #[test]
    fn flatten_formats() {
        assert_eq!(flatten("db1", "A", &["x".into(), "y".into()]), "db1 | A | x, y");
        assert_eq!(flatten("db1", "A", &["x".into()]), "db1 | A | x");
    }

    #[test]
    fn token_counts() {
        // db1 | A | x , y
        assert_eq!(token_count("db1 | A | x, y"), 7);
        assert_eq!(token_count(""), 0);
        assert_eq!(token_count("select"), 1);
        assert_eq!(token_count("[THR]"), 3);
        assert_eq!(token_count("singer_id"), 3);
        assert_eq!(token_count("  a\t\nb  "), 2);
        assert_eq!(tokenize("db1 | A | x, y"), ["db1", "|", "A", "|", "x", ",", "y"]);
        assert_eq!(tokenize("héllo,wörld"), ["héllo", ",", "wörld"]);
    }

    #[test]
    fn single_fk_component() {
        let c = ingest(&[doc(
            r#"{"name":"db1","tables":[
                {"name":"A","columns":["x","y"],"foreign_keys":[{"column":"x","ref_table":"B","ref_column":"z"}]},
                {"name":"B","columns":["z"]}]}"#,
        )])
        .unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.joins().edges.contains(&("db1.A".to_string(), "db1.B".to_string())));
        assert_eq!(c.group_label("db1.A"), Some(0));
        assert_eq!(c.group_label("db1.B"), Some(0));
        assert_eq!(c.get("db1.A").unwrap().flattened_text, "db1 | A | x, y");
    }

    #[test]
    fn no_fks_gives_singletons() {
        let c = ingest(&[
            doc(r#"{"name":"d1","tables":[{"name":"A","columns":["a"]},{"name":"B","columns":["b"]}]}"#),
            doc(r#"{"name":"d2","tables":[{"name":"A","columns":["a"]}]}"#),
        ])
        .unwrap();
        assert_eq!(c.len(), 3);
        let labels: BTreeSet<_> = c.tables().iter().map(|t| c.group_label(&t.table_id)).collect();
        assert_eq!(labels.len(), 3);
        assert!(c.databases_with_joins().is_empty());
    }

    #[test]
    fn duplicate_table_rejected() {
        let err = ingest(&[doc(
            r#"{"name":"d","tables":[{"name":"A","columns":["a"]},{"name":"A","columns":["b"]}]}"#,
        )])
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateTable(ref id) if id == "d.A"), "{err}");
    }

    #[test]
    fn empty_columns_rejected() {
        let err = ingest(&[doc(r#"{"name":"d","tables":[{"name":"A","columns":[]}]}"#)]).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyColumns(ref id) if id == "d.A"));
    }

    #[test]
    fn unknown_fk_target_is_malformed() {
        let err = ingest(&[doc(
            r#"{"name":"d","tables":[{"name":"A","columns":["a"],"foreign_keys":[{"column":"a","ref_table":"Z","ref_column":"a"}]}]}"#,
        )])
        .unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { .. }));
        assert!(err.to_string().contains("mem.json"));
    }

    #[test]
    fn malformed_document_names_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.json"), "{\"name\": 3}").unwrap();
        let err = Corpus::ingest_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("bad.json"), "{err}");
    }

    #[test]
    fn duplicate_names_across_databases_stay_distinct() {
        let c = ingest(&[
            doc(r#"{"name":"a","tables":[{"name":"users","columns":["id"]}]}"#),
            doc(r#"{"name":"b","tables":[{"name":"users","columns":["id"]}]}"#),
        ])
        .unwrap();
        assert!(c.contains("a.users") && c.contains("b.users"));
    }

    #[test]
    fn self_reference_counts_as_join_declaration() {
        let c = ingest(&[doc(
            r#"{"name":"d","tables":[{"name":"emp","columns":["id","boss"],"foreign_keys":[{"column":"boss","ref_table":"emp","ref_column":"id"}]}]}"#,
        )])
        .unwrap();
        assert!(c.databases_with_joins().contains("d"));
        assert_eq!(c.group_label("d.emp"), Some(0));
    }

    #[test]
    fn jsonl_round_trip_and_tamper_detection() {
        let c = ingest(&[doc(
            r#"{"name":"db1","tables":[
                {"name":"A","columns":["x"],"foreign_keys":[{"column":"x","ref_table":"B","ref_column":"z"}]},
                {"name":"B","columns":["z"]},{"name":"C","columns":["w"]}]}"#,
        )])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("corpus.jsonl");
        let jp = default_joins_path(&cp);
        c.write_jsonl(&cp, &jp).unwrap();
        let back = Corpus::read_jsonl(&cp, &jp).unwrap();
        assert_eq!(back.tables(), c.tables());
        assert_eq!(back.joins(), c.joins());

        let text = std::fs::read_to_string(&cp).unwrap().replace("\"group_label\":1", "\"group_label\":0");
        std::fs::write(&cp, text).unwrap();
        assert!(matches!(
            Corpus::read_jsonl(&cp, &jp),
            Err(CorpusError::Inconsistent { .. })
        ));
    }

    #[test]
    fn retain_relabels_split_components() {
        let c = ingest(&[doc(
            r#"{"name":"d","tables":[
                {"name":"A","columns":["b"],"foreign_keys":[{"column":"b","ref_table":"B","ref_column":"id"}]},
                {"name":"B","columns":["id","c"],"foreign_keys":[{"column":"c","ref_table":"C","ref_column":"id"}]},
                {"name":"C","columns":["id"]}]}"#,
        )])
        .unwrap();
        assert_eq!(c.group_label("d.A"), c.group_label("d.C"));
        let cut = c.retain_tables(|t| t.table_name != "B");
        assert_eq!(cut.len(), 2);
        assert!(cut.joins().edges.is_empty());
        assert_ne!(cut.group_label("d.A"), cut.group_label("d.C"));
    }
}
