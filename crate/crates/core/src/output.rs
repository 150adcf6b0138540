//! Artifact writers: CSV and JSONL with embedded config hash and tool
//! version, fixed decimal formatting, LF endings, and an `_incomplete`
//! marker guarding partially written runs.

use crate::error::{CoagError, Result};
use crate::micro::CollisionEvent;
use crate::numeric::format_f64;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Output directory handle; creation drops an `_incomplete` marker that
/// `finish` removes once every artifact is on disk.
pub struct ArtifactDir {
    dir: PathBuf,
    config_hash: String,
}

impl ArtifactDir {
    pub fn create(dir: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("_incomplete"), b"")?;
        Ok(ArtifactDir {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Remove the marker; call exactly once, after the last artifact.
    pub fn finish(self) -> Result<()> {
        fs::remove_file(self.dir.join("_incomplete"))?;
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "# config_hash: {}\n# version: {}\n",
            self.config_hash, TOOL_VERSION
        )
    }

    /// CSV with a commented provenance header; cells are written as
    /// given, so format floats with `format_f64` upstream.
    pub fn write_csv<R, C>(&self, name: &str, columns: &[&str], rows: R) -> Result<()>
    where
        R: IntoIterator<Item = C>,
        C: IntoIterator<Item = String>,
    {
        let mut out = String::new();
        out.push_str(&self.header());
        out.push_str(&columns.join(","));
        out.push('\n');
        let n_cols = columns.len();
        for row in rows {
            let cells: Vec<String> = row.into_iter().collect();
            if cells.len() != n_cols {
                return Err(CoagError::Io(std::io::Error::other(format!(
                    "{name}: row width {} != {n_cols}",
                    cells.len()
                ))));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(self.dir.join(name), out)?;
        Ok(())
    }

    /// Collision events, one JSON object per line, float fields in the
    /// same fixed decimal form as the CSVs.
    pub fn write_events_jsonl(&self, name: &str, events: &[CollisionEvent]) -> Result<()> {
        let mut f = fs::File::create(self.dir.join(name))?;
        write!(f, "{}", self.header())?;
        for e in events {
            let pos: Vec<String> = e.new_pos.iter().map(|&x| format_f64(x)).collect();
            writeln!(
                f,
                "{{\"t\":{},\"id_a\":{},\"id_b\":{},\"mass_a\":{},\"mass_b\":{},\"new_id\":{},\"new_pos\":[{}],\"chose_first\":{}}}",
                format_f64(e.t),
                e.id_a,
                e.id_b,
                e.mass_a,
                e.mass_b,
                e.new_id,
                pos.join(","),
                e.chose_first
            )?;
        }
        Ok(())
    }

    /// Merged multi-replica event log, tagged with the replica index and
    /// ordered by it.
    pub fn write_replica_events_jsonl(
        &self,
        name: &str,
        replicas: &[(usize, &[CollisionEvent])],
    ) -> Result<()> {
        let mut f = fs::File::create(self.dir.join(name))?;
        write!(f, "{}", self.header())?;
        for (k, events) in replicas {
            for e in *events {
                let pos: Vec<String> = e.new_pos.iter().map(|&x| format_f64(x)).collect();
                writeln!(
                    f,
                    "{{\"replica\":{k},\"t\":{},\"id_a\":{},\"id_b\":{},\"mass_a\":{},\"mass_b\":{},\"new_id\":{},\"new_pos\":[{}],\"chose_first\":{}}}",
                    format_f64(e.t),
                    e.id_a,
                    e.id_b,
                    e.mass_a,
                    e.mass_b,
                    e.new_id,
                    pos.join(","),
                    e.chose_first
                )?;
            }
        }
        Ok(())
    }

    /// Long-format per-mass count series: t,mass,count.
    pub fn write_counts_csv(
        &self,
        name: &str,
        series: &[(f64, BTreeMap<u32, usize>)],
    ) -> Result<()> {
        let rows = series.iter().flat_map(|(t, counts)| {
            counts
                .iter()
                .map(move |(&mass, &count)| vec![format_f64(*t), mass.to_string(), count.to_string()])
        });
        self.write_csv(name, &["t", "mass", "count"], rows)
    }

    /// Pretty JSON report with the provenance embedded as fields.
    pub fn write_report_json(&self, name: &str, report: &serde_json::Value) -> Result<()> {
        let mut wrapped = serde_json::Map::new();
        wrapped.insert(
            "config_hash".to_string(),
            serde_json::Value::String(self.config_hash.clone()),
        );
        wrapped.insert(
            "version".to_string(),
            serde_json::Value::String(TOOL_VERSION.to_string()),
        );
        wrapped.insert("report".to_string(), report.clone());
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(wrapped))
            .map_err(|e| CoagError::Io(std::io::Error::other(e)))?;
        fs::write(self.dir.join(name), text + "\n")?;
        Ok(())
    }
}
