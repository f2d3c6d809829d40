use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fallball::CollisionEvent;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{EventFormat, ExperimentConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Output directory of one run. Every file written through it is digested
/// into the manifest.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: Vec<String>,
    pub diagnostics: Map<String, Value>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            diagnostics: Map::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn register(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.register(name);
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<File>, CliError> {
        let path = self.register(name);
        Ok(csv::Writer::from_path(path)?)
    }

    pub fn events(&mut self, format: EventFormat, n: usize) -> Result<EventSink, CliError> {
        match format {
            EventFormat::Csv => {
                let mut w = self.csv("events.csv")?;
                let mut header = vec!["t".to_string(), "sigma".to_string()];
                header.extend((1..=n).map(|i| format!("q_{i}")));
                header.extend((1..=n).map(|i| format!("v_pre_{i}")));
                header.extend((1..=n).map(|i| format!("v_post_{i}")));
                w.write_record(&header)?;
                Ok(EventSink::Csv(w))
            }
            EventFormat::Jsonl => {
                let path = self.register("events.jsonl");
                Ok(EventSink::Jsonl(BufWriter::new(File::create(path)?)))
            }
        }
    }

    pub fn diagnostic<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.diagnostics.insert(key.to_string(), v);
    }

    pub fn digests(&self) -> Vec<OutputDigest> {
        self.files
            .iter()
            .map(|name| OutputDigest {
                file: name.clone(),
                sha256: sha256_file(&self.root.join(name)).ok(),
            })
            .collect()
    }
}

pub enum EventSink {
    Csv(csv::Writer<File>),
    Jsonl(BufWriter<File>),
}

#[derive(Serialize)]
struct EventLine<'a> {
    t: f64,
    sigma: usize,
    q: &'a [f64],
    v_pre: &'a [f64],
    v_post: &'a [f64],
}

impl EventSink {
    /// Writes the contact positions and the velocities on both sides of the collision.
    pub fn write(&mut self, e: &CollisionEvent) -> Result<(), CliError> {
        match self {
            EventSink::Csv(w) => {
                let mut row = vec![fmt(e.t), e.sigma().to_string()];
                row.extend(e.q.iter().map(|&x| fmt(x)));
                row.extend(e.v_pre.iter().map(|&x| fmt(x)));
                row.extend(e.v_post.iter().map(|&x| fmt(x)));
                w.write_record(&row)?;
            }
            EventSink::Jsonl(w) => {
                serde_json::to_writer(
                    &mut *w,
                    &EventLine {
                        t: e.t,
                        sigma: e.sigma(),
                        q: &e.q,
                        v_pre: &e.v_pre,
                        v_post: &e.v_post,
                    },
                )?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<(), CliError> {
        match self {
            EventSink::Csv(mut w) => w.flush()?,
            EventSink::Jsonl(mut w) => w.flush()?,
        }
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: String,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub diagnostics: Map<String, Value>,
    pub outputs: Vec<OutputDigest>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}
