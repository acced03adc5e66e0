//! One JSON object per line; `#` lines carry the generating config.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::features::{Sample, VocabManifest};

pub const DATA_FILE: &str = "samples.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// Streams validated samples in file order.
pub struct SampleReader<'m, R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    manifest: &'m VocabManifest,
    line: usize,
}

impl<'m, R: BufRead> SampleReader<'m, R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, manifest: &'m VocabManifest) -> Self {
        Self {
            lines: reader.lines(),
            path: path.into(),
            manifest,
            line: 0,
        }
    }

    fn err(&self, msg: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg,
        }
    }

    fn check(&self, s: &Sample) -> Result<()> {
        let m = self.manifest;
        let k = m.num_attributes();
        let item = |what: &str, ids: &[usize]| -> Result<()> {
            if ids.len() != k {
                return Err(self.err(format!("{what} has {} attributes, expected {k}", ids.len())));
            }
            for (id, (name, size)) in ids.iter().zip(&m.attributes) {
                if id >= size {
                    return Err(self.err(format!("{what} {name} id {id} is outside vocabulary of {size}")));
                }
            }
            Ok(())
        };
        item("trigger", &s.trigger)?;
        item("target", &s.target)?;
        for row in &s.seq {
            item("behavior", row)?;
        }
        for (what, id, size) in [
            ("user", s.user, m.users),
            ("channel", s.channel, m.channels),
            ("time_bucket", s.time_bucket, m.time_buckets),
        ] {
            if id >= size {
                return Err(self.err(format!("{what} id {id} is outside vocabulary of {size}")));
            }
        }
        if s.label > 1 {
            return Err(self.err(format!("label must be 0 or 1, got {}", s.label)));
        }
        if !s.seq_ts.is_empty() && s.seq_ts.len() != s.seq.len() {
            return Err(self.err("seq_ts and seq differ in length".into()));
        }
        if s.seq_ts.iter().any(|&t| t >= s.ts) {
            return Err(self.err("behavior timestamp does not predate the impression".into()));
        }
        Ok(())
    }
}

impl<R: BufRead> Iterator for SampleReader<'_, R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let raw = match raw {
                Ok(r) => r,
                Err(e) => return Some(Err(self.err(e.to_string()))),
            };
            let text = raw.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let parsed = serde_json::from_str::<Sample>(text)
                .map_err(|e| self.err(e.to_string()))
                .and_then(|s| self.check(&s).map(|_| s));
            return Some(parsed);
        }
    }
}

pub fn read_dataset(path: &Path, manifest: &VocabManifest) -> Result<Vec<Sample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    SampleReader::new(BufReader::new(f), path, manifest).collect()
}

pub fn write_dataset(path: &Path, samples: &[Sample], header: &str) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e: std::io::Error| Error::io(path, e);
    for line in header.lines() {
        writeln!(w, "# {line}").map_err(io)?;
    }
    for s in samples {
        let json = serde_json::to_string(s).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(w, "{json}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `samples.jsonl` and `vocab.tsv` into `dir`.
pub fn write_dir(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = data.header();
    data.manifest.write(&dir.join(VOCAB_FILE), &header)?;
    write_dataset(&dir.join(DATA_FILE), &data.samples, &header)
}

pub fn load_dir(dir: &Path) -> Result<(VocabManifest, Vec<Sample>)> {
    let manifest = VocabManifest::read(&dir.join(VOCAB_FILE))?;
    let samples = read_dataset(&dir.join(DATA_FILE), &manifest)?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn manifest() -> VocabManifest {
        VocabManifest {
            attributes: vec![("item".into(), 5), ("brand".into(), 3)],
            users: 4,
            channels: 3,
            time_buckets: 2,
        }
    }

    fn sample() -> Sample {
        Sample {
            event: 3,
            day: 1,
            ts: 9,
            user: 2,
            channel: 1,
            time_bucket: 1,
            trigger: vec![1, 2],
            target: vec![4, 1],
            seq: vec![vec![3, 2], vec![1, 1]],
            seq_ts: vec![4, 7],
            label: 1,
        }
    }

    fn read(text: &str) -> Result<Vec<Sample>> {
        let m = manifest();
        SampleReader::new(Cursor::new(text.to_string()), "d", &m).collect()
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(read("").unwrap().is_empty());
        assert!(read("# only a header\n").unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let s = sample();
        write_dataset(&p, &[s.clone(), Sample { label: 0, ..s.clone() }], "seed = 1").unwrap();
        let back = read_dataset(&p, &manifest()).unwrap();
        assert_eq!(back, vec![s.clone(), Sample { label: 0, ..s }]);
    }

    #[test]
    fn truncated_line_is_an_error_with_position() {
        let line = serde_json::to_string(&sample()).unwrap();
        let text = format!("{line}\n{}", &line[..line.len() - 4]);
        let err = read(&text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn out_of_vocabulary_ids_are_rejected() {
        let mut s = sample();
        s.target[1] = 3;
        let err = read(&serde_json::to_string(&s).unwrap()).unwrap_err();
        assert!(err.to_string().contains("brand id 3"), "{err}");
        let mut s = sample();
        s.seq_ts[1] = 9;
        assert!(read(&serde_json::to_string(&s).unwrap()).is_err());
    }
}
