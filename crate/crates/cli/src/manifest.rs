//! Run manifests written next to every artifact.
//!
//! A manifest is a key-value file with four sections: `[run]` (command and
//! versions), `[params]` (every resolved setting), `[inputs]` and
//! `[outputs]` (one `role = sha256 path` line per file).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{KeyValueFile, Params};
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub params: Params,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn record(path: &Path) -> Result<FileRecord, CliError> {
    Ok(FileRecord {
        path: path.to_owned(),
        sha256: sha256_file(path)?,
    })
}

/// Manifest path for an artifact: `<artifact>.manifest`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

impl Manifest {
    pub fn render(&self) -> String {
        let files = |m: &BTreeMap<String, FileRecord>| {
            m.iter()
                .map(|(role, r)| (role.clone(), format!("{} {}", r.sha256, r.path.display())))
                .collect::<BTreeMap<_, _>>()
        };
        let run = BTreeMap::from([
            ("command".to_owned(), self.command.clone()),
            ("manifest_version".to_owned(), MANIFEST_VERSION.to_string()),
            ("vdae_version".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
        ]);
        let file = KeyValueFile {
            sections: BTreeMap::from([
                ("run".to_owned(), run),
                ("params".to_owned(), self.params.map().clone()),
                ("inputs".to_owned(), files(&self.inputs)),
                ("outputs".to_owned(), files(&self.outputs)),
            ]),
        };
        format!("# vdae run manifest\n{}", file.render())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.render()).map_err(|e| CliError::io(path, e))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let file = KeyValueFile::parse(text, origin)?;
        let bad = |m: String| CliError::data(format!("{origin}: {m}"));
        let run = file.section("run").ok_or_else(|| bad("missing [run] section".into()))?;
        let version = run.get("manifest_version").map(String::as_str).unwrap_or("");
        if version != MANIFEST_VERSION.to_string() {
            return Err(bad(format!("unsupported manifest version `{version}`")));
        }
        let command = run
            .get("command")
            .cloned()
            .ok_or_else(|| bad("missing command".into()))?;
        let files = |name: &str| -> Result<BTreeMap<String, FileRecord>, CliError> {
            let mut out = BTreeMap::new();
            for (role, v) in file.section(name).into_iter().flatten() {
                let (sha, path) = v
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed entry `{role}`")))?;
                out.insert(
                    role.clone(),
                    FileRecord {
                        path: PathBuf::from(path),
                        sha256: sha.to_owned(),
                    },
                );
            }
            Ok(out)
        };
        Ok(Manifest {
            command,
            params: Params::from_map(file.section("params").cloned().unwrap_or_default()),
            inputs: files("inputs")?,
            outputs: files("outputs")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips() {
        let mut params = Params::default();
        params.set("steps", "20");
        params.set("out", "/tmp/some-dir/s.csv");
        let rec = |p: &str| FileRecord {
            path: PathBuf::from(p),
            sha256: "00ff".into(),
        };
        let m = Manifest {
            command: "sample".into(),
            params,
            inputs: BTreeMap::from([("model".to_owned(), rec("/a b/m.vdae"))]),
            outputs: BTreeMap::from([("out".to_owned(), rec("/tmp/some-dir/s.csv"))]),
        };
        assert_eq!(Manifest::parse(&m.render(), "m").unwrap(), m);
    }

    #[test]
    fn wrong_version_is_a_data_error() {
        let e = Manifest::parse("[run]\ncommand = gen\nmanifest_version = 9\n", "m").unwrap_err();
        assert_eq!(e.code(), 3);
    }
}
