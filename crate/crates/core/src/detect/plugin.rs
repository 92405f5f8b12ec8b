//! External detectors run as subprocesses.
//!
//! The child receives the patch as a binary PPM on stdin and must print a
//! score map JSON document on stdout, then exit with status 0.

use std::io::{Read, Write};
use std::process::{Command, Stdio};

use super::{Detector, DetectorGeometry, ScoreMap};
use crate::error::{Error, Result};
use crate::pixmap::Pixmap;
use crate::pnm;

#[derive(Debug, Clone, PartialEq)]
pub struct SubprocessDetector {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub geometry: DetectorGeometry,
}

impl SubprocessDetector {
    pub fn new(command: Vec<String>, geometry: DetectorGeometry) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::invalid("empty plug-in command"));
        }
        geometry.validate()?;
        Ok(Self { command, geometry })
    }
}

impl Detector for SubprocessDetector {
    fn geometry(&self) -> DetectorGeometry {
        self.geometry
    }

    fn score_map(&self, patch: &Pixmap) -> Result<ScoreMap> {
        let t = self.geometry.train_input;
        if patch.width() < t || patch.height() < t {
            return Err(Error::invalid(format!("patch smaller than the {t}px detector input")));
        }
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Plugin(format!("cannot start `{}`: {e}", self.command[0])))?;
        let bytes = pnm::encode(patch);
        let mut stdin = child.stdin.take().expect("piped stdin");
        // Feed stdin from a separate thread so a child that writes before it
        // has read everything cannot deadlock us.
        let writer = std::thread::spawn(move || stdin.write_all(&bytes));
        let mut out = String::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_string(&mut out)
            .map_err(|e| Error::Plugin(format!("reading plug-in output: {e}")))?;
        let status = child.wait().map_err(|e| Error::Plugin(e.to_string()))?;
        let written = writer.join().map_err(|_| Error::Plugin("stdin writer panicked".into()))?;
        if !status.success() {
            return Err(Error::Plugin(format!("`{}` exited with {status}", self.command[0])));
        }
        written.map_err(|e| Error::Plugin(format!("writing patch to plug-in: {e}")))?;
        let map = ScoreMap::parse(&out).map_err(|e| Error::Plugin(e.to_string()))?;
        map.check_against(&self.geometry, patch.width(), patch.height())
            .map_err(|e| Error::Plugin(e.to_string()))?;
        Ok(map)
    }
}
