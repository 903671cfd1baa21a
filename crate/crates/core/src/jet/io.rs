use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{batch_tensor, Jet, Particle};
use crate::error::{Error, Result};
use crate::tensor::write_tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    label: usize,
    particles: Vec<[f64; 3]>,
}

/// Reads one JSON record per line; blank lines are skipped.
pub fn read_jets_from<R: Read>(reader: R) -> Result<Vec<Jet>> {
    let mut jets = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        let particles = rec
            .particles
            .iter()
            .map(|&[pt, deta, dphi]| Particle::new(pt, deta, dphi))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        jets.push(Jet::new(particles, rec.label));
    }
    Ok(jets)
}

pub fn read_jets(path: impl AsRef<Path>) -> Result<Vec<Jet>> {
    read_jets_from(File::open(path)?)
}

pub fn write_jets_to<W: Write>(writer: W, jets: &[Jet]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for jet in jets {
        let rec = Record {
            label: jet.label,
            particles: jet.particles.iter().map(Particle::features).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jets(path: impl AsRef<Path>, jets: &[Jet]) -> Result<()> {
    write_jets_to(File::create(path)?, jets)
}

/// Writes equally padded jets as one `[B, n, 3]` f32 tensor file.
pub fn write_padded_tensor(path: impl AsRef<Path>, jets: &[Jet]) -> Result<()> {
    let refs: Vec<&Jet> = jets.iter().collect();
    write_tensor(path, &batch_tensor::<f32>(&refs)?)
}
