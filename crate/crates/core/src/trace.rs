//! Energy traces of the backward update, with CSV/JSON/binary export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

/// One inner-iteration record: the per-subject energies plus snapshot hashes
/// of the latent and semantic state that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub subject_energies: Vec<f64>,
    pub total_energy: f64,
    pub latent_hash: u64,
    pub semantic_hash: u64,
}

/// Full record of one outer step's backward update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based position of this step in the sampling schedule.
    pub outer_step: usize,
    /// (image, subject) label per energy column.
    pub subject_labels: Vec<(usize, usize)>,
    pub e_start: Vec<f64>,
    pub e_final: Vec<f64>,
    /// Gradient steps taken.
    pub iterations: usize,
    pub converged: bool,
    pub entries: Vec<TraceEntry>,
    /// Optional per-iteration concatenated (latents ⊕ embeddings) vectors for
    /// external projection of the dual space.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dual_vectors: Vec<Vec<f64>>,
}

impl StepTrace {
    /// Invariant check: a converged step must satisfy the threshold exactly
    /// as recorded, per subject.
    pub fn threshold_holds(&self, k_thres: f64) -> bool {
        if !self.converged {
            return true;
        }
        self.e_final
            .iter()
            .zip(&self.e_start)
            .all(|(f, s)| *f <= k_thres * *s)
    }

    /// CSV rows: iteration, step, subject, energy.
    pub fn write_csv<W: Write>(&self, out: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "iteration,step,subject,energy")?;
        }
        for entry in &self.entries {
            for (subject, energy) in entry.subject_energies.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:.17e}",
                    entry.iteration, self.outer_step, subject, energy
                )?;
            }
        }
        Ok(())
    }
}

/// Serializes several step traces as one CSV document.
pub fn traces_to_csv(traces: &[StepTrace]) -> String {
    let mut buf = Vec::new();
    for (i, trace) in traces.iter().enumerate() {
        trace.write_csv(&mut buf, i == 0).expect("write to Vec");
    }
    String::from_utf8(buf).expect("csv is ascii")
}

/// Serializes step traces as JSON.
pub fn traces_to_json(traces: &[StepTrace]) -> String {
    serde_json::to_string_pretty(traces).expect("traces serialize")
}

/// Binary latent dump: an 8-byte shape header (rows and cols, little-endian
/// u32 each) followed by the row-major f64 payload.
pub fn latent_to_bytes(t: &Tensor) -> Result<Vec<u8>, TensorError> {
    let (rows, cols) = match t.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(TensorError::RankMismatch {
                op: "latent_to_bytes",
                expected: 2,
                shape: other.to_vec(),
            })
        }
    };
    let mut buf = Vec::with_capacity(8 + t.len() * 8);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Inverse of [`latent_to_bytes`].
pub fn latent_from_bytes(bytes: &[u8]) -> Result<Tensor, String> {
    if bytes.len() < 8 {
        return Err("latent dump shorter than its 8-byte header".into());
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(format!(
            "latent dump payload is {} bytes, expected {} for {}x{}",
            body.len(),
            rows * cols * 8,
            rows,
            cols
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![rows, cols], data).map_err(|e| e.to_string())
}
