//! Posterior draw storage.
//!
//! Draws live on the constrained scale in the flat layout order of
//! [`ParamLayout`]. On disk: an 8-byte magic, a little-endian u32 JSON header
//! length, the JSON header (everything but the numeric payload), then the
//! draws chain-major as little-endian f64, then the optional per-observation
//! log-likelihood matrix in the same encoding.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::model::{ControlVariant, ParamLayout};

pub const DRAWS_MAGIC: &[u8; 8] = b"SSYMDRW1";

#[derive(Debug, Error)]
pub enum DrawsError {
    #[error("not a draws file (bad magic)")]
    BadMagic,
    #[error("draws payload truncated: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("draws header is inconsistent: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("draws header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Convergence and sampler-health summaries for one fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Rank-normalized split R-hat per parameter.
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub ess_tail: Vec<f64>,
    /// Post-warmup transitions that diverged, across all chains.
    pub divergent_transitions: usize,
    pub total_transitions: usize,
    pub max_depth_hits: usize,
    pub step_sizes: Vec<f64>,
    pub mean_accept: Vec<f64>,
    /// True when more than 10% of transitions diverged; results should not be
    /// interpreted.
    pub unreliable: bool,
    pub map_log_posterior: f64,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn min_ess_bulk(&self) -> f64 {
        self.ess_bulk.iter().cloned().fold(f64::INFINITY, f64::min)
    }
    pub fn min_ess_tail(&self) -> f64 {
        self.ess_tail.iter().cloned().fold(f64::INFINITY, f64::min)
    }
    pub fn divergence_rate(&self) -> f64 {
        if self.total_transitions == 0 {
            0.0
        } else {
            self.divergent_transitions as f64 / self.total_transitions as f64
        }
    }
}

/// A complete fit: labeled draws plus diagnostics, self-describing on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub category: String,
    pub variant: ControlVariant,
    pub layout: ParamLayout,
    pub levels: Vec<String>,
    pub language_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    pub param_names: Vec<String>,
    pub n_chains: usize,
    /// Kept draws per chain.
    pub n_draws: usize,
    pub n_obs: usize,
    pub seed: u64,
    pub diagnostics: Diagnostics,
    pub has_log_lik: bool,
    /// Chain-major draws on the constrained scale: `[chain][draw][param]`.
    #[serde(skip)]
    pub draws: Vec<f64>,
    /// `[chain][draw][observation]`, empty unless `has_log_lik`.
    #[serde(skip)]
    pub log_lik: Vec<f64>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    pub fn draw(&self, chain: usize, draw: usize) -> &[f64] {
        let dim = self.dim();
        let off = (chain * self.n_draws + draw) * dim;
        &self.draws[off..off + dim]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// One parameter as a chains x draws array.
    pub fn param_series(&self, param: usize) -> Array2<f64> {
        let dim = self.dim();
        Array2::from_shape_fn((self.n_chains, self.n_draws), |(c, d)| {
            self.draws[(c * self.n_draws + d) * dim + param]
        })
    }

    /// One parameter flattened across chains, chain-major.
    pub fn param_column(&self, param: usize) -> Vec<f64> {
        let dim = self.dim();
        (0..self.total_draws())
            .map(|i| self.draws[i * dim + param])
            .collect()
    }

    /// Pointwise log likelihood as a (total draws) x n_obs array.
    pub fn log_lik_matrix(&self) -> Option<Array2<f64>> {
        if !self.has_log_lik {
            return None;
        }
        Some(
            Array2::from_shape_vec((self.total_draws(), self.n_obs), self.log_lik.clone())
                .expect("log_lik length matches header"),
        )
    }

    fn expected_lens(&self) -> (usize, usize) {
        let d = self.total_draws() * self.dim();
        let l = if self.has_log_lik { self.total_draws() * self.n_obs } else { 0 };
        (d, l)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), DrawsError> {
        let (nd, nl) = self.expected_lens();
        if self.draws.len() != nd || self.log_lik.len() != nl {
            return Err(DrawsError::BadHeader(format!(
                "payload sizes {}/{} do not match header ({nd}/{nl})",
                self.draws.len(),
                self.log_lik.len()
            )));
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DRAWS_MAGIC)?;
        let header = serde_json::to_vec(self)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        for &v in self.draws.iter().chain(&self.log_lik) {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<PosteriorDraws, DrawsError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| DrawsError::BadMagic)?;
        if &magic != DRAWS_MAGIC {
            return Err(DrawsError::BadMagic);
        }
        let header_len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let mut out: PosteriorDraws = serde_json::from_slice(&header)?;
        let (nd, nl) = out.expected_lens();
        let expected = nd + nl;
        let mut payload = Vec::with_capacity(expected);
        for found in 0..expected {
            match r.read_f64::<LittleEndian>() {
                Ok(v) => payload.push(v),
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                    return Err(DrawsError::Truncated { expected, found });
                }
                Err(e) => return Err(e.into()),
            }
        }
        out.log_lik = payload.split_off(nd);
        out.draws = payload;
        Ok(out)
    }

    /// Draws as CSV with `chain,draw` index columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DrawsError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.param_names.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for chain in 0..self.n_chains {
            for draw in 0..self.n_draws {
                record.clear();
                record.push(chain.to_string());
                record.push(draw.to_string());
                record.extend(self.draw(chain, draw).iter().map(|v| v.to_string()));
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_draws() -> PosteriorDraws {
        let layout = ParamLayout { n_levels: 2, n_languages: 1, n_concepts: 1 };
        let dim = layout.dim();
        let n_chains = 2;
        let n_draws = 3;
        let n_obs = 2;
        PosteriorDraws {
            category: "voicing".into(),
            variant: ControlVariant::Full,
            layout,
            levels: vec!["unvoiced".into(), "voiced".into()],
            language_ids: vec!["l1".into()],
            concept_ids: vec!["c1".into()],
            param_names: (0..dim).map(|i| format!("p{i}")).collect(),
            n_chains,
            n_draws,
            n_obs,
            seed: 9,
            diagnostics: Diagnostics {
                rhat: vec![1.0; dim],
                ess_bulk: vec![6.0; dim],
                ess_tail: vec![6.0; dim],
                divergent_transitions: 0,
                total_transitions: 6,
                max_depth_hits: 0,
                step_sizes: vec![0.5, 0.6],
                mean_accept: vec![0.9, 0.92],
                unreliable: false,
                map_log_posterior: -12.5,
            },
            has_log_lik: true,
            draws: (0..n_chains * n_draws * dim).map(|i| i as f64 * 0.25).collect(),
            log_lik: (0..n_chains * n_draws * n_obs).map(|i| -(i as f64)).collect(),
        }
    }

    #[test]
    fn round_trip_binary() {
        let d = toy_draws();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.bin");
        d.save(&path).unwrap();
        let back = PosteriorDraws::load(&path).unwrap();
        assert_eq!(back.draws, d.draws);
        assert_eq!(back.log_lik, d.log_lik);
        assert_eq!(back.param_names, d.param_names);
        assert_eq!(back.variant, ControlVariant::Full);
        assert_eq!(back.diagnostics.step_sizes, d.diagnostics.step_sizes);
        // identical bytes when saved twice
        let path2 = dir.path().join("fit2.bin");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_detected() {
        let d = toy_draws();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.bin");
        d.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let corrupt = dir.path().join("corrupt.bin");
        std::fs::write(&corrupt, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            PosteriorDraws::load(&corrupt),
            Err(DrawsError::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[0] = b'X';
        std::fs::write(&corrupt, &flipped).unwrap();
        assert!(matches!(PosteriorDraws::load(&corrupt), Err(DrawsError::BadMagic)));
    }

    #[test]
    fn accessors_slice_correctly() {
        let d = toy_draws();
        let dim = d.dim();
        assert_eq!(d.draw(1, 2), &d.draws[(1 * 3 + 2) * dim..(1 * 3 + 2 + 1) * dim]);
        let series = d.param_series(0);
        assert_eq!(series.shape(), &[2, 3]);
        assert_eq!(series[(0, 1)], d.draw(0, 1)[0]);
        assert_eq!(d.param_column(1).len(), 6);
        let ll = d.log_lik_matrix().unwrap();
        assert_eq!(ll.shape(), &[6, 2]);
    }

    #[test]
    fn csv_export_has_index_columns() {
        let d = toy_draws();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("chain,draw,p0,"));
        assert_eq!(lines.count(), 6);
    }
}
