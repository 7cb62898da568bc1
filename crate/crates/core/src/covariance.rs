//! Pairwise language distances and the Gaussian-process kernel built on them.
//!
//! Two structurally masked distance matrices feed the model:
//!
//! * **patristic**: within a family, the number of classification-tree edges
//!   between two leaves, normalized per family by that family's maximum;
//!   pairs from different families are masked;
//! * **areal**: great-circle kilometers over the cutoff (default 1000 km),
//!   masked unless both languages sit in the same macro-area, both have
//!   coordinates, and lie within the cutoff.
//!
//! A masked pair contributes exactly zero covariance; structurally the matrix
//! is block-diagonal up to row order (families, or connected components of
//! the areal graph).

use ndarray::Array2;
use thiserror::Error;

use crate::corpus::LanguageRecord;
use crate::linalg::cholesky;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
pub const DEFAULT_CUTOFF_KM: f64 = 1000.0;
const DEG2RAD: f64 = std::f64::consts::PI / 180.0;

/// Jitter ladder for the kernel Cholesky: start tiny, escalate, then give up.
const JITTERS: &[f64] = &[1e-8, 1e-7, 1e-6];

#[derive(Debug, Error)]
pub enum CovarianceError {
    #[error("kernel matrix is not positive definite even with jitter {jitter:e} (leading minor {minor})")]
    NotPositiveDefinite { minor: usize, jitter: f64 },
    #[error("kernel parameters must be positive: sigma={sigma}, phi={phi}")]
    BadKernelParams { sigma: f64, phi: f64 },
    #[error("distance matrix row {row} label `{label}` duplicated")]
    DuplicateLabel { row: usize, label: String },
    #[error("distance matrix is not square: {rows} rows, {cols} value columns")]
    NotSquare { rows: usize, cols: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Symmetric pairwise distances with a structural mask; `mask[i,j] == true`
/// means the pair is structurally unrelated and its covariance is pinned to
/// zero. The diagonal is never masked.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Groups indices into connected components of the unmasked graph
    /// (blocks of the implied block-diagonal kernel), each sorted, ordered by
    /// smallest member.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut root = i;
            while parent[root] != root {
                root = parent[root];
            }
            let mut cur = i;
            while parent[cur] != root {
                let next = parent[cur];
                parent[cur] = root;
                cur = next;
            }
            root
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if !self.mask[(i, j)] {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    /// Writes `id,<id...>` header plus one row per language; masked cells are
    /// empty fields.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), CovarianceError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].clone()];
            for j in 0..self.len() {
                rec.push(if self.mask[(i, j)] {
                    String::new()
                } else {
                    format!("{}", self.values[(i, j)])
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<DistanceMatrix, CovarianceError> {
        let mut rdr = csv::Reader::from_reader(input);
        let labels: Vec<String> = rdr.headers()?.iter().skip(1).map(|s| s.to_string()).collect();
        let n = labels.len();
        let mut values = Array2::zeros((n, n));
        let mut mask = Array2::from_elem((n, n), false);
        let mut seen = std::collections::BTreeSet::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != n + 1 {
                return Err(CovarianceError::NotSquare { rows: n, cols: rec.len() - 1 });
            }
            if !seen.insert(rec[0].to_string()) {
                return Err(CovarianceError::DuplicateLabel { row: i + 2, label: rec[0].into() });
            }
            for j in 0..n {
                let cell = &rec[j + 1];
                if cell.is_empty() {
                    mask[(i, j)] = true;
                } else {
                    values[(i, j)] = cell.parse().map_err(|_| CovarianceError::NotSquare {
                        rows: n,
                        cols: j,
                    })?;
                }
            }
        }
        Ok(DistanceMatrix { labels, values, mask })
    }
}

fn shared_prefix_len(a: &[String], b: &[String]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

/// Tree distance between classification leaves: edges from each language up
/// to the lowest common path node, summed, then normalized per family by the
/// family's maximum raw distance (a family whose members all share the full
/// path gets all-zero distances). Cross-family pairs are masked.
pub fn patristic_distance(languages: &[LanguageRecord]) -> DistanceMatrix {
    let n = languages.len();
    let mut values = Array2::zeros((n, n));
    let mut mask = Array2::from_elem((n, n), false);
    let mut raw = Array2::zeros((n, n));
    let mut family_max: std::collections::BTreeMap<&str, f64> = Default::default();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&languages[i], &languages[j]);
            if a.family_key() != b.family_key() {
                mask[(i, j)] = true;
                mask[(j, i)] = true;
                continue;
            }
            let lcp = shared_prefix_len(&a.family_path, &b.family_path);
            let d = (a.family_path.len() - lcp) as f64 + (b.family_path.len() - lcp) as f64;
            raw[(i, j)] = d;
            raw[(j, i)] = d;
            let m = family_max.entry(a.family_key()).or_insert(0.0);
            if d > *m {
                *m = d;
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if mask[(i, j)] {
                continue;
            }
            let fmax = family_max.get(languages[i].family_key()).copied().unwrap_or(0.0);
            let d = if fmax > 0.0 { raw[(i, j)] / fmax } else { 0.0 };
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    DistanceMatrix { labels: languages.iter().map(|l| l.id.clone()).collect(), values, mask }
}

/// Great-circle distance in kilometers (haversine on a spherical Earth).
pub fn geodesic_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0 * DEG2RAD, a.1 * DEG2RAD);
    let (lat2, lon2) = (b.0 * DEG2RAD, b.1 * DEG2RAD);
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Geographic proximity distances: kilometers divided by the cutoff, masked
/// unless both languages have coordinates, share a macro-area, and are within
/// `cutoff_km` of each other.
pub fn areal_distance(languages: &[LanguageRecord], cutoff_km: f64) -> DistanceMatrix {
    assert!(cutoff_km > 0.0, "cutoff must be positive");
    let n = languages.len();
    let mut values = Array2::zeros((n, n));
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&languages[i], &languages[j]);
            let related = match (a.coordinates(), b.coordinates(), a.macroarea, b.macroarea) {
                (Some(ca), Some(cb), Some(ma), Some(mb)) if ma == mb => {
                    let km = geodesic_km(ca, cb);
                    if km <= cutoff_km {
                        Some(km / cutoff_km)
                    } else {
                        None
                    }
                }
                _ => None,
            };
            match related {
                Some(d) => {
                    values[(i, j)] = d;
                    values[(j, i)] = d;
                }
                None => {
                    mask[(i, j)] = true;
                    mask[(j, i)] = true;
                }
            }
        }
    }
    DistanceMatrix { labels: languages.iter().map(|l| l.id.clone()).collect(), values, mask }
}

/// Exponential-decay kernel over a masked distance matrix, with its lower
/// Cholesky factor.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub matrix: Array2<f64>,
    pub cholesky: Array2<f64>,
    /// Diagonal jitter that was needed for the factorization.
    pub jitter: f64,
}

/// K[i,j] = sigma^2 exp(-phi d[i,j]) for unmasked pairs, exactly zero for
/// masked pairs, sigma^2 + jitter on the diagonal. Jitter starts at 1e-8 and
/// escalates tenfold to at most 1e-6 before failing.
pub fn kernel_matrix(
    dist: &DistanceMatrix,
    sigma: f64,
    phi: f64,
) -> Result<KernelMatrix, CovarianceError> {
    if !(sigma > 0.0) || !(phi > 0.0) {
        return Err(CovarianceError::BadKernelParams { sigma, phi });
    }
    let n = dist.len();
    let s2 = sigma * sigma;
    let mut base = Array2::zeros((n, n));
    for i in 0..n {
        base[(i, i)] = s2;
        for j in (i + 1)..n {
            if !dist.mask[(i, j)] {
                let v = s2 * (-phi * dist.values[(i, j)]).exp();
                base[(i, j)] = v;
                base[(j, i)] = v;
            }
        }
    }
    let mut last_minor = 0;
    for &jitter in JITTERS {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] = s2 + jitter;
        }
        match cholesky(&k) {
            Ok(l) => {
                if jitter > JITTERS[0] {
                    log::warn!("kernel needed escalated jitter {jitter:e}");
                }
                return Ok(KernelMatrix { matrix: k, cholesky: l, jitter });
            }
            Err(minor) => last_minor = minor,
        }
    }
    Err(CovarianceError::NotPositiveDefinite {
        minor: last_minor,
        jitter: *JITTERS.last().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Macroarea;
    use approx::assert_relative_eq;

    fn lang(id: &str, path: &str, coords: Option<(f64, f64)>, area: Option<Macroarea>) -> LanguageRecord {
        LanguageRecord {
            id: id.to_string(),
            name: id.to_string(),
            glottocode: "abcd1234".to_string(),
            latitude: coords.map(|c| c.0),
            longitude: coords.map(|c| c.1),
            macroarea: area,
            family_path: if path.is_empty() {
                Vec::new()
            } else {
                path.split('/').map(String::from).collect()
            },
        }
    }

    #[test]
    fn patristic_siblings_normalized_by_family_max() {
        // siblings under f/x at depth 3, deepest pair spans raw distance 6
        let langs = vec![
            lang("a", "f/x", None, None),
            lang("b", "f/x", None, None),
            lang("c", "f/y/q/r", None, None),
            lang("d", "f/z/s/t", None, None),
            lang("e", "", None, None),
        ];
        let d = patristic_distance(&langs);
        // a,b: (2-2)+(2-2)=0? both paths equal -> raw 0
        assert_eq!(d.values[(0, 1)], 0.0);
        assert!(!d.mask[(0, 1)]);
        // c,d: lcp=1 -> (4-1)+(4-1)=6; a,c: lcp=1 -> (2-1)+(4-1)=4
        // family max raw = 6 (c,d). So c,d -> 1.0 and a,c -> 4/6
        assert_relative_eq!(d.values[(2, 3)], 1.0);
        assert_relative_eq!(d.values[(0, 2)], 2.0 / 3.0);
        // isolate is masked against everyone but itself
        assert!(d.mask[(0, 4)] && d.mask[(4, 2)]);
        assert!(!d.mask[(4, 4)]);
        assert_eq!(d.values[(4, 4)], 0.0);
    }

    #[test]
    fn patristic_sibling_share_of_deeper_family() {
        // two siblings at depth 3 plus a pair spanning raw distance 6
        let langs = vec![
            lang("a", "f/x/g", None, None),
            lang("b", "f/x/h", None, None),
            lang("c", "f/p/q", None, None),
            lang("d", "f/r/s", None, None),
        ];
        let d = patristic_distance(&langs);
        // a,b: lcp 2 -> raw 2; c,d: lcp 1 -> raw 4; a,c: raw 4; family max 4
        assert_relative_eq!(d.values[(0, 1)], 0.5);
        // with a family max of 6 the sibling share is 1/3: deepen the family
        let langs6 = vec![
            lang("a", "f/x/g", None, None),
            lang("b", "f/x/h", None, None),
            lang("c", "f/p/q/u", None, None),
            lang("d", "f/r/s/w", None, None),
        ];
        let d6 = patristic_distance(&langs6);
        // c,d: lcp 1 -> (4-1)+(4-1) = 6 is the family max; siblings a,b raw 2
        assert_relative_eq!(d6.values[(0, 1)], 1.0 / 3.0);
        // both same family so unmasked
        assert!(!d6.mask[(0, 3)]);
    }

    #[test]
    fn geodesic_known_distances() {
        let one_degree = geodesic_km((0.0, 0.0), (0.0, 1.0));
        assert!((one_degree - 111.195).abs() < 1e-3, "got {one_degree}");
        let antipodal = geodesic_km((0.0, 0.0), (0.0, 180.0));
        assert_relative_eq!(antipodal, std::f64::consts::PI * EARTH_RADIUS_KM, epsilon = 1e-6);
        assert_eq!(geodesic_km((45.0, 45.0), (45.0, 45.0)), 0.0);
        // symmetric
        assert_eq!(
            geodesic_km((12.0, 99.0), (-33.0, 151.0)),
            geodesic_km((-33.0, 151.0), (12.0, 99.0))
        );
    }

    #[test]
    fn areal_masking_rules() {
        let area = Some(Macroarea::Eurasia);
        let langs = vec![
            lang("a", "", Some((0.0, 0.0)), area),
            lang("b", "", Some((0.0, 1.0)), area),            // ~111 km
            lang("c", "", Some((0.0, 20.0)), area),           // > 1000 km
            lang("d", "", Some((0.0, 2.0)), Some(Macroarea::Africa)), // other area
            lang("e", "", None, area),                        // no coordinates
        ];
        let d = areal_distance(&langs, DEFAULT_CUTOFF_KM);
        assert!(!d.mask[(0, 1)]);
        // pi * 6371.0088 / 180 km for one equatorial degree
        assert_relative_eq!(d.values[(0, 1)], 111.1950802335329 / 1000.0, epsilon = 1e-9);
        assert!(d.mask[(0, 2)], "beyond cutoff must be masked");
        assert!(d.mask[(0, 3)], "different macro-area must be masked");
        assert!(d.mask[(0, 4)], "missing coordinates must be masked");
        assert!(!d.mask[(4, 4)]);
    }

    #[test]
    fn areal_cutoff_boundary_inclusive() {
        let area = Some(Macroarea::Africa);
        // 1 degree of longitude at the equator is ~111.195 km; 8.993 degrees
        // is just inside 1000 km, 9.1 degrees just outside.
        let langs = vec![
            lang("a", "", Some((0.0, 0.0)), area),
            lang("b", "", Some((0.0, 8.9)), area),
            lang("c", "", Some((0.0, 9.1)), area),
        ];
        let d = areal_distance(&langs, DEFAULT_CUTOFF_KM);
        assert!(!d.mask[(0, 1)]);
        assert!(d.values[(0, 1)] < 1.0);
        assert!(d.mask[(0, 2)]);
    }

    #[test]
    fn kernel_zeroes_masked_pairs_and_factors() {
        let area = Some(Macroarea::Papunesia);
        let langs = vec![
            lang("a", "", Some((0.0, 0.0)), area),
            lang("b", "", Some((0.0, 3.0)), area),
            lang("c", "", Some((0.0, 30.0)), area),
            lang("d", "", Some((0.1, 30.0)), area),
        ];
        let d = areal_distance(&langs, DEFAULT_CUTOFF_KM);
        let k = kernel_matrix(&d, 0.8, 2.0).unwrap();
        assert_eq!(k.matrix[(0, 2)], 0.0);
        assert_eq!(k.matrix[(1, 3)], 0.0);
        assert!(k.matrix[(0, 1)] > 0.0);
        assert_relative_eq!(k.matrix[(0, 0)], 0.64 + k.jitter);
        assert_eq!(k.jitter, 1e-8);
        let recon = k.cholesky.dot(&k.cholesky.t());
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(recon[(i, j)], k.matrix[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn kernel_rejects_indefinite_chain() {
        // A-B and B-C nearly perfectly correlated but A-C masked: indefinite
        // beyond any allowed jitter.
        let area = Some(Macroarea::Australia);
        let langs = vec![
            lang("a", "", Some((0.0, 0.0)), area),
            lang("b", "", Some((0.0, 7.2)), area),
            lang("c", "", Some((0.0, 14.4)), area),
        ];
        let d = areal_distance(&langs, DEFAULT_CUTOFF_KM);
        assert!(d.mask[(0, 2)]);
        let err = kernel_matrix(&d, 1.0, 0.05).unwrap_err();
        match err {
            CovarianceError::NotPositiveDefinite { minor, jitter } => {
                assert_eq!(minor, 3);
                assert_eq!(jitter, 1e-6);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn kernel_rejects_bad_params() {
        let langs = vec![lang("a", "f", None, None)];
        let d = patristic_distance(&langs);
        assert!(kernel_matrix(&d, 0.0, 1.0).is_err());
        assert!(kernel_matrix(&d, 1.0, -2.0).is_err());
    }

    #[test]
    fn blocks_partition_families_and_components() {
        let area = Some(Macroarea::Eurasia);
        let langs = vec![
            lang("a", "f1/x", Some((0.0, 0.0)), area),
            lang("b", "f2/x", Some((0.0, 1.0)), area),
            lang("c", "f1/y", Some((40.0, 100.0)), area),
            lang("d", "f2/y", Some((40.0, 101.0)), area),
        ];
        let pd = patristic_distance(&langs);
        assert_eq!(pd.blocks(), vec![vec![0, 2], vec![1, 3]]);
        let ad = areal_distance(&langs, DEFAULT_CUTOFF_KM);
        assert_eq!(ad.blocks(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn distance_csv_round_trip() {
        let langs = vec![
            lang("a", "f/x", None, None),
            lang("b", "f/y", None, None),
            lang("c", "", None, None),
        ];
        let d = patristic_distance(&langs);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,a,b,c"));
        let back = DistanceMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.labels, d.labels);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(back.mask[(i, j)], d.mask[(i, j)]);
                assert_eq!(back.values[(i, j)], d.values[(i, j)]);
            }
        }
    }
}
