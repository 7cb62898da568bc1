//! Wordlist ingestion: languages, concepts, and segmented forms.
//!
//! Input is three CSV tables. Languages carry a glottocode, optional
//! coordinates, an optional macro-area, and a `/`-joined classification path;
//! concepts carry membership flags for the three basic-vocabulary lists;
//! forms reference a language and a concept and hold space-separated segment
//! tokens. All references are validated at parse time and the corpus keeps
//! its languages and concepts sorted by id so downstream indexing is stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phonology::{classify_segment, SoundClass};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file} row {row}: {message}")]
    BadRow { file: String, row: usize, message: String },
    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: String, column: &'static str },
    #[error("duplicate language id `{0}`")]
    DuplicateLanguage(String),
    #[error("duplicate concept id `{0}`")]
    DuplicateConcept(String),
    #[error("filtering removed every language (before: {languages_before} languages, {forms_before} forms; excluded {excluded} languages, kept {concepts_kept} concepts)")]
    FilterEmptied {
        languages_before: usize,
        forms_before: usize,
        excluded: usize,
        concepts_kept: usize,
    },
    #[error("corpus file has bad magic; expected a corpus written by this tool")]
    BadMagic,
    #[error("corpus file version {0} is not supported")]
    BadVersion(u32),
    #[error("csv error in {file}: {source}")]
    Csv { file: String, source: csv::Error },
    #[error("io error on {file}: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("serialization error: {0}")]
    Bincode(#[from] Box<bincode::ErrorKind>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Macroarea {
    Africa,
    Australia,
    Eurasia,
    NorthAmerica,
    Papunesia,
    SouthAmerica,
}

impl Macroarea {
    pub const ALL: &'static [Macroarea] = &[
        Macroarea::Africa,
        Macroarea::Australia,
        Macroarea::Eurasia,
        Macroarea::NorthAmerica,
        Macroarea::Papunesia,
        Macroarea::SouthAmerica,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Macroarea::Africa => "Africa",
            Macroarea::Australia => "Australia",
            Macroarea::Eurasia => "Eurasia",
            Macroarea::NorthAmerica => "North America",
            Macroarea::Papunesia => "Papunesia",
            Macroarea::SouthAmerica => "South America",
        }
    }
}

impl fmt::Display for Macroarea {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Macroarea {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Macroarea::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown macro-area `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageRecord {
    pub id: String,
    pub name: String,
    pub glottocode: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub macroarea: Option<Macroarea>,
    /// Classification node ids from root to the leaf's parent; empty for
    /// isolates.
    pub family_path: Vec<String>,
}

impl LanguageRecord {
    /// Top-level family node, or the language itself for isolates.
    pub fn family_key(&self) -> &str {
        self.family_path.first().map(String::as_str).unwrap_or(&self.id)
    }

    pub fn coordinates(&self) -> Option<(f64, f64)> {
        Some((self.latitude?, self.longitude?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub id: String,
    pub gloss: String,
    pub swadesh100: bool,
    pub tadmor100: bool,
    pub holman40: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormRecord {
    pub id: String,
    pub language_id: String,
    pub concept_id: String,
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub languages: Vec<LanguageRecord>,
    pub concepts: Vec<ConceptRecord>,
    pub forms: Vec<FormRecord>,
    lang_index: BTreeMap<String, usize>,
    concept_index: BTreeMap<String, usize>,
}

fn is_valid_glottocode(code: &str) -> bool {
    let bytes = code.as_bytes();
    bytes.len() == 8
        && bytes[..4].iter().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
        && bytes[4..].iter().all(|b| b.is_ascii_digit())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" => Some(true),
        "false" | "0" | "" => Some(false),
        _ => None,
    }
}

struct Header {
    idx: BTreeMap<String, usize>,
    file: String,
}

impl Header {
    fn new(file: &str, headers: &csv::StringRecord) -> Header {
        let idx = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        Header { idx, file: file.to_string() }
    }

    fn col(&self, name: &'static str) -> Result<usize, CorpusError> {
        self.idx.get(name).copied().ok_or(CorpusError::MissingColumn {
            file: self.file.clone(),
            column: name,
        })
    }
}

fn bad_row(file: &str, row: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::BadRow { file: file.to_string(), row, message: message.into() }
}

/// Parses the language table (columns `ID,Name,Glottocode,Latitude,Longitude,
/// Macroarea,Family_Path`).
pub fn parse_languages<R: Read>(reader: R, file: &str) -> Result<Vec<LanguageRecord>, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = Header::new(
        file,
        &rdr.headers().map_err(|e| CorpusError::Csv { file: file.into(), source: e })?.clone(),
    );
    let (c_id, c_name, c_glotto) = (header.col("ID")?, header.col("Name")?, header.col("Glottocode")?);
    let (c_lat, c_lon) = (header.col("Latitude")?, header.col("Longitude")?);
    let (c_area, c_path) = (header.col("Macroarea")?, header.col("Family_Path")?);

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CorpusError::Csv { file: file.into(), source: e })?;
        let id = rec[c_id].to_string();
        if id.is_empty() {
            return Err(bad_row(file, row, "empty language ID"));
        }
        let glottocode = rec[c_glotto].to_string();
        if !is_valid_glottocode(&glottocode) {
            return Err(bad_row(file, row, format!("invalid glottocode `{glottocode}`")));
        }
        let parse_coord = |s: &str, name: &str, lo: f64, hi: f64| -> Result<Option<f64>, CorpusError> {
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| bad_row(file, row, format!("unparseable {name} `{s}`")))?;
            if !(lo..=hi).contains(&v) {
                return Err(bad_row(file, row, format!("{name} {v} outside [{lo}, {hi}]")));
            }
            Ok(Some(v))
        };
        let latitude = parse_coord(&rec[c_lat], "latitude", -90.0, 90.0)?;
        let longitude = parse_coord(&rec[c_lon], "longitude", -180.0, 180.0)?;
        let macroarea = if rec[c_area].is_empty() {
            None
        } else {
            Some(rec[c_area].parse::<Macroarea>().map_err(|e| bad_row(file, row, e))?)
        };
        let family_path: Vec<String> = if rec[c_path].is_empty() {
            Vec::new()
        } else {
            rec[c_path].split('/').map(|s| s.to_string()).collect()
        };
        if family_path.iter().any(|n| n.is_empty()) {
            return Err(bad_row(file, row, "family path contains an empty node id"));
        }
        out.push(LanguageRecord {
            id,
            name: rec[c_name].to_string(),
            glottocode,
            latitude,
            longitude,
            macroarea,
            family_path,
        });
    }
    Ok(out)
}

/// Parses the concept table (columns `ID,Gloss,Swadesh100,Tadmor100,Holman40`).
pub fn parse_concepts<R: Read>(reader: R, file: &str) -> Result<Vec<ConceptRecord>, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = Header::new(
        file,
        &rdr.headers().map_err(|e| CorpusError::Csv { file: file.into(), source: e })?.clone(),
    );
    let (c_id, c_gloss) = (header.col("ID")?, header.col("Gloss")?);
    let (c_sw, c_ta, c_ho) = (
        header.col("Swadesh100")?,
        header.col("Tadmor100")?,
        header.col("Holman40")?,
    );
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CorpusError::Csv { file: file.into(), source: e })?;
        let id = rec[c_id].to_string();
        if id.is_empty() {
            return Err(bad_row(file, row, "empty concept ID"));
        }
        let flag = |s: &str, name: &str| {
            parse_bool(s).ok_or_else(|| bad_row(file, row, format!("bad boolean `{s}` in {name}")))
        };
        out.push(ConceptRecord {
            id,
            gloss: rec[c_gloss].to_string(),
            swadesh100: flag(&rec[c_sw], "Swadesh100")?,
            tadmor100: flag(&rec[c_ta], "Tadmor100")?,
            holman40: flag(&rec[c_ho], "Holman40")?,
        });
    }
    Ok(out)
}

/// Parses the form table (columns `ID,Language_ID,Concept_ID,Segments`;
/// segments are space-separated tokens).
pub fn parse_forms<R: Read>(reader: R, file: &str) -> Result<Vec<FormRecord>, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = Header::new(
        file,
        &rdr.headers().map_err(|e| CorpusError::Csv { file: file.into(), source: e })?.clone(),
    );
    let (c_id, c_lang, c_concept, c_seg) = (
        header.col("ID")?,
        header.col("Language_ID")?,
        header.col("Concept_ID")?,
        header.col("Segments")?,
    );
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CorpusError::Csv { file: file.into(), source: e })?;
        let language_id = rec[c_lang].to_string();
        let concept_id = rec[c_concept].to_string();
        if language_id.is_empty() || concept_id.is_empty() {
            return Err(bad_row(file, row, "form must reference a language and a concept"));
        }
        let segments: Vec<String> = rec[c_seg]
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        if segments.is_empty() {
            return Err(bad_row(file, row, "form has no segments"));
        }
        out.push(FormRecord {
            id: rec[c_id].to_string(),
            language_id,
            concept_id,
            segments,
        });
    }
    Ok(out)
}

impl Corpus {
    /// Assembles and cross-validates a corpus from parsed tables.
    pub fn new(
        mut languages: Vec<LanguageRecord>,
        mut concepts: Vec<ConceptRecord>,
        mut forms: Vec<FormRecord>,
    ) -> Result<Corpus, CorpusError> {
        languages.sort_by(|a, b| a.id.cmp(&b.id));
        concepts.sort_by(|a, b| a.id.cmp(&b.id));
        forms.sort_by(|a, b| {
            (&a.language_id, &a.concept_id, &a.id).cmp(&(&b.language_id, &b.concept_id, &b.id))
        });
        let mut lang_index = BTreeMap::new();
        for (i, l) in languages.iter().enumerate() {
            if lang_index.insert(l.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateLanguage(l.id.clone()));
            }
        }
        let mut concept_index = BTreeMap::new();
        for (i, c) in concepts.iter().enumerate() {
            if concept_index.insert(c.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateConcept(c.id.clone()));
            }
        }
        for (i, f) in forms.iter().enumerate() {
            if !lang_index.contains_key(&f.language_id) {
                return Err(bad_row(
                    "forms",
                    i + 1,
                    format!("form `{}` references unknown language `{}`", f.id, f.language_id),
                ));
            }
            if !concept_index.contains_key(&f.concept_id) {
                return Err(bad_row(
                    "forms",
                    i + 1,
                    format!("form `{}` references unknown concept `{}`", f.id, f.concept_id),
                ));
            }
        }
        Ok(Corpus { languages, concepts, forms, lang_index, concept_index })
    }

    pub fn language_index(&self, id: &str) -> Option<usize> {
        self.lang_index.get(id).copied()
    }

    pub fn concept_index(&self, id: &str) -> Option<usize> {
        self.concept_index.get(id).copied()
    }

    pub fn read_csv_files(
        languages: &Path,
        concepts: &Path,
        forms: &Path,
    ) -> Result<Corpus, CorpusError> {
        let open = |p: &Path| -> Result<BufReader<File>, CorpusError> {
            File::open(p)
                .map(BufReader::new)
                .map_err(|e| CorpusError::Io { file: p.display().to_string(), source: e })
        };
        let langs = parse_languages(open(languages)?, &languages.display().to_string())?;
        let cons = parse_concepts(open(concepts)?, &concepts.display().to_string())?;
        let fs = parse_forms(open(forms)?, &forms.display().to_string())?;
        Corpus::new(langs, cons, fs)
    }

    /// Binary snapshot (magic + version + payload).
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        out.write_all(b"SSYMCOR1")
            .map_err(|e| CorpusError::Io { file: "<corpus>".into(), source: e })?;
        bincode::serialize_into(out, self)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Corpus, CorpusError> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| CorpusError::Io { file: "<corpus>".into(), source: e })?;
        if &magic[..7] != b"SSYMCOR" {
            return Err(CorpusError::BadMagic);
        }
        if magic[7] != b'1' {
            return Err(CorpusError::BadVersion((magic[7] - b'0') as u32));
        }
        let corpus: Corpus = bincode::deserialize_from(input)?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let f = File::create(path)
            .map_err(|e| CorpusError::Io { file: path.display().to_string(), source: e })?;
        self.write_binary(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Corpus, CorpusError> {
        let f = File::open(path)
            .map_err(|e| CorpusError::Io { file: path.display().to_string(), source: e })?;
        Corpus::read_binary(BufReader::new(f))
    }

    pub fn write_languages_csv<W: Write>(&self, out: W) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_writer(out);
        let werr = |e: csv::Error| CorpusError::Csv { file: "languages".into(), source: e };
        w.write_record(["ID", "Name", "Glottocode", "Latitude", "Longitude", "Macroarea", "Family_Path"])
            .map_err(werr)?;
        for l in &self.languages {
            w.write_record([
                l.id.clone(),
                l.name.clone(),
                l.glottocode.clone(),
                l.latitude.map(|v| v.to_string()).unwrap_or_default(),
                l.longitude.map(|v| v.to_string()).unwrap_or_default(),
                l.macroarea.map(|m| m.to_string()).unwrap_or_default(),
                l.family_path.join("/"),
            ])
            .map_err(werr)?;
        }
        w.flush().map_err(|e| CorpusError::Io { file: "languages".into(), source: e })
    }

    pub fn write_concepts_csv<W: Write>(&self, out: W) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_writer(out);
        let werr = |e: csv::Error| CorpusError::Csv { file: "concepts".into(), source: e };
        w.write_record(["ID", "Gloss", "Swadesh100", "Tadmor100", "Holman40"]).map_err(werr)?;
        for c in &self.concepts {
            w.write_record([
                c.id.clone(),
                c.gloss.clone(),
                c.swadesh100.to_string(),
                c.tadmor100.to_string(),
                c.holman40.to_string(),
            ])
            .map_err(werr)?;
        }
        w.flush().map_err(|e| CorpusError::Io { file: "concepts".into(), source: e })
    }

    pub fn write_forms_csv<W: Write>(&self, out: W) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_writer(out);
        let werr = |e: csv::Error| CorpusError::Csv { file: "forms".into(), source: e };
        w.write_record(["ID", "Language_ID", "Concept_ID", "Segments"]).map_err(werr)?;
        for f in &self.forms {
            w.write_record([
                f.id.clone(),
                f.language_id.clone(),
                f.concept_id.clone(),
                f.segments.join(" "),
            ])
            .map_err(werr)?;
        }
        w.flush().map_err(|e| CorpusError::Io { file: "forms".into(), source: e })
    }
}

/// Restricts a corpus to an optional concept whitelist and drops excluded
/// languages; languages and concepts left with no forms are removed from the
/// index. Filtering is idempotent. Removing everything is an error.
pub fn filter_corpus(
    corpus: &Corpus,
    keep_concepts: Option<&BTreeSet<String>>,
    exclude_languages: &BTreeSet<String>,
) -> Result<Corpus, CorpusError> {
    let forms: Vec<FormRecord> = corpus
        .forms
        .iter()
        .filter(|f| !exclude_languages.contains(&f.language_id))
        .filter(|f| keep_concepts.map_or(true, |ks| ks.contains(&f.concept_id)))
        .cloned()
        .collect();
    let used_langs: BTreeSet<&String> = forms.iter().map(|f| &f.language_id).collect();
    let used_concepts: BTreeSet<&String> = forms.iter().map(|f| &f.concept_id).collect();
    let languages: Vec<LanguageRecord> = corpus
        .languages
        .iter()
        .filter(|l| used_langs.contains(&l.id))
        .cloned()
        .collect();
    let concepts: Vec<ConceptRecord> = corpus
        .concepts
        .iter()
        .filter(|c| used_concepts.contains(&c.id))
        .cloned()
        .collect();
    if languages.is_empty() || forms.is_empty() {
        return Err(CorpusError::FilterEmptied {
            languages_before: corpus.languages.len(),
            forms_before: corpus.forms.len(),
            excluded: exclude_languages.len(),
            concepts_kept: keep_concepts.map_or(corpus.concepts.len(), |k| k.len()),
        });
    }
    Corpus::new(languages, concepts, forms)
}

/// Corpus-level summary used for reporting and sanity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_languages: usize,
    pub n_concepts: usize,
    pub n_forms: usize,
    pub n_phones: usize,
    pub n_families: usize,
    pub n_isolates: usize,
    /// Vowels over classified phones (vowels + consonants); `None` when the
    /// corpus has no classified phones at all.
    pub vowel_share: Option<f64>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut n_phones = 0usize;
    let mut vowels = 0usize;
    let mut consonants = 0usize;
    let mut unknown = 0usize;
    for form in &corpus.forms {
        for token in &form.segments {
            n_phones += 1;
            match classify_segment(token).sound_class {
                SoundClass::Vowel => vowels += 1,
                SoundClass::Consonant => consonants += 1,
                SoundClass::Other => unknown += 1,
            }
        }
    }
    if unknown > 0 {
        log::info!("{unknown} of {n_phones} phones could not be classified");
    }
    let families: BTreeSet<&str> = corpus.languages.iter().map(|l| l.family_key()).collect();
    let n_isolates = corpus.languages.iter().filter(|l| l.family_path.is_empty()).count();
    let classified = vowels + consonants;
    CorpusStats {
        n_languages: corpus.languages.len(),
        n_concepts: corpus.concepts.len(),
        n_forms: corpus.forms.len(),
        n_phones,
        n_families: families.len(),
        n_isolates,
        vowel_share: if classified > 0 { Some(vowels as f64 / classified as f64) } else { None },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LANGS: &str = "ID,Name,Glottocode,Latitude,Longitude,Macroarea,Family_Path\n\
lang1,One,abcd1234,10.5,-20.25,Eurasia,fam1/node1\n\
lang2,Two,efgh5678,,,South America,fam1/node2\n\
lang3,Three,ijkl9012,-5.0,100.0,Papunesia,\n";
    const CONCEPTS: &str = "ID,Gloss,Swadesh100,Tadmor100,Holman40\n\
c1,water,true,true,false\n\
c2,stone,false,true,true\n";
    const FORMS: &str = "ID,Language_ID,Concept_ID,Segments\n\
f1,lang1,c1,k a\n\
f2,lang2,c1,n i\n\
f3,lang2,c2,t u m\n";

    fn sample() -> Corpus {
        let l = parse_languages(LANGS.as_bytes(), "languages").unwrap();
        let c = parse_concepts(CONCEPTS.as_bytes(), "concepts").unwrap();
        let f = parse_forms(FORMS.as_bytes(), "forms").unwrap();
        Corpus::new(l, c, f).unwrap()
    }

    #[test]
    fn parses_and_indexes() {
        let corpus = sample();
        assert_eq!(corpus.languages.len(), 3);
        assert_eq!(corpus.language_index("lang2"), Some(1));
        assert_eq!(corpus.languages[1].macroarea, Some(Macroarea::SouthAmerica));
        assert_eq!(corpus.languages[0].family_path, vec!["fam1", "node1"]);
        assert!(corpus.languages[2].family_path.is_empty());
        assert_eq!(corpus.languages[2].family_key(), "lang3");
        assert_eq!(corpus.forms[0].segments, vec!["k", "a"]);
    }

    #[test]
    fn rejects_bad_records() {
        let bad_glotto = LANGS.replace("abcd1234", "Abcd1234");
        assert!(parse_languages(bad_glotto.as_bytes(), "languages").is_err());
        let bad_lat = LANGS.replace("10.5", "95.0");
        assert!(parse_languages(bad_lat.as_bytes(), "languages").is_err());
        let bad_area = LANGS.replace("Eurasia", "Atlantis");
        assert!(parse_languages(bad_area.as_bytes(), "languages").is_err());
        let bad_flag = CONCEPTS.replace("true,true,false", "yes,true,false");
        assert!(parse_concepts(bad_flag.as_bytes(), "concepts").is_err());

        let l = parse_languages(LANGS.as_bytes(), "languages").unwrap();
        let c = parse_concepts(CONCEPTS.as_bytes(), "concepts").unwrap();
        let orphan = parse_forms(
            "ID,Language_ID,Concept_ID,Segments\nf1,ghost,c1,k a\n".as_bytes(),
            "forms",
        )
        .unwrap();
        assert!(Corpus::new(l.clone(), c.clone(), orphan).is_err());

        let mut dup = l.clone();
        dup.push(dup[0].clone());
        assert!(Corpus::new(dup, c, Vec::new()).is_err());
    }

    #[test]
    fn missing_column_is_reported() {
        let err = parse_languages("ID,Name\nx,y\n".as_bytes(), "languages").unwrap_err();
        assert!(matches!(err, CorpusError::MissingColumn { column: "Glottocode", .. }));
    }

    #[test]
    fn filter_is_idempotent_and_errors_when_empty() {
        let corpus = sample();
        let exclude: BTreeSet<String> = ["lang1".to_string()].into();
        let once = filter_corpus(&corpus, None, &exclude).unwrap();
        assert_eq!(once.languages.len(), 1);
        assert_eq!(once.languages[0].id, "lang2");
        let twice = filter_corpus(&once, None, &exclude).unwrap();
        assert_eq!(once.forms, twice.forms);
        assert_eq!(once.languages, twice.languages);
        assert_eq!(once.concepts, twice.concepts);

        let all: BTreeSet<String> = corpus.languages.iter().map(|l| l.id.clone()).collect();
        assert!(matches!(
            filter_corpus(&corpus, None, &all),
            Err(CorpusError::FilterEmptied { .. })
        ));
    }

    #[test]
    fn filter_drops_unused_concepts() {
        let corpus = sample();
        let keep: BTreeSet<String> = ["c2".to_string()].into();
        let filtered = filter_corpus(&corpus, Some(&keep), &BTreeSet::new()).unwrap();
        assert_eq!(filtered.concepts.len(), 1);
        assert_eq!(filtered.languages.len(), 1); // only lang2 has a c2 form
        assert_eq!(filtered.forms.len(), 1);
    }

    #[test]
    fn stats_vowel_share() {
        let corpus = sample();
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.n_phones, 7);
        // vowels: a, i, u -> 3 of 7 classified phones
        assert!((stats.vowel_share.unwrap() - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(stats.n_families, 2); // fam1 + isolate lang3
        assert_eq!(stats.n_isolates, 1);
    }

    #[test]
    fn csv_round_trip_preserves_content() {
        let corpus = sample();
        let mut lbuf = Vec::new();
        let mut cbuf = Vec::new();
        let mut fbuf = Vec::new();
        corpus.write_languages_csv(&mut lbuf).unwrap();
        corpus.write_concepts_csv(&mut cbuf).unwrap();
        corpus.write_forms_csv(&mut fbuf).unwrap();
        let back = Corpus::new(
            parse_languages(lbuf.as_slice(), "languages").unwrap(),
            parse_concepts(cbuf.as_slice(), "concepts").unwrap(),
            parse_forms(fbuf.as_slice(), "forms").unwrap(),
        )
        .unwrap();
        assert_eq!(corpus.languages, back.languages);
        assert_eq!(corpus.concepts, back.concepts);
        assert_eq!(corpus.forms, back.forms);
    }

    #[test]
    fn binary_round_trip() {
        let corpus = sample();
        let mut buf = Vec::new();
        corpus.write_binary(&mut buf).unwrap();
        let back = Corpus::read_binary(buf.as_slice()).unwrap();
        assert_eq!(corpus.languages, back.languages);
        assert_eq!(corpus.forms, back.forms);
        assert!(Corpus::read_binary(&b"NOTACORPderp"[..]).is_err());
    }
}
