//! Dataset manifests: one JSON object per line, an optional provenance
//! header on the first line, and validation of the train/test protocol.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::LineError;
use crate::{Error, Result};

/// Ground-truth class of a sample. `Live` is a bona-fide presentation,
/// `Synthetic` is a generated spoof serving as the training negative class,
/// and `Attack` is a real presentation-attack instrument, held out for test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Live,
    Synthetic,
    Attack,
}

impl Class {
    /// Bona fide means a genuine live presentation; everything else counts
    /// as an attack presentation when scoring.
    pub fn is_bona_fide(self) -> bool {
        matches!(self, Class::Live)
    }
}

/// Protocol split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset entry. Field order here is the serialized field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub class: Class,
    pub pai_species: Option<String>,
    pub subject: Option<String>,
    pub split: Split,
    pub path: String,
}

/// First-line header describing where the manifest came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub corpus: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
}

/// Species names covered by the two public corpus taxonomies. Sorted so
/// membership is a binary search.
pub const KNOWN_SPECIES: &[&str] = &[
    "dragonskin",
    "ecoflex",
    "gelafix",
    "gelatin",
    "glue",
    "knetosil",
    "latex",
    "modelling-clay",
    "mouldable-glue",
    "paper-printout",
    "photopaper",
    "playdoh",
    "silly-putty",
    "synthetic",
    "woodglue",
];

pub fn is_known_species(name: &str) -> bool {
    KNOWN_SPECIES.binary_search(&name).is_ok()
}

/// A validated set of records plus optional provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub provenance: Option<Provenance>,
    pub records: Vec<SampleRecord>,
}

/// Parse result: the manifest plus non-fatal findings (unknown species).
#[derive(Debug, Clone)]
pub struct ParsedManifest {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// Parses manifest text. All invalid lines are collected and reported
/// together; unknown species produce warnings and are kept verbatim.
pub fn parse_manifest(text: &str) -> Result<ParsedManifest> {
    let mut provenance = None;
    let mut records = Vec::new();
    let mut record_lines = Vec::new();
    let mut errors: Vec<LineError> = Vec::new();
    let mut warnings = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if records.is_empty() && provenance.is_none() && errors.is_empty() {
            // The first content line is a provenance header iff it is an
            // object without an "id" key.
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(line) {
                if value.as_object().is_some_and(|o| !o.contains_key("id")) {
                    match serde_json::from_value::<Provenance>(value) {
                        Ok(p) => provenance = Some(p),
                        Err(e) => errors.push(LineError {
                            line: lineno,
                            message: format!("bad provenance header: {e}"),
                            protocol: false,
                        }),
                    }
                    continue;
                }
            }
        }
        match serde_json::from_str::<SampleRecord>(line) {
            Ok(record) => {
                validate_record(&record, lineno, &mut errors, &mut warnings);
                records.push(record);
                record_lines.push(lineno);
            }
            Err(e) => errors.push(LineError {
                line: lineno,
                message: e.to_string(),
                protocol: false,
            }),
        }
    }

    check_cross_record(&records, &record_lines, &mut errors);
    if !errors.is_empty() {
        return Err(Error::Manifest(errors));
    }
    Ok(ParsedManifest {
        manifest: Manifest { provenance, records },
        warnings,
    })
}

fn validate_record(
    record: &SampleRecord,
    lineno: usize,
    errors: &mut Vec<LineError>,
    warnings: &mut Vec<String>,
) {
    let mut fail = |message: String, protocol: bool| {
        errors.push(LineError { line: lineno, message, protocol });
    };
    if record.id.is_empty() {
        fail("empty id".into(), false);
    }
    if record.path.is_empty() {
        fail(format!("record {} has an empty path", record.id), false);
    }
    match record.class {
        Class::Attack => {
            match &record.pai_species {
                None => fail(
                    format!("attack record {} is missing pai_species", record.id),
                    false,
                ),
                Some(species) if !is_known_species(species) => warnings.push(format!(
                    "line {lineno}: unknown pai_species \"{species}\" kept as a custom species"
                )),
                Some(_) => {}
            }
            if record.split == Split::Train {
                fail(
                    format!("attack record {} assigned to the train split", record.id),
                    true,
                );
            }
        }
        Class::Live => {
            if record.subject.is_none() {
                fail(format!("live record {} is missing subject", record.id), false);
            }
            if record.pai_species.is_some() {
                fail(format!("live record {} carries pai_species", record.id), false);
            }
        }
        Class::Synthetic => {}
    }
}

/// Duplicate ids and subjects straddling splits are only visible across
/// records, so they get a second pass.
fn check_cross_record(
    records: &[SampleRecord],
    record_lines: &[usize],
    errors: &mut Vec<LineError>,
) {
    let mut seen_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut subject_split: BTreeMap<&str, (Split, usize)> = BTreeMap::new();
    for (record, &lineno) in records.iter().zip(record_lines) {
        match seen_ids.entry(&record.id) {
            Entry::Vacant(v) => {
                v.insert(lineno);
            }
            Entry::Occupied(first) => errors.push(LineError {
                line: lineno,
                message: format!(
                    "duplicate id {} (first seen on line {})",
                    record.id,
                    first.get()
                ),
                protocol: false,
            }),
        }
        if let Some(subject) = &record.subject {
            match subject_split.entry(subject) {
                Entry::Vacant(v) => {
                    v.insert((record.split, lineno));
                }
                Entry::Occupied(first) => {
                    let (split, first_line) = *first.get();
                    if split != record.split {
                        errors.push(LineError {
                            line: lineno,
                            message: format!(
                                "subject {subject} appears in two splits (line {first_line} and line {lineno})"
                            ),
                            protocol: true,
                        });
                    }
                }
            }
        }
    }
}

/// Per-class and per-split counts for one manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub live: usize,
    pub synthetic: usize,
    pub attack_total: usize,
    pub attacks_by_species: BTreeMap<String, usize>,
    pub subjects: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Summary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("live       {:>6}  ({} subjects)\n", self.live, self.subjects));
        out.push_str(&format!("synthetic  {:>6}\n", self.synthetic));
        out.push_str(&format!("attack     {:>6}\n", self.attack_total));
        for (species, count) in &self.attacks_by_species {
            out.push_str(&format!("  {species:<16} {count:>6}\n"));
        }
        out.push_str(&format!(
            "splits     train {} / val {} / test {}\n",
            self.train, self.val, self.test
        ));
        out
    }
}

impl Manifest {
    pub fn empty() -> Manifest {
        Manifest { provenance: None, records: Vec::new() }
    }

    /// Canonical serialization: provenance first when present, then one
    /// record per line in declaration field order, each line newline
    /// terminated. Parsing this text back and rendering again reproduces
    /// the exact bytes.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.provenance {
            out.push_str(&serde_json::to_string(p).expect("provenance serializes"));
            out.push('\n');
        }
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParsedManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_manifest(&text)
    }

    pub fn summary(&self) -> Summary {
        let mut summary = Summary {
            live: 0,
            synthetic: 0,
            attack_total: 0,
            attacks_by_species: BTreeMap::new(),
            subjects: 0,
            train: 0,
            val: 0,
            test: 0,
        };
        let mut subjects = BTreeSet::new();
        for record in &self.records {
            match record.class {
                Class::Live => {
                    summary.live += 1;
                    if let Some(s) = &record.subject {
                        subjects.insert(s.clone());
                    }
                }
                Class::Synthetic => summary.synthetic += 1,
                Class::Attack => {
                    summary.attack_total += 1;
                    let species = record.pai_species.clone().unwrap_or_default();
                    *summary.attacks_by_species.entry(species).or_insert(0) += 1;
                }
            }
            match record.split {
                Split::Train => summary.train += 1,
                Split::Val => summary.val += 1,
                Split::Test => summary.test += 1,
            }
        }
        summary.subjects = subjects.len();
        summary
    }

    /// Records belonging to one split.
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, class: Class, species: Option<&str>, subject: Option<&str>, split: Split) -> SampleRecord {
        SampleRecord {
            id: id.to_string(),
            class,
            pai_species: species.map(str::to_string),
            subject: subject.map(str::to_string),
            split,
            path: format!("tensors/{id}.t64"),
        }
    }

    #[test]
    fn empty_text_parses_to_empty_manifest() {
        let parsed = parse_manifest("").unwrap();
        assert!(parsed.manifest.records.is_empty());
        assert!(parsed.manifest.provenance.is_none());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn attack_in_train_is_a_protocol_error_naming_the_line() {
        let manifest = Manifest {
            provenance: None,
            records: vec![
                record("a", Class::Live, None, Some("s00"), Split::Train),
                record("b", Class::Synthetic, None, None, Split::Train),
                record("c", Class::Attack, Some("playdoh"), None, Split::Train),
            ],
        };
        let err = parse_manifest(&manifest.render()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let Error::Manifest(errors) = err else { panic!("expected manifest error") };
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line, 3);
        assert!(errors[0].protocol);
        assert!(errors[0].message.contains("train"));
    }

    #[test]
    fn corpus_shaped_counts_survive_a_round_trip() {
        // Shape borrowed from a public contactless corpus: four attack
        // species at 1248/1104/1700/272 plus 5886 live captures over 26
        // subjects.
        let mut records = Vec::new();
        for i in 0..5886 {
            let subject = format!("s{:02}", i % 26);
            records.push(record(
                &format!("live_{subject}_{i:04}"),
                Class::Live,
                None,
                Some(&subject),
                Split::Train,
            ));
        }
        for (species, count) in
            [("ecoflex", 1248), ("photopaper", 1104), ("playdoh", 1700), ("woodglue", 272)]
        {
            for i in 0..count {
                records.push(record(
                    &format!("attack_{species}_{i:04}"),
                    Class::Attack,
                    Some(species),
                    None,
                    Split::Test,
                ));
            }
        }
        let manifest = Manifest { provenance: None, records };
        let parsed = parse_manifest(&manifest.render()).unwrap();
        assert!(parsed.warnings.is_empty());
        let summary = parsed.manifest.summary();
        assert_eq!(summary.live, 5886);
        assert_eq!(summary.subjects, 26);
        assert_eq!(summary.attack_total, 1248 + 1104 + 1700 + 272);
        assert_eq!(summary.attacks_by_species["ecoflex"], 1248);
        assert_eq!(summary.attacks_by_species["photopaper"], 1104);
        assert_eq!(summary.attacks_by_species["playdoh"], 1700);
        assert_eq!(summary.attacks_by_species["woodglue"], 272);
        let text = summary.render();
        assert!(text.contains("5886"));
        assert!(text.contains("playdoh"));
    }

    #[test]
    fn render_parse_render_is_bit_exact() {
        let manifest = Manifest {
            provenance: Some(Provenance {
                corpus: "desk-ridges".into(),
                generator_seed: Some(7),
            }),
            records: vec![
                record("a", Class::Live, None, Some("s00"), Split::Train),
                record("b", Class::Live, None, Some("s01"), Split::Test),
                record("c", Class::Synthetic, None, None, Split::Val),
                record("d", Class::Attack, Some("woodglue"), None, Split::Test),
            ],
        };
        let once = manifest.render();
        let parsed = parse_manifest(&once).unwrap();
        assert_eq!(parsed.manifest, manifest);
        assert_eq!(parsed.manifest.render(), once);
    }

    #[test]
    fn unknown_species_warns_but_is_preserved() {
        let manifest = Manifest {
            provenance: None,
            records: vec![record("x", Class::Attack, Some("obsidian-gel"), None, Split::Test)],
        };
        let parsed = parse_manifest(&manifest.render()).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("line 1"));
        assert!(parsed.warnings[0].contains("obsidian-gel"));
        assert_eq!(parsed.manifest.records[0].pai_species.as_deref(), Some("obsidian-gel"));
    }

    #[test]
    fn known_species_table_is_sorted_and_complete() {
        let mut sorted = KNOWN_SPECIES.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, KNOWN_SPECIES);
        for s in ["ecoflex", "photopaper", "playdoh", "woodglue", "synthetic"] {
            assert!(is_known_species(s));
        }
        for s in ["dragonskin", "gelafix", "knetosil", "modelling-clay", "silly-putty"] {
            assert!(is_known_species(s));
        }
        assert!(!is_known_species("obsidian-gel"));
    }

    #[test]
    fn live_without_subject_is_rejected() {
        let manifest = Manifest {
            provenance: None,
            records: vec![record("x", Class::Live, None, None, Split::Train)],
        };
        let err = parse_manifest(&manifest.render()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("missing subject"));
    }

    #[test]
    fn attack_without_species_is_rejected() {
        let manifest = Manifest {
            provenance: None,
            records: vec![record("x", Class::Attack, None, None, Split::Test)],
        };
        let err = parse_manifest(&manifest.render()).unwrap_err();
        assert!(err.to_string().contains("missing pai_species"));
    }

    #[test]
    fn subject_straddling_two_splits_is_a_protocol_error() {
        let manifest = Manifest {
            provenance: None,
            records: vec![
                record("a", Class::Live, None, Some("s03"), Split::Train),
                record("b", Class::Live, None, Some("s03"), Split::Test),
            ],
        };
        let err = parse_manifest(&manifest.render()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("s03"));
    }

    #[test]
    fn duplicate_ids_are_rejected_with_both_lines() {
        let manifest = Manifest {
            provenance: None,
            records: vec![
                record("same", Class::Live, None, Some("s00"), Split::Train),
                record("same", Class::Live, None, Some("s00"), Split::Train),
            ],
        };
        let err = parse_manifest(&manifest.render()).unwrap_err();
        assert!(err.to_string().contains("duplicate id same"));
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn malformed_json_reports_its_line_number() {
        let text = concat!(
            r#"{"id":"a","class":"live","pai_species":null,"subject":"s00","split":"train","path":"p"}"#,
            "\nnot json at all\n"
        );
        let err = parse_manifest(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let Error::Manifest(errors) = err else { panic!("expected manifest error") };
        assert_eq!(errors[0].line, 2);
    }

    #[test]
    fn provenance_header_is_optional() {
        let with = "{\"corpus\":\"x\",\"generator_seed\":9}\n";
        let parsed = parse_manifest(with).unwrap();
        assert_eq!(parsed.manifest.provenance.as_ref().unwrap().corpus, "x");
        assert_eq!(parsed.manifest.provenance.as_ref().unwrap().generator_seed, Some(9));

        let without = Manifest {
            provenance: None,
            records: vec![record("a", Class::Live, None, Some("s00"), Split::Train)],
        };
        let parsed = parse_manifest(&without.render()).unwrap();
        assert!(parsed.manifest.provenance.is_none());
        assert_eq!(parsed.manifest.records.len(), 1);
    }

    #[test]
    fn unknown_record_field_is_rejected() {
        let text = r#"{"id":"a","class":"live","pai_species":null,"subject":"s0","split":"train","path":"p","extra":1}"#;
        let err = parse_manifest(text).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn split_filter_returns_matching_records() {
        let manifest = Manifest {
            provenance: None,
            records: vec![
                record("a", Class::Live, None, Some("s00"), Split::Train),
                record("b", Class::Attack, Some("playdoh"), None, Split::Test),
            ],
        };
        assert_eq!(manifest.split(Split::Train).len(), 1);
        assert_eq!(manifest.split(Split::Test)[0].id, "b");
        assert!(manifest.split(Split::Val).is_empty());
    }
}
